//! Figure reproduction: each id maps to sweeps, single simulations or tuning
//! runs whose outputs are reduced to plot-ready CSV files.

use std::fs;
use std::path::Path;

use clap::ValueEnum;
use serde::Serialize;

use pkgem::geometry::{make_scenario, PackageScenario, Preset, Scale, ScenarioOverrides};
use pkgem::pipeline::{plan, simulate, tune, PlanEstimate};
use pkgem::sweep::{report_optimum, run_sweep, PointStatus, SweepAxis, SweepOptions, SweepParam, SweepPlan};
use pkgem::units::{GHZ, MM};

use crate::{exit_for, install_interrupt, to_json, write, CliError, EXIT_BUDGET, EXIT_OK};

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Figure {
    /// Worst-case coupling against silicon thickness.
    #[value(name = "fig3a")]
    Fig3a,
    /// Worst-case coupling against heat-spreader thickness.
    #[value(name = "fig3b")]
    Fig3b,
    /// Return loss of monopoles tuned at several centre frequencies.
    #[value(name = "fig5")]
    Fig5,
    /// Silicon by spreader co-design surface at 60 GHz.
    #[value(name = "fig6a")]
    Fig6a,
    /// Silicon by spreader co-design surface at 100 GHz.
    #[value(name = "fig6b")]
    Fig6b,
    /// Single-chip path loss: default, optimized and suboptimal stacks.
    #[value(name = "fig8")]
    Fig8,
    /// Path loss of the interposer and MCM packages.
    #[value(name = "fig9")]
    Fig9,
    /// Co-design surface without walls at 60 GHz.
    #[value(name = "fig10a")]
    Fig10a,
    /// Co-design surface without walls at 100 GHz.
    #[value(name = "fig10b")]
    Fig10b,
    /// Worst-case coupling against centre frequency.
    #[value(name = "fig11")]
    Fig11,
}

impl Figure {
    pub fn id(self) -> &'static str {
        match self {
            Figure::Fig3a => "fig3a",
            Figure::Fig3b => "fig3b",
            Figure::Fig5 => "fig5",
            Figure::Fig6a => "fig6a",
            Figure::Fig6b => "fig6b",
            Figure::Fig8 => "fig8",
            Figure::Fig9 => "fig9",
            Figure::Fig10a => "fig10a",
            Figure::Fig10b => "fig10b",
            Figure::Fig11 => "fig11",
        }
    }
}

pub const SILICON_AXIS_MM: [f64; 5] = [0.1, 0.2, 0.4, 0.55, 0.7];
pub const SPREADER_AXIS_MM: [f64; 5] = [0.0, 0.25, 0.5, 0.8, 1.0];
pub const FIG3A_SILICON_MM: [f64; 5] = [0.1, 0.25, 0.4, 0.55, 0.7];
pub const FIG3B_SPREADER_MM: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
pub const FIG5_GHZ: [f64; 3] = [60.0, 100.0, 140.0];
pub const FIG11_GHZ: [f64; 5] = [60.0, 80.0, 100.0, 120.0, 140.0];

enum Job {
    Sweep { name: String, plan: SweepPlan },
    Single { name: String, scenario: PackageScenario },
    Tune { name: String, scenario: PackageScenario },
}

impl Job {
    fn name(&self) -> &str {
        match self {
            Job::Sweep { name, .. } | Job::Single { name, .. } | Job::Tune { name, .. } => name,
        }
    }
}

fn mm(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x * MM).collect()
}

fn scenario(preset: Preset, scale: Scale, si: Option<f64>, sp: Option<f64>, f: Option<f64>) -> Result<PackageScenario, CliError> {
    make_scenario(
        preset,
        &ScenarioOverrides {
            scale,
            silicon_thickness: si.map(|v| v * MM),
            spreader_thickness: sp.map(|v| v * MM),
            f_center: f.map(|v| v * GHZ),
            bandwidth: f.map(|v| v * GHZ / 3.0),
            ..Default::default()
        },
    )
    .map_err(|e| CliError::invalid(e.to_string()))
}

fn sweep_plan(preset: Preset, scale: Scale, f_ghz: Option<f64>, axes: Vec<SweepAxis>, baseline: Option<Vec<f64>>) -> SweepPlan {
    SweepPlan {
        preset,
        overrides: ScenarioOverrides {
            scale,
            f_center: f_ghz.map(|v| v * GHZ),
            bandwidth: f_ghz.map(|v| v * GHZ / 3.0),
            ..Default::default()
        },
        axes,
        retune: true,
        baseline,
    }
}

fn surface(preset: Preset, scale: Scale, f_ghz: f64) -> SweepPlan {
    sweep_plan(
        preset,
        scale,
        Some(f_ghz),
        vec![
            SweepAxis { param: SweepParam::SiliconThickness, values: mm(&SILICON_AXIS_MM) },
            SweepAxis { param: SweepParam::SpreaderThickness, values: mm(&SPREADER_AXIS_MM) },
        ],
        Some(vec![0.2 * MM, 0.8 * MM]),
    )
}

fn jobs(fig: Figure, scale: Scale) -> Result<Vec<Job>, CliError> {
    use Preset::*;
    Ok(match fig {
        Figure::Fig3a => vec![Job::Sweep {
            name: "silicon".into(),
            plan: sweep_plan(
                SingleChipWalled,
                scale,
                None,
                vec![SweepAxis { param: SweepParam::SiliconThickness, values: mm(&FIG3A_SILICON_MM) }],
                None,
            ),
        }],
        Figure::Fig3b => vec![Job::Sweep {
            name: "spreader".into(),
            plan: sweep_plan(
                SingleChipWalled,
                scale,
                None,
                vec![SweepAxis { param: SweepParam::SpreaderThickness, values: mm(&FIG3B_SPREADER_MM) }],
                None,
            ),
        }],
        Figure::Fig5 => FIG5_GHZ
            .iter()
            .map(|&f| {
                Ok(Job::Tune { name: format!("tune_{f}ghz"), scenario: scenario(SingleChipWalled, scale, None, None, Some(f))? })
            })
            .collect::<Result<_, CliError>>()?,
        Figure::Fig6a => vec![Job::Sweep { name: "surface".into(), plan: surface(SingleChipWalled, scale, 60.0) }],
        Figure::Fig6b => vec![Job::Sweep { name: "surface".into(), plan: surface(SingleChipWalled, scale, 100.0) }],
        Figure::Fig10a => vec![Job::Sweep { name: "surface".into(), plan: surface(SingleChipOpen, scale, 60.0) }],
        Figure::Fig10b => vec![Job::Sweep { name: "surface".into(), plan: surface(SingleChipOpen, scale, 100.0) }],
        Figure::Fig8 => vec![
            Job::Single { name: "default".into(), scenario: scenario(SingleChipWalled, scale, None, None, None)? },
            Job::Single { name: "optimized".into(), scenario: scenario(SingleChipWalled, scale, Some(0.1), Some(0.85), None)? },
            Job::Single { name: "suboptimal".into(), scenario: scenario(SingleChipWalled, scale, Some(0.7), Some(0.0), None)? },
        ],
        Figure::Fig9 => vec![
            Job::Single { name: "interposer".into(), scenario: scenario(Interposer2x2, scale, None, None, None)? },
            Job::Single { name: "mcm".into(), scenario: scenario(Mcm2x2, scale, None, None, None)? },
        ],
        Figure::Fig11 => vec![Job::Sweep {
            name: "frequency".into(),
            plan: sweep_plan(
                SingleChipWalled,
                scale,
                None,
                vec![SweepAxis { param: SweepParam::FCenter, values: FIG11_GHZ.iter().map(|f| f * GHZ).collect() }],
                None,
            ),
        }],
    })
}

#[derive(Serialize)]
struct JobEstimate {
    name: String,
    points: usize,
    max_cells: usize,
    wall_time_s: f64,
}

#[derive(Serialize)]
struct PlanDoc {
    figure: Figure,
    scale: Scale,
    jobs: Vec<JobEstimate>,
    total_wall_time_s: f64,
    budget_wall_time_s: f64,
    executed: bool,
}

fn estimate(job: &Job, opts: &SweepOptions) -> Result<JobEstimate, CliError> {
    let mut o = opts.simulate.clone();
    o.budget.max_cells = usize::MAX;
    o.mesh.max_cells = usize::MAX;
    let scenarios: Vec<(PackageScenario, bool)> = match job {
        Job::Sweep { plan, .. } => plan
            .points()
            .iter()
            .map(|v| plan.scenario_at(v).map(|s| (s, plan.retune)))
            .collect::<Result<_, String>>()
            .map_err(CliError::invalid)?,
        Job::Single { scenario, .. } => vec![(scenario.clone(), o.retune)],
        Job::Tune { scenario, .. } => vec![(scenario.clone(), true)],
    };
    let mut out = JobEstimate { name: job.name().to_string(), points: scenarios.len(), max_cells: 0, wall_time_s: 0.0 };
    for (s, retune) in scenarios {
        o.retune = retune;
        let (_, e): (_, PlanEstimate) = plan(&s, &o)?;
        let mut wall = e.wall_time_s;
        if let Job::Tune { .. } = job {
            wall *= pkgem::pipeline::NOMINAL_TUNE_EVALUATIONS as f64 / e.runs as f64;
        }
        out.max_cells = out.max_cells.max(e.cells);
        out.wall_time_s += wall;
    }
    Ok(out)
}

#[derive(Serialize, Default)]
struct Summary {
    figure: Option<Figure>,
    scale: Option<Scale>,
    entries: Vec<serde_json::Value>,
    checks: Vec<Check>,
}

#[derive(Serialize)]
struct Check {
    claim: String,
    holds: bool,
}

pub fn reproduce(fig: Figure, scale: Scale, opts: &SweepOptions, explicit_budget: bool, out: &Path) -> Result<i32, CliError> {
    let jobs = jobs(fig, scale)?;
    let estimates = jobs.iter().map(|j| estimate(j, opts)).collect::<Result<Vec<_>, _>>()?;
    let total: f64 = estimates.iter().map(|e| e.wall_time_s).sum();
    let budget = opts.simulate.budget.max_wall_time;
    let cells_ok = estimates.iter().all(|e| e.max_cells <= opts.simulate.budget.max_cells);
    let fits = cells_ok && total <= budget;
    let run = match scale {
        Scale::Full => explicit_budget && fits,
        Scale::Desk => fits,
    };
    let doc = PlanDoc { figure: fig, scale, jobs: estimates, total_wall_time_s: total, budget_wall_time_s: budget, executed: run };
    write(&out.join("plan.json"), &to_json(&doc))?;
    if !run {
        return match scale {
            Scale::Full => {
                log::info!("{}: estimated {:.0} s of solver time; plan written, nothing run", fig.id(), total);
                Ok(EXIT_OK)
            }
            Scale::Desk => Err(CliError {
                code: EXIT_BUDGET,
                kind: "budget",
                message: format!("{}: estimated {total:.0} s exceeds the budget of {budget:.0} s", fig.id()),
            }),
        };
    }

    let stop = install_interrupt();
    let mut summary = Summary { figure: Some(fig), scale: Some(scale), ..Default::default() };
    let mut unconverged = false;
    let mut fits_by_name: Vec<(String, f64)> = Vec::new();
    for job in &jobs {
        let dir = out.join(job.name());
        match job {
            Job::Sweep { plan, .. } => {
                let r = run_sweep(plan, &dir, opts, Some(&stop))?;
                unconverged |= r.any_unconverged();
                let csv = r.surface_csv();
                write(&out.join(format!("{}.csv", fig.id())), &with_improvement(fig, &r, &csv))?;
                if let Some(b) = &plan.baseline {
                    if let Ok(o) = report_optimum(&r, b) {
                        summary.entries.push(serde_json::to_value(&o).expect("optimum"));
                        summary.checks.push(Check {
                            claim: "co-designed optimum improves on the default stack".into(),
                            holds: o.improvement_db > 0.0,
                        });
                    }
                }
                let done: Vec<_> = r.records.iter().filter(|p| p.status == PointStatus::Done).collect();
                let first = done.first().and_then(|p| p.s_min_db);
                let last = done.last().and_then(|p| p.s_min_db);
                match (fig, first, last) {
                    (Figure::Fig3a, Some(a), Some(b)) => summary.checks.push(Check {
                        claim: "thinnest silicon beats thickest silicon".into(),
                        holds: a > b,
                    }),
                    (Figure::Fig3b, Some(a), Some(b)) => summary.checks.push(Check {
                        claim: "thickest spreader beats no spreader".into(),
                        holds: b > a,
                    }),
                    (Figure::Fig11, Some(a), Some(b)) => summary.checks.push(Check {
                        claim: "worst-case coupling does not improve with frequency".into(),
                        holds: b <= a,
                    }),
                    _ => {}
                }
            }
            Job::Single { name, scenario } => {
                let o = simulate(scenario, &opts.simulate)?;
                unconverged |= o.unconverged();
                o.write_all(&dir).map_err(|e| CliError::invalid(e.to_string()))?;
                fs::copy(dir.join("pathloss.csv"), out.join(format!("pathloss_{name}.csv")))
                    .map_err(|e| CliError::invalid(e.to_string()))?;
                if let Some(f) = &o.report.fit {
                    fits_by_name.push((name.clone(), f.n));
                }
                summary.entries.push(serde_json::json!({
                    "name": name,
                    "s_min_db": o.report.s_min_db,
                    "fit": o.report.fit,
                    "tuned_length_m": o.scenario.monopole.length,
                }));
            }
            Job::Tune { name, scenario } => {
                let mut so = opts.simulate.clone();
                so.retune = true;
                let t = tune(scenario, &so)?;
                unconverged |= !t.stats.converged;
                write(&dir.join("tuning.json"), &to_json(&t.summary))?;
                write(&out.join(format!("return_loss_{name}.csv")), &t.return_loss_csv())?;
                let min = t.return_loss.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
                summary.entries.push(serde_json::json!({
                    "name": name,
                    "f_center_hz": scenario.band.f_center,
                    "tuned_length_m": t.summary.length,
                    "min_return_loss_db": min,
                }));
                summary.checks.push(Check { claim: format!("{name} reaches -10 dB"), holds: min <= -10.0 });
            }
        }
    }
    let n = |k: &str| fits_by_name.iter().find(|(name, _)| name == k).map(|p| p.1);
    if let (Some(i), Some(m)) = (n("interposer"), n("mcm")) {
        summary.checks.push(Check { claim: "MCM exponent exceeds interposer exponent".into(), holds: m > i });
    }
    if let (Some(o), Some(d)) = (n("optimized"), n("default")) {
        summary.checks.push(Check { claim: "optimized exponent below default exponent".into(), holds: o < d });
    }
    write(&out.join("summary.json"), &to_json(&summary))?;
    Ok(exit_for(unconverged))
}

/// Adds an improvement column over the reference point for the
/// one-dimensional thickness figures.
fn with_improvement(fig: Figure, r: &pkgem::sweep::SweepResult, csv: &str) -> String {
    let done: Vec<f64> =
        r.records.iter().filter(|p| p.status == PointStatus::Done).filter_map(|p| p.s_min_db).collect();
    let reference = match fig {
        Figure::Fig3a => done.last().copied(),
        Figure::Fig3b => done.first().copied(),
        _ => None,
    };
    let Some(reference) = reference else { return csv.to_string() };
    let mut out = String::new();
    for (n, line) in csv.lines().enumerate() {
        if n == 0 {
            out.push_str(&format!("{line},improvement_db\n"));
        } else {
            out.push_str(&format!("{line},{}\n", done[n - 1] - reference));
        }
    }
    out
}
