//! One scenario end to end: mesh, optional monopole tuning, one excitation
//! run per port, S-parameter extraction and the channel report.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{scenario_report, AverageMode, ChannelError, ChannelReport};
use crate::fdtd::{DurationPolicy, PortRecord, RunStats, Simulation, SolverError, SourceWaveform};
use crate::geometry::PackageScenario;
use crate::mesh::{estimate_cost, generate_mesh, MeshError, MeshOptions, YeeGrid};
use crate::ports::touchstone::{extension, read_touchstone, write_touchstone};
use crate::ports::{
    extract_sparams, frequency_grid, return_loss_curve, tune_monopole, PortError, Provenance, SParameterSet,
    SolverSettings, TuneEvaluation, TuneOptions, DB_FLOOR, MIN_FREQUENCIES,
};
use crate::ports::wave_spectra;
use crate::units::power_db;

/// Throughput assumed when predicting wall time (cell updates per second).
pub const NOMINAL_THROUGHPUT: f64 = 1.0e8;
/// Ring-down length assumed when predicting run time, in periods of the
/// centre frequency.
pub const NOMINAL_RINGDOWN_PERIODS: f64 = 200.0;
/// Evaluations assumed for a tuning search.
pub const NOMINAL_TUNE_EVALUATIONS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub max_cells: usize,
    pub max_memory: usize,
    /// Seconds.
    pub max_wall_time: f64,
}

impl Default for Budget {
    fn default() -> Self {
        Self { max_cells: 20_000_000, max_memory: 4 << 30, max_wall_time: 48.0 * 3600.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanEstimate {
    pub ports: usize,
    pub cells: usize,
    pub memory_bytes: usize,
    pub runs: usize,
    pub steps_per_run: usize,
    pub wall_time_s: f64,
    pub flops: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("budget exceeded: {0}")]
    Budget(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Port(#[from] PortError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateOptions {
    pub mesh: MeshOptions,
    pub policy: DurationPolicy,
    pub retune: bool,
    pub n_frequencies: usize,
    pub average_mode: AverageMode,
    pub budget: Budget,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            mesh: MeshOptions::default(),
            policy: DurationPolicy::default(),
            retune: true,
            n_frequencies: MIN_FREQUENCIES,
            average_mode: AverageMode::Power,
            budget: Budget::default(),
        }
    }
}

/// Meshes `s` and predicts the cost of simulating it.
pub fn plan(s: &PackageScenario, opts: &SimulateOptions) -> Result<(YeeGrid, PlanEstimate), PipelineError> {
    let mut mesh_opts = opts.mesh.clone();
    mesh_opts.max_cells = mesh_opts.max_cells.min(opts.budget.max_cells);
    let grid = match generate_mesh(s, &mesh_opts) {
        Err(MeshError::CellBudget { cells, budget }) => {
            return Err(PipelineError::Budget(format!("{cells} cells exceed the limit of {budget}")))
        }
        other => other?,
    };
    let waveform = SourceWaveform::gaussian_sine(s.band.f_center, s.band.width(), 1.0);
    let run_time = waveform.end_time() + NOMINAL_RINGDOWN_PERIODS / s.band.f_center;
    let cost = estimate_cost(&grid, run_time);
    let ports = grid.ports.len();
    let runs = ports + if opts.retune { NOMINAL_TUNE_EVALUATIONS - 1 } else { 0 };
    let steps = cost.step_count.min(opts.policy.max_steps);
    let est = PlanEstimate {
        ports,
        cells: cost.cell_count,
        memory_bytes: cost.memory_bytes * rayon::current_num_threads().min(ports.max(1)),
        runs,
        steps_per_run: steps,
        wall_time_s: (cost.cell_count * steps * runs) as f64 / NOMINAL_THROUGHPUT,
        flops: cost.flop_estimate * runs as f64,
    };
    Ok((grid, est))
}

pub fn check_budget(est: &PlanEstimate, budget: &Budget) -> Result<(), PipelineError> {
    if est.cells > budget.max_cells {
        return Err(PipelineError::Budget(format!("{} cells exceed the limit of {}", est.cells, budget.max_cells)));
    }
    if est.memory_bytes > budget.max_memory {
        return Err(PipelineError::Budget(format!(
            "{} bytes of field storage exceed the limit of {}",
            est.memory_bytes, budget.max_memory
        )));
    }
    if est.wall_time_s > budget.max_wall_time {
        return Err(PipelineError::Budget(format!(
            "predicted {:.0} s of solver time exceeds the limit of {:.0} s",
            est.wall_time_s, budget.max_wall_time
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningSummary {
    pub port: usize,
    pub length: f64,
    pub s11_db: f64,
    pub matched: bool,
    pub evaluations: Vec<TuneEvaluation>,
}

#[derive(Debug, Clone)]
pub struct SimulationOutcome {
    /// Scenario with the monopole length actually simulated.
    pub scenario: PackageScenario,
    pub grid: YeeGrid,
    /// S-parameters as exported; the report is computed from these.
    pub sparams: SParameterSet,
    pub report: ChannelReport,
    pub tuning: Option<TuningSummary>,
    pub runs: Vec<RunStats>,
    pub estimate: PlanEstimate,
}

impl SimulationOutcome {
    pub fn s_min_db(&self) -> f64 {
        self.report.s_min_db
    }

    pub fn unconverged(&self) -> bool {
        self.sparams.unconverged()
    }

    pub fn touchstone(&self) -> String {
        write_touchstone(&self.sparams)
    }

    pub fn touchstone_name(&self) -> String {
        format!("result.{}", extension(self.sparams.n_ports))
    }

    /// Feed points as `port,x_m,y_m,z_m` (1-based ports).
    pub fn positions_csv(&self) -> String {
        positions_csv(&self.grid.ports.iter().map(|p| p.position).collect::<Vec<_>>())
    }

    /// `f_ghz` followed by `|S_ii|` in dB for every port.
    pub fn return_loss_csv(&self) -> String {
        let n = self.sparams.n_ports;
        let curves: Vec<Vec<(f64, f64)>> =
            (0..n).map(|p| return_loss_curve(&self.sparams, p).expect("port in range")).collect();
        let mut s = String::from("f_ghz");
        for p in 0..n {
            s.push_str(&format!(",s{}{}_db", p + 1, p + 1));
        }
        s.push('\n');
        for f in 0..self.sparams.frequencies.len() {
            s.push_str(&format!("{}", self.sparams.frequencies[f] / 1e9));
            for c in &curves {
                s.push_str(&format!(",{}", c[f].1));
            }
            s.push('\n');
        }
        s
    }

    /// Writes the Touchstone file, report, CSV companions, feed positions,
    /// return-loss curves and (when tuned) the tuning trace.
    pub fn write_all(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(self.touchstone_name()), self.touchstone())?;
        self.report.write_all(dir)?;
        fs::write(dir.join("positions.csv"), self.positions_csv())?;
        fs::write(dir.join("return_loss.csv"), self.return_loss_csv())?;
        fs::write(dir.join("scenario.json"), serde_json::to_string_pretty(&self.scenario).expect("scenario") + "\n")?;
        if let Some(t) = &self.tuning {
            fs::write(dir.join("tuning.json"), serde_json::to_string_pretty(t).expect("tuning") + "\n")?;
        }
        Ok(())
    }
}

pub fn positions_csv(positions: &[[f64; 3]]) -> String {
    let mut s = String::from("port,x_m,y_m,z_m\n");
    for (p, x) in positions.iter().enumerate() {
        s.push_str(&format!("{},{},{},{}\n", p + 1, x[0], x[1], x[2]));
    }
    s
}

/// Round-trips a set through its Touchstone text so in-process results match
/// re-analysis of the exported file exactly.
pub fn as_exported(sp: &SParameterSet) -> SParameterSet {
    read_touchstone(&write_touchstone(sp), sp.n_ports).expect("own Touchstone output parses")
}

/// Runs the full pipeline for `s`.
pub fn simulate(s: &PackageScenario, opts: &SimulateOptions) -> Result<SimulationOutcome, PipelineError> {
    let (grid, estimate) = plan(s, opts)?;
    check_budget(&estimate, &opts.budget)?;
    let waveform = SourceWaveform::gaussian_sine(s.band.f_center, s.band.width(), 1.0);
    let n = grid.ports.len();

    let mut scenario = s.clone();
    let (grid, tuning, reused) = if opts.retune {
        let t = tune_monopole(
            &grid,
            &TuneOptions {
                port: 0,
                f_center: s.band.f_center,
                bandwidth: s.band.width(),
                initial_length: s.monopole.length,
                headroom: s.headroom(),
            },
            &opts.policy,
        )?;
        scenario.monopole.length = t.length;
        let summary =
            TuningSummary { port: 0, length: t.length, s11_db: t.s11_db, matched: t.matched, evaluations: t.evaluations };
        (t.grid, Some(summary), Some((t.best_run, t.best_stats)))
    } else {
        if let Some(l) = grid.realised_length() {
            scenario.monopole.length = l;
        }
        (grid, None, None)
    };

    let fresh: Vec<usize> = (0..n).filter(|&j| !(j == 0 && reused.is_some())).collect();
    let results: Result<Vec<(usize, Vec<PortRecord>, RunStats)>, SolverError> = fresh
        .par_iter()
        .map(|&j| {
            let r = Simulation::new(&grid, Some((j, waveform)))?.run(&opts.policy, &[])?;
            Ok((j, r.records, r.stats))
        })
        .collect();
    let mut runs: Vec<Option<(Vec<PortRecord>, RunStats)>> = vec![None; n];
    if let Some((rec, st)) = reused {
        runs[0] = Some((rec, st));
    }
    for (j, rec, st) in results? {
        runs[j] = Some((rec, st));
    }
    let (records, stats): (Vec<Vec<PortRecord>>, Vec<RunStats>) =
        runs.into_iter().map(|r| r.expect("every port excited")).unzip();

    let mut provenance = Provenance::for_scenario(s);
    provenance.mesh = Some(grid.summary());
    provenance.solver = Some(SolverSettings::new(&opts.policy, &grid, s.band.width()));
    provenance.monopole_length = grid.realised_length();
    provenance.unconverged_runs = stats.iter().enumerate().filter(|(_, st)| !st.converged).map(|(j, _)| j).collect();

    let freqs = frequency_grid(s.band.f_min, s.band.f_max, opts.n_frequencies.max(MIN_FREQUENCIES));
    let raw = extract_sparams(&records, grid.port_impedance, &freqs, provenance)?;
    let sparams = as_exported(&raw);
    let positions: Vec<[f64; 3]> = grid.ports.iter().map(|p| p.position).collect();
    let report = scenario_report(
        &sparams,
        Some(&positions),
        [sparams.frequencies[0], *sparams.frequencies.last().expect("non-empty grid")],
        opts.average_mode,
    )?;
    Ok(SimulationOutcome { scenario, grid, sparams, report, tuning, runs: stats, estimate })
}

/// Parses `port,x_m,y_m,z_m` rows written by [`positions_csv`].
pub fn parse_positions_csv(text: &str) -> Result<Vec<[f64; 3]>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("port")) {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 4 {
            return Err(format!("line {}: expected 4 columns, found {}", n + 1, cols.len()));
        }
        let port: usize = cols[0].parse().map_err(|_| format!("line {}: bad port `{}`", n + 1, cols[0]))?;
        if port != out.len() + 1 {
            return Err(format!("line {}: ports must be listed in order from 1", n + 1));
        }
        let mut p = [0.0; 3];
        for (k, c) in cols[1..].iter().enumerate() {
            p[k] = c.parse().map_err(|_| format!("line {}: bad coordinate `{c}`", n + 1))?;
        }
        out.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub scenario: PackageScenario,
    pub summary: TuningSummary,
    /// `(f, |S11| dB)` of the tuned port over the band.
    pub return_loss: Vec<(f64, f64)>,
    pub stats: RunStats,
}

impl TuneOutcome {
    pub fn return_loss_csv(&self) -> String {
        let mut s = String::from("f_ghz,s11_db\n");
        for (f, db) in &self.return_loss {
            s.push_str(&format!("{},{}\n", f / 1e9, db));
        }
        s
    }
}

/// Tunes the monopoles of `s` at port 1 without running the other ports.
pub fn tune(s: &PackageScenario, opts: &SimulateOptions) -> Result<TuneOutcome, PipelineError> {
    let (grid, mut estimate) = plan(s, opts)?;
    estimate.runs = NOMINAL_TUNE_EVALUATIONS;
    estimate.wall_time_s = (estimate.cells * estimate.steps_per_run * estimate.runs) as f64 / NOMINAL_THROUGHPUT;
    check_budget(&estimate, &opts.budget)?;
    let t = tune_monopole(
        &grid,
        &TuneOptions {
            port: 0,
            f_center: s.band.f_center,
            bandwidth: s.band.width(),
            initial_length: s.monopole.length,
            headroom: s.headroom(),
        },
        &opts.policy,
    )?;
    let freqs = frequency_grid(s.band.f_min, s.band.f_max, opts.n_frequencies.max(MIN_FREQUENCIES));
    let (a, b) = wave_spectra(&t.best_run[0], t.grid.port_impedance, &freqs);
    let return_loss =
        freqs.iter().zip(a.iter().zip(&b)).map(|(&f, (a, b))| (f, power_db((b / a).norm_sqr(), DB_FLOOR))).collect();
    let mut scenario = s.clone();
    scenario.monopole.length = t.length;
    Ok(TuneOutcome {
        scenario,
        summary: TuningSummary { port: 0, length: t.length, s11_db: t.s11_db, matched: t.matched, evaluations: t.evaluations },
        return_loss,
        stats: t.best_stats,
    })
}
