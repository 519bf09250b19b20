//! `pkgem` command-line front end.
//!
//! Exit codes: 0 success, 2 invalid input, 3 budget refusal, 4 solver
//! failure, 5 results written but some excitation runs did not converge,
//! 130 interrupted sweep (completed points are kept).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pkgem::channel::{scenario_report, AverageMode};
use pkgem::fdtd::DurationPolicy;
use pkgem::geometry::{make_scenario, PackageScenario, Preset, Scale, ScenarioOverrides};
use pkgem::mesh::{generate_mesh, MeshError};
use pkgem::pipeline::{parse_positions_csv, simulate, tune, Budget, PipelineError, SimulateOptions};
use pkgem::ports::touchstone::read_touchstone;
use pkgem::ports::PortError;
use pkgem::scenario_file::{parse_scenario, parse_sweep_plan};
use pkgem::sweep::{run_sweep, SweepError, SweepOptions};

mod figures;

pub use figures::Figure;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;
pub const EXIT_SOLVER: i32 = 4;
pub const EXIT_UNCONVERGED: i32 = 5;
pub const EXIT_INTERRUPTED: i32 = 130;

#[derive(Parser, Debug)]
#[command(name = "pkgem", version, about = "Wireless channel simulation inside chip packages")]
pub struct Cli {
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info", env = "PKGEM_LOG")]
    pub log_level: String,
    /// Worker threads for the solver (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Mesh, tune, run every port and write Touchstone plus reports.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        solve: SolveArgs,
        #[command(flatten)]
        budget: BudgetArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also write the grid edges and material volume under `mesh/`.
        #[arg(long)]
        dump_mesh: bool,
    },
    /// Channel report from an existing Touchstone file.
    Analyze {
        #[arg(long)]
        touchstone: PathBuf,
        /// `port,x_m,y_m,z_m` feed points; needed for the path-loss fit.
        #[arg(long)]
        positions: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Average::Power)]
        average: Average,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tune the monopole length only.
    Tune {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        solve: SolveArgs,
        #[command(flatten)]
        budget: BudgetArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run (or resume) a sweep plan.
    Sweep {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[command(flatten)]
        solve: SolveArgs,
        #[command(flatten)]
        budget: BudgetArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a scenario, sweep plan or Touchstone file and print a summary.
    Validate {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value = "full")]
        scale: String,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        touchstone: Option<PathBuf>,
    },
    /// Regenerate the data behind one figure.
    Reproduce {
        #[arg(value_enum)]
        figure: Figure,
        #[arg(long, default_value = "desk")]
        scale: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[command(flatten)]
        solve: SolveArgs,
        #[command(flatten)]
        budget: BudgetArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
pub struct ScenarioArgs {
    /// Scenario TOML file.
    #[arg(long, conflicts_with = "preset")]
    pub scenario: Option<PathBuf>,
    /// single_chip_walled, single_chip_open, interposer_2x2 or mcm_2x2.
    #[arg(long)]
    pub preset: Option<String>,
    /// full or desk (presets only).
    #[arg(long, default_value = "full")]
    pub scale: String,
}

#[derive(Args, Debug, Clone)]
pub struct SolveArgs {
    /// Keep the scenario's monopole length instead of tuning it.
    #[arg(long)]
    pub no_retune: bool,
    #[arg(long, default_value_t = pkgem::ports::MIN_FREQUENCIES)]
    pub frequencies: usize,
    #[arg(long, value_enum, default_value_t = Average::Power)]
    pub average: Average,
    /// Lateral cells per minimum wavelength.
    #[arg(long)]
    pub resolution: Option<f64>,
    /// Step cap per excitation run.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Seed for randomized helpers; the physics is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone, Default)]
pub struct BudgetArgs {
    #[arg(long, env = "PKGEM_MAX_CELLS")]
    pub max_cells: Option<usize>,
    /// Bytes; accepts K, M, G suffixes.
    #[arg(long, env = "PKGEM_MAX_MEMORY")]
    pub max_memory: Option<String>,
    /// Seconds of predicted solver time.
    #[arg(long, env = "PKGEM_MAX_WALL_TIME")]
    pub max_wall_time: Option<f64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Average {
    Power,
    Db,
}

impl From<Average> for AverageMode {
    fn from(a: Average) -> Self {
        match a {
            Average::Power => AverageMode::Power,
            Average::Db => AverageMode::Db,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self { code: EXIT_INVALID, kind: "invalid_input", message: msg.into() }
    }

    fn io(e: std::io::Error, what: &Path) -> Self {
        Self { code: EXIT_INVALID, kind: "io", message: format!("{}: {e}", what.display()) }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let (code, kind) = match &e {
            PipelineError::Budget(_) | PipelineError::Mesh(MeshError::CellBudget { .. }) => (EXIT_BUDGET, "budget"),
            PipelineError::Mesh(_) | PipelineError::Port(PortError::InvalidInitialLength { .. }) => {
                (EXIT_INVALID, "invalid_input")
            }
            _ => (EXIT_SOLVER, "solver"),
        };
        Self { code, kind, message: e.to_string() }
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        let (code, kind) = match &e {
            SweepError::InvalidPlan(_) | SweepError::PlanMismatch | SweepError::Locked(_) | SweepError::Manifest(_) => {
                (EXIT_INVALID, "invalid_input")
            }
            SweepError::Interrupted(_) => (EXIT_INTERRUPTED, "interrupted"),
            SweepError::Io(_) => (EXIT_SOLVER, "io"),
            _ => (EXIT_SOLVER, "solver"),
        };
        Self { code, kind, message: e.to_string() }
    }
}

#[derive(Serialize)]
struct ErrorDoc<'a> {
    error: &'a str,
    message: &'a str,
    exit_code: i32,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Errors are reported as one JSON line on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.log_level).format_target(false).try_init();
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let doc = ErrorDoc { error: e.kind, message: &e.message, exit_code: e.code };
            eprintln!("{}", serde_json::to_string(&doc).expect("error serializes"));
            e.code
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32, CliError> {
    match cmd {
        Command::Simulate { scenario, solve, budget, out, dump_mesh } => {
            let s = load_scenario(&scenario)?;
            let opts = simulate_options(&solve, &budget)?;
            cmd_simulate(&s, &opts, &out, dump_mesh)
        }
        Command::Analyze { touchstone, positions, average, out } => {
            cmd_analyze(&touchstone, positions.as_deref(), average.into(), &out)
        }
        Command::Tune { scenario, solve, budget, out } => {
            let s = load_scenario(&scenario)?;
            let opts = simulate_options(&solve, &budget)?;
            cmd_tune(&s, &opts, &out)
        }
        Command::Sweep { plan, workers, solve, budget, out } => {
            let text = read(&plan)?;
            let plan = parse_sweep_plan(&text).map_err(|e| CliError::invalid(e.to_string()))?;
            let opts = SweepOptions { simulate: simulate_options(&solve, &budget)?, workers };
            cmd_sweep(&plan, &opts, &out)
        }
        Command::Validate { scenario, preset, scale, plan, touchstone } => {
            cmd_validate(scenario.as_deref(), preset.as_deref(), &scale, plan.as_deref(), touchstone.as_deref())
        }
        Command::Reproduce { figure, scale, workers, solve, budget, out } => {
            let scale: Scale = scale.parse().map_err(|e: pkgem::geometry::GeometryError| CliError::invalid(e.to_string()))?;
            let explicit_budget = budget.max_wall_time.is_some();
            let opts = SweepOptions { simulate: simulate_options(&solve, &budget)?, workers };
            figures::reproduce(figure, scale, &opts, explicit_budget, &out)
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(e, path))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| CliError::io(e, p))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(e, path))
}

pub(crate) fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

pub fn load_scenario(a: &ScenarioArgs) -> Result<PackageScenario, CliError> {
    match (&a.scenario, &a.preset) {
        (Some(path), _) => parse_scenario(&read(path)?).map_err(|e| CliError::invalid(format!("{}: {e}", path.display()))),
        (None, Some(p)) => {
            let preset: Preset = p.parse().map_err(|e: pkgem::geometry::GeometryError| CliError::invalid(e.to_string()))?;
            let scale: Scale =
                a.scale.parse().map_err(|e: pkgem::geometry::GeometryError| CliError::invalid(e.to_string()))?;
            make_scenario(preset, &ScenarioOverrides { scale, ..Default::default() })
                .map_err(|e| CliError::invalid(e.to_string()))
        }
        (None, None) => Err(CliError::invalid("give --scenario or --preset")),
    }
}

fn parse_bytes(s: &str) -> Result<usize, CliError> {
    let s = s.trim();
    let (num, mult) = match s.char_indices().find(|(_, c)| c.is_ascii_alphabetic()) {
        Some((i, _)) => {
            let m = match s[i..].trim_end_matches(['i', 'B', 'b']).to_ascii_uppercase().as_str() {
                "" => 1usize,
                "K" => 1 << 10,
                "M" => 1 << 20,
                "G" => 1 << 30,
                "T" => 1 << 40,
                other => return Err(CliError::invalid(format!("unknown memory unit `{other}`"))),
            };
            (&s[..i], m)
        }
        None => (s, 1),
    };
    let v: f64 = num.trim().parse().map_err(|_| CliError::invalid(format!("bad memory size `{s}`")))?;
    if !(v > 0.0) {
        return Err(CliError::invalid("memory budget must be positive"));
    }
    Ok((v * mult as f64) as usize)
}

pub fn budget_from(b: &BudgetArgs) -> Result<Budget, CliError> {
    let mut out = Budget::default();
    if let Some(c) = b.max_cells {
        if c == 0 {
            return Err(CliError::invalid("cell budget must be positive"));
        }
        out.max_cells = c;
    }
    if let Some(m) = &b.max_memory {
        out.max_memory = parse_bytes(m)?;
    }
    if let Some(t) = b.max_wall_time {
        if !(t > 0.0) {
            return Err(CliError::invalid("wall-time budget must be positive"));
        }
        out.max_wall_time = t;
    }
    Ok(out)
}

pub fn simulate_options(s: &SolveArgs, b: &BudgetArgs) -> Result<SimulateOptions, CliError> {
    let mut o = SimulateOptions { retune: !s.no_retune, average_mode: s.average.into(), ..Default::default() };
    if s.frequencies < pkgem::ports::MIN_FREQUENCIES {
        return Err(CliError::invalid(format!("at least {} frequencies are required", pkgem::ports::MIN_FREQUENCIES)));
    }
    o.n_frequencies = s.frequencies;
    if let Some(r) = s.resolution {
        o.mesh.resolution = r;
    }
    o.policy = DurationPolicy { max_steps: s.max_steps.unwrap_or(o.policy.max_steps), ..o.policy };
    o.budget = budget_from(b)?;
    o.mesh.max_cells = o.budget.max_cells;
    Ok(o)
}

fn exit_for(unconverged: bool) -> i32 {
    if unconverged {
        log::warn!("some excitation runs hit the step cap before ring-down; results are flagged");
        EXIT_UNCONVERGED
    } else {
        EXIT_OK
    }
}

pub fn cmd_simulate(s: &PackageScenario, opts: &SimulateOptions, out: &Path, dump_mesh: bool) -> Result<i32, CliError> {
    log::info!("simulating {} ({} ports)", s.name, s.port_count());
    let o = simulate(s, opts)?;
    for (j, st) in o.runs.iter().enumerate() {
        log::info!(
            "port {} run: {} steps, {:.1} s, {:.3e} cells/s{}",
            j + 1,
            st.steps,
            st.wall_time_s,
            st.cells_per_second,
            if st.converged { "" } else { ", not converged" }
        );
    }
    o.write_all(out).map_err(|e| CliError::io(e, out))?;
    if dump_mesh {
        o.grid.write_dump(&out.join("mesh")).map_err(|e| CliError::io(e, out))?;
    }
    log::info!("s_min {:.2} dB at pair {:?}", o.report.s_min_db, o.report.s_min_pair);
    Ok(exit_for(o.unconverged()))
}

/// Port count from a `.sNp` extension.
pub fn ports_from_extension(path: &Path) -> Result<usize, CliError> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    ext.strip_prefix('s')
        .and_then(|r| r.strip_suffix('p'))
        .and_then(|d| d.parse().ok())
        .filter(|&n: &usize| n > 0)
        .ok_or_else(|| CliError::invalid(format!("{}: expected a .sNp extension", path.display())))
}

pub fn cmd_analyze(touchstone: &Path, positions: Option<&Path>, mode: AverageMode, out: &Path) -> Result<i32, CliError> {
    let n = ports_from_extension(touchstone)?;
    let sp = read_touchstone(&read(touchstone)?, n)
        .map_err(|e| CliError::invalid(format!("{}: {e}", touchstone.display())))?;
    let pos = match positions {
        Some(p) => Some(parse_positions_csv(&read(p)?).map_err(|e| CliError::invalid(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let band = [sp.frequencies[0], *sp.frequencies.last().expect("non-empty")];
    let report = scenario_report(&sp, pos.as_deref(), band, mode).map_err(|e| CliError::invalid(e.to_string()))?;
    report.write_all(out).map_err(|e| CliError::io(e, out))?;
    log::info!("s_min {:.2} dB at pair {:?}", report.s_min_db, report.s_min_pair);
    Ok(exit_for(report.unconverged))
}

pub fn cmd_tune(s: &PackageScenario, opts: &SimulateOptions, out: &Path) -> Result<i32, CliError> {
    let t = tune(s, opts)?;
    write(&out.join("tuning.json"), &to_json(&t.summary))?;
    write(&out.join("return_loss.csv"), &t.return_loss_csv())?;
    write(&out.join("scenario.json"), &to_json(&t.scenario))?;
    log::info!("tuned length {:.1} um, |S11| {:.2} dB", t.summary.length * 1e6, t.summary.s11_db);
    if !t.summary.matched {
        log::warn!("best match is above the -10 dB threshold");
    }
    Ok(exit_for(!t.stats.converged))
}

pub(crate) fn install_interrupt() -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let _ = ctrlc::set_handler(move || {
        if flag.swap(true, Ordering::SeqCst) {
            std::process::exit(EXIT_INTERRUPTED);
        }
        eprintln!("interrupt: finishing running points; press Ctrl-C again to abort now");
    });
    stop
}

pub fn cmd_sweep(plan: &pkgem::sweep::SweepPlan, opts: &SweepOptions, out: &Path) -> Result<i32, CliError> {
    let stop = install_interrupt();
    let r = run_sweep(plan, out, opts, Some(&stop))?;
    if let Some(b) = &plan.baseline {
        match pkgem::sweep::report_optimum(&r, b) {
            Ok(o) => write(&out.join("optimum.json"), &to_json(&o))?,
            Err(e) => log::warn!("no optimum report: {e}"),
        }
    }
    let failed = r.records.iter().filter(|p| p.status == pkgem::sweep::PointStatus::Failed).count();
    if failed > 0 {
        log::warn!("{failed} of {} points failed", r.records.len());
        return Ok(EXIT_SOLVER);
    }
    Ok(exit_for(r.any_unconverged()))
}

#[derive(Serialize)]
struct ScenarioSummary {
    name: String,
    ports: usize,
    scenario_hash: String,
    monopole_length_m: f64,
    headroom_m: f64,
    mesh: Option<pkgem::mesh::MeshSummary>,
    mesh_error: Option<String>,
}

pub fn cmd_validate(
    scenario: Option<&Path>,
    preset: Option<&str>,
    scale: &str,
    plan: Option<&Path>,
    touchstone: Option<&Path>,
) -> Result<i32, CliError> {
    let mut printed = false;
    if scenario.is_some() || preset.is_some() {
        let s = load_scenario(&ScenarioArgs {
            scenario: scenario.map(Path::to_path_buf),
            preset: preset.map(str::to_string),
            scale: scale.to_string(),
        })?;
        let (mesh, mesh_error) = match generate_mesh(&s, &Default::default()) {
            Ok(g) => (Some(g.summary()), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let doc = ScenarioSummary {
            name: s.name.clone(),
            ports: s.port_count(),
            scenario_hash: s.hash(),
            monopole_length_m: s.monopole.length,
            headroom_m: s.headroom(),
            mesh,
            mesh_error,
        };
        print!("{}", to_json(&doc));
        printed = true;
    }
    if let Some(p) = plan {
        let plan = parse_sweep_plan(&read(p)?).map_err(|e| CliError::invalid(format!("{}: {e}", p.display())))?;
        for v in plan.points() {
            plan.scenario_at(&v).map_err(|e| CliError::invalid(format!("point {v:?}: {e}")))?;
        }
        print!("{}", to_json(&serde_json::json!({ "plan_hash": plan.hash(), "points": plan.points().len() })));
        printed = true;
    }
    if let Some(t) = touchstone {
        let n = ports_from_extension(t)?;
        let sp = read_touchstone(&read(t)?, n).map_err(|e| CliError::invalid(format!("{}: {e}", t.display())))?;
        print!(
            "{}",
            to_json(&serde_json::json!({
                "ports": sp.n_ports,
                "frequencies": sp.frequencies.len(),
                "passivity_excess": sp.passivity_excess(),
                "reciprocity_error_db": sp.reciprocity_error_db(),
            }))
        );
        printed = true;
    }
    if !printed {
        return Err(CliError::invalid("nothing to validate"));
    }
    Ok(EXIT_OK)
}
