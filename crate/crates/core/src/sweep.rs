//! Parametric sweeps with per-point monopole retuning, crash-safe
//! persistence and optimum reporting.
//!
//! A sweep directory holds `manifest.json` (completed points, rewritten by
//! atomic rename), `sweep.lock` while a process owns it, `timings.json` and
//! one `points/pNNNN/` directory per point with that point's full outputs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::geometry::{hex_digest, make_scenario, Band, PackageScenario, Preset, ScenarioOverrides};
use crate::pipeline::{check_budget, plan, simulate, SimulateOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    SiliconThickness,
    SpreaderThickness,
    FCenter,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::SiliconThickness => "silicon_thickness",
            SweepParam::SpreaderThickness => "spreader_thickness",
            SweepParam::FCenter => "f_center",
        }
    }

    /// Column name and scale factor used in exported tables.
    pub fn column(self) -> (&'static str, f64) {
        match self {
            SweepParam::SiliconThickness => ("silicon_thickness_mm", 1e3),
            SweepParam::SpreaderThickness => ("spreader_thickness_mm", 1e3),
            SweepParam::FCenter => ("f_center_ghz", 1e-9),
        }
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "silicon_thickness" => Ok(SweepParam::SiliconThickness),
            "spreader_thickness" => Ok(SweepParam::SpreaderThickness),
            "f_center" => Ok(SweepParam::FCenter),
            other => Err(format!("unknown sweep parameter `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub preset: Preset,
    pub overrides: ScenarioOverrides,
    pub axes: Vec<SweepAxis>,
    pub retune: bool,
    /// Axis values of the reference point for improvement reporting.
    pub baseline: Option<Vec<f64>>,
}

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error("invalid sweep plan: {0}")]
    InvalidPlan(String),
    #[error("sweep directory {0} is in use by another process (remove sweep.lock if it is stale)")]
    Locked(PathBuf),
    #[error("manifest belongs to a different plan")]
    PlanMismatch,
    #[error("every sweep point failed; first error: {0}")]
    AllFailed(String),
    #[error("no successful point")]
    NoSuccess,
    #[error("baseline point {0:?} is absent or failed")]
    Baseline(Vec<f64>),
    #[error("sweep interrupted after {0} points")]
    Interrupted(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest is unreadable: {0}")]
    Manifest(String),
}

/// Relative bandwidth kept when the centre frequency is swept.
pub const RELATIVE_BANDWIDTH: f64 = 1.0 / 3.0;

impl SweepPlan {
    pub fn validate(&self) -> Result<(), SweepError> {
        if self.axes.is_empty() {
            return Err(SweepError::InvalidPlan("no axes".into()));
        }
        for (n, a) in self.axes.iter().enumerate() {
            if a.values.is_empty() {
                return Err(SweepError::InvalidPlan(format!("axis {} has no values", a.param.as_str())));
            }
            if a.values.windows(2).any(|w| !(w[0] < w[1])) || a.values.iter().any(|v| !v.is_finite()) {
                return Err(SweepError::InvalidPlan(format!(
                    "axis {} values must be finite and strictly ascending",
                    a.param.as_str()
                )));
            }
            if self.axes[..n].iter().any(|b| b.param == a.param) {
                return Err(SweepError::InvalidPlan(format!("axis {} appears twice", a.param.as_str())));
            }
        }
        if let Some(b) = &self.baseline {
            if b.len() != self.axes.len() {
                return Err(SweepError::InvalidPlan("baseline needs one value per axis".into()));
            }
        }
        Ok(())
    }

    /// Every point, first axis varying slowest.
    pub fn points(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new()];
        for a in &self.axes {
            out = out
                .into_iter()
                .flat_map(|p| {
                    a.values.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        out
    }

    pub fn scenario_at(&self, values: &[f64]) -> Result<PackageScenario, String> {
        let mut ov = self.overrides.clone();
        for (a, &v) in self.axes.iter().zip(values) {
            match a.param {
                SweepParam::SiliconThickness => ov.silicon_thickness = Some(v),
                SweepParam::SpreaderThickness => ov.spreader_thickness = Some(v),
                SweepParam::FCenter => {
                    ov.f_center = Some(v);
                    if self.overrides.bandwidth.is_none() {
                        ov.bandwidth = Some(v * RELATIVE_BANDWIDTH);
                    }
                }
            }
        }
        make_scenario(self.preset, &ov).map_err(|e| e.to_string())
    }

    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("plan serializes").as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointStatus {
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub index: usize,
    pub values: Vec<f64>,
    pub status: PointStatus,
    pub tuned_length: Option<f64>,
    pub s_min_db: Option<f64>,
    /// 1-based worst pair.
    pub s_min_pair: Option<(usize, usize)>,
    pub unconverged: bool,
    pub error: Option<String>,
    /// Point directory relative to the sweep directory.
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub plan_hash: String,
    pub plan: SweepPlan,
    pub points: Vec<PointRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub plan: SweepPlan,
    /// One record per planned point, in plan order.
    pub records: Vec<PointRecord>,
    /// Index into `records` of the best successful point.
    pub argmax: Option<usize>,
    /// Wall time per point for points run by this process (seconds).
    pub wall_times: Vec<Option<f64>>,
}

impl SweepResult {
    pub fn any_unconverged(&self) -> bool {
        self.records.iter().any(|r| r.unconverged)
    }

    /// `param1[,param2],s_min_db,tuned_length_um` for successful points.
    pub fn surface_csv(&self) -> String {
        let mut s = String::new();
        for a in &self.plan.axes {
            s.push_str(a.param.column().0);
            s.push(',');
        }
        s.push_str("s_min_db,tuned_length_um\n");
        for r in self.records.iter().filter(|r| r.status == PointStatus::Done) {
            for (a, v) in self.plan.axes.iter().zip(&r.values) {
                s.push_str(&format!("{},", v * a.param.column().1));
            }
            s.push_str(&format!(
                "{},{}\n",
                r.s_min_db.expect("done point has s_min"),
                r.tuned_length.map_or(f64::NAN, |l| l * 1e6)
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub simulate: SimulateOptions,
    pub workers: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { simulate: SimulateOptions::default(), workers: 1 }
    }
}

struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Lock, SweepError> {
        let path = dir.join("sweep.lock");
        for _ in 0..2 {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    writeln!(f, "{}", std::process::id())?;
                    return Ok(Lock(path));
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if lock_is_stale(&path) {
                        fs::remove_file(&path)?;
                        continue;
                    }
                    return Err(SweepError::Locked(dir.to_path_buf()));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(SweepError::Locked(dir.to_path_buf()))
    }
}

/// A lock whose owner process no longer exists (checked where `/proc` is
/// available).
fn lock_is_stale(path: &Path) -> bool {
    let Ok(text) = fs::read_to_string(path) else { return false };
    let Ok(pid) = text.trim().parse::<u32>() else { return false };
    let proc_root = Path::new("/proc");
    proc_root.join("self").exists() && pid != std::process::id() && !proc_root.join(pid.to_string()).exists()
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn write_atomic(path: &Path, text: &str) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

pub fn read_manifest(dir: &Path) -> Result<Option<Manifest>, SweepError> {
    let path = dir.join("manifest.json");
    match fs::read_to_string(&path) {
        Ok(t) => serde_json::from_str(&t).map(Some).map_err(|e| SweepError::Manifest(e.to_string())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Runs every point of `plan` not already recorded in `dir`. Setting `stop`
/// lets running points finish but starts no new ones.
pub fn run_sweep(
    plan: &SweepPlan,
    dir: &Path,
    opts: &SweepOptions,
    stop: Option<&AtomicBool>,
) -> Result<SweepResult, SweepError> {
    plan.validate()?;
    fs::create_dir_all(dir)?;
    let _lock = Lock::acquire(dir)?;
    let hash = plan.hash();
    let mut manifest = match read_manifest(dir)? {
        Some(m) if m.plan_hash != hash => return Err(SweepError::PlanMismatch),
        Some(m) => m,
        None => Manifest { plan_hash: hash, plan: plan.clone(), points: Vec::new() },
    };
    write_atomic(&dir.join("plan.json"), &(serde_json::to_string_pretty(plan).expect("plan") + "\n"))?;

    let points = plan.points();
    let pending: Vec<usize> =
        (0..points.len()).filter(|i| !manifest.points.iter().any(|r| r.index == *i)).collect();
    let shared = Mutex::new((&mut manifest, vec![None; points.len()]));
    let next = AtomicUsize::new(0);
    let io_error: Mutex<Option<std::io::Error>> = Mutex::new(None);

    let worker = || loop {
        if stop.is_some_and(|s| s.load(Ordering::SeqCst)) || io_error.lock().expect("lock").is_some() {
            return;
        }
        let n = next.fetch_add(1, Ordering::SeqCst);
        let Some(&index) = pending.get(n) else { return };
        let started = Instant::now();
        let record = run_point(plan, index, &points[index], dir, &opts.simulate);
        let elapsed = started.elapsed().as_secs_f64();
        let mut guard = shared.lock().expect("manifest lock");
        let (m, times) = &mut *guard;
        m.points.push(record);
        m.points.sort_by_key(|r| r.index);
        times[index] = Some(elapsed);
        let text = serde_json::to_string_pretty(&**m).expect("manifest") + "\n";
        if let Err(e) = write_atomic(&dir.join("manifest.json"), &text) {
            *io_error.lock().expect("lock") = Some(e);
        }
    };
    let workers = opts.workers.max(1).min(pending.len().max(1));
    std::thread::scope(|s| {
        for _ in 1..workers {
            s.spawn(worker);
        }
        worker();
    });
    if let Some(e) = io_error.into_inner().expect("lock") {
        return Err(e.into());
    }
    let (_, wall_times) = shared.into_inner().expect("manifest lock");
    write_atomic(
        &dir.join("timings.json"),
        &(serde_json::to_string_pretty(&wall_times).expect("timings") + "\n"),
    )?;

    if manifest.points.len() < points.len() {
        return Err(SweepError::Interrupted(manifest.points.len()));
    }
    if let Some(first) = manifest.points.iter().find(|r| r.status == PointStatus::Failed) {
        if manifest.points.iter().all(|r| r.status == PointStatus::Failed) {
            return Err(SweepError::AllFailed(first.error.clone().unwrap_or_default()));
        }
    }
    let result = SweepResult {
        plan: plan.clone(),
        argmax: argmax(plan, &manifest.points),
        records: manifest.points,
        wall_times,
    };
    fs::write(dir.join("surface.csv"), result.surface_csv())?;
    Ok(result)
}

fn run_point(plan: &SweepPlan, index: usize, values: &[f64], dir: &Path, opts: &SimulateOptions) -> PointRecord {
    let rel = format!("points/p{index:04}");
    let mut rec = PointRecord {
        index,
        values: values.to_vec(),
        status: PointStatus::Failed,
        tuned_length: None,
        s_min_db: None,
        s_min_pair: None,
        unconverged: false,
        error: None,
        dir: rel.clone(),
    };
    let point_dir = dir.join(&rel);
    let outcome = (|| -> Result<_, String> {
        let s = plan.scenario_at(values)?;
        let mut o = opts.clone();
        o.retune = plan.retune;
        let (_, est) = plan_point(&s, &o)?;
        check_budget(&est, &o.budget).map_err(|e| e.to_string())?;
        simulate(&s, &o).map_err(|e| e.to_string())
    })();
    match outcome {
        Ok(out) => {
            if let Err(e) = out.write_all(&point_dir) {
                rec.error = Some(format!("writing outputs: {e}"));
                return rec;
            }
            rec.status = PointStatus::Done;
            rec.tuned_length = Some(out.scenario.monopole.length);
            rec.s_min_db = Some(out.report.s_min_db);
            rec.s_min_pair = Some(out.report.s_min_pair);
            rec.unconverged = out.unconverged();
        }
        Err(e) => {
            let _ = fs::create_dir_all(&point_dir);
            let _ = fs::write(point_dir.join("error.txt"), format!("{e}\n"));
            rec.error = Some(e);
        }
    }
    rec
}

fn plan_point(s: &PackageScenario, o: &SimulateOptions) -> Result<(crate::mesh::YeeGrid, crate::pipeline::PlanEstimate), String> {
    plan(s, o).map_err(|e| e.to_string())
}

/// Preference order among equal objective values: thinner silicon, then
/// thinner spreader, then lower values on the remaining axes.
fn tie_key(plan: &SweepPlan, values: &[f64]) -> Vec<f64> {
    let pos = |p: SweepParam| plan.axes.iter().position(|a| a.param == p);
    let mut order: Vec<usize> = [SweepParam::SiliconThickness, SweepParam::SpreaderThickness]
        .into_iter()
        .filter_map(pos)
        .collect();
    for i in 0..plan.axes.len() {
        if !order.contains(&i) {
            order.push(i);
        }
    }
    order.into_iter().map(|i| values[i]).collect()
}

fn argmax(plan: &SweepPlan, records: &[PointRecord]) -> Option<usize> {
    records
        .iter()
        .enumerate()
        .filter_map(|(n, r)| r.s_min_db.filter(|_| r.status == PointStatus::Done).map(|v| (n, v)))
        .max_by(|a, b| {
            a.1.total_cmp(&b.1).then_with(|| {
                let (ka, kb) = (tie_key(plan, &records[a.0].values), tie_key(plan, &records[b.0].values));
                kb.partial_cmp(&ka).expect("finite values")
            })
        })
        .map(|(n, _)| n)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Optimum {
    pub values: Vec<f64>,
    pub s_min_db: f64,
    pub tuned_length: Option<f64>,
    pub baseline: Vec<f64>,
    pub baseline_s_min_db: f64,
    pub improvement_db: f64,
}

/// Best point and its gain over `baseline` (axis values).
pub fn report_optimum(result: &SweepResult, baseline: &[f64]) -> Result<Optimum, SweepError> {
    let best = argmax(&result.plan, &result.records).ok_or(SweepError::NoSuccess)?;
    let base = result
        .records
        .iter()
        .find(|r| r.status == PointStatus::Done && same_point(&r.values, baseline))
        .ok_or_else(|| SweepError::Baseline(baseline.to_vec()))?;
    let b = &result.records[best];
    let s = b.s_min_db.expect("done point");
    let sb = base.s_min_db.expect("done point");
    Ok(Optimum {
        values: b.values.clone(),
        s_min_db: s,
        tuned_length: b.tuned_length,
        baseline: base.values.clone(),
        baseline_s_min_db: sb,
        improvement_db: s - sb,
    })
}

fn same_point(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1e-12))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyPoint {
    pub f_center: f64,
    pub tuned_length: Option<f64>,
    pub s_min_db: Option<f64>,
    pub unconverged: bool,
    pub error: Option<String>,
}

/// Retunes and re-simulates `s` at each centre frequency, keeping its
/// relative bandwidth.
pub fn frequency_scaling(s: &PackageScenario, f_centers: &[f64], opts: &SimulateOptions) -> Vec<FrequencyPoint> {
    let rel = s.band.width() / s.band.f_center;
    f_centers
        .iter()
        .map(|&fc| {
            let mut sc = s.clone();
            sc.band = Band::centered(fc, rel * fc);
            sc.monopole.length = sc.default_monopole_length();
            let mut o = opts.clone();
            o.retune = true;
            match simulate(&sc, &o) {
                Ok(out) => FrequencyPoint {
                    f_center: fc,
                    tuned_length: Some(out.scenario.monopole.length),
                    s_min_db: Some(out.report.s_min_db),
                    unconverged: out.unconverged(),
                    error: None,
                },
                Err(e) => FrequencyPoint {
                    f_center: fc,
                    tuned_length: None,
                    s_min_db: None,
                    unconverged: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::MM;

    fn plan2() -> SweepPlan {
        SweepPlan {
            preset: Preset::SingleChipWalled,
            overrides: ScenarioOverrides { scale: crate::geometry::Scale::Desk, ..Default::default() },
            axes: vec![
                SweepAxis { param: SweepParam::SiliconThickness, values: vec![0.1 * MM, 0.4 * MM] },
                SweepAxis { param: SweepParam::SpreaderThickness, values: vec![0.0, 0.8 * MM] },
            ],
            retune: true,
            baseline: None,
        }
    }

    fn rec(index: usize, values: Vec<f64>, s: Option<f64>) -> PointRecord {
        PointRecord {
            index,
            values,
            status: if s.is_some() { PointStatus::Done } else { PointStatus::Failed },
            tuned_length: s.map(|_| 1e-3),
            s_min_db: s,
            s_min_pair: s.map(|_| (1, 2)),
            unconverged: false,
            error: None,
            dir: String::new(),
        }
    }

    fn result(plan: SweepPlan, s: [Option<f64>; 4]) -> SweepResult {
        let records: Vec<PointRecord> =
            plan.points().into_iter().enumerate().map(|(i, v)| rec(i, v, s[i])).collect();
        SweepResult { argmax: argmax(&plan, &records), plan, wall_times: vec![None; records.len()], records }
    }

    #[test]
    fn points_are_the_cartesian_product() {
        let p = plan2().points();
        assert_eq!(p, vec![
            vec![0.1 * MM, 0.0],
            vec![0.1 * MM, 0.8 * MM],
            vec![0.4 * MM, 0.0],
            vec![0.4 * MM, 0.8 * MM]
        ]);
    }

    #[test]
    fn validation() {
        let mut p = plan2();
        p.axes[0].values = vec![0.4 * MM, 0.1 * MM];
        assert!(p.validate().is_err());
        let mut p = plan2();
        p.axes.clear();
        assert!(p.validate().is_err());
        let mut p = plan2();
        p.axes[1].param = SweepParam::SiliconThickness;
        assert!(p.validate().is_err());
        let mut p = plan2();
        p.baseline = Some(vec![1.0]);
        assert!(p.validate().is_err());
    }

    #[test]
    fn scenario_at_applies_values() {
        let p = plan2();
        let s = p.scenario_at(&[0.4 * MM, 0.0]).unwrap();
        assert_eq!(s.layer_thickness(crate::geometry::LayerRole::SiliconDie), Some(0.4 * MM));
        assert_eq!(s.layer_thickness(crate::geometry::LayerRole::HeatSpreader), None);
    }

    #[test]
    fn unique_maximum_wins() {
        let r = result(plan2(), [Some(-50.0), Some(-30.0), Some(-60.0), Some(-40.0)]);
        let o = report_optimum(&r, &[0.1 * MM, 0.0]).unwrap();
        assert_eq!(o.values, vec![0.1 * MM, 0.8 * MM]);
        assert_eq!(o.improvement_db, 20.0);
    }

    #[test]
    fn ties_prefer_thinner_silicon_then_spreader() {
        let r = result(plan2(), [Some(-50.0), Some(-30.0), Some(-60.0), Some(-30.0)]);
        assert_eq!(r.records[r.argmax.unwrap()].values, vec![0.1 * MM, 0.8 * MM]);
        let r = result(plan2(), [Some(-30.0), Some(-30.0), Some(-30.0), Some(-30.0)]);
        assert_eq!(r.argmax, Some(0));
    }

    #[test]
    fn failed_baseline_is_an_error() {
        let r = result(plan2(), [None, Some(-30.0), Some(-60.0), Some(-40.0)]);
        assert!(matches!(report_optimum(&r, &[0.1 * MM, 0.0]), Err(SweepError::Baseline(_))));
        assert!(matches!(report_optimum(&r, &[0.2 * MM, 0.0]), Err(SweepError::Baseline(_))));
        let none = result(plan2(), [None; 4]);
        assert!(matches!(report_optimum(&none, &[0.1 * MM, 0.0]), Err(SweepError::NoSuccess)));
    }

    #[test]
    fn surface_csv_rows() {
        let r = result(plan2(), [Some(-50.0), None, Some(-60.0), Some(-40.0)]);
        let csv = r.surface_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "silicon_thickness_mm,spreader_thickness_mm,s_min_db,tuned_length_um");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0.1,0,-50,"));
    }

    #[test]
    fn lock_rejects_a_second_owner() {
        let dir = tempfile::tempdir().unwrap();
        let a = Lock::acquire(dir.path()).unwrap();
        assert!(matches!(Lock::acquire(dir.path()), Err(SweepError::Locked(_))));
        drop(a);
        assert!(Lock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn stale_lock_is_taken_over() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("sweep.lock"), "4000000000\n").unwrap();
        if Path::new("/proc/self").exists() {
            assert!(Lock::acquire(dir.path()).is_ok());
        }
    }
}
