//! Lumped-port post-processing: spectra, scattering parameters and monopole
//! length tuning.

pub mod touchstone;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::fdtd::{DurationPolicy, PortRecord, RunStats, Simulation, SolverError, SourceWaveform};
use crate::geometry::PackageScenario;
use crate::mesh::{MeshError, MeshSummary, YeeGrid};
use crate::units::power_db;

pub const MIN_FREQUENCIES: usize = 201;
pub const DB_FLOOR: f64 = -120.0;
/// Incident-wave magnitude below this fraction of its in-band peak counts as
/// unexcited.
pub const NOISE_FLOOR_REL: f64 = 1e-6;
/// A tuned monopole is considered matched at or below this return loss.
pub const MATCH_THRESHOLD_DB: f64 = -10.0;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PortError {
    #[error("excitation runs disagree: {0}")]
    MismatchedRuns(String),
    #[error("incident wave at port {port} is below the noise floor at {freq:.6e} Hz")]
    BelowNoiseFloor { port: usize, freq: f64 },
    #[error("port {0} is out of range")]
    NoSuchPort(usize),
    #[error("initial length {length:.4e} m is outside [0.1, 1.0] x headroom {headroom:.4e} m")]
    InvalidInitialLength { length: f64, headroom: f64 },
    #[error("search bracket exhausted: {0}")]
    BracketExhausted(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Settings that shape every run, recorded with each result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub ringdown_threshold: f64,
    pub window_periods: f64,
    pub max_steps: usize,
    pub pml_cells: usize,
    pub pml_order: i32,
    pub pml_target_db: f64,
    pub courant_safety: f64,
    pub source_bandwidth: f64,
}

impl SolverSettings {
    pub fn new(policy: &DurationPolicy, grid: &YeeGrid, source_bandwidth: f64) -> Self {
        Self {
            ringdown_threshold: policy.threshold,
            window_periods: policy.window_periods,
            max_steps: policy.max_steps,
            pml_cells: grid.pml.x_lo.max(grid.pml.z_hi),
            pml_order: crate::fdtd::PML_ORDER,
            pml_target_db: crate::fdtd::PML_TARGET_DB,
            courant_safety: crate::mesh::CFL_SAFETY,
            source_bandwidth,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub artifact_version: String,
    pub scenario_name: String,
    pub scenario_hash: String,
    pub mesh: Option<MeshSummary>,
    pub solver: Option<SolverSettings>,
    pub monopole_length: Option<f64>,
    /// Excited ports whose run hit the step cap before ring-down.
    pub unconverged_runs: Vec<usize>,
}

impl Provenance {
    pub fn for_scenario(s: &PackageScenario) -> Self {
        Self {
            artifact_version: ARTIFACT_VERSION.to_string(),
            scenario_name: s.name.clone(),
            scenario_hash: s.hash(),
            monopole_length: Some(s.monopole.length),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SParameterSet {
    pub frequencies: Vec<f64>,
    pub n_ports: usize,
    /// `s[f][i * n_ports + j]` is `S_ij` at `frequencies[f]` (0-based ports).
    pub s: Vec<Vec<Complex64>>,
    pub z0: f64,
    pub provenance: Provenance,
}

impl SParameterSet {
    #[inline]
    pub fn get(&self, f: usize, i: usize, j: usize) -> Complex64 {
        self.s[f][i * self.n_ports + j]
    }

    pub fn unconverged(&self) -> bool {
        !self.provenance.unconverged_runs.is_empty()
    }

    /// Largest `sum_i |S_ij|^2 - 1` over excitations and frequencies.
    pub fn passivity_excess(&self) -> f64 {
        let n = self.n_ports;
        let mut worst = f64::NEG_INFINITY;
        for f in 0..self.frequencies.len() {
            for j in 0..n {
                let p: f64 = (0..n).map(|i| self.get(f, i, j).norm_sqr()).sum();
                worst = worst.max(p - 1.0);
            }
        }
        worst
    }

    /// Largest `| |S_ij|dB - |S_ji|dB |` over pairs and frequencies.
    pub fn reciprocity_error_db(&self) -> f64 {
        let n = self.n_ports;
        let mut worst = 0.0f64;
        for f in 0..self.frequencies.len() {
            for i in 0..n {
                for j in i + 1..n {
                    let a = power_db(self.get(f, i, j).norm_sqr(), DB_FLOOR);
                    let b = power_db(self.get(f, j, i).norm_sqr(), DB_FLOOR);
                    worst = worst.max((a - b).abs());
                }
            }
        }
        worst
    }
}

/// `n` evenly spaced frequencies spanning `[f_min, f_max]`.
pub fn frequency_grid(f_min: f64, f_max: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n).map(|k| f_min + (f_max - f_min) * k as f64 / (n - 1) as f64).collect()
}

/// Direct DFT `sum x_n exp(-j 2 pi f (t0 + n dt)) dt` at each frequency.
pub fn dft(x: &[f64], dt: f64, t0: f64, freqs: &[f64]) -> Vec<Complex64> {
    freqs
        .iter()
        .map(|&f| {
            let w = 2.0 * PI * f * dt;
            let step = Complex64::new(w.cos(), -w.sin());
            let mut ph = Complex64::from_polar(1.0, -2.0 * PI * f * t0);
            let mut acc = Complex64::new(0.0, 0.0);
            for (n, &v) in x.iter().enumerate() {
                acc += ph * v;
                ph *= step;
                // keep the rotating phasor on the unit circle
                if n % 1024 == 1023 {
                    ph /= ph.norm();
                }
            }
            acc * dt
        })
        .collect()
}

/// Incident and reflected wave spectra `(a, b)` of one port record.
pub fn wave_spectra(r: &PortRecord, z0: f64, freqs: &[f64]) -> (Vec<Complex64>, Vec<Complex64>) {
    let k = 1.0 / (2.0 * z0.sqrt());
    let a: Vec<f64> = r.voltage.iter().zip(&r.current).map(|(v, i)| (v + z0 * i) * k).collect();
    let b: Vec<f64> = r.voltage.iter().zip(&r.current).map(|(v, i)| (v - z0 * i) * k).collect();
    (dft(&a, r.dt, r.t0, freqs), dft(&b, r.dt, r.t0, freqs))
}

/// Builds the S-matrix from one run per port; `runs[j]` must excite port `j`.
pub fn extract_sparams(
    runs: &[Vec<PortRecord>],
    z0: f64,
    freqs: &[f64],
    provenance: Provenance,
) -> Result<SParameterSet, PortError> {
    let n = runs.len();
    if n == 0 {
        return Err(PortError::MismatchedRuns("no runs".into()));
    }
    let dt = runs[0][0].dt;
    for (j, run) in runs.iter().enumerate() {
        if run.len() != n {
            return Err(PortError::MismatchedRuns(format!("run {j} has {} ports, expected {n}", run.len())));
        }
        if run.iter().any(|r| r.dt != dt) {
            return Err(PortError::MismatchedRuns(format!("run {j} uses a different time step")));
        }
        let excited: Vec<usize> = run.iter().filter(|r| r.excited).map(|r| r.port).collect();
        if excited != [j] {
            return Err(PortError::MismatchedRuns(format!("run {j} excites ports {excited:?}")));
        }
        if run.iter().any(|r| r.voltage.len() != run[0].voltage.len() || r.current.len() != r.voltage.len()) {
            return Err(PortError::MismatchedRuns(format!("run {j} has ragged records")));
        }
    }
    let nf = freqs.len();
    let mut s = vec![vec![Complex64::new(0.0, 0.0); n * n]; nf];
    for (j, run) in runs.iter().enumerate() {
        let (aj, _) = wave_spectra(&run[j], z0, freqs);
        let peak = aj.iter().fold(0.0f64, |m, v| m.max(v.norm()));
        for (f, a) in aj.iter().enumerate() {
            if !(a.norm() > NOISE_FLOOR_REL * peak) || !a.norm().is_finite() {
                return Err(PortError::BelowNoiseFloor { port: j, freq: freqs[f] });
            }
        }
        for (i, rec) in run.iter().enumerate() {
            let (_, bi) = wave_spectra(rec, z0, freqs);
            for f in 0..nf {
                s[f][i * n + j] = bi[f] / aj[f];
            }
        }
    }
    Ok(SParameterSet { frequencies: freqs.to_vec(), n_ports: n, s, z0, provenance })
}

/// `(f, 20 log10 |S_ii|)` clamped at the dB floor.
pub fn return_loss_curve(sp: &SParameterSet, port: usize) -> Result<Vec<(f64, f64)>, PortError> {
    if port >= sp.n_ports {
        return Err(PortError::NoSuchPort(port));
    }
    Ok(sp
        .frequencies
        .iter()
        .enumerate()
        .map(|(f, &freq)| (freq, power_db(sp.get(f, port, port).norm_sqr(), DB_FLOOR)))
        .collect())
}

/// Reflection at `freq` seen by the excited port of one run.
pub fn reflection_at(records: &[PortRecord], port: usize, z0: f64, freq: f64) -> Complex64 {
    let (a, b) = wave_spectra(&records[port], z0, &[freq]);
    b[0] / a[0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneEvaluation {
    pub requested_length: f64,
    pub realised_length: f64,
    pub s11_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    /// Realised (grid-snapped) length of the best evaluation.
    pub length: f64,
    pub s11_db: f64,
    pub matched: bool,
    pub evaluations: Vec<TuneEvaluation>,
    /// Grid rebuilt with the tuned length.
    pub grid: YeeGrid,
    /// Records of the best evaluation, reusable as that port's excitation run.
    pub best_run: Vec<PortRecord>,
    pub best_stats: RunStats,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuneOptions {
    pub port: usize,
    pub f_center: f64,
    pub bandwidth: f64,
    pub initial_length: f64,
    pub headroom: f64,
}

fn golden() -> f64 {
    (5f64.sqrt() - 1.0) / 2.0
}

/// Golden-section search over the common monopole length, minimising
/// `|S11(f_center)|` at `opts.port`. Evaluations that snap to the same tip
/// node are computed once.
pub fn tune_monopole(grid: &YeeGrid, opts: &TuneOptions, policy: &DurationPolicy) -> Result<TuneResult, PortError> {
    if opts.port >= grid.ports.len() {
        return Err(PortError::NoSuchPort(opts.port));
    }
    let h = opts.headroom;
    if !(opts.initial_length >= 0.1 * h - 1e-15 && opts.initial_length <= h + 1e-15) {
        return Err(PortError::InvalidInitialLength { length: opts.initial_length, headroom: h });
    }
    let ground = grid.z_edges[grid.k_ground];
    let ceiling_cell = grid.z_edges[grid.k_ceiling] - grid.z_edges[grid.k_ceiling - 1];
    let mut lo = (0.5 * opts.initial_length).max(0.1 * h);
    let mut hi = (1.5 * opts.initial_length).min(h - ceiling_cell);
    if !(lo < hi) {
        return Err(PortError::BracketExhausted(format!("empty bracket [{lo:.4e}, {hi:.4e}]")));
    }
    let waveform = SourceWaveform::gaussian_sine(opts.f_center, opts.bandwidth, 1.0);

    type Memo = (f64, f64, Vec<PortRecord>, RunStats, YeeGrid);
    let mut memo: BTreeMap<usize, Memo> = BTreeMap::new();
    let mut evaluations = Vec::new();
    let mut eval = |length: f64, memo: &mut BTreeMap<usize, Memo>| -> Result<f64, PortError> {
        let g = grid.with_monopole_length(length)?;
        let k_top = g.ports[opts.port].k_top;
        let realised = g.z_edges[k_top] - ground;
        if let Some(m) = memo.get(&k_top) {
            evaluations.push(TuneEvaluation { requested_length: length, realised_length: realised, s11_db: m.1 });
            return Ok(m.1);
        }
        let run = Simulation::new(&g, Some((opts.port, waveform)))?.run(policy, &[])?;
        let s11 = reflection_at(&run.records, opts.port, g.port_impedance, opts.f_center);
        let db = power_db(s11.norm_sqr(), DB_FLOOR);
        evaluations.push(TuneEvaluation { requested_length: length, realised_length: realised, s11_db: db });
        memo.insert(k_top, (realised, db, run.records, run.stats, g));
        Ok(db)
    };

    let cell_at = |len: f64| -> f64 {
        let z = ground + len;
        let k = grid.z_edges.partition_point(|&e| e <= z).clamp(1, grid.z_edges.len() - 1);
        grid.z_edges[k] - grid.z_edges[k - 1]
    };
    let r = golden();
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let mut f1 = eval(x1, &mut memo)?;
    let mut f2 = eval(x2, &mut memo)?;
    let mut iterations = 0;
    while hi - lo >= cell_at(0.5 * (lo + hi)) {
        iterations += 1;
        if iterations > 60 {
            return Err(PortError::BracketExhausted("no convergence after 60 iterations".into()));
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = eval(x1, &mut memo)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = eval(x2, &mut memo)?;
        }
    }

    // best over every distinct tip node; ties go to the shorter monopole
    let (_, best) = memo
        .iter()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(a.0.cmp(b.0)))
        .expect("at least one evaluation");
    let (length, s11_db, records, stats, g) = best.clone();
    Ok(TuneResult {
        length,
        s11_db,
        matched: s11_db <= MATCH_THRESHOLD_DB,
        evaluations,
        grid: g,
        best_run: records,
        best_stats: stats,
    })
}
