//! Leapfrog Yee solver with conductive loss, PEC edges, convolutional PML and
//! lumped resistive-source ports.
//!
//! Fields are single precision. Energies, port samples and spectra are
//! accumulated in double precision.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mesh::YeeGrid;
use crate::units::{EPS0, ETA0, MU0};

/// PML polynomial grading order.
pub const PML_ORDER: i32 = 3;
pub const MIN_PML_CELLS: usize = 8;
/// Reflection the PML is designed for (dB).
pub const PML_TARGET_DB: f64 = -40.0;
const PML_KAPPA_MAX: f64 = 3.0;
/// Ring-down threshold on windowed port energy relative to the peak window.
pub const RINGDOWN_THRESHOLD: f64 = 1e-5;
pub const RINGDOWN_WINDOW_PERIODS: f64 = 20.0;
const FINITE_CHECK_INTERVAL: usize = 512;
const PEC_CLASS: u8 = 0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SolverError {
    #[error("non-finite {component} field at step {step}, cell ({i}, {j}, {k})")]
    NonFinite { step: usize, component: &'static str, i: usize, j: usize, k: usize },
    #[error("port {0} does not exist")]
    NoSuchPort(usize),
    #[error("too many distinct edge materials ({0})")]
    TooManyEdgeClasses(usize),
    #[error("slice plane at {offset} m on axis {axis} is outside the domain")]
    PlaneOutside { axis: usize, offset: f64 },
}

/// Gaussian-modulated sinusoid `A exp(-((t - t0) / tau)^2) sin(2 pi fc (t - t0))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceWaveform {
    pub f_center: f64,
    pub bandwidth: f64,
    pub amplitude: f64,
    pub delay: f64,
    pub tau: f64,
}

impl SourceWaveform {
    /// Spectrum falls to half its peak at `f_center +- bandwidth / 2`.
    pub fn gaussian_sine(f_center: f64, bandwidth: f64, amplitude: f64) -> Self {
        let tau = 2.0 * (2f64.ln()).sqrt() / (PI * bandwidth);
        Self { f_center, bandwidth, amplitude, delay: 5.0 * tau, tau }
    }

    pub fn value(&self, t: f64) -> f64 {
        let u = t - self.delay;
        self.amplitude * (-(u / self.tau).powi(2)).exp() * (2.0 * PI * self.f_center * u).sin()
    }

    /// Time after which the pulse is below `exp(-25)` of its peak.
    pub fn end_time(&self) -> f64 {
        self.delay + 5.0 * self.tau
    }

    /// Analytic amplitude spectrum, normalised to 1 at its peak.
    pub fn relative_spectrum(&self, f: f64) -> f64 {
        let g = |x: f64| (-(PI * self.tau * x).powi(2)).exp();
        let peak = (g(0.0) - g(2.0 * self.f_center)).abs();
        (g(f - self.f_center) - g(f + self.f_center)).abs() / peak
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldState {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub ex: Vec<f32>,
    pub ey: Vec<f32>,
    pub ez: Vec<f32>,
    pub hx: Vec<f32>,
    pub hy: Vec<f32>,
    pub hz: Vec<f32>,
    pub step: usize,
    pub time: f64,
}

impl FieldState {
    pub fn zeros(nx: usize, ny: usize, nz: usize) -> Self {
        let n = (nx + 1) * (ny + 1) * (nz + 1);
        Self {
            nx,
            ny,
            nz,
            ex: vec![0.0; n],
            ey: vec![0.0; n],
            ez: vec![0.0; n],
            hx: vec![0.0; n],
            hy: vec![0.0; n],
            hz: vec![0.0; n],
            step: 0,
            time: 0.0,
        }
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * (self.ny + 1) + j) * (self.nz + 1) + k
    }

    pub fn is_zero(&self) -> bool {
        [&self.ex, &self.ey, &self.ez, &self.hx, &self.hy, &self.hz]
            .iter()
            .all(|a| a.iter().all(|&v| v == 0.0))
    }

    pub fn allocated_bytes(&self) -> usize {
        6 * self.ex.len() * std::mem::size_of::<f32>()
    }

    fn first_non_finite(&self) -> Option<(&'static str, usize, usize, usize)> {
        let comps: [(&'static str, &Vec<f32>); 6] =
            [("Ex", &self.ex), ("Ey", &self.ey), ("Ez", &self.ez), ("Hx", &self.hx), ("Hy", &self.hy), ("Hz", &self.hz)];
        for (name, a) in comps {
            if let Some(p) = a.iter().position(|v| !v.is_finite()) {
                let k = p % (self.nz + 1);
                let j = (p / (self.nz + 1)) % (self.ny + 1);
                let i = p / ((self.nz + 1) * (self.ny + 1));
                return Some((name, i, j, k));
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy)]
struct EdgeClass {
    ca: f32,
    cb: f32,
    eps: f64,
    sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Comp {
    X,
    Y,
    Z,
}

/// Per-axis primal and dual inverse spacings.
#[derive(Debug, Clone)]
struct Axis {
    /// Cell sizes, length n.
    h: Vec<f64>,
    /// Dual sizes at nodes, length n + 1 (half cells at the ends).
    hd: Vec<f64>,
    inv: Vec<f32>,
    inv_d: Vec<f32>,
}

impl Axis {
    fn new(edges: &[f64]) -> Self {
        let n = edges.len() - 1;
        let mut h: Vec<f64> = edges.windows(2).map(|w| w[1] - w[0]).collect();
        // uniform axes get bit-identical spacings so mirrored cells update alike
        let mean = (edges[n] - edges[0]) / n as f64;
        if h.iter().all(|v| (v - mean).abs() <= 1e-9 * mean) {
            h.iter_mut().for_each(|v| *v = mean);
        }
        let hd: Vec<f64> = (0..=n)
            .map(|m| {
                let lo = if m > 0 { h[m - 1] } else { 0.0 };
                let hi = if m < n { h[m] } else { 0.0 };
                0.5 * (lo + hi)
            })
            .collect();
        let inv = h.iter().map(|v| (1.0 / v) as f32).collect();
        let inv_d = hd.iter().map(|v| (1.0 / v) as f32).collect();
        Self { h, hd, inv, inv_d }
    }
}

/// CPML auxiliary data for one face.
#[derive(Debug, Clone)]
struct PmlSlab {
    axis: usize,
    /// Node positions (E-type) along the axis.
    e_pos: Vec<usize>,
    /// Cell-centre positions (H-type) along the axis.
    h_pos: Vec<usize>,
    be: Vec<f32>,
    ce: Vec<f32>,
    ke: Vec<f32>,
    bh: Vec<f32>,
    chh: Vec<f32>,
    kh: Vec<f32>,
    psi_e: [Vec<f32>; 2],
    psi_h: [Vec<f32>; 2],
}

#[derive(Debug, Clone)]
struct PortDriver {
    port: usize,
    idx: usize,
    i: usize,
    j: usize,
    dz: f64,
    area: f64,
    eps: f64,
    sigma: f64,
    resistance: f64,
}

/// Sampled terminal voltage and current of one lumped port.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortRecord {
    pub port: usize,
    pub voltage: Vec<f64>,
    pub current: Vec<f64>,
    pub dt: f64,
    /// Time of the first sample (samples sit on half steps).
    pub t0: f64,
    pub excited: bool,
    pub impedance: f64,
}

/// Soft current source on a single E edge, for tests and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeCurrentSource {
    pub component: usize,
    pub i: usize,
    pub j: usize,
    pub k: usize,
    /// Peak current (A).
    pub waveform: SourceWaveform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationPolicy {
    pub window_periods: f64,
    pub threshold: f64,
    pub max_steps: usize,
}

impl Default for DurationPolicy {
    fn default() -> Self {
        Self { window_periods: RINGDOWN_WINDOW_PERIODS, threshold: RINGDOWN_THRESHOLD, max_steps: 400_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub steps: usize,
    pub converged: bool,
    pub wall_time_s: f64,
    pub cells_per_second: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub records: Vec<PortRecord>,
    pub stats: RunStats,
    pub slices: Vec<FieldSlice>,
}

impl RunResult {
    pub fn unconverged(&self) -> bool {
        !self.stats.converged
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicePlane {
    /// 0 = x, 1 = y, 2 = z.
    pub axis: usize,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSlice {
    pub plane: SlicePlane,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// `|E|` with `u` major: `values[iu * v.len() + iv]`.
    pub values: Vec<f64>,
    pub step: usize,
}

impl FieldSlice {
    pub fn at(&self, iu: usize, iv: usize) -> f64 {
        self.values[iu * self.v.len() + iv]
    }

    pub fn max(&self) -> (f64, usize, usize) {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for iu in 0..self.u.len() {
            for iv in 0..self.v.len() {
                let v = self.at(iu, iv);
                if v > best.0 {
                    best = (v, iu, iv);
                }
            }
        }
        best
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("u_m,v_m,e_abs_v_per_m\n");
        for (iu, u) in self.u.iter().enumerate() {
            for (iv, v) in self.v.iter().enumerate() {
                s.push_str(&format!("{u:.6e},{v:.6e},{:.6e}\n", self.at(iu, iv)));
            }
        }
        s
    }

    /// Little-endian raster: magic `PKGF`, `u32` version 1, `u32` axis,
    /// `u32` nu, `u32` nv, `u32` step, `f64` offset, nu `f64` u coordinates,
    /// nv `f64` v coordinates, then nu * nv `f32` values, u major.
    pub fn write_raster(&self, path: &Path) -> std::io::Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(b"PKGF")?;
        for v in [1u32, self.plane.axis as u32, self.u.len() as u32, self.v.len() as u32, self.step as u32] {
            f.write_all(&v.to_le_bytes())?;
        }
        f.write_all(&self.plane.offset.to_le_bytes())?;
        for c in self.u.iter().chain(&self.v) {
            f.write_all(&c.to_le_bytes())?;
        }
        for v in &self.values {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }
}

pub struct Simulation<'g> {
    grid: &'g YeeGrid,
    state: FieldState,
    coeff: Vec<u32>,
    table: Box<[(f32, f32); 256]>,
    classes: Vec<EdgeClass>,
    ax: [Axis; 3],
    ch: f32,
    slabs: Vec<PmlSlab>,
    ports: Vec<PortDriver>,
    excited: Option<(usize, SourceWaveform)>,
    currents: Vec<EdgeCurrentSource>,
    samples: Vec<(Vec<f64>, Vec<f64>)>,
    pending: Vec<f64>,
}

impl<'g> Simulation<'g> {
    /// Builds a solver for `grid`. `excited` names the driven port and its
    /// waveform; every other port is a matched passive termination.
    pub fn new(grid: &'g YeeGrid, excited: Option<(usize, SourceWaveform)>) -> Result<Self, SolverError> {
        if let Some((p, _)) = excited {
            if p >= grid.ports.len() {
                return Err(SolverError::NoSuchPort(p));
            }
        }
        let (nx, ny, nz) = grid.dims();
        let state = FieldState::zeros(nx, ny, nz);
        let ax = [Axis::new(&grid.x_edges), Axis::new(&grid.y_edges), Axis::new(&grid.z_edges)];
        let dt = grid.dt;

        let mut classes = vec![EdgeClass { ca: 0.0, cb: 0.0, eps: EPS0, sigma: 0.0 }];
        let mut lookup: HashMap<(u32, u32), u8> = HashMap::new();
        let mut coeff = vec![0u32; state.ex.len()];
        let sy = nz + 1;
        let sx = (ny + 1) * sy;

        let mut class_for = |eps_r: f64, sigma: f64, classes: &mut Vec<EdgeClass>| -> Result<u8, SolverError> {
            let key = ((eps_r as f32).to_bits(), (sigma as f32).to_bits());
            if let Some(&c) = lookup.get(&key) {
                return Ok(c);
            }
            let eps = eps_r * EPS0;
            let s = sigma * dt / (2.0 * eps);
            let class = EdgeClass {
                ca: ((1.0 - s) / (1.0 + s)) as f32,
                cb: (dt / eps / (1.0 + s)) as f32,
                eps,
                sigma,
            };
            if classes.len() >= 256 {
                return Err(SolverError::TooManyEdgeClasses(classes.len() + 1));
            }
            classes.push(class);
            let c = (classes.len() - 1) as u8;
            lookup.insert(key, c);
            Ok(c)
        };

        for i in 0..=nx {
            for j in 0..=ny {
                for k in 0..=nz {
                    let g = i * sx + j * sy + k;
                    let mut word = 0u32;
                    for (shift, comp) in [(0, Comp::X), (8, Comp::Y), (16, Comp::Z)] {
                        let c = match edge_average(grid, &ax, comp, i, j, k) {
                            Some((eps_r, sigma)) => class_for(eps_r, sigma, &mut classes)?,
                            None => PEC_CLASS,
                        };
                        word |= (c as u32) << shift;
                    }
                    if i < nx && j < ny && k < nz {
                        word |= (grid.cell_material[grid.cell_index(i, j, k)] as u32) << 24;
                    }
                    coeff[g] = word;
                }
            }
        }

        let mut ports = Vec::with_capacity(grid.ports.len());
        for p in &grid.ports {
            for k in p.k_feed + 1..p.k_top {
                let g = p.i * sx + p.j * sy + k;
                coeff[g] &= !(0xff << 16);
            }
            let g = p.i * sx + p.j * sy + p.k_feed;
            let class = classes[((coeff[g] >> 16) & 0xff) as usize];
            ports.push(PortDriver {
                port: p.port,
                idx: g,
                i: p.i,
                j: p.j,
                dz: ax[2].h[p.k_feed],
                area: ax[0].hd[p.i] * ax[1].hd[p.j],
                eps: class.eps,
                sigma: class.sigma,
                resistance: grid.port_impedance,
            });
        }

        let mut table = Box::new([(0.0f32, 0.0f32); 256]);
        for (n, c) in classes.iter().enumerate() {
            table[n] = (c.ca, c.cb);
        }

        let slabs = build_pml(grid, &ax, nx, ny, nz);
        let n_ports = ports.len();
        Ok(Self {
            grid,
            state,
            coeff,
            table,
            classes,
            ax,
            ch: (dt / MU0) as f32,
            slabs,
            ports,
            excited,
            currents: Vec::new(),
            samples: vec![(Vec::new(), Vec::new()); n_ports],
            pending: vec![0.0; n_ports],
        })
    }

    pub fn grid(&self) -> &YeeGrid {
        self.grid
    }

    pub fn state(&self) -> &FieldState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut FieldState {
        &mut self.state
    }

    pub fn add_current_source(&mut self, src: EdgeCurrentSource) {
        self.currents.push(src);
    }

    /// Bytes held by the field arrays and the packed coefficient volume.
    pub fn allocated_bytes(&self) -> usize {
        self.state.allocated_bytes() + self.coeff.len() * std::mem::size_of::<u32>()
    }

    /// Forces every conductor edge to zero.
    pub fn enforce_pec(&mut self) {
        let st = &mut self.state;
        for (g, w) in self.coeff.iter().enumerate() {
            if w & 0xff == 0 {
                st.ex[g] = 0.0;
            }
            if (w >> 8) & 0xff == 0 {
                st.ey[g] = 0.0;
            }
            if (w >> 16) & 0xff == 0 {
                st.ez[g] = 0.0;
            }
        }
    }

    /// True when the edge is a perfect conductor (walls, sheets, wires).
    pub fn is_pec_edge(&self, component: usize, i: usize, j: usize, k: usize) -> bool {
        let w = self.coeff[self.state.idx(i, j, k)];
        (w >> (8 * component)) & 0xff == 0
    }

    /// Advances the fields by one time step.
    pub fn step(&mut self) -> Result<(), SolverError> {
        self.update_h();
        self.pml_h();
        let port_values = self.port_updates();
        self.update_e();
        self.pml_e();
        self.apply_currents();
        for (p, v) in self.ports.iter().zip(port_values) {
            self.state.ez[p.idx] = v as f32;
        }
        self.state.step += 1;
        self.state.time = self.state.step as f64 * self.grid.dt;

        let bad_port = self.pending.iter().any(|v| !v.is_finite());
        if bad_port || self.state.step % FINITE_CHECK_INTERVAL == 0 {
            self.check_finite()?;
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<(), SolverError> {
        if let Some((component, i, j, k)) = self.state.first_non_finite() {
            return Err(SolverError::NonFinite { step: self.state.step, component, i, j, k });
        }
        Ok(())
    }

    /// Advances one step and returns the discrete energy at the starting
    /// integer time level, `1/2 sum eps E^n . E^n + 1/2 sum mu H^(n-1/2) . H^(n+1/2)`,
    /// which is exactly conserved by the lossless leapfrog scheme.
    pub fn step_with_energy(&mut self) -> Result<f64, SolverError> {
        let h_prev = [self.state.hx.clone(), self.state.hy.clone(), self.state.hz.clone()];
        let e_part = self.electric_energy();
        self.update_h();
        self.pml_h();
        let h_part = self.magnetic_energy_product(&h_prev);
        let port_values = self.port_updates();
        self.update_e();
        self.pml_e();
        self.apply_currents();
        for (p, v) in self.ports.iter().zip(port_values) {
            self.state.ez[p.idx] = v as f32;
        }
        self.state.step += 1;
        self.state.time = self.state.step as f64 * self.grid.dt;
        self.check_finite()?;
        Ok(e_part + h_part)
    }

    fn electric_energy(&self) -> f64 {
        let (nx, ny, nz) = (self.state.nx, self.state.ny, self.state.nz);
        let st = &self.state;
        let [ax, ay, az] = &self.ax;
        let mut w = 0.0;
        for i in 0..=nx {
            for j in 0..=ny {
                for k in 0..=nz {
                    let g = st.idx(i, j, k);
                    let word = self.coeff[g];
                    if i < nx {
                        let c = &self.classes[(word & 0xff) as usize];
                        w += c.eps * (st.ex[g] as f64).powi(2) * ax.h[i] * ay.hd[j] * az.hd[k];
                    }
                    if j < ny {
                        let c = &self.classes[((word >> 8) & 0xff) as usize];
                        w += c.eps * (st.ey[g] as f64).powi(2) * ax.hd[i] * ay.h[j] * az.hd[k];
                    }
                    if k < nz {
                        let c = &self.classes[((word >> 16) & 0xff) as usize];
                        w += c.eps * (st.ez[g] as f64).powi(2) * ax.hd[i] * ay.hd[j] * az.h[k];
                    }
                }
            }
        }
        0.5 * w
    }

    fn magnetic_energy_product(&self, prev: &[Vec<f32>; 3]) -> f64 {
        let (nx, ny, nz) = (self.state.nx, self.state.ny, self.state.nz);
        let st = &self.state;
        let [ax, ay, az] = &self.ax;
        let mut w = 0.0;
        for i in 0..=nx {
            for j in 0..=ny {
                for k in 0..=nz {
                    let g = st.idx(i, j, k);
                    if j < ny && k < nz {
                        w += st.hx[g] as f64 * prev[0][g] as f64 * ax.hd[i] * ay.h[j] * az.h[k];
                    }
                    if i < nx && k < nz {
                        w += st.hy[g] as f64 * prev[1][g] as f64 * ax.h[i] * ay.hd[j] * az.h[k];
                    }
                    if i < nx && j < ny {
                        w += st.hz[g] as f64 * prev[2][g] as f64 * ax.h[i] * ay.h[j] * az.hd[k];
                    }
                }
            }
        }
        0.5 * MU0 * w
    }

    fn update_h(&mut self) {
        let (nx, ny, nz) = (self.state.nx, self.state.ny, self.state.nz);
        let sy = nz + 1;
        let sx = (ny + 1) * sy;
        let ch = self.ch;
        let (ix, iy, iz) = (&self.ax[0].inv, &self.ax[1].inv, &self.ax[2].inv);
        let st = &mut self.state;
        let (ex, ey, ez) = (&st.ex, &st.ey, &st.ez);
        let kernel = |i: usize, hx: &mut [f32], hy: &mut [f32], hz: &mut [f32]| {
            let ixi = if i < nx { ix[i] } else { 0.0 };
            for j in 0..=ny {
                let g = i * sx + j * sy;
                let r = j * sy;
                let iyj = if j < ny { iy[j] } else { 0.0 };
                if j < ny {
                    let hxr = &mut hx[r..r + nz];
                    let ez0 = &ez[g..g + nz];
                    let ez1 = &ez[g + sy..g + sy + nz];
                    let ey0 = &ey[g..g + nz + 1];
                    let izr = &iz[..nz];
                    for k in 0..nz {
                        hxr[k] -= ch * ((ez1[k] - ez0[k]) * iyj - (ey0[k + 1] - ey0[k]) * izr[k]);
                    }
                }
                if i < nx {
                    let hyr = &mut hy[r..r + nz];
                    let ex0 = &ex[g..g + nz + 1];
                    let ez0 = &ez[g..g + nz];
                    let ez1 = &ez[g + sx..g + sx + nz];
                    let izr = &iz[..nz];
                    for k in 0..nz {
                        hyr[k] -= ch * ((ex0[k + 1] - ex0[k]) * izr[k] - (ez1[k] - ez0[k]) * ixi);
                    }
                    if j < ny {
                        let hzr = &mut hz[r..r + nz + 1];
                        let ey0 = &ey[g..g + nz + 1];
                        let ey1 = &ey[g + sx..g + sx + nz + 1];
                        let ex0 = &ex[g..g + nz + 1];
                        let ex1 = &ex[g + sy..g + sy + nz + 1];
                        for k in 0..=nz {
                            hzr[k] -= ch * ((ey1[k] - ey0[k]) * ixi - (ex1[k] - ex0[k]) * iyj);
                        }
                    }
                }
            }
        };
        let (hx, hy, hz) = (&mut st.hx, &mut st.hy, &mut st.hz);
        if rayon::current_num_threads() > 1 {
            hx.par_chunks_mut(sx)
                .zip(hy.par_chunks_mut(sx))
                .zip(hz.par_chunks_mut(sx))
                .enumerate()
                .for_each(|(i, ((a, b), c))| kernel(i, a, b, c));
        } else {
            hx.chunks_mut(sx)
                .zip(hy.chunks_mut(sx))
                .zip(hz.chunks_mut(sx))
                .enumerate()
                .for_each(|(i, ((a, b), c))| kernel(i, a, b, c));
        }
    }

    fn update_e(&mut self) {
        let (nx, ny, nz) = (self.state.nx, self.state.ny, self.state.nz);
        let sy = nz + 1;
        let sx = (ny + 1) * sy;
        let (ixd, iyd, izd) = (&self.ax[0].inv_d, &self.ax[1].inv_d, &self.ax[2].inv_d);
        let table: &[(f32, f32); 256] = &self.table;
        let coeff = &self.coeff;
        let st = &mut self.state;
        let (hx, hy, hz) = (&st.hx, &st.hy, &st.hz);
        let kernel = |i: usize, ex: &mut [f32], ey: &mut [f32], ez: &mut [f32]| {
            let ixi = ixd[i];
            for j in 0..=ny {
                let g = i * sx + j * sy;
                let r = j * sy;
                let w = &coeff[g..g + nz + 1];
                let iyj = iyd[j];
                if i < nx && j > 0 && j < ny {
                    let exr = &mut ex[r..r + nz + 1];
                    let hz0 = &hz[g..g + nz + 1];
                    let hzm = &hz[g - sy..g - sy + nz + 1];
                    let hy0 = &hy[g..g + nz + 1];
                    for k in 1..nz {
                        let (ca, cb) = table[(w[k] & 0xff) as usize];
                        exr[k] = ca * exr[k] + cb * ((hz0[k] - hzm[k]) * iyj - (hy0[k] - hy0[k - 1]) * izd[k]);
                    }
                }
                if i > 0 && i < nx && j < ny {
                    let eyr = &mut ey[r..r + nz + 1];
                    let hx0 = &hx[g..g + nz + 1];
                    let hz0 = &hz[g..g + nz + 1];
                    let hzm = &hz[g - sx..g - sx + nz + 1];
                    for k in 1..nz {
                        let (ca, cb) = table[((w[k] >> 8) & 0xff) as usize];
                        eyr[k] = ca * eyr[k] + cb * ((hx0[k] - hx0[k - 1]) * izd[k] - (hz0[k] - hzm[k]) * ixi);
                    }
                }
                if i > 0 && i < nx && j > 0 && j < ny {
                    let ezr = &mut ez[r..r + nz];
                    let hy0 = &hy[g..g + nz];
                    let hym = &hy[g - sx..g - sx + nz];
                    let hx0 = &hx[g..g + nz];
                    let hxm = &hx[g - sy..g - sy + nz];
                    for k in 0..nz {
                        let (ca, cb) = table[((w[k] >> 16) & 0xff) as usize];
                        ezr[k] = ca * ezr[k] + cb * ((hy0[k] - hym[k]) * ixi - (hx0[k] - hxm[k]) * iyj);
                    }
                }
            }
        };
        let (ex, ey, ez) = (&mut st.ex, &mut st.ey, &mut st.ez);
        if rayon::current_num_threads() > 1 {
            ex.par_chunks_mut(sx)
                .zip(ey.par_chunks_mut(sx))
                .zip(ez.par_chunks_mut(sx))
                .enumerate()
                .for_each(|(i, ((a, b), c))| kernel(i, a, b, c));
        } else {
            ex.chunks_mut(sx)
                .zip(ey.chunks_mut(sx))
                .zip(ez.chunks_mut(sx))
                .enumerate()
                .for_each(|(i, ((a, b), c))| kernel(i, a, b, c));
        }
    }

    fn pml_h(&mut self) {
        let (nx, ny, nz) = (self.state.nx, self.state.ny, self.state.nz);
        let sy = nz + 1;
        let sx = (ny + 1) * sy;
        let strides = [sx, sy, 1];
        let ch = self.ch;
        let st = &mut self.state;
        for slab in self.slabs.iter_mut() {
            let a = slab.axis;
            let inv = &self.ax[a].inv;
            // (target, source, sign) for the two H components affected
            let pairs: [(Comp, Comp, f32); 2] = match a {
                0 => [(Comp::Y, Comp::Z, 1.0), (Comp::Z, Comp::Y, -1.0)],
                1 => [(Comp::X, Comp::Z, -1.0), (Comp::Z, Comp::X, 1.0)],
                _ => [(Comp::X, Comp::Y, 1.0), (Comp::Y, Comp::X, -1.0)],
            };
            for (n, (target, source, sign)) in pairs.into_iter().enumerate() {
                let ranges = h_ranges(target, nx, ny, nz);
                let src: &[f32] = match source {
                    Comp::X => &st.ex,
                    Comp::Y => &st.ey,
                    Comp::Z => &st.ez,
                };
                let mut upd: Vec<(usize, f32)> = Vec::new();
                let psi = &mut slab.psi_h[n];
                let mut q = 0;
                for (m, &p) in slab.h_pos.iter().enumerate() {
                    let (b, c, kinv) = (slab.bh[m], slab.chh[m], slab.kh[m]);
                    let ip = inv[p];
                    for_each_in(a, p, &ranges, |i, j, k| {
                        let g = i * sx + j * sy + k;
                        let d = (src[g + strides[a]] - src[g]) * ip;
                        let ps = b * psi[q] + c * d;
                        psi[q] = ps;
                        q += 1;
                        upd.push((g, sign * ch * ((kinv - 1.0) * d + ps)));
                    });
                }
                let tgt: &mut [f32] = match target {
                    Comp::X => &mut st.hx,
                    Comp::Y => &mut st.hy,
                    Comp::Z => &mut st.hz,
                };
                for (g, v) in upd {
                    tgt[g] += v;
                }
            }
        }
    }

    fn pml_e(&mut self) {
        let (nx, ny, nz) = (self.state.nx, self.state.ny, self.state.nz);
        let sy = nz + 1;
        let sx = (ny + 1) * sy;
        let strides = [sx, sy, 1];
        let st = &mut self.state;
        for slab in self.slabs.iter_mut() {
            let a = slab.axis;
            let inv_d = &self.ax[a].inv_d;
            let pairs: [(Comp, Comp, f32); 2] = match a {
                0 => [(Comp::Y, Comp::Z, -1.0), (Comp::Z, Comp::Y, 1.0)],
                1 => [(Comp::X, Comp::Z, 1.0), (Comp::Z, Comp::X, -1.0)],
                _ => [(Comp::X, Comp::Y, -1.0), (Comp::Y, Comp::X, 1.0)],
            };
            for (n, (target, source, sign)) in pairs.into_iter().enumerate() {
                let ranges = e_ranges(target, nx, ny, nz);
                let shift = match target {
                    Comp::X => 0,
                    Comp::Y => 8,
                    Comp::Z => 16,
                };
                let src: &[f32] = match source {
                    Comp::X => &st.hx,
                    Comp::Y => &st.hy,
                    Comp::Z => &st.hz,
                };
                let mut upd: Vec<(usize, f32)> = Vec::new();
                let psi = &mut slab.psi_e[n];
                let mut q = 0;
                for (m, &p) in slab.e_pos.iter().enumerate() {
                    let (b, c, kinv) = (slab.be[m], slab.ce[m], slab.ke[m]);
                    let ip = inv_d[p];
                    let coeff = &self.coeff;
                    let table = &self.table;
                    for_each_in(a, p, &ranges, |i, j, k| {
                        let g = i * sx + j * sy + k;
                        let d = (src[g] - src[g - strides[a]]) * ip;
                        let ps = b * psi[q] + c * d;
                        psi[q] = ps;
                        q += 1;
                        let cb = table[((coeff[g] >> shift) & 0xff) as usize].1;
                        upd.push((g, sign * cb * ((kinv - 1.0) * d + ps)));
                    });
                }
                let tgt: &mut [f32] = match target {
                    Comp::X => &mut st.ex,
                    Comp::Y => &mut st.ey,
                    Comp::Z => &mut st.ez,
                };
                for (g, v) in upd {
                    tgt[g] += v;
                }
            }
        }
    }

    fn apply_currents(&mut self) {
        let t = (self.state.step as f64 + 0.5) * self.grid.dt;
        for s in &self.currents {
            let g = self.state.idx(s.i, s.j, s.k);
            let shift = 8 * s.component;
            let cb = self.table[((self.coeff[g] >> shift) & 0xff) as usize].1 as f64;
            let area = match s.component {
                0 => self.ax[1].hd[s.j] * self.ax[2].hd[s.k],
                1 => self.ax[0].hd[s.i] * self.ax[2].hd[s.k],
                _ => self.ax[0].hd[s.i] * self.ax[1].hd[s.j],
            };
            let dj = (cb * s.waveform.value(t) / area) as f32;
            match s.component {
                0 => self.state.ex[g] -= dj,
                1 => self.state.ey[g] -= dj,
                _ => self.state.ez[g] -= dj,
            }
        }
    }

    /// Semi-implicit update of every port edge; records V and I at the half
    /// step. Must run after the H update and before the E update.
    fn port_updates(&mut self) -> Vec<f64> {
        let dt = self.grid.dt;
        let t = (self.state.step as f64 + 0.5) * dt;
        let st = &self.state;
        let sy = st.nz + 1;
        let sx = (st.ny + 1) * sy;
        let mut out = Vec::with_capacity(self.ports.len());
        for (n, p) in self.ports.iter().enumerate() {
            let g = p.idx;
            let curl = (st.hy[g] as f64 - st.hy[g - sx] as f64) * self.ax[0].inv_d[p.i] as f64
                - (st.hx[g] as f64 - st.hx[g - sy] as f64) * self.ax[1].inv_d[p.j] as f64;
            let vs = match self.excited {
                Some((e, w)) if e == p.port => w.value(t),
                _ => 0.0,
            };
            let r = p.resistance;
            let beta = dt * p.dz / (2.0 * r * p.eps * p.area);
            let s = p.sigma * dt / (2.0 * p.eps);
            let e0 = st.ez[g] as f64;
            let e1 = ((1.0 - beta - s) * e0 + dt / p.eps * curl - dt / (p.eps * r * p.area) * vs) / (1.0 + beta + s);
            let v = -p.dz * 0.5 * (e0 + e1);
            let i = (vs - v) / r;
            self.samples[n].0.push(v);
            self.samples[n].1.push(i);
            self.pending[n] = v + i;
            out.push(e1);
        }
        out
    }

    /// Windowed port energy used by the ring-down criterion.
    fn window_energy(&self, from: usize) -> f64 {
        let mut e = 0.0;
        for (p, (v, i)) in self.ports.iter().zip(&self.samples) {
            let r = p.resistance;
            for n in from..v.len() {
                e += (v[n] * v[n] + r * r * i[n] * i[n]) / r;
            }
        }
        e * self.grid.dt
    }

    /// Runs until the ring-down criterion is met or `policy.max_steps` is
    /// reached. `snapshot_steps` request `|E|` slices at given steps.
    pub fn run(
        mut self,
        policy: &DurationPolicy,
        snapshots: &[(usize, SlicePlane)],
    ) -> Result<RunResult, SolverError> {
        let started = Instant::now();
        let dt = self.grid.dt;
        let f_ref = self.excited.map(|(_, w)| w.f_center).unwrap_or(self.grid.f_center);
        let window = ((policy.window_periods / (f_ref * dt)).ceil() as usize).max(1);
        let source_end = self
            .excited
            .map(|(_, w)| w.end_time())
            .into_iter()
            .chain(self.currents.iter().map(|c| c.waveform.end_time()))
            .fold(0.0, f64::max);
        let mut peak = 0.0f64;
        let mut converged = false;
        let mut slices = Vec::new();
        let mut window_start = 0;
        while self.state.step < policy.max_steps {
            self.step()?;
            for (at, plane) in snapshots {
                if *at == self.state.step {
                    slices.push(self.record_field_slice(*plane)?);
                }
            }
            if self.state.step - window_start == window {
                let e = self.window_energy(window_start);
                window_start = self.state.step;
                peak = peak.max(e);
                if self.state.time > source_end && peak > 0.0 && e < policy.threshold * peak {
                    converged = true;
                    break;
                }
            }
        }
        let elapsed = started.elapsed().as_secs_f64();
        let steps = self.state.step;
        let cells = self.grid.cell_count() as f64;
        let records = self
            .ports
            .iter()
            .zip(self.samples)
            .map(|(p, (v, i))| PortRecord {
                port: p.port,
                voltage: v,
                current: i,
                dt,
                t0: 0.5 * dt,
                excited: matches!(self.excited, Some((e, _)) if e == p.port),
                impedance: p.resistance,
            })
            .collect();
        Ok(RunResult {
            records,
            stats: RunStats {
                steps,
                converged,
                wall_time_s: elapsed,
                cells_per_second: if elapsed > 0.0 { cells * steps as f64 / elapsed } else { 0.0 },
            },
            slices,
        })
    }

    /// `|E|` at the centres of the cells cut by `plane`.
    pub fn record_field_slice(&self, plane: SlicePlane) -> Result<FieldSlice, SolverError> {
        record_field_slice(self.grid, &self.state, plane)
    }

    /// Samples recorded so far for `port` as `(V, I)`.
    pub fn port_samples(&self, port: usize) -> Option<(&[f64], &[f64])> {
        self.ports.iter().position(|p| p.port == port).map(|n| (&self.samples[n].0[..], &self.samples[n].1[..]))
    }
}

/// `|E|` at the centres of the cells cut by `plane`.
pub fn record_field_slice(grid: &YeeGrid, st: &FieldState, plane: SlicePlane) -> Result<FieldSlice, SolverError> {
    let edges = [&grid.x_edges, &grid.y_edges, &grid.z_edges];
    let a = plane.axis;
    if a > 2 {
        return Err(SolverError::PlaneOutside { axis: a, offset: plane.offset });
    }
    let e = edges[a];
    if plane.offset < e[0] || plane.offset > *e.last().unwrap() {
        return Err(SolverError::PlaneOutside { axis: a, offset: plane.offset });
    }
    let cell = e.windows(2).position(|w| plane.offset >= w[0] && plane.offset <= w[1]).unwrap();
    let (ua, va) = match a {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let centers = |e: &[f64]| -> Vec<f64> { e.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect() };
    let u = centers(edges[ua]);
    let v = centers(edges[va]);
    let mut values = Vec::with_capacity(u.len() * v.len());
    for iu in 0..u.len() {
        for iv in 0..v.len() {
            let mut c = [0usize; 3];
            c[a] = cell;
            c[ua] = iu;
            c[va] = iv;
            let (i, j, k) = (c[0], c[1], c[2]);
            let avg4 = |f: &[f32], d1: (usize, usize, usize), d2: (usize, usize, usize)| -> f64 {
                let s = |di: usize, dj: usize, dk: usize| f[st.idx(i + di, j + dj, k + dk)] as f64;
                0.25 * (s(0, 0, 0) + s(d1.0, d1.1, d1.2) + s(d2.0, d2.1, d2.2) + s(d1.0 + d2.0, d1.1 + d2.1, d1.2 + d2.2))
            };
            let exc = avg4(&st.ex, (0, 1, 0), (0, 0, 1));
            let eyc = avg4(&st.ey, (1, 0, 0), (0, 0, 1));
            let ezc = avg4(&st.ez, (1, 0, 0), (0, 1, 0));
            values.push((exc * exc + eyc * eyc + ezc * ezc).sqrt());
        }
    }
    Ok(FieldSlice { plane, u, v, values, step: st.step })
}

/// Valid index ranges (exclusive upper bounds) of an E component that the
/// update touches: boundary-tangential edges are excluded.
fn e_ranges(c: Comp, nx: usize, ny: usize, nz: usize) -> [(usize, usize); 3] {
    match c {
        Comp::X => [(0, nx), (1, ny), (1, nz)],
        Comp::Y => [(1, nx), (0, ny), (1, nz)],
        Comp::Z => [(1, nx), (1, ny), (0, nz)],
    }
}

fn h_ranges(c: Comp, nx: usize, ny: usize, nz: usize) -> [(usize, usize); 3] {
    match c {
        Comp::X => [(0, nx + 1), (0, ny), (0, nz)],
        Comp::Y => [(0, nx), (0, ny + 1), (0, nz)],
        Comp::Z => [(0, nx), (0, ny), (0, nz + 1)],
    }
}

/// Visits the plane `axis = p` restricted to `ranges`, in a fixed order.
fn for_each_in(axis: usize, p: usize, ranges: &[(usize, usize); 3], mut f: impl FnMut(usize, usize, usize)) {
    let r = |n: usize| if n == axis { (p, p + 1) } else { ranges[n] };
    let (ri, rj, rk) = (r(0), r(1), r(2));
    if p < ranges[axis].0 || p >= ranges[axis].1 {
        // keep psi indexing stable: visit nothing but the caller still
        // counts on a fixed layout, so slabs only hold in-range positions
        return;
    }
    for i in ri.0..ri.1 {
        for j in rj.0..rj.1 {
            for k in rk.0..rk.1 {
                f(i, j, k);
            }
        }
    }
}

/// Weighted average of permittivity and conductivity over the cells around
/// an E edge; `None` for conductor or boundary-tangential edges.
fn edge_average(grid: &YeeGrid, ax: &[Axis; 3], comp: Comp, i: usize, j: usize, k: usize) -> Option<(f64, f64)> {
    let (nx, ny, nz) = grid.dims();
    let along = match comp {
        Comp::X => (0, i, nx),
        Comp::Y => (1, j, ny),
        Comp::Z => (2, k, nz),
    };
    if along.1 >= along.2 {
        return None;
    }
    let idx = [i, j, k];
    let n = [nx, ny, nz];
    let others: Vec<usize> = (0..3).filter(|&a| a != along.0).collect();
    for &a in &others {
        if idx[a] == 0 || idx[a] == n[a] {
            return None;
        }
    }
    let (a1, a2) = (others[0], others[1]);
    let mut eps = 0.0;
    let mut sig = 0.0;
    let mut wsum = 0.0;
    for d1 in 0..2 {
        for d2 in 0..2 {
            let mut c = idx;
            c[a1] = idx[a1] + d1 - 1;
            c[a2] = idx[a2] + d2 - 1;
            let m = grid.material_at(c[0], c[1], c[2]);
            if m.pec {
                return None;
            }
            let w = ax[a1].h[c[a1]] * ax[a2].h[c[a2]];
            eps += w * m.eps_r;
            sig += w * m.sigma;
            wsum += w;
        }
    }
    Some((eps / wsum, sig / wsum))
}

fn build_pml(grid: &YeeGrid, ax: &[Axis; 3], nx: usize, ny: usize, nz: usize) -> Vec<PmlSlab> {
    let dt = grid.dt;
    let n = [nx, ny, nz];
    let edges = [&grid.x_edges, &grid.y_edges, &grid.z_edges];
    let layout = grid.pml;
    let faces = [(0, layout.x_lo, false), (0, layout.x_hi, true), (1, layout.y_lo, false), (1, layout.y_hi, true), (2, layout.z_hi, true)];
    let alpha_max = 2.0 * PI * EPS0 * grid.f_center / 10.0;
    let mut slabs = Vec::new();
    for (a, cells, high) in faces {
        if cells == 0 {
            continue;
        }
        let e = edges[a];
        let (inner, outer) = if high { (e[n[a] - cells], e[n[a]]) } else { (e[cells], e[0]) };
        let depth_total = (outer - inner).abs();
        let h_avg = depth_total / cells as f64;
        let sigma_max = 0.8 * (PML_ORDER as f64 + 1.0) / (ETA0 * h_avg);
        let profile = |x: f64| -> (f32, f32, f32) {
            let rho = if high { x - inner } else { inner - x };
            if rho <= 0.0 {
                return (1.0, 0.0, 1.0);
            }
            let r = (rho / depth_total).min(1.0);
            let sigma = sigma_max * r.powi(PML_ORDER);
            let kappa = 1.0 + (PML_KAPPA_MAX - 1.0) * r.powi(PML_ORDER);
            let alpha = alpha_max * (1.0 - r);
            let b = (-(sigma / kappa + alpha) * dt / EPS0).exp();
            let c = if sigma > 0.0 { sigma / (sigma * kappa + kappa * kappa * alpha) * (b - 1.0) } else { 0.0 };
            (b as f32, c as f32, (1.0 / kappa) as f32)
        };
        let (e_pos, h_pos): (Vec<usize>, Vec<usize>) = if high {
            ((n[a] - cells + 1..n[a]).collect(), (n[a] - cells..n[a]).collect())
        } else {
            ((1..cells).collect(), (0..cells).collect())
        };
        let mut be = Vec::new();
        let mut ce = Vec::new();
        let mut ke = Vec::new();
        for &p in &e_pos {
            let (b, c, k) = profile(e[p]);
            be.push(b);
            ce.push(c);
            ke.push(k);
        }
        let mut bh = Vec::new();
        let mut chh = Vec::new();
        let mut kh = Vec::new();
        for &p in &h_pos {
            let (b, c, k) = profile(0.5 * (e[p] + e[p + 1]));
            bh.push(b);
            chh.push(c);
            kh.push(k);
        }
        let e_comps: [Comp; 2] = match a {
            0 => [Comp::Y, Comp::Z],
            1 => [Comp::X, Comp::Z],
            _ => [Comp::X, Comp::Y],
        };
        let h_comps: [Comp; 2] = match a {
            0 => [Comp::Y, Comp::Z],
            1 => [Comp::X, Comp::Z],
            _ => [Comp::X, Comp::Y],
        };
        let plane_size = |r: [(usize, usize); 3]| -> usize {
            (0..3).filter(|&d| d != a).map(|d| r[d].1 - r[d].0).product()
        };
        let psi_e = e_comps.map(|c| {
            let r = e_ranges(c, nx, ny, nz);
            let count = e_pos.iter().filter(|&&p| p >= r[a].0 && p < r[a].1).count();
            vec![0.0f32; count * plane_size(r)]
        });
        let psi_h = h_comps.map(|c| {
            let r = h_ranges(c, nx, ny, nz);
            let count = h_pos.iter().filter(|&&p| p >= r[a].0 && p < r[a].1).count();
            vec![0.0f32; count * plane_size(r)]
        });
        let _ = ax;
        slabs.push(PmlSlab { axis: a, e_pos, h_pos, be, ce, ke, bh, chh, kh, psi_e, psi_h });
    }
    slabs
}

/// Convenience wrapper: one excitation run of `grid` driving `excited_port`.
pub fn run(
    grid: &YeeGrid,
    excited_port: usize,
    waveform: SourceWaveform,
    policy: &DurationPolicy,
) -> Result<RunResult, SolverError> {
    Simulation::new(grid, Some((excited_port, waveform)))?.run(policy, &[])
}
