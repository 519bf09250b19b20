//! Rectilinear Yee grid generation for a [`PackageScenario`].
//!
//! Lateral axes are uniform; the vertical axis is graded so that thin layers
//! get at least two cells while the grading ratio between neighbouring cells
//! stays at or below [`MAX_GRADING`].

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::geometry::{validate_scenario, LateralBoundary, PackageScenario, TopBoundary, DEFAULT_PORT_IMPEDANCE};
use crate::units::{wavelength, C0};

pub const MIN_RESOLUTION: f64 = 10.0;
pub const CFL_SAFETY: f64 = 0.99;
pub const MAX_GRADING: f64 = 1.5;
pub const MIN_FEATURE: f64 = 1e-9;
pub const DEFAULT_PML_CELLS: usize = 8;
/// Bytes per stored word (single-precision fields).
pub const WORD_SIZE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeshOptions {
    /// Cells per minimum wavelength on the lateral axes.
    pub resolution: f64,
    /// Vertical cells are this many times finer than lateral cells at most.
    pub vertical_refinement: f64,
    pub max_cells: usize,
    pub pml_cells: usize,
}

impl Default for MeshOptions {
    fn default() -> Self {
        Self { resolution: 10.0, vertical_refinement: 2.0, max_cells: 20_000_000, pml_cells: DEFAULT_PML_CELLS }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MeshError {
    #[error("resolution {0} cells per wavelength is below the minimum of 10")]
    Resolution(f64),
    #[error("feature `{0}` is thinner than 1 nm")]
    FeatureTooThin(String),
    #[error("grid of {cells} cells exceeds the budget of {budget}")]
    CellBudget { cells: usize, budget: usize },
    #[error("scenario is invalid: {0}")]
    InvalidScenario(String),
    #[error("monopole for port {port} cannot be placed: {reason}")]
    Monopole { port: usize, reason: String },
    #[error("too many distinct materials for the grid material table")]
    TooManyMaterials,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridMaterial {
    pub name: String,
    pub eps_r: f64,
    /// Conductivity used by the solver (S/m); loss tangents are converted at
    /// the band centre.
    pub sigma: f64,
    pub pec: bool,
}

/// A lumped port feeding a monopole rasterized on the `Ez` edge column at
/// node `(i, j)`: the feed gap is edge `k_feed`, wire edges fill
/// `k_feed + 1 .. k_top`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPort {
    pub port: usize,
    pub i: usize,
    pub j: usize,
    pub k_feed: usize,
    pub k_top: usize,
    /// Feed point in metres.
    pub position: [f64; 3],
}

/// Number of PML cells on each face.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PmlLayout {
    pub x_lo: usize,
    pub x_hi: usize,
    pub y_lo: usize,
    pub y_hi: usize,
    pub z_hi: usize,
}

impl PmlLayout {
    pub fn any(&self) -> bool {
        self.x_lo + self.x_hi + self.y_lo + self.y_hi + self.z_hi > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct YeeGrid {
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    pub z_edges: Vec<f64>,
    pub materials: Vec<GridMaterial>,
    /// Material index per cell, `(i * ny + j) * nz + k`.
    #[serde(skip)]
    pub cell_material: Vec<u8>,
    pub dt: f64,
    pub cells_per_wavelength: f64,
    pub lambda_min: f64,
    pub pml: PmlLayout,
    pub ports: Vec<GridPort>,
    /// Largest distance between a geometric feature and the grid line it
    /// snapped to.
    pub max_snap_error: f64,
    /// Node index of the monopole ground plane.
    pub k_ground: usize,
    /// Node index of the ceiling above the monopoles.
    pub k_ceiling: usize,
    pub port_impedance: f64,
    pub f_center: f64,
}

/// Summary embedded in result provenance.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct MeshSummary {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub dt: f64,
    pub min_cell: [f64; 3],
    pub max_cell: [f64; 3],
    pub cells_per_wavelength: f64,
    pub pml_cells: usize,
}

impl YeeGrid {
    /// Portless grid over explicit node lists, every cell of material
    /// `material`, PEC on all faces. Intended for analytic test boxes.
    pub fn closed_box(x_edges: Vec<f64>, y_edges: Vec<f64>, z_edges: Vec<f64>, material: GridMaterial, f_center: f64) -> Self {
        let dt = stable_dt(min_step(&x_edges), min_step(&y_edges), min_step(&z_edges));
        let cells = (x_edges.len() - 1) * (y_edges.len() - 1) * (z_edges.len() - 1);
        let lambda_min = wavelength(f_center, material.eps_r.max(1.0));
        let h = max_step(&x_edges).max(max_step(&y_edges)).max(max_step(&z_edges));
        YeeGrid {
            x_edges,
            y_edges,
            z_edges,
            materials: vec![material],
            cell_material: vec![0; cells],
            dt,
            cells_per_wavelength: lambda_min / h,
            lambda_min,
            pml: PmlLayout::default(),
            ports: Vec::new(),
            max_snap_error: 0.0,
            k_ground: 0,
            k_ceiling: 0,
            port_impedance: DEFAULT_PORT_IMPEDANCE,
            f_center,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.x_edges.len() - 1, self.y_edges.len() - 1, self.z_edges.len() - 1)
    }

    pub fn cell_count(&self) -> usize {
        let (nx, ny, nz) = self.dims();
        nx * ny * nz
    }

    #[inline]
    pub fn cell_index(&self, i: usize, j: usize, k: usize) -> usize {
        let (_, ny, nz) = self.dims();
        (i * ny + j) * nz + k
    }

    pub fn material_at(&self, i: usize, j: usize, k: usize) -> &GridMaterial {
        &self.materials[self.cell_material[self.cell_index(i, j, k)] as usize]
    }

    pub fn summary(&self) -> MeshSummary {
        let (nx, ny, nz) = self.dims();
        MeshSummary {
            nx,
            ny,
            nz,
            dt: self.dt,
            min_cell: [min_step(&self.x_edges), min_step(&self.y_edges), min_step(&self.z_edges)],
            max_cell: [max_step(&self.x_edges), max_step(&self.y_edges), max_step(&self.z_edges)],
            cells_per_wavelength: self.cells_per_wavelength,
            pml_cells: self.pml.x_lo.max(self.pml.z_hi),
        }
    }

    /// Index range of cells inside the physical domain (PML excluded).
    pub fn interior(&self) -> [(usize, usize); 3] {
        let (nx, ny, nz) = self.dims();
        [
            (self.pml.x_lo, nx - self.pml.x_hi),
            (self.pml.y_lo, ny - self.pml.y_hi),
            (0, nz - self.pml.z_hi),
        ]
    }

    /// Re-snaps every monopole tip for a new common length.
    pub fn with_monopole_length(&self, length: f64) -> Result<YeeGrid, MeshError> {
        let mut g = self.clone();
        let ground = g.z_edges[g.k_ground];
        let mut snap = 0.0f64;
        for p in g.ports.iter_mut() {
            let (k_top, err) = snap_tip(&g.z_edges, g.k_ground, g.k_ceiling, ground + length)
                .map_err(|reason| MeshError::Monopole { port: p.port, reason })?;
            p.k_top = k_top;
            snap = snap.max(err);
        }
        g.max_snap_error = g.max_snap_error.max(snap);
        Ok(g)
    }

    /// Monopole length actually realised on the grid.
    pub fn realised_length(&self) -> Option<f64> {
        self.ports.first().map(|p| self.z_edges[p.k_top] - self.z_edges[p.k_feed])
    }

    /// Size of the vertical cell that holds the monopole tip.
    pub fn tip_cell(&self) -> Option<f64> {
        self.ports.first().map(|p| {
            let k = p.k_top.min(self.z_edges.len() - 2);
            self.z_edges[k + 1] - self.z_edges[k]
        })
    }

    /// Writes `edges_x.csv`, `edges_y.csv`, `edges_z.csv` and
    /// `materials.bin`.
    ///
    /// `materials.bin` layout, little-endian: magic `PKGM`, `u32` version 1,
    /// `u32` nx, ny, nz, then one `u8` material index per cell with `k`
    /// fastest, then `i`-major order.
    pub fn write_dump(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        for (name, edges) in [("x", &self.x_edges), ("y", &self.y_edges), ("z", &self.z_edges)] {
            let mut s = String::from("index,position_m\n");
            for (n, e) in edges.iter().enumerate() {
                s.push_str(&format!("{n},{e:.9e}\n"));
            }
            fs::write(dir.join(format!("edges_{name}.csv")), s)?;
        }
        let (nx, ny, nz) = self.dims();
        let mut f = fs::File::create(dir.join("materials.bin"))?;
        f.write_all(b"PKGM")?;
        for v in [1u32, nx as u32, ny as u32, nz as u32] {
            f.write_all(&v.to_le_bytes())?;
        }
        f.write_all(&self.cell_material)?;
        Ok(())
    }
}

fn min_step(e: &[f64]) -> f64 {
    e.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

fn max_step(e: &[f64]) -> f64 {
    e.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

/// Stable time step for the given cell sizes.
pub fn stable_dt(dx_min: f64, dy_min: f64, dz_min: f64) -> f64 {
    CFL_SAFETY / (C0 * (1.0 / (dx_min * dx_min) + 1.0 / (dy_min * dy_min) + 1.0 / (dz_min * dz_min)).sqrt())
}

fn nearest_node(edges: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (n, e) in edges.iter().enumerate() {
        if (e - x).abs() < (edges[best] - x).abs() {
            best = n;
        }
    }
    best
}

fn snap_tip(z: &[f64], k_ground: usize, k_ceiling: usize, tip: f64) -> Result<(usize, f64), String> {
    let k = nearest_node(z, tip);
    if k < k_ground + 2 {
        return Err(format!("tip at {tip:.3e} m leaves no wire above the feed gap"));
    }
    if k >= k_ceiling {
        return Err(format!("tip at {tip:.3e} m reaches the ceiling"));
    }
    let cell = (z[k + 1] - z[k]).min(z[k] - z[k - 1]);
    let err = (z[k] - tip).abs();
    if err > 0.5 * cell.max(z[k] - z[k - 1]) + 1e-15 {
        return Err("tip snap error exceeds half a cell".into());
    }
    Ok((k, err))
}

fn uniform_axis(length: f64, h_max: f64, pml: (usize, usize)) -> Vec<f64> {
    let n = (length / h_max - 1e-9).ceil().max(1.0) as usize;
    let h = length / n as f64;
    let lo = pml.0 as isize;
    (-lo..=(n + pml.1) as isize).map(|m| m as f64 * h).collect()
}

/// Graded vertical node list through the interfaces of `layers`.
///
/// Each layer gets at most `min(h_max, thickness / 2)` cells; away from a
/// fine layer the admissible size grows linearly, and nodes are
/// equidistributed against that size field inside each layer. Any remaining
/// ratio above [`MAX_GRADING`] is removed by splitting the larger cell.
pub fn graded_axis(thicknesses: &[f64], h_caps: &[f64]) -> Vec<f64> {
    let mut bounds = vec![0.0];
    for t in thicknesses {
        bounds.push(bounds.last().unwrap() + t);
    }
    let h_max = h_caps.iter().copied().fold(0.0, f64::max);
    let h_layer: Vec<f64> = thicknesses.iter().zip(h_caps).map(|(t, h)| h.min(t / 2.0)).collect();
    let growth = 0.35;
    let size_at = |z: f64| -> f64 {
        let mut a = h_max;
        for (l, h) in h_layer.iter().enumerate() {
            let d = if z < bounds[l] {
                bounds[l] - z
            } else if z > bounds[l + 1] {
                z - bounds[l + 1]
            } else {
                0.0
            };
            a = a.min(h + growth * d);
        }
        a
    };

    let mut nodes = vec![0.0];
    for l in 0..thicknesses.len() {
        let (z0, z1) = (bounds[l], bounds[l + 1]);
        let samples = 400;
        let dz = (z1 - z0) / samples as f64;
        let mut phi = vec![0.0; samples + 1];
        for s in 0..samples {
            let zm = z0 + (s as f64 + 0.5) * dz;
            phi[s + 1] = phi[s] + dz / size_at(zm);
        }
        let total = phi[samples];
        let n = (total - 1e-9).ceil().max(2.0) as usize;
        let mut s = 0;
        for m in 1..n {
            let target = total * m as f64 / n as f64;
            while phi[s + 1] < target {
                s += 1;
            }
            let frac = (target - phi[s]) / (phi[s + 1] - phi[s]);
            nodes.push(z0 + (s as f64 + frac) * dz);
        }
        nodes.push(z1);
    }

    loop {
        let mut split = None;
        for n in 1..nodes.len() - 1 {
            let a = nodes[n] - nodes[n - 1];
            let b = nodes[n + 1] - nodes[n];
            if a / b > MAX_GRADING + 1e-9 {
                split = Some(n - 1);
                break;
            }
            if b / a > MAX_GRADING + 1e-9 {
                split = Some(n);
                break;
            }
        }
        match split {
            Some(c) => {
                let mid = 0.5 * (nodes[c] + nodes[c + 1]);
                nodes.insert(c + 1, mid);
            }
            None => break,
        }
    }
    nodes
}

/// Converts a validated scenario to a Yee grid.
pub fn generate_mesh(s: &PackageScenario, opts: &MeshOptions) -> Result<YeeGrid, MeshError> {
    if !(opts.resolution >= MIN_RESOLUTION) {
        return Err(MeshError::Resolution(opts.resolution));
    }
    let violations = validate_scenario(s);
    if !violations.is_empty() {
        let msg = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
        return Err(MeshError::InvalidScenario(msg));
    }
    for (n, l) in s.stack.iter().enumerate() {
        if l.thickness < MIN_FEATURE {
            return Err(MeshError::FeatureTooThin(format!("layer {n} ({})", l.role.as_str())));
        }
    }
    for (c, chip) in s.chips.iter().enumerate() {
        if chip.size[0] < MIN_FEATURE || chip.size[1] < MIN_FEATURE {
            return Err(MeshError::FeatureTooThin(format!("chip {c}")));
        }
    }

    let lambda_min = wavelength(s.band.f_max, s.max_permittivity());
    let h_lat = lambda_min / opts.resolution;
    let h_vert = h_lat / opts.vertical_refinement.max(1.0);

    let lateral_pml = match s.lateral_boundary {
        LateralBoundary::AbsorbingOpen => opts.pml_cells,
        LateralBoundary::PecWalls { .. } => 0,
    };
    let x_edges = uniform_axis(s.package_size[0], h_lat, (lateral_pml, lateral_pml));
    let y_edges = uniform_axis(s.package_size[1], h_lat, (lateral_pml, lateral_pml));

    let thicknesses: Vec<f64> = s.stack.iter().map(|l| l.thickness).collect();
    // conductors carry no field, so only the grading limit applies there
    let caps: Vec<f64> = s.stack.iter().map(|l| if l.material.is_pec() && !l.role.is_chip_level() { h_lat } else { h_vert }).collect();
    let mut z_edges = graded_axis(&thicknesses, &caps);
    let z_pml = match s.top_boundary {
        TopBoundary::Absorbing => opts.pml_cells,
        TopBoundary::Pec => 0,
    };
    if z_pml > 0 {
        let top = *z_edges.last().unwrap();
        let h = top - z_edges[z_edges.len() - 2];
        for m in 1..=z_pml {
            z_edges.push(top + m as f64 * h);
        }
    }

    let (nx, ny, nz) = (x_edges.len() - 1, y_edges.len() - 1, z_edges.len() - 1);
    let cells = nx * ny * nz;
    if cells > opts.max_cells {
        return Err(MeshError::CellBudget { cells, budget: opts.max_cells });
    }

    // Material table: vacuum first, then one entry per stack layer.
    let f_c = s.band.f_center;
    let mut materials = vec![GridMaterial { name: "vacuum".into(), eps_r: 1.0, sigma: 0.0, pec: false }];
    let mut layer_mat = Vec::with_capacity(s.stack.len());
    for l in &s.stack {
        let m = &l.material;
        let gm = GridMaterial {
            name: m.name.clone(),
            eps_r: m.rel_permittivity,
            sigma: m.conductivity_at(f_c).unwrap_or(0.0),
            pec: m.is_pec(),
        };
        let idx = match materials.iter().position(|x| *x == gm) {
            Some(i) => i,
            None => {
                materials.push(gm);
                materials.len() - 1
            }
        };
        layer_mat.push(idx);
    }
    if materials.len() > u8::MAX as usize {
        return Err(MeshError::TooManyMaterials);
    }

    let bottoms = s.layer_bottoms();
    let stack_top = s.stack_height();
    let layer_of = |z: f64| -> usize {
        if z >= stack_top {
            return s.stack.len() - 1;
        }
        bottoms.iter().rposition(|b| *b <= z).unwrap_or(0)
    };
    let [px, py] = s.package_size;
    let centers = |e: &[f64]| -> Vec<f64> { e.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect() };
    let (xc, yc, zc) = (centers(&x_edges), centers(&y_edges), centers(&z_edges));

    let mut in_chip = vec![false; nx * ny];
    for i in 0..nx {
        let x = xc[i].clamp(0.0, px);
        for j in 0..ny {
            let y = yc[j].clamp(0.0, py);
            in_chip[i * ny + j] = s.chips.iter().any(|c| c.contains(x, y));
        }
    }
    let column_layers: Vec<usize> = zc.iter().map(|&z| layer_of(z)).collect();
    let mut cell_material = vec![0u8; cells];
    for i in 0..nx {
        for j in 0..ny {
            let chip = in_chip[i * ny + j];
            let base = (i * ny + j) * nz;
            for k in 0..nz {
                let l = column_layers[k];
                let m = if s.stack[l].role.is_chip_level() && !chip { 0 } else { layer_mat[l] };
                cell_material[base + k] = m as u8;
            }
        }
    }

    let mut max_snap = 0.0f64;
    for chip in &s.chips {
        for (v, e) in [
            (chip.origin[0], &x_edges),
            (chip.origin[0] + chip.size[0], &x_edges),
            (chip.origin[1], &y_edges),
            (chip.origin[1] + chip.size[1], &y_edges),
        ] {
            max_snap = max_snap.max((e[nearest_node(e, v)] - v).abs());
        }
    }

    let ground = s.ground_z();
    let k_ground = nearest_node(&z_edges, ground);
    let k_ceiling = nearest_node(&z_edges, s.ceiling_z());
    let mut ports = Vec::new();
    for a in s.antennas() {
        let i = nearest_node(&x_edges, a.x);
        let j = nearest_node(&y_edges, a.y);
        max_snap = max_snap.max((x_edges[i] - a.x).abs()).max((y_edges[j] - a.y).abs());
        let (k_top, err) = snap_tip(&z_edges, k_ground, k_ceiling, ground + s.monopole.length)
            .map_err(|reason| MeshError::Monopole { port: a.port, reason })?;
        max_snap = max_snap.max(err);
        ports.push(GridPort { port: a.port, i, j, k_feed: k_ground, k_top, position: [x_edges[i], y_edges[j], ground] });
    }
    for (a, b) in ports.iter().enumerate().flat_map(|(a, _)| (a + 1..ports.len()).map(move |b| (a, b))) {
        if ports[a].i == ports[b].i && ports[a].j == ports[b].j {
            return Err(MeshError::Monopole { port: b, reason: format!("shares a grid column with port {a}") });
        }
    }

    let dt = stable_dt(min_step(&x_edges), min_step(&y_edges), min_step(&z_edges));
    Ok(YeeGrid {
        x_edges,
        y_edges,
        z_edges,
        materials,
        cell_material,
        dt,
        cells_per_wavelength: opts.resolution,
        lambda_min,
        pml: PmlLayout { x_lo: lateral_pml, x_hi: lateral_pml, y_lo: lateral_pml, y_hi: lateral_pml, z_hi: z_pml },
        ports,
        max_snap_error: max_snap,
        k_ground,
        k_ceiling,
        port_impedance: s.port_impedance,
        f_center: s.band.f_center,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    pub cell_count: usize,
    pub step_count: usize,
    pub memory_bytes: usize,
    pub flop_estimate: f64,
}

/// Floating-point operations per cell and step for the six field updates.
pub const FLOPS_PER_CELL_STEP: f64 = 48.0;

pub fn estimate_cost(g: &YeeGrid, run_time: f64) -> CostEstimate {
    let cell_count = g.cell_count();
    let step_count = (run_time / g.dt).ceil().max(0.0) as usize;
    CostEstimate {
        cell_count,
        step_count,
        memory_bytes: cell_count * 7 * WORD_SIZE,
        flop_estimate: cell_count as f64 * step_count as f64 * FLOPS_PER_CELL_STEP,
    }
}
