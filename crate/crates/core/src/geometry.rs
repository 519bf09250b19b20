//! Declarative package models: layer stack, materials, chip layout, lateral
//! boundary and monopole antennas. Nothing here knows about the mesh.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::units::{C0, EPS0, GHZ, MM, UM};

/// Bulk silicon resistivity of 10 ohm*cm expressed as a conductivity.
pub const SILICON_CONDUCTIVITY: f64 = 10.0;
/// Default TSV monopole radius.
pub const DEFAULT_MONOPOLE_RADIUS: f64 = 10.0 * UM;
pub const DEFAULT_PORT_IMPEDANCE: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossModel {
    LossTangent { tan_delta: f64, f_ref: f64 },
    Conductivity { sigma: f64 },
    PerfectConductor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub name: String,
    pub rel_permittivity: f64,
    pub loss: LossModel,
}

impl Material {
    pub fn lossless(name: &str, rel_permittivity: f64) -> Self {
        Self::with_tan_delta(name, rel_permittivity, 0.0, 60.0 * GHZ)
    }

    pub fn with_tan_delta(name: &str, rel_permittivity: f64, tan_delta: f64, f_ref: f64) -> Self {
        Self {
            name: name.to_string(),
            rel_permittivity,
            loss: LossModel::LossTangent { tan_delta, f_ref },
        }
    }

    pub fn with_conductivity(name: &str, rel_permittivity: f64, sigma: f64) -> Self {
        Self {
            name: name.to_string(),
            rel_permittivity,
            loss: LossModel::Conductivity { sigma },
        }
    }

    pub fn pec(name: &str) -> Self {
        Self {
            name: name.to_string(),
            rel_permittivity: 1.0,
            loss: LossModel::PerfectConductor,
        }
    }

    pub fn vacuum() -> Self {
        Self::lossless("vacuum", 1.0)
    }

    pub fn is_pec(&self) -> bool {
        matches!(self.loss, LossModel::PerfectConductor)
    }

    /// Equivalent conductivity seen by the time-domain solver at `freq`.
    ///
    /// Loss-tangent materials are converted at their own reference frequency
    /// when `freq` is `None`. Returns `None` for perfect conductors.
    pub fn conductivity_at(&self, freq: f64) -> Option<f64> {
        match self.loss {
            LossModel::LossTangent { tan_delta, .. } => {
                Some(tan_delta_to_sigma(tan_delta, freq, self.rel_permittivity))
            }
            LossModel::Conductivity { sigma } => Some(sigma),
            LossModel::PerfectConductor => None,
        }
    }

    pub fn loss_tangent_at(&self, freq: f64) -> Option<f64> {
        match self.loss {
            LossModel::LossTangent { tan_delta, .. } => Some(tan_delta),
            LossModel::Conductivity { sigma } => {
                Some(sigma_to_tan_delta(sigma, freq, self.rel_permittivity))
            }
            LossModel::PerfectConductor => None,
        }
    }
}

/// tan(delta) = sigma / (2 pi f eps0 eps_r)
pub fn sigma_to_tan_delta(sigma: f64, freq: f64, eps_r: f64) -> f64 {
    sigma / (2.0 * std::f64::consts::PI * freq * EPS0 * eps_r)
}

pub fn tan_delta_to_sigma(tan_delta: f64, freq: f64, eps_r: f64) -> f64 {
    tan_delta * 2.0 * std::f64::consts::PI * freq * EPS0 * eps_r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRole {
    HeatSink,
    HeatSpreader,
    SiliconDie,
    Interconnect,
    BumpSheet,
    Interposer,
    Carrier,
    VacuumGap,
}

impl LayerRole {
    /// Chip-level layers exist only inside chip footprints; elsewhere their
    /// height range is vacuum.
    pub fn is_chip_level(self) -> bool {
        matches!(self, LayerRole::SiliconDie | LayerRole::Interconnect | LayerRole::BumpSheet)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerRole::HeatSink => "heat_sink",
            LayerRole::HeatSpreader => "heat_spreader",
            LayerRole::SiliconDie => "silicon_die",
            LayerRole::Interconnect => "interconnect",
            LayerRole::BumpSheet => "bump_sheet",
            LayerRole::Interposer => "interposer",
            LayerRole::Carrier => "carrier",
            LayerRole::VacuumGap => "vacuum_gap",
        }
    }
}

impl FromStr for LayerRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "heat_sink" => LayerRole::HeatSink,
            "heat_spreader" => LayerRole::HeatSpreader,
            "silicon_die" => LayerRole::SiliconDie,
            "interconnect" => LayerRole::Interconnect,
            "bump_sheet" => LayerRole::BumpSheet,
            "interposer" => LayerRole::Interposer,
            "carrier" => LayerRole::Carrier,
            "vacuum_gap" => LayerRole::VacuumGap,
            other => return Err(format!("unknown layer role `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub material: Material,
    pub thickness: f64,
    pub role: LayerRole,
}

impl Layer {
    pub fn new(role: LayerRole, thickness: f64, material: Material) -> Self {
        Self { material, thickness, role }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipPlacement {
    /// Lower-left corner in package coordinates (m).
    pub origin: [f64; 2],
    pub size: [f64; 2],
    /// Antenna feed points in chip-local coordinates (m).
    pub antennas: Vec<[f64; 2]>,
}

impl ChipPlacement {
    pub fn new(origin: [f64; 2], size: [f64; 2]) -> Self {
        Self { origin, size, antennas: Vec::new() }
    }

    /// Places `n x n` antennas evenly: quarter points for `n = 2`, and
    /// `{1/4, 1/2, 3/4}` for `n = 3`. Larger grids use `(k + 1) / (n + 1)`.
    pub fn with_antenna_grid(mut self, n: usize) -> Self {
        let fracs: Vec<f64> = match n {
            0 => Vec::new(),
            1 => vec![0.5],
            2 => vec![0.25, 0.75],
            3 => vec![0.25, 0.5, 0.75],
            _ => (0..n).map(|k| (k + 1) as f64 / (n + 1) as f64).collect(),
        };
        self.antennas.clear();
        for &fy in &fracs {
            for &fx in &fracs {
                self.antennas.push([fx * self.size[0], fy * self.size[1]]);
            }
        }
        self
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.origin[0]
            && x <= self.origin[0] + self.size[0]
            && y >= self.origin[1]
            && y <= self.origin[1] + self.size[1]
    }

    fn overlaps(&self, other: &ChipPlacement) -> bool {
        let sep_x = self.origin[0] + self.size[0] <= other.origin[0]
            || other.origin[0] + other.size[0] <= self.origin[0];
        let sep_y = self.origin[1] + self.size[1] <= other.origin[1]
            || other.origin[1] + other.size[1] <= self.origin[1];
        !(sep_x || sep_y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonopoleSpec {
    /// Height of the monopole tip above the ground plane, feed gap included.
    pub length: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LateralBoundary {
    /// Conducting package walls, full stack height, `offset` from the chips.
    PecWalls { offset: f64 },
    /// Perfectly matched layer outside the package footprint; every layer
    /// continues into it.
    AbsorbingOpen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopBoundary {
    /// Closed by a conductor (the heat sink, or a plate).
    Pec,
    /// Open to free space above the stack.
    Absorbing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub f_min: f64,
    pub f_max: f64,
    pub f_center: f64,
}

impl Band {
    pub fn centered(f_center: f64, bandwidth: f64) -> Self {
        Self { f_min: f_center - bandwidth / 2.0, f_max: f_center + bandwidth / 2.0, f_center }
    }

    pub fn width(&self) -> f64 {
        self.f_max - self.f_min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageScenario {
    pub name: String,
    /// Bottom to top.
    pub stack: Vec<Layer>,
    pub chips: Vec<ChipPlacement>,
    pub lateral_boundary: LateralBoundary,
    pub top_boundary: TopBoundary,
    pub package_size: [f64; 2],
    pub band: Band,
    pub port_impedance: f64,
    pub monopole: MonopoleSpec,
}

/// Antenna feed point and its port number (0-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AntennaSite {
    pub port: usize,
    pub chip: usize,
    pub x: f64,
    pub y: f64,
}

impl PackageScenario {
    pub fn antennas(&self) -> Vec<AntennaSite> {
        let mut out = Vec::new();
        for (c, chip) in self.chips.iter().enumerate() {
            for a in &chip.antennas {
                out.push(AntennaSite {
                    port: out.len(),
                    chip: c,
                    x: chip.origin[0] + a[0],
                    y: chip.origin[1] + a[1],
                });
            }
        }
        out
    }

    pub fn port_count(&self) -> usize {
        self.chips.iter().map(|c| c.antennas.len()).sum()
    }

    pub fn stack_height(&self) -> f64 {
        self.stack.iter().map(|l| l.thickness).sum()
    }

    /// Bottom z of every layer.
    pub fn layer_bottoms(&self) -> Vec<f64> {
        let mut z = 0.0;
        self.stack
            .iter()
            .map(|l| {
                let b = z;
                z += l.thickness;
                b
            })
            .collect()
    }

    /// Height of the monopole ground plane: top of the bump sheet, or the
    /// floor of the domain when the stack has none.
    pub fn ground_z(&self) -> f64 {
        let bottoms = self.layer_bottoms();
        self.stack
            .iter()
            .zip(bottoms)
            .find(|(l, _)| l.role == LayerRole::BumpSheet)
            .map(|(l, b)| b + l.thickness)
            .unwrap_or(0.0)
    }

    /// Lowest conductor above the ground plane (normally the heat sink).
    pub fn ceiling_z(&self) -> f64 {
        let ground = self.ground_z();
        let bottoms = self.layer_bottoms();
        self.stack
            .iter()
            .zip(bottoms)
            .find(|(l, b)| *b >= ground - 1e-15 && l.material.is_pec() && l.role != LayerRole::BumpSheet)
            .map(|(_, b)| b)
            .unwrap_or_else(|| self.stack_height())
    }

    /// Vertical room available to a monopole.
    pub fn headroom(&self) -> f64 {
        self.ceiling_z() - self.ground_z()
    }

    pub fn layer_thickness(&self, role: LayerRole) -> Option<f64> {
        self.stack.iter().find(|l| l.role == role).map(|l| l.thickness)
    }

    /// Sets the thickness of the layer with `role`; a zero thickness removes
    /// it. Returns false when there is no such layer to change.
    pub fn set_layer_thickness(&mut self, role: LayerRole, thickness: f64) -> bool {
        match self.stack.iter().position(|l| l.role == role) {
            Some(idx) if thickness <= 0.0 => {
                self.stack.remove(idx);
                true
            }
            Some(idx) => {
                self.stack[idx].thickness = thickness;
                true
            }
            None => false,
        }
    }

    /// Largest relative permittivity among non-conducting layers.
    pub fn max_permittivity(&self) -> f64 {
        self.stack
            .iter()
            .filter(|l| !l.material.is_pec())
            .map(|l| l.material.rel_permittivity)
            .fold(1.0, f64::max)
    }

    /// Thickness-weighted permittivity between ground and ceiling.
    pub fn effective_antenna_permittivity(&self) -> f64 {
        let (g, c) = (self.ground_z(), self.ceiling_z());
        let mut acc = 0.0;
        let mut span = 0.0;
        for (l, b) in self.stack.iter().zip(self.layer_bottoms()) {
            let lo = b.max(g);
            let hi = (b + l.thickness).min(c);
            if hi > lo && !l.material.is_pec() {
                acc += (hi - lo) * l.material.rel_permittivity;
                span += hi - lo;
            }
        }
        if span > 0.0 {
            acc / span
        } else {
            1.0
        }
    }

    /// Quarter-wave starting length, kept inside the available headroom.
    pub fn default_monopole_length(&self) -> f64 {
        let quarter = C0 / (4.0 * self.band.f_center * self.effective_antenna_permittivity().sqrt());
        let h = self.headroom();
        quarter.clamp(0.1 * h, 0.9 * h)
    }

    /// Canonical JSON; identical scenarios serialize identically.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("scenario serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        hex_digest(self.canonical_json().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Table I stack, bottom to top, including the optional interposer.
pub fn build_default_stack() -> Vec<Layer> {
    let f_ref = 60.0 * GHZ;
    vec![
        Layer::new(
            LayerRole::Carrier,
            0.5 * MM,
            Material::with_tan_delta("alumina", 9.4, 4e-4, f_ref),
        ),
        Layer::new(
            LayerRole::Interposer,
            0.1 * MM,
            Material::with_conductivity("bulk_silicon", 11.9, SILICON_CONDUCTIVITY),
        ),
        Layer::new(LayerRole::BumpSheet, 87.5 * UM, Material::pec("bumps")),
        Layer::new(
            LayerRole::Interconnect,
            13.0 * UM,
            Material::with_tan_delta("sio2", 3.9, 0.03, f_ref),
        ),
        Layer::new(
            LayerRole::SiliconDie,
            0.2 * MM,
            Material::with_conductivity("bulk_silicon", 11.9, SILICON_CONDUCTIVITY),
        ),
        Layer::new(
            LayerRole::HeatSpreader,
            0.8 * MM,
            Material::with_tan_delta("aln", 8.6, 3e-4, f_ref),
        ),
        Layer::new(LayerRole::HeatSink, 0.5 * MM, Material::pec("aluminum")),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    SingleChipWalled,
    SingleChipOpen,
    Interposer2x2,
    Mcm2x2,
}

impl Preset {
    pub const ALL: [Preset; 4] =
        [Preset::SingleChipWalled, Preset::SingleChipOpen, Preset::Interposer2x2, Preset::Mcm2x2];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::SingleChipWalled => "single_chip_walled",
            Preset::SingleChipOpen => "single_chip_open",
            Preset::Interposer2x2 => "interposer_2x2",
            Preset::Mcm2x2 => "mcm_2x2",
        }
    }

    pub fn is_single_chip(self) -> bool {
        matches!(self, Preset::SingleChipWalled | Preset::SingleChipOpen)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| GeometryError::UnknownPreset(s.to_string()))
    }
}

/// Full-size geometry, or the reduced desk-scale analogue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Full,
    Desk,
}

impl FromStr for Scale {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Scale::Full),
            "desk" => Ok(Scale::Desk),
            other => Err(GeometryError::UnknownScale(other.to_string())),
        }
    }
}

/// Lateral dimensions of a preset at a given scale.
///
/// Desk scale maps 22 mm chips to 8 mm and 10 mm chips to 4 mm; gaps and wall
/// offsets shrink to 2 mm (1.5 mm around the interposer chips), and layers
/// thinner than [`DESK_MIN_LAYER`] are thickened to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PresetDims {
    pub chip: f64,
    pub gap: f64,
    pub offset: f64,
    pub antenna_grid: usize,
}

/// Thinnest layer kept at desk scale.
pub const DESK_MIN_LAYER: f64 = 100.0 * UM;

pub fn preset_dims(preset: Preset, scale: Scale) -> PresetDims {
    match (preset, scale) {
        (Preset::SingleChipWalled | Preset::SingleChipOpen, Scale::Full) => {
            PresetDims { chip: 22.0 * MM, gap: 0.0, offset: 5.0 * MM, antenna_grid: 3 }
        }
        (Preset::SingleChipWalled | Preset::SingleChipOpen, Scale::Desk) => {
            PresetDims { chip: 8.0 * MM, gap: 0.0, offset: 2.0 * MM, antenna_grid: 2 }
        }
        (Preset::Interposer2x2, Scale::Full) => {
            PresetDims { chip: 10.0 * MM, gap: 5.0 * MM, offset: 4.0 * MM, antenna_grid: 2 }
        }
        (Preset::Interposer2x2, Scale::Desk) => {
            PresetDims { chip: 4.0 * MM, gap: 2.0 * MM, offset: 1.5 * MM, antenna_grid: 2 }
        }
        (Preset::Mcm2x2, Scale::Full) => {
            PresetDims { chip: 22.0 * MM, gap: 5.0 * MM, offset: 5.0 * MM, antenna_grid: 2 }
        }
        (Preset::Mcm2x2, Scale::Desk) => {
            PresetDims { chip: 8.0 * MM, gap: 2.0 * MM, offset: 2.0 * MM, antenna_grid: 2 }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOverrides {
    pub scale: Scale,
    pub silicon_thickness: Option<f64>,
    /// Zero removes the heat spreader.
    pub spreader_thickness: Option<f64>,
    pub f_center: Option<f64>,
    pub bandwidth: Option<f64>,
    /// Antennas per chip edge (`n x n` per chip).
    pub antenna_grid: Option<usize>,
    pub monopole_length: Option<f64>,
    pub wall_offset: Option<f64>,
    pub port_impedance: Option<f64>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("unknown scale `{0}` (expected full or desk)")]
    UnknownScale(String),
    #[error("override `{0}` is invalid: {1}")]
    InvalidOverride(&'static str, String),
    #[error("scenario is invalid: {0}")]
    Invalid(String),
}

/// Builds a fully populated preset scenario.
pub fn make_scenario(preset: Preset, ov: &ScenarioOverrides) -> Result<PackageScenario, GeometryError> {
    let dims = preset_dims(preset, ov.scale);
    let mut stack = build_default_stack();
    if preset != Preset::Interposer2x2 {
        stack.retain(|l| l.role != LayerRole::Interposer);
    }
    if ov.scale == Scale::Desk {
        for l in stack.iter_mut() {
            l.thickness = l.thickness.max(DESK_MIN_LAYER);
        }
    }

    let offset = match ov.wall_offset {
        Some(o) if o < 0.0 || !o.is_finite() => {
            return Err(GeometryError::InvalidOverride("wall_offset", format!("{o}")))
        }
        Some(o) => o,
        None => dims.offset,
    };
    let grid = ov.antenna_grid.unwrap_or(dims.antenna_grid);
    if grid == 0 {
        return Err(GeometryError::InvalidOverride("antenna_grid", "must be at least 1".into()));
    }

    let (chips, package_size, lateral) = match preset {
        Preset::SingleChipWalled => {
            let chip = ChipPlacement::new([offset, offset], [dims.chip, dims.chip]).with_antenna_grid(grid);
            let side = dims.chip + 2.0 * offset;
            (vec![chip], [side, side], LateralBoundary::PecWalls { offset })
        }
        Preset::SingleChipOpen => {
            let chip = ChipPlacement::new([0.0, 0.0], [dims.chip, dims.chip]).with_antenna_grid(grid);
            (vec![chip], [dims.chip, dims.chip], LateralBoundary::AbsorbingOpen)
        }
        Preset::Interposer2x2 | Preset::Mcm2x2 => {
            let mut chips = Vec::new();
            for row in 0..2 {
                for col in 0..2 {
                    let x = offset + col as f64 * (dims.chip + dims.gap);
                    let y = offset + row as f64 * (dims.chip + dims.gap);
                    chips.push(ChipPlacement::new([x, y], [dims.chip, dims.chip]).with_antenna_grid(grid));
                }
            }
            let side = 2.0 * dims.chip + dims.gap + 2.0 * offset;
            (chips, [side, side], LateralBoundary::PecWalls { offset })
        }
    };

    let f_center = ov.f_center.unwrap_or(60.0 * GHZ);
    let bandwidth = ov.bandwidth.unwrap_or(20.0 * GHZ);
    if !(f_center > 0.0 && bandwidth > 0.0 && bandwidth < 2.0 * f_center) {
        return Err(GeometryError::InvalidOverride(
            "band",
            format!("f_center {f_center} Hz, bandwidth {bandwidth} Hz"),
        ));
    }

    let mut sc = PackageScenario {
        name: preset.as_str().to_string(),
        stack,
        chips,
        lateral_boundary: lateral,
        top_boundary: TopBoundary::Pec,
        package_size,
        band: Band::centered(f_center, bandwidth),
        port_impedance: ov.port_impedance.unwrap_or(DEFAULT_PORT_IMPEDANCE),
        monopole: MonopoleSpec { length: 0.0, radius: DEFAULT_MONOPOLE_RADIUS },
    };

    if let Some(t) = ov.silicon_thickness {
        if !(t > 0.0 && t.is_finite()) {
            return Err(GeometryError::InvalidOverride("silicon_thickness", format!("{t}")));
        }
        sc.set_layer_thickness(LayerRole::SiliconDie, t);
    }
    if let Some(t) = ov.spreader_thickness {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(GeometryError::InvalidOverride("spreader_thickness", format!("{t}")));
        }
        sc.set_layer_thickness(LayerRole::HeatSpreader, t);
    }

    sc.monopole.length = ov.monopole_length.unwrap_or_else(|| sc.default_monopole_length());
    if ov.scale == Scale::Desk {
        sc.name = format!("{}_desk", preset.as_str());
    }

    let violations = validate_scenario(&sc);
    if !violations.is_empty() {
        let msg = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
        return Err(GeometryError::Invalid(msg));
    }
    Ok(sc)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Material { layer: usize, reason: String },
    LayerThickness { layer: usize, thickness: f64 },
    BumpSheetNotConductor { layer: usize },
    EmptyStack,
    ChipOutsidePackage { chip: usize },
    ChipsOverlap { first: usize, second: usize },
    AntennaOutsideChip { chip: usize, antenna: usize },
    Band { f_min: f64, f_center: f64, f_max: f64 },
    MonopoleLength { length: f64, headroom: f64 },
    MonopoleRadius { radius: f64, length: f64 },
    PortImpedance { ohms: f64 },
    PackageSize,
    WallOffset { offset: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Material { layer, reason } => write!(f, "layer {layer}: {reason}"),
            Violation::LayerThickness { layer, thickness } => {
                write!(f, "layer {layer}: thickness {thickness} m is not positive")
            }
            Violation::BumpSheetNotConductor { layer } => {
                write!(f, "layer {layer}: bump sheet must be a perfect conductor")
            }
            Violation::EmptyStack => write!(f, "layer stack is empty"),
            Violation::ChipOutsidePackage { chip } => write!(f, "chip {chip} does not fit in the package"),
            Violation::ChipsOverlap { first, second } => write!(f, "chips {first} and {second} overlap"),
            Violation::AntennaOutsideChip { chip, antenna } => {
                write!(f, "antenna {antenna} of chip {chip} is not strictly inside the chip")
            }
            Violation::Band { f_min, f_center, f_max } => {
                write!(f, "band requires f_min < f_center < f_max, got {f_min}, {f_center}, {f_max}")
            }
            Violation::MonopoleLength { length, headroom } => {
                write!(f, "monopole length {length} m must be positive and below the {headroom} m headroom")
            }
            Violation::MonopoleRadius { radius, length } => {
                write!(f, "monopole radius {radius} m exceeds a tenth of its {length} m length")
            }
            Violation::PortImpedance { ohms } => write!(f, "port impedance {ohms} ohm is not positive"),
            Violation::PackageSize => write!(f, "package size must be positive"),
            Violation::WallOffset { offset } => write!(f, "wall offset {offset} m is negative"),
        }
    }
}

/// Checks every scenario invariant. An empty list means the scenario is valid.
pub fn validate_scenario(s: &PackageScenario) -> Vec<Violation> {
    let mut v = Vec::new();
    if s.stack.is_empty() {
        v.push(Violation::EmptyStack);
    }
    for (idx, layer) in s.stack.iter().enumerate() {
        let m = &layer.material;
        if !(layer.thickness > 0.0 && layer.thickness.is_finite()) {
            v.push(Violation::LayerThickness { layer: idx, thickness: layer.thickness });
        }
        if layer.role == LayerRole::BumpSheet && !m.is_pec() {
            v.push(Violation::BumpSheetNotConductor { layer: idx });
        }
        if !m.is_pec() && !(m.rel_permittivity >= 1.0) {
            v.push(Violation::Material {
                layer: idx,
                reason: format!("relative permittivity {} is below 1", m.rel_permittivity),
            });
        }
        match m.loss {
            LossModel::LossTangent { tan_delta, f_ref } => {
                if !(tan_delta >= 0.0) {
                    v.push(Violation::Material { layer: idx, reason: format!("tan delta {tan_delta} is negative") });
                }
                if !(f_ref > 0.0) {
                    v.push(Violation::Material { layer: idx, reason: "reference frequency must be positive".into() });
                }
            }
            LossModel::Conductivity { sigma } => {
                if !(sigma >= 0.0) {
                    v.push(Violation::Material { layer: idx, reason: format!("conductivity {sigma} is negative") });
                }
            }
            LossModel::PerfectConductor => {}
        }
    }

    let [px, py] = s.package_size;
    if !(px > 0.0 && py > 0.0) {
        v.push(Violation::PackageSize);
    }
    if let LateralBoundary::PecWalls { offset } = s.lateral_boundary {
        if offset < 0.0 {
            v.push(Violation::WallOffset { offset });
        }
    }
    let tol = 1e-12;
    for (c, chip) in s.chips.iter().enumerate() {
        let fits = chip.size[0] > 0.0
            && chip.size[1] > 0.0
            && chip.origin[0] >= -tol
            && chip.origin[1] >= -tol
            && chip.origin[0] + chip.size[0] <= px + tol
            && chip.origin[1] + chip.size[1] <= py + tol;
        if !fits {
            v.push(Violation::ChipOutsidePackage { chip: c });
        }
        for (a, p) in chip.antennas.iter().enumerate() {
            let inside = p[0] > 0.0 && p[0] < chip.size[0] && p[1] > 0.0 && p[1] < chip.size[1];
            if !inside {
                v.push(Violation::AntennaOutsideChip { chip: c, antenna: a });
            }
        }
    }
    for a in 0..s.chips.len() {
        for b in a + 1..s.chips.len() {
            if s.chips[a].overlaps(&s.chips[b]) {
                v.push(Violation::ChipsOverlap { first: a, second: b });
            }
        }
    }

    let band = s.band;
    if !(band.f_min > 0.0 && band.f_min < band.f_center && band.f_center < band.f_max) {
        v.push(Violation::Band { f_min: band.f_min, f_center: band.f_center, f_max: band.f_max });
    }
    if !(s.port_impedance > 0.0) {
        v.push(Violation::PortImpedance { ohms: s.port_impedance });
    }

    if s.port_count() > 0 && !s.stack.is_empty() {
        let headroom = s.headroom();
        let m = s.monopole;
        if !(m.length > 0.0 && m.length < headroom) {
            v.push(Violation::MonopoleLength { length: m.length, headroom });
        }
        if !(m.radius > 0.0 && m.radius <= m.length / 10.0) {
            v.push(Violation::MonopoleRadius { radius: m.radius, length: m.length });
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(stack: &[Layer], role: LayerRole) -> &Layer {
        stack.iter().find(|l| l.role == role).unwrap()
    }

    #[test]
    fn default_stack_matches_table() {
        let s = build_default_stack();
        assert_eq!(s.len(), 7);
        assert!((layer(&s, LayerRole::SiliconDie).thickness - 0.2e-3).abs() < 1e-15);
        assert!((layer(&s, LayerRole::HeatSpreader).thickness - 0.8e-3).abs() < 1e-15);
        let bumps = layer(&s, LayerRole::BumpSheet);
        assert!((bumps.thickness - 87.5e-6).abs() < 1e-15);
        assert!(bumps.material.is_pec());
        assert!(layer(&s, LayerRole::HeatSink).material.is_pec());
        let roles: Vec<_> = s.iter().map(|l| l.role).collect();
        assert_eq!(
            roles,
            [
                LayerRole::Carrier,
                LayerRole::Interposer,
                LayerRole::BumpSheet,
                LayerRole::Interconnect,
                LayerRole::SiliconDie,
                LayerRole::HeatSpreader,
                LayerRole::HeatSink
            ]
        );
    }

    #[test]
    fn silicon_loss_tangent_at_60ghz() {
        // 10 / (2 pi 60e9 * 8.854e-12 * 11.9) = 0.25175 (hand calculation)
        let stack = build_default_stack();
        let si = &layer(&stack, LayerRole::SiliconDie).material;
        let tan = si.loss_tangent_at(60e9).unwrap();
        assert!((tan - 0.2517).abs() / 0.2517 < 0.01, "{tan}");
        assert!((tan - 0.251_75).abs() < 1e-4, "{tan}");
    }

    #[test]
    fn walled_preset_package_size() {
        let s = make_scenario(Preset::SingleChipWalled, &ScenarioOverrides::default()).unwrap();
        assert!((s.package_size[0] - 32e-3).abs() < 1e-12);
        assert!((s.package_size[1] - 32e-3).abs() < 1e-12);
        assert_eq!(s.port_count(), 9);
        assert_eq!(s.band, Band { f_min: 50e9, f_max: 70e9, f_center: 60e9 });
        assert_eq!(s.port_impedance, 50.0);
        assert_eq!(s.lateral_boundary, LateralBoundary::PecWalls { offset: 5e-3 });
    }

    #[test]
    fn interposer_preset_has_sixteen_antennas() {
        let s = make_scenario(Preset::Interposer2x2, &ScenarioOverrides::default()).unwrap();
        assert_eq!(s.chips.len(), 4);
        assert_eq!(s.port_count(), 16);
        assert!((s.package_size[0] - 33e-3).abs() < 1e-12);
        assert!((s.layer_thickness(LayerRole::Interposer).unwrap() - 0.1e-3).abs() < 1e-15);
        assert!(s.layer_thickness(LayerRole::Carrier).is_some());
    }

    #[test]
    fn mcm_preset_dimensions() {
        let s = make_scenario(Preset::Mcm2x2, &ScenarioOverrides::default()).unwrap();
        assert!((s.package_size[0] - 59e-3).abs() < 1e-12);
        assert_eq!(s.port_count(), 16);
        assert!(s.layer_thickness(LayerRole::Interposer).is_none());
    }

    #[test]
    fn optimum_thickness_overrides() {
        let ov = ScenarioOverrides {
            silicon_thickness: Some(0.1e-3),
            spreader_thickness: Some(0.85e-3),
            ..Default::default()
        };
        let s = make_scenario(Preset::SingleChipWalled, &ov).unwrap();
        assert_eq!(s.layer_thickness(LayerRole::SiliconDie), Some(0.1e-3));
        assert_eq!(s.layer_thickness(LayerRole::HeatSpreader), Some(0.85e-3));
    }

    #[test]
    fn zero_spreader_removes_layer() {
        let ov = ScenarioOverrides { spreader_thickness: Some(0.0), scale: Scale::Desk, ..Default::default() };
        let s = make_scenario(Preset::SingleChipWalled, &ov).unwrap();
        assert!(s.layer_thickness(LayerRole::HeatSpreader).is_none());
        assert!(validate_scenario(&s).is_empty());
    }

    #[test]
    fn presets_validate_clean() {
        for p in Preset::ALL {
            for scale in [Scale::Full, Scale::Desk] {
                let s = make_scenario(p, &ScenarioOverrides { scale, ..Default::default() }).unwrap();
                assert_eq!(validate_scenario(&s), vec![], "{p} {scale:?}");
            }
        }
    }

    #[test]
    fn chip_larger_than_package_is_reported() {
        let mut s = make_scenario(Preset::SingleChipWalled, &ScenarioOverrides::default()).unwrap();
        s.chips[0].size = [40e-3, 40e-3];
        s.chips[0].antennas = vec![[1e-3, 1e-3]];
        let v = validate_scenario(&s);
        assert_eq!(v, vec![Violation::ChipOutsidePackage { chip: 0 }]);
    }

    #[test]
    fn overlapping_chips_are_reported() {
        let mut s = make_scenario(Preset::Mcm2x2, &ScenarioOverrides::default()).unwrap();
        s.chips[1].origin = s.chips[0].origin;
        let v = validate_scenario(&s);
        assert!(v.contains(&Violation::ChipsOverlap { first: 0, second: 1 }), "{v:?}");
    }

    #[test]
    fn unknown_preset_is_an_error() {
        assert!(matches!("flat_2x2".parse::<Preset>(), Err(GeometryError::UnknownPreset(_))));
    }

    #[test]
    fn oversize_override_is_rejected() {
        let ov = ScenarioOverrides { monopole_length: Some(5e-3), ..Default::default() };
        assert!(matches!(make_scenario(Preset::SingleChipWalled, &ov), Err(GeometryError::Invalid(_))));
    }

    #[test]
    fn construction_is_deterministic() {
        let ov = ScenarioOverrides { scale: Scale::Desk, ..Default::default() };
        let a = make_scenario(Preset::Mcm2x2, &ov).unwrap();
        let b = make_scenario(Preset::Mcm2x2, &ov).unwrap();
        assert_eq!(a.canonical_json(), b.canonical_json());
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn headroom_spans_interconnect_silicon_and_spreader() {
        let s = make_scenario(Preset::SingleChipWalled, &ScenarioOverrides::default()).unwrap();
        assert!((s.headroom() - (13e-6 + 0.2e-3 + 0.8e-3)).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn loss_conversion_round_trips(tan in 1e-6f64..1.0, f in 1e9f64..300e9, eps in 1.0f64..20.0) {
            let back = sigma_to_tan_delta(tan_delta_to_sigma(tan, f, eps), f, eps);
            proptest::prop_assert!(((back - tan) / tan).abs() < 1e-12);
        }
    }
}
