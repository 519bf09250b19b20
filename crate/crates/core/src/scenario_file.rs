//! TOML scenario and sweep-plan files.
//!
//! Lengths, frequencies and impedances are written either as bare SI numbers
//! or as strings with a unit suffix (`"0.2 mm"`, `"60 GHz"`, `"50 ohm"`).
//! Unknown keys are rejected.

use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer};
use serde::Deserialize;

use crate::geometry::{
    make_scenario, validate_scenario, Band, ChipPlacement, LateralBoundary, Layer, LayerRole, Material, PackageScenario,
    Preset, Scale, ScenarioOverrides, TopBoundary,
};
use crate::sweep::{SweepAxis, SweepParam, SweepPlan};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FileError {
    #[error("{0}")]
    Syntax(String),
    #[error("{0}")]
    Invalid(String),
}

/// A physical quantity in SI units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantity(pub f64);

const UNITS: &[(&str, f64)] = &[
    ("nm", 1e-9),
    ("um", 1e-6),
    ("mm", 1e-3),
    ("cm", 1e-2),
    ("m", 1.0),
    ("Hz", 1.0),
    ("kHz", 1e3),
    ("MHz", 1e6),
    ("GHz", 1e9),
    ("THz", 1e12),
    ("ohm", 1.0),
    ("S/m", 1.0),
];

impl FromStr for Quantity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let split = s.find(|c: char| c.is_ascii_alphabetic() && c != 'e' && c != 'E').unwrap_or(s.len());
        // a bare exponent such as "1e-3" has no unit
        let (num, unit) = s.split_at(split);
        let value: f64 = num.trim().parse().map_err(|_| format!("`{s}` is not a number with a unit"))?;
        let unit = unit.trim();
        if unit.is_empty() {
            return Ok(Quantity(value));
        }
        UNITS
            .iter()
            .find(|(u, _)| *u == unit)
            .map(|(_, k)| Quantity(value * k))
            .ok_or_else(|| format!("unknown unit `{unit}` in `{s}`"))
    }
}

impl<'de> Deserialize<'de> for Quantity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl de::Visitor<'_> for V {
            type Value = Quantity;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or a string such as \"0.2 mm\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Quantity, E> {
                Ok(Quantity(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Quantity, E> {
                Ok(Quantity(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Quantity, E> {
                Ok(Quantity(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Quantity, E> {
                v.parse().map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BandSection {
    f_center: Option<Quantity>,
    bandwidth: Option<Quantity>,
    f_min: Option<Quantity>,
    f_max: Option<Quantity>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MonopoleSection {
    length: Option<Quantity>,
    radius: Option<Quantity>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundarySection {
    lateral: Option<String>,
    wall_offset: Option<Quantity>,
    top: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaterialSection {
    name: String,
    #[serde(default)]
    eps_r: Option<f64>,
    tan_delta: Option<f64>,
    f_ref: Option<Quantity>,
    sigma: Option<Quantity>,
    #[serde(default)]
    pec: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerSection {
    role: String,
    thickness: Quantity,
    material: MaterialSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChipSection {
    origin: [Quantity; 2],
    size: [Quantity; 2],
    antenna_grid: Option<usize>,
    antennas: Option<Vec<[Quantity; 2]>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: Option<String>,
    preset: Option<String>,
    scale: Option<String>,
    silicon_thickness: Option<Quantity>,
    spreader_thickness: Option<Quantity>,
    antenna_grid: Option<usize>,
    port_impedance: Option<Quantity>,
    package_size: Option<[Quantity; 2]>,
    band: Option<BandSection>,
    monopole: Option<MonopoleSection>,
    boundary: Option<BoundarySection>,
    layer: Option<Vec<LayerSection>>,
    chip: Option<Vec<ChipSection>>,
}

fn invalid(msg: impl Into<String>) -> FileError {
    FileError::Invalid(msg.into())
}

fn material(m: &MaterialSection) -> Result<Material, FileError> {
    if m.pec {
        if m.eps_r.is_some() || m.tan_delta.is_some() || m.sigma.is_some() {
            return Err(invalid(format!("material `{}`: a conductor takes no eps_r, tan_delta or sigma", m.name)));
        }
        return Ok(Material::pec(&m.name));
    }
    let eps_r = m.eps_r.ok_or_else(|| invalid(format!("material `{}` needs eps_r", m.name)))?;
    match (m.tan_delta, m.sigma) {
        (Some(_), Some(_)) => Err(invalid(format!("material `{}`: give tan_delta or sigma, not both", m.name))),
        (Some(t), None) => Ok(Material::with_tan_delta(&m.name, eps_r, t, m.f_ref.map_or(60e9, |q| q.0))),
        (None, Some(s)) => Ok(Material::with_conductivity(&m.name, eps_r, s.0)),
        (None, None) => Ok(Material::lossless(&m.name, eps_r)),
    }
}

fn scenario_from(f: ScenarioFile) -> Result<PackageScenario, FileError> {
    let scale: Scale = match &f.scale {
        Some(s) => s.parse().map_err(|e: crate::geometry::GeometryError| invalid(e.to_string()))?,
        None => Scale::Full,
    };
    let band = f.band.as_ref();
    let ov = ScenarioOverrides {
        scale,
        silicon_thickness: f.silicon_thickness.map(|q| q.0),
        spreader_thickness: f.spreader_thickness.map(|q| q.0),
        f_center: band.and_then(|b| b.f_center).map(|q| q.0),
        bandwidth: band.and_then(|b| b.bandwidth).map(|q| q.0),
        antenna_grid: f.antenna_grid,
        monopole_length: f.monopole.as_ref().and_then(|m| m.length).map(|q| q.0),
        wall_offset: f.boundary.as_ref().and_then(|b| b.wall_offset).map(|q| q.0),
        port_impedance: f.port_impedance.map(|q| q.0),
    };
    let preset: Preset = match &f.preset {
        Some(p) => p.parse().map_err(|e: crate::geometry::GeometryError| invalid(e.to_string()))?,
        None if f.layer.is_some() && f.chip.is_some() => Preset::SingleChipWalled,
        None => return Err(invalid("a scenario needs `preset`, or both [[layer]] and [[chip]] tables")),
    };
    let mut s = make_scenario(preset, &ScenarioOverrides { monopole_length: None, ..ov.clone() })
        .map_err(|e| invalid(e.to_string()))?;

    if let Some(layers) = &f.layer {
        s.stack = layers
            .iter()
            .map(|l| {
                let role: LayerRole = l.role.parse().map_err(invalid)?;
                Ok(Layer::new(role, l.thickness.0, material(&l.material)?))
            })
            .collect::<Result<_, FileError>>()?;
    }
    if let Some(chips) = &f.chip {
        s.chips = chips
            .iter()
            .map(|c| {
                let mut chip = ChipPlacement::new([c.origin[0].0, c.origin[1].0], [c.size[0].0, c.size[1].0]);
                match (&c.antennas, c.antenna_grid) {
                    (Some(_), Some(_)) => Err(invalid("a chip takes antennas or antenna_grid, not both")),
                    (Some(a), None) => {
                        chip.antennas = a.iter().map(|p| [p[0].0, p[1].0]).collect();
                        Ok(chip)
                    }
                    (None, g) => Ok(chip.with_antenna_grid(g.or(f.antenna_grid).unwrap_or(2))),
                }
            })
            .collect::<Result<_, FileError>>()?;
    }
    if let Some(p) = f.package_size {
        s.package_size = [p[0].0, p[1].0];
    }
    if let Some(b) = &f.boundary {
        match b.lateral.as_deref() {
            None => {}
            Some("walls") => {
                let offset = match (b.wall_offset, s.lateral_boundary) {
                    (Some(o), _) => o.0,
                    (None, LateralBoundary::PecWalls { offset }) => offset,
                    (None, LateralBoundary::AbsorbingOpen) => 0.0,
                };
                s.lateral_boundary = LateralBoundary::PecWalls { offset };
            }
            Some("open") => s.lateral_boundary = LateralBoundary::AbsorbingOpen,
            Some(other) => return Err(invalid(format!("boundary.lateral `{other}` (expected walls or open)"))),
        }
        match b.top.as_deref() {
            None => {}
            Some("pec") => s.top_boundary = TopBoundary::Pec,
            Some("absorbing") => s.top_boundary = TopBoundary::Absorbing,
            Some(other) => return Err(invalid(format!("boundary.top `{other}` (expected pec or absorbing)"))),
        }
    }
    if let Some(b) = band {
        match (b.f_min, b.f_max) {
            (Some(lo), Some(hi)) => {
                if b.bandwidth.is_some() {
                    return Err(invalid("band: give f_min/f_max or bandwidth, not both"));
                }
                let fc = b.f_center.map_or(0.5 * (lo.0 + hi.0), |q| q.0);
                s.band = Band { f_min: lo.0, f_max: hi.0, f_center: fc };
            }
            (None, None) => {}
            _ => return Err(invalid("band: f_min and f_max go together")),
        }
    }
    if let Some(name) = f.name {
        s.name = name;
    }
    if let Some(m) = &f.monopole {
        if let Some(r) = m.radius {
            s.monopole.radius = r.0;
        }
    }
    s.monopole.length = ov.monopole_length.unwrap_or_else(|| s.default_monopole_length());

    let v = validate_scenario(&s);
    if !v.is_empty() {
        return Err(invalid(v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")));
    }
    Ok(s)
}

pub fn parse_scenario(text: &str) -> Result<PackageScenario, FileError> {
    let f: ScenarioFile = toml::from_str(text).map_err(|e| FileError::Syntax(e.to_string()))?;
    scenario_from(f)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AxisSection {
    param: String,
    values: Option<Vec<Quantity>>,
    start: Option<Quantity>,
    stop: Option<Quantity>,
    step: Option<Quantity>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    preset: String,
    scale: Option<String>,
    #[serde(default = "yes")]
    retune: bool,
    objective: Option<String>,
    silicon_thickness: Option<Quantity>,
    spreader_thickness: Option<Quantity>,
    antenna_grid: Option<usize>,
    band: Option<BandSection>,
    baseline: Option<Vec<Quantity>>,
    axis: Vec<AxisSection>,
}

fn yes() -> bool {
    true
}

/// Inclusive arithmetic range, robust to rounding of the step count.
pub fn range_values(start: f64, stop: f64, step: f64) -> Result<Vec<f64>, String> {
    if !(step > 0.0) || !(stop >= start) {
        return Err(format!("range {start}..{stop} step {step} is empty"));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| start + k as f64 * step).collect())
}

pub fn parse_sweep_plan(text: &str) -> Result<SweepPlan, FileError> {
    let f: PlanFile = toml::from_str(text).map_err(|e| FileError::Syntax(e.to_string()))?;
    if let Some(o) = &f.objective {
        if o != "s_min" {
            return Err(invalid(format!("objective `{o}` (only s_min is supported)")));
        }
    }
    let preset: Preset = f.preset.parse().map_err(|e: crate::geometry::GeometryError| invalid(e.to_string()))?;
    let scale: Scale = match &f.scale {
        Some(s) => s.parse().map_err(|e: crate::geometry::GeometryError| invalid(e.to_string()))?,
        None => Scale::Full,
    };
    if f.band.as_ref().is_some_and(|b| b.f_min.is_some() || b.f_max.is_some()) {
        return Err(invalid("sweep plans set the band through f_center and bandwidth"));
    }
    let overrides = ScenarioOverrides {
        scale,
        silicon_thickness: f.silicon_thickness.map(|q| q.0),
        spreader_thickness: f.spreader_thickness.map(|q| q.0),
        f_center: f.band.as_ref().and_then(|b| b.f_center).map(|q| q.0),
        bandwidth: f.band.as_ref().and_then(|b| b.bandwidth).map(|q| q.0),
        antenna_grid: f.antenna_grid,
        ..Default::default()
    };
    let axes = f
        .axis
        .iter()
        .map(|a| {
            let param: SweepParam = a.param.parse().map_err(invalid)?;
            let values = match (&a.values, a.start, a.stop, a.step) {
                (Some(v), None, None, None) => v.iter().map(|q| q.0).collect(),
                (None, Some(s), Some(e), Some(st)) => range_values(s.0, e.0, st.0).map_err(invalid)?,
                _ => return Err(invalid(format!("axis `{}` needs values or start/stop/step", a.param))),
            };
            Ok(SweepAxis { param, values })
        })
        .collect::<Result<Vec<_>, FileError>>()?;
    let plan = SweepPlan {
        preset,
        overrides,
        axes,
        retune: f.retune,
        baseline: f.baseline.map(|b| b.iter().map(|q| q.0).collect()),
    };
    plan.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(plan)
}
