//! Canonical geometries with known propagation behaviour, used to check the
//! solver against closed-form expectations.

use crate::geometry::{
    Band, ChipPlacement, Layer, LayerRole, LateralBoundary, Material, MonopoleSpec, PackageScenario, TopBoundary,
    DEFAULT_MONOPOLE_RADIUS, DEFAULT_PORT_IMPEDANCE,
};
use crate::units::wavelength;

/// Clearance between an antenna and the absorbing boundary, in wavelengths.
pub const MARGIN_WAVELENGTHS: f64 = 0.75;

fn carrier_chip(size: [f64; 2], antennas: Vec<[f64; 2]>) -> ChipPlacement {
    ChipPlacement { origin: [0.0, 0.0], size, antennas }
}

fn open_scenario(name: &str, band: Band, stack: Vec<Layer>, size: [f64; 2], antennas: Vec<[f64; 2]>, top: TopBoundary) -> PackageScenario {
    let lambda = wavelength(band.f_center, 1.0);
    PackageScenario {
        name: name.to_string(),
        stack,
        chips: vec![carrier_chip(size, antennas)],
        lateral_boundary: LateralBoundary::AbsorbingOpen,
        top_boundary: top,
        package_size: size,
        band,
        port_impedance: DEFAULT_PORT_IMPEDANCE,
        monopole: MonopoleSpec { length: 0.25 * lambda, radius: DEFAULT_MONOPOLE_RADIUS },
    }
}

/// Two monopoles `separation` apart on an unbounded conducting ground, open
/// above and to the sides.
pub fn free_space_pair(band: Band, separation: f64) -> PackageScenario {
    let lambda = wavelength(band.f_center, 1.0);
    let m = MARGIN_WAVELENGTHS * lambda;
    let size = [separation + 2.0 * m, 2.0 * m];
    let stack = vec![Layer::new(LayerRole::VacuumGap, lambda, Material::vacuum())];
    open_scenario("free_space_pair", band, stack, size, vec![[m, m], [m + separation, m]], TopBoundary::Absorbing)
}

/// Two monopoles between conducting plates `plate_gap` apart, open to the
/// sides.
pub fn parallel_plate_pair(band: Band, separation: f64, plate_gap: f64) -> PackageScenario {
    let lambda = wavelength(band.f_center, 1.0);
    let m = MARGIN_WAVELENGTHS * lambda;
    let size = [separation + 2.0 * m, 2.0 * m];
    let stack = vec![Layer::new(LayerRole::VacuumGap, plate_gap, Material::vacuum())];
    open_scenario("parallel_plate_pair", band, stack, size, vec![[m, m], [m + separation, m]], TopBoundary::Pec)
}

/// A single monopole over an unbounded conducting ground in vacuum.
pub fn vacuum_monopole(band: Band) -> PackageScenario {
    let lambda = wavelength(band.f_center, 1.0);
    let m = MARGIN_WAVELENGTHS * lambda;
    let stack = vec![Layer::new(LayerRole::VacuumGap, lambda, Material::vacuum())];
    open_scenario("vacuum_monopole", band, stack, [2.0 * m, 2.0 * m], vec![[m, m]], TopBoundary::Absorbing)
}

/// Closed conducting box filled with the given layers and no antennas.
pub fn closed_box(band: Band, size: [f64; 2], stack: Vec<Layer>) -> PackageScenario {
    PackageScenario {
        name: "closed_box".into(),
        stack,
        chips: Vec::new(),
        lateral_boundary: LateralBoundary::PecWalls { offset: 0.0 },
        top_boundary: TopBoundary::Pec,
        package_size: size,
        band,
        port_impedance: DEFAULT_PORT_IMPEDANCE,
        monopole: MonopoleSpec { length: 1e-4, radius: 1e-6 },
    }
}
