//! Physical constants and small unit helpers.

/// Speed of light in vacuum (m/s).
pub const C0: f64 = 299_792_458.0;
/// Vacuum permittivity (F/m).
pub const EPS0: f64 = 8.854_187_812_8e-12;
/// Vacuum permeability (H/m).
pub const MU0: f64 = 1.256_637_062_12e-6;
/// Free-space wave impedance (ohm).
pub const ETA0: f64 = 376.730_313_668;

pub const MM: f64 = 1e-3;
pub const UM: f64 = 1e-6;
pub const GHZ: f64 = 1e9;

/// Linear power ratio to dB, clamped at `floor_db`.
pub fn power_db(p: f64, floor_db: f64) -> f64 {
    if p <= 0.0 || !p.is_finite() {
        return floor_db;
    }
    (10.0 * p.log10()).max(floor_db)
}

/// Wavelength in a medium of relative permittivity `eps_r`.
pub fn wavelength(freq: f64, eps_r: f64) -> f64 {
    C0 / (freq * eps_r.sqrt())
}
