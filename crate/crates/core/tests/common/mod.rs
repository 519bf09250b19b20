use num_complex::Complex64;
use pkgem::ports::{Provenance, SParameterSet};

/// Deterministic S-matrix with a fixed provenance block.
pub fn fixture(n: usize) -> SParameterSet {
    let frequencies = vec![50e9, 55e9, 60e9, 65e9, 70e9];
    let s = frequencies
        .iter()
        .enumerate()
        .map(|(k, _)| {
            let mut m = vec![Complex64::new(0.0, 0.0); n * n];
            for i in 0..n {
                for j in 0..n {
                    let (lo, hi) = (i.min(j), i.max(j));
                    let mag = if i == j { 0.3 + 0.05 * i as f64 } else { 0.02 / (1 + hi - lo) as f64 };
                    let deg = -37.5 * (k + 1) as f64 * (1 + lo + 2 * hi) as f64;
                    m[i * n + j] = Complex64::from_polar(mag, deg.to_radians());
                }
            }
            m
        })
        .collect();
    SParameterSet {
        frequencies,
        n_ports: n,
        s,
        z0: 50.0,
        provenance: Provenance {
            artifact_version: "golden".into(),
            scenario_name: format!("fixture_{n}"),
            scenario_hash: "0123456789abcdef".into(),
            monopole_length: Some(3.5e-4),
            ..Default::default()
        },
    }
}
