//! Channel metrics from scattering parameters: band-averaged coupling, the
//! worst-case link, mismatch-corrected channel response and log-distance
//! path-loss regression.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ports::{Provenance, SParameterSet, DB_FLOOR};
use crate::units::power_db;

/// Reflections this close to total make the response undefined.
pub const MISMATCH_LIMIT: f64 = 1.0 - 1e-6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ChannelError {
    #[error("no frequencies fall inside [{0:.6e}, {1:.6e}] Hz")]
    EmptyBand(f64, f64),
    #[error("at least two ports are required, found {0}")]
    TooFewPorts(usize),
    #[error("pair ({0}, {1}) is not an off-diagonal pair of the network")]
    InvalidPair(usize, usize),
    #[error("reflection at port {port} reaches {magnitude:.9} at {freq:.6e} Hz")]
    DegenerateMismatch { port: usize, freq: f64, magnitude: f64 },
    #[error("path-loss fit needs at least 3 pairs, found {0}")]
    TooFewPairs(usize),
    #[error("path-loss fit needs positive distances with at least two distinct values")]
    DegenerateDistances,
    #[error("{0} antenna positions supplied for a {1}-port network")]
    PositionCount(usize, usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AverageMode {
    /// Mean of `|S|^2` over the band, then dB.
    #[default]
    Power,
    /// Mean of the per-frequency dB values.
    Db,
}

fn band_indices(sp: &SParameterSet, f_lo: f64, f_hi: f64) -> Result<Vec<usize>, ChannelError> {
    let tol = 1e-9 * f_hi.abs().max(1.0);
    let idx: Vec<usize> = sp
        .frequencies
        .iter()
        .enumerate()
        .filter(|(_, &f)| f >= f_lo - tol && f <= f_hi + tol)
        .map(|(k, _)| k)
        .collect();
    if idx.is_empty() {
        return Err(ChannelError::EmptyBand(f_lo, f_hi));
    }
    Ok(idx)
}

/// Band average of every `S_ij` in dB, row-major `n x n`.
pub fn band_average(sp: &SParameterSet, f_lo: f64, f_hi: f64, mode: AverageMode) -> Result<Vec<f64>, ChannelError> {
    let idx = band_indices(sp, f_lo, f_hi)?;
    let n = sp.n_ports;
    let count = idx.len() as f64;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = match mode {
                AverageMode::Power => {
                    let mean = idx.iter().map(|&f| sp.get(f, i, j).norm_sqr()).sum::<f64>() / count;
                    power_db(mean, DB_FLOOR)
                }
                AverageMode::Db => {
                    idx.iter().map(|&f| power_db(sp.get(f, i, j).norm_sqr(), DB_FLOOR)).sum::<f64>() / count
                }
            };
        }
    }
    Ok(out)
}

/// Smallest off-diagonal entry and its 0-based `(i, j)`; ties go to the
/// lexicographically smallest pair.
pub fn s_min(avg: &[f64], n: usize) -> Result<(f64, (usize, usize)), ChannelError> {
    if n < 2 {
        return Err(ChannelError::TooFewPorts(n));
    }
    let mut best = (f64::INFINITY, (0, 1));
    for i in 0..n {
        for j in 0..n {
            if i != j && avg[i * n + j] < best.0 {
                best = (avg[i * n + j], (i, j));
            }
        }
    }
    Ok(best)
}

/// `|S_ji|^2 / ((1 - |S_ii|^2)(1 - |S_jj|^2))` at every frequency.
pub fn channel_response(sp: &SParameterSet, i: usize, j: usize) -> Result<Vec<f64>, ChannelError> {
    let n = sp.n_ports;
    if i == j || i >= n || j >= n {
        return Err(ChannelError::InvalidPair(i, j));
    }
    let mut out = Vec::with_capacity(sp.frequencies.len());
    for (f, &freq) in sp.frequencies.iter().enumerate() {
        let sii = sp.get(f, i, i).norm();
        let sjj = sp.get(f, j, j).norm();
        for (port, m) in [(i, sii), (j, sjj)] {
            if m >= MISMATCH_LIMIT {
                return Err(ChannelError::DegenerateMismatch { port, freq, magnitude: m });
            }
        }
        out.push(sp.get(f, j, i).norm_sqr() / ((1.0 - sii * sii) * (1.0 - sjj * sjj)));
    }
    Ok(out)
}

/// Path loss of pair `(i, j)`: minus the band mean of the channel response, in dB.
pub fn pair_loss_db(sp: &SParameterSet, i: usize, j: usize, f_lo: f64, f_hi: f64) -> Result<f64, ChannelError> {
    let idx = band_indices(sp, f_lo, f_hi)?;
    let r = channel_response(sp, i, j)?;
    let mean = idx.iter().map(|&f| r[f]).sum::<f64>() / idx.len() as f64;
    Ok(-power_db(mean, DB_FLOOR))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    /// Path loss exponent.
    pub n: f64,
    /// Intercept (dB).
    pub c: f64,
    pub residual_rms: f64,
}

/// Least-squares fit of `L = 10 n log10(d) + C` to `(d, L)` points.
pub fn fit_path_loss(points: &[(f64, f64)]) -> Result<LineFit, ChannelError> {
    if points.len() < 3 {
        return Err(ChannelError::TooFewPairs(points.len()));
    }
    if points.iter().any(|&(d, _)| !(d > 0.0) || !d.is_finite()) {
        return Err(ChannelError::DegenerateDistances);
    }
    let xs: Vec<f64> = points.iter().map(|&(d, _)| 10.0 * d.log10()).collect();
    let m = points.len() as f64;
    let xbar = xs.iter().sum::<f64>() / m;
    let ybar = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    if !(sxx > 1e-12 * (1.0 + xbar * xbar)) {
        return Err(ChannelError::DegenerateDistances);
    }
    let sxy: f64 = xs.iter().zip(points).map(|(x, p)| (x - xbar) * (p.1 - ybar)).sum();
    let n = sxy / sxx;
    let c = ybar - n * xbar;
    let rss: f64 = xs.iter().zip(points).map(|(x, p)| (p.1 - (n * x + c)).powi(2)).sum();
    Ok(LineFit { n, c, residual_rms: (rss / m).sqrt() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    /// 1-based transmitting port.
    pub tx: usize,
    /// 1-based receiving port.
    pub rx: usize,
    pub distance_m: f64,
    pub coupling_db: f64,
    pub loss_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub provenance: Provenance,
    pub band: [f64; 2],
    pub average_mode: AverageMode,
    pub n_ports: usize,
    /// Band-averaged `S_ij` in dB, `band_avg_db[i][j]`, 0-based indices.
    pub band_avg_db: Vec<Vec<f64>>,
    pub s_min_db: f64,
    /// 1-based `(i, j)` of the worst link.
    pub s_min_pair: (usize, usize),
    pub fit: Option<LineFit>,
    pub pairs: Vec<PairEntry>,
    pub unconverged: bool,
}

/// Full analysis of one S-matrix. `positions` are feed points (m); the
/// path-loss fit needs them and at least three pairs.
pub fn scenario_report(
    sp: &SParameterSet,
    positions: Option<&[[f64; 3]]>,
    band: [f64; 2],
    mode: AverageMode,
) -> Result<ChannelReport, ChannelError> {
    let n = sp.n_ports;
    if n < 2 {
        return Err(ChannelError::TooFewPorts(n));
    }
    if let Some(p) = positions {
        if p.len() != n {
            return Err(ChannelError::PositionCount(p.len(), n));
        }
    }
    let avg = band_average(sp, band[0], band[1], mode)?;
    let (smin, (si, sj)) = s_min(&avg, n)?;
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let distance_m = positions.map(|p| dist(p[i], p[j])).unwrap_or(f64::NAN);
            pairs.push(PairEntry {
                tx: i + 1,
                rx: j + 1,
                distance_m,
                coupling_db: avg[j * n + i],
                loss_db: pair_loss_db(sp, i, j, band[0], band[1])?,
            });
        }
    }
    let fit = match positions {
        Some(_) if pairs.len() >= 3 => {
            Some(fit_path_loss(&pairs.iter().map(|p| (p.distance_m, p.loss_db)).collect::<Vec<_>>())?)
        }
        _ => None,
    };
    Ok(ChannelReport {
        provenance: sp.provenance.clone(),
        band,
        average_mode: mode,
        n_ports: n,
        band_avg_db: (0..n).map(|i| avg[i * n..(i + 1) * n].to_vec()).collect(),
        s_min_db: smin,
        s_min_pair: (si + 1, sj + 1),
        fit,
        pairs,
        unconverged: sp.unconverged(),
    })
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

impl ChannelReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn band_avg_csv(&self) -> String {
        let mut s = String::from("i,j,s_db\n");
        for i in 0..self.n_ports {
            for j in 0..self.n_ports {
                if i != j {
                    s.push_str(&format!("{},{},{}\n", i + 1, j + 1, self.band_avg_db[i][j]));
                }
            }
        }
        s
    }

    pub fn pathloss_csv(&self) -> String {
        let mut s = String::from("tx,rx,d_mm,l_db\n");
        for p in &self.pairs {
            s.push_str(&format!("{},{},{},{}\n", p.tx, p.rx, p.distance_m * 1e3, p.loss_db));
        }
        s
    }

    pub fn fit_csv(&self) -> Option<String> {
        self.fit.as_ref().map(|f| format!("n,c_db,rms_db\n{},{},{}\n", f.n, f.c, f.residual_rms))
    }

    /// Writes `report.json`, `band_avg.csv`, `pathloss.csv` and `fit.csv`.
    pub fn write_all(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json())?;
        fs::write(dir.join("band_avg.csv"), self.band_avg_csv())?;
        fs::write(dir.join("pathloss.csv"), self.pathloss_csv())?;
        if let Some(f) = self.fit_csv() {
            fs::write(dir.join("fit.csv"), f)?;
        }
        Ok(())
    }
}
