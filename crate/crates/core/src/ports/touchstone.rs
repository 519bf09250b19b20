//! Touchstone 1.1 reading and writing.
//!
//! Files are written as `# GHz S MA R <z0>` with nine significant digits per
//! number. Two-port data use the conventional `S11 S21 S12 S22` order; larger
//! networks are written one matrix row at a time with at most four pairs per
//! line.

use num_complex::Complex64;

use super::{Provenance, SParameterSet};

const FIELD_WIDTH: usize = 15;
const PAIRS_PER_LINE: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}, column {column}: {message}")]
pub struct TouchstoneError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

fn err(line: usize, column: usize, message: impl Into<String>) -> TouchstoneError {
    TouchstoneError { line, column, message: message.into() }
}

/// C-style `%.8e` (mantissa with eight decimals, signed two-digit exponent).
pub fn format_number(x: f64) -> String {
    let x = if x == 0.0 { 0.0 } else { x };
    let s = format!("{x:.8e}");
    let (mant, exp) = s.split_once('e').expect("exponent present");
    let e: i32 = exp.parse().expect("integer exponent");
    let sign = if e < 0 { '-' } else { '+' };
    format!("{mant}e{sign}{:02}", e.abs())
}

fn field(x: f64) -> String {
    format!("{:>width$}", format_number(x), width = FIELD_WIDTH)
}

/// Extension for an `n`-port file, e.g. `s4p`.
pub fn extension(n_ports: usize) -> String {
    format!("s{n_ports}p")
}

/// Matrix entries of one frequency in file order.
fn file_order(n: usize) -> Vec<(usize, usize)> {
    if n == 2 {
        vec![(0, 0), (1, 0), (0, 1), (1, 1)]
    } else {
        (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect()
    }
}

fn pair(c: Complex64) -> (f64, f64) {
    let mag = c.norm();
    let ang = if mag == 0.0 { 0.0 } else { c.im.atan2(c.re).to_degrees() };
    (mag, ang)
}

pub fn write_touchstone(sp: &SParameterSet) -> String {
    let n = sp.n_ports;
    let mut out = String::new();
    let p = &sp.provenance;
    out.push_str(&format!("! pkgem {}\n", p.artifact_version));
    if !p.scenario_name.is_empty() {
        out.push_str(&format!("! scenario: {}\n", p.scenario_name));
    }
    if !p.scenario_hash.is_empty() {
        out.push_str(&format!("! scenario_hash: {}\n", p.scenario_hash));
    }
    if let Some(l) = p.monopole_length {
        out.push_str(&format!("! monopole_length_m: {}\n", format_number(l)));
    }
    if let Some(m) = &p.mesh {
        out.push_str(&format!("! mesh: {}x{}x{} cells, dt {} s\n", m.nx, m.ny, m.nz, format_number(m.dt)));
    }
    if let Some(s) = &p.solver {
        out.push_str(&format!(
            "! solver: ringdown {} over {} periods, max {} steps, pml {} cells\n",
            format_number(s.ringdown_threshold),
            s.window_periods,
            s.max_steps,
            s.pml_cells
        ));
    }
    if !p.unconverged_runs.is_empty() {
        let list: Vec<String> = p.unconverged_runs.iter().map(|j| (j + 1).to_string()).collect();
        out.push_str(&format!("! unconverged excitations: {}\n", list.join(" ")));
    }
    if p.mesh.is_some() || p.solver.is_some() {
        out.push_str(&format!("! provenance: {}\n", serde_json::to_string(p).expect("provenance serializes")));
    }
    out.push_str(&format!("# GHz S MA R {}\n", trim_z0(sp.z0)));

    let order = file_order(n);
    let indent = " ".repeat(FIELD_WIDTH);
    for (f, &freq) in sp.frequencies.iter().enumerate() {
        let lines: Vec<Vec<(usize, usize)>> = if n <= 2 {
            vec![order.clone()]
        } else {
            order.chunks(n).flat_map(|row| row.chunks(PAIRS_PER_LINE).map(|c| c.to_vec())).collect()
        };
        for (l, entries) in lines.iter().enumerate() {
            let mut line = if l == 0 { field(freq / 1e9) } else { indent.clone() };
            for &(i, j) in entries {
                let (m, a) = pair(sp.get(f, i, j));
                line.push(' ');
                line.push_str(&field(m));
                line.push(' ');
                line.push_str(&field(a));
            }
            out.push_str(&line);
            out.push('\n');
        }
    }
    out
}

fn trim_z0(z0: f64) -> String {
    if z0.fract() == 0.0 && z0.abs() < 1e15 {
        format!("{}", z0 as i64)
    } else {
        format!("{z0}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum DataFormat {
    Ma,
    Db,
    Ri,
}

/// Parses Touchstone 1.x text holding `n_ports` ports.
pub fn read_touchstone(text: &str, n_ports: usize) -> Result<SParameterSet, TouchstoneError> {
    if n_ports == 0 {
        return Err(err(1, 1, "port count must be at least 1"));
    }
    let mut unit = 1e9;
    let mut format = DataFormat::Ma;
    let mut z0 = 50.0;
    let mut seen_options = false;
    let mut provenance = Provenance::default();
    let mut tokens: Vec<(f64, usize, usize)> = Vec::new();

    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let (content, comment) = match raw.find('!') {
            Some(p) => (&raw[..p], Some(raw[p + 1..].trim())),
            None => (raw, None),
        };
        if let Some(c) = comment {
            read_provenance(c, &mut provenance);
        }
        let trimmed = content.trim_start();
        if trimmed.starts_with('#') {
            if seen_options {
                return Err(err(line_no, 1 + content.len() - trimmed.len(), "second option line"));
            }
            seen_options = true;
            parse_options(trimmed, line_no, 1 + content.len() - trimmed.len(), &mut unit, &mut format, &mut z0)?;
            continue;
        }
        let mut col = 0;
        for piece in content.split_inclusive(|c: char| c.is_whitespace()) {
            let tok = piece.trim_end();
            if !tok.is_empty() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| err(line_no, col + 1, format!("expected a number, found `{tok}`")))?;
                if !seen_options {
                    return Err(err(line_no, col + 1, "data before the option line"));
                }
                tokens.push((v, line_no, col + 1));
            }
            col += piece.chars().count();
        }
    }
    if !seen_options {
        return Err(err(text.lines().count().max(1), 1, "missing option line"));
    }

    let per_freq = 1 + 2 * n_ports * n_ports;
    if tokens.len() % per_freq != 0 {
        let (_, l, c) = tokens.last().copied().unwrap_or((0.0, 1, 1));
        return Err(err(l, c, format!("incomplete frequency block: {} numbers, expected multiples of {per_freq}", tokens.len())));
    }
    let order = file_order(n_ports);
    let mut frequencies = Vec::new();
    let mut s = Vec::new();
    for block in tokens.chunks(per_freq) {
        let (f, l, c) = block[0];
        let freq = f * unit;
        if let Some(&last) = frequencies.last() {
            if freq <= last {
                return Err(err(l, c, "frequencies must increase strictly"));
            }
        }
        frequencies.push(freq);
        let mut m = vec![Complex64::new(0.0, 0.0); n_ports * n_ports];
        for (k, &(i, j)) in order.iter().enumerate() {
            let a = block[1 + 2 * k].0;
            let b = block[2 + 2 * k].0;
            m[i * n_ports + j] = match format {
                DataFormat::Ma => Complex64::from_polar(a, b.to_radians()),
                DataFormat::Db => Complex64::from_polar(10f64.powf(a / 20.0), b.to_radians()),
                DataFormat::Ri => Complex64::new(a, b),
            };
        }
        s.push(m);
    }
    Ok(SParameterSet { frequencies, n_ports, s, z0, provenance })
}

fn parse_options(
    line: &str,
    line_no: usize,
    start_col: usize,
    unit: &mut f64,
    format: &mut DataFormat,
    z0: &mut f64,
) -> Result<(), TouchstoneError> {
    let mut col = start_col;
    let mut words: Vec<(String, usize)> = Vec::new();
    for piece in line.split_inclusive(|c: char| c.is_whitespace()) {
        let w = piece.trim_end();
        if !w.is_empty() {
            words.push((w.to_ascii_uppercase(), col));
        }
        col += piece.chars().count();
    }
    let mut k = 1;
    while k < words.len() {
        let (w, c) = (&words[k].0, words[k].1);
        match w.as_str() {
            "HZ" => *unit = 1.0,
            "KHZ" => *unit = 1e3,
            "MHZ" => *unit = 1e6,
            "GHZ" => *unit = 1e9,
            "S" => {}
            "Y" | "Z" | "H" | "G" => return Err(err(line_no, c, format!("parameter type {w} is not supported"))),
            "MA" => *format = DataFormat::Ma,
            "DB" => *format = DataFormat::Db,
            "RI" => *format = DataFormat::Ri,
            "R" => {
                let (v, vc) = words.get(k + 1).ok_or_else(|| err(line_no, c, "R needs a value"))?;
                *z0 = v.parse().map_err(|_| err(line_no, *vc, format!("invalid reference impedance `{v}`")))?;
                if !(*z0 > 0.0) {
                    return Err(err(line_no, *vc, "reference impedance must be positive"));
                }
                k += 1;
            }
            _ => return Err(err(line_no, c, format!("unknown option `{w}`"))),
        }
        k += 1;
    }
    Ok(())
}

fn read_provenance(comment: &str, p: &mut Provenance) {
    if let Some(v) = comment.strip_prefix("provenance:") {
        if let Ok(full) = serde_json::from_str(v.trim()) {
            *p = full;
        }
    } else if let Some(v) = comment.strip_prefix("pkgem ") {
        p.artifact_version = v.trim().to_string();
    } else if let Some(v) = comment.strip_prefix("scenario_hash:") {
        p.scenario_hash = v.trim().to_string();
    } else if let Some(v) = comment.strip_prefix("scenario:") {
        p.scenario_name = v.trim().to_string();
    } else if let Some(v) = comment.strip_prefix("monopole_length_m:") {
        p.monopole_length = v.trim().parse().ok();
    } else if let Some(v) = comment.strip_prefix("unconverged excitations:") {
        p.unconverged_runs = v.split_whitespace().filter_map(|t| t.parse::<usize>().ok()).map(|j| j - 1).collect();
    }
}
