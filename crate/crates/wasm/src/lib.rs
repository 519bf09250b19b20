//! Browser bindings. Every export takes and returns plain strings so the page
//! needs no generated type definitions.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use pkgem::channel::{fit_path_loss, scenario_report, AverageMode};
use pkgem::mesh::{estimate_cost, generate_mesh, MeshOptions};
use pkgem::pipeline::parse_positions_csv;
use pkgem::ports::touchstone::read_touchstone;
use pkgem::scenario_file::parse_scenario;

fn mode(name: &str) -> Result<AverageMode, String> {
    match name {
        "" | "power" => Ok(AverageMode::Power),
        "db" => Ok(AverageMode::Db),
        other => Err(format!("unknown averaging mode `{other}`")),
    }
}

/// Channel report for Touchstone text holding `n_ports` ports.
pub fn analyze(touchstone: &str, n_ports: usize, positions: &str, average: &str) -> Result<String, String> {
    let sp = read_touchstone(touchstone, n_ports).map_err(|e| e.to_string())?;
    let pos = if positions.trim().is_empty() { None } else { Some(parse_positions_csv(positions)?) };
    let band = [sp.frequencies[0], *sp.frequencies.last().ok_or("no frequencies")?];
    let report = scenario_report(&sp, pos.as_deref(), band, mode(average)?).map_err(|e| e.to_string())?;
    Ok(report.to_json())
}

/// Fits `L = 10 n log10(d) + C` to CSV rows of `distance_mm,loss_db`; a
/// header row is skipped.
pub fn fit(csv: &str) -> Result<String, String> {
    let mut points = Vec::new();
    for (k, line) in csv.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split(',').map(str::trim);
        let (Some(d), Some(l)) = (cols.next(), cols.next()) else {
            return Err(format!("line {}: expected distance_mm,loss_db", k + 1));
        };
        match (d.parse::<f64>(), l.parse::<f64>()) {
            (Ok(d), Ok(l)) => points.push((d * 1e-3, l)),
            _ if k == 0 => continue,
            _ => return Err(format!("line {}: `{line}` is not numeric", k + 1)),
        }
    }
    let f = fit_path_loss(&points).map_err(|e| e.to_string())?;
    serde_json::to_string_pretty(&f).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Summary {
    name: String,
    ports: usize,
    scenario_hash: String,
    monopole_length_m: f64,
    dims: [usize; 3],
    cells: usize,
    dt_s: f64,
    memory_bytes: usize,
    steps_per_ns: f64,
}

/// Validates a TOML scenario and reports its mesh and per-run cost.
pub fn summarize(toml: &str) -> Result<String, String> {
    let s = parse_scenario(toml).map_err(|e| e.to_string())?;
    let g = generate_mesh(&s, &MeshOptions::default()).map_err(|e| e.to_string())?;
    let (nx, ny, nz) = g.dims();
    let cost = estimate_cost(&g, 1e-9);
    let out = Summary {
        name: s.name.clone(),
        ports: g.ports.len(),
        scenario_hash: s.hash(),
        monopole_length_m: s.monopole.length,
        dims: [nx, ny, nz],
        cells: g.cell_count(),
        dt_s: g.dt,
        memory_bytes: cost.memory_bytes,
        steps_per_ns: 1e-9 / g.dt,
    };
    serde_json::to_string_pretty(&out).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = analyzeTouchstone)]
pub fn analyze_touchstone(touchstone: &str, n_ports: usize, positions: &str, average: &str) -> Result<String, JsError> {
    analyze(touchstone, n_ports, positions, average).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = fitPathLoss)]
pub fn fit_path_loss_csv(csv: &str) -> Result<String, JsError> {
    fit(csv).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = summarizeScenario)]
pub fn summarize_scenario(toml: &str) -> Result<String, JsError> {
    summarize(toml).map_err(|e| JsError::new(&e))
}
