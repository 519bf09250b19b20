use pkgem::fdtd::{DurationPolicy, SlicePlane, SolverError, Simulation, SourceWaveform};
use pkgem::geometry::{Band, ChipPlacement, Layer, LayerRole, Material, PackageScenario};
use pkgem::mesh::{generate_mesh, GridMaterial, MeshOptions, YeeGrid};
use pkgem::reference::{closed_box, vacuum_monopole};
use pkgem::units::{wavelength, C0};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn band() -> Band {
    Band::centered(60e9, 20e9)
}

/// Small closed package: ground sheet, a silicon layer and a spreader, with
/// antennas on a chip covering the whole floor.
fn small_package(sigma_si: f64, spreader_tan: f64, size: f64, antennas: Vec<[f64; 2]>) -> PackageScenario {
    let mut s = closed_box(
        band(),
        [size, size],
        vec![
            Layer::new(LayerRole::BumpSheet, 0.1e-3, Material::pec("bumps")),
            Layer::new(LayerRole::SiliconDie, 0.2e-3, Material::with_conductivity("si", 11.9, sigma_si)),
            Layer::new(LayerRole::HeatSpreader, 0.4e-3, Material::with_tan_delta("aln", 8.6, spreader_tan, 60e9)),
        ],
    );
    s.chips = vec![ChipPlacement { origin: [0.0, 0.0], size: [size, size], antennas }];
    s.monopole.length = 0.35e-3;
    s.monopole.radius = 10e-6;
    s
}

fn lateral_cell() -> f64 {
    wavelength(70e9, 11.9) / 10.0
}

fn random_fill(sim: &mut Simulation, seed: u64) {
    let mut rng = StdRng::seed_from_u64(seed);
    let st = sim.state_mut();
    for a in [&mut st.ex, &mut st.ey, &mut st.ez] {
        a.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    for a in [&mut st.hx, &mut st.hy, &mut st.hz] {
        a.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0) / 377.0);
    }
    sim.enforce_pec();
}

#[test]
fn zero_fields_stay_zero() {
    let s = small_package(10.0, 3e-4, 2e-3, vec![[1e-3, 1e-3]]);
    let g = generate_mesh(&s, &MeshOptions::default()).unwrap();
    let mut sim = Simulation::new(&g, None).unwrap();
    for _ in 0..300 {
        sim.step().unwrap();
    }
    assert!(sim.state().is_zero());
    assert_eq!(sim.state().step, 300);
}

#[test]
fn numerical_phase_velocity_at_20_cells_per_wavelength() {
    // standing TM mode in a thin closed box: half a wavelength across x in
    // 10 cells, so the travelling components sample 20 cells per wavelength
    let h = 1e-4;
    let (nx, ny) = (10usize, 200usize);
    let edges = |n: usize| (0..=n).map(|m| m as f64 * h).collect::<Vec<_>>();
    let vac = GridMaterial { name: "vacuum".into(), eps_r: 1.0, sigma: 0.0, pec: false };
    let g = YeeGrid::closed_box(edges(nx), edges(ny), edges(1), vac, 60e9);
    let mut sim = Simulation::new(&g, None).unwrap();
    let st = sim.state_mut();
    for i in 1..nx {
        for j in 1..ny {
            let v = (std::f64::consts::PI * i as f64 / nx as f64).sin() * (std::f64::consts::PI * j as f64 / ny as f64).sin();
            let n = st.idx(i, j, 0);
            st.ez[n] = v as f32;
        }
    }
    let probe = sim.state().idx(nx / 2, ny / 2, 0);
    let mut x = Vec::new();
    for _ in 0..4000 {
        sim.step().unwrap();
        x.push(sim.state().ez[probe] as f64);
    }
    // a single discrete mode obeys x[n+1] + x[n-1] = 2 cos(w dt) x[n]
    let (mut num, mut den) = (0.0, 0.0);
    for n in 1..x.len() - 1 {
        num += x[n] * (x[n + 1] + x[n - 1]);
        den += 2.0 * x[n] * x[n];
    }
    let omega = (num / den).acos() / g.dt;

    let kx = std::f64::consts::PI / (nx as f64 * h);
    let ky = std::f64::consts::PI / (ny as f64 * h);
    // independent oracle: Yee dispersion relation
    let rhs = ((kx * h / 2.0).sin() / h).powi(2) + ((ky * h / 2.0).sin() / h).powi(2);
    let omega_theory = 2.0 / g.dt * (C0 * g.dt * rhs.sqrt()).asin();
    assert!((omega - omega_theory).abs() / omega_theory < 1e-4, "{omega} vs {omega_theory}");

    let v = omega / (kx * kx + ky * ky).sqrt();
    assert!((v / C0 - 1.0).abs() < 0.005, "phase velocity ratio {}", v / C0);
}

#[test]
fn lossless_closed_box_conserves_energy() {
    let s = closed_box(
        band(),
        [1.5e-3, 1.2e-3],
        vec![
            Layer::new(LayerRole::HeatSpreader, 0.3e-3, Material::lossless("aln", 8.6)),
            Layer::new(LayerRole::VacuumGap, 0.2e-3, Material::vacuum()),
        ],
    );
    let g = generate_mesh(&s, &MeshOptions::default()).unwrap();
    let mut sim = Simulation::new(&g, None).unwrap();
    random_fill(&mut sim, 7);
    let w0 = sim.step_with_energy().unwrap();
    let mut w = w0;
    for _ in 0..10_000 {
        w = sim.step_with_energy().unwrap();
    }
    let drift = (w - w0).abs() / w0;
    assert!(drift < 1e-3, "drift {drift}");
}

#[test]
fn lossy_media_and_loaded_ports_are_passive() {
    let s = small_package(10.0, 3e-2, 2e-3, vec![[0.6e-3, 1e-3], [1.4e-3, 1e-3]]);
    let g = generate_mesh(&s, &MeshOptions::default()).unwrap();
    let mut sim = Simulation::new(&g, None).unwrap();
    random_fill(&mut sim, 11);
    let mut prev = sim.step_with_energy().unwrap();
    let first = prev;
    for n in 0..2000 {
        let w = sim.step_with_energy().unwrap();
        assert!(w <= prev * (1.0 + 1e-6), "energy rose at step {n}: {prev} -> {w}");
        prev = w;
    }
    assert!(prev < 0.5 * first);
}

#[test]
fn doubling_the_source_doubles_port_voltages() {
    let s = small_package(10.0, 3e-4, 2e-3, vec![[0.6e-3, 1e-3], [1.4e-3, 1e-3]]);
    let g = generate_mesh(&s, &MeshOptions::default()).unwrap();
    let policy = DurationPolicy { max_steps: 800, ..Default::default() };
    let w1 = SourceWaveform::gaussian_sine(60e9, 20e9, 1.0);
    let w2 = SourceWaveform { amplitude: 2.0, ..w1 };
    let r1 = Simulation::new(&g, Some((0, w1))).unwrap().run(&policy, &[]).unwrap();
    let r2 = Simulation::new(&g, Some((0, w2))).unwrap().run(&policy, &[]).unwrap();
    for (a, b) in r1.records.iter().zip(&r2.records) {
        let peak = a.voltage.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak > 0.0);
        for (x, y) in a.voltage.iter().zip(&b.voltage) {
            assert!((y - 2.0 * x).abs() <= 1e-12 * peak, "{x} {y}");
        }
    }
}

#[test]
fn symmetric_excitation_gives_mirror_symmetric_fields() {
    let h = lateral_cell();
    let size = 20.0 * h;
    let s = small_package(10.0, 3e-4, size, vec![[size / 2.0, size / 2.0]]);
    let g = generate_mesh(&s, &MeshOptions::default()).unwrap();
    let (nx, ny, nz) = g.dims();
    assert_eq!((nx, ny), (20, 20));
    assert_eq!((g.ports[0].i, g.ports[0].j), (10, 10));
    let mut sim = Simulation::new(&g, Some((0, SourceWaveform::gaussian_sine(60e9, 20e9, 1.0)))).unwrap();
    for _ in 0..600 {
        sim.step().unwrap();
    }
    let st = sim.state();
    let peak = st.ez.iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
    assert!(peak > 0.0);
    let mut worst = 0.0f64;
    for i in 0..=nx {
        for j in 0..=ny {
            for k in 0..nz {
                let a = st.ez[st.idx(i, j, k)] as f64;
                let bx = st.ez[st.idx(nx - i, j, k)] as f64;
                let by = st.ez[st.idx(i, ny - j, k)] as f64;
                worst = worst.max((a - bx).abs()).max((a - by).abs());
            }
            for k in 0..=nz {
                if i < nx {
                    let a = st.ex[st.idx(i, j, k)] as f64;
                    let b = st.ex[st.idx(nx - 1 - i, j, k)] as f64;
                    worst = worst.max((a + b).abs());
                }
            }
        }
    }
    assert!(worst <= 1e-10 * peak, "asymmetry {worst} vs peak {peak}");
}

#[test]
fn two_port_run_returns_aligned_records() {
    let s = small_package(10.0, 3e-4, 2e-3, vec![[0.6e-3, 1e-3], [1.4e-3, 1e-3]]);
    let g = generate_mesh(&s, &MeshOptions::default()).unwrap();
    let policy = DurationPolicy { max_steps: 300, ..Default::default() };
    let r = Simulation::new(&g, Some((0, SourceWaveform::gaussian_sine(60e9, 20e9, 1.0))))
        .unwrap()
        .run(&policy, &[])
        .unwrap();
    assert_eq!(r.records.len(), 2);
    assert_eq!(r.records[0].voltage.len(), r.records[1].voltage.len());
    assert_eq!(r.records[0].current.len(), r.records[0].voltage.len());
    assert_eq!(r.records[0].dt, g.dt);
    assert_eq!(r.records[1].dt, g.dt);
    assert!(r.records[0].excited && !r.records[1].excited);
}

#[test]
fn low_loss_cavity_hits_step_cap_unconverged() {
    let s = small_package(0.0, 1e-4, 2e-3, vec![[1e-3, 1e-3]]);
    let g = generate_mesh(&s, &MeshOptions::default()).unwrap();
    let policy = DurationPolicy { max_steps: 3000, ..Default::default() };
    let r = Simulation::new(&g, Some((0, SourceWaveform::gaussian_sine(60e9, 20e9, 1.0))))
        .unwrap()
        .run(&policy, &[])
        .unwrap();
    assert!(r.unconverged());
    assert_eq!(r.stats.steps, 3000);
}

#[test]
fn missing_port_is_rejected() {
    let s = small_package(10.0, 3e-4, 2e-3, vec![[1e-3, 1e-3]]);
    let g = generate_mesh(&s, &MeshOptions::default()).unwrap();
    let w = SourceWaveform::gaussian_sine(60e9, 20e9, 1.0);
    assert!(matches!(Simulation::new(&g, Some((3, w))), Err(SolverError::NoSuchPort(3))));
}

#[test]
fn non_finite_field_aborts_with_location() {
    let s = small_package(10.0, 3e-4, 2e-3, vec![[1e-3, 1e-3]]);
    let g = generate_mesh(&s, &MeshOptions::default()).unwrap();
    let mut sim = Simulation::new(&g, None).unwrap();
    let n = sim.state().idx(3, 4, 2);
    sim.state_mut().hz[n] = f32::NAN;
    let err = (0..600).try_for_each(|_| sim.step()).unwrap_err();
    match err {
        SolverError::NonFinite { step, .. } => assert!(step > 0 && step <= 512),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn pml_reflection_below_minus_40_db() {
    // identical local grids; the reference domain is large enough that its
    // own boundary echoes arrive after the comparison window
    let b = band();
    let lambda = wavelength(b.f_center, 1.0);
    let small_margin = 0.75 * lambda;
    let h = 2.0 * small_margin / 18.0;
    let lambda_min = wavelength(b.f_max, 1.0);
    let opts = MeshOptions { resolution: lambda_min / h, ..Default::default() };
    let build = |cells_half: usize, height_cells: usize| {
        let mut s = vacuum_monopole(b);
        let margin = cells_half as f64 * h;
        s.package_size = [2.0 * margin, 2.0 * margin];
        s.chips[0].size = s.package_size;
        s.chips[0].antennas = vec![[margin, margin]];
        s.stack[0].thickness = height_cells as f64 * h / 2.0;
        s.monopole.length = 0.24 * lambda;
        generate_mesh(&s, &opts).unwrap()
    };
    let small = build(9, 24);
    let big = build(54, 108);
    assert!((small.dt - big.dt).abs() <= 1e-12 * small.dt);
    let w = SourceWaveform::gaussian_sine(b.f_center, 40e9, 1.0);
    let big_clearance = 54.0 * h - 6.0 * h;
    let window = ((2.0 * big_clearance / C0) / small.dt) as usize;

    let probe_series = |g: &YeeGrid| {
        let p = &g.ports[0];
        let mut sim = Simulation::new(g, Some((0, w))).unwrap();
        let idx = sim.state().idx(p.i + 5, p.j, 2);
        let mut out = Vec::with_capacity(window);
        for _ in 0..window {
            sim.step().unwrap();
            out.push(sim.state().ez[idx] as f64);
        }
        out
    };
    let a = probe_series(&small);
    let r = probe_series(&big);
    let diff: f64 = a.iter().zip(&r).map(|(x, y)| (x - y).powi(2)).sum();
    let total: f64 = r.iter().map(|y| y * y).sum();
    let db = 10.0 * (diff / total).log10();
    assert!(db <= -40.0, "reflected energy {db:.1} dB");

    let run = Simulation::new(&small, Some((0, SourceWaveform::gaussian_sine(60e9, 20e9, 1.0))))
        .unwrap()
        .run(&DurationPolicy::default(), &[])
        .unwrap();
    assert!(run.stats.converged);
}

#[test]
fn field_slices() {
    let s = small_package(10.0, 3e-4, 3e-3, vec![[1.1e-3, 1.5e-3]]);
    let g = generate_mesh(&s, &MeshOptions::default()).unwrap();
    let mut sim = Simulation::new(&g, Some((0, SourceWaveform::gaussian_sine(60e9, 20e9, 1.0)))).unwrap();
    let plane = SlicePlane { axis: 2, offset: 0.2e-3 };
    let zero = sim.record_field_slice(plane).unwrap();
    assert!(zero.values.iter().all(|&v| v == 0.0));
    assert!(matches!(
        sim.record_field_slice(SlicePlane { axis: 2, offset: 5e-3 }),
        Err(SolverError::PlaneOutside { .. })
    ));

    let peak_step = (2.0 * SourceWaveform::gaussian_sine(60e9, 20e9, 1.0).delay / g.dt) as usize / 2;
    for _ in 0..peak_step {
        sim.step().unwrap();
    }
    let slice = sim.record_field_slice(plane).unwrap();
    let (_, iu, iv) = slice.max();
    let p = &g.ports[0];
    // cell (iu, iv) touches node (p.i, p.j) when the offsets are 0 or -1
    let di = (iu as isize - p.i as isize).abs().min((iu as isize + 1 - p.i as isize).abs());
    let dj = (iv as isize - p.j as isize).abs().min((iv as isize + 1 - p.j as isize).abs());
    assert!(di <= 2 && dj <= 2, "max at ({iu}, {iv}), port at ({}, {})", p.i, p.j);

    // tangential E on the conducting walls is exactly zero
    let st = sim.state();
    let (nx, ny, nz) = g.dims();
    let max = slice.max().0;
    for j in 0..ny {
        for k in 1..nz {
            assert!((st.ey[st.idx(0, j, k)] as f64).abs() <= 1e-12 * max);
            assert!((st.ey[st.idx(nx, j, k)] as f64).abs() <= 1e-12 * max);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("slice.bin");
    slice.write_raster(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"PKGF");
    assert_eq!(bytes.len(), 4 + 5 * 4 + 8 + 8 * (slice.u.len() + slice.v.len()) + 4 * slice.values.len());
    assert!(slice.to_csv().lines().count() == slice.values.len() + 1);
}

#[test]
fn allocation_matches_cost_estimate() {
    use pkgem::geometry::{make_scenario, Preset, Scale, ScenarioOverrides};
    let s = make_scenario(Preset::SingleChipWalled, &ScenarioOverrides { scale: Scale::Desk, ..Default::default() }).unwrap();
    let g = generate_mesh(&s, &MeshOptions::default()).unwrap();
    let est = pkgem::mesh::estimate_cost(&g, 1e-9);
    let sim = Simulation::new(&g, None).unwrap();
    let ratio = sim.allocated_bytes() as f64 / est.memory_bytes as f64;
    assert!((ratio - 1.0).abs() <= 0.10, "ratio {ratio}");
}
