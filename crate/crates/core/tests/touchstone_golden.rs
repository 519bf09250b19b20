use std::path::PathBuf;

mod common;

use common::fixture;
use pkgem::ports::touchstone::{read_touchstone, write_touchstone};

fn check(n: usize) {
    let sp = fixture(n);
    let text = write_touchstone(&sp);
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("tests/golden/fixture.s{n}p"));
    if std::env::var_os("PKGEM_UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &text).unwrap();
    }
    let golden = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, golden, "writer output drifted from {}", path.display());

    let back = read_touchstone(&golden, n).unwrap();
    assert_eq!(back.frequencies, sp.frequencies);
    assert_eq!(back.provenance.scenario_hash, sp.provenance.scenario_hash);
    for (a, b) in back.s.iter().flatten().zip(sp.s.iter().flatten()) {
        assert!((a - b).norm() < 1e-8 * b.norm().max(1e-3));
    }
    // rewriting what was read changes nothing
    assert_eq!(write_touchstone(&back), golden);
}

#[test]
fn two_port_layout_is_stable() {
    check(2);
}

#[test]
fn four_port_layout_is_stable() {
    check(4);
}
