//! Canonical-toy guidance-scale sweep against a stored table.
//!
//! The table was produced by the first run of this exact configuration and
//! is kept as a regression oracle: distances must stay within ±10%.

use saip_core::guidance::{GuidanceKind, GuidanceMethod};
use saip_core::harness::{cmd_sweep, RunConfig, TaskKind};
use saip_core::sampler::SweepVariant;

const OMEGAS: [f64; 4] = [0.2, 0.5, 1.0, 2.0];

fn sweep(kind: GuidanceKind) -> Vec<(f64, SweepVariant, f64)> {
    let mut cfg = RunConfig::example(
        TaskKind::SyntheticGmm,
        GuidanceMethod::new(kind, 1.0).unwrap(),
    );
    cfg.seed = 1;
    cfg.sampler.chains = 500;
    cfg.sampler.reference_samples = 1000;
    let dir = tempfile::tempdir().unwrap();
    let summary = cmd_sweep(&cfg, &OMEGAS, dir.path()).unwrap();
    summary
        .rows
        .iter()
        .map(|r| (r.omega, r.variant, r.sw_distance))
        .collect()
}

fn check(kind: GuidanceKind, stored: &[(f64, f64)]) {
    let rows = sweep(kind);
    assert_eq!(rows.len(), 2 * OMEGAS.len());
    for (pair, &(base, saip)) in rows.chunks(2).zip(stored) {
        for (row, want) in pair.iter().zip([base, saip]) {
            let rel = (row.2 - want).abs() / want;
            assert!(
                rel <= 0.10,
                "{} {:?} at omega {}: {} vs stored {}",
                kind.name(),
                row.1,
                row.0,
                row.2,
                want
            );
        }
    }
    // best fixed-scale baseline and SAIP at that scale
    let (best, _) = stored
        .iter()
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |acc, (i, r)| if r.0 < acc.1 { (i, r.0) } else { acc },
        );
    let ratio_now = rows[2 * best + 1].2 / rows[2 * best].2;
    let ratio_stored = stored[best].1 / stored[best].0;
    assert!(
        (ratio_now / ratio_stored - 1.0).abs() <= 0.10,
        "ratio {ratio_now} vs {ratio_stored}"
    );
}

#[test]
fn pigdm_sweep_matches_stored_table() {
    check(
        GuidanceKind::Pigdm,
        &[
            (0.78282, 0.64219),
            (0.30813, 0.24454),
            (0.044229, 0.044229),
            (0.063698, 0.16731),
        ],
    );
}

#[test]
fn dmps_sweep_matches_stored_table() {
    check(
        GuidanceKind::Dmps,
        &[
            (1.3038, 1.1974),
            (1.0790, 1.0031),
            (0.96896, 0.96896),
            (0.86123, 1.1169),
        ],
    );
}
