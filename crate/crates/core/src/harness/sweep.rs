use std::fmt::Write as _;
use std::path::Path;

use super::config::RunConfig;
use super::run::{build_task, REFERENCE_STREAM};
use super::{OutputDir, RunManifest, Timing};
use crate::error::{Error, Result};
use crate::gmm::{exact_posterior, gmm_sample};
use crate::numerics::Rng;
use crate::sampler::{sweep_scale, SweepRow};

pub const SWEEP_COLUMNS: [&str; 4] = ["omega", "variant", "sw_distance", "wall_time_s"];

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub manifest: RunManifest,
}

impl SweepSummary {
    pub fn exit_code(&self) -> i32 {
        if self.rows.iter().any(|r| r.failed_chains > 0) {
            super::EXIT_RUNTIME
        } else {
            super::EXIT_OK
        }
    }
}

pub fn sweep_csv(rows: &[SweepRow], timing: bool) -> String {
    let mut out = SWEEP_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let wall = if timing {
            r.wall_time_s.to_string()
        } else {
            String::new()
        };
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.omega,
            r.variant.name(),
            r.sw_distance,
            wall
        );
    }
    out
}

/// Sweeps the guidance scale over `omegas` on a synthetic task, with and
/// without SAIP, writing `sweep.csv` and a manifest into `out_dir`.
pub fn cmd_sweep(cfg: &RunConfig, omegas: &[f64], out_dir: &Path) -> Result<SweepSummary> {
    cfg.validate()?;
    if cfg.task.kind.is_image() {
        return Err(Error::Config(format!(
            "sweep needs task.kind = \"synthetic_gmm\" (exact posterior), got \"{}\"",
            cfg.task.kind.name()
        )));
    }
    if omegas.is_empty() || omegas.iter().any(|w| !w.is_finite() || *w <= 0.0) {
        return Err(Error::Config(
            "sweep needs a non-empty list of positive omegas".into(),
        ));
    }
    let mut out = OutputDir::create(out_dir)?;
    let task = build_task(cfg)?;
    let post = exact_posterior(&task.prior, &task.model, &task.y)?;
    let reference = gmm_sample(
        &post,
        &mut Rng::with_stream(cfg.seed, REFERENCE_STREAM),
        cfg.sampler.reference_samples,
    )?;
    let rows = sweep_scale(
        &cfg.sampler_config(cfg.saip.clone())?,
        &task.prior,
        &task.model,
        &task.y,
        omegas,
        &reference,
    )?;

    let mut manifest = RunManifest::new("sweep", cfg.clone());
    for r in &rows {
        manifest.timings.push(Timing {
            variant: format!("{}@{}", r.variant.name(), r.omega),
            wall_time_s: r.wall_time_s,
            extra_memory_bytes: 0,
        });
        if r.failed_chains > 0 {
            manifest.failures.push(format!(
                "{} at omega {}: {} chains failed",
                r.variant.name(),
                r.omega,
                r.failed_chains
            ));
        }
    }
    out.write("sweep.csv", sweep_csv(&rows, cfg.io.timing).as_bytes())?;
    let manifest = out.finish(manifest)?;
    Ok(SweepSummary { rows, manifest })
}
