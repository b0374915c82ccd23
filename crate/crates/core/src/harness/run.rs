use std::fmt::Write as _;
use std::path::Path;

use super::config::{RunConfig, TaskKind};
use super::{metrics_csv, pgm, MetricsRow, OutputDir, RunManifest, Timing};
use crate::error::{Error, Result};
use crate::gmm::{exact_posterior, gmm_sample, GmmPrior};
use crate::metrics::{psnr, sliced_wasserstein_default, ssim};
use crate::numerics::{Rng, Signal};
use crate::operators::{LinearOperator, MeasurementModel};
use crate::saip::SaipConfig;
use crate::sampler::{sample_posterior, RunResult};

/// RNG stream for ground truth, masks and measurement noise of image tasks.
/// Chains use streams `0..chains`, so this never collides with them.
const DATA_STREAM: u64 = 1 << 63;
pub(super) const REFERENCE_STREAM: u64 = DATA_STREAM + 1;

/// Side of the blocks averaged when an input image seeds a prior template.
const TEMPLATE_BLOCK: usize = 4;

#[derive(Debug, Clone)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub prior: GmmPrior,
    pub model: MeasurementModel,
    pub x_true: Signal,
    pub y: Signal,
}

impl TaskInstance {
    /// The measurement drawn on the image grid: masked pixels are zero.
    pub fn measurement_image(&self) -> Result<Signal> {
        match self.model.operator {
            LinearOperator::Mask { .. } => self.model.operator.adjoint(&self.y),
            _ => Ok(self.y.clone()),
        }
    }
}

/// A random piecewise-constant image: a flat background plus a few
/// axis-aligned rectangles, all intensities in [0.1, 0.9].
pub fn piecewise_constant_image(height: usize, width: usize, rng: &mut Rng) -> Signal {
    let level = |rng: &mut Rng| 0.1 + 0.8 * rng.uniform();
    let mut img = Signal::filled(height, width, level(rng));
    let rects = 2 + rng.below(4);
    for _ in 0..rects {
        let rh = 1 + rng.below((height / 2).max(1));
        let rw = 1 + rng.below((width / 2).max(1));
        let top = rng.below(height);
        let left = rng.below(width);
        let v = level(rng);
        let data = img.as_mut_slice();
        for r in top..(top + rh).min(height) {
            for c in left..(left + rw).min(width) {
                data[r * width + c] = v;
            }
        }
    }
    img
}

fn block_average(img: &Signal, block: usize) -> Signal {
    let (h, w) = img.shape();
    let src = img.as_slice();
    let mut out = Signal::zeros(h, w);
    let dst = out.as_mut_slice();
    for br in (0..h).step_by(block) {
        for bc in (0..w).step_by(block) {
            let (re, ce) = ((br + block).min(h), (bc + block).min(w));
            let mut sum = 0.0;
            for r in br..re {
                for c in bc..ce {
                    sum += src[r * w + c];
                }
            }
            let mean = sum / ((re - br) * (ce - bc)) as f64;
            for r in br..re {
                for c in bc..ce {
                    dst[r * w + c] = mean;
                }
            }
        }
    }
    out
}

/// Builds prior, operator, ground truth and measurement for a config.
pub fn build_task(cfg: &RunConfig) -> Result<TaskInstance> {
    let task = &cfg.task;
    if !task.kind.is_image() {
        let prior = task.synthetic_prior()?;
        let d = prior.dim();
        let model = MeasurementModel::new(
            LinearOperator::mask(d, 1, task.observe())?,
            task.noise_std(),
        )?;
        let mut rng = Rng::new(task.measurement_seed());
        let x_true = gmm_sample(&prior, &mut rng, 1)?.remove(0);
        let y = model.measure(&x_true, &mut rng)?;
        return Ok(TaskInstance {
            kind: task.kind,
            prior,
            model,
            x_true,
            y,
        });
    }

    let mut rng = Rng::with_stream(cfg.seed, DATA_STREAM);
    let input = match &cfg.io.input_image {
        Some(path) => Some(pgm::read_pgm(path)?),
        None => None,
    };
    let (h, w) = match &input {
        Some(img) => {
            let explicit = (task.height, task.width);
            if explicit.0.is_some_and(|v| v != img.height())
                || explicit.1.is_some_and(|v| v != img.width())
            {
                return Err(Error::Config(format!(
                    "task.height/width disagree with the {}x{} input image",
                    img.height(),
                    img.width()
                )));
            }
            img.shape()
        }
        None => task.image_shape(),
    };
    let k = task.prior_components();
    let mut templates: Vec<Signal> = (0..k)
        .map(|_| piecewise_constant_image(h, w, &mut rng))
        .collect();
    if let Some(img) = &input {
        templates[0] = block_average(img, TEMPLATE_BLOCK);
    }
    let var = task.prior_std().powi(2);
    let prior = GmmPrior::diagonal(
        vec![1.0 / k as f64; k],
        templates,
        vec![vec![var; h * w]; k],
    )?;
    let x_true = match input {
        Some(img) => img,
        None => gmm_sample(&prior, &mut rng, 1)?.remove(0),
    };
    let operator = match task.kind {
        TaskKind::Denoise => LinearOperator::identity_image(h, w),
        TaskKind::Deblur => LinearOperator::uniform_blur(h, w, task.kernel())?,
        TaskKind::InpaintRandom | TaskKind::InpaintBox => {
            let spec = task.mask_spec().expect("inpainting tasks have a mask");
            LinearOperator::from_mask_spec(h, w, &spec, &mut rng)?
        }
        TaskKind::SyntheticGmm => unreachable!("handled above"),
    };
    let model = MeasurementModel::new(operator, task.noise_std())?;
    let y = model.measure(&x_true, &mut rng)?;
    Ok(TaskInstance {
        kind: task.kind,
        prior,
        model,
        x_true,
        y,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantFailure {
    pub variant: String,
    pub chain: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub failures: Vec<VariantFailure>,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            super::EXIT_OK
        } else {
            super::EXIT_RUNTIME
        }
    }

    pub fn failure_report(&self) -> String {
        let mut s = String::new();
        for f in &self.failures {
            let _ = writeln!(s, "{} chain {}: {}", f.variant, f.chain, f.message);
        }
        s
    }
}

fn samples_csv(result: &RunResult) -> String {
    let mut out = String::new();
    let dim = result.samples.first().map_or(0, |s| s.len());
    out.push_str("chain");
    for d in 0..dim {
        let _ = write!(out, ",x{d}");
    }
    out.push('\n');
    for (chain, s) in result.chain_ids.iter().zip(&result.samples) {
        let _ = write!(out, "{chain}");
        for v in s.as_slice() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn mean_of(values: impl Iterator<Item = Result<f64>>) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v?;
        n += 1;
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Runs the baseline and, when enabled, the SAIP variant of one task under
/// the same seed and writes all outputs plus a manifest into `out_dir`.
pub fn cmd_run(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let mut out = OutputDir::create(out_dir)?;
    let task = build_task(cfg)?;
    let mut manifest = RunManifest::new("run", cfg.clone());

    let reference = if task.kind.is_image() {
        None
    } else {
        let post = exact_posterior(&task.prior, &task.model, &task.y)?;
        let mut rng = Rng::with_stream(cfg.seed, REFERENCE_STREAM);
        Some(gmm_sample(&post, &mut rng, cfg.sampler.reference_samples)?)
    };
    if task.kind.is_image() {
        out.write("ground_truth.pgm", &pgm::encode(&task.x_true))?;
        out.write("measurement.pgm", &pgm::encode(&task.measurement_image()?))?;
    }

    let mut variants = vec![("baseline", SaipConfig::disabled())];
    if cfg.saip.enabled {
        variants.push(("saip", cfg.saip.clone()));
    }
    let mut failures = Vec::new();
    for (label, saip) in variants {
        let sampler_cfg = cfg.sampler_config(saip.clone())?;
        let result = sample_posterior(&sampler_cfg, &task.prior, &task.model, &task.y)?;
        for f in &result.failures {
            failures.push(VariantFailure {
                variant: label.into(),
                chain: f.chain,
                message: f.message.clone(),
            });
            manifest
                .failures
                .push(format!("{label} chain {}: {}", f.chain, f.message));
        }
        for (chain, trace) in result.chain_ids.iter().zip(&result.traces) {
            out.write(
                &format!("trace_{label}_chain{chain:04}.csv"),
                trace.to_csv_string().as_bytes(),
            )?;
        }
        let (psnr_db, ssim_val, sw) = if task.kind.is_image() {
            if let Some(first) = result.samples.first() {
                out.write(&format!("recon_{label}.pgm"), &pgm::encode(first))?;
            }
            (
                mean_of(result.samples.iter().map(|s| psnr(&task.x_true, s, 1.0)))?,
                mean_of(result.samples.iter().map(|s| ssim(&task.x_true, s)))?,
                None,
            )
        } else {
            out.write(
                &format!("samples_{label}.csv"),
                samples_csv(&result).as_bytes(),
            )?;
            let sw = match (&reference, result.samples.is_empty()) {
                (Some(r), false) => Some(sliced_wasserstein_default(&result.samples, r)?),
                _ => None,
            };
            (None, None, sw)
        };
        let method = cfg.guidance.kind.name();
        manifest.metrics.push(MetricsRow {
            run_id: format!("{}-{method}-{label}-seed{}", task.kind.name(), cfg.seed),
            task: task.kind.name().into(),
            method: method.into(),
            saip_enabled: saip.enabled,
            saip_variant: if saip.enabled {
                saip.variant.name().into()
            } else {
                "none".into()
            },
            omega: saip.resolve_omega(cfg.guidance.scale_param),
            seed: cfg.seed,
            psnr_db,
            ssim: ssim_val,
            sw_distance: sw,
            wall_time_s: cfg.io.timing.then_some(result.wall_time_seconds),
            extra_memory_bytes: result.peak_extra_memory_bytes,
        });
        manifest.timings.push(Timing {
            variant: label.into(),
            wall_time_s: result.wall_time_seconds,
            extra_memory_bytes: result.peak_extra_memory_bytes,
        });
    }
    out.write("metrics.csv", metrics_csv(&manifest.metrics).as_bytes())?;
    let manifest = out.finish(manifest)?;
    Ok(RunSummary { manifest, failures })
}
