//! The guided reverse-diffusion loop.
//!
//! Each step: prior score → likelihood estimate → adaptive combination →
//! ancestral step, with one [`SaipStepRecord`] emitted per step. Chains are
//! independent; chain `i` draws from RNG stream `(seed, i)` so results do not
//! depend on the chain count or on whether chains run in parallel.

use std::time::Instant;

use rayon::prelude::*;

use crate::diffusion::{reverse_step, DiffusionState, NoiseSchedule};
use crate::error::{check_len, Error, Result};
use crate::gmm::{exact_posterior, gmm_sample, GmmPrior};
use crate::guidance::{estimate_with_prior_score, GuidanceMethod, GuidanceProblem, ScoreModel};
use crate::metrics::sliced_wasserstein_default;
use crate::numerics::{Rng, Signal};
use crate::operators::MeasurementModel;
use crate::saip::{saip_step, SaipConfig, SaipStepRecord, SaipTrace, SaipVariant};

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub guidance: GuidanceMethod,
    pub saip: SaipConfig,
    pub chains: usize,
    pub seed: u64,
    /// Run chains on the rayon pool. Output is identical either way.
    pub parallel: bool,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Contract("chains must be >= 1".into()));
        }
        self.guidance.validate()?;
        self.saip.validate()
    }

    pub fn with_saip(&self, saip: SaipConfig) -> Self {
        Self {
            saip,
            ..self.clone()
        }
    }

    pub fn with_scale(&self, scale: f64) -> Self {
        let mut cfg = self.clone();
        cfg.guidance.scale_param = scale;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainFailure {
    pub chain: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// Terminal samples of the chains that completed, in chain order.
    pub samples: Vec<Signal>,
    /// Chain index of each entry in `samples`.
    pub chain_ids: Vec<usize>,
    /// One trace per completed chain.
    pub traces: Vec<SaipTrace>,
    pub failures: Vec<ChainFailure>,
    pub wall_time_seconds: f64,
    /// Best-effort size of the buffers the loop keeps beyond its inputs
    /// (per-chain state, score vectors and traces).
    pub peak_extra_memory_bytes: usize,
}

impl RunResult {
    pub fn all_succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

fn run_chain(
    cfg: &SamplerConfig,
    problem: &GuidanceProblem<'_>,
    chain: usize,
) -> Result<(Signal, SaipTrace)> {
    let mut rng = Rng::with_stream(cfg.seed, chain as u64);
    let (h, w) = problem.prior.shape();
    let steps = cfg.schedule.steps();
    let mut state = DiffusionState {
        x_t: Signal::new(rng.normal_vec(h * w), h, w)?,
        t: steps,
    };
    let mut trace = SaipTrace::with_capacity(steps);
    while state.t >= 1 {
        let t = state.t;
        let g = problem.prior.score(&cfg.schedule, &state.x_t, t)?;
        let est = estimate_with_prior_score(&cfg.guidance, problem, &state, &g)?;
        let (combined, record) =
            saip_step(&cfg.saip, t, est.effective_scale, &g, &est.likelihood_score)?;
        trace.record_step(record);
        state = reverse_step(&cfg.schedule, &state, &combined, &mut rng)?;
        state
            .x_t
            .ensure_finite(&format!("chain {chain} state at t = {}", state.t))?;
    }
    Ok((state.x_t, trace))
}

/// Runs `cfg.chains` guided reverse chains from `x_T ~ N(0, I)`.
pub fn sample_posterior(
    cfg: &SamplerConfig,
    prior: &dyn ScoreModel,
    model: &MeasurementModel,
    y: &Signal,
) -> Result<RunResult> {
    cfg.validate()?;
    let problem = GuidanceProblem::new(prior, &cfg.schedule, model, y)?;
    let started = Instant::now();
    let outcomes: Vec<Result<(Signal, SaipTrace)>> = if cfg.parallel {
        (0..cfg.chains)
            .into_par_iter()
            .map(|c| run_chain(cfg, &problem, c))
            .collect()
    } else {
        (0..cfg.chains)
            .map(|c| run_chain(cfg, &problem, c))
            .collect()
    };
    let wall_time_seconds = started.elapsed().as_secs_f64();

    let mut result = RunResult {
        samples: Vec::with_capacity(cfg.chains),
        chain_ids: Vec::with_capacity(cfg.chains),
        traces: Vec::with_capacity(cfg.chains),
        failures: Vec::new(),
        wall_time_seconds,
        peak_extra_memory_bytes: 0,
    };
    for (chain, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok((sample, trace)) => {
                result.samples.push(sample);
                result.chain_ids.push(chain);
                result.traces.push(trace);
            }
            Err(e) => result.failures.push(ChainFailure {
                chain,
                message: e.to_string(),
            }),
        }
    }
    let dim = model.in_dim();
    let per_chain_vectors = 6 * dim * std::mem::size_of::<f64>();
    let trace_bytes = cfg.schedule.steps() * std::mem::size_of::<SaipStepRecord>();
    result.peak_extra_memory_bytes = cfg.chains * (per_chain_vectors + trace_bytes);
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVariant {
    Baseline,
    Saip,
}

impl SweepVariant {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariant::Baseline => "baseline",
            SweepVariant::Saip => "saip",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub omega: f64,
    pub variant: SweepVariant,
    pub sw_distance: f64,
    pub wall_time_s: f64,
    pub failed_chains: usize,
}

/// Exact posterior draws used as the reference set for sweeps.
pub fn exact_posterior_samples(
    prior: &GmmPrior,
    model: &MeasurementModel,
    y: &Signal,
    n: usize,
    seed: u64,
) -> Result<Vec<Signal>> {
    let post = exact_posterior(prior, model, y)?;
    gmm_sample(&post, &mut Rng::new(seed), n)
}

/// Runs the sampler at every guidance scale in `omegas`, with and without the
/// adaptive scale, and reports the sliced-Wasserstein distance of each run's
/// samples to `reference`.
///
/// The SAIP arm uses `cfg.saip` when it is enabled, otherwise the default
/// enabled configuration.
pub fn sweep_scale(
    cfg: &SamplerConfig,
    prior: &GmmPrior,
    model: &MeasurementModel,
    y: &Signal,
    omegas: &[f64],
    reference: &[Signal],
) -> Result<Vec<SweepRow>> {
    if reference.is_empty() {
        return Err(Error::Contract("sweep needs reference samples".into()));
    }
    check_len(
        "sweep_scale(reference dim)",
        prior.dim(),
        reference[0].len(),
    )?;
    let saip = if cfg.saip.enabled {
        cfg.saip.clone()
    } else {
        SaipConfig::enabled(SaipVariant::Posterior)
    };
    let mut rows = Vec::with_capacity(2 * omegas.len());
    for &omega in omegas {
        for variant in [SweepVariant::Baseline, SweepVariant::Saip] {
            let run_cfg = cfg.with_scale(omega).with_saip(match variant {
                SweepVariant::Baseline => SaipConfig::disabled(),
                SweepVariant::Saip => saip.clone(),
            });
            let run = sample_posterior(&run_cfg, prior, model, y)?;
            let sw_distance = if run.samples.is_empty() {
                f64::INFINITY
            } else {
                sliced_wasserstein_default(&run.samples, reference)?
            };
            rows.push(SweepRow {
                omega,
                variant,
                sw_distance,
                wall_time_s: run.wall_time_seconds,
                failed_chains: run.failures.len(),
            });
        }
    }
    Ok(rows)
}

/// The fixed 2-D problem every end-to-end check runs on: a three-component
/// mixture observed through its first coordinate.
pub mod toy {
    use super::*;
    use crate::numerics::DenseMatrix;
    use crate::operators::LinearOperator;

    pub const NOISE_STD: f64 = 0.3;
    pub const MEASUREMENT_SEED: u64 = 7;

    #[derive(Debug, Clone)]
    pub struct CanonicalToy {
        pub prior: GmmPrior,
        pub model: MeasurementModel,
        pub x_true: Signal,
        pub y: Signal,
    }

    pub fn prior() -> GmmPrior {
        GmmPrior::new(
            vec![0.5, 0.3, 0.2],
            vec![
                Signal::vector(vec![-2.0, -2.0]),
                Signal::vector(vec![2.0, 1.0]),
                Signal::vector(vec![0.0, 3.0]),
            ],
            vec![DenseMatrix::identity(2).scaled(0.5); 3],
        )
        .expect("canonical prior is valid")
    }

    pub fn model() -> MeasurementModel {
        let observe_first = LinearOperator::mask(2, 1, vec![0]).expect("valid mask");
        MeasurementModel::new(observe_first, NOISE_STD).expect("valid noise")
    }

    pub fn canonical() -> CanonicalToy {
        let prior = prior();
        let model = model();
        let mut rng = Rng::new(MEASUREMENT_SEED);
        let x_true = gmm_sample(&prior, &mut rng, 1).expect("n = 1").remove(0);
        let y = model.measure(&x_true, &mut rng).expect("dims match");
        CanonicalToy {
            prior,
            model,
            x_true,
            y,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::GuidanceKind;
    use crate::numerics::DenseMatrix;
    use crate::operators::LinearOperator;

    fn cfg(kind: GuidanceKind, scale: f64, chains: usize, saip: SaipConfig) -> SamplerConfig {
        SamplerConfig {
            schedule: NoiseSchedule::ddpm_default(40).unwrap(),
            guidance: GuidanceMethod::new(kind, scale).unwrap(),
            saip,
            chains,
            seed: 11,
            parallel: true,
        }
    }

    #[test]
    fn zero_chains_rejected() {
        let toy = toy::canonical();
        let c = cfg(GuidanceKind::Dmps, 1.0, 0, SaipConfig::disabled());
        assert!(sample_posterior(&c, &toy.prior, &toy.model, &toy.y).is_err());
    }

    #[test]
    fn forced_unit_scale_matches_disabled_bitwise() {
        let toy = toy::canonical();
        for kind in [
            GuidanceKind::Dps,
            GuidanceKind::Dmps,
            GuidanceKind::Pigdm,
            GuidanceKind::Exact,
        ] {
            let a = sample_posterior(
                &cfg(kind, 0.8, 16, SaipConfig::disabled()),
                &toy.prior,
                &toy.model,
                &toy.y,
            )
            .unwrap();
            let b = sample_posterior(
                &cfg(kind, 0.8, 16, SaipConfig::forced_unit()),
                &toy.prior,
                &toy.model,
                &toy.y,
            )
            .unwrap();
            assert_eq!(a.samples, b.samples, "{kind:?}");
        }
    }

    #[test]
    fn serial_and_parallel_agree_and_chains_are_stable() {
        let toy = toy::canonical();
        let mut c = cfg(
            GuidanceKind::Pigdm,
            1.0,
            12,
            SaipConfig::enabled(SaipVariant::Posterior),
        );
        let par = sample_posterior(&c, &toy.prior, &toy.model, &toy.y).unwrap();
        c.parallel = false;
        let ser = sample_posterior(&c, &toy.prior, &toy.model, &toy.y).unwrap();
        assert_eq!(par.samples, ser.samples);
        assert_eq!(par.traces, ser.traces);
        c.chains = 5;
        let fewer = sample_posterior(&c, &toy.prior, &toy.model, &toy.y).unwrap();
        assert_eq!(&par.samples[..5], &fewer.samples[..]);
    }

    #[test]
    fn trace_has_one_record_per_step() {
        let toy = toy::canonical();
        let c = cfg(
            GuidanceKind::Dps,
            0.5,
            3,
            SaipConfig::enabled(SaipVariant::Posterior),
        );
        let run = sample_posterior(&c, &toy.prior, &toy.model, &toy.y).unwrap();
        for tr in &run.traces {
            assert_eq!(tr.len(), 40);
            let ts: Vec<usize> = tr.records.iter().map(|r| r.t).collect();
            assert_eq!(ts, (1..=40).rev().collect::<Vec<_>>());
        }
        let off = sample_posterior(
            &cfg(GuidanceKind::Dps, 0.5, 2, SaipConfig::disabled()),
            &toy.prior,
            &toy.model,
            &toy.y,
        )
        .unwrap();
        assert!(off
            .traces
            .iter()
            .flat_map(|t| &t.records)
            .all(|r| r.s == 1.0));
    }

    #[test]
    fn failing_chains_are_reported_individually() {
        // an external score that blows up on one chain's trajectory only
        let prior = toy::prior();
        let model = toy::model();
        let y = Signal::vector(vec![0.5]);
        let flaky =
            crate::guidance::ExternalScore::new((2, 1), |s: &NoiseSchedule, x: &Signal, t| {
                if x.as_slice()[0] > 0.0 && t == 20 {
                    Err(Error::Degenerate("synthetic failure".into()))
                } else {
                    prior.score(s, x, t)
                }
            });
        let c = cfg(GuidanceKind::Dmps, 1.0, 64, SaipConfig::disabled());
        let run = sample_posterior(&c, &flaky, &model, &y).unwrap();
        assert!(!run.failures.is_empty());
        assert_eq!(run.samples.len() + run.failures.len(), 64);
        assert!(run
            .failures
            .iter()
            .all(|f| f.message.contains("synthetic failure")));
    }

    #[test]
    fn exact_guidance_recovers_gaussian_posterior_mean() {
        let prior = GmmPrior::new(
            vec![1.0],
            vec![Signal::vector(vec![0.5, -0.5])],
            vec![DenseMatrix::from_rows(&[vec![1.0, 0.3], vec![0.3, 0.6]]).unwrap()],
        )
        .unwrap();
        let model =
            MeasurementModel::new(LinearOperator::mask(2, 1, vec![0]).unwrap(), 0.4).unwrap();
        let y = Signal::vector(vec![1.3]);
        let post = exact_posterior(&prior, &model, &y).unwrap();
        let mut c = cfg(GuidanceKind::Exact, 1.0, 2000, SaipConfig::disabled());
        c.schedule = NoiseSchedule::ddpm_default(100).unwrap();
        let run = sample_posterior(&c, &prior, &model, &y).unwrap();
        let n = run.samples.len() as f64;
        let cov = post.covariance(0);
        for d in 0..2 {
            let mean = run.samples.iter().map(|s| s.as_slice()[d]).sum::<f64>() / n;
            let se = (cov.get(d, d) / n).sqrt();
            let target = post.mean(0).as_slice()[d];
            assert!(
                (mean - target).abs() < 3.0 * se,
                "dim {d}: {mean} vs {target} (se {se})"
            );
        }
    }

    #[test]
    fn sweep_has_two_rows_per_omega() {
        let toy = toy::canonical();
        let reference = exact_posterior_samples(&toy.prior, &toy.model, &toy.y, 200, 1).unwrap();
        let c = cfg(GuidanceKind::Dmps, 1.0, 50, SaipConfig::disabled());
        let rows = sweep_scale(
            &c,
            &toy.prior,
            &toy.model,
            &toy.y,
            &[0.5, 1.0, 2.0],
            &reference,
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.sw_distance >= 0.0));
    }
}
