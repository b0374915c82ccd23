//! Likelihood-score estimators: DPS, DMPS, πGDM, and the exact mixture
//! likelihood as a fourth, reference implementation.
//!
//! Every estimator returns the *unscaled* estimate of `∇_{x_t} log p(y | x_t)`
//! together with the scale the baseline would multiply it by at this step.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::diffusion::{tweedie_denoise, DiffusionState, NoiseSchedule};
use crate::error::{check_len, Error, Result};
use crate::gmm::{DenseLikelihood, GmmPrior};
use crate::numerics::Signal;
use crate::operators::MeasurementModel;

/// Step used by the finite-difference Hessian fallback.
pub const FD_HESSIAN_STEP: f64 = 1e-4;

/// Source of diffused prior scores `∇ log p(x_t)`.
///
/// [`GmmPrior`] implements this exactly. A learned model only needs
/// [`ScoreModel::score`]; Hessian-vector products then fall back to central
/// differences of the score.
pub trait ScoreModel: Send + Sync {
    fn shape(&self) -> (usize, usize);

    fn score(&self, sched: &NoiseSchedule, x_t: &Signal, t: usize) -> Result<Signal>;

    fn hessian_vec(
        &self,
        sched: &NoiseSchedule,
        x_t: &Signal,
        t: usize,
        v: &Signal,
    ) -> Result<Signal> {
        finite_difference_hessian_vec(self, sched, x_t, t, v, FD_HESSIAN_STEP)
    }

    /// The analytic mixture behind this model, when there is one.
    fn as_gmm(&self) -> Option<&GmmPrior> {
        None
    }
}

impl ScoreModel for GmmPrior {
    fn shape(&self) -> (usize, usize) {
        GmmPrior::shape(self)
    }

    fn score(&self, sched: &NoiseSchedule, x_t: &Signal, t: usize) -> Result<Signal> {
        self.at_step(sched, t)?.score(x_t)
    }

    fn hessian_vec(
        &self,
        sched: &NoiseSchedule,
        x_t: &Signal,
        t: usize,
        v: &Signal,
    ) -> Result<Signal> {
        self.at_step(sched, t)?.hessian_vec(x_t, v)
    }

    fn as_gmm(&self) -> Option<&GmmPrior> {
        Some(self)
    }
}

/// Wraps a plain score function `(x_t, t) → score` as a [`ScoreModel`].
pub struct ExternalScore<F> {
    shape: (usize, usize),
    f: F,
}

impl<F> ExternalScore<F>
where
    F: Fn(&NoiseSchedule, &Signal, usize) -> Result<Signal> + Send + Sync,
{
    pub fn new(shape: (usize, usize), f: F) -> Self {
        Self { shape, f }
    }
}

impl<F> ScoreModel for ExternalScore<F>
where
    F: Fn(&NoiseSchedule, &Signal, usize) -> Result<Signal> + Send + Sync,
{
    fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn score(&self, sched: &NoiseSchedule, x_t: &Signal, t: usize) -> Result<Signal> {
        (self.f)(sched, x_t, t)
    }
}

/// `H v ≈ (s(x + h v̂) − s(x − h v̂)) / 2h · ‖v‖`
pub fn finite_difference_hessian_vec<M: ScoreModel + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    x_t: &Signal,
    t: usize,
    v: &Signal,
    h: f64,
) -> Result<Signal> {
    check_len("finite_difference_hessian_vec", x_t.len(), v.len())?;
    let norm = v.norm();
    if norm == 0.0 {
        return Ok(Signal::zeros_like(x_t));
    }
    let step = v.scaled(h / norm);
    let plus = model.score(sched, &x_t.add(&step)?, t)?;
    let minus = model.score(sched, &x_t.sub(&step)?, t)?;
    Ok(plus.sub(&minus)?.scaled(norm / (2.0 * h)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceKind {
    Dps,
    Dmps,
    Pigdm,
    Exact,
}

impl GuidanceKind {
    pub fn name(self) -> &'static str {
        match self {
            GuidanceKind::Dps => "dps",
            GuidanceKind::Dmps => "dmps",
            GuidanceKind::Pigdm => "pigdm",
            GuidanceKind::Exact => "exact",
        }
    }
}

/// How πGDM picks the variance `r_t²` of `p(x₀ | x_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PigdmVariance {
    /// `r² = ρ / (1 + ρ)` with `ρ = (1−ᾱ)/ᾱ`.
    #[default]
    Heuristic,
    /// `r² = tr(Var(x₀ | x_t)) / dim` of a single-component prior.
    ExactGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceMethod {
    pub kind: GuidanceKind,
    /// λ; for DPS this is the step coefficient ζ.
    pub scale_param: f64,
    #[serde(default)]
    pub pigdm_r2_mode: PigdmVariance,
    /// DPS only: divide ζ by the residual norm each step.
    #[serde(default = "default_true")]
    pub dps_normalize: bool,
}

fn default_true() -> bool {
    true
}

impl GuidanceMethod {
    pub fn new(kind: GuidanceKind, scale_param: f64) -> Result<Self> {
        let m = Self {
            kind,
            scale_param,
            pigdm_r2_mode: PigdmVariance::Heuristic,
            dps_normalize: true,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_pigdm_variance(mut self, mode: PigdmVariance) -> Self {
        self.pigdm_r2_mode = mode;
        self
    }

    pub fn with_dps_normalize(mut self, on: bool) -> Self {
        self.dps_normalize = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_param > 0.0) || !self.scale_param.is_finite() {
            return Err(Error::Contract(format!(
                "guidance scale must be finite and > 0, got {}",
                self.scale_param
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceOutput {
    pub likelihood_score: Signal,
    pub effective_scale: f64,
}

/// Everything about one inverse problem that the estimators read.
pub struct GuidanceProblem<'a> {
    pub prior: &'a dyn ScoreModel,
    pub sched: &'a NoiseSchedule,
    pub model: &'a MeasurementModel,
    pub y: &'a Signal,
    dense: OnceLock<DenseLikelihood<'a>>,
}

impl<'a> GuidanceProblem<'a> {
    pub fn new(
        prior: &'a dyn ScoreModel,
        sched: &'a NoiseSchedule,
        model: &'a MeasurementModel,
        y: &'a Signal,
    ) -> Result<Self> {
        let (h, w) = prior.shape();
        check_len("GuidanceProblem(prior vs operator)", model.in_dim(), h * w)?;
        check_len("GuidanceProblem(y)", model.out_dim(), y.len())?;
        Ok(Self {
            prior,
            sched,
            model,
            y,
            dense: OnceLock::new(),
        })
    }

    fn gmm(&self) -> Result<&'a GmmPrior> {
        self.prior
            .as_gmm()
            .ok_or_else(|| Error::Contract("exact guidance needs an analytic mixture prior".into()))
    }

    fn dense(&self) -> Result<&DenseLikelihood<'a>> {
        if let Some(d) = self.dense.get() {
            return Ok(d);
        }
        let built = DenseLikelihood::new(self.model, self.y)?;
        Ok(self.dense.get_or_init(|| built))
    }

    /// Exact `∇ log p(y | x_t)` for mixture priors.
    pub fn exact_likelihood_score(&self, state: &DiffusionState) -> Result<Signal> {
        let gmm = self.gmm()?;
        Ok(gmm
            .at_step(self.sched, state.t)?
            .likelihood_score(self.dense()?, &state.x_t)?
            .0)
    }

    /// `J v` with `J = ∂x̂₀/∂x_t = (I + (1−ᾱ) H) / √ᾱ`, which is symmetric.
    fn denoiser_jacobian_vec(&self, state: &DiffusionState, v: &Signal) -> Result<Signal> {
        let ab = self.sched.alpha_bar(state.t)?;
        let hv = self.prior.hessian_vec(self.sched, &state.x_t, state.t, v)?;
        let mut out = v.clone();
        out.axpy(1.0 - ab, &hv)?;
        Ok(out.scaled(1.0 / ab.sqrt()))
    }
}

/// Estimates `∇ log p(y | x_t)`, computing the prior score internally.
pub fn estimate_likelihood_score(
    method: &GuidanceMethod,
    problem: &GuidanceProblem<'_>,
    state: &DiffusionState,
) -> Result<GuidanceOutput> {
    let g = problem.prior.score(problem.sched, &state.x_t, state.t)?;
    estimate_with_prior_score(method, problem, state, &g)
}

/// Same as [`estimate_likelihood_score`] with the prior score already known.
pub fn estimate_with_prior_score(
    method: &GuidanceMethod,
    problem: &GuidanceProblem<'_>,
    state: &DiffusionState,
    prior_score: &Signal,
) -> Result<GuidanceOutput> {
    method.validate()?;
    let model = problem.model;
    let op = &model.operator;
    let sched = problem.sched;
    let ab = sched.alpha_bar(state.t)?;
    let sigma2 = model.noise_var();

    let output = match method.kind {
        GuidanceKind::Dps => {
            if sigma2 <= 0.0 {
                return Err(Error::Degenerate("DPS needs noise_std > 0".into()));
            }
            let x0 = tweedie_denoise(sched, state, prior_score)?;
            let resid = problem.y.sub(&op.apply(&x0)?)?;
            let back = op.adjoint(&resid)?;
            let score = problem
                .denoiser_jacobian_vec(state, &back)?
                .scaled(1.0 / sigma2);
            let rnorm = resid.norm();
            let effective_scale = if method.dps_normalize && rnorm > 1e-300 {
                method.scale_param / rnorm
            } else {
                method.scale_param
            };
            GuidanceOutput {
                likelihood_score: score,
                effective_scale,
            }
        }
        GuidanceKind::Pigdm => {
            let r2 = match method.pigdm_r2_mode {
                PigdmVariance::Heuristic => {
                    let rho = (1.0 - ab) / ab;
                    rho / (1.0 + rho)
                }
                PigdmVariance::ExactGaussian => {
                    let gmm = problem.gmm()?;
                    if gmm.num_components() != 1 {
                        return Err(Error::Contract(
                            "exact_gaussian r² needs a single-component prior".into(),
                        ));
                    }
                    gmm.diffused(ab).mean_conditional_variance(0)
                }
            };
            let x0 = tweedie_denoise(sched, state, prior_score)?;
            let resid = problem.y.sub(&op.apply(&x0)?)?;
            let solved = op.solve_gram(r2, sigma2, &resid)?;
            let back = op.adjoint(&solved)?;
            GuidanceOutput {
                likelihood_score: problem.denoiser_jacobian_vec(state, &back)?,
                effective_scale: method.scale_param,
            }
        }
        GuidanceKind::Dmps => {
            let a = ab.sqrt();
            let pred = op.apply(&state.x_t.scaled(1.0 / a))?;
            let resid = problem.y.sub(&pred)?;
            let solved = op.solve_gram((1.0 - ab) / ab, sigma2, &resid)?;
            GuidanceOutput {
                likelihood_score: op.adjoint(&solved)?.scaled(1.0 / a),
                effective_scale: method.scale_param,
            }
        }
        GuidanceKind::Exact => GuidanceOutput {
            likelihood_score: problem.exact_likelihood_score(state)?,
            effective_scale: method.scale_param,
        },
    };
    output
        .likelihood_score
        .ensure_finite("likelihood score estimate")?;
    Ok(output)
}

/// `‖estimate − exact‖ / (‖exact‖ + 1e-12)`
pub fn approximation_error(
    method: &GuidanceMethod,
    problem: &GuidanceProblem<'_>,
    state: &DiffusionState,
) -> Result<f64> {
    let est = estimate_likelihood_score(method, problem, state)?.likelihood_score;
    let exact = problem.exact_likelihood_score(state)?;
    Ok(est.sub(&exact)?.norm() / (exact.norm() + 1e-12))
}
