//! Analytic Gaussian-mixture prior.
//!
//! Under the forward process `x_t = √ᾱ x₀ + √(1−ᾱ) ε`, a mixture
//! `Σ π_k N(μ_k, Σ_k)` stays a mixture with the same weights, means `√ᾱ μ_k`
//! and covariances `ᾱ Σ_k + (1−ᾱ) I`. That makes every quantity the samplers
//! need available in closed form: diffused scores, their Hessians, the
//! per-component conditionals `p(x₀ | x_t)`, the likelihood `p(y | x_t)` and
//! the posterior `p(x₀ | y)`.
//!
//! Each covariance is stored through its eigendecomposition `Σ = Q Λ Qᵀ`.
//! Diffusion only shifts the spectrum, so every diffused solve is diagonal in
//! that basis and no per-timestep factorization is needed. Diagonal
//! covariances skip the rotation altogether, which is what keeps image-sized
//! priors cheap.

use crate::diffusion::NoiseSchedule;
use crate::error::{check_len, Error, Result};
use crate::numerics::{
    dot_slices, log_sum_exp, CholeskyFactor, DenseMatrix, Rng, Signal, SymmetricEigen,
};
use crate::operators::MeasurementModel;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Responsibilities below `exp(-700)` are treated as exactly zero.
const LOG_RESP_FLOOR: f64 = -700.0;

#[derive(Debug, Clone)]
struct Component {
    mean: Vec<f64>,
    eigvals: Vec<f64>,
    /// Eigenvectors as columns; `None` for axis-aligned covariances.
    basis: Option<DenseMatrix>,
}

impl Component {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn to_eig(&self, v: &[f64]) -> Vec<f64> {
        match &self.basis {
            None => v.to_vec(),
            Some(q) => q.matvec_transpose(v).expect("basis dimension"),
        }
    }

    fn from_eig(&self, w: &[f64]) -> Vec<f64> {
        match &self.basis {
            None => w.to_vec(),
            Some(q) => q.matvec(w).expect("basis dimension"),
        }
    }

    /// `Q diag(d) Qᵀ`
    fn dense_from_spectrum(&self, d: &[f64]) -> DenseMatrix {
        match &self.basis {
            None => DenseMatrix::diagonal(d),
            Some(q) => {
                let n = self.dim();
                let mut scaled = q.clone();
                for r in 0..n {
                    for c in 0..n {
                        scaled.set(r, c, q.get(r, c) * d[c]);
                    }
                }
                scaled.matmul(&q.transpose()).expect("square basis")
            }
        }
    }

    fn covariance(&self) -> DenseMatrix {
        self.dense_from_spectrum(&self.eigvals)
    }
}

/// Mixture prior `p(x₀) = Σ_k π_k N(μ_k, Σ_k)`.
#[derive(Debug, Clone)]
pub struct GmmPrior {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    components: Vec<Component>,
    height: usize,
    width: usize,
}

impl GmmPrior {
    /// Full-covariance mixture. Every covariance must be symmetric positive
    /// definite (checked with a Cholesky factorization).
    pub fn new(weights: Vec<f64>, means: Vec<Signal>, covs: Vec<DenseMatrix>) -> Result<Self> {
        check_len("GmmPrior::new(covs)", means.len(), covs.len())?;
        let mut components = Vec::with_capacity(means.len());
        for (mean, cov) in means.iter().zip(&covs) {
            check_len("GmmPrior::new(cov rows)", mean.len(), cov.rows())?;
            cov.cholesky()?;
            let eig = SymmetricEigen::new(cov)?;
            components.push(Component {
                mean: mean.as_slice().to_vec(),
                eigvals: eig.values,
                basis: Some(eig.vectors),
            });
        }
        Self::assemble(weights, components, means.first().map(Signal::shape))
    }

    /// Mixture with axis-aligned covariances `diag(variances[k])`.
    pub fn diagonal(
        weights: Vec<f64>,
        means: Vec<Signal>,
        variances: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_len(
            "GmmPrior::diagonal(variances)",
            means.len(),
            variances.len(),
        )?;
        let mut components = Vec::with_capacity(means.len());
        for (mean, var) in means.iter().zip(variances) {
            check_len("GmmPrior::diagonal(variance len)", mean.len(), var.len())?;
            if let Some(v) = var.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
                return Err(Error::NotPositiveDefinite {
                    pivot: 0,
                    value: *v,
                });
            }
            components.push(Component {
                mean: mean.as_slice().to_vec(),
                eigvals: var,
                basis: None,
            });
        }
        Self::assemble(weights, components, means.first().map(Signal::shape))
    }

    fn assemble(
        weights: Vec<f64>,
        components: Vec<Component>,
        shape: Option<(usize, usize)>,
    ) -> Result<Self> {
        check_len("GmmPrior(weights)", components.len(), weights.len())?;
        let Some((height, width)) = shape else {
            return Err(Error::Contract(
                "mixture needs at least one component".into(),
            ));
        };
        let dim = height * width;
        for c in &components {
            check_len("GmmPrior(component dim)", dim, c.dim())?;
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Contract(
                "mixture weights must be finite and >= 0".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            weights,
            log_weights,
            components,
            height,
            width,
        })
    }

    pub fn dim(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> Signal {
        Signal::new(self.components[k].mean.clone(), self.height, self.width).expect("shape")
    }

    pub fn covariance(&self, k: usize) -> DenseMatrix {
        self.components[k].covariance()
    }

    /// Mixture mean `Σ π_k μ_k`.
    pub fn overall_mean(&self) -> Signal {
        let mut out = Signal::zeros(self.height, self.width);
        for (w, c) in self.weights.iter().zip(&self.components) {
            for (o, m) in out.as_mut_slice().iter_mut().zip(&c.mean) {
                *o += w * m;
            }
        }
        out
    }

    /// View of the mixture after diffusing to noise level `alpha_bar`.
    pub fn diffused(&self, alpha_bar: f64) -> DiffusedGmm<'_> {
        DiffusedGmm {
            prior: self,
            alpha_bar,
        }
    }

    pub fn at_step(&self, sched: &NoiseSchedule, t: usize) -> Result<DiffusedGmm<'_>> {
        Ok(self.diffused(sched.alpha_bar(t)?))
    }

    /// `log p(x₀)`
    pub fn log_density(&self, x: &Signal) -> Result<f64> {
        self.diffused(1.0).log_density(x)
    }

    fn signal(&self, data: Vec<f64>) -> Signal {
        Signal::new(data, self.height, self.width).expect("prior shape")
    }
}

/// Per-component terms of a diffused mixture evaluated at one point.
struct ComponentTerms {
    /// `log π_k + log N(x; √ᾱ μ_k, C_k)`
    log_joint: f64,
    /// Diffused spectrum `ᾱ λ + (1−ᾱ)`.
    spectrum: Vec<f64>,
    /// `C_k⁻¹ (x − √ᾱ μ_k)` in the eigenbasis.
    whitened: Vec<f64>,
}

/// The mixture `p(x_t)` at a fixed noise level.
#[derive(Debug, Clone, Copy)]
pub struct DiffusedGmm<'a> {
    prior: &'a GmmPrior,
    alpha_bar: f64,
}

impl<'a> DiffusedGmm<'a> {
    pub fn alpha_bar(&self) -> f64 {
        self.alpha_bar
    }

    fn terms(&self, x: &[f64]) -> Vec<ComponentTerms> {
        let a = self.alpha_bar.sqrt();
        let b2 = 1.0 - self.alpha_bar;
        let d = x.len() as f64;
        self.prior
            .components
            .iter()
            .zip(&self.prior.log_weights)
            .map(|(comp, lw)| {
                let centered: Vec<f64> =
                    x.iter().zip(&comp.mean).map(|(xi, m)| xi - a * m).collect();
                let z = comp.to_eig(&centered);
                let spectrum: Vec<f64> = comp
                    .eigvals
                    .iter()
                    .map(|l| self.alpha_bar * l + b2)
                    .collect();
                let mut quad = 0.0;
                let mut log_det = 0.0;
                let whitened = z
                    .iter()
                    .zip(&spectrum)
                    .map(|(zi, ci)| {
                        quad += zi * zi / ci;
                        log_det += ci.ln();
                        zi / ci
                    })
                    .collect();
                ComponentTerms {
                    log_joint: lw - 0.5 * (quad + log_det + d * LN_2PI),
                    spectrum,
                    whitened,
                }
            })
            .collect()
    }

    fn responsibilities(terms: &[ComponentTerms]) -> (f64, Vec<f64>) {
        let logs: Vec<f64> = terms.iter().map(|t| t.log_joint).collect();
        let lse = log_sum_exp(&logs);
        let resp = logs
            .iter()
            .map(|l| {
                let lr = l - lse;
                if lr < LOG_RESP_FLOOR {
                    0.0
                } else {
                    lr.exp()
                }
            })
            .collect();
        (lse, resp)
    }

    /// `log p(x_t)`
    pub fn log_density(&self, x: &Signal) -> Result<f64> {
        check_len("DiffusedGmm::log_density", self.prior.dim(), x.len())?;
        let terms = self.terms(x.as_slice());
        Ok(Self::responsibilities(&terms).0)
    }

    /// Component posterior probabilities `P(k | x_t)`.
    pub fn component_responsibilities(&self, x: &Signal) -> Result<Vec<f64>> {
        check_len(
            "DiffusedGmm::component_responsibilities",
            self.prior.dim(),
            x.len(),
        )?;
        Ok(Self::responsibilities(&self.terms(x.as_slice())).1)
    }

    fn component_score(&self, k: usize, term: &ComponentTerms) -> Vec<f64> {
        self.prior.components[k]
            .from_eig(&term.whitened)
            .into_iter()
            .map(|v| -v)
            .collect()
    }

    /// `∇ log p(x_t)`
    pub fn score(&self, x: &Signal) -> Result<Signal> {
        check_len("DiffusedGmm::score", self.prior.dim(), x.len())?;
        let terms = self.terms(x.as_slice());
        let (_, resp) = Self::responsibilities(&terms);
        let mut out = vec![0.0; x.len()];
        for (k, (term, r)) in terms.iter().zip(&resp).enumerate() {
            if *r == 0.0 {
                continue;
            }
            for (o, u) in out.iter_mut().zip(self.component_score(k, term)) {
                *o += r * u;
            }
        }
        Ok(self.prior.signal(out))
    }

    /// Hessian-vector product `∇² log p(x_t) · v`.
    ///
    /// `H = Σ_k r_k (−C_k⁻¹ + u_k u_kᵀ) − ū ūᵀ`, with `u_k` the component
    /// scores and `ū = Σ r_k u_k`.
    pub fn hessian_vec(&self, x: &Signal, v: &Signal) -> Result<Signal> {
        check_len("DiffusedGmm::hessian_vec(x)", self.prior.dim(), x.len())?;
        check_len("DiffusedGmm::hessian_vec(v)", self.prior.dim(), v.len())?;
        let terms = self.terms(x.as_slice());
        let (_, resp) = Self::responsibilities(&terms);
        let n = x.len();
        let mut out = vec![0.0; n];
        let mut mean_score = vec![0.0; n];
        for (k, (term, r)) in terms.iter().zip(&resp).enumerate() {
            if *r == 0.0 {
                continue;
            }
            let comp = &self.prior.components[k];
            let u = self.component_score(k, term);
            let uv = dot_slices(&u, v.as_slice());
            let cinv_v = comp.from_eig(
                &comp
                    .to_eig(v.as_slice())
                    .iter()
                    .zip(&term.spectrum)
                    .map(|(vi, ci)| vi / ci)
                    .collect::<Vec<_>>(),
            );
            for i in 0..n {
                out[i] += r * (u[i] * uv - cinv_v[i]);
                mean_score[i] += r * u[i];
            }
        }
        let sv = dot_slices(&mean_score, v.as_slice());
        for (o, s) in out.iter_mut().zip(&mean_score) {
            *o -= s * sv;
        }
        Ok(self.prior.signal(out))
    }

    /// Per-component conditional means `E_k[x₀ | x_t] = μ_k + √ᾱ Σ_k C_k⁻¹ (x_t − √ᾱ μ_k)`.
    fn conditional_means(&self, terms: &[ComponentTerms]) -> Vec<Vec<f64>> {
        let a = self.alpha_bar.sqrt();
        terms
            .iter()
            .zip(&self.prior.components)
            .map(|(term, comp)| {
                let shift: Vec<f64> = term
                    .whitened
                    .iter()
                    .zip(&comp.eigvals)
                    .map(|(w, l)| a * l * w)
                    .collect();
                comp.mean
                    .iter()
                    .zip(comp.from_eig(&shift))
                    .map(|(m, s)| m + s)
                    .collect()
            })
            .collect()
    }

    /// `E[x₀ | x_t]` from component responsibilities and conditional means.
    pub fn posterior_mean(&self, x: &Signal) -> Result<Signal> {
        check_len("DiffusedGmm::posterior_mean", self.prior.dim(), x.len())?;
        let terms = self.terms(x.as_slice());
        let (_, resp) = Self::responsibilities(&terms);
        let means = self.conditional_means(&terms);
        let mut out = vec![0.0; x.len()];
        for (r, m) in resp.iter().zip(&means) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += r * v;
            }
        }
        Ok(self.prior.signal(out))
    }

    /// `Var_k(x₀ | x_t) = Σ_k − ᾱ Σ_k C_k⁻¹ Σ_k`, which in the eigenbasis is
    /// `λ (1−ᾱ) / (ᾱ λ + 1 − ᾱ)`.
    pub fn conditional_covariance(&self, k: usize) -> DenseMatrix {
        let comp = &self.prior.components[k];
        comp.dense_from_spectrum(&self.conditional_spectrum(k))
    }

    fn conditional_spectrum(&self, k: usize) -> Vec<f64> {
        let b2 = 1.0 - self.alpha_bar;
        self.prior.components[k]
            .eigvals
            .iter()
            .map(|l| l * b2 / (self.alpha_bar * l + b2))
            .collect()
    }

    /// `tr(Var_k(x₀ | x_t)) / dim`
    pub fn mean_conditional_variance(&self, k: usize) -> f64 {
        let s = self.conditional_spectrum(k);
        s.iter().sum::<f64>() / s.len() as f64
    }

    /// The diffused mixture as an explicit full-covariance [`GmmPrior`].
    pub fn materialize(&self) -> Result<GmmPrior> {
        let a = self.alpha_bar.sqrt();
        let b2 = 1.0 - self.alpha_bar;
        let means = self
            .prior
            .components
            .iter()
            .map(|c| self.prior.signal(c.mean.iter().map(|m| a * m).collect()))
            .collect();
        let covs = self
            .prior
            .components
            .iter()
            .map(|c| c.covariance().scaled(self.alpha_bar).add_diagonal(b2))
            .collect();
        GmmPrior::new(self.prior.weights.clone(), means, covs)
    }

    /// Exact `∇_{x_t} log p(y | x_t)` and `log p(y | x_t)`.
    ///
    /// `p(y | x_t) = Σ_k P(k | x_t) N(y; A m_k(x_t), A V_k Aᵀ + σ² I)`. The
    /// gradient of each log term is `u_k − ū + D_k Aᵀ S_k⁻¹ (y − A m_k)` with
    /// `D_k = ∂m_k/∂x_t = √ᾱ Σ_k C_k⁻¹` (symmetric), mixed by the joint
    /// responsibilities given both `x_t` and `y`.
    pub fn likelihood_score(&self, lik: &DenseLikelihood<'_>, x: &Signal) -> Result<(Signal, f64)> {
        check_len("DiffusedGmm::likelihood_score", self.prior.dim(), x.len())?;
        let terms = self.terms(x.as_slice());
        let (lse_x, _) = Self::responsibilities(&terms);
        let means = self.conditional_means(&terms);
        let a = self.alpha_bar.sqrt();
        let n = x.len();
        let mut prior_score = vec![0.0; n];
        let mut per_comp = Vec::with_capacity(terms.len());
        let mut log_terms = Vec::with_capacity(terms.len());
        for (k, (term, m)) in terms.iter().zip(&means).enumerate() {
            let comp = &self.prior.components[k];
            let log_resp = term.log_joint - lse_x;
            let u = self.component_score(k, term);
            let spec = self.conditional_spectrum(k);
            let cov_y = lik.projected_covariance(comp, &spec)?;
            let factor = cov_y.cholesky().map_err(|e| {
                Error::Degenerate(format!(
                    "measurement covariance A V Aᵀ + σ²I is singular for component {k}: {e}"
                ))
            })?;
            let resid: Vec<f64> = lik
                .y
                .iter()
                .zip(lik.a.matvec(m)?)
                .map(|(yv, am)| yv - am)
                .collect();
            let white = factor.solve(&resid)?;
            let log_n = -0.5
                * (dot_slices(&resid, &white) + factor.log_det() + resid.len() as f64 * LN_2PI);
            let back = lik.a.matvec_transpose(&white)?;
            let d_back: Vec<f64> = {
                let e = comp.to_eig(&back);
                let scaled: Vec<f64> = e
                    .iter()
                    .zip(&comp.eigvals)
                    .zip(&term.spectrum)
                    .map(|((v, l), c)| a * l / c * v)
                    .collect();
                comp.from_eig(&scaled)
            };
            let r = if log_resp < LOG_RESP_FLOOR {
                0.0
            } else {
                log_resp.exp()
            };
            for (p, ui) in prior_score.iter_mut().zip(&u) {
                *p += r * ui;
            }
            log_terms.push(log_resp + log_n);
            per_comp.push((u, d_back));
        }
        let lse = log_sum_exp(&log_terms);
        if !lse.is_finite() {
            return Err(Error::Degenerate(
                "likelihood underflow at every component".into(),
            ));
        }
        let mut out = vec![0.0; n];
        for (lt, (u, d_back)) in log_terms.iter().zip(&per_comp) {
            let rho_log = lt - lse;
            if rho_log < LOG_RESP_FLOOR {
                continue;
            }
            let rho = rho_log.exp();
            for i in 0..n {
                out[i] += rho * (u[i] - prior_score[i] + d_back[i]);
            }
        }
        Ok((self.prior.signal(out), lse))
    }
}

/// Measurement model with an explicit dense `A`, needed by the exact
/// likelihood and posterior computations.
#[derive(Debug, Clone)]
pub struct DenseLikelihood<'y> {
    a: DenseMatrix,
    noise_var: f64,
    y: &'y [f64],
}

impl<'y> DenseLikelihood<'y> {
    pub fn new(model: &MeasurementModel, y: &'y Signal) -> Result<Self> {
        check_len("DenseLikelihood(y)", model.out_dim(), y.len())?;
        Ok(Self {
            a: model.operator.dense_materialize()?,
            noise_var: model.noise_var(),
            y: y.as_slice(),
        })
    }

    pub fn operator(&self) -> &DenseMatrix {
        &self.a
    }

    /// `A Q diag(spec) Qᵀ Aᵀ + σ² I`
    fn projected_covariance(&self, comp: &Component, spec: &[f64]) -> Result<DenseMatrix> {
        let m = self.a.rows();
        let aq = match &comp.basis {
            None => self.a.clone(),
            Some(q) => self.a.matmul(q)?,
        };
        let mut out = DenseMatrix::zeros(m, m);
        for r in 0..m {
            for c in r..m {
                let v: f64 = aq
                    .row(r)
                    .iter()
                    .zip(aq.row(c))
                    .zip(spec)
                    .map(|((x, y), s)| x * y * s)
                    .sum();
                out.set(r, c, v);
                out.set(c, r, v);
            }
        }
        Ok(out.add_diagonal(self.noise_var))
    }
}

/// `∇_{x_t} log p(x_t)` for the diffused prior at step `t`.
pub fn prior_score(
    prior: &GmmPrior,
    sched: &NoiseSchedule,
    x_t: &Signal,
    t: usize,
) -> Result<Signal> {
    prior.at_step(sched, t)?.score(x_t)
}

/// Exact `∇_{x_t} log p(y | x_t)`.
pub fn exact_likelihood_score(
    prior: &GmmPrior,
    sched: &NoiseSchedule,
    model: &MeasurementModel,
    y: &Signal,
    x_t: &Signal,
    t: usize,
) -> Result<Signal> {
    let lik = DenseLikelihood::new(model, y)?;
    Ok(prior.at_step(sched, t)?.likelihood_score(&lik, x_t)?.0)
}

/// Exact `∇_{x_t} log p(x_t | y)`: the sum of the exact prior and likelihood
/// scores.
pub fn exact_posterior_score(
    prior: &GmmPrior,
    sched: &NoiseSchedule,
    model: &MeasurementModel,
    y: &Signal,
    x_t: &Signal,
    t: usize,
) -> Result<Signal> {
    let g = prior_score(prior, sched, x_t, t)?;
    let l = exact_likelihood_score(prior, sched, model, y, x_t, t)?;
    g.add(&l)
}

/// Conjugate update of every component, reweighted by its evidence
/// `N(y; A μ_k, A Σ_k Aᵀ + σ² I)`.
pub fn exact_posterior(prior: &GmmPrior, model: &MeasurementModel, y: &Signal) -> Result<GmmPrior> {
    if !(model.noise_std > 0.0) {
        return Err(Error::Contract(
            "exact posterior needs noise_std > 0".into(),
        ));
    }
    let lik = DenseLikelihood::new(model, y)?;
    let a = &lik.a;
    let mut log_w = Vec::with_capacity(prior.num_components());
    let mut means = Vec::with_capacity(prior.num_components());
    let mut covs = Vec::with_capacity(prior.num_components());
    for (k, comp) in prior.components.iter().enumerate() {
        let sigma = comp.covariance();
        let evidence_cov = lik.projected_covariance(comp, &comp.eigvals)?;
        let factor = CholeskyFactor::new(&evidence_cov)?;
        let resid: Vec<f64> = y
            .as_slice()
            .iter()
            .zip(a.matvec(&comp.mean)?)
            .map(|(yv, am)| yv - am)
            .collect();
        let white = factor.solve(&resid)?;
        log_w.push(
            prior.log_weights[k]
                - 0.5
                    * (dot_slices(&resid, &white) + factor.log_det() + resid.len() as f64 * LN_2PI),
        );
        // gain K = Σ Aᵀ G⁻¹
        let sigma_at = sigma.matmul(&a.transpose())?;
        let gain = sigma_at.matmul(&factor.inverse()?)?;
        let mean: Vec<f64> = comp
            .mean
            .iter()
            .zip(gain.matvec(&resid)?)
            .map(|(m, s)| m + s)
            .collect();
        let reduction = gain.matmul(&sigma_at.transpose())?;
        let cov = sigma.add(&reduction.scaled(-1.0))?;
        let sym = cov.add(&cov.transpose())?.scaled(0.5);
        means.push(prior.signal(mean));
        covs.push(sym);
    }
    let lse = log_sum_exp(&log_w);
    let weights: Vec<f64> = log_w.iter().map(|l| (l - lse).exp()).collect();
    GmmPrior::new(weights, means, covs)
}

/// `n` i.i.d. draws from the mixture.
pub fn gmm_sample(prior: &GmmPrior, rng: &mut Rng, n: usize) -> Result<Vec<Signal>> {
    if n == 0 {
        return Err(Error::Contract("gmm_sample needs n >= 1".into()));
    }
    Ok((0..n).map(|_| sample_one(prior, rng)).collect())
}

fn sample_one(prior: &GmmPrior, rng: &mut Rng) -> Signal {
    let comp = &prior.components[rng.categorical(&prior.weights)];
    let w: Vec<f64> = comp
        .eigvals
        .iter()
        .map(|l| l.max(0.0).sqrt() * rng.normal())
        .collect();
    let offset = comp.from_eig(&w);
    prior.signal(comp.mean.iter().zip(offset).map(|(m, o)| m + o).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_linear_schedule, tweedie_denoise, DiffusionState};
    use crate::operators::LinearOperator;

    fn v(data: &[f64]) -> Signal {
        Signal::vector(data.to_vec())
    }

    fn random_prior(rng: &mut Rng, dim: usize, k: usize) -> GmmPrior {
        let mut w: Vec<f64> = (0..k).map(|_| 0.2 + rng.uniform()).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        let means = (0..k)
            .map(|_| Signal::vector(rng.normal_vec(dim).iter().map(|x| 2.0 * x).collect()))
            .collect();
        let covs = (0..k)
            .map(|_| {
                let mut b = DenseMatrix::zeros(dim, dim);
                for r in 0..dim {
                    for c in 0..dim {
                        b.set(r, c, 0.5 * rng.normal());
                    }
                }
                b.matmul(&b.transpose()).unwrap().add_diagonal(0.2)
            })
            .collect();
        GmmPrior::new(w, means, covs).unwrap()
    }

    fn fd_gradient(f: impl Fn(&Signal) -> f64, x: &Signal, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                let mut m = x.clone();
                p.as_mut_slice()[i] += h;
                m.as_mut_slice()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        num / den.max(1e-12)
    }

    #[test]
    fn standard_normal_prior_score_is_minus_x() {
        let prior = GmmPrior::new(
            vec![1.0],
            vec![v(&[0.0, 0.0])],
            vec![DenseMatrix::identity(2)],
        )
        .unwrap();
        let sched = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let x = v(&[0.7, -1.3]);
        for t in [1, 5, 10] {
            let s = prior_score(&prior, &sched, &x, t).unwrap();
            assert!(s.max_abs_diff(&x.scaled(-1.0)).unwrap() < 1e-14);
        }
    }

    #[test]
    fn symmetric_mixture_score_vanishes_at_origin() {
        let prior = GmmPrior::new(
            vec![0.5, 0.5],
            vec![v(&[-1.5]), v(&[1.5])],
            vec![DenseMatrix::identity(1).scaled(0.3); 2],
        )
        .unwrap();
        let sched = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let s = prior_score(&prior, &sched, &v(&[0.0]), 4).unwrap();
        assert_eq!(s.as_slice()[0], 0.0);
    }

    #[test]
    fn prior_score_matches_finite_difference() {
        let mut rng = Rng::new(10);
        let sched = make_linear_schedule(50, 1e-3, 0.2).unwrap();
        for _ in 0..50 {
            let prior = random_prior(&mut rng, 2, 3);
            let t = 1 + rng.below(50);
            let x = v(&rng
                .normal_vec(2)
                .iter()
                .map(|x| 2.0 * x)
                .collect::<Vec<_>>());
            let d = prior.at_step(&sched, t).unwrap();
            let fd = fd_gradient(|p| d.log_density(p).unwrap(), &x, 1e-5);
            let s = d.score(&x).unwrap();
            assert!(rel_err(s.as_slice(), &fd) < 1e-6);
        }
    }

    #[test]
    fn hessian_vec_matches_score_finite_difference() {
        let mut rng = Rng::new(12);
        let sched = make_linear_schedule(50, 1e-3, 0.2).unwrap();
        for _ in 0..20 {
            let prior = random_prior(&mut rng, 3, 2);
            let t = 1 + rng.below(50);
            let d = prior.at_step(&sched, t).unwrap();
            let x = v(&rng.normal_vec(3));
            let dir = v(&rng.normal_vec(3));
            let h = 1e-5;
            let plus = d.score(&x.add(&dir.scaled(h)).unwrap()).unwrap();
            let minus = d.score(&x.sub(&dir.scaled(h)).unwrap()).unwrap();
            let fd: Vec<f64> = plus
                .as_slice()
                .iter()
                .zip(minus.as_slice())
                .map(|(p, m)| (p - m) / (2.0 * h))
                .collect();
            let hv = d.hessian_vec(&x, &dir).unwrap();
            assert!(rel_err(hv.as_slice(), &fd) < 1e-6);
        }
    }

    #[test]
    fn tweedie_consistency() {
        let mut rng = Rng::new(13);
        let sched = make_linear_schedule(40, 1e-3, 0.2).unwrap();
        let prior = random_prior(&mut rng, 2, 3);
        for _ in 0..50 {
            let t = 1 + rng.below(40);
            let x = v(&rng.normal_vec(2));
            let d = prior.at_step(&sched, t).unwrap();
            let direct = d.posterior_mean(&x).unwrap();
            let via_score = tweedie_denoise(
                &sched,
                &DiffusionState { x_t: x.clone(), t },
                &d.score(&x).unwrap(),
            )
            .unwrap();
            assert!(rel_err(direct.as_slice(), via_score.as_slice()) < 1e-8);
        }
    }

    #[test]
    fn diffusion_reduces_to_prior_at_alpha_one() {
        let mut rng = Rng::new(14);
        let prior = random_prior(&mut rng, 2, 2);
        let same = prior.diffused(1.0).materialize().unwrap();
        for k in 0..2 {
            assert!(same.covariance(k).max_abs_diff(&prior.covariance(k)) < 1e-12);
            assert!(same.mean(k).max_abs_diff(&prior.mean(k)).unwrap() < 1e-15);
        }
    }

    #[test]
    fn diagonal_and_full_agree() {
        let means = vec![v(&[0.1, 0.5, -0.2]), v(&[1.0, -1.0, 0.0])];
        let vars = vec![vec![0.2, 0.5, 1.0], vec![0.3, 0.3, 0.7]];
        let diag = GmmPrior::diagonal(vec![0.4, 0.6], means.clone(), vars.clone()).unwrap();
        let full = GmmPrior::new(
            vec![0.4, 0.6],
            means,
            vars.iter().map(|d| DenseMatrix::diagonal(d)).collect(),
        )
        .unwrap();
        let x = v(&[0.3, 0.1, -0.4]);
        let dir = v(&[1.0, -2.0, 0.5]);
        for ab in [0.99, 0.5, 0.01] {
            let a = diag.diffused(ab);
            let b = full.diffused(ab);
            assert!(
                a.score(&x)
                    .unwrap()
                    .max_abs_diff(&b.score(&x).unwrap())
                    .unwrap()
                    < 1e-12
            );
            assert!(
                a.hessian_vec(&x, &dir)
                    .unwrap()
                    .max_abs_diff(&b.hessian_vec(&x, &dir).unwrap())
                    .unwrap()
                    < 1e-12
            );
        }
    }

    #[test]
    fn extreme_points_do_not_produce_nan() {
        let mut rng = Rng::new(15);
        let prior = random_prior(&mut rng, 2, 3);
        let sched = make_linear_schedule(10, 1e-3, 0.2).unwrap();
        let x = v(&[1e4, -3e4]);
        let s = prior_score(&prior, &sched, &x, 1).unwrap();
        assert!(s.is_finite());
    }

    #[test]
    fn weights_validated() {
        assert!(GmmPrior::new(
            vec![0.5, 0.6],
            vec![v(&[0.0]), v(&[1.0])],
            vec![DenseMatrix::identity(1); 2]
        )
        .is_err());
        assert!(GmmPrior::new(
            vec![1.0],
            vec![v(&[0.0])],
            vec![DenseMatrix::identity(1).scaled(-1.0)]
        )
        .is_err());
    }

    fn observe_first(sigma: f64) -> MeasurementModel {
        MeasurementModel::new(LinearOperator::mask(2, 1, vec![0]).unwrap(), sigma).unwrap()
    }

    #[test]
    fn uninformative_likelihood_vanishes() {
        let mut rng = Rng::new(16);
        let prior = random_prior(&mut rng, 2, 3);
        let sched = make_linear_schedule(20, 1e-3, 0.2).unwrap();
        let model = observe_first(1e6);
        let y = v(&[0.5]);
        let x = v(&[0.2, -0.4]);
        let l = exact_likelihood_score(&prior, &sched, &model, &y, &x, 7).unwrap();
        assert!(l.norm() < 1e-8);
        let post = exact_posterior_score(&prior, &sched, &model, &y, &x, 7).unwrap();
        let g = prior_score(&prior, &sched, &x, 7).unwrap();
        assert!(post.max_abs_diff(&g).unwrap() < 1e-6);
    }

    #[test]
    fn single_gaussian_likelihood_matches_conjugate_formula() {
        // x0 ~ N(mu, S), x_t = a x0 + b eps, y = A x0 + n:
        // y | x_t ~ N(A m(x_t), A V Aᵀ + σ²), m = mu + a S C⁻¹ (x_t − a mu),
        // grad = (a S C⁻¹)ᵀ Aᵀ (A V Aᵀ + σ²)⁻¹ (y − A m)
        let mu = [0.3, -0.7];
        let s = DenseMatrix::from_rows(&[vec![0.8, 0.3], vec![0.3, 0.5]]).unwrap();
        let prior = GmmPrior::new(vec![1.0], vec![v(&mu)], vec![s.clone()]).unwrap();
        let model =
            MeasurementModel::new(LinearOperator::mask(2, 1, vec![0]).unwrap(), 0.4).unwrap();
        let y = v(&[1.1]);
        let sched = make_linear_schedule(30, 1e-3, 0.2).unwrap();
        let x = v(&[0.5, 0.2]);
        for t in [1, 10, 30] {
            let ab = sched.alpha_bar(t).unwrap();
            let a = ab.sqrt();
            let c = s.scaled(ab).add_diagonal(1.0 - ab);
            let cinv = c.cholesky().unwrap().inverse().unwrap();
            let gain = s.matmul(&cinv).unwrap().scaled(a);
            let centered = [x.as_slice()[0] - a * mu[0], x.as_slice()[1] - a * mu[1]];
            let shift = gain.matvec(&centered).unwrap();
            let m0 = mu[0] + shift[0];
            let vmat = s.add(&gain.matmul(&s).unwrap().scaled(-a)).unwrap();
            let var_y = vmat.get(0, 0) + 0.16;
            let coeff = (1.1 - m0) / var_y;
            let expect = [gain.get(0, 0) * coeff, gain.get(0, 1) * coeff];
            let got = exact_likelihood_score(&prior, &sched, &model, &y, &x, t).unwrap();
            assert!(rel_err(got.as_slice(), &expect) < 1e-10, "t={t}");
        }
    }

    #[test]
    fn conjugate_posterior_example() {
        let prior =
            GmmPrior::new(vec![1.0], vec![v(&[0.0])], vec![DenseMatrix::identity(1)]).unwrap();
        let model = MeasurementModel::new(LinearOperator::identity(1), 1.0).unwrap();
        let post = exact_posterior(&prior, &model, &v(&[1.0])).unwrap();
        assert!((post.mean(0).as_slice()[0] - 0.5).abs() < 1e-15);
        assert!((post.covariance(0).get(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn symmetric_posterior_weights() {
        let prior = GmmPrior::new(
            vec![0.5, 0.5],
            vec![v(&[-2.0]), v(&[2.0])],
            vec![DenseMatrix::identity(1).scaled(0.5); 2],
        )
        .unwrap();
        let model = MeasurementModel::new(LinearOperator::identity(1), 0.3).unwrap();
        let post = exact_posterior(&prior, &model, &v(&[0.0])).unwrap();
        assert!((post.weights()[0] - 0.5).abs() < 1e-15);
        assert!((post.weights()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn posterior_requires_noise() {
        let prior =
            GmmPrior::new(vec![1.0], vec![v(&[0.0])], vec![DenseMatrix::identity(1)]).unwrap();
        let model = MeasurementModel::new(LinearOperator::identity(1), 0.0).unwrap();
        assert!(exact_posterior(&prior, &model, &v(&[1.0])).is_err());
    }

    #[test]
    fn noiseless_rank_deficient_likelihood_is_degenerate() {
        let prior = GmmPrior::new(
            vec![1.0],
            vec![v(&[0.0, 0.0])],
            vec![DenseMatrix::identity(2)],
        )
        .unwrap();
        let sched = make_linear_schedule(5, 1e-3, 0.2).unwrap();
        let model =
            MeasurementModel::new(LinearOperator::mask(2, 1, vec![0]).unwrap(), 0.0).unwrap();
        // a full-rank A with σ=0 is fine...
        assert!(
            exact_likelihood_score(&prior, &sched, &model, &v(&[0.1]), &v(&[0.0, 0.0]), 3).is_ok()
        );
        // ...but at alpha_bar -> 1 the conditional variance collapses and the
        // measurement covariance becomes singular
        let sharp = make_linear_schedule(2, 1e-300, 1e-300).unwrap();
        let err = exact_likelihood_score(&prior, &sharp, &model, &v(&[0.1]), &v(&[0.0, 0.0]), 1);
        assert!(matches!(err, Err(Error::Degenerate(_))));
    }

    #[test]
    fn sampling_tiny_covariance_hits_mean() {
        let prior = GmmPrior::new(
            vec![1.0],
            vec![v(&[1.0, -2.0])],
            vec![DenseMatrix::identity(2).scaled(1e-12)],
        )
        .unwrap();
        let xs = gmm_sample(&prior, &mut Rng::new(1), 10).unwrap();
        for x in xs {
            assert!(x.max_abs_diff(&v(&[1.0, -2.0])).unwrap() < 1e-4);
        }
    }

    #[test]
    fn component_frequencies_match_weights() {
        let w = [0.5, 0.3, 0.2];
        let prior = GmmPrior::new(
            w.to_vec(),
            vec![v(&[-100.0]), v(&[0.0]), v(&[100.0])],
            vec![DenseMatrix::identity(1); 3],
        )
        .unwrap();
        let n = 100_000;
        let xs = gmm_sample(&prior, &mut Rng::new(2), n).unwrap();
        let mut counts = [0usize; 3];
        for x in xs {
            let val = x.as_slice()[0];
            counts[if val < -50.0 {
                0
            } else if val < 50.0 {
                1
            } else {
                2
            }] += 1;
        }
        for (c, p) in counts.iter().zip(w) {
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sd, "{counts:?}");
        }
        let a = gmm_sample(&prior, &mut Rng::new(3), 5).unwrap();
        let b = gmm_sample(&prior, &mut Rng::new(3), 5).unwrap();
        assert_eq!(a, b);
        assert!(gmm_sample(&prior, &mut Rng::new(3), 0).is_err());
    }
}
