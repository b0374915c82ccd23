//! Closed-form adaptive prior-score scale.
//!
//! A baseline solver moves along `g + ω ℓ`, where `g = ∇ log p(x_t)` and `ℓ` is
//! its estimate of `∇ log p(y | x_t)`. The adaptive version moves along
//!
//! ```text
//! [1 + (s − 1)(1 − ω)] g + ω ℓ   ==   [s(1 − ω) + ω] g + ω ℓ
//! ```
//!
//! so `s = 1` recovers the baseline exactly. `s` minimises the surrogate
//! `‖ℓ − s g‖²`, i.e. it is the coefficient of the projection onto `g`. Two
//! numerators are offered: the estimated posterior score `g + ω ℓ` (the
//! default) and the bare likelihood score `ℓ`, which is the exact stationary
//! point of the surrogate. They are related by `s_post = 1 + ω · s_lik`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numerics::{dot, Signal};

/// Below this `‖g‖²` the scale falls back to 1.
pub const MIN_PRIOR_NORM_SQ: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaipVariant {
    /// `s = ⟨g + ω ℓ, g⟩ / ‖g‖²`
    #[default]
    Posterior,
    /// `s = ⟨ℓ, g⟩ / ‖g‖²`
    Likelihood,
}

impl SaipVariant {
    pub fn name(self) -> &'static str {
        match self {
            SaipVariant::Posterior => "posterior",
            SaipVariant::Likelihood => "likelihood",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaipConfig {
    pub enabled: bool,
    /// Guidance strength. `None` inherits the baseline's per-step scale, which
    /// is what makes `s = 1` reproduce the baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(default)]
    pub variant: SaipVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_clamp: Option<(f64, f64)>,
}

impl Default for SaipConfig {
    fn default() -> Self {
        Self::disabled()
    }
}

impl SaipConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            omega: None,
            variant: SaipVariant::Posterior,
            s_clamp: None,
        }
    }

    pub fn enabled(variant: SaipVariant) -> Self {
        Self {
            enabled: true,
            variant,
            ..Self::disabled()
        }
    }

    /// Pins `s` to 1 while leaving SAIP nominally on.
    pub fn forced_unit() -> Self {
        Self {
            s_clamp: Some((1.0, 1.0)),
            ..Self::enabled(SaipVariant::Posterior)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self.omega {
            if !w.is_finite() {
                return Err(Error::Contract(format!("omega must be finite, got {w}")));
            }
        }
        if let Some((lo, hi)) = self.s_clamp {
            if !(lo <= 1.0 && 1.0 <= hi) {
                return Err(Error::Contract(format!(
                    "s_clamp ({lo}, {hi}) must contain 1"
                )));
            }
        }
        Ok(())
    }

    pub fn resolve_omega(&self, baseline_scale: f64) -> f64 {
        self.omega.unwrap_or(baseline_scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleEstimate {
    pub s: f64,
    /// `‖g‖²` was too small and `s` fell back to 1.
    pub degenerate: bool,
}

/// The adaptive scale `s`, clamped to `cfg.s_clamp` when set.
pub fn compute_scale(
    cfg: &SaipConfig,
    omega: f64,
    prior_score: &Signal,
    likelihood_score: &Signal,
) -> Result<ScaleEstimate> {
    check_len("compute_scale", prior_score.len(), likelihood_score.len())?;
    let norm_sq = prior_score.norm_sq();
    if norm_sq < MIN_PRIOR_NORM_SQ {
        return Ok(ScaleEstimate {
            s: 1.0,
            degenerate: true,
        });
    }
    let g_dot_l = dot(prior_score, likelihood_score)?;
    let numerator = match cfg.variant {
        SaipVariant::Likelihood => g_dot_l,
        SaipVariant::Posterior => norm_sq + omega * g_dot_l,
    };
    let mut s = numerator / norm_sq;
    if let Some((lo, hi)) = cfg.s_clamp {
        s = s.clamp(lo, hi);
    }
    Ok(ScaleEstimate {
        s,
        degenerate: false,
    })
}

/// `[1 + (s − 1)(1 − ω)] g + ω ℓ`; exactly `g + ω ℓ` when disabled or `s == 1`.
pub fn combine_scores(
    cfg: &SaipConfig,
    omega: f64,
    prior_score: &Signal,
    likelihood_score: &Signal,
    s: f64,
) -> Result<Signal> {
    check_len("combine_scores", prior_score.len(), likelihood_score.len())?;
    if !cfg.enabled || s == 1.0 {
        return baseline_combination(omega, prior_score, likelihood_score);
    }
    let factor = 1.0 + (s - 1.0) * (1.0 - omega);
    prior_score.with_data(
        prior_score
            .as_slice()
            .iter()
            .zip(likelihood_score.as_slice())
            .map(|(g, l)| factor * g + omega * l)
            .collect(),
    )
}

/// `g + ω ℓ`
pub fn baseline_combination(
    omega: f64,
    prior_score: &Signal,
    likelihood_score: &Signal,
) -> Result<Signal> {
    check_len(
        "baseline_combination",
        prior_score.len(),
        likelihood_score.len(),
    )?;
    prior_score.with_data(
        prior_score
            .as_slice()
            .iter()
            .zip(likelihood_score.as_slice())
            .map(|(g, l)| g + omega * l)
            .collect(),
    )
}

/// `‖ℓ − s g‖²`
pub fn upper_bound_loss(s: f64, prior_score: &Signal, likelihood_score: &Signal) -> Result<f64> {
    check_len(
        "upper_bound_loss",
        prior_score.len(),
        likelihood_score.len(),
    )?;
    Ok(prior_score
        .as_slice()
        .iter()
        .zip(likelihood_score.as_slice())
        .map(|(g, l)| (l - s * g).powi(2))
        .sum())
}

/// One reverse step's worth of scale diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaipStepRecord {
    pub t: usize,
    pub s: f64,
    pub omega: f64,
    pub prior_norm_sq: f64,
    pub dot_prior_likelihood: f64,
    /// `⟨g, g + ω ℓ⟩`
    pub dot_prior_posterior: f64,
    /// `|(s − 1)(1 − ω)| · ‖g‖`
    pub offset_norm: f64,
    pub degenerate: bool,
}

/// Runs one SAIP step: picks `ω`, computes `s` (or 1 when disabled), combines
/// the scores and reports the diagnostics.
pub fn saip_step(
    cfg: &SaipConfig,
    t: usize,
    baseline_scale: f64,
    prior_score: &Signal,
    likelihood_score: &Signal,
) -> Result<(Signal, SaipStepRecord)> {
    let omega = cfg.resolve_omega(baseline_scale);
    let estimate = if cfg.enabled {
        compute_scale(cfg, omega, prior_score, likelihood_score)?
    } else {
        ScaleEstimate {
            s: 1.0,
            degenerate: false,
        }
    };
    let combined = combine_scores(cfg, omega, prior_score, likelihood_score, estimate.s)?;
    let prior_norm_sq = prior_score.norm_sq();
    let g_dot_l = dot(prior_score, likelihood_score)?;
    let record = SaipStepRecord {
        t,
        s: estimate.s,
        omega,
        prior_norm_sq,
        dot_prior_likelihood: g_dot_l,
        dot_prior_posterior: prior_norm_sq + omega * g_dot_l,
        offset_norm: ((estimate.s - 1.0) * (1.0 - omega)).abs() * prior_norm_sq.sqrt(),
        degenerate: estimate.degenerate,
    };
    Ok((combined, record))
}

pub const TRACE_COLUMNS: [&str; 7] = [
    "t",
    "s",
    "omega",
    "prior_norm_sq",
    "dot_prior_likelihood",
    "dot_prior_posterior",
    "offset_norm",
];

/// Per-chain sequence of step records, in sampling order (`t = T` first).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SaipTrace {
    pub records: Vec<SaipStepRecord>,
}

impl SaipTrace {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            records: Vec::with_capacity(n),
        }
    }

    pub fn record_step(&mut self, record: SaipStepRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn scales(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.s).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", TRACE_COLUMNS.join(","))?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.t,
                r.s,
                r.omega,
                r.prior_norm_sq,
                r.dot_prior_likelihood,
                r.dot_prior_posterior,
                r.offset_norm
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii")
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Parse("trace CSV is empty".into()))?;
        let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
        if cols != TRACE_COLUMNS {
            return Err(Error::Parse(format!(
                "trace CSV header must be `{}`, got `{}`",
                TRACE_COLUMNS.join(","),
                header.trim()
            )));
        }
        let mut trace = SaipTrace::default();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 2;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != TRACE_COLUMNS.len() {
                return Err(Error::Parse(format!(
                    "line {lineno}: expected {} fields, got {}",
                    TRACE_COLUMNS.len(),
                    fields.len()
                )));
            }
            let num = |j: usize| -> Result<f64> {
                fields[j].parse::<f64>().map_err(|e| {
                    Error::Parse(format!("line {lineno}, column {}: {e}", TRACE_COLUMNS[j]))
                })
            };
            let t = fields[0]
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("line {lineno}, column t: {e}")))?;
            trace.record_step(SaipStepRecord {
                t,
                s: num(1)?,
                omega: num(2)?,
                prior_norm_sq: num(3)?,
                dot_prior_likelihood: num(4)?,
                dot_prior_posterior: num(5)?,
                offset_norm: num(6)?,
                degenerate: false,
            });
        }
        Ok(trace)
    }
}
