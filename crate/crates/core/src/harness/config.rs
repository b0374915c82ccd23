use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{make_linear_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::gmm::GmmPrior;
use crate::guidance::GuidanceMethod;
use crate::numerics::{DenseMatrix, Signal};
use crate::operators::MaskSpec;
use crate::saip::SaipConfig;
use crate::sampler::{toy, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Denoise,
    Deblur,
    InpaintRandom,
    InpaintBox,
    SyntheticGmm,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Denoise => "denoise",
            TaskKind::Deblur => "deblur",
            TaskKind::InpaintRandom => "inpaint_random",
            TaskKind::InpaintBox => "inpaint_box",
            TaskKind::SyntheticGmm => "synthetic_gmm",
        }
    }

    pub fn is_image(self) -> bool {
        self != TaskKind::SyntheticGmm
    }

    pub const ALL: [TaskKind; 5] = [
        TaskKind::Denoise,
        TaskKind::Deblur,
        TaskKind::InpaintRandom,
        TaskKind::InpaintBox,
        TaskKind::SyntheticGmm,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// A full-covariance mixture written out in the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl GmmSpec {
    pub fn build(&self) -> Result<GmmPrior> {
        let means = self.means.iter().cloned().map(Signal::vector).collect();
        let covs = self
            .covariances
            .iter()
            .map(|rows| DenseMatrix::from_rows(rows))
            .collect::<Result<Vec<_>>>()?;
        GmmPrior::new(self.weights.clone(), means, covs)
    }
}

/// Task definition. Only the parameters relevant to `kind` may be set; the
/// rest take the defaults listed on each accessor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_rect: Option<BoxRect>,
    /// Number of piecewise-constant templates in the image prior.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_components: Option<usize>,
    /// Per-pixel standard deviation around each template.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gmm: Option<GmmSpec>,
    /// Coordinates observed by the synthetic task's mask.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observe: Option<Vec<usize>>,
    /// Seed for the synthetic task's ground truth and measurement noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurement_seed: Option<u64>,
}

pub const DEFAULT_IMAGE_SIDE: usize = 16;
pub const DEFAULT_PRIOR_COMPONENTS: usize = 4;
pub const DEFAULT_PRIOR_STD: f64 = 0.05;

impl TaskConfig {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            height: None,
            width: None,
            noise_std: None,
            kernel: None,
            missing_fraction: None,
            box_rect: None,
            prior_components: None,
            prior_std: None,
            gmm: None,
            observe: None,
            measurement_seed: None,
        }
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (
            self.height.unwrap_or(DEFAULT_IMAGE_SIDE),
            self.width.unwrap_or(DEFAULT_IMAGE_SIDE),
        )
    }

    /// 0.5 for denoising, 0.3 for the synthetic task, 0.05 otherwise.
    pub fn noise_std(&self) -> f64 {
        self.noise_std.unwrap_or(match self.kind {
            TaskKind::Denoise => 0.5,
            TaskKind::SyntheticGmm => toy::NOISE_STD,
            _ => 0.05,
        })
    }

    pub fn kernel(&self) -> usize {
        self.kernel.unwrap_or(9)
    }

    pub fn missing_fraction(&self) -> f64 {
        self.missing_fraction.unwrap_or(0.9)
    }

    /// Defaults to a centred square covering half of each side.
    pub fn mask_spec(&self) -> Option<MaskSpec> {
        let (h, w) = self.image_shape();
        match self.kind {
            TaskKind::InpaintRandom => Some(MaskSpec::Random {
                missing_fraction: self.missing_fraction(),
            }),
            TaskKind::InpaintBox => Some(match self.box_rect {
                Some(r) => MaskSpec::Box {
                    top: r.top,
                    left: r.left,
                    height: r.height,
                    width: r.width,
                },
                None => MaskSpec::centered_box(h, w, h.min(w) / 2),
            }),
            _ => None,
        }
    }

    pub fn prior_components(&self) -> usize {
        self.prior_components.unwrap_or(DEFAULT_PRIOR_COMPONENTS)
    }

    pub fn prior_std(&self) -> f64 {
        self.prior_std.unwrap_or(DEFAULT_PRIOR_STD)
    }

    pub fn observe(&self) -> Vec<usize> {
        self.observe.clone().unwrap_or_else(|| vec![0])
    }

    pub fn measurement_seed(&self) -> u64 {
        self.measurement_seed.unwrap_or(toy::MEASUREMENT_SEED)
    }

    /// The synthetic task's prior: the configured mixture or the canonical toy.
    pub fn synthetic_prior(&self) -> Result<GmmPrior> {
        match &self.gmm {
            Some(spec) => spec.build(),
            None => Ok(toy::prior()),
        }
    }

    fn validate(&self) -> Result<()> {
        let k = self.kind.name();
        let unused = |set: bool, field: &str| -> Result<()> {
            if set {
                Err(Error::Config(format!(
                    "task.{field} is not used by task `{k}`"
                )))
            } else {
                Ok(())
            }
        };
        let is_image = self.kind.is_image();
        unused(
            !is_image && (self.height.is_some() || self.width.is_some()),
            "height/width",
        )?;
        unused(
            self.kind != TaskKind::Deblur && self.kernel.is_some(),
            "kernel",
        )?;
        unused(
            self.kind != TaskKind::InpaintRandom && self.missing_fraction.is_some(),
            "missing_fraction",
        )?;
        unused(
            self.kind != TaskKind::InpaintBox && self.box_rect.is_some(),
            "box_rect",
        )?;
        unused(
            !is_image && self.prior_components.is_some(),
            "prior_components",
        )?;
        unused(!is_image && self.prior_std.is_some(), "prior_std")?;
        unused(is_image && self.gmm.is_some(), "gmm")?;
        unused(is_image && self.observe.is_some(), "observe")?;
        unused(
            is_image && self.measurement_seed.is_some(),
            "measurement_seed",
        )?;

        let noise = self.noise_std();
        if !(noise.is_finite() && noise >= 0.0) {
            return Err(Error::Config(format!(
                "task.noise_std must be finite and >= 0, got {noise}"
            )));
        }
        if is_image {
            let (h, w) = self.image_shape();
            if h == 0 || w == 0 {
                return Err(Error::Config(
                    "task.height and task.width must be positive".into(),
                ));
            }
            if self.kind == TaskKind::Deblur && (self.kernel().is_multiple_of(2) || self.kernel() > h.min(w))
            {
                return Err(Error::Config(format!(
                    "task.kernel must be odd and at most the image side, got {}",
                    self.kernel()
                )));
            }
            if !(0.0..=1.0).contains(&self.missing_fraction()) {
                return Err(Error::Config(
                    "task.missing_fraction must lie in [0, 1]".into(),
                ));
            }
            if let Some(r) = self.box_rect {
                if r.top + r.height > h || r.left + r.width > w {
                    return Err(Error::Config(format!(
                        "task.box_rect {r:?} exceeds the {h}x{w} image"
                    )));
                }
            }
            if self.prior_components() == 0 {
                return Err(Error::Config("task.prior_components must be >= 1".into()));
            }
            if !(self.prior_std() > 0.0 && self.prior_std().is_finite()) {
                return Err(Error::Config("task.prior_std must be positive".into()));
            }
        } else {
            let prior = self
                .synthetic_prior()
                .map_err(|e| Error::Config(format!("task.gmm: {e}")))?;
            let obs = self.observe();
            if obs.is_empty() || obs.iter().any(|&i| i >= prior.dim()) {
                return Err(Error::Config(format!(
                    "task.observe must list coordinates below {}",
                    prior.dim()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: usize,
    pub chains: usize,
    /// Linear β range; both unset selects the rescaled DDPM default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_end: Option<f64>,
    #[serde(default = "default_true")]
    pub parallel: bool,
    /// Exact-posterior draws used as the reference set for sliced Wasserstein.
    #[serde(default = "default_reference_samples")]
    pub reference_samples: usize,
}

fn default_true() -> bool {
    true
}

fn default_reference_samples() -> usize {
    2000
}

impl SamplerSection {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        match (self.beta_start, self.beta_end) {
            (None, None) => NoiseSchedule::ddpm_default(self.steps),
            (Some(a), Some(b)) => make_linear_schedule(self.steps, a, b),
            _ => Err(Error::Config(
                "sampler.beta_start and sampler.beta_end must be set together".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    /// PGM ground truth for image tasks; a seeded synthetic image otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Fill the wall-time column of metrics.csv. Off by default so reruns
    /// produce byte-identical files; timings always go to the manifest.
    #[serde(default)]
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub sampler: SamplerSection,
    pub guidance: GuidanceMethod,
    #[serde(default)]
    pub saip: SaipConfig,
    #[serde(default)]
    pub io: IoConfig,
}

impl RunConfig {
    /// A small ready-to-run config for `kind`.
    pub fn example(kind: TaskKind, guidance: GuidanceMethod) -> Self {
        Self {
            seed: 0,
            task: TaskConfig::new(kind),
            sampler: SamplerSection {
                steps: 100,
                chains: if kind.is_image() { 1 } else { 500 },
                beta_start: None,
                beta_end: None,
                parallel: true,
                reference_samples: 2000,
            },
            guidance,
            saip: SaipConfig::enabled(Default::default()),
            io: IoConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config, or the config echoed inside a run manifest when
    /// the path ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            super::RunManifest::config_from_json(&text)
        } else {
            Self::from_toml_str(&text)
        };
        parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.sampler.steps == 0 {
            return Err(Error::Config("sampler.steps must be >= 1".into()));
        }
        if self.sampler.chains == 0 {
            return Err(Error::Config("sampler.chains must be >= 1".into()));
        }
        if self.sampler.reference_samples == 0 {
            return Err(Error::Config(
                "sampler.reference_samples must be >= 1".into(),
            ));
        }
        self.sampler.schedule().map_err(ctx("sampler"))?;
        self.guidance.validate().map_err(ctx("guidance"))?;
        self.saip.validate().map_err(ctx("saip"))?;
        if self.guidance.kind == crate::guidance::GuidanceKind::Dps && self.task.noise_std() == 0.0
        {
            return Err(Error::Config(
                "guidance.kind = \"dps\" needs task.noise_std > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn sampler_config(&self, saip: SaipConfig) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            schedule: self.sampler.schedule()?,
            guidance: self.guidance.clone(),
            saip,
            chains: self.sampler.chains,
            seed: self.seed,
            parallel: self.sampler.parallel,
        })
    }
}

fn ctx(section: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Config(m) => Error::Config(m),
        other => Error::Config(format!("{section}: {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::GuidanceKind;

    const SAMPLE: &str = r#"
# box inpainting with an adaptive scale
seed = 3

[task]
kind = "inpaint_box"
height = 24
width = 20
box_rect = { top = 4, left = 4, height = 8, width = 8 }

[sampler]
steps = 50
chains = 2

[guidance]
kind = "pigdm"
scale_param = 1

[saip]
enabled = true
variant = "likelihood"
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let cfg = RunConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(cfg.task.image_shape(), (24, 20));
        assert_eq!(cfg.task.noise_std(), 0.05);
        assert_eq!(cfg.guidance.scale_param, 1.0);
        assert!(cfg.sampler.parallel);
        assert_eq!(cfg.saip.variant, crate::saip::SaipVariant::Likelihood);
    }

    #[test]
    fn serialisation_round_trip_is_idempotent() {
        let mut configs = vec![RunConfig::from_toml_str(SAMPLE).unwrap()];
        for kind in TaskKind::ALL {
            configs.push(RunConfig::example(
                kind,
                GuidanceMethod::new(GuidanceKind::Dmps, 0.7).unwrap(),
            ));
        }
        let mut custom = RunConfig::example(
            TaskKind::SyntheticGmm,
            GuidanceMethod::new(GuidanceKind::Exact, 1.0).unwrap(),
        );
        custom.task.gmm = Some(GmmSpec {
            weights: vec![0.4, 0.6],
            means: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            covariances: vec![vec![vec![1.0, 0.2], vec![0.2, 1.0]]; 2],
        });
        custom.saip.s_clamp = Some((0.5, 2.0));
        configs.push(custom);
        for cfg in configs {
            let once = cfg.to_toml_string().unwrap();
            let parsed = RunConfig::from_toml_str(&once).unwrap();
            assert_eq!(parsed, cfg);
            assert_eq!(parsed.to_toml_string().unwrap(), once);
        }
    }

    #[test]
    fn parse_errors_name_the_line_and_field() {
        let bad = SAMPLE.replace("steps = 50", "stepz = 50");
        let msg = RunConfig::from_toml_str(&bad).unwrap_err().to_string();
        assert!(msg.contains("stepz"), "{msg}");
        assert!(msg.contains("line"), "{msg}");
    }

    #[test]
    fn parameters_for_other_tasks_are_rejected() {
        let bad = SAMPLE.replace("width = 20", "width = 20\nkernel = 9");
        let msg = RunConfig::from_toml_str(&bad).unwrap_err().to_string();
        assert!(msg.contains("task.kernel"), "{msg}");
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        for (from, to) in [
            ("chains = 2", "chains = 0"),
            ("kind = \"pigdm\"", "kind = \"warp\""),
            ("top = 4,", "top = 20,"),
            (
                "variant = \"likelihood\"",
                "variant = \"likelihood\"\ns_clamp = [1.5, 2.0]",
            ),
        ] {
            let err = RunConfig::from_toml_str(&SAMPLE.replace(from, to)).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{from} -> {to}: {err}");
        }
    }
}
