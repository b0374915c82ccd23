//! Config-driven experiment runner behind the `saip-lab` binary.
//!
//! Every command returns a summary value; the binary only maps it to text and
//! an exit code (0 success, 1 runtime failure, 2 usage or config error).

mod config;
pub mod pgm;
mod run;
mod sweep;
mod trace_plot;
mod verify;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use config::{
    BoxRect, GmmSpec, IoConfig, RunConfig, SamplerSection, TaskConfig, TaskKind,
    DEFAULT_IMAGE_SIDE, DEFAULT_PRIOR_COMPONENTS, DEFAULT_PRIOR_STD,
};
pub use run::{
    build_task, cmd_run, piecewise_constant_image, RunSummary, TaskInstance, VariantFailure,
};
pub use sweep::{cmd_sweep, SweepSummary};
pub use trace_plot::{cmd_trace_plot, decile_summary, sparkline, DecileSummary, TracePlotSummary};
pub use verify::{cmd_verify, CheckResult, VerifyOptions, VerifyReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Config and input-format problems are usage errors; everything else is a
/// runtime failure.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

pub const METRICS_COLUMNS: [&str; 12] = [
    "run_id",
    "task",
    "method",
    "saip_enabled",
    "saip_variant",
    "omega",
    "seed",
    "psnr_db",
    "ssim",
    "sw_distance",
    "wall_time_s",
    "extra_memory_bytes",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub task: String,
    pub method: String,
    pub saip_enabled: bool,
    pub saip_variant: String,
    pub omega: f64,
    pub seed: u64,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub sw_distance: Option<f64>,
    pub wall_time_s: Option<f64>,
    pub extra_memory_bytes: usize,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = METRICS_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.run_id,
            r.task,
            r.method,
            r.saip_enabled,
            r.saip_variant,
            r.omega,
            r.seed,
            opt(r.psnr_db),
            opt(r.ssim),
            opt(r.sw_distance),
            opt(r.wall_time_s),
            r.extra_memory_bytes
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub variant: String,
    pub wall_time_s: f64,
    pub extra_memory_bytes: usize,
}

/// Written last, next to the outputs it lists. The `config` field can be fed
/// back to `run` to reproduce the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub build: String,
    pub command: String,
    pub config: RunConfig,
    pub metrics: Vec<MetricsRow>,
    pub timings: Vec<Timing>,
    pub failures: Vec<String>,
    pub files: Vec<FileEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn new(command: &str, config: RunConfig) -> Self {
        Self {
            tool: "saip-lab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            build: option_env!("SAIP_LAB_BUILD")
                .unwrap_or("unversioned")
                .into(),
            command: command.into(),
            config,
            metrics: Vec::new(),
            timings: Vec::new(),
            failures: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn config_from_json(text: &str) -> Result<RunConfig> {
        let m: RunManifest =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        m.config.validate()?;
        Ok(m.config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

/// Tracks the files a command writes so the manifest can list them.
#[derive(Debug)]
pub(crate) struct OutputDir {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl OutputDir {
    pub(crate) fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)
            .map_err(|e| Error::Config(format!("output directory {}: {e}", root.display())))?;
        let probe = root.join(".saip-lab-write-probe");
        std::fs::write(&probe, b"")
            .and_then(|_| std::fs::remove_file(&probe))
            .map_err(|e| {
                Error::Config(format!(
                    "output directory {} is not writable: {e}",
                    root.display()
                ))
            })?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub(crate) fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub(crate) fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(self.path(name), bytes)?;
        self.files.push(FileEntry {
            path: name.into(),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub(crate) fn finish(self, mut manifest: RunManifest) -> Result<RunManifest> {
        manifest.files = self.files;
        let text =
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(self.root.join(MANIFEST_FILE), text)?;
        Ok(manifest)
    }
}
