//! Run configuration shared by all subcommands.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use hsid::toy::ToyConfig;
use hsid::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateSection {
    /// Explicit-noise pairs; defaults to the toy calibration manifest.
    pub manifest: Option<PathBuf>,
    /// Exposure ratio the calibration pairs were captured at.
    pub reference_ratio: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub manifest: Option<PathBuf>,
    /// Noise model JSON; defaults to the calibrated one in the output dir.
    pub noise_model: Option<PathBuf>,
    pub precision: Precision,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiseSection {
    pub checkpoint: Option<PathBuf>,
    /// Manifest whose noisy cubes are denoised.
    pub manifest: Option<PathBuf>,
    /// Accept checkpoints from stages other than the final one.
    pub allow_any_stage: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub allow_any_stage: bool,
    /// Scene drawn in the error map and spectral plot; first scene when unset.
    pub plot_scene: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub toy: ToyConfig,
    pub calibrate: CalibrateSection,
    pub train: TrainSection,
    pub denoise: DenoiseSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            output_dir: PathBuf::from("hsid_out"),
            toy: ToyConfig::default(),
            calibrate: CalibrateSection::default(),
            train: TrainSection::default(),
            denoise: DenoiseSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Every path a command may touch, resolved to absolute form.
#[derive(Clone, Debug)]
pub struct Paths {
    pub out: PathBuf,
    pub data: PathBuf,
    pub train_manifest: PathBuf,
    pub calibration_manifest: PathBuf,
    pub noise_model: PathBuf,
    pub checkpoints: PathBuf,
    pub logs: PathBuf,
    pub denoise_checkpoint: PathBuf,
    pub denoise_manifest: PathBuf,
    pub denoised: PathBuf,
    pub eval_checkpoint: PathBuf,
    pub eval_manifest: PathBuf,
    pub eval_dir: PathBuf,
}

impl Paths {
    pub fn checkpoint(&self, stage: u8) -> PathBuf {
        self.checkpoints.join(format!("stage{stage}.hsck"))
    }
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Reads `path` (or defaults) and applies the seed override.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<(Self, PathBuf), CliError> {
        let cwd = env::current_dir().map_err(|e| CliError::other(format!("cannot read working directory: {e}")))?;
        let (mut cfg, base) = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::config(format!("cannot read {}: {e}", p.display())))?;
                let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
                let dir = absolute(&cwd, p.parent().unwrap_or(Path::new("")));
                (cfg, dir)
            }
            None => (RunConfig::default(), cwd),
        };
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", cfg.schema_version)));
        }
        if let Some(s) = seed {
            cfg.toy.seed = s;
            cfg.train.config.seed = s;
        }
        cfg.toy.validate().map_err(CliError::from_core_config)?;
        cfg.train.config.validate().map_err(CliError::from_core_config)?;
        Ok((cfg, base))
    }

    /// Resolves all paths against the config directory; `HSID_OUT` replaces the output dir.
    pub fn paths(&self, base: &Path) -> Paths {
        let out = match env::var_os("HSID_OUT") {
            Some(o) if !o.is_empty() => absolute(base, Path::new(&o)),
            _ => absolute(base, &self.output_dir),
        };
        let data = out.join("data");
        let pick = |p: &Option<PathBuf>, default: PathBuf| p.as_deref().map_or(default, |p| absolute(base, p));
        let train_manifest = pick(&self.train.manifest, data.join("train.json"));
        let test_manifest = data.join("test.json");
        let checkpoints = out.join("checkpoints");
        let final_ckpt = checkpoints.join("stage3.hsck");
        Paths {
            calibration_manifest: pick(&self.calibrate.manifest, data.join("calibration.json")),
            noise_model: pick(&self.train.noise_model, out.join("noise_params.json")),
            logs: out.join("logs"),
            denoise_checkpoint: pick(&self.denoise.checkpoint, final_ckpt.clone()),
            denoise_manifest: pick(&self.denoise.manifest, test_manifest.clone()),
            denoised: out.join("denoised"),
            eval_checkpoint: pick(&self.eval.checkpoint, final_ckpt),
            eval_manifest: pick(&self.eval.manifest, test_manifest.clone()),
            eval_dir: out.join("eval"),
            train_manifest,
            checkpoints,
            data,
            out,
        }
    }
}
