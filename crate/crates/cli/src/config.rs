//! TOML run configurations.
//!
//! Every file is parsed with unknown keys rejected. Relative paths are taken
//! relative to the config file and rewritten as absolute paths before the
//! resolved copy is written next to the run outputs.

use std::fs;
use std::path::{Path, PathBuf};

use ampzoo::encoder::EncoderConfig;
use ampzoo::model_zoo::DEFAULT_COND_POINTS;
use ampzoo::train::{EncoderTrainConfig, EnrollConfig, TcnArch, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

fn default_cond_points() -> usize {
    DEFAULT_COND_POINTS
}

fn one() -> usize {
    1
}

/// Where the captures and clean audio live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub models_dir: PathBuf,
    pub corpus_dir: PathBuf,
    #[serde(default = "default_cond_points")]
    pub cond_points: usize,
    /// Registry device ids to use, in order; all devices when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub devices: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub out_dir: PathBuf,
    pub clips_per_device: usize,
    pub clip_seconds: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    pub data: DataConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoundationConfig {
    pub out_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: TcnArch,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderRunConfig {
    pub out_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: EncoderTrainConfig,
}

/// Paired data for enrollment, rendered from a capture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnrollSource {
    pub corpus_dir: PathBuf,
    pub model_file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cond: Option<f32>,
    pub n_pairs: usize,
    pub clip_seconds: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnrollRunConfig {
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
    pub source: EnrollSource,
    #[serde(default)]
    pub enroll: EnrollConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
    pub clips_per_device: usize,
    pub clip_seconds: f64,
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
}

fn absolute(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

/// Rewrites relative paths against `base`.
pub trait Resolve {
    fn resolve(&mut self, base: &Path);
}

impl Resolve for DataConfig {
    fn resolve(&mut self, base: &Path) {
        absolute(base, &mut self.models_dir);
        absolute(base, &mut self.corpus_dir);
    }
}

impl Resolve for AugmentConfig {
    fn resolve(&mut self, base: &Path) {
        absolute(base, &mut self.out_dir);
        self.data.resolve(base);
    }
}

impl Resolve for FoundationConfig {
    fn resolve(&mut self, base: &Path) {
        absolute(base, &mut self.out_dir);
        self.data.resolve(base);
    }
}

impl Resolve for EncoderRunConfig {
    fn resolve(&mut self, base: &Path) {
        absolute(base, &mut self.out_dir);
        self.data.resolve(base);
    }
}

impl Resolve for EnrollRunConfig {
    fn resolve(&mut self, base: &Path) {
        absolute(base, &mut self.checkpoint);
        absolute(base, &mut self.out_dir);
        absolute(base, &mut self.source.corpus_dir);
        absolute(base, &mut self.source.model_file);
    }
}

impl Resolve for EvalConfig {
    fn resolve(&mut self, base: &Path) {
        absolute(base, &mut self.checkpoint);
        absolute(base, &mut self.out_dir);
        self.data.resolve(base);
    }
}

/// Parses `path` and resolves its relative paths.
pub fn load<C: DeserializeOwned + Resolve>(path: &Path) -> Result<C, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg: C = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
    let base = fs::canonicalize(&base).unwrap_or(base);
    cfg.resolve(&base);
    Ok(cfg)
}

/// Creates `out_dir` and writes the resolved configuration into it.
pub fn write_resolved<C: Serialize>(cfg: &C, out_dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let text = toml::to_string(cfg).map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))?;
    let path = out_dir.join(RESOLVED_CONFIG);
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}
