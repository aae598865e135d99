//! File-backed settings. The config file is flat TOML whose keys mirror the
//! CLI flags one to one; a flag given on the command line always wins over
//! the file, and anything left unset falls back to the built-in default.
//! Keys that a given subcommand does not use are simply ignored by it.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    // synthetic data
    pub name: Option<String>,
    pub nodes: Option<usize>,
    pub steps: Option<usize>,
    pub clusters: Option<usize>,
    pub noise_std: Option<f64>,
    pub seed: Option<u64>,

    // model
    pub variant: Option<String>,
    pub input_len: Option<usize>,
    pub output_len: Option<usize>,
    pub feature_dim: Option<usize>,
    pub adaptive_dim: Option<usize>,
    pub heads: Option<usize>,
    pub layers: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub dropout: Option<f64>,
    pub scale_mode: Option<String>,

    // training and evaluation
    pub lr0: Option<f64>,
    pub decay_milestones: Option<Vec<usize>>,
    pub decay_factor: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub null_value: Option<f64>,
    pub mape_epsilon: Option<f64>,
    pub target_train_mae: Option<f64>,
    pub eval_batch_size: Option<usize>,
    pub threads: Option<usize>,
    pub split: Option<String>,
    pub horizons: Option<String>,

    // analysis
    pub variants: Option<String>,
    pub n_perms: Option<usize>,
    pub which: Option<String>,

    // gradient check
    pub preset: Option<String>,
    pub h: Option<f64>,
    pub tol: Option<f64>,

    // paths
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub adaptive_checkpoint: Option<PathBuf>,
    pub node_checkpoint: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Loads the file when given, otherwise an empty config.
    pub fn load_optional(path: Option<&Path>) -> Result<FileConfig> {
        match path {
            Some(p) => FileConfig::load(p),
            None => Ok(FileConfig::default()),
        }
    }
}

/// Flag beats file beats default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

pub fn pick_opt<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

pub const SEED_ENV: &str = "STAE_SEED";

/// Flag beats file beats the `STAE_SEED` environment variable beats 42.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(text) => text
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={text:?} is not an unsigned integer"))),
        Err(_) => Ok(42),
    }
}

/// Parses a 1-based comma-separated horizon list like `3,6,12`.
pub fn parse_horizons(text: &str, output_len: usize) -> Result<Vec<usize>> {
    let mut horizons = Vec::new();
    for part in text.split(',') {
        let h: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("horizon {part:?} is not a positive integer")))?;
        if h == 0 || h > output_len {
            return Err(Error::Config(format!(
                "horizon {h} outside the forecast range 1..={output_len}"
            )));
        }
        horizons.push(h);
    }
    if horizons.is_empty() {
        return Err(Error::Config("horizon list is empty".into()));
    }
    Ok(horizons)
}
