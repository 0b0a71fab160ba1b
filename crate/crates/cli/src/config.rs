//! Layered run configuration: built-in defaults, then a `key = value`
//! config file, then command-line overrides.

use std::path::{Path, PathBuf};

use bmsmoe::{DenoiseConfig, NoiseConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub denoise: DenoiseConfig,
    pub noise: NoiseConfig,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub trace: bool,
}

/// Every key accepted in config files and `--set`.
pub const KEYS: &[&str] = &[
    "k",
    "stride",
    "search_radius",
    "n_hard",
    "tau_hard",
    "bm_sigma",
    "lambda_2d",
    "kernels",
    "fusion_mode",
    "seed",
    "workers",
    "lambda_mse",
    "lambda_ssim",
    "max_iters",
    "lr0",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "clip_norm",
    "plateau_patience",
    "plateau_factor",
    "min_lr",
    "early_stop_tol",
    "init_jitter",
    "sigma",
    "input",
    "output",
    "trace",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("bad value {value:?} for {key}: {e}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let d = &mut self.denoise;
        match key {
            "k" => d.bm.k = parse(key, value)?,
            "stride" => d.bm.stride = parse(key, value)?,
            "search_radius" => d.bm.search_radius = parse(key, value)?,
            "n_hard" => d.bm.n_hard = parse(key, value)?,
            "tau_hard" => d.bm.tau_hard = parse(key, value)?,
            "bm_sigma" => d.bm.sigma = parse(key, value)?,
            "lambda_2d" => d.bm.lambda_2d = parse(key, value)?,
            "kernels" => d.kernels = parse(key, value)?,
            "fusion_mode" => d.fusion_mode = parse(key, value)?,
            "seed" => {
                d.seed = parse(key, value)?;
                self.noise.seed = d.seed;
            }
            "workers" => d.workers = parse(key, value)?,
            "lambda_mse" => d.fit.lambda_mse = parse(key, value)?,
            "lambda_ssim" => d.fit.lambda_ssim = parse(key, value)?,
            "max_iters" => d.fit.max_iters = parse(key, value)?,
            "lr0" => d.fit.lr0 = parse(key, value)?,
            "adam_beta1" => d.fit.adam_beta1 = parse(key, value)?,
            "adam_beta2" => d.fit.adam_beta2 = parse(key, value)?,
            "adam_eps" => d.fit.adam_eps = parse(key, value)?,
            "clip_norm" => d.fit.clip_norm = parse(key, value)?,
            "plateau_patience" => d.fit.plateau_patience = parse(key, value)?,
            "plateau_factor" => d.fit.plateau_factor = parse(key, value)?,
            "min_lr" => d.fit.min_lr = parse(key, value)?,
            "early_stop_tol" => d.fit.early_stop_tol = parse(key, value)?,
            "init_jitter" => d.fit.init_jitter = parse(key, value)?,
            "sigma" => self.noise.sigma = parse(key, value)?,
            "input" => self.input = Some(PathBuf::from(value)),
            "output" => self.output = Some(PathBuf::from(value)),
            "trace" => self.trace = parse(key, value)?,
            other => return Err(CliError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("{origin}:{}: expected `key = value`", n + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| CliError::Config(format!("{origin}:{}: {}", n + 1, e.message())))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.denoise
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.noise.sigma >= 0.0) {
            return Err(CliError::Config(format!(
                "sigma must be >= 0, got {}",
                self.noise.sigma
            )));
        }
        Ok(())
    }
}
