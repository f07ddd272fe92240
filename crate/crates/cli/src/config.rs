//! `key = value` run configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use pnp_depth::net::{Arch, InputMode, Model};
use pnp_depth::refine::{default_tap, PnpConfig, UpdateRule, DEFAULT_ALPHA, DEFAULT_ITERATIONS};
use pnp_depth::scene::SceneParams;
use pnp_depth::sparsity::LidarPreset;
use pnp_depth::train::TrainConfig;
use pnp_depth::LossKind;

pub const SEED_ENV: &str = "PNP_SEED";

/// Offset between the base seeds of training and evaluation scenes.
pub const TEST_SEED_OFFSET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: Arch,
    pub input_mode: InputMode,
    /// Empty means the deepest tap of the model.
    pub tap: String,
    pub alpha: f64,
    pub iterations: usize,
    pub loss: LossKind,
    pub update_rule: UpdateRule,
    pub n_samples: usize,
    pub lidar_preset: Option<LidarPreset>,
    pub seed: u64,
    pub scene: SceneParams,
    pub n_train: usize,
    pub n_test: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_loss: LossKind,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            arch: Arch::PlainCnn,
            input_mode: InputMode::Sd,
            tap: String::new(),
            alpha: DEFAULT_ALPHA,
            iterations: DEFAULT_ITERATIONS,
            loss: LossKind::L1,
            update_rule: UpdateRule::Sign,
            n_samples: 31,
            lidar_preset: None,
            seed: 0,
            scene: SceneParams::default(),
            n_train: 200,
            n_test: 100,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            train_loss: train.loss,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Every accepted key with its default, as shown by `pnp config`.
pub const KEYS: &[(&str, &str)] = &[
    ("arch", "plain_cnn"),
    ("input_mode", "sd"),
    ("tap", "(deepest tap)"),
    ("alpha", "0.01"),
    ("iterations", "5"),
    ("loss", "l1"),
    ("update_rule", "sign"),
    ("n_samples", "31"),
    ("lidar_preset", "(none: uniform sampling)"),
    ("seed", "0"),
    ("height", "64"),
    ("width", "48"),
    ("d_min", "0.5"),
    ("d_max", "10.0"),
    ("n_objects", "4"),
    ("n_train", "200"),
    ("n_test", "100"),
    ("epochs", "30"),
    ("batch_size", "4"),
    ("learning_rate", "0.01"),
    ("train_loss", "l1"),
    ("out_dir", "out"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| anyhow!("invalid value '{value}' for '{key}': {e}"))
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected 'key = value', got '{line}'", n + 1))?;
            cfg.set(key.trim(), value.trim()).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse_str(&text).with_context(|| format!("config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = parse(SEED_ENV, s.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "arch" => self.arch = parse(key, value)?,
            "input_mode" => self.input_mode = parse(key, value)?,
            "tap" => self.tap = value.to_string(),
            "alpha" => self.alpha = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "loss" => self.loss = parse(key, value)?,
            "update_rule" => self.update_rule = parse(key, value)?,
            "n_samples" => self.n_samples = parse(key, value)?,
            "lidar_preset" => {
                self.lidar_preset = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "height" => self.scene.height = parse(key, value)?,
            "width" => self.scene.width = parse(key, value)?,
            "d_min" => self.scene.d_min = parse(key, value)?,
            "d_max" => self.scene.d_max = parse(key, value)?,
            "n_objects" => self.scene.n_objects = parse(key, value)?,
            "n_train" => self.n_train = parse(key, value)?,
            "n_test" => self.n_test = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "train_loss" => self.train_loss = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => bail!("unknown key '{other}'"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train_config().validate()?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            bail!("alpha must be positive, got {}", self.alpha);
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            loss: self.train_loss,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn pnp_config(&self, model: &Model) -> PnpConfig {
        let tap = if self.tap.is_empty() { default_tap(model) } else { self.tap.clone() };
        PnpConfig {
            alpha: self.alpha,
            iterations: self.iterations,
            loss: self.loss,
            rule: self.update_rule,
            ..PnpConfig::new(tap)
        }
    }

    pub fn train_seed(&self) -> u64 {
        self.seed
    }

    pub fn test_seed(&self) -> u64 {
        self.seed.wrapping_add(TEST_SEED_OFFSET)
    }
}
