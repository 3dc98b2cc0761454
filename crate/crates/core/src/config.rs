//! Run configuration: flat `key = value` files, `LIGHTKG_<KEY>` environment
//! overrides, then explicit overrides from the command line.

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{ContrastReduction, TrainConfig};

pub const ENV_PREFIX: &str = "LIGHTKG_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub interactions: Option<PathBuf>,
    pub kg: Option<PathBuf>,
    pub links: Option<PathBuf>,
    pub min_rating: Option<f64>,
    pub strict: bool,
    pub seed: u64,
    pub dim: usize,
    pub layers: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub beta_u: f64,
    pub beta_i: f64,
    pub lambda: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub pair_samples: usize,
    pub contrast_reduction: ContrastReduction,
    pub fixed_scalars: Option<f64>,
    pub k: usize,
    pub ratio: f64,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            interactions: None,
            kg: None,
            links: None,
            min_rating: None,
            strict: false,
            seed: t.seed,
            dim: m.dim,
            layers: m.layers,
            lr: t.learning_rate,
            batch_size: t.batch_size,
            negatives: t.num_negatives,
            beta_u: t.beta_u,
            beta_i: t.beta_i,
            lambda: t.lambda,
            patience: t.stopping_patience,
            max_epochs: t.max_epochs,
            pair_samples: t.pair_samples,
            contrast_reduction: t.contrast_reduction,
            fixed_scalars: t.fixed_scalars,
            k: t.eval_k,
            ratio: 1.0,
            threads: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "interactions",
    "kg",
    "links",
    "min_rating",
    "strict",
    "seed",
    "dim",
    "layers",
    "lr",
    "batch_size",
    "negatives",
    "beta_u",
    "beta_i",
    "lambda",
    "patience",
    "max_epochs",
    "pair_samples",
    "contrast_reduction",
    "fixed_scalars",
    "k",
    "ratio",
    "threads",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("invalid value `{value}` for `{key}`")))
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

/// Every randomised stage draws its seed from one generator seeded by the
/// run seed, in this fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedSeeds {
    pub split: u64,
    pub sampling: u64,
    pub init: u64,
    pub train: u64,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().to_ascii_lowercase().replace('-', "_");
        let v = value.trim();
        match key.as_str() {
            "interactions" => self.interactions = optional_path(v),
            "kg" => self.kg = optional_path(v),
            "links" => self.links = optional_path(v),
            "min_rating" => self.min_rating = optional(&key, v)?,
            "strict" => self.strict = parse(&key, v)?,
            "seed" => self.seed = parse(&key, v)?,
            "dim" => self.dim = parse(&key, v)?,
            "layers" => self.layers = parse(&key, v)?,
            "lr" | "learning_rate" => self.lr = parse(&key, v)?,
            "batch_size" => self.batch_size = parse(&key, v)?,
            "negatives" | "num_negatives" => self.negatives = parse(&key, v)?,
            "beta_u" => self.beta_u = parse(&key, v)?,
            "beta_i" => self.beta_i = parse(&key, v)?,
            "lambda" => self.lambda = parse(&key, v)?,
            "patience" | "stopping_patience" => self.patience = parse(&key, v)?,
            "max_epochs" => self.max_epochs = parse(&key, v)?,
            "pair_samples" => self.pair_samples = parse(&key, v)?,
            "contrast_reduction" => {
                self.contrast_reduction = match v {
                    "mean" => ContrastReduction::Mean,
                    "sum_estimate" | "sum" => ContrastReduction::SumEstimate,
                    _ => return Err(Error::invalid(format!("invalid contrast_reduction `{v}`"))),
                }
            }
            "fixed_scalars" => self.fixed_scalars = optional(&key, v)?,
            "k" => self.k = parse(&key, v)?,
            "ratio" => self.ratio = parse(&key, v)?,
            "threads" => self.threads = parse(&key, v)?,
            _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                message: "expected `key = value`".into(),
            })?;
            self.set(k, v).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    /// Applies `LIGHTKG_<KEY>` variables from `vars` (usually `std::env::vars()`).
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        for (name, value) in vars {
            if let Some(key) = name.strip_prefix(ENV_PREFIX) {
                let key = key.to_ascii_lowercase();
                if KEYS.contains(&key.as_str()) {
                    self.set(&key, &value)?;
                }
            }
        }
        Ok(())
    }

    pub fn seeds(&self) -> DerivedSeeds {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        DerivedSeeds {
            split: rng.next_u64(),
            sampling: rng.next_u64(),
            init: rng.next_u64(),
            train: rng.next_u64(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            layers: self.layers,
            init_seed: self.seeds().init,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch_size,
            num_negatives: self.negatives,
            beta_u: self.beta_u,
            beta_i: self.beta_i,
            lambda: self.lambda,
            stopping_patience: self.patience,
            max_epochs: self.max_epochs,
            pair_samples: self.pair_samples,
            contrast_reduction: self.contrast_reduction,
            fixed_scalars: self.fixed_scalars,
            eval_k: self.k,
            seed: self.seeds().train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::invalid(format!("ratio {} outside (0, 1]", self.ratio)));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let json = serde_json::to_value(self).expect("serialisable");
        let mut out = String::new();
        for key in KEYS {
            let v = &json[*key];
            let s = match v {
                serde_json::Value::Null => "none".to_string(),
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            out.push_str(&format!("{key} = {s}\n"));
        }
        out
    }
}
