use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Subtask};
use crate::optim::LlrdConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub subtask: Subtask,
    pub batch_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub eta: f64,
    pub lambda: f64,
    pub groups: usize,
    pub head_multiplier: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub k_folds: usize,
    pub eval_every_batches: usize,
    pub patience_rounds: usize,
    pub seed: u64,
    /// Weighted random sampling of training epochs.
    pub wrs: bool,
    /// Grouped layer-wise decay; when off every parameter trains at `eta`.
    pub llrd: bool,
    /// Category runs: keep paragraphs with no category as all-zero examples.
    pub include_negatives: bool,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub min_freq: usize,
    /// Run folds, seeds and sweep points on a thread pool.
    pub parallel: bool,
    pub train: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(subtask: Subtask) -> Self {
        RunConfig {
            subtask,
            batch_size: 4,
            max_len: 250,
            dropout: 0.4,
            epochs: 10,
            eta: 1e-5,
            lambda: match subtask {
                Subtask::Binary => 1.6,
                Subtask::Categories => 3.6,
            },
            groups: 3,
            head_multiplier: 1.1,
            weight_decay: 0.01,
            warmup_frac: 0.10,
            k_folds: 5,
            eval_every_batches: 50,
            patience_rounds: 10,
            seed: 42,
            wrs: subtask == Subtask::Binary,
            llrd: true,
            include_negatives: false,
            d_model: 64,
            n_heads: 4,
            n_layers: 6,
            d_ff: 256,
            min_freq: 1,
            parallel: false,
            train: None,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("groups", self.groups),
            ("eval_every_batches", self.eval_every_batches),
            ("patience_rounds", self.patience_rounds),
            ("min_freq", self.min_freq),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        let rates = [
            ("eta", self.eta),
            ("lambda", self.lambda),
            ("head_multiplier", self.head_multiplier),
        ];
        if let Some((k, v)) = rates.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("{k} must be positive, got {v}")));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay {} is negative", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup_frac {} outside [0, 1)", self.warmup_frac)));
        }
        if self.k_folds < 2 {
            return Err(Error::Config(format!("k_folds {} < 2", self.k_folds)));
        }
        if self.subtask == Subtask::Categories && self.wrs && !self.include_negatives {
            return Err(Error::Config(
                "weighted sampling on categories needs negatives; set include_negatives or turn wrs off".into(),
            ));
        }
        if self.llrd && self.groups > self.n_layers {
            return Err(Error::Config(format!(
                "{} groups for {} layers",
                self.groups, self.n_layers
            )));
        }
        self.encoder_config(10).validate()
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_len: self.max_len,
            dropout: self.dropout,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder_config(vocab_size),
            subtask: self.subtask,
        }
    }

    pub fn llrd_config(&self) -> LlrdConfig {
        LlrdConfig {
            groups: self.groups,
            eta: self.eta,
            lambda: self.lambda,
            head_multiplier: self.head_multiplier,
            weight_decay: self.weight_decay,
        }
    }

    /// Sets one field from its textual form. Keys use `_` or `-`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: Display,
        {
            v.trim()
                .parse()
                .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v.trim().to_ascii_lowercase().as_str() {
                "1" | "true" | "yes" | "on" => Ok(true),
                "0" | "false" | "no" | "off" => Ok(false),
                _ => Err(Error::Config(format!("{key} = {v:?}: expected true or false"))),
            }
        }
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        match k {
            "subtask" => self.subtask = Subtask::from_number(parse(k, value)?)?,
            "batch_size" => self.batch_size = parse(k, value)?,
            "max_len" => self.max_len = parse(k, value)?,
            "dropout" => self.dropout = parse(k, value)?,
            "epochs" => self.epochs = parse(k, value)?,
            "eta" => self.eta = parse(k, value)?,
            "lambda" => self.lambda = parse(k, value)?,
            "groups" => self.groups = parse(k, value)?,
            "head_multiplier" => self.head_multiplier = parse(k, value)?,
            "weight_decay" => self.weight_decay = parse(k, value)?,
            "warmup_frac" => self.warmup_frac = parse(k, value)?,
            "k_folds" => self.k_folds = parse(k, value)?,
            "eval_every_batches" => self.eval_every_batches = parse(k, value)?,
            "patience_rounds" => self.patience_rounds = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "wrs" => self.wrs = flag(k, value)?,
            "llrd" => self.llrd = flag(k, value)?,
            "include_negatives" => self.include_negatives = flag(k, value)?,
            "d_model" => self.d_model = parse(k, value)?,
            "n_heads" => self.n_heads = parse(k, value)?,
            "n_layers" => self.n_layers = parse(k, value)?,
            "d_ff" => self.d_ff = parse(k, value)?,
            "min_freq" => self.min_freq = parse(k, value)?,
            "parallel" => self.parallel = flag(k, value)?,
            "train" => self.train = Some(PathBuf::from(value.trim())),
            "out_dir" => self.out_dir = Some(PathBuf::from(value.trim())),
            _ => return Err(Error::Config(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    /// Defaults for the pairs' `subtask` (1 when absent), then every pair in order.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)> + Clone) -> Result<Self> {
        let mut subtask = Subtask::Binary;
        for (k, v) in pairs.clone() {
            if k.trim() == "subtask" {
                subtask = Subtask::from_number(
                    v.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("subtask = {v:?}")))?,
                )?;
            }
        }
        let mut cfg = RunConfig::new(subtask);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

/// `key = value` lines; `#` starts a comment, blank lines are ignored.
pub fn parse_kv_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}
