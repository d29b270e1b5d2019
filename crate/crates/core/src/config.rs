//! Flat `key = value` run configuration shared by every command.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use toml::Value;

use crate::datasets::{DatasetKind, DatasetSpec};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::training::TrainConfig;

/// Keys a training run must set.
pub const TRAIN_REQUIRED: [&str; 5] = ["dataset_kind", "seq_len", "context_length", "total_steps", "seed"];
/// Keys dataset generation must set.
pub const DATASET_REQUIRED: [&str; 3] = ["dataset_kind", "seq_len", "seed"];

const KNOWN_KEYS: &[&str] = &[
    "dataset_kind",
    "seq_len",
    "dim",
    "n_train",
    "n_eval",
    "ar_coef",
    "ar_sigma",
    "sine_frequencies",
    "sine_noise",
    "grid_size",
    "context_length",
    "total_steps",
    "seed",
    "batch_size",
    "epsilon",
    "lambda",
    "sinkhorn_iters",
    "learning_rate",
    "lr_decay_rate",
    "lr_decay_every",
    "bandwidth_init",
    "bandwidth_floor",
    "bandwidth_decay_rate",
    "bandwidth_decay_every",
    "eta",
    "divergence_mode",
    "smoothing_mode",
    "kernel",
    "samples_per_atom",
    "truncation",
    "blur_features",
    "optimizer",
    "train_discriminator",
    "hidden",
    "test_functions",
    "output_bound",
    "encoder_layers",
    "decoder_layers",
    "noise_dim",
    "checkpoint_every",
    "eval_samples",
];

/// Raw key/value pairs with their source lines.
#[derive(Debug, Clone, Default)]
pub struct ConfigSource {
    values: BTreeMap<String, Value>,
    lines: BTreeMap<String, usize>,
}

fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn key_line(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key)
            .map(|rest| rest.trim_start().starts_with('='))
            .unwrap_or(false)
    })
    .map(|i| i + 1)
}

impl ConfigSource {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config {
            line: e.span().map(|s| line_at(text, s.start)),
            message: e.message().trim().to_string(),
        })?;
        let mut src = Self::default();
        for (key, value) in table {
            let line = key_line(text, &key);
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config {
                    line,
                    message: format!("unknown key `{key}`"),
                });
            }
            if matches!(value, Value::Table(_)) {
                return Err(Error::Config {
                    line,
                    message: format!("`{key}` must be a plain value; the config is flat"),
                });
            }
            if let Some(l) = line {
                src.lines.insert(key.clone(), l);
            }
            src.values.insert(key, value);
        }
        Ok(src)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies a `key=value` override; the value is read as a TOML literal,
    /// falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config {
            line: None,
            message: format!("override `{assignment}` is not of the form key=value"),
        })?;
        let key = key.trim();
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config {
                line: None,
                message: format!("unknown key `{key}` in override"),
            });
        }
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.lines.remove(key);
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: Value) {
        self.lines.remove(key);
        self.values.insert(key.to_string(), value);
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn err(&self, key: &str, message: String) -> Error {
        Error::Config {
            line: self.lines.get(key).copied(),
            message,
        }
    }

    fn require(&self, keys: &[&str]) -> Result<()> {
        match keys.iter().find(|k| !self.values.contains_key(**k)) {
            Some(k) => Err(Error::MissingKey(k.to_string())),
            None => Ok(()),
        }
    }

    fn float(&self, key: &str, default: f64) -> Result<f64> {
        match self.values.get(key) {
            None => Ok(default),
            Some(Value::Float(f)) => Ok(*f),
            Some(Value::Integer(i)) => Ok(*i as f64),
            Some(v) => Err(self.err(key, format!("`{key}` must be a number, got {v}"))),
        }
    }

    fn unsigned(&self, key: &str, default: u64) -> Result<u64> {
        match self.values.get(key) {
            None => Ok(default),
            Some(Value::Integer(i)) if *i >= 0 => Ok(*i as u64),
            Some(v) => Err(self.err(key, format!("`{key}` must be a nonnegative integer, got {v}"))),
        }
    }

    fn size(&self, key: &str, default: usize) -> Result<usize> {
        self.unsigned(key, default as u64).map(|v| v as usize)
    }

    fn boolean(&self, key: &str, default: bool) -> Result<bool> {
        match self.values.get(key) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(*b),
            Some(v) => Err(self.err(key, format!("`{key}` must be true or false, got {v}"))),
        }
    }

    fn parsed<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: std::str::FromStr<Err = Error>,
    {
        match self.values.get(key) {
            None => Ok(default),
            Some(Value::String(s)) => s.parse().map_err(|e: Error| self.err(key, e.to_string())),
            Some(v) => Err(self.err(key, format!("`{key}` must be a string, got {v}"))),
        }
    }

    fn floats(&self, key: &str, default: Vec<f64>) -> Result<Vec<f64>> {
        match self.values.get(key) {
            None => Ok(default),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Float(f) => Ok(*f),
                    Value::Integer(i) => Ok(*i as f64),
                    other => Err(self.err(key, format!("`{key}` must hold numbers, got {other}"))),
                })
                .collect(),
            Some(v) => Err(self.err(key, format!("`{key}` must be an array of numbers, got {v}"))),
        }
    }
}

/// Fully resolved configuration of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Training data; `n` is the training set size.
    pub dataset: DatasetSpec,
    pub n_eval: usize,
    pub train: TrainConfig,
    /// Checkpoint period in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    pub eval_samples: usize,
}

impl RunConfig {
    /// Resolves `src` against the defaults, requiring `required` keys.
    pub fn from_source(src: &ConfigSource, required: &[&str]) -> Result<Self> {
        src.require(required)?;
        let seed = src.unsigned("seed", 0)?;
        let kind: DatasetKind = src.parsed("dataset_kind", DatasetKind::Ar1)?;
        let d = DatasetSpec::new(kind, 4096, 10, seed);
        let dataset = DatasetSpec {
            kind,
            n: src.size("n_train", d.n)?,
            steps: src.size("seq_len", d.steps)?,
            dim: src.size("dim", d.dim)?,
            seed,
            ar_coef: src.float("ar_coef", d.ar_coef)?,
            ar_sigma: src.float("ar_sigma", d.ar_sigma)?,
            sine_frequencies: src.floats("sine_frequencies", d.sine_frequencies.clone())?,
            sine_noise: src.float("sine_noise", d.sine_noise)?,
            grid_size: src.size("grid_size", d.grid_size)?,
        };
        let t = TrainConfig::default();
        let train = TrainConfig {
            batch_size: src.size("batch_size", t.batch_size)?,
            epsilon: src.float("epsilon", t.epsilon)?,
            lambda: src.float("lambda", t.lambda)?,
            sinkhorn_iters: src.size("sinkhorn_iters", t.sinkhorn_iters)?,
            learning_rate: src.float("learning_rate", t.learning_rate)?,
            lr_decay_rate: src.float("lr_decay_rate", t.lr_decay_rate)?,
            lr_decay_every: src.unsigned("lr_decay_every", t.lr_decay_every)?,
            bandwidth: crate::smoothing::BandwidthSchedule {
                h_init: src.float("bandwidth_init", t.bandwidth.h_init)?,
                h_floor: src.float("bandwidth_floor", t.bandwidth.h_floor)?,
                decay_rate: src.float("bandwidth_decay_rate", t.bandwidth.decay_rate)?,
                decay_every: src.unsigned("bandwidth_decay_every", t.bandwidth.decay_every)?,
            },
            context_length: src.size("context_length", t.context_length)?,
            total_steps: src.unsigned("total_steps", t.total_steps)?,
            seed,
            eta: src.float("eta", t.eta)?,
            divergence_mode: src.parsed("divergence_mode", t.divergence_mode)?,
            smoothing_mode: src.parsed("smoothing_mode", t.smoothing_mode)?,
            kernel: src.parsed("kernel", t.kernel)?,
            samples_per_atom: src.size("samples_per_atom", t.samples_per_atom)?,
            truncation: src.float("truncation", t.truncation)?,
            blur_features: src.boolean("blur_features", t.blur_features)?,
            optimizer: src.parsed("optimizer", t.optimizer)?,
            train_discriminator: src.boolean("train_discriminator", t.train_discriminator)?,
            hidden: src.size("hidden", t.hidden)?,
            test_functions: src.size("test_functions", t.test_functions)?,
            output_bound: src.float("output_bound", t.output_bound)?,
            encoder_layers: src.size("encoder_layers", t.encoder_layers)?,
            decoder_layers: src.size("decoder_layers", t.decoder_layers)?,
            noise_dim: src.size("noise_dim", t.noise_dim)?,
        };
        let cfg = Self {
            dataset,
            n_eval: src.size("n_eval", 256)?,
            train,
            checkpoint_every: src.unsigned("checkpoint_every", 0)?,
            eval_samples: src.size("eval_samples", 256)?,
        };
        cfg.dataset.validate().map_err(|e| src.err("dataset_kind", e.to_string()))?;
        if required.contains(&"context_length") {
            cfg.train
                .validate(cfg.dataset.steps)
                .map_err(|e| Error::Config {
                    line: None,
                    message: e.to_string(),
                })?;
        }
        Ok(cfg)
    }

    /// Training data drawn from `seed + 1`.
    pub fn train_dataset(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.dataset.seed.wrapping_add(1),
            ..self.dataset.clone()
        }
    }

    /// Held-out data drawn from `seed + 2`.
    pub fn eval_dataset(&self) -> DatasetSpec {
        DatasetSpec {
            n: self.n_eval,
            seed: self.dataset.seed.wrapping_add(2),
            ..self.dataset.clone()
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            context_length: self.train.context_length,
            samples_per_context: self.eval_samples,
            seed: self.dataset.seed.wrapping_add(3),
            config_hash: self.hash(),
            ..EvalConfig::default()
        }
    }

    /// Sorted `key=value` lines of every resolved setting.
    pub fn canonical(&self) -> String {
        let d = &self.dataset;
        let t = &self.train;
        let freqs: Vec<String> = d.sine_frequencies.iter().map(|f| f.to_string()).collect();
        let mut pairs: Vec<(&str, String)> = vec![
            ("dataset_kind", d.kind.as_str().into()),
            ("seq_len", d.steps.to_string()),
            ("dim", d.dim.to_string()),
            ("n_train", d.n.to_string()),
            ("n_eval", self.n_eval.to_string()),
            ("ar_coef", d.ar_coef.to_string()),
            ("ar_sigma", d.ar_sigma.to_string()),
            ("sine_frequencies", format!("[{}]", freqs.join(","))),
            ("sine_noise", d.sine_noise.to_string()),
            ("grid_size", d.grid_size.to_string()),
            ("context_length", t.context_length.to_string()),
            ("total_steps", t.total_steps.to_string()),
            ("seed", d.seed.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epsilon", t.epsilon.to_string()),
            ("lambda", t.lambda.to_string()),
            ("sinkhorn_iters", t.sinkhorn_iters.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("lr_decay_rate", t.lr_decay_rate.to_string()),
            ("lr_decay_every", t.lr_decay_every.to_string()),
            ("bandwidth_init", t.bandwidth.h_init.to_string()),
            ("bandwidth_floor", t.bandwidth.h_floor.to_string()),
            ("bandwidth_decay_rate", t.bandwidth.decay_rate.to_string()),
            ("bandwidth_decay_every", t.bandwidth.decay_every.to_string()),
            ("eta", t.eta.to_string()),
            ("divergence_mode", t.divergence_mode.as_str().into()),
            ("smoothing_mode", t.smoothing_mode.as_str().into()),
            ("kernel", t.kernel.as_str().into()),
            ("samples_per_atom", t.samples_per_atom.to_string()),
            ("truncation", t.truncation.to_string()),
            ("blur_features", t.blur_features.to_string()),
            ("optimizer", t.optimizer.as_str().into()),
            ("train_discriminator", t.train_discriminator.to_string()),
            ("hidden", t.hidden.to_string()),
            ("test_functions", t.test_functions.to_string()),
            ("output_bound", t.output_bound.to_string()),
            ("encoder_layers", t.encoder_layers.to_string()),
            ("decoder_layers", t.decoder_layers.to_string()),
            ("noise_dim", t.noise_dim.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("eval_samples", self.eval_samples.to_string()),
        ];
        pairs.sort();
        pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// SHA-256 of [`RunConfig::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

/// SHA-256 of arbitrary sorted `key=value` pairs, for commands without a run config.
pub fn hash_pairs(pairs: &[(&str, String)]) -> String {
    let mut sorted = pairs.to_vec();
    sorted.sort();
    let text: String = sorted.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    hex::encode(Sha256::digest(text.as_bytes()))
}
