//! Flat `key = value` run configuration.
//!
//! Values are layered: built-in defaults for the task, then a config file,
//! then the `DYNSPARSE_SEED` environment variable, then command-line flags.
//! Later layers win. The task is read from the merged layers first so that
//! task-specific defaults apply before any explicit key.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::Shortfall;

pub const SEED_ENV: &str = "DYNSPARSE_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Mnist,
    Lm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Dense,
    Dynamic,
    StaticAgp,
    SmallDense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    Sgd,
    Adam,
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $($name:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " {}"), other))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let name = match self {
                    $(v if *v == $variant => $name,)+
                    _ => unreachable!(),
                };
                f.write_str(name)
            }
        }
    };
}

keyword_enum!(Task, "task", "mnist" => Task::Mnist, "lm" => Task::Lm);
keyword_enum!(
    RunMode, "mode",
    "dense" => RunMode::Dense,
    "dynamic" => RunMode::Dynamic,
    "static_agp" => RunMode::StaticAgp,
    "small_dense" => RunMode::SmallDense,
);
keyword_enum!(OptimKind, "optimizer", "sgd" => OptimKind::Sgd, "adam" => OptimKind::Adam);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub mode: RunMode,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub optimizer: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
    /// Final sparseness level.
    pub sparsity: f64,
    /// Linear ramp of the sparseness level; `ramp_start == ramp_end` applies
    /// the final level from the first epoch.
    pub ramp_start: usize,
    pub ramp_end: usize,
    pub block: usize,
    /// Gate key length; 0 picks the model default.
    pub key_size: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Examples used from the training split; 0 uses all.
    pub train_limit: usize,
    pub test_limit: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub embed: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub bptt: usize,
    pub shared_gate: bool,
    /// Rows with fewer than `k` positive gate scores: `keep` opens only
    /// those, `dense` computes the row densely.
    pub shortfall: Shortfall,
    pub prune_initial: f64,
    pub prune_start: usize,
    pub prune_end: usize,
    pub prune_frequency: usize,
}

/// Every key accepted by [`RunConfig::set`].
pub const KEYS: &[&str] = &[
    "task",
    "mode",
    "seed",
    "epochs",
    "batch_size",
    "eval_batch_size",
    "optimizer",
    "lr",
    "momentum",
    "beta1",
    "beta2",
    "eps",
    "clip",
    "sparsity",
    "ramp_start",
    "ramp_end",
    "block",
    "key_size",
    "data_dir",
    "out_dir",
    "train_limit",
    "test_limit",
    "width",
    "hidden_layers",
    "embed",
    "hidden",
    "layers",
    "dropout",
    "bptt",
    "shared_gate",
    "shortfall",
    "prune_initial",
    "prune_start",
    "prune_end",
    "prune_frequency",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    /// Desk-scale defaults for `task`.
    pub fn defaults(task: Task) -> Self {
        let base = Self {
            task,
            mode: RunMode::Dynamic,
            seed: 1,
            epochs: 15,
            batch_size: 64,
            eval_batch_size: 500,
            optimizer: OptimKind::Sgd,
            lr: 0.01,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 0.0,
            sparsity: 0.9,
            ramp_start: 0,
            ramp_end: 0,
            block: 64,
            key_size: 0,
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("runs/mnist"),
            train_limit: 10_000,
            test_limit: 0,
            width: 512,
            hidden_layers: 2,
            embed: 64,
            hidden: 64,
            layers: 2,
            dropout: 0.0,
            bptt: 35,
            shared_gate: false,
            shortfall: Shortfall::Keep,
            prune_initial: 0.0,
            prune_start: 0,
            prune_end: 1,
            prune_frequency: 1,
        };
        match task {
            Task::Mnist => base,
            Task::Lm => Self {
                epochs: 12,
                batch_size: 20,
                eval_batch_size: 10,
                optimizer: OptimKind::Adam,
                lr: 0.02,
                clip: 5.0,
                sparsity: 0.5,
                ramp_start: 5,
                ramp_end: 9,
                block: 16,
                data_dir: PathBuf::from("data/tiny-corpus"),
                out_dir: PathBuf::from("runs/lm"),
                train_limit: 0,
                dropout: 0.3,
                prune_start: 5,
                prune_end: 9,
                ..base
            },
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "task" => self.task = v.parse()?,
            "mode" => self.mode = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "sparsity" => self.sparsity = parse(key, v)?,
            "ramp_start" => self.ramp_start = parse(key, v)?,
            "ramp_end" => self.ramp_end = parse(key, v)?,
            "block" => self.block = parse(key, v)?,
            "key_size" => self.key_size = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "train_limit" => self.train_limit = parse(key, v)?,
            "test_limit" => self.test_limit = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "hidden_layers" => self.hidden_layers = parse(key, v)?,
            "embed" => self.embed = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "bptt" => self.bptt = parse(key, v)?,
            "shared_gate" => self.shared_gate = parse(key, v)?,
            "shortfall" => self.shortfall = v.parse()?,
            "prune_initial" => self.prune_initial = parse(key, v)?,
            "prune_start" => self.prune_start = parse(key, v)?,
            "prune_end" => self.prune_end = parse(key, v)?,
            "prune_frequency" => self.prune_frequency = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other}"))),
        }
        Ok(())
    }

    /// Merges `layers` (lowest precedence first) over the defaults of the
    /// task they name, then validates.
    pub fn resolve(layers: &[Vec<(String, String)>]) -> Result<Self> {
        let all = || layers.iter().flatten();
        let task = match all().rfind(|(k, _)| k == "task") {
            Some((_, v)) => v.trim().parse()?,
            None => Task::Mnist,
        };
        let mut cfg = Self::defaults(task);
        for (k, v) in all() {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// File layer, environment seed layer, then `flags`.
    pub fn load(file: Option<&Path>, flags: Vec<(String, String)>) -> Result<Self> {
        let file_layer = match file {
            Some(p) => parse_kv(&std::fs::read_to_string(p)?)?,
            None => Vec::new(),
        };
        let env_layer = match std::env::var(SEED_ENV) {
            Ok(v) => vec![("seed".to_string(), v)],
            Err(_) => Vec::new(),
        };
        Self::resolve(&[file_layer, env_layer, flags])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.sparsity) {
            return bad(format!("sparsity {} not in [0,1)", self.sparsity));
        }
        if self.ramp_start > self.ramp_end {
            return bad(format!(
                "ramp_start {} after ramp_end {}",
                self.ramp_start, self.ramp_end
            ));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.bptt == 0 || self.block == 0 {
            return bad("batch sizes, bptt and block must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0,1)", self.dropout));
        }
        if self.clip < 0.0 {
            return bad(format!("clip {} must be non-negative", self.clip));
        }
        Ok(())
    }

    /// `key = value` lines in [`KEYS`] order.
    pub fn to_kv(&self) -> String {
        let json = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for k in KEYS {
            let v = &json[*k];
            let s = match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {s}\n"));
        }
        out
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are ignored.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
