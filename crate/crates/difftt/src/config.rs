//! `key = value` run configuration with `#` comments.

use std::collections::BTreeSet;
use std::path::Path;

use difftt_core::data::SynthConfig;
use difftt_core::metrics::Averaging;
use difftt_core::model::{MacroPooling, ModelConfig};
use difftt_core::train::{EvalOptions, TrainConfig, TttSettings, DEFAULT_INTERVALS, DEFAULT_OBSERVED_FRACTION};

use crate::error::{Error, Result};

/// Meta-gradient order. Only the first-order variant is implemented.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetaOrder {
    First,
}

/// Every tunable of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub dim: usize,
    pub gcn_layers: usize,
    pub hgnn_layers: usize,
    pub separate_init: bool,
    pub init_std: f64,
    pub macro_pooling: MacroPooling,
    pub mask_seen: bool,
    pub intervals: usize,
    pub observed_fraction: f64,
    pub split: (f64, f64, f64),
    pub directed: bool,
    pub ttt_steps: Option<usize>,
    pub ttt_lr: Option<f64>,
    pub eval_all_positions: bool,
    pub averaging: Averaging,
    pub meta_order: MetaOrder,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train: TrainConfig {
                seed: SynthConfig::default().seed,
                ..TrainConfig::default()
            },
            dim: 16,
            gcn_layers: 2,
            hgnn_layers: 1,
            separate_init: false,
            init_std: 0.1,
            macro_pooling: MacroPooling::Last,
            mask_seen: true,
            intervals: DEFAULT_INTERVALS,
            observed_fraction: DEFAULT_OBSERVED_FRACTION,
            split: (0.8, 0.1, 0.1),
            directed: false,
            ttt_steps: None,
            ttt_lr: None,
            eval_all_positions: false,
            averaging: Averaging::Position,
            meta_order: MetaOrder::First,
        }
    }
}

/// Keys accepted by [`RunConfig::set`], in resolved-file order.
pub const KEYS: &[&str] = &[
    "seed",
    "n_users",
    "pa_edges_per_node",
    "n_cascades",
    "activation_p",
    "shift_fraction",
    "shift_factor",
    "hub_dropout_k",
    "dim",
    "gcn_layers",
    "hgnn_layers",
    "separate_init",
    "init_std",
    "macro_pooling",
    "mask_seen",
    "intervals",
    "observed_fraction",
    "split_train",
    "split_valid",
    "split_test",
    "directed",
    "batch_size",
    "lr",
    "lambda",
    "gamma",
    "tau",
    "meta_batch",
    "inner_steps",
    "inner_lr",
    "meta_lr",
    "joint_epochs",
    "meta_epochs",
    "select_best",
    "max_skip_fraction",
    "ttt_steps",
    "ttt_lr",
    "eval_all_positions",
    "averaging",
    "meta_order",
];

/// Keys describing the synthetic generator.
pub const SYNTH_KEYS: &[&str] = &[
    "seed",
    "n_users",
    "pa_edges_per_node",
    "n_cascades",
    "activation_p",
    "shift_fraction",
    "shift_factor",
    "hub_dropout_k",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => {
                let s = num(key, v)?;
                self.synth.seed = s;
                self.train.seed = s;
            }
            "n_users" => self.synth.n_users = num(key, v)?,
            "pa_edges_per_node" => self.synth.pa_edges_per_node = num(key, v)?,
            "n_cascades" => self.synth.n_cascades = num(key, v)?,
            "activation_p" => self.synth.activation_p = num(key, v)?,
            "shift_fraction" => self.synth.shift_fraction = num(key, v)?,
            "shift_factor" => self.synth.shift_factor = num(key, v)?,
            "hub_dropout_k" => self.synth.hub_dropout_k = num(key, v)?,
            "dim" => self.dim = num(key, v)?,
            "gcn_layers" => self.gcn_layers = num(key, v)?,
            "hgnn_layers" => self.hgnn_layers = num(key, v)?,
            "separate_init" => self.separate_init = flag(key, v)?,
            "init_std" => self.init_std = num(key, v)?,
            "macro_pooling" => {
                self.macro_pooling = match v {
                    "last" => MacroPooling::Last,
                    "mean" => MacroPooling::Mean,
                    _ => return Err(Error::Config(format!("`macro_pooling`: expected last or mean, got `{v}`"))),
                }
            }
            "mask_seen" => self.mask_seen = flag(key, v)?,
            "intervals" => self.intervals = num(key, v)?,
            "observed_fraction" => self.observed_fraction = num(key, v)?,
            "split_train" => self.split.0 = num(key, v)?,
            "split_valid" => self.split.1 = num(key, v)?,
            "split_test" => self.split.2 = num(key, v)?,
            "directed" => self.directed = flag(key, v)?,
            "batch_size" => self.train.batch_size = num(key, v)?,
            "lr" => self.train.lr = num(key, v)?,
            "lambda" => self.train.lambda = num(key, v)?,
            "gamma" => self.train.gamma = num(key, v)?,
            "tau" => self.train.tau = num(key, v)?,
            "meta_batch" => self.train.meta_batch = num(key, v)?,
            "inner_steps" => self.train.inner_steps = num(key, v)?,
            "inner_lr" => self.train.inner_lr = num(key, v)?,
            "meta_lr" => self.train.meta_lr = num(key, v)?,
            "joint_epochs" => self.train.joint_epochs = num(key, v)?,
            "meta_epochs" => self.train.meta_epochs = num(key, v)?,
            "select_best" => self.train.select_best = flag(key, v)?,
            "max_skip_fraction" => self.train.max_skip_fraction = num(key, v)?,
            "ttt_steps" => self.ttt_steps = Some(num(key, v)?),
            "ttt_lr" => self.ttt_lr = Some(num(key, v)?),
            "eval_all_positions" => self.eval_all_positions = flag(key, v)?,
            "averaging" => {
                self.averaging = match v {
                    "position" => Averaging::Position,
                    "cascade" => Averaging::Cascade,
                    _ => return Err(Error::Config(format!("`averaging`: expected position or cascade, got `{v}`"))),
                }
            }
            "meta_order" => {
                self.meta_order = match v {
                    "first" => MetaOrder::First,
                    "second" => {
                        return Err(Error::Config(
                            "`meta_order = second` is not implemented; only first-order meta-gradients are available".into(),
                        ))
                    }
                    _ => return Err(Error::Config(format!("`meta_order`: expected first, got `{v}`"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let b = |x: bool| x.to_string();
        Some(match key {
            "seed" => self.train.seed.to_string(),
            "n_users" => self.synth.n_users.to_string(),
            "pa_edges_per_node" => self.synth.pa_edges_per_node.to_string(),
            "n_cascades" => self.synth.n_cascades.to_string(),
            "activation_p" => format!("{:?}", self.synth.activation_p),
            "shift_fraction" => format!("{:?}", self.synth.shift_fraction),
            "shift_factor" => format!("{:?}", self.synth.shift_factor),
            "hub_dropout_k" => self.synth.hub_dropout_k.to_string(),
            "dim" => self.dim.to_string(),
            "gcn_layers" => self.gcn_layers.to_string(),
            "hgnn_layers" => self.hgnn_layers.to_string(),
            "separate_init" => b(self.separate_init),
            "init_std" => format!("{:?}", self.init_std),
            "macro_pooling" => match self.macro_pooling {
                MacroPooling::Last => "last".into(),
                MacroPooling::Mean => "mean".into(),
            },
            "mask_seen" => b(self.mask_seen),
            "intervals" => self.intervals.to_string(),
            "observed_fraction" => format!("{:?}", self.observed_fraction),
            "split_train" => format!("{:?}", self.split.0),
            "split_valid" => format!("{:?}", self.split.1),
            "split_test" => format!("{:?}", self.split.2),
            "directed" => b(self.directed),
            "batch_size" => self.train.batch_size.to_string(),
            "lr" => format!("{:?}", self.train.lr),
            "lambda" => format!("{:?}", self.train.lambda),
            "gamma" => format!("{:?}", self.train.gamma),
            "tau" => format!("{:?}", self.train.tau),
            "meta_batch" => self.train.meta_batch.to_string(),
            "inner_steps" => self.train.inner_steps.to_string(),
            "inner_lr" => format!("{:?}", self.train.inner_lr),
            "meta_lr" => format!("{:?}", self.train.meta_lr),
            "joint_epochs" => self.train.joint_epochs.to_string(),
            "meta_epochs" => self.train.meta_epochs.to_string(),
            "select_best" => b(self.train.select_best),
            "max_skip_fraction" => format!("{:?}", self.train.max_skip_fraction),
            "ttt_steps" => self.ttt().steps.to_string(),
            "ttt_lr" => format!("{:?}", self.ttt().lr),
            "eval_all_positions" => b(self.eval_all_positions),
            "averaging" => match self.averaging {
                Averaging::Position => "position".into(),
                Averaging::Cascade => "cascade".into(),
            },
            "meta_order" => "first".into(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; unknown and repeated keys are errors.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{source}:{}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("{source}:{}: key `{k}` given twice", n + 1)));
            }
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{source}:{}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// `key = value` overrides such as `lr=0.01`.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not `key=value`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Fully resolved configuration, one `key = value` per line.
    pub fn resolved(&self) -> String {
        self.render(KEYS)
    }

    pub fn render(&self, keys: &[&str]) -> String {
        keys.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.model_config(self.synth.n_users.max(2)).validate()?;
        if self.intervals == 0 {
            return Err(Error::Config("`intervals` must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, num_users: usize) -> ModelConfig {
        ModelConfig {
            num_users,
            dim: self.dim,
            gcn_layers: self.gcn_layers,
            hgnn_layers: self.hgnn_layers,
            separate_init: self.separate_init,
            init_std: self.init_std,
            macro_pooling: self.macro_pooling,
            mask_seen: self.mask_seen,
        }
    }

    pub fn ttt(&self) -> TttSettings {
        TttSettings {
            steps: self.ttt_steps.unwrap_or(self.train.inner_steps),
            lr: self.ttt_lr.unwrap_or(self.train.inner_lr),
            seed: self.train.seed,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            all_positions: self.eval_all_positions,
            averaging: self.averaging,
            ..EvalOptions::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("lr = 0.01 # faster\n\n# note\nseed=3\nmacro_pooling = mean\n", "t").unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.synth.seed, 3);
        let mut d = RunConfig::default();
        d.apply_text(&c.resolved(), "resolved").unwrap();
        assert_eq!(d.resolved(), c.resolved());
    }

    #[test]
    fn unknown_and_repeated_keys_rejected() {
        let mut c = RunConfig::default();
        let e = c.apply_text("learning_rate = 1", "f").unwrap_err().to_string();
        assert!(e.contains("unknown key `learning_rate`") && e.contains("f:1"), "{e}");
        assert!(c.apply_text("lr = 1\nlr = 2", "f").is_err());
        assert!(c.apply_text("meta_order = second", "f").is_err());
    }
}
