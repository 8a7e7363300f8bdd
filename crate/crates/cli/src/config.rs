//! Effective run configuration: defaults, then a TOML file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, ValueEnum};

use ega_core::trainer::TrainConfig;
use ega_core::{GateVariant, ModelConfig, ZNormMode};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Shakespeare,
    Ptb,
}

impl Dataset {
    pub fn name(self) -> &'static str {
        match self {
            Dataset::Shakespeare => "shakespeare",
            Dataset::Ptb => "ptb",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub dataset: Dataset,
    pub path: Option<PathBuf>,
    pub split: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: Dataset::Shakespeare,
            path: None,
            split: 0.9,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    /// Sequences per forward pass; 0 keeps the whole batch together.
    pub micro_batch: usize,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    pub no_timing: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn data_path(&self) -> Result<&Path> {
        match &self.data.path {
            Some(p) => Ok(p),
            None => bail!("no corpus given: pass --data-path or set data.path in the config file"),
        }
    }
}

pub fn parse_variant(s: &str) -> Result<GateVariant, String> {
    s.parse().map_err(|e: ega_core::Error| e.to_string())
}

pub fn parse_znorm(s: &str) -> Result<ZNormMode, String> {
    s.parse().map_err(|e: ega_core::Error| e.to_string())
}

/// Flags shared by every command that trains.
#[derive(Args, Clone, Debug)]
pub struct TrainFlags {
    /// TOML file with [data], [model], [train] and [run] sections
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "shakespeare")]
    pub dataset: Dataset,
    /// Plain-text corpus
    #[arg(long)]
    pub data_path: Option<PathBuf>,
    /// Fraction of characters used for training
    #[arg(long, default_value_t = 0.9)]
    pub split: f64,
    #[arg(long, default_value_t = 1337)]
    pub seed: u64,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 256)]
    pub context: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Energy normalisation: paper (whole sequence) or causal (running prefix)
    #[arg(long, default_value = "paper", value_parser = parse_znorm)]
    pub znorm: ZNormMode,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 300)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0.1)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 200)]
    pub eval_batches: usize,
    #[arg(long, default_value_t = 100)]
    pub snapshot_every: usize,
    #[arg(long, default_value_t = 6)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub d_model: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    /// Initial gate threshold
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub tau_init: f64,
    /// Initial gate sharpness
    #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
    pub alpha_init: f64,
    /// Sequences per forward pass (0: whole batch); bounds memory
    #[arg(long, default_value_t = 0)]
    pub micro_batch: usize,
    /// Checkpoint every N steps (0: only at the end)
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Write wall_ms as 0 so metrics are byte-identical across reruns
    #[arg(long)]
    pub no_timing: bool,
}

fn given(m: &ArgMatches, id: &str) -> bool {
    matches!(m.value_source(id), Some(ValueSource::CommandLine))
}

impl TrainFlags {
    /// Defaults, overridden by `--config`, overridden by explicit flags.
    /// `variant` is applied by the caller.
    pub fn resolve(&self, m: &ArgMatches) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($id:literal, $dst:expr, $val:expr) => {
                if given(m, $id) {
                    $dst = $val;
                }
            };
        }
        set!("dataset", c.data.dataset, self.dataset);
        set!("data_path", c.data.path, self.data_path.clone());
        set!("split", c.data.split, self.split);
        if given(m, "seed") {
            c.model.seed = self.seed;
            c.train.seed = self.seed;
        }
        set!("steps", c.train.steps, self.steps);
        set!("context", c.train.context, self.context);
        set!("batch", c.train.batch, self.batch);
        set!("znorm", c.model.znorm_mode, self.znorm);
        set!("lr", c.train.lr_max, self.lr);
        set!("warmup", c.train.warmup, self.warmup);
        set!("weight_decay", c.train.weight_decay, self.weight_decay);
        set!("clip", c.train.clip_norm, self.clip);
        set!("eval_every", c.train.eval_every, self.eval_every);
        set!("eval_batches", c.train.eval_batches, self.eval_batches);
        set!("snapshot_every", c.train.snapshot_every, self.snapshot_every);
        set!("layers", c.model.n_layers, self.layers);
        set!("heads", c.model.n_heads, self.heads);
        set!("d_model", c.model.d_model, self.d_model);
        set!("dropout", c.model.dropout, self.dropout);
        set!("tau_init", c.model.gate_init.tau, self.tau_init);
        set!("alpha_init", c.model.gate_init.alpha, self.alpha_init);
        set!("micro_batch", c.run.micro_batch, self.micro_batch);
        set!("checkpoint_every", c.run.checkpoint_every, self.checkpoint_every);
        set!("no_timing", c.run.no_timing, self.no_timing);
        c.model.context_len = c.model.context_len.max(c.train.context);
        Ok(c)
    }
}
