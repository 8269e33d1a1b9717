//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored. Every
//! key has a default; unknown keys and malformed lines are rejected with their
//! line number.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::PretrainConfig;
use crate::error::{Error, Result};
use crate::glimpse::GlimpseConfig;
use crate::ram::{LocationMode, ModelConfig};
use crate::synth::{SynthConfig, Task};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub pretrain: PretrainConfig,
    /// Number of random-location glimpses sampled for autoencoder pretraining.
    pub pretrain_glimpses: usize,
    /// Fraction of a dataset held out for validation, taken from its end.
    pub val_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 7,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            pretrain: PretrainConfig::default(),
            pretrain_glimpses: 500,
            val_fraction: 0.2,
        };
        cfg.set_seed(7);
        cfg
    }
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value {value:?} for {key}")))
}

fn parse_mode(line: usize, value: &str) -> Result<LocationMode> {
    match value {
        "greedy" => Ok(LocationMode::Greedy),
        "sample" => Ok(LocationMode::Sample),
        "uniform" => Ok(LocationMode::UniformRandom),
        _ => Err(Error::Config(format!(
            "line {line}: expected greedy, sample or uniform, got {value:?}"
        ))),
    }
}

fn mode_name(m: LocationMode) -> &'static str {
    match m {
        LocationMode::Greedy => "greedy",
        LocationMode::Sample => "sample",
        LocationMode::UniformRandom => "uniform",
    }
}

impl RunConfig {
    /// Propagates one master seed to every seeded component.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {ln}: expected `key = value`, got {raw:?}")))?;
            cfg.set(ln, key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, ln: usize, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.synth;
        let p = &mut self.pretrain;
        match key {
            "seed" => {
                let seed = parse(ln, key, v)?;
                self.set_seed(seed);
            }
            "image_side" => {
                m.image_side = parse(ln, key, v)?;
                s.side = m.image_side;
            }
            "task" => s.task = v.parse::<Task>().map_err(|e| Error::Config(format!("line {ln}: {e}")))?,
            "noise" => s.noise = parse(ln, key, v)?,
            "clutter" => s.clutter = parse(ln, key, v)?,
            "ctr_threshold" => s.ctr_threshold = parse(ln, key, v)?,
            "glimpse_size" => m.glimpse.size = parse(ln, key, v)?,
            "glimpse_scale" => m.glimpse.scale = parse(ln, key, v)?,
            "pad_value" => m.glimpse.pad_value = parse(ln, key, v)?,
            "conv1_channels" => m.conv_channels[0] = parse(ln, key, v)?,
            "conv2_channels" => m.conv_channels[1] = parse(ln, key, v)?,
            "kernel_size" => m.kernel = parse(ln, key, v)?,
            "loc_dim" => m.loc_dim = parse(ln, key, v)?,
            "fuse_dim" => m.fuse_dim = parse(ln, key, v)?,
            "hidden_dim" => m.hidden = parse(ln, key, v)?,
            "n_glimpses" => m.n_glimpses = parse(ln, key, v)?,
            "sigma" => m.sigma = parse(ln, key, v)?,
            "epochs" => t.epochs = parse(ln, key, v)?,
            "episodes_per_epoch" => t.episodes_per_epoch = parse(ln, key, v)?,
            "batch_size" => t.batch_size = parse(ln, key, v)?,
            "lr" => t.lr = parse(ln, key, v)?,
            "momentum" => t.momentum = parse(ln, key, v)?,
            "baseline_lr" => t.baseline_lr = parse(ln, key, v)?,
            "locator_lr" => t.locator_lr = parse(ln, key, v)?,
            "baseline_weight" => t.baseline_weight = parse(ln, key, v)?,
            "chunk_epochs" => t.chunk_epochs = parse(ln, key, v)?,
            "validation_repeats" => t.validation_repeats = parse(ln, key, v)?,
            "validation_mode" => t.validation_mode = parse_mode(ln, v)?,
            "train_mode" => t.train_mode = parse_mode(ln, v)?,
            "heatmap_cell" => t.heatmap_cell = parse(ln, key, v)?,
            "pretrain_epochs" => p.epochs = parse(ln, key, v)?,
            "pretrain_lr" => p.lr = parse(ln, key, v)?,
            "pretrain_momentum" => p.momentum = parse(ln, key, v)?,
            "pretrain_batch" => p.batch_size = parse(ln, key, v)?,
            "pretrain_glimpses" => self.pretrain_glimpses = parse(ln, key, v)?,
            "val_fraction" => self.val_fraction = parse(ln, key, v)?,
            _ => return Err(Error::Config(format!("line {ln}: unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.synth.side != self.model.image_side {
            return Err(Error::Config("synthetic and model image sides differ".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} not in [0, 1)", self.val_fraction)));
        }
        if self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain_batch must be positive".into()));
        }
        Ok(())
    }

    /// Serialises every key; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let (m, t, s, p) = (&self.model, &self.train, &self.synth, &self.pretrain);
        let GlimpseConfig { size, scale, pad_value } = &m.glimpse;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("image_side", m.image_side.to_string());
        kv("task", s.task.to_string());
        kv("noise", s.noise.to_string());
        kv("clutter", s.clutter.to_string());
        kv("ctr_threshold", s.ctr_threshold.to_string());
        kv("glimpse_size", size.to_string());
        kv("glimpse_scale", scale.to_string());
        kv("pad_value", pad_value.to_string());
        kv("conv1_channels", m.conv_channels[0].to_string());
        kv("conv2_channels", m.conv_channels[1].to_string());
        kv("kernel_size", m.kernel.to_string());
        kv("loc_dim", m.loc_dim.to_string());
        kv("fuse_dim", m.fuse_dim.to_string());
        kv("hidden_dim", m.hidden.to_string());
        kv("n_glimpses", m.n_glimpses.to_string());
        kv("sigma", m.sigma.to_string());
        kv("epochs", t.epochs.to_string());
        kv("episodes_per_epoch", t.episodes_per_epoch.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("momentum", t.momentum.to_string());
        kv("baseline_lr", t.baseline_lr.to_string());
        kv("locator_lr", t.locator_lr.to_string());
        kv("baseline_weight", t.baseline_weight.to_string());
        kv("chunk_epochs", t.chunk_epochs.to_string());
        kv("validation_repeats", t.validation_repeats.to_string());
        kv("validation_mode", mode_name(t.validation_mode).to_string());
        kv("train_mode", mode_name(t.train_mode).to_string());
        kv("heatmap_cell", t.heatmap_cell.to_string());
        kv("pretrain_epochs", p.epochs.to_string());
        kv("pretrain_lr", p.lr.to_string());
        kv("pretrain_momentum", p.momentum.to_string());
        kv("pretrain_batch", p.batch_size.to_string());
        kv("pretrain_glimpses", self.pretrain_glimpses.to_string());
        kv("val_fraction", self.val_fraction.to_string());
        out
    }

    /// Splits a dataset into `(train, validation)` by position.
    pub fn split<'d, T>(&self, data: &'d [T]) -> (&'d [T], &'d [T]) {
        let n_val = ((data.len() as f64) * self.val_fraction).round() as usize;
        let n_val = n_val.min(data.len().saturating_sub(1));
        data.split_at(data.len() - n_val)
    }
}
