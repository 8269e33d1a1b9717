//! Hybrid training: cross entropy through the differentiable path, REINFORCE
//! with a learned baseline for the locator, and chunked validation that
//! accumulates visited locations into a grid histogram.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::glimpse::anchor_pixel;
use crate::params::{Grads, SgdMomentum};
use crate::ram::{EpisodeGraph, EpisodeTrace, LocationMode, RamModel};
use crate::rng::{stream, tag};
use crate::synth::LabeledImage;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Episodes drawn per epoch; 0 means one pass over the training set.
    pub episodes_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub baseline_lr: f64,
    /// Learning rate of the locator head; REINFORCE gradients are noisy and
    /// a smaller step keeps the policy mean from saturating early.
    pub locator_lr: f64,
    /// Weight of the baseline regression term.
    pub baseline_weight: f64,
    /// Epochs per validation chunk.
    pub chunk_epochs: usize,
    /// Validation passes per chunk.
    pub validation_repeats: usize,
    pub validation_mode: LocationMode,
    /// How locations are chosen in training episodes. `UniformRandom` trains
    /// everything but the locator on random glimpses (the ablation setting).
    pub train_mode: LocationMode,
    /// Heatmap cell side in pixels.
    pub heatmap_cell: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            episodes_per_epoch: 0,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            baseline_lr: 0.01,
            locator_lr: 0.001,
            baseline_weight: 1.0,
            chunk_epochs: 500,
            validation_repeats: 100,
            validation_mode: LocationMode::Greedy,
            train_mode: LocationMode::Sample,
            heatmap_cell: 25,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("chunk_epochs", self.chunk_epochs),
            ("validation_repeats", self.validation_repeats),
            ("heatmap_cell", self.heatmap_cell),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr >= 0.0) || !(self.baseline_lr >= 0.0) || !(self.locator_lr >= 0.0) || !(self.baseline_weight >= 0.0) {
            return Err(Error::Config("learning rates and baseline weight must be >= 0".into()));
        }
        if self.train_mode == LocationMode::Greedy {
            return Err(Error::Config("training episodes must sample or draw uniform locations".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// 0/1 terminal reward.
pub fn reward(predicted: usize, label: usize) -> f64 {
    if predicted == label {
        1.0
    } else {
        0.0
    }
}

/// `CE(logits, label) − Σ_t (R − v_t)·log π(l_{t+1}) + λ·Σ_t (R − v_t)²`, where
/// the advantage `R − v_t` is a constant in the policy term and both sums run
/// over steps that sampled a next location.
pub fn hybrid_loss(
    tape: &mut Tape<'_>,
    trace: &EpisodeTrace,
    graph: &EpisodeGraph,
    label: usize,
    baseline_weight: f64,
) -> Result<Var> {
    let r = trace
        .reward
        .ok_or_else(|| Error::State("episode has no reward yet".into()))?;
    if graph.log_probs.len() != trace.len() || graph.baselines.len() != trace.len() {
        return Err(Error::State("episode graph does not match its trace".into()));
    }
    let mut loss = tape.softmax_cross_entropy(graph.logits, label)?;
    for (t, lp) in graph.log_probs.iter().enumerate() {
        let Some(lp) = *lp else { continue };
        let v = graph.baselines[t];
        let advantage = r - tape.scalar(v);
        let policy = tape.scale(lp, -advantage);
        loss = tape.add(loss, policy)?;
        let sq = tape.mse(v, &[r])?;
        let sq = tape.scale(sq, baseline_weight);
        loss = tape.add(loss, sq)?;
    }
    Ok(loss)
}

/// Result of one training episode.
#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub grads: Grads,
    pub loss: f64,
    /// Classification part of `loss`.
    pub cross_entropy: f64,
    pub trace: EpisodeTrace,
}

/// Runs one episode, scores it, and backpropagates the hybrid loss. Steps
/// whose location was not sampled from the policy contribute no policy or
/// baseline terms.
pub fn episode_gradient(
    model: &RamModel,
    sample: &LabeledImage,
    mode: LocationMode,
    baseline_weight: f64,
    rng: &mut impl rand::Rng,
) -> Result<EpisodeOutcome> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let (mut trace, graph) = model.rollout_on_tape(&mut tape, &p, &sample.image, mode, rng)?;
    trace.reward = Some(reward(trace.predicted, sample.label));
    let loss = hybrid_loss(&mut tape, &trace, &graph, sample.label, baseline_weight)?;
    let loss_value = tape.scalar(loss);
    let cross_entropy = -crate::autodiff::softmax(&trace.logits)[sample.label].ln();
    tape.backward(loss)?;
    let grads = p.grads(&tape, &model.params);
    if !grads.is_finite() {
        return Err(Error::NonFinite("episode gradient".into()));
    }
    Ok(EpisodeOutcome {
        grads,
        loss: loss_value,
        cross_entropy,
        trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean hybrid loss. The policy term is a surrogate and can make it negative.
    pub loss: f64,
    pub cross_entropy: f64,
    pub accuracy: f64,
    pub mean_reward: f64,
}

/// Optimizer over a model with the baseline and locator heads on their own learning rates.
pub fn make_optimizer(model: &RamModel, cfg: &TrainConfig) -> Result<SgdMomentum> {
    let mut opt = SgdMomentum::new(&model.params, cfg.lr, cfg.momentum)?;
    for id in model.baseline_ids() {
        opt.set_lr(id, cfg.baseline_lr);
    }
    for id in model.locator_ids() {
        opt.set_lr(id, cfg.locator_lr);
    }
    Ok(opt)
}

/// One epoch: shuffle, then one optimizer step per minibatch of episodes.
/// Episodes of a batch run against the same parameter snapshot and their
/// gradients are summed in episode order.
pub fn train_epoch(
    model: &mut RamModel,
    opt: &mut SgdMomentum,
    data: &[LabeledImage],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    let mut shuffle_rng = stream(cfg.seed, &[tag::SHUFFLE, epoch as u64]);
    let episodes = if cfg.episodes_per_epoch == 0 {
        data.len()
    } else {
        cfg.episodes_per_epoch
    };
    let mut order = Vec::with_capacity(episodes);
    while order.len() < episodes {
        let mut pass: Vec<usize> = (0..data.len()).collect();
        pass.shuffle(&mut shuffle_rng);
        order.extend(pass.into_iter().take(episodes - order.len()));
    }

    let (mut loss_sum, mut ce_sum, mut reward_sum) = (0.0, 0.0, 0.0);
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let base = b * cfg.batch_size;
        let snapshot: &RamModel = model;
        let outcomes: Vec<Result<EpisodeOutcome>> = batch
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let mut rng = stream(cfg.seed, &[tag::EPISODE, epoch as u64, (base + k) as u64]);
                episode_gradient(snapshot, &data[i], cfg.train_mode, cfg.baseline_weight, &mut rng)
            })
            .collect();
        let mut grads = Grads::zeros_like(&model.params);
        for o in outcomes {
            let o = o?;
            grads.add_assign(&o.grads);
            loss_sum += o.loss;
            ce_sum += o.cross_entropy;
            reward_sum += o.trace.reward.unwrap_or(0.0);
        }
        grads.scale(1.0 / batch.len() as f64);
        opt.step(&mut model.params, &grads)?;
    }
    let n = episodes as f64;
    Ok(EpochMetrics {
        epoch,
        loss: loss_sum / n,
        cross_entropy: ce_sum / n,
        accuracy: reward_sum / n,
        mean_reward: reward_sum / n,
    })
}

/// Visit counts over a grid of `cell × cell` pixel blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub cell: usize,
    pub rows: usize,
    pub cols: usize,
    pub counts: Vec<u64>,
}

impl Heatmap {
    pub fn new(image_side: usize, cell: usize) -> Self {
        let n = image_side.div_ceil(cell);
        Self {
            cell,
            rows: n,
            cols: n,
            counts: vec![0; n * n],
        }
    }

    pub fn add_pixel(&mut self, row: i64, col: i64, times: u64) {
        let r = (row.max(0) as usize / self.cell).min(self.rows - 1);
        let c = (col.max(0) as usize / self.cell).min(self.cols - 1);
        self.counts[r * self.cols + c] += times;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn get(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.cols + col]
    }

    /// Comma-separated counts, one grid row per line.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in 0..self.rows {
            let line: Vec<String> = (0..self.cols).map(|c| self.get(r, c).to_string()).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    /// Renders counts at image resolution, brightest where visited most.
    pub fn to_pixels(&self, image_side: usize) -> Vec<u8> {
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let mut px = Vec::with_capacity(image_side * image_side);
        for r in 0..image_side {
            for c in 0..image_side {
                let v = self.get((r / self.cell).min(self.rows - 1), (c / self.cell).min(self.cols - 1));
                px.push((v as f64 / max * 255.0).round() as u8);
            }
        }
        px
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub accuracy: f64,
    pub heatmap: Heatmap,
    /// Mean pixel distance from the last glimpse to the target centre over positives with a known target.
    pub final_target_distance: Option<f64>,
}

/// Evaluates `repeats` rollouts per image and bins every visited location.
/// Greedy rollouts are deterministic, so in that mode each image is rolled
/// out once and its outcome weighted by `repeats`.
pub fn validate(
    model: &RamModel,
    data: &[LabeledImage],
    mode: LocationMode,
    repeats: usize,
    heatmap_cell: usize,
    seed: u64,
) -> Result<Validation> {
    if repeats == 0 || heatmap_cell == 0 {
        return Err(Error::Config("repeats and heatmap cell must be positive".into()));
    }
    let side = model.cfg.image_side;
    let passes = if mode == LocationMode::Greedy { 1 } else { repeats };
    let weight = (repeats / passes) as u64;
    let traces: Vec<Result<(usize, EpisodeTrace)>> = (0..passes)
        .flat_map(|r| (0..data.len()).map(move |i| (r, i)))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&(r, i)| {
            let mut rng = stream(seed, &[tag::VALIDATE, r as u64, i as u64]);
            Ok((i, model.rollout(&data[i].image, mode, &mut rng)?))
        })
        .collect();

    let mut heatmap = Heatmap::new(side, heatmap_cell);
    let (mut correct, mut total) = (0u64, 0u64);
    let (mut dist_sum, mut dist_n) = (0.0, 0usize);
    for item in traces {
        let (i, trace) = item?;
        for loc in trace.locations() {
            let (r, c) = anchor_pixel(loc, side);
            heatmap.add_pixel(r, c, weight);
        }
        total += weight;
        if trace.predicted == data[i].label {
            correct += weight;
        }
        if let (1, Some((mx, my))) = (data[i].label, data[i].meta) {
            let (row, col) = trace.steps.last().expect("non-empty episode").pixel;
            dist_sum += ((col - mx).powi(2) + (row - my).powi(2)).sqrt();
            dist_n += 1;
        }
    }
    Ok(Validation {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        heatmap,
        final_target_distance: (dist_n > 0).then(|| dist_sum / dist_n as f64),
    })
}

/// Accuracy when every location after the first is drawn uniformly from
/// `[-1, 1]²` instead of by the locator; `repeats` random paths per image.
pub fn random_policy_ablation(model: &RamModel, data: &[LabeledImage], repeats: usize, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let jobs: Vec<(usize, usize)> = (0..repeats.max(1))
        .flat_map(|r| (0..data.len()).map(move |i| (r, i)))
        .collect();
    let hits: Vec<Result<bool>> = jobs
        .par_iter()
        .map(|&(r, i)| {
            let mut rng = stream(seed, &[tag::ABLATION, r as u64, i as u64]);
            let trace = model.rollout(&data[i].image, LocationMode::UniformRandom, &mut rng)?;
            Ok(trace.predicted == data[i].label)
        })
        .collect();
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / jobs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkReport {
    pub chunk: usize,
    /// Number of epochs completed when this chunk closed.
    pub end_epoch: usize,
    pub validation: Validation,
}

/// Progress notifications from [`run_training`].
pub enum TrainEvent<'a> {
    Epoch(&'a EpochMetrics),
    Chunk(&'a ChunkReport, &'a RamModel),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochMetrics>,
    pub chunks: Vec<ChunkReport>,
}

/// Alternates training epochs with per-chunk validation. The last chunk is
/// truncated when `chunk_epochs` does not divide `epochs`.
pub fn run_training(
    model: &mut RamModel,
    train: &[LabeledImage],
    val: &[LabeledImage],
    cfg: &TrainConfig,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainingHistory> {
    cfg.validate()?;
    let mut history = TrainingHistory::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    if train.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    let mut opt = make_optimizer(model, cfg)?;
    for epoch in 0..cfg.epochs {
        let m = train_epoch(model, &mut opt, train, cfg, epoch)?;
        log::info!(
            "epoch {} loss {:.4} acc {:.3} reward {:.3}",
            m.epoch,
            m.loss,
            m.accuracy,
            m.mean_reward
        );
        on_event(TrainEvent::Epoch(&m))?;
        history.epochs.push(m);

        let done = epoch + 1;
        if done % cfg.chunk_epochs == 0 || done == cfg.epochs {
            let chunk = history.chunks.len();
            let validation = validate(
                model,
                val,
                cfg.validation_mode,
                cfg.validation_repeats,
                cfg.heatmap_cell,
                crate::rng::derive_seed(cfg.seed, &[chunk as u64]),
            )?;
            log::info!(
                "chunk {chunk} (epoch {done}) val acc {:.3} final-target distance {:?}",
                validation.accuracy,
                validation.final_target_distance
            );
            let report = ChunkReport {
                chunk,
                end_epoch: done,
                validation,
            };
            on_event(TrainEvent::Chunk(&report, model))?;
            history.chunks.push(report);
        }
    }
    Ok(history)
}
