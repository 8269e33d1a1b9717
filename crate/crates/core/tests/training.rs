mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ram_core::encoder::{cae_pretrain, reconstruction_mse, sample_glimpse_patches, PretrainConfig};
use ram_core::synth::generate;
use ram_core::trainer::{reward, run_training, validate, TrainEvent};
use ram_core::{LabeledImage, LocationMode, ModelConfig, RamModel, SynthConfig, Task, Tensor, TrainConfig};

fn small_task(task: Task, side: usize, count: usize, seed: u64) -> Vec<LabeledImage> {
    let cfg = SynthConfig {
        task,
        side,
        seed,
        ..SynthConfig::default()
    };
    generate(&cfg, count).unwrap()
}

fn quick_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        chunk_epochs: 2,
        validation_repeats: 2,
        heatmap_cell: 6,
        ..TrainConfig::default()
    }
}

#[test]
fn random_guessing_earns_half_the_reward() {
    let data = small_task(Task::Cardio, 32, 10_000, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let total: f64 = data.iter().map(|d| reward(rng.gen_range(0..2), d.label)).sum();
    let mean = total / data.len() as f64;
    // Bernoulli(1/2) standard error over 10^4 trials
    let se = 0.5 / (data.len() as f64).sqrt();
    assert!((mean - 0.5).abs() < 3.0 * se, "mean reward {mean}");
}

#[test]
fn ten_image_set_is_memorised() {
    let mut cfg = small_model_config(3);
    cfg.hidden = 24;
    cfg.fuse_dim = 24;
    let mut model = RamModel::new(cfg, 2).unwrap();
    let data = small_task(Task::Cardio, 24, 10, 8);
    let train_cfg = TrainConfig {
        epochs: 500,
        batch_size: 10,
        lr: 0.05,
        chunk_epochs: 500,
        validation_repeats: 1,
        heatmap_cell: 6,
        ..TrainConfig::default()
    };
    let mut reached = None;
    let result = run_training(&mut model, &data, &data, &train_cfg, |e| {
        if let TrainEvent::Epoch(m) = e {
            if m.cross_entropy < 0.1 && m.loss.abs() < 0.1 {
                reached = Some(m.epoch);
                return Err(ram_core::Error::Argument("stop".into()));
            }
        }
        Ok(())
    });
    assert!(reached.is_some(), "losses never fell below 0.1: {result:?}");
}

#[test]
fn identical_runs_give_identical_histories_and_weights() {
    let data = small_task(Task::Device, 24, 24, 4);
    let (train, val) = data.split_at(18);
    let run = || {
        let mut model = RamModel::new(small_model_config(3), 9).unwrap();
        let history = run_training(&mut model, train, val, &quick_train(3), |_| Ok(())).unwrap();
        (history, model)
    };
    let (ha, ma) = run();
    let (hb, mb) = run();
    assert_eq!(ha, hb);
    for id in ma.params.ids() {
        let (a, b) = (ma.params.get(id).data(), mb.params.get(id).data());
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn every_chunk_heatmap_counts_each_glimpse_once_per_repeat() {
    let data = small_task(Task::Device, 24, 20, 6);
    let (train, val) = data.split_at(14);
    let n = 3;
    for mode in [LocationMode::Greedy, LocationMode::Sample] {
        let mut model = RamModel::new(small_model_config(n), 1).unwrap();
        let cfg = TrainConfig {
            validation_mode: mode,
            validation_repeats: 5,
            ..quick_train(5)
        };
        let history = run_training(&mut model, train, val, &cfg, |_| Ok(())).unwrap();
        assert_eq!(history.chunks.len(), 3);
        for c in &history.chunks {
            assert_eq!(c.validation.heatmap.total(), (n * 5 * val.len()) as u64, "{mode:?}");
        }
    }
}

#[test]
fn untrained_sampled_glimpses_cluster_at_the_centre() {
    let model = RamModel::new(ModelConfig::default(), 3).unwrap();
    let data = small_task(Task::Device, 64, 30, 2);
    let v = validate(&model, &data, LocationMode::Sample, 4, 8, 11).unwrap();
    let hm = &v.heatmap;
    let grid = 64 / 8;
    let mut best = (0, 0, 0);
    let mut near = 0;
    for r in 0..grid {
        for c in 0..grid {
            let count = hm.get(r, c);
            if count > best.0 {
                best = (count, r, c);
            }
            // the anchor of the centre location is pixel (32, 32): cell (4, 4)
            if r.abs_diff(4) <= 1 && c.abs_diff(4) <= 1 {
                near += count;
            }
        }
    }
    assert!(best.1.abs_diff(4) <= 1 && best.2.abs_diff(4) <= 1, "peak at {best:?}");
    assert!(near as f64 > 0.9 * hm.total() as f64, "{near} of {}", hm.total());
}

#[test]
fn pretraining_halves_held_out_reconstruction_error() {
    let cfg = small_model_config(2);
    let mut model = RamModel::new(cfg.clone(), 4).unwrap();
    let images: Vec<Tensor> = small_task(Task::Cardio, 24, 40, 1).into_iter().map(|d| d.image).collect();
    let (fit, held) = images.split_at(30);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let train_patches = sample_glimpse_patches(fit, &cfg.glimpse, 150, &mut rng).unwrap();
    let test_patches = sample_glimpse_patches(held, &cfg.glimpse, 50, &mut rng).unwrap();
    let layer = model.encoder.layers[0].clone();
    let before = reconstruction_mse(&model.params, &layer, &test_patches).unwrap();
    let stack = model.encoder.clone();
    let pcfg = PretrainConfig {
        epochs: 10,
        ..PretrainConfig::default()
    };
    cae_pretrain(&mut model.params, &stack, &train_patches, &pcfg, &mut rng).unwrap();
    let after = reconstruction_mse(&model.params, &layer, &test_patches).unwrap();
    assert!(after <= 0.5 * before, "held-out mse {before} -> {after}");
}
