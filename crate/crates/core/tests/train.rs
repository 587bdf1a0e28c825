use transdae::data::{Dataset, SynthSpec};
use transdae::io::{load_checkpoint, save_checkpoint};
use transdae::model::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transdae::train::{soft_dice_loss, LrSchedule, OptimizerKind, StopReason, TrainConfig, Trainer, DICE_SMOOTH};
use transdae_tensor::{Graph, Tensor};
use transdae::Error;

fn tiny_data(count: usize, seed: u64) -> Dataset {
    let spec = SynthSpec {
        size: (32, 32),
        seed,
        ..SynthSpec::default()
    };
    Dataset::synthesize(&spec, count).unwrap()
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::tiny(),
        optimizer: OptimizerKind::Adam,
        lr: 2e-3,
        batch_size: 4,
        max_epochs: 6,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn training_reduces_loss() {
    let data = tiny_data(16, 1);
    let mut t = Trainer::<f32>::new(TrainConfig {
        max_epochs: 10,
        ..tiny_config(0)
    })
    .unwrap();
    let log = t.run(&data, &data, |_| Ok(())).unwrap();
    let first = log.epochs.first().unwrap().train_loss;
    let last = log.epochs.last().unwrap().train_loss;
    assert!(last < first, "loss went from {first} to {last}");
    assert_eq!(log.epochs.len(), 10);
    assert_eq!(log.stop_reason, StopReason::MaxEpochs);
    assert!(log.epochs.windows(2).all(|w| w[1].epoch == w[0].epoch + 1));
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = tiny_data(8, 2);
    let run = || {
        let mut t = Trainer::<f32>::new(tiny_config(5)).unwrap();
        let log = t.run(&data, &data, |_| Ok(())).unwrap();
        (log, t.model)
    };
    let (log_a, model_a) = run();
    let (log_b, model_b) = run();
    assert!(log_a.same_trajectory(&log_b));
    assert_eq!(model_a, model_b);
    let mut other = Trainer::<f32>::new(tiny_config(6)).unwrap();
    let log_c = other.run(&data, &data, |_| Ok(())).unwrap();
    assert!(!log_a.same_trajectory(&log_c));
}

#[test]
fn frozen_validation_metric_stops_at_eleventh_epoch() {
    // an update far below f32 resolution leaves every weight, and so the metric, unchanged
    let data = tiny_data(4, 3);
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        lr: 1e-30,
        weight_decay: 0.0,
        max_epochs: 40,
        early_stop_patience: 10,
        ..tiny_config(0)
    };
    let mut t = Trainer::<f32>::new(cfg).unwrap();
    let log = t.run(&data, &data, |_| Ok(())).unwrap();
    assert_eq!(log.stop_reason, StopReason::EarlyStop);
    assert_eq!(log.epochs.len(), 11);
    let first = log.epochs[0].val_dice;
    assert!(log.epochs.iter().all(|e| e.val_dice == first));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(8, 4);
    let cfg = TrainConfig {
        lr_schedule: LrSchedule::Cosine,
        ..tiny_config(9)
    };
    let mut full = Trainer::<f32>::new(cfg.clone()).unwrap();
    let full_log = full.run(&data, &data, |_| Ok(())).unwrap();

    let mut first = Trainer::<f32>::new(cfg).unwrap();
    for _ in 0..3 {
        first.step_epoch(&data, &data).unwrap();
    }
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&path, &first.checkpoint()).unwrap();
    drop(first);
    let ckpt = load_checkpoint::<f32>(&path, None).unwrap();
    let mut resumed = Trainer::resume(&ckpt).unwrap();
    assert_eq!(resumed.epoch, 3);
    let resumed_log = resumed.run(&data, &data, |_| Ok(())).unwrap();
    assert!(resumed_log.same_trajectory(&full_log));
    assert_eq!(resumed.model, full.model);
}

#[test]
fn loss_stays_finite_on_default_overfit_config() {
    let spec = SynthSpec {
        seed: 1,
        ..SynthSpec::default()
    };
    let data = Dataset::synthesize(&spec, 16).unwrap();
    for seed in 0..10 {
        let cfg = TrainConfig {
            model: ModelConfig {
                embed_dim: 16,
                ..ModelConfig::default()
            },
            max_epochs: 5,
            seed,
            ..TrainConfig::default()
        };
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        let log = t.run(&data, &data, |_| Ok(())).unwrap();
        for e in &log.epochs {
            assert!(e.train_loss.is_finite() && e.val_loss.is_finite(), "seed {seed}: {e:?}");
        }
    }
}

#[test]
fn non_finite_input_reports_the_batch() {
    let mut data = tiny_data(4, 5);
    data.samples[2].image.data_mut()[7] = f32::NAN;
    let mut t = Trainer::<f32>::new(tiny_config(1)).unwrap();
    let err = t.train_epoch(&data).unwrap_err();
    assert!(err.is_numeric());
    assert_eq!(err.exit_code(), 2);
    let msg = err.to_string();
    assert!(msg.contains("shuffle seed") && msg.contains("epoch 1"), "{msg}");
}

#[test]
fn cosine_schedule_runs_from_lr_to_zero() {
    let cfg = TrainConfig {
        lr: 0.4,
        max_epochs: 4,
        lr_schedule: LrSchedule::Cosine,
        ..TrainConfig::default()
    };
    let lrs: Vec<f64> = (0..5).map(|e| cfg.lr_at(e)).collect();
    let expected = [0.4, 0.2 * (1.0 + std::f64::consts::FRAC_1_SQRT_2), 0.2, 0.2 * (1.0 - std::f64::consts::FRAC_1_SQRT_2), 0.0];
    for (a, b) in lrs.iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(TrainConfig::default().lr_at(100), 1e-3);
}

#[test]
fn config_json_rejects_unknown_fields_and_bad_rates() {
    let cfg: TrainConfig = serde_json::from_str(r#"{"lr": 0.01, "optimizer": "adam"}"#).unwrap();
    assert_eq!(cfg.batch_size, 8);
    assert_eq!(cfg.early_stop_patience, 10);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 0.01}"#).is_err());
    let bad = TrainConfig {
        lr: -1.0,
        ..TrainConfig::default()
    };
    assert!(matches!(Trainer::<f32>::new(bad), Err(Error::Config(_))));
}

#[test]
fn soft_dice_scores_each_image_separately() {
    let (b, n, k) = (3, 10, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let logits: Vec<f64> = (0..b * n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
    // class 3 never appears in the first image
    let labels: Vec<usize> = (0..b * n).map(|i| if i < n { rng.random_range(0..3) } else { rng.random_range(0..k) }).collect();

    let mut total = 0.0;
    for s in 0..b {
        for c in 0..k {
            let (mut inter, mut psum, mut count) = (0.0, 0.0, 0.0);
            for p in 0..n {
                let row = &logits[(s * n + p) * k..(s * n + p + 1) * k];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                let prob = row[c].exp() / z;
                let hit = (labels[s * n + p] == c) as u8 as f64;
                inter += prob * hit;
                psum += prob;
                count += hit;
            }
            total += (2.0 * inter + DICE_SMOOTH) / (psum + count + DICE_SMOOTH);
        }
    }
    let expected = 1.0 - total / (b * k) as f64;

    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new([b, 2, 5, k], logits).unwrap());
    let loss = soft_dice_loss(&mut g, x, &labels).unwrap();
    assert!((g.value(loss).item().unwrap() - expected).abs() < 1e-12);
}
