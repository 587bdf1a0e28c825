//! Trains a small model on a handful of synthetic images and reports how well
//! it fits them.
//!
//! Usage: `train_overfit [epochs] [variant]`, variant one of `baseline`,
//! `dual`, `dual+isim` (defaults 40 and `dual+isim`). Runs at 32x32 so it
//! finishes in well under a minute in release mode.

use transdae::data::{Dataset, SynthSpec};
use transdae::model::{ModelConfig, Variant};
use transdae::train::{OptimizerKind, TrainConfig, Trainer};

fn main() -> transdae::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(40, |a| a.parse().expect("epochs must be a number"));
    let variant: Variant = match args.next() {
        Some(v) => serde_json::from_value(serde_json::Value::String(v)).expect("unknown variant"),
        None => Variant::DualIsim,
    };
    let spec = SynthSpec {
        size: (32, 32),
        seed: 1,
        ..SynthSpec::default()
    };
    let data = Dataset::synthesize(&spec, 16)?;
    let cfg = TrainConfig {
        model: ModelConfig {
            variant,
            ..ModelConfig::tiny()
        },
        optimizer: OptimizerKind::Adam,
        lr: 2e-3,
        batch_size: 4,
        max_epochs: epochs,
        early_stop_patience: epochs,
        seed: 0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::new(cfg)?;
    let log = trainer.run(&data, &data, |t| {
        let e = t.history.last().expect("run reports after each epoch");
        if e.epoch % 5 == 0 {
            println!("epoch {:>3}  loss {:.4}  train dice {:.4}", e.epoch, e.train_loss, e.val_dice);
        }
        Ok(())
    })?;
    println!(
        "{}: best dice {:.4} at epoch {} ({:?})",
        variant.name(),
        log.best_val_dice,
        log.best_epoch,
        log.stop_reason
    );
    Ok(())
}
