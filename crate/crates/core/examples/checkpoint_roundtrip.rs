//! Saves a model and a mid-training state, reloads both, and checks that the
//! weights come back bit for bit and that resuming retraces the same run.

use transdae::data::{Dataset, SynthSpec};
use transdae::io::{load_checkpoint, read_tensor, save_checkpoint, write_tensor};
use transdae::model::ModelConfig;
use transdae::train::{OptimizerKind, TrainConfig, Trainer};
use transdae_tensor::Tensor;

fn main() -> transdae::Result<()> {
    let dir = tempfile::tempdir()?;

    let t = Tensor::<f64>::from_fn([3, 5], |i| (i as f64).sin() / 7.0);
    write_tensor(&dir.path().join("t.tdae"), &t)?;
    let back: Tensor<f64> = read_tensor(&dir.path().join("t.tdae"))?;
    let bitwise = t.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("tensor round trip bitwise equal: {bitwise}");

    let data = Dataset::synthesize(&SynthSpec { size: (32, 32), seed: 2, ..SynthSpec::default() }, 8)?;
    let cfg = TrainConfig {
        model: ModelConfig::tiny(),
        optimizer: OptimizerKind::Adam,
        lr: 2e-3,
        batch_size: 4,
        max_epochs: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut full = Trainer::<f32>::new(cfg.clone())?;
    let full_log = full.run(&data, &data, |_| Ok(()))?;

    let mut first = Trainer::<f32>::new(cfg)?;
    for _ in 0..2 {
        first.step_epoch(&data, &data)?;
    }
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&path, &first.checkpoint())?;
    let ckpt = load_checkpoint::<f32>(&path, None)?;
    println!("checkpoint params bitwise equal: {}", ckpt.params == first.model.params);

    let mut resumed = Trainer::resume(&ckpt)?;
    let resumed_log = resumed.run(&data, &data, |_| Ok(()))?;
    println!(
        "resumed from epoch 2: same trajectory {}, same final weights {}",
        resumed_log.same_trajectory(&full_log),
        resumed.model == full.model
    );
    Ok(())
}
