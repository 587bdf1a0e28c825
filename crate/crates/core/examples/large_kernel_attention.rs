//! Probes the decomposed large-kernel attention with a unit impulse.
//!
//! A local depthwise kernel, a dilated depthwise kernel and a pointwise mix
//! together cover a square whose side is printed next to the predicted value.

use transdae::isim::{LargeKernelAttention, LkaConfig};
use transdae::nn::{ModelParams, ParamRegistry};
use transdae_tensor::{Graph, Tensor};

fn main() -> transdae::Result<()> {
    let size = 41;
    let centre = size / 2;
    for (kernel, dilation) in [(10, 2), (21, 3)] {
        let cfg = LkaConfig { kernel, dilation };
        let mut reg = ParamRegistry::new();
        LargeKernelAttention::register(&mut reg, "lka", 1, &cfg);
        let mut params = ModelParams::<f64>::new();
        for spec in reg.into_specs() {
            let fill = if spec.name.ends_with("bias") { 0.0 } else { 1.0 };
            params.insert(spec.name, Tensor::from_fn(spec.shape, |_| fill));
        }

        let mut impulse = Tensor::zeros([1, size, size, 1]);
        impulse.data_mut()[centre * size + centre] = 1.0;
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let lka = LargeKernelAttention::bind(&bound.scope("lka"), 1, &cfg)?;
        let x = g.constant(impulse);
        let map = lka.attention_map(&mut g, x)?;
        let map = g.value(map);
        let rows = (0..size).filter(|&y| (0..size).any(|x| map.at(&[0, y, x, 0]) != 0.0)).count();

        println!(
            "K={kernel:>2} d={dilation}: local {0}x{0}, dilated {1}x{1}, support {rows} (expected {2}), params {3} vs dense {4}",
            cfg.local_kernel(),
            cfg.dilated_kernel(),
            cfg.receptive_field(),
            cfg.param_count(16),
            cfg.dense_param_count(16),
        );
    }
    Ok(())
}
