//! Traces token counts and widths through the U-shaped network.
//!
//! Usage: `model_shapes [size] [embed_dim]` (defaults 224 and 8).

use transdae::model::{Model, ModelConfig, Network};
use transdae::nn::InitScheme;
use transdae_tensor::{Graph, Tensor};

fn main() -> transdae::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("numeric argument"));
    let size = args.next().unwrap_or(224);
    let embed_dim = args.next().unwrap_or(8);
    let cfg = ModelConfig {
        input_size: (size, size),
        embed_dim,
        depths: [1, 1, 1],
        bottleneck_depth: 1,
        num_classes: 9,
        ..ModelConfig::default()
    };
    let model = Model::<f32>::init(cfg.clone(), 0, InitScheme::Default)?;
    let mut g = Graph::new();
    let bound = model.params.bind_frozen(&mut g);
    let net = Network::bind(&cfg, &bound)?;
    let x = g.constant(Tensor::zeros([1, size, size, cfg.in_channels]));
    let trace = net.forward(&mut g, x)?.trace;

    println!("{:<12} {:>8} {:>10} {:>5}", "stage", "tokens", "grid", "dim");
    for (i, s) in trace.encoder.iter().enumerate() {
        let name = if i < 3 { format!("encoder {}", i + 1) } else { "bottleneck".into() };
        println!("{name:<12} {:>8} {:>10} {:>5}", s.tokens, format!("{:?}", s.grid), s.dim);
    }
    for (i, s) in trace.decoder.iter().enumerate() {
        println!("{:<12} {:>8} {:>10} {:>5}", format!("decoder {}", i + 1), s.tokens, format!("{:?}", s.grid), s.dim);
    }
    println!("logits {:?}, {} parameters", trace.logits, model.params.iter().map(|(_, t)| t.numel()).sum::<usize>());
    Ok(())
}
