//! Compares the linear-cost attention forms against the quadratic one.
//!
//! With identity normalisation, `q (k^T v)` and `(q k^T) v` are the same
//! product in two association orders. Reduced attention at ratio 1 is plain
//! multi-head attention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transdae::attention::{efficient_attention_core, multi_head_attention_core, Normalization, ReducedAttention};
use transdae::nn::{initialize, InitScheme, ParamRegistry};
use transdae_tensor::{Graph, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: [usize; 2]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn main() -> transdae::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (n, d) = (rng.random_range(1..=16), rng.random_range(1..=8));
        let mut g = Graph::<f64>::new();
        let q = g.constant(random(&mut rng, [n, d]));
        let k = g.constant(random(&mut rng, [n, d]));
        let v = g.constant(random(&mut rng, [n, d]));
        let linear = efficient_attention_core(&mut g, q, k, v, Normalization::Identity)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let quadratic = g.matmul(scores, v)?;
        for (a, b) in g.value(linear).data().iter().zip(g.value(quadratic).data()) {
            worst = worst.max((a - b).abs());
        }
    }
    println!("associativity: max |q(k^T v) - (q k^T)v| over 50 instances = {worst:.2e}");

    let (n, d, heads) = (12, 8, 2);
    let mut reg = ParamRegistry::new();
    ReducedAttention::register(&mut reg, "attn", d, 1);
    let params = initialize::<f64>(&reg.into_specs(), 3, InitScheme::Fidelity);
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let attn = ReducedAttention::bind(&bound.scope("attn"), heads, 1)?;
    let x = g.constant(Tensor::from_fn([1, n, d], |_| rng.random_range(-1.0..1.0)));
    let reduced = attn.forward(&mut g, x)?;

    // the same projections wired by hand around textbook attention
    let proj = |g: &mut Graph<f64>, name: &str, input| -> transdae::Result<_> {
        let w = g.constant(params.get(&format!("attn.{name}.weight")).unwrap().clone());
        let mut y = g.matmul(input, w)?;
        if let Some(b) = params.get(&format!("attn.{name}.bias")) {
            let b = g.constant(b.clone());
            y = g.add(y, b)?;
        }
        Ok(y)
    };
    let q = proj(&mut g, "w_q", x)?;
    let k = proj(&mut g, "w_k", x)?;
    let v = proj(&mut g, "w_v", x)?;
    let o = multi_head_attention_core(&mut g, q, k, v, heads)?;
    let standard = proj(&mut g, "w_out", o)?;
    let diff = g
        .value(reduced)
        .data()
        .iter()
        .zip(g.value(standard).data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("reduced attention at R=1 vs standard attention: max diff = {diff:.2e}");
    Ok(())
}
