//! Reverse-sweep soundness: every differentiable op against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transdae_tensor::gradcheck::{finite_diff_check, DEFAULT_EPS, DEFAULT_TOLERANCE};
use transdae_tensor::{Conv2dSpec, Graph, OpKind, Result, Tensor, Var};

const SEEDS: u64 = 20;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// `sum(y * r)` for a fixed random `r`, so every output coordinate matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = g.constant(random(g.shape(y), &mut rng));
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn check<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let report = finite_diff_check(
            |g, v| {
                let y = f(g, v)?;
                project(g, y, seed)
            },
            &inputs,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(
            report.passes(DEFAULT_TOLERANCE),
            "{name} seed {seed}: {report:?}"
        );
    }
}

#[test]
fn linear_function_is_exact() {
    // dyadic inputs and a power-of-two step make every difference exact
    let x = Tensor::from_f64([3], &[0.5, -1.25, 2.0]).unwrap();
    let report = finite_diff_check(|g, v| g.sum(v[0]), &[x], 1.0 / 1024.0).unwrap();
    assert_eq!(report.max_rel_error, 0.0);
}

#[test]
fn sum_of_squares_within_1e7() {
    let x = Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap();
    let report = finite_diff_check(
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        },
        &[x],
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-7, "{report:?}");
}

#[test]
fn elementwise_ops() {
    check("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
    check("add_broadcast", &[&[3, 4], &[4]], |g, v| g.add(v[0], v[1]));
    check("sub_broadcast", &[&[2, 3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]));
    check("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
    check("mul_broadcast", &[&[5, 2], &[2]], |g, v| g.mul(v[0], v[1]));
    check("div", &[&[3, 4], &[3, 4]], |g, v| {
        let d = g.add_scalar(v[1], 3.0)?;
        g.div(v[0], d)
    });
    check("scale", &[&[6]], |g, v| g.scale(v[0], -2.5));
    check("gelu", &[&[4, 5]], |g, v| g.gelu(v[0]));
    check("relu", &[&[4, 5]], |g, v| g.relu(v[0]));
}

#[test]
fn shape_ops() {
    check("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]));
    check("permute", &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]));
    check("concat", &[&[2, 3], &[2, 1], &[2, 2]], |g, v| {
        g.concat(&[v[0], v[1], v[2]], 1)
    });
    check("concat_axis0", &[&[1, 3], &[2, 3]], |g, v| g.concat(&[v[0], v[1]], 0));
}

#[test]
fn reductions() {
    check("sum", &[&[3, 4]], |g, v| g.sum(v[0]));
    check("mean", &[&[3, 4]], |g, v| g.mean(v[0]));
    check("sum_axis0", &[&[3, 4, 2]], |g, v| g.sum_axis(v[0], 0));
    check("sum_axis1", &[&[3, 4, 2]], |g, v| g.sum_axis(v[0], 1));
    check("sum_axis2", &[&[3, 4, 2]], |g, v| g.sum_axis(v[0], 2));
}

#[test]
fn matmul_variants() {
    check("matmul_2d", &[&[4, 3], &[3, 5]], |g, v| g.matmul(v[0], v[1]));
    check("matmul_3d_2d", &[&[2, 4, 3], &[3, 5]], |g, v| g.matmul(v[0], v[1]));
    check("matmul_3d_3d", &[&[2, 4, 3], &[2, 3, 5]], |g, v| g.matmul(v[0], v[1]));
    check("matmul_bcast_lhs", &[&[1, 4, 3], &[3, 3, 5]], |g, v| g.matmul(v[0], v[1]));
    check("matmul_2d_3d", &[&[4, 3], &[2, 3, 5]], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn softmax_and_norm() {
    check("softmax_last", &[&[3, 5]], |g, v| g.softmax(v[0], 1));
    check("softmax_first", &[&[3, 5]], |g, v| g.softmax(v[0], 0));
    check("softmax_mid", &[&[2, 3, 4]], |g, v| g.softmax(v[0], 1));
    check("layer_norm", &[&[4, 6], &[6], &[6]], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
}

#[test]
fn convolutions() {
    let dense = Conv2dSpec::new(2, 3, (3, 3)).with_padding(1);
    check("conv_dense", &[&[1, 5, 4, 2], &[3, 3, 2, 3], &[3]], move |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), &dense)
    });
    let dw = Conv2dSpec::depthwise(3, 3).with_padding(2).with_dilation(2);
    check("conv_depthwise_dilated", &[&[2, 5, 5, 3], &[3, 3, 1, 3]], move |g, v| {
        g.conv2d(v[0], v[1], None, &dw)
    });
    let strided = Conv2dSpec::new(1, 2, (3, 3)).with_stride(2).with_padding(1);
    check("conv_strided", &[&[1, 6, 6, 1], &[3, 3, 1, 2], &[2]], move |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), &strided)
    });
}

#[test]
fn cross_entropy_gradient() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&[2, 3, 4], &mut rng);
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
        let report =
            finite_diff_check(|g, v| g.cross_entropy(v[0], &labels), &[logits], DEFAULT_EPS)
                .unwrap();
        assert!(report.passes(DEFAULT_TOLERANCE), "seed {seed}: {report:?}");
    }
}

#[test]
fn matmul_softmax_chain() {
    check("chain", &[&[4, 3], &[3, 5], &[5, 2]], |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let s = g.softmax(h, 1)?;
        g.matmul(s, v[2])
    });
}

#[test]
fn injected_fault_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[3, 4], &mut rng);
    let report = finite_diff_check(
        |g, v| {
            g.inject_backward_fault(OpKind::Gelu, 1.5);
            let y = g.gelu(v[0])?;
            g.sum(y)
        },
        &[x],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(!report.passes(DEFAULT_TOLERANCE));
}
