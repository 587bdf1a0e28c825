//! Finite-difference verification of every block type and of the full network.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use transdae_tensor::gradcheck::{finite_diff_check_coords, all_coords, DEFAULT_EPS, DEFAULT_TOLERANCE};
use transdae_tensor::{Graph, OpKind, Tensor, TensorError, Var};

use crate::attention::{BlockConfig, DualBlock, EfficientAttention, FeedForward, Normalization, ReducedAttention};
use crate::error::{Error, Result};
use crate::isim::{LargeKernelAttention, LkaConfig, SkipFusion};
use crate::model::{final_project, patch_embed, patch_expand, patch_merge, ModelConfig, Network};
use crate::nn::{BoundParams, Init, ParamRegistry, ParamSpec};
use crate::tokens::TokenMap;
use crate::train::segmentation_loss;

/// Backward rules are scaled by this factor when a fault is injected.
pub const FAULT_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub eps: f64,
    pub tolerance: f64,
    /// Parameter coordinates sampled for the end-to-end check.
    pub model_coords: usize,
    pub model: ModelConfig,
    /// Corrupt the backward rule of this op family (harness self-test).
    pub inject_fault: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            eps: DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
            model_coords: 256,
            model: ModelConfig::tiny(),
            inject_fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub eps: f64,
    pub tolerance: f64,
    pub inject_fault: Option<String>,
    pub components: Vec<ComponentReport>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn component(&self, name: &str) -> Option<&ComponentReport> {
        self.components.iter().find(|c| c.component == name)
    }
}

fn to_tensor_error(e: Error) -> TensorError {
    match e.root() {
        Error::Tensor(t) => t.clone(),
        other if other.is_numeric() => TensorError::Numeric(e.to_string()),
        _ => TensorError::Contract(e.to_string()),
    }
}

/// Parameter values spread enough that every path carries signal: weights
/// and offsets uniform in `[-0.5, 0.5]`, scales in `[0.5, 1.5]`.
fn random_params(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    specs
        .iter()
        .map(|s| {
            let base = if s.init == Init::Ones { 1.0 } else { 0.0 };
            Tensor::from_fn(s.shape.clone(), |_| base + rng.random_range(-0.5..0.5))
        })
        .collect()
}

/// A differentiable piece of the network: parameter declarations plus a
/// forward pass from `(input, params)` to some tensor.
type ForwardFn = Box<dyn Fn(&mut Graph<f64>, Var, &BoundParams) -> Result<Var>>;

struct Component {
    name: &'static str,
    input: Vec<usize>,
    specs: Vec<ParamSpec>,
    forward: ForwardFn,
}

fn component(
    name: &'static str,
    input: &[usize],
    register: impl FnOnce(&mut ParamRegistry),
    forward: impl Fn(&mut Graph<f64>, Var, &BoundParams) -> Result<Var> + 'static,
) -> Component {
    let mut reg = ParamRegistry::new();
    register(&mut reg);
    Component {
        name,
        input: input.to_vec(),
        specs: reg.into_specs(),
        forward: Box::new(forward),
    }
}

fn block_components() -> Vec<Component> {
    let lka = LkaConfig::default();
    let dual = BlockConfig::new(8, 2, 2);
    let baseline = BlockConfig {
        spatial: false,
        ..dual
    };
    vec![
        component(
            "efficient_attention",
            &[1, 6, 8],
            |r| EfficientAttention::register_default(r, "a", 8),
            |g, x, p| EfficientAttention::bind(&p.scope("a"), Normalization::Softmax)?.forward(g, x),
        ),
        component(
            "reduced_attention",
            &[1, 8, 8],
            |r| ReducedAttention::register(r, "a", 8, 2),
            |g, x, p| ReducedAttention::bind(&p.scope("a"), 2, 2)?.forward(g, x),
        ),
        component(
            "feed_forward",
            &[1, 4, 8],
            |r| FeedForward::register(r, "f", 8),
            |g, x, p| FeedForward::bind(&p.scope("f"))?.forward(g, x),
        ),
        component(
            "dual_block",
            &[1, 4, 8],
            move |r| DualBlock::register(r, "b", &dual),
            move |g, x, p| DualBlock::bind(&p.scope("b"), &dual)?.forward(g, x),
        ),
        component(
            "baseline_block",
            &[1, 4, 8],
            move |r| DualBlock::register(r, "b", &baseline),
            move |g, x, p| DualBlock::bind(&p.scope("b"), &baseline)?.forward(g, x),
        ),
        component(
            "large_kernel_attention",
            &[1, 5, 5, 2],
            move |r| LargeKernelAttention::register(r, "l", 2, &lka),
            move |g, x, p| LargeKernelAttention::bind(&p.scope("l"), 2, &lka)?.forward(g, x),
        ),
        component(
            "skip_fusion",
            &[2, 16, 4],
            move |r| SkipFusion::register(r, "s", 4, Some(&lka)),
            move |g, x, p| {
                // batch entry 0 is the decoder stream, entry 1 the encoder skip
                let flat = g.reshape(x, &[2, 64])?;
                let mut maps = Vec::with_capacity(2);
                for i in 0..2 {
                    let mut e = Tensor::zeros([1, 2]);
                    e.data_mut()[i] = 1.0;
                    let e = g.constant(e);
                    let row = g.matmul(e, flat)?;
                    let row = g.reshape(row, &[1, 16, 4])?;
                    maps.push(TokenMap::new(g, row, (4, 4))?);
                }
                let out = SkipFusion::bind(&p.scope("s"), 4, Some(&lka))?.forward(g, &maps[0], &maps[1])?;
                Ok(out.tokens)
            },
        ),
        component(
            "patch_embed",
            &[1, 8, 8, 1],
            |r| {
                let cfg = ModelConfig {
                    embed_dim: 4,
                    ..ModelConfig::tiny()
                };
                r.conv("e.proj", &cfg.embed_spec(), true);
                r.layer_norm("e.norm", 4);
            },
            |g, x, p| {
                let cfg = ModelConfig {
                    embed_dim: 4,
                    ..ModelConfig::tiny()
                };
                let s = p.scope("e");
                let t = patch_embed(g, x, &s.conv("proj", cfg.embed_spec())?, &s.layer_norm("norm")?)?;
                Ok(t.tokens)
            },
        ),
        component(
            "patch_merge",
            &[1, 16, 4],
            |r| r.linear("m", 16, 8, false),
            |g, x, p| {
                let t = TokenMap::new(g, x, (4, 4))?;
                Ok(patch_merge(g, &t, &p.scope("").linear("m")?)?.tokens)
            },
        ),
        component(
            "patch_expand",
            &[1, 4, 8],
            |r| r.linear("x", 8, 16, false),
            |g, x, p| {
                let t = TokenMap::new(g, x, (2, 2))?;
                Ok(patch_expand(g, &t, &p.scope("").linear("x")?)?.tokens)
            },
        ),
        component(
            "final_project",
            &[1, 4, 4],
            |r| {
                r.linear("h.expand", 4, 64, false);
                r.linear("h.proj", 4, 3, true);
            },
            |g, x, p| {
                let t = TokenMap::new(g, x, (2, 2))?;
                let s = p.scope("h");
                final_project(g, &t, &s.linear("expand")?, &s.linear("proj")?, (8, 8))
            },
        ),
    ]
}

/// Checks one component over all its input and parameter coordinates.
fn check_component(c: &Component, opts: &GradcheckOptions, fault: Option<OpKind>) -> Result<ComponentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut inputs = vec![Tensor::from_fn(c.input.clone(), |_| rng.random_range(-1.0..1.0))];
    inputs.extend(random_params(&c.specs, &mut rng));
    let names: Vec<String> = c.specs.iter().map(|s| s.name.clone()).collect();
    let proj_seed = rng.random::<u64>();
    let report = finite_diff_check_coords(
        |g, vars| {
            if let Some(kind) = fault {
                g.inject_backward_fault(kind, FAULT_FACTOR);
            }
            let bound = BoundParams::from_vars(names.iter().map(String::as_str).zip(vars[1..].iter().copied()));
            let y = (c.forward)(g, vars[0], &bound).map_err(to_tensor_error)?;
            let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
            let r = g.constant(Tensor::from_fn(g.shape(y).to_vec(), |_| prng.random_range(-1.0..1.0)));
            let yr = g.mul(y, r)?;
            g.sum(yr)
        },
        &inputs,
        opts.eps,
        &all_coords(&inputs),
    )?;
    Ok(ComponentReport {
        component: c.name.to_string(),
        max_rel_error: report.max_rel_error,
        max_abs_error: report.max_abs_error,
        checked: report.checked,
        passed: report.passes(opts.tolerance),
    })
}

/// End-to-end check of the training loss on `opts.model`, over a random
/// sample of parameter coordinates.
fn check_model(opts: &GradcheckOptions, fault: Option<OpKind>) -> Result<ComponentReport> {
    let cfg = &opts.model;
    cfg.validate()?;
    let specs = cfg.param_specs();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xe2e);
    let (h, w) = cfg.input_size;
    let image = Tensor::from_fn([1, h, w, cfg.in_channels], |_| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..cfg.num_classes)).collect();
    // moderate weights keep the deep stack away from saturation
    let params: Vec<Tensor<f64>> = random_params(&specs, &mut rng)
        .into_iter()
        .zip(&specs)
        .map(|(t, s)| if s.init == Init::Ones { t } else { t.map(|v| v * 0.4) })
        .collect();
    let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
    let all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let picked: Vec<(usize, usize)> = sample(&mut rng, all.len(), opts.model_coords.min(all.len()))
        .into_iter()
        .map(|k| all[k])
        .collect();
    let report = finite_diff_check_coords(
        |g, vars| {
            if let Some(kind) = fault {
                g.inject_backward_fault(kind, FAULT_FACTOR);
            }
            let bound = BoundParams::from_vars(names.iter().map(String::as_str).zip(vars.iter().copied()));
            let run = |g: &mut Graph<f64>| -> Result<Var> {
                let net = Network::bind(cfg, &bound)?;
                let x = g.constant(image.clone());
                let out = net.forward(g, x)?;
                segmentation_loss(g, out.logits, &labels, 0.5, 0.5)
            };
            run(g).map_err(to_tensor_error)
        },
        &params,
        opts.eps,
        &picked,
    )?;
    Ok(ComponentReport {
        component: "model".into(),
        max_rel_error: report.max_rel_error,
        max_abs_error: report.max_abs_error,
        checked: report.checked,
        passed: report.passes(opts.tolerance),
    })
}

/// Checks every block type and the end-to-end model in 64-bit precision.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let fault = opts
        .inject_fault
        .as_deref()
        .map(|s| s.parse::<OpKind>().map_err(|e| Error::Config(format!("{e}"))))
        .transpose()?;
    let mut components = block_components()
        .iter()
        .map(|c| check_component(c, opts, fault))
        .collect::<Result<Vec<_>>>()?;
    components.push(check_model(opts, fault)?);
    Ok(GradcheckReport {
        seed: opts.seed,
        eps: opts.eps,
        tolerance: opts.tolerance,
        inject_fault: opts.inject_fault.clone(),
        passed: components.iter().all(|c| c.passed),
        components,
    })
}

/// Names of the components [`run_gradcheck`] reports, in order.
pub fn component_names() -> Vec<&'static str> {
    let mut names: Vec<&'static str> = block_components().iter().map(|c| c.name).collect();
    names.push("model");
    names
}
