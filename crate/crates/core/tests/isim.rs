use transdae::isim::{LargeKernelAttention, LkaConfig, SkipFusion};
use transdae::nn::{initialize, InitScheme, ModelParams, ParamRegistry};
use transdae::tokens::TokenMap;
use transdae_tensor::{Graph, Tensor};

/// All-ones depthwise kernels, identity channel mix, zero biases.
fn box_lka(channels: usize, cfg: &LkaConfig) -> ModelParams<f64> {
    let mut reg = ParamRegistry::new();
    LargeKernelAttention::register(&mut reg, "lka", channels, cfg);
    let mut params = ModelParams::new();
    for spec in reg.into_specs() {
        let t = if spec.name.ends_with("bias") {
            Tensor::zeros(spec.shape)
        } else if spec.name.starts_with("lka.pw_conv") {
            Tensor::eye(channels).reshape([1, 1, channels, channels]).unwrap()
        } else {
            Tensor::ones(spec.shape)
        };
        params.insert(spec.name, t);
    }
    params
}

fn attention_map(params: &ModelParams<f64>, cfg: &LkaConfig, input: Tensor<f64>) -> Tensor<f64> {
    let channels = *input.shape().last().unwrap();
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let lka = LargeKernelAttention::bind(&bound.scope("lka"), channels, cfg).unwrap();
    let x = g.constant(input);
    let a = lka.attention_map(&mut g, x).unwrap();
    g.value(a).clone()
}

fn lka_forward(params: &ModelParams<f64>, cfg: &LkaConfig, input: Tensor<f64>) -> Tensor<f64> {
    let channels = *input.shape().last().unwrap();
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let lka = LargeKernelAttention::bind(&bound.scope("lka"), channels, cfg).unwrap();
    let x = g.constant(input);
    let y = lka.forward(&mut g, x).unwrap();
    g.value(y).clone()
}

/// Rows and columns that carry any nonzero response.
fn support(t: &Tensor<f64>) -> (Vec<usize>, Vec<usize>) {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let rows = (0..h).filter(|&y| (0..w).any(|x| t.at(&[0, y, x, 0]) != 0.0)).collect();
    let cols = (0..w).filter(|&x| (0..h).any(|y| t.at(&[0, y, x, 0]) != 0.0)).collect();
    (rows, cols)
}

#[test]
fn impulse_response_spans_the_composed_receptive_field() {
    for (kernel, dilation, side) in [(10, 2, 11), (21, 3, 23)] {
        let cfg = LkaConfig { kernel, dilation };
        assert_eq!(cfg.receptive_field(), side);
        let size = 41;
        let c = size / 2;
        let mut impulse = Tensor::zeros([1, size, size, 1]);
        impulse.data_mut()[c * size + c] = 1.0;
        let map = attention_map(&box_lka(1, &cfg), &cfg, impulse);
        let (rows, cols) = support(&map);
        let half = side / 2;
        let expected: Vec<usize> = (c - half..=c + half).collect();
        assert_eq!(rows, expected, "K={kernel} d={dilation}");
        assert_eq!(cols, expected, "K={kernel} d={dilation}");
    }
}

#[test]
fn constant_input_interior_value_is_product_of_kernel_areas() {
    let cfg = LkaConfig::default();
    // local 5x5 box then dilated 7x7 box: 25 * 49 taps fall inside a 41x41 map at its centre
    let map = attention_map(&box_lka(1, &cfg), &cfg, Tensor::ones([1, 41, 41, 1]));
    assert_eq!(map.at(&[0, 20, 20, 0]), 1225.0);
    assert!(map.at(&[0, 0, 0, 0]) < 1225.0);
}

#[test]
fn zero_features_stay_zero() {
    let cfg = LkaConfig::default();
    let mut reg = ParamRegistry::new();
    LargeKernelAttention::register(&mut reg, "lka", 3, &cfg);
    let params = initialize::<f64>(&reg.into_specs(), 9, InitScheme::Fidelity);
    let y = lka_forward(&params, &cfg, Tensor::zeros([2, 8, 8, 3]));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn bias_free_gate_scales_quadratically() {
    let cfg = LkaConfig { kernel: 9, dilation: 3 };
    let mut params = box_lka(2, &cfg);
    for (_, t) in params.iter_mut() {
        *t = t.map(|v| v * 0.3 + 0.1);
    }
    for name in ["lka.dw_conv.bias", "lka.dwd_conv.bias", "lka.pw_conv.bias"] {
        let t = params.get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape().to_vec());
    }
    let f = Tensor::from_fn([1, 6, 6, 2], |i| ((i * 7) % 11) as f64 / 11.0 - 0.4);
    let y1 = lka_forward(&params, &cfg, f.clone());
    let y3 = lka_forward(&params, &cfg, f.map(|v| 3.0 * v));
    for (a, b) in y1.data().iter().zip(y3.data()) {
        assert!((9.0 * a - b).abs() < 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn plain_fusion_with_halving_weights_averages_streams() {
    let c = 3;
    let mut w = Tensor::zeros([2 * c, c]);
    for i in 0..c {
        w.data_mut()[i * c + i] = 0.5;
        w.data_mut()[(c + i) * c + i] = 0.5;
    }
    let mut params = ModelParams::new();
    params.insert("s.w_fuse.weight", w);
    params.insert("s.w_fuse.bias", Tensor::zeros([c]));
    let dec = Tensor::from_fn([1, 4, c], |i| i as f64);
    let enc = Tensor::from_fn([1, 4, c], |i| 10.0 - 2.0 * i as f64);
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let fusion = SkipFusion::bind(&bound.scope("s"), c, None).unwrap();
    let dv = g.constant(dec.clone());
    let ev = g.constant(enc.clone());
    let dm = TokenMap::new(&g, dv, (2, 2)).unwrap();
    let em = TokenMap::new(&g, ev, (2, 2)).unwrap();
    let out = fusion.forward(&mut g, &dm, &em).unwrap();
    for (i, &v) in g.value(out.tokens).data().iter().enumerate() {
        assert_eq!(v, 0.5 * (dec.data()[i] + enc.data()[i]));
    }
}

#[test]
fn fusion_rejects_mismatched_grids() {
    let cfg = LkaConfig::default();
    let mut reg = ParamRegistry::new();
    SkipFusion::register(&mut reg, "s", 2, Some(&cfg));
    let params = initialize::<f64>(&reg.into_specs(), 1, InitScheme::Default);
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let fusion = SkipFusion::bind(&bound.scope("s"), 2, Some(&cfg)).unwrap();
    let a = g.constant(Tensor::zeros([1, 4, 2]));
    let b = g.constant(Tensor::zeros([1, 16, 2]));
    let am = TokenMap::new(&g, a, (2, 2)).unwrap();
    let bm = TokenMap::new(&g, b, (4, 4)).unwrap();
    assert!(matches!(fusion.forward(&mut g, &am, &bm), Err(transdae::Error::Dimension(_))));
}

#[test]
fn decomposition_parameter_counts() {
    let cfg = LkaConfig::default();
    assert_eq!(cfg.param_count(16), 25 * 16 + 16 + 49 * 16 + 16 + 16 * 16 + 16);
    let mut reg = ParamRegistry::new();
    LargeKernelAttention::register(&mut reg, "lka", 16, &cfg);
    let registered: usize = reg.into_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum();
    assert_eq!(registered, cfg.param_count(16));
    assert!(cfg.param_count(16) * 4 < cfg.dense_param_count(16));
}
