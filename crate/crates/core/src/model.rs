//! The full U-shaped segmentation network.
//!
//! ```text
//! image (H, W)  -> embed: conv 7x7 / stride 4 + norm           grid H/4,  C
//!   encoder stage 1: blocks -> skip1 -> merge                   grid H/8,  2C
//!   encoder stage 2: blocks -> skip2 -> merge                   grid H/16, 4C
//!   encoder stage 3: blocks -> skip3 -> merge                   grid H/32, 8C
//!   bottleneck: blocks
//!   decoder stage 3: expand -> fuse(skip3) -> blocks            grid H/16, 4C
//!   decoder stage 2: expand -> fuse(skip2) -> blocks            grid H/8,  2C
//!   decoder stage 1: expand -> fuse(skip1) -> blocks            grid H/4,  C
//!   head: 4x expansion -> per-pixel linear                      (H, W, classes)
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use transdae_tensor::{Conv2dSpec, Graph, Scalar, Tensor, Var};

use crate::attention::{BlockConfig, DualBlock};
use crate::error::{Context, Error, Result};
use crate::isim::{LkaConfig, SkipFusion};
use crate::metrics::LabelMask;
use crate::nn::{initialize, BoundParams, ConvLayer, InitScheme, LayerNorm, Linear, ModelParams, ParamRegistry, ParamSpec};
use crate::tokens::TokenMap;

pub const ENCODER_STAGES: usize = 3;
pub const EMBED_KERNEL: usize = 7;
pub const EMBED_STRIDE: usize = 4;
pub const EMBED_PADDING: usize = 3;
/// Total downsampling from image to bottleneck grid.
pub const SIZE_DIVISOR: usize = EMBED_STRIDE << ENCODER_STAGES;

/// Which ablation tier to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Variant {
    /// Efficient attention only; skips fused by concatenation and projection.
    #[serde(rename = "baseline")]
    Baseline,
    /// Adds the spatial-reduction sublayer to every block.
    #[serde(rename = "dual")]
    Dual,
    /// Adds large-kernel attention on every skip connection.
    #[default]
    #[serde(rename = "dual+isim")]
    DualIsim,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Dual, Variant::DualIsim];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Dual => "dual",
            Variant::DualIsim => "dual+isim",
        }
    }

    pub fn has_spatial_attention(self) -> bool {
        self != Variant::Baseline
    }

    pub fn has_isim(self) -> bool {
        self == Variant::DualIsim
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (baseline, dual, dual+isim)")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `(height, width)`; both must be multiples of 32.
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    /// Blocks per encoder stage; decoder stage `i` mirrors encoder stage `i`.
    pub depths: [usize; ENCODER_STAGES],
    pub bottleneck_depth: usize,
    /// Per scale, finest first; the last entry is the bottleneck.
    pub reduction_ratios: [usize; ENCODER_STAGES + 1],
    pub heads: [usize; ENCODER_STAGES + 1],
    pub variant: Variant,
    pub lka: LkaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: (64, 64),
            in_channels: 1,
            num_classes: 4,
            embed_dim: 32,
            depths: [2, 2, 2],
            bottleneck_depth: 2,
            reduction_ratios: [4, 2, 1, 1],
            heads: [4, 4, 4, 4],
            variant: Variant::DualIsim,
            lka: LkaConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Small network used by gradient checks: 32x32 input, width 8, one block per scale.
    pub fn tiny() -> Self {
        ModelConfig {
            input_size: (32, 32),
            embed_dim: 8,
            depths: [1, 1, 1],
            bottleneck_depth: 1,
            ..Default::default()
        }
    }

    /// Channel width at scale `i` (0 = finest, 3 = bottleneck).
    pub fn dim(&self, scale: usize) -> usize {
        self.embed_dim << scale
    }

    /// Token grid at scale `i`.
    pub fn grid(&self, scale: usize) -> (usize, usize) {
        let f = EMBED_STRIDE << scale;
        (self.input_size.0 / f, self.input_size.1 / f)
    }

    pub fn block(&self, scale: usize) -> BlockConfig {
        BlockConfig {
            dim: self.dim(scale),
            heads: self.heads[scale],
            reduction_ratio: self.reduction_ratios[scale],
            spatial: self.variant.has_spatial_attention(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % SIZE_DIVISOR != 0 || w % SIZE_DIVISOR != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be a positive multiple of {SIZE_DIVISOR}"
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!(
                "num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "embed_dim must be positive and even, got {}",
                self.embed_dim
            )));
        }
        for scale in 0..=ENCODER_STAGES {
            self.block(scale).validate().at(format!("scale {scale}"))?;
            let (gh, gw) = self.grid(scale);
            let r = self.reduction_ratios[scale];
            if self.variant.has_spatial_attention() && (gh * gw) % r != 0 {
                return Err(Error::Config(format!(
                    "reduction ratio {r} does not divide the {} tokens at scale {scale}",
                    gh * gw
                )));
            }
        }
        if self.variant.has_isim() {
            self.lka.validate()?;
        }
        Ok(())
    }

    /// Every parameter of this architecture, in declaration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut reg = ParamRegistry::new();
        let c = self.embed_dim;
        let embed = self.embed_spec();
        reg.conv("embed.proj", &embed, true);
        reg.layer_norm("embed.norm", c);
        for s in 0..ENCODER_STAGES {
            let path = format!("encoder.stage{}", s + 1);
            for j in 0..self.depths[s] {
                DualBlock::register(&mut reg, &format!("{path}.block{j}"), &self.block(s));
            }
            reg.linear(&format!("{path}.merge"), 4 * self.dim(s), self.dim(s + 1), false);
        }
        for j in 0..self.bottleneck_depth {
            DualBlock::register(&mut reg, &format!("bottleneck.block{j}"), &self.block(ENCODER_STAGES));
        }
        let lka = self.variant.has_isim().then_some(&self.lka);
        for s in (0..ENCODER_STAGES).rev() {
            let path = format!("decoder.stage{}", s + 1);
            reg.linear(&format!("{path}.expand"), self.dim(s + 1), 2 * self.dim(s + 1), false);
            SkipFusion::register(&mut reg, &format!("{path}.fuse"), self.dim(s), lka);
            for j in 0..self.depths[s] {
                DualBlock::register(&mut reg, &format!("{path}.block{j}"), &self.block(s));
            }
        }
        reg.linear("head.expand", c, 16 * c, false);
        reg.linear("head.proj", c, self.num_classes, true);
        reg.into_specs()
    }

    pub fn embed_spec(&self) -> Conv2dSpec {
        Conv2dSpec::new(self.in_channels, self.embed_dim, (EMBED_KERNEL, EMBED_KERNEL))
            .with_stride(EMBED_STRIDE)
            .with_padding(EMBED_PADDING)
    }
}

/// Draws parameters for `cfg`. Projections are `N(0, 0.02^2)` under the
/// default scheme and `N(0, 1)` under [`InitScheme::Fidelity`]; biases and
/// norm offsets start at zero, norm scales at one.
pub fn init_weights<T: Scalar>(cfg: &ModelConfig, seed: u64, scheme: InitScheme) -> Result<ModelParams<T>> {
    cfg.validate()?;
    Ok(initialize(&cfg.param_specs(), seed, scheme))
}

/// Overlapping 4x downsampling embedding: NHWC image to a token grid.
pub fn patch_embed<T: Scalar>(g: &mut Graph<T>, x: Var, proj: &ConvLayer, norm: &LayerNorm) -> Result<TokenMap> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || !shape[1].is_multiple_of(EMBED_STRIDE) || !shape[2].is_multiple_of(EMBED_STRIDE) {
        return Err(Error::Config(format!(
            "patch embedding needs an NHWC image with sides divisible by {EMBED_STRIDE}, got {shape:?}"
        )));
    }
    let y = proj.forward(g, x)?;
    let t = TokenMap::from_spatial(g, y)?;
    let tokens = norm.forward(g, t.tokens)?;
    t.with_tokens(g, tokens)
}

/// Concatenates each 2x2 token neighbourhood (top-left, top-right,
/// bottom-left, bottom-right) and projects `4c -> 2c`.
pub fn patch_merge<T: Scalar>(g: &mut Graph<T>, t: &TokenMap, proj: &Linear) -> Result<TokenMap> {
    let (h, w) = t.grid;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!("cannot merge an odd {h}x{w} grid")));
    }
    let (b, c) = (t.batch, t.channels);
    let x = g.reshape(t.tokens, &[b, h / 2, 2, w / 2, 2, c])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    let x = g.reshape(x, &[b, h * w / 4, 4 * c])?;
    let y = proj.forward(g, x)?;
    TokenMap::new(g, y, (h / 2, w / 2))
}

/// Projects `c -> 2c` and unfolds every token into a 2x2 group of `c / 2`
/// channels, doubling the grid.
pub fn patch_expand<T: Scalar>(g: &mut Graph<T>, t: &TokenMap, proj: &Linear) -> Result<TokenMap> {
    let (h, w) = t.grid;
    let (b, c) = (t.batch, t.channels);
    if c % 2 != 0 || proj.out_dim(g) != 2 * c {
        return Err(Error::Config(format!(
            "patch expansion of {c} channels needs an even width and a {c} -> {} projection",
            2 * c
        )));
    }
    let y = proj.forward(g, t.tokens)?;
    let y = g.reshape(y, &[b, h, w, 2, 2, c / 2])?;
    let y = g.permute(y, &[0, 1, 3, 2, 4, 5])?;
    let y = g.reshape(y, &[b, 4 * h * w, c / 2])?;
    TokenMap::new(g, y, (2 * h, 2 * w))
}

/// 4x expansion to full resolution followed by a per-pixel linear map to
/// class logits `(b, H, W, classes)`.
pub fn final_project<T: Scalar>(
    g: &mut Graph<T>,
    t: &TokenMap,
    expand: &Linear,
    proj: &Linear,
    image_size: (usize, usize),
) -> Result<Var> {
    let (h, w) = t.grid;
    let (b, c) = (t.batch, t.channels);
    if (4 * h, 4 * w) != image_size {
        return Err(Error::Dimension(format!(
            "head expects a {}x{} grid for a {}x{} image, got {h}x{w}",
            image_size.0 / 4,
            image_size.1 / 4,
            image_size.0,
            image_size.1
        )));
    }
    let y = expand.forward(g, t.tokens)?;
    let y = g.reshape(y, &[b, h, w, 4, 4, c])?;
    let y = g.permute(y, &[0, 1, 3, 2, 4, 5])?;
    let y = g.reshape(y, &[b, 4 * h, 4 * w, c])?;
    proj.forward(g, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageShape {
    pub tokens: usize,
    pub grid: (usize, usize),
    pub dim: usize,
}

impl From<&TokenMap> for StageShape {
    fn from(t: &TokenMap) -> Self {
        StageShape {
            tokens: t.len(),
            grid: t.grid,
            dim: t.channels,
        }
    }
}

/// Token shapes observed during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeTrace {
    /// Encoder stages 1..3 then the bottleneck, as processed by their blocks.
    pub encoder: Vec<StageShape>,
    /// Skip `i` as seen by decoder stage `i`, finest first.
    pub skips: Vec<StageShape>,
    /// Decoder streams right after expansion, before fusion, finest first.
    pub decoder: Vec<StageShape>,
    pub logits: Vec<usize>,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub trace: ShapeTrace,
}

struct EncoderStage {
    blocks: Vec<DualBlock>,
    merge: Linear,
}

struct DecoderStage {
    expand: Linear,
    fuse: SkipFusion,
    blocks: Vec<DualBlock>,
}

/// Layers of a configured network, bound to parameters on one graph.
pub struct Network {
    cfg: ModelConfig,
    embed: ConvLayer,
    embed_norm: LayerNorm,
    encoder: Vec<EncoderStage>,
    bottleneck: Vec<DualBlock>,
    /// Finest stage first.
    decoder: Vec<DecoderStage>,
    head_expand: Linear,
    head_proj: Linear,
}

fn bind_blocks(params: &BoundParams, path: &str, depth: usize, cfg: &BlockConfig) -> Result<Vec<DualBlock>> {
    (0..depth)
        .map(|j| {
            let p = format!("{path}.block{j}");
            DualBlock::bind(&params.scope(&p), cfg).at(p)
        })
        .collect()
}

fn run_blocks<T: Scalar>(g: &mut Graph<T>, blocks: &[DualBlock], t: TokenMap, path: &str) -> Result<TokenMap> {
    let mut x = t.tokens;
    for (j, b) in blocks.iter().enumerate() {
        x = b.forward(g, x).at(format!("{path}.block{j}"))?;
    }
    t.with_tokens(g, x)
}

impl Network {
    pub fn bind(cfg: &ModelConfig, params: &BoundParams) -> Result<Self> {
        cfg.validate()?;
        let root = params.scope("");
        let lka = cfg.variant.has_isim().then_some(&cfg.lka);
        let encoder = (0..ENCODER_STAGES)
            .map(|s| {
                let path = format!("encoder.stage{}", s + 1);
                Ok(EncoderStage {
                    blocks: bind_blocks(params, &path, cfg.depths[s], &cfg.block(s))?,
                    merge: root.linear(&format!("{path}.merge"))?,
                })
            })
            .collect::<Result<_>>()?;
        let decoder = (0..ENCODER_STAGES)
            .map(|s| {
                let path = format!("decoder.stage{}", s + 1);
                Ok(DecoderStage {
                    expand: root.linear(&format!("{path}.expand"))?,
                    fuse: SkipFusion::bind(&params.scope(&format!("{path}.fuse")), cfg.dim(s), lka)
                        .at(format!("{path}.fuse"))?,
                    blocks: bind_blocks(params, &path, cfg.depths[s], &cfg.block(s))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Network {
            cfg: cfg.clone(),
            embed: root.conv("embed.proj", cfg.embed_spec())?,
            embed_norm: root.layer_norm("embed.norm")?,
            encoder,
            bottleneck: bind_blocks(params, "bottleneck", cfg.bottleneck_depth, &cfg.block(ENCODER_STAGES))?,
            decoder,
            head_expand: root.linear("head.expand")?,
            head_proj: root.linear("head.proj")?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Logits `(b, H, W, classes)` for an NHWC image batch.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let (h, w) = cfg.input_size;
        match *g.shape(x) {
            [_, xh, xw, xc] if (xh, xw, xc) == (h, w, cfg.in_channels) => {}
            ref s => {
                return Err(Error::Contract(format!(
                    "model expects images (b, {h}, {w}, {}), got {s:?}",
                    cfg.in_channels
                )))
            }
        }
        let mut trace = ShapeTrace::default();
        let mut t = patch_embed(g, x, &self.embed, &self.embed_norm).at("embed")?;
        let mut skips = Vec::with_capacity(ENCODER_STAGES);
        for (s, stage) in self.encoder.iter().enumerate() {
            let path = format!("encoder.stage{}", s + 1);
            trace.encoder.push(StageShape::from(&t));
            t = run_blocks(g, &stage.blocks, t, &path)?;
            skips.push(t);
            t = patch_merge(g, &t, &stage.merge).at(format!("{path}.merge"))?;
        }
        trace.encoder.push(StageShape::from(&t));
        t = run_blocks(g, &self.bottleneck, t, "bottleneck")?;
        let mut decoder_shapes = Vec::new();
        for s in (0..ENCODER_STAGES).rev() {
            let stage = &self.decoder[s];
            let path = format!("decoder.stage{}", s + 1);
            t = patch_expand(g, &t, &stage.expand).at(format!("{path}.expand"))?;
            decoder_shapes.push(StageShape::from(&t));
            t = stage.fuse.forward(g, &t, &skips[s]).at(format!("{path}.fuse"))?;
            t = run_blocks(g, &stage.blocks, t, &path)?;
        }
        decoder_shapes.reverse();
        trace.decoder = decoder_shapes;
        trace.skips = skips.iter().map(StageShape::from).collect();
        let logits = final_project(g, &t, &self.head_expand, &self.head_proj, cfg.input_size).at("head")?;
        trace.logits = g.shape(logits).to_vec();
        Ok(ForwardOutput { logits, trace })
    }
}

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, seed: u64, scheme: InitScheme) -> Result<Self> {
        let params = init_weights(&config, seed, scheme)?;
        Ok(Model { config, params })
    }

    /// Checks that `params` holds exactly the tensors `config` declares.
    pub fn from_parts(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Contract(format!(
                "configuration declares {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            match params.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Contract(format!(
                        "parameter {} has shape {:?}, configuration expects {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                None => return Err(Error::Contract(format!("missing parameter {}", spec.name))),
            }
        }
        Ok(Model { config, params })
    }

    /// Inference-only forward pass; returns logits `(b, H, W, classes)`.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let net = Network::bind(&self.config, &bound)?;
        let x = g.constant(images.clone());
        let out = net.forward(&mut g, x)?;
        Ok(g.value(out.logits).clone())
    }

    /// Per-pixel argmax labels, one mask per image.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<LabelMask>> {
        let logits = self.logits(images)?;
        let (b, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
        let labels = logits.argmax_last();
        labels
            .chunks(h * w)
            .take(b)
            .map(|chunk| LabelMask::new(vec![h, w], chunk.iter().map(|&l| l as u8).collect()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("dual-isim".parse::<Variant>().is_err());
    }

    #[test]
    fn config_rejects_indivisible_input() {
        let cfg = ModelConfig {
            input_size: (48, 64),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn param_names_follow_stage_paths() {
        let specs = ModelConfig::default().param_specs();
        let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        assert!(names.contains(&"encoder.stage1.block0.channel_attn.w_q.weight"));
        assert!(names.contains(&"decoder.stage2.fuse.lka.dwd_conv.weight"));
        assert!(names.contains(&"bottleneck.block1.spatial_attn.w_out.bias"));
    }

    #[test]
    fn config_json_uses_variant_names() {
        let json = r#"{"input_size":[32,32],"embed_dim":8,"variant":"baseline"}"#;
        let cfg: ModelConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.variant, Variant::Baseline);
        assert_eq!(cfg.num_classes, 4);
    }
}
