//! Attention sublayers and the dual attention transformer block.
//!
//! The block runs three pre-norm residual sublayers in sequence:
//!
//! ```text
//! x = x + channel_attn(norm1(x))   // efficient attention, linear in tokens
//! x = x + spatial_attn(norm2(x))   // spatial-reduction attention (omitted in the baseline)
//! x = x + ffn(norm3(x))            // d -> 4d -> d with GELU
//! ```
//!
//! Token tensors are `(tokens, channels)` or `(batch, tokens, channels)`.

use serde::{Deserialize, Serialize};
use transdae_tensor::{Graph, Scalar, Var};

use crate::error::{Context, Error, Result};
use crate::nn::{as_batched, join, LayerNorm, Linear, ParamRegistry, Scope};

pub const FFN_EXPANSION: usize = 4;

/// Normalisation applied to queries and keys in efficient attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Queries: softmax over channels. Keys: softmax over positions.
    #[default]
    Softmax,
    Identity,
    /// Both queries and keys divided by `sqrt(n)`.
    ScaleBySqrtN,
}

/// `softmax(q k^T * scale) v` for rank-2 or batched rank-3 operands.
pub fn standard_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    scale: f64,
) -> Result<Var> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    let ok = qs.len() == ks.len()
        && ks.len() == vs.len()
        && (qs.len() == 2 || qs.len() == 3)
        && qs.last() == ks.last()
        && ks[ks.len() - 2] == vs[vs.len() - 2];
    if !ok {
        return Err(Error::Dimension(format!(
            "standard attention needs q (.., n, dk), k (.., m, dk), v (.., m, dv); got q {qs:?}, k {ks:?}, v {vs:?}"
        )));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, scale)?;
    let axis = qs.len() - 1;
    let weights = g.softmax(scores, axis)?;
    Ok(g.matmul(weights, v)?)
}

/// `rho_q(q) (rho_k(k)^T v)`: the key/value context is formed first, so the
/// cost is linear in the number of tokens.
pub fn efficient_attention_core<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    norm: Normalization,
) -> Result<Var> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    let rank = qs.len();
    let ok = (rank == 2 || rank == 3)
        && ks.len() == rank
        && vs.len() == rank
        && qs.last() == ks.last()
        && ks[rank - 2] == vs[rank - 2];
    if !ok {
        return Err(Error::Dimension(format!(
            "efficient attention needs q, k (.., n, dk) and v (.., n, dv); got q {qs:?}, k {ks:?}, v {vs:?}"
        )));
    }
    let (qn, kn) = match norm {
        Normalization::Softmax => (g.softmax(q, rank - 1)?, g.softmax(k, rank - 2)?),
        Normalization::Identity => (q, k),
        Normalization::ScaleBySqrtN => {
            let s = 1.0 / (ks[rank - 2] as f64).sqrt();
            (g.scale(q, s)?, g.scale(k, s)?)
        }
    };
    let kt = g.transpose(kn)?;
    let context = g.matmul(kt, v)?;
    Ok(g.matmul(qn, context)?)
}

/// Scaled dot-product attention split across `heads`.
///
/// `q` is `(b, n, c)`; `k` and `v` are `(b, m, c)`. Each head sees `c / heads`
/// channels and uses scale `1 / sqrt(c / heads)`.
pub fn multi_head_attention_core<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let (b, n, c) = as_batched(g.shape(q))?;
    let (bk, m, ck) = as_batched(g.shape(k))?;
    if bk != b || ck != c || g.shape(v) != g.shape(k) {
        return Err(Error::Dimension(format!(
            "multi-head attention: q {:?}, k {:?}, v {:?}",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        )));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "{heads} heads do not divide {c} channels"
        )));
    }
    let dh = c / heads;
    let split = |g: &mut Graph<T>, x: Var, len: usize| -> Result<Var> {
        let x = g.reshape(x, &[b, len, heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        Ok(g.reshape(x, &[b * heads, len, dh])?)
    };
    let qh = split(g, q, n)?;
    let kh = split(g, k, m)?;
    let vh = split(g, v, m)?;
    let out = standard_attention(g, qh, kh, vh, 1.0 / (dh as f64).sqrt())?;
    let out = g.reshape(out, &[b, heads, n, dh])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[b, n, c])?;
    Ok(g.reshape(out, g.shape(q).to_vec().as_slice())?)
}

/// Single-head efficient attention with learned projections.
#[derive(Debug, Clone, Copy)]
pub struct EfficientAttention {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_out: Linear,
    pub norm: Normalization,
}

impl EfficientAttention {
    /// Declares projections `d -> dk` (queries, keys), `d -> dv` and `dv -> d`.
    /// Keys carry no bias: the softmax over positions cancels a per-channel offset.
    pub fn register(reg: &mut ParamRegistry, path: &str, d: usize, dk: usize, dv: usize) {
        reg.linear(&join(path, "w_q"), d, dk, true);
        reg.linear(&join(path, "w_k"), d, dk, false);
        reg.linear(&join(path, "w_v"), d, dv, true);
        reg.linear(&join(path, "w_out"), dv, d, true);
    }

    /// Default widths: `dk = d / 2`, `dv = d`.
    pub fn register_default(reg: &mut ParamRegistry, path: &str, d: usize) {
        Self::register(reg, path, d, d / 2, d);
    }

    pub fn bind(scope: &Scope<'_>, norm: Normalization) -> Result<Self> {
        Ok(EfficientAttention {
            w_q: scope.linear("w_q")?,
            w_k: scope.linear("w_k")?,
            w_v: scope.linear("w_v")?,
            w_out: scope.linear("w_out")?,
            norm,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let q = self.w_q.forward(g, x)?;
        let k = self.w_k.forward(g, x)?;
        let v = self.w_v.forward(g, x)?;
        let y = efficient_attention_core(g, q, k, v, self.norm)?;
        self.w_out.forward(g, y)
    }
}

/// Multi-head attention whose keys and values are shortened by `ratio`.
///
/// After projection, `K` and `V` of shape `(N, C)` are regrouped row-major
/// into `(N / R, C * R)` and mapped back to `C` channels by the shared
/// `w_reduce`. With `R = 1` the reduction is skipped and no `w_reduce` exists.
#[derive(Debug, Clone, Copy)]
pub struct ReducedAttention {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_reduce: Option<Linear>,
    pub w_out: Linear,
    pub heads: usize,
    pub ratio: usize,
}

impl ReducedAttention {
    pub fn register(reg: &mut ParamRegistry, path: &str, d: usize, ratio: usize) {
        // a key bias adds the same amount to every score of a query
        reg.linear(&join(path, "w_q"), d, d, true);
        reg.linear(&join(path, "w_k"), d, d, false);
        reg.linear(&join(path, "w_v"), d, d, true);
        if ratio > 1 {
            reg.linear(&join(path, "w_reduce"), d * ratio, d, true);
        }
        reg.linear(&join(path, "w_out"), d, d, true);
    }

    pub fn bind(scope: &Scope<'_>, heads: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::Config("reduction ratio must be positive".into()));
        }
        Ok(ReducedAttention {
            w_q: scope.linear("w_q")?,
            w_k: scope.linear("w_k")?,
            w_v: scope.linear("w_v")?,
            w_reduce: if ratio > 1 {
                Some(scope.linear("w_reduce")?)
            } else {
                None
            },
            w_out: scope.linear("w_out")?,
            heads,
            ratio,
        })
    }

    /// `(b, n, c) -> (b, n / R, c)`.
    pub fn reduce<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (b, n, c) = as_batched(g.shape(x))?;
        if n % self.ratio != 0 {
            return Err(Error::Config(format!(
                "reduction ratio {} does not divide {n} tokens",
                self.ratio
            )));
        }
        let grouped = g.reshape(x, &[b, n / self.ratio, c * self.ratio])?;
        match self.w_reduce {
            Some(w) => w.forward(g, grouped),
            None => Ok(grouped),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (b, n, c) = as_batched(&shape)?;
        if n % self.ratio != 0 {
            return Err(Error::Config(format!(
                "reduction ratio {} does not divide {n} tokens",
                self.ratio
            )));
        }
        let x3 = g.reshape(x, &[b, n, c])?;
        let q = self.w_q.forward(g, x3)?;
        let k = self.w_k.forward(g, x3)?;
        let v = self.w_v.forward(g, x3)?;
        let k = self.reduce(g, k)?;
        let v = self.reduce(g, v)?;
        let y = multi_head_attention_core(g, q, k, v, self.heads)?;
        let y = self.w_out.forward(g, y)?;
        Ok(g.reshape(y, &shape)?)
    }
}

/// Two-layer MLP `d -> 4d -> d` with GELU.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn register(reg: &mut ParamRegistry, path: &str, d: usize) {
        reg.linear(&join(path, "fc1"), d, FFN_EXPANSION * d, true);
        reg.linear(&join(path, "fc2"), FFN_EXPANSION * d, d, true);
    }

    pub fn bind(scope: &Scope<'_>) -> Result<Self> {
        Ok(FeedForward {
            fc1: scope.linear("fc1")?,
            fc2: scope.linear("fc2")?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

/// Hyperparameters of one transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub reduction_ratio: usize,
    /// Include the spatial-reduction sublayer. Off for the baseline variant.
    pub spatial: bool,
}

impl BlockConfig {
    pub fn new(dim: usize, heads: usize, reduction_ratio: usize) -> Self {
        BlockConfig {
            dim,
            heads,
            reduction_ratio,
            spatial: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || !self.dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "block width {} must be even (keys use half the width)",
                self.dim
            )));
        }
        if self.spatial {
            if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
                return Err(Error::Config(format!(
                    "{} heads do not divide width {}",
                    self.heads, self.dim
                )));
            }
            if self.reduction_ratio == 0 {
                return Err(Error::Config("reduction ratio must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Pre-norm transformer block: channel attention, then spatial attention, then FFN.
#[derive(Debug, Clone, Copy)]
pub struct DualBlock {
    pub norm1: LayerNorm,
    pub channel_attn: EfficientAttention,
    pub spatial: Option<(LayerNorm, ReducedAttention)>,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

impl DualBlock {
    pub fn register(reg: &mut ParamRegistry, path: &str, cfg: &BlockConfig) {
        let d = cfg.dim;
        reg.layer_norm(&join(path, "norm1"), d);
        EfficientAttention::register_default(reg, &join(path, "channel_attn"), d);
        if cfg.spatial {
            reg.layer_norm(&join(path, "norm2"), d);
            ReducedAttention::register(reg, &join(path, "spatial_attn"), d, cfg.reduction_ratio);
        }
        reg.layer_norm(&join(path, "norm3"), d);
        FeedForward::register(reg, &join(path, "ffn"), d);
    }

    pub fn bind(scope: &Scope<'_>, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let spatial = if cfg.spatial {
            Some((
                scope.layer_norm("norm2")?,
                ReducedAttention::bind(&scope.sub("spatial_attn"), cfg.heads, cfg.reduction_ratio)?,
            ))
        } else {
            None
        };
        Ok(DualBlock {
            norm1: scope.layer_norm("norm1")?,
            channel_attn: EfficientAttention::bind(&scope.sub("channel_attn"), Normalization::Softmax)?,
            spatial,
            norm3: scope.layer_norm("norm3")?,
            ffn: FeedForward::bind(&scope.sub("ffn"))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = self.channel_attn.forward(g, h).at("channel_attn")?;
        let mut x = g.add(x, h)?;
        if let Some((norm2, attn)) = &self.spatial {
            let h = norm2.forward(g, x)?;
            let h = attn.forward(g, h).at("spatial_attn")?;
            x = g.add(x, h)?;
        }
        let h = self.norm3.forward(g, x)?;
        let h = self.ffn.forward(g, h).at("ffn")?;
        Ok(g.add(x, h)?)
    }
}

#[cfg(test)]
mod tests {
    use transdae_tensor::{Graph, Tensor};

    use super::*;

    fn mat(g: &mut Graph<f64>, rows: usize, cols: usize, v: &[f64]) -> Var {
        g.constant(Tensor::from_f64([rows, cols], v).unwrap())
    }

    #[test]
    fn single_token_returns_value_row() {
        let mut g = Graph::<f64>::new();
        let q = mat(&mut g, 1, 2, &[0.3, -1.0]);
        let k = mat(&mut g, 1, 2, &[2.0, 0.5]);
        let v = mat(&mut g, 1, 3, &[4.0, 5.0, 6.0]);
        let y = standard_attention(&mut g, q, k, v, 0.7).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 5.0, 6.0]);
        let y = efficient_attention_core(&mut g, q, k, v, Normalization::Softmax).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut g = Graph::<f64>::new();
        let q = mat(&mut g, 1, 2, &[0.3, -1.0]);
        let k = mat(&mut g, 2, 2, &[1.0, 2.0, 1.0, 2.0]);
        let v = mat(&mut g, 2, 1, &[1.0, 3.0]);
        let y = standard_attention(&mut g, q, k, v, 1.0).unwrap();
        assert!((g.value(y).data()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn identity_normalization_hand_example() {
        let mut g = Graph::<f64>::new();
        let q = mat(&mut g, 2, 1, &[1.0, 2.0]);
        let k = mat(&mut g, 2, 1, &[1.0, 0.0]);
        let v = mat(&mut g, 2, 1, &[3.0, 5.0]);
        let y = efficient_attention_core(&mut g, q, k, v, Normalization::Identity).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 6.0]);
    }

    #[test]
    fn mismatched_key_width_is_a_dimension_error() {
        let mut g = Graph::<f64>::new();
        let q = mat(&mut g, 2, 2, &[0.0; 4]);
        let k = mat(&mut g, 2, 3, &[0.0; 6]);
        let err = standard_attention(&mut g, q, k, k, 1.0).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn block_config_rejects_indivisible_heads() {
        assert!(BlockConfig::new(8, 3, 1).validate().is_err());
        assert!(BlockConfig::new(7, 1, 1).validate().is_err());
        assert!(BlockConfig::new(8, 4, 2).validate().is_ok());
    }
}
