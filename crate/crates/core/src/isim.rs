//! Large-kernel attention on skip connections and the skip fusion step.
//!
//! A `K x K` depthwise kernel is approximated by three cheaper convolutions:
//! a `(2d-1) x (2d-1)` depthwise conv, a `k' x k'` depthwise conv with
//! dilation `d` (where `k' = ceil(K / d)`), and a 1x1 channel mix. Their
//! output gates the input multiplicatively, with no squashing function.

use serde::{Deserialize, Serialize};
use transdae_tensor::{Conv2dSpec, Graph, Scalar, Var};

use crate::error::{Context, Error, Result};
use crate::nn::{join, ConvLayer, Linear, ParamRegistry, Scope};
use crate::tokens::TokenMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LkaConfig {
    /// Nominal kernel size being approximated.
    pub kernel: usize,
    pub dilation: usize,
}

impl Default for LkaConfig {
    fn default() -> Self {
        LkaConfig {
            kernel: 21,
            dilation: 3,
        }
    }
}

impl LkaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation == 0 || self.kernel == 0 {
            return Err(Error::Config(format!(
                "large-kernel attention needs positive kernel and dilation, got {self:?}"
            )));
        }
        if self.dilated_kernel().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "dilated kernel side {} (ceil({} / {})) must be odd for same padding",
                self.dilated_kernel(),
                self.kernel,
                self.dilation
            )));
        }
        Ok(())
    }

    pub fn local_kernel(&self) -> usize {
        2 * self.dilation - 1
    }

    /// `k' = ceil(K / d)`.
    pub fn dilated_kernel(&self) -> usize {
        self.kernel.div_ceil(self.dilation)
    }

    /// Side of the composed receptive field: `(2d-1) + (k'-1) d`.
    pub fn receptive_field(&self) -> usize {
        self.local_kernel() + (self.dilated_kernel() - 1) * self.dilation
    }

    pub fn local_spec(&self, channels: usize) -> Conv2dSpec {
        let k = self.local_kernel();
        Conv2dSpec::depthwise(channels, k).with_padding(Conv2dSpec::same_padding(k, 1))
    }

    pub fn dilated_spec(&self, channels: usize) -> Conv2dSpec {
        let k = self.dilated_kernel();
        Conv2dSpec::depthwise(channels, k)
            .with_dilation(self.dilation)
            .with_padding(Conv2dSpec::same_padding(k, self.dilation))
    }

    pub fn pointwise_spec(&self, channels: usize) -> Conv2dSpec {
        Conv2dSpec::pointwise(channels, channels)
    }

    /// Weights and biases of the three convolutions.
    pub fn param_count(&self, channels: usize) -> usize {
        let c = channels;
        let dw = self.local_kernel().pow(2) * c + c;
        let dwd = self.dilated_kernel().pow(2) * c + c;
        dw + dwd + c * c + c
    }

    /// Parameters of a single dense depthwise conv spanning the same receptive
    /// field, followed by the same 1x1 mix.
    pub fn dense_param_count(&self, channels: usize) -> usize {
        let c = channels;
        self.receptive_field().pow(2) * c + c + c * c + c
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LargeKernelAttention {
    pub local: ConvLayer,
    pub dilated: ConvLayer,
    pub pointwise: ConvLayer,
}

impl LargeKernelAttention {
    pub fn register(reg: &mut ParamRegistry, path: &str, channels: usize, cfg: &LkaConfig) {
        reg.conv(&join(path, "dw_conv"), &cfg.local_spec(channels), true);
        reg.conv(&join(path, "dwd_conv"), &cfg.dilated_spec(channels), true);
        reg.conv(&join(path, "pw_conv"), &cfg.pointwise_spec(channels), true);
    }

    pub fn bind(scope: &Scope<'_>, channels: usize, cfg: &LkaConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(LargeKernelAttention {
            local: scope.conv("dw_conv", cfg.local_spec(channels))?,
            dilated: scope.conv("dwd_conv", cfg.dilated_spec(channels))?,
            pointwise: scope.conv("pw_conv", cfg.pointwise_spec(channels))?,
        })
    }

    /// The gating map `pw(dwd(dw(f)))`, same shape as `f`.
    pub fn attention_map<T: Scalar>(&self, g: &mut Graph<T>, f: Var) -> Result<Var> {
        let a = self.local.forward(g, f).at("dw_conv")?;
        let a = self.dilated.forward(g, a).at("dwd_conv")?;
        self.pointwise.forward(g, a).at("pw_conv")
    }

    /// `attention_map(f) * f` for an NHWC map `f`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, f: Var) -> Result<Var> {
        let attn = self.attention_map(g, f)?;
        Ok(g.mul(attn, f)?)
    }
}

/// Merges an encoder skip into the decoder stream:
/// `w_fuse([decoder, lka(encoder)])`, or without the attention when `lka` is absent.
#[derive(Debug, Clone, Copy)]
pub struct SkipFusion {
    pub lka: Option<LargeKernelAttention>,
    pub w_fuse: Linear,
}

impl SkipFusion {
    pub fn register(reg: &mut ParamRegistry, path: &str, channels: usize, lka: Option<&LkaConfig>) {
        if let Some(cfg) = lka {
            LargeKernelAttention::register(reg, &join(path, "lka"), channels, cfg);
        }
        reg.linear(&join(path, "w_fuse"), 2 * channels, channels, true);
    }

    pub fn bind(scope: &Scope<'_>, channels: usize, lka: Option<&LkaConfig>) -> Result<Self> {
        Ok(SkipFusion {
            lka: lka
                .map(|cfg| LargeKernelAttention::bind(&scope.sub("lka"), channels, cfg))
                .transpose()?,
            w_fuse: scope.linear("w_fuse")?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        decoder: &TokenMap,
        encoder: &TokenMap,
    ) -> Result<TokenMap> {
        if decoder.shape() != encoder.shape() || decoder.grid != encoder.grid {
            return Err(Error::Dimension(format!(
                "skip fusion: decoder {:?} on grid {:?} vs encoder {:?} on grid {:?}",
                decoder.shape(),
                decoder.grid,
                encoder.shape(),
                encoder.grid
            )));
        }
        let skip = match &self.lka {
            Some(lka) => {
                let spatial = encoder.to_spatial(g)?;
                let attended = lka.forward(g, spatial).at("lka")?;
                g.reshape(attended, &encoder.shape())?
            }
            None => encoder.tokens,
        };
        let joined = g.concat(&[decoder.tokens, skip], 2)?;
        let fused = self.w_fuse.forward(g, joined)?;
        decoder.with_tokens(g, fused)
    }
}
