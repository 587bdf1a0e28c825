use crate::error::{Result, TensorError};

/// Geometry of a 2-D convolution over NHWC input.
///
/// Weights are laid out `[kernel_h, kernel_w, in_channels / groups, out_channels]`.
/// Padding is always zero padding, applied symmetrically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2dSpec {
    /// Dense convolution with stride 1, no padding and no dilation.
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        Conv2dSpec {
            kernel,
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
            in_channels,
            out_channels,
        }
    }

    /// Square depthwise kernel: one filter per channel.
    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Conv2dSpec {
            groups: channels,
            ..Self::new(channels, channels, (kernel, kernel))
        }
    }

    /// 1x1 channel mixing.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, (1, 1))
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Padding that keeps spatial size at stride 1 (odd kernels only).
    pub fn same_padding(kernel: usize, dilation: usize) -> usize {
        dilation * (kernel - 1) / 2
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.in_channels == self.out_channels
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.kernel.0,
            self.kernel.1,
            self.in_channels / self.groups.max(1),
            self.out_channels,
        ]
    }

    /// Side of the input window one output position sees.
    pub fn receptive_field(&self) -> (usize, usize) {
        (
            self.dilation * (self.kernel.0 - 1) + 1,
            self.dilation * (self.kernel.1 - 1) + 1,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.kernel.0,
            self.kernel.1,
            self.stride,
            self.dilation,
            self.groups,
            self.in_channels,
            self.out_channels,
        ];
        if positive.contains(&0) {
            return Err(TensorError::Parameter(format!(
                "conv2d spec has a zero field: {self:?}"
            )));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(TensorError::Parameter(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let (eh, ew) = self.receptive_field();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if eh > ph || ew > pw {
            return Err(TensorError::dim(
                "conv2d",
                format!("kernel extent {eh}x{ew} exceeds padded input {ph}x{pw}"),
            ));
        }
        Ok(((ph - eh) / self.stride + 1, (pw - ew) / self.stride + 1))
    }

    pub(crate) fn geometry(
        &self,
        x: &[usize],
        w: &[usize],
        bias: Option<&[usize]>,
    ) -> Result<ConvGeometry> {
        self.validate()?;
        let &[batch, h, width, cin] = x else {
            return Err(TensorError::dim("conv2d", format!("input must be NHWC, got {x:?}")));
        };
        if cin != self.in_channels {
            return Err(TensorError::dim(
                "conv2d",
                format!("input has {cin} channels, spec expects {}", self.in_channels),
            ));
        }
        if w != self.weight_shape() {
            return Err(TensorError::dim(
                "conv2d",
                format!("weight shape {w:?}, expected {:?}", self.weight_shape()),
            ));
        }
        if let Some(b) = bias {
            if b != [self.out_channels] {
                return Err(TensorError::dim(
                    "conv2d",
                    format!("bias shape {b:?}, expected [{}]", self.out_channels),
                ));
            }
        }
        let (out_h, out_w) = self.output_size(h, width)?;
        Ok(ConvGeometry {
            batch,
            h,
            w: width,
            cin,
            out_h,
            out_w,
            cout: self.out_channels,
            kh: self.kernel.0,
            kw: self.kernel.1,
            stride: self.stride,
            padding: self.padding,
            dilation: self.dilation,
            groups: self.groups,
            cin_group: cin / self.groups,
            cout_group: self.out_channels / self.groups,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub cin_group: usize,
    pub cout_group: usize,
}

impl ConvGeometry {
    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_h, self.out_w, self.cout]
    }

    pub fn out_numel(&self) -> usize {
        self.batch * self.out_h * self.out_w * self.cout
    }

    pub fn flops(&self) -> u64 {
        (2 * self.out_numel() * self.kh * self.kw * self.cin_group) as u64
    }

    #[inline]
    pub fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky * self.dilation)
            .checked_sub(self.padding)
            .filter(|&i| i < self.h)
    }

    #[inline]
    pub fn input_col(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.stride + kx * self.dilation)
            .checked_sub(self.padding)
            .filter(|&i| i < self.w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_must_divide_channels() {
        let spec = Conv2dSpec::new(6, 4, (3, 3)).with_groups(4);
        assert!(matches!(spec.validate(), Err(TensorError::Parameter(_))));
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let spec = Conv2dSpec::depthwise(1, 7);
        assert!(matches!(
            spec.output_size(5, 5),
            Err(TensorError::Dimension { .. })
        ));
        assert_eq!(spec.with_padding(1).output_size(5, 5).unwrap(), (1, 1));
    }

    #[test]
    fn same_padding_keeps_size() {
        for (k, d) in [(3, 1), (5, 1), (7, 3), (5, 2)] {
            let spec = Conv2dSpec::depthwise(2, k)
                .with_dilation(d)
                .with_padding(Conv2dSpec::same_padding(k, d));
            assert_eq!(spec.output_size(9, 11).unwrap(), (9, 11));
        }
    }

    #[test]
    fn embed_style_stride_four() {
        let spec = Conv2dSpec::new(1, 8, (7, 7)).with_stride(4).with_padding(3);
        assert_eq!(spec.output_size(64, 32).unwrap(), (16, 8));
    }
}
