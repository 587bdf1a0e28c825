use transdae_tensor::{Graph, Scalar, Var};

use crate::error::{Error, Result};

/// A `(batch, h * w, channels)` token tensor together with its `(h, w)` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenMap {
    pub tokens: Var,
    pub batch: usize,
    pub grid: (usize, usize),
    pub channels: usize,
}

impl TokenMap {
    /// Wraps `tokens`, checking that its shape is `(b, h * w, c)`.
    pub fn new<T: Scalar>(g: &Graph<T>, tokens: Var, grid: (usize, usize)) -> Result<Self> {
        match *g.shape(tokens) {
            [b, n, c] if n == grid.0 * grid.1 => Ok(TokenMap {
                tokens,
                batch: b,
                grid,
                channels: c,
            }),
            ref s => Err(Error::Dimension(format!(
                "tokens {s:?} do not form a {}x{} grid",
                grid.0, grid.1
            ))),
        }
    }

    /// Interprets an NHWC feature map as tokens in raster order.
    pub fn from_spatial<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Self> {
        match *g.shape(x) {
            [b, h, w, c] => {
                let tokens = g.reshape(x, &[b, h * w, c])?;
                Ok(TokenMap {
                    tokens,
                    batch: b,
                    grid: (h, w),
                    channels: c,
                })
            }
            ref s => Err(Error::Dimension(format!("expected NHWC map, got {s:?}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.len(), self.channels]
    }

    /// The same values as an NHWC map `(b, h, w, c)`.
    pub fn to_spatial<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Var> {
        Ok(g.reshape(
            self.tokens,
            &[self.batch, self.grid.0, self.grid.1, self.channels],
        )?)
    }

    pub fn with_tokens<T: Scalar>(&self, g: &Graph<T>, tokens: Var) -> Result<Self> {
        TokenMap::new(g, tokens, self.grid)
    }
}
