//! Building blocks shared by the three subnetworks.

mod attention;
mod decoder;
mod embedding;
mod encoder;

pub use attention::{AttentionMask, MaskKind, MultiHeadAttention};
pub use decoder::{DecoderLayer, DecoderState, Source, TransformerDecoder};
pub use embedding::{embed_tokens, position_row, sinusoidal_positions};
pub use encoder::{ConformerBlock, EncoderKind, EncoderStack, TransformerEncoderLayer};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub conv_kernel: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            dim: 64,
            heads: 2,
            ffn_dim: 128,
            dropout: 0.1,
            conv_kernel: 7,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::KernelSize(self.conv_kernel));
        }
        Ok(())
    }
}

/// Glorot-uniform matrix.
pub(crate) fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), glorot(rng, in_dim, out_dim))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(s, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(s, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let gm = g.param(s, self.gamma);
        let bt = g.param(s, self.beta);
        g.layer_norm(x, gm, bt, LN_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub act: Activation,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        act: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng)?,
            act,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, dropout: f64) -> Result<Var> {
        let h = self.up.forward(g, s, x)?;
        let h = match self.act {
            Activation::Relu => g.relu(h),
            Activation::Silu => g.silu(h),
        };
        let h = g.dropout(h, dropout)?;
        self.down.forward(g, s, h)
    }
}

/// Sets every value of a parameter to zero.
pub fn zero_param(store: &mut ParamStore, id: ParamId) {
    store.value_mut(id).data_mut().fill(0.0);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_config_validation() {
        assert!(BlockConfig::default().validate().is_ok());
        let bad = BlockConfig {
            heads: 3,
            ..BlockConfig::default()
        };
        assert!(bad.validate().is_err());
        let even = BlockConfig {
            conv_kernel: 4,
            ..BlockConfig::default()
        };
        assert!(matches!(even.validate(), Err(Error::KernelSize(4))));
    }
}
