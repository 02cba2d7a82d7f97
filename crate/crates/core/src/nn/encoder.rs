use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    Activation, AttentionMask, BlockConfig, FeedForward, LayerNorm, Linear, MultiHeadAttention,
};
use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct TransformerEncoderLayer {
    pub attn_ln: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn_ln: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

impl TransformerEncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(TransformerEncoderLayer {
            attn_ln: LayerNorm::new(store, &format!("{name}.attn_ln"), cfg.dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.dim, cfg.heads, rng)?,
            ffn_ln: LayerNorm::new(store, &format!("{name}.ffn_ln"), cfg.dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.dim, cfg.ffn_dim, Activation::Relu, rng)?,
            dropout: cfg.dropout,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, mask: &AttentionMask) -> Result<Var> {
        let h = self.attn_ln.forward(g, s, x)?;
        let h = self.attn.forward(g, s, h, h, mask)?;
        let h = g.dropout(h, self.dropout)?;
        let x = g.add(x, h)?;
        let h = self.ffn_ln.forward(g, s, x)?;
        let h = self.ffn.forward(g, s, h, self.dropout)?;
        let h = g.dropout(h, self.dropout)?;
        g.add(x, h)
    }
}

/// Macaron block: half FFN, self-attention, convolution module, half FFN,
/// final layer norm.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ffn1_ln: LayerNorm,
    pub ffn1: FeedForward,
    pub attn_ln: LayerNorm,
    pub attn: MultiHeadAttention,
    pub conv_ln: LayerNorm,
    pub pw_in: Linear,
    pub depthwise: ParamId,
    pub pw_out: Linear,
    pub ffn2_ln: LayerNorm,
    pub ffn2: FeedForward,
    pub out_ln: LayerNorm,
    pub dropout: f64,
}

impl ConformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let k = cfg.conv_kernel;
        let a = (3.0 / k as f64).sqrt();
        let kernel = Tensor::matrix(k, d, (0..k * d).map(|_| rng.random_range(-a..a)).collect())?;
        Ok(ConformerBlock {
            ffn1_ln: LayerNorm::new(store, &format!("{name}.ffn1_ln"), d)?,
            ffn1: FeedForward::new(store, &format!("{name}.ffn1"), d, cfg.ffn_dim, Activation::Silu, rng)?,
            attn_ln: LayerNorm::new(store, &format!("{name}.attn_ln"), d)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.heads, rng)?,
            conv_ln: LayerNorm::new(store, &format!("{name}.conv_ln"), d)?,
            pw_in: Linear::new(store, &format!("{name}.conv.pw_in"), d, 2 * d, true, rng)?,
            depthwise: store.add(format!("{name}.conv.depthwise"), kernel)?,
            pw_out: Linear::new(store, &format!("{name}.conv.pw_out"), d, d, true, rng)?,
            ffn2_ln: LayerNorm::new(store, &format!("{name}.ffn2_ln"), d)?,
            ffn2: FeedForward::new(store, &format!("{name}.ffn2"), d, cfg.ffn_dim, Activation::Silu, rng)?,
            out_ln: LayerNorm::new(store, &format!("{name}.out_ln"), d)?,
            dropout: cfg.dropout,
        })
    }

    fn half_ffn(&self, g: &mut Graph, s: &ParamStore, x: Var, ln: &LayerNorm, ffn: &FeedForward) -> Result<Var> {
        let h = ln.forward(g, s, x)?;
        let h = ffn.forward(g, s, h, self.dropout)?;
        let h = g.dropout(h, self.dropout)?;
        let h = g.scale(h, 0.5);
        g.add(x, h)
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, mask: &AttentionMask) -> Result<Var> {
        let x = self.half_ffn(g, s, x, &self.ffn1_ln, &self.ffn1)?;

        let h = self.attn_ln.forward(g, s, x)?;
        let h = self.attn.forward(g, s, h, h, mask)?;
        let h = g.dropout(h, self.dropout)?;
        let x = g.add(x, h)?;

        let h = self.conv_ln.forward(g, s, x)?;
        let h = self.pw_in.forward(g, s, h)?;
        let mut h = g.glu(h)?;
        // Padded rows must not leak into valid rows through the kernel.
        if let Some(valid) = mask.row_valid(g.value(h).rows()) {
            h = g.mask_rows(h, &valid)?;
        }
        let kernel = g.param(s, self.depthwise);
        let h = g.depthwise_conv1d(h, kernel)?;
        let h = g.silu(h);
        let h = self.pw_out.forward(g, s, h)?;
        let h = g.dropout(h, self.dropout)?;
        let x = g.add(x, h)?;

        let x = self.half_ffn(g, s, x, &self.ffn2_ln, &self.ffn2)?;
        self.out_ln.forward(g, s, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Transformer,
    Conformer,
}

#[derive(Clone, Debug)]
enum Layer {
    Transformer(TransformerEncoderLayer),
    Conformer(ConformerBlock),
}

/// A stack of encoder layers. Transformer stacks end with a layer norm since
/// their layers are pre-norm; conformer blocks normalise their own output.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub kind: EncoderKind,
    layers: Vec<Layer>,
    final_ln: Option<LayerNorm>,
}

impl EncoderStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: EncoderKind,
        n_layers: usize,
        cfg: &BlockConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let lname = format!("{name}.layer{i}");
            layers.push(match kind {
                EncoderKind::Transformer => Layer::Transformer(TransformerEncoderLayer::new(store, &lname, cfg, rng)?),
                EncoderKind::Conformer => Layer::Conformer(ConformerBlock::new(store, &lname, cfg, rng)?),
            });
        }
        let final_ln = match kind {
            EncoderKind::Transformer => Some(LayerNorm::new(store, &format!("{name}.final_ln"), cfg.dim)?),
            EncoderKind::Conformer => None,
        };
        Ok(EncoderStack { kind, layers, final_ln })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, mut x: Var, mask: &AttentionMask) -> Result<Var> {
        for layer in &self.layers {
            x = match layer {
                Layer::Transformer(l) => l.forward(g, s, x, mask)?,
                Layer::Conformer(l) => l.forward(g, s, x, mask)?,
            };
        }
        match &self.final_ln {
            Some(ln) => ln.forward(g, s, x),
            None => Ok(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_param;
    use crate::tensor::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> BlockConfig {
        BlockConfig {
            dim: 4,
            heads: 2,
            ffn_dim: 6,
            dropout: 0.0,
            conv_kernel: 3,
        }
    }

    fn input(rows: usize, cols: usize, shift: f64) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|i| ((i * 5) % 7) as f64 * 0.4 - 1.2 + shift).collect())
            .unwrap()
    }

    #[test]
    fn zeroed_output_projections_give_identity() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = TransformerEncoderLayer::new(&mut s, "e", &small_cfg(), &mut rng).unwrap();
        for id in [l.attn.wo.weight, l.attn.wo.bias.unwrap(), l.ffn.down.weight, l.ffn.down.bias.unwrap()] {
            zero_param(&mut s, id);
        }
        let mut g = Graph::new();
        let x = g.constant(input(3, 4, 0.0));
        let y = l.forward(&mut g, &s, x, &AttentionMask::none()).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(x)) < 1e-12);
    }

    #[test]
    fn transformer_padding_invariance() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = TransformerEncoderLayer::new(&mut s, "e", &small_cfg(), &mut rng).unwrap();
        let run = |x: Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x);
            let y = l.forward(&mut g, &s, xv, &AttentionMask::padding(3)).unwrap();
            g.value(y).clone()
        };
        let a = input(5, 4, 0.0);
        let mut b = a.clone();
        for v in &mut b.data_mut()[12..] {
            *v = -9.0;
        }
        assert_eq!(&run(a).data()[..12], &run(b).data()[..12]);
    }

    #[test]
    fn transformer_output_finite_on_large_inputs() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = TransformerEncoderLayer::new(&mut s, "e", &small_cfg(), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = Tensor::matrix(6, 4, (0..24).map(|_| rng.random_range(-10.0..10.0)).collect()).unwrap();
        let xv = g.constant(x);
        let y = l.forward(&mut g, &s, xv, &AttentionMask::none()).unwrap();
        assert!(g.value(y).is_finite());
    }

    #[test]
    fn conformer_preserves_shape_and_respects_padding() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = ConformerBlock::new(&mut s, "c", &small_cfg(), &mut rng).unwrap();
        let run = |x: Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x);
            let y = c.forward(&mut g, &s, xv, &AttentionMask::padding(4)).unwrap();
            g.value(y).clone()
        };
        let a = input(6, 4, 0.0);
        let mut b = a.clone();
        for v in &mut b.data_mut()[16..] {
            *v += 5.0;
        }
        let (ya, yb) = (run(a), run(b));
        assert_eq!(ya.shape(), &[6, 4]);
        assert_eq!(&ya.data()[..16], &yb.data()[..16]);
    }

    #[test]
    fn even_kernel_rejected() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = BlockConfig {
            conv_kernel: 4,
            ..small_cfg()
        };
        assert!(matches!(
            ConformerBlock::new(&mut s, "c", &cfg, &mut rng),
            Err(crate::Error::KernelSize(4))
        ));
    }

    #[test]
    fn conformer_stack_gradients() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let stack = EncoderStack::new(&mut s, "enc", EncoderKind::Conformer, 2, &small_cfg(), &mut rng).unwrap();
        let x = input(5, 4, 0.1);
        let w = input(5, 4, -0.3);
        let r = grad_check_params(
            &mut s,
            |g, s| {
                let xv = g.constant(x.clone());
                let y = stack.forward(g, s, xv, &AttentionMask::none())?;
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                Ok(g.sum(p))
            },
            400,
            9,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
