use rand::Rng;

use super::Linear;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    None,
    Causal,
    Padding,
    Both,
}

/// Which keys each query may attend to.
///
/// `valid_len` bounds the keys for padding masks; `query_offset` is the
/// absolute position of query row 0 (non-zero during incremental decoding).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub kind: MaskKind,
    pub valid_len: usize,
    pub query_offset: usize,
}

impl AttentionMask {
    pub fn none() -> Self {
        AttentionMask {
            kind: MaskKind::None,
            valid_len: usize::MAX,
            query_offset: 0,
        }
    }

    pub fn causal() -> Self {
        AttentionMask {
            kind: MaskKind::Causal,
            ..AttentionMask::none()
        }
    }

    pub fn padding(valid_len: usize) -> Self {
        AttentionMask {
            kind: MaskKind::Padding,
            valid_len,
            query_offset: 0,
        }
    }

    pub fn both(valid_len: usize) -> Self {
        AttentionMask {
            kind: MaskKind::Both,
            valid_len,
            query_offset: 0,
        }
    }

    fn causal_part(&self) -> bool {
        matches!(self.kind, MaskKind::Causal | MaskKind::Both)
    }

    fn padding_part(&self) -> bool {
        matches!(self.kind, MaskKind::Padding | MaskKind::Both)
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        (!self.causal_part() || k <= q + self.query_offset)
            && (!self.padding_part() || k < self.valid_len)
    }

    pub fn is_trivial(&self, k_len: usize) -> bool {
        match self.kind {
            MaskKind::None => true,
            MaskKind::Padding => self.valid_len >= k_len,
            _ => false,
        }
    }

    /// Row-major q_len × k_len table of allowed pairs.
    pub fn table(&self, q_len: usize, k_len: usize) -> Vec<bool> {
        let mut t = Vec::with_capacity(q_len * k_len);
        for q in 0..q_len {
            for k in 0..k_len {
                t.push(self.allows(q, k));
            }
        }
        t
    }

    /// Per-row validity for conv paths that zero padded rows.
    pub fn row_valid(&self, len: usize) -> Option<Vec<bool>> {
        if self.padding_part() && self.valid_len < len {
            Some((0..len).map(|i| i < self.valid_len).collect())
        } else {
            None
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, true, rng)?,
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, true, rng)?,
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, true, rng)?,
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, true, rng)?,
            heads,
            dim,
        })
    }

    fn check_width(&self, g: &Graph, x: Var) -> Result<()> {
        if g.value(x).cols() != self.dim {
            return Err(Error::dim("multi_head_attention", &[self.dim], g.shape(x)));
        }
        Ok(())
    }

    /// Key and value projections of a memory sequence.
    pub fn project_kv(&self, g: &mut Graph, s: &ParamStore, kv: Var) -> Result<(Var, Var)> {
        self.check_width(g, kv)?;
        let k = self.wk.forward(g, s, kv)?;
        let v = self.wv.forward(g, s, kv)?;
        Ok((k, v))
    }

    /// Concatenated per-head attention outputs before the output projection.
    pub fn context(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        q_in: Var,
        k: Var,
        v: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        self.check_width(g, q_in)?;
        if g.value(k).rows() != g.value(v).rows() {
            return Err(Error::dim("multi_head_attention", g.shape(k), g.shape(v)));
        }
        let q = self.wq.forward(g, s, q_in)?;
        let (lq, lk) = (g.value(q).rows(), g.value(k).rows());
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let table = (!mask.is_trivial(lk)).then(|| mask.table(lq, lk));
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let w = match &table {
                Some(t) => g.masked_softmax(scores, t)?,
                None => g.softmax(scores)?,
            };
            outs.push(g.matmul(w, vh)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat_cols(&outs)
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        q_in: Var,
        kv_in: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let (k, v) = self.project_kv(g, s, kv_in)?;
        self.attend(g, s, q_in, k, v, mask)
    }

    /// Attention against already projected keys and values.
    pub fn attend(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        q_in: Var,
        k: Var,
        v: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let ctx = self.context(g, s, q_in, k, v, mask)?;
        self.wo.forward(g, s, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_attention(dim: usize, heads: usize) -> (ParamStore, MultiHeadAttention) {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = MultiHeadAttention::new(&mut s, "a", dim, heads, &mut rng).unwrap();
        for l in [&a.wq, &a.wk, &a.wv, &a.wo] {
            *s.value_mut(l.weight) = Tensor::identity(dim);
            s.value_mut(l.bias.unwrap()).data_mut().fill(0.0);
        }
        (s, a)
    }

    #[test]
    fn single_key_returns_value_row() {
        let (s, a) = identity_attention(3, 1);
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(1, 3, vec![0.3, -1.0, 2.0]).unwrap());
        let kv = g.constant(Tensor::matrix(1, 3, vec![5.0, 6.0, 7.0]).unwrap());
        let o = a.forward(&mut g, &s, q, kv, &AttentionMask::none()).unwrap();
        assert_eq!(g.value(o).data(), &[5.0, 6.0, 7.0]);
    }

    #[test]
    fn identical_keys_split_weight_evenly() {
        let (s, a) = identity_attention(2, 1);
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(1, 2, vec![4.0, -3.0]).unwrap());
        let kv = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap());
        let (k, _) = a.project_kv(&mut g, &s, kv).unwrap();
        let qp = a.wq.forward(&mut g, &s, q).unwrap();
        let sc = g.matmul_nt(qp, k).unwrap();
        let w = g.softmax(sc).unwrap();
        assert_eq!(g.value(w).data(), &[0.5, 0.5]);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let (s, a) = identity_attention(4, 2);
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[1, 3]));
        let kv = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            a.forward(&mut g, &s, q, kv, &AttentionMask::none()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn causal_outputs_ignore_future_positions() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = MultiHeadAttention::new(&mut s, "a", 4, 2, &mut rng).unwrap();
        let base: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect();
        let run = |x: Vec<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(Tensor::matrix(5, 4, x).unwrap());
            let o = a.forward(&mut g, &s, xv, xv, &AttentionMask::causal()).unwrap();
            g.value(o).clone()
        };
        let y0 = run(base.clone());
        let mut pert = base.clone();
        for v in &mut pert[12..] {
            *v += 3.7;
        }
        let y1 = run(pert);
        assert_eq!(&y0.data()[..12], &y1.data()[..12]);
        assert_ne!(&y0.data()[12..], &y1.data()[12..]);
    }

    #[test]
    fn attention_rows_sum_to_one_over_unmasked_keys() {
        let m = AttentionMask::both(3);
        let t = m.table(4, 5);
        assert!(!t[1]);
        assert!(t[3 * 5 + 2]);
        assert!(!t[3 * 5 + 3]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(4, 5, (0..20).map(|v| v as f64 * 0.1).collect()).unwrap());
        let w = g.masked_softmax(x, &t).unwrap();
        for r in 0..4 {
            let s: f64 = g.value(w).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
