use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Row `pos` of the sinusoidal table: interleaved `sin(pos·r_i), cos(pos·r_i)`
/// with `r_i = 10000^(−2i/dim)`.
pub fn position_row(pos: usize, dim: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let rate = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let a = pos as f64 * rate;
        row.push(a.sin());
        row.push(a.cos());
    }
    row
}

pub fn sinusoidal_positions(length: usize, dim: usize) -> Result<Tensor> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("positional dim {dim} must be even")));
    }
    let mut data = Vec::with_capacity(length * dim);
    for p in 0..length {
        data.extend(position_row(p, dim));
    }
    Tensor::matrix(length, dim, data)
}

/// Token rows of `table` times `scale`, plus positions starting at `offset`.
pub fn embed_tokens(
    g: &mut Graph,
    s: &ParamStore,
    table: ParamId,
    tokens: &[usize],
    scale: f64,
    offset: usize,
) -> Result<Var> {
    let t = g.param(s, table);
    let dim = g.value(t).cols();
    let rows = g.gather_rows(t, tokens)?;
    let rows = g.scale(rows, scale);
    let mut pos = Vec::with_capacity(tokens.len() * dim);
    for p in 0..tokens.len() {
        pos.extend(position_row(offset + p, dim));
    }
    let pos = g.constant(Tensor::matrix(tokens.len(), dim, pos)?);
    g.add(rows, pos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_alternates_zero_one() {
        let t = sinusoidal_positions(3, 6).unwrap();
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn dim_four_position_one() {
        let r = position_row(1, 4);
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in r.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(sinusoidal_positions(2, 5).is_err());
    }

    #[test]
    fn embedding_matches_one_hot_product() {
        let mut s = ParamStore::new();
        let table = Tensor::matrix(3, 4, (0..12).map(|v| v as f64 * 0.25 - 1.0).collect()).unwrap();
        let id = s.add("emb", table).unwrap();
        let mut g = Graph::new();
        let e = embed_tokens(&mut g, &s, id, &[2, 0], 2.0, 0).unwrap();
        let onehot = g.constant(Tensor::matrix(2, 3, vec![0., 0., 1., 1., 0., 0.]).unwrap());
        let t = g.param(&s, id);
        let m = g.matmul(onehot, t).unwrap();
        let m = g.scale(m, 2.0);
        let pos = g.constant(sinusoidal_positions(2, 4).unwrap());
        let want = g.add(m, pos).unwrap();
        assert_eq!(g.value(e).data(), g.value(want).data());

        let again = embed_tokens(&mut g, &s, id, &[2, 0], 2.0, 0).unwrap();
        assert_eq!(g.value(e).data(), g.value(again).data());
    }

    #[test]
    fn empty_and_out_of_range_tokens() {
        let mut s = ParamStore::new();
        let id = s.add("emb", Tensor::zeros(&[3, 2])).unwrap();
        let mut g = Graph::new();
        let e = embed_tokens(&mut g, &s, id, &[], 1.0, 0).unwrap();
        assert_eq!(g.value(e).rows(), 0);
        assert!(matches!(
            embed_tokens(&mut g, &s, id, &[3], 1.0, 0),
            Err(Error::Vocabulary { id: 3, size: 3 })
        ));
    }
}
