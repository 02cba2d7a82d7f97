//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Gradient check of `op` at standard-normal inputs of the given shapes.
/// Non-scalar outputs are reduced with fixed random weights.
pub fn grad_check<F>(op: F, input_shapes: &[&[usize]], seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = input_shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::new(s, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
        })
        .collect();
    grad_check_at(op, inputs, seed)
}

/// Gradient check of `op` at the given inputs, every coordinate.
pub fn grad_check_at<F>(op: F, inputs: Vec<Tensor>, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut weights: Option<Vec<f64>> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut eval = |inputs: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        let n = g.value(out).numel();
        let w = weights
            .get_or_insert_with(|| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .clone();
        let wv = g.constant(Tensor::new(g.shape(out), w)?);
        let prod = g.mul(out, wv)?;
        let loss = g.sum(prod);
        let value = g.value(loss).item();
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let gs = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| {
                grads
                    .get(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        Ok((value, gs))
    };

    let (_, analytic) = eval(&inputs, true)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        coordinates: 0,
    };
    let mut flat = 0;
    let mut work = inputs.clone();
    for (ti, t) in inputs.iter().enumerate() {
        for ci in 0..t.numel() {
            let a = analytic[ti][ci];
            if !a.is_finite() {
                return Err(Error::GradCheck {
                    index: flat,
                    detail: format!("non-finite analytic gradient {a}"),
                });
            }
            let orig = t.data()[ci];
            work[ti].data_mut()[ci] = orig + FD_STEP;
            let (fp, _) = eval(&work, false)?;
            work[ti].data_mut()[ci] = orig - FD_STEP;
            let (fm, _) = eval(&work, false)?;
            work[ti].data_mut()[ci] = orig;
            let num = (fp - fm) / (2.0 * FD_STEP);
            let e = relative_error(a, num);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst_index = flat;
            }
            report.coordinates += 1;
            flat += 1;
        }
    }
    Ok(report)
}

/// Gradient check of a scalar loss with respect to the parameters of `store`.
/// At most `max_coords` coordinates are probed, sampled with `seed`; pass
/// `usize::MAX` to probe every coordinate.
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    loss_fn: F,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let grads = g.backward(loss)?;
    store.zero_grad();
    store.accumulate(&g, &grads, 1.0);

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pi, p) in store.params().iter().enumerate() {
        for ci in 0..p.value().numel() {
            coords.push((pi, ci));
        }
    }
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..max_coords {
            let j = rng.random_range(i..coords.len());
            coords.swap(i, j);
        }
        coords.truncate(max_coords);
    }

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, store)?;
        Ok(g.value(l).item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        coordinates: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for (k, &(pi, ci)) in coords.iter().enumerate() {
        let id = ids[pi];
        let a = store.grad(id).data()[ci];
        if !a.is_finite() {
            return Err(Error::GradCheck {
                index: k,
                detail: format!("non-finite analytic gradient for {}", store.params()[pi].name),
            });
        }
        let orig = store.value(id).data()[ci];
        store.value_mut(id).data_mut()[ci] = orig + FD_STEP;
        let fp = eval(store)?;
        store.value_mut(id).data_mut()[ci] = orig - FD_STEP;
        let fm = eval(store)?;
        store.value_mut(id).data_mut()[ci] = orig;
        let num = (fp - fm) / (2.0 * FD_STEP);
        let e = relative_error(a, num);
        if e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst_index = k;
        }
        report.coordinates += 1;
    }
    store.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-4;

    fn check<F: Fn(&mut Graph, &[Var]) -> Result<Var>>(f: F, shapes: &[&[usize]]) {
        for seed in 0..3 {
            let r = grad_check(&f, shapes, seed).unwrap();
            assert!(r.max_rel_error < TOL, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn matmul_grad() {
        check(|g, v| g.matmul(v[0], v[1]), &[&[3, 4], &[4, 2]]);
        check(|g, v| g.matmul_nt(v[0], v[1]), &[&[3, 4], &[5, 4]]);
    }

    #[test]
    fn softmax_grad() {
        check(|g, v| g.softmax(v[0]), &[&[5]]);
        check(|g, v| g.softmax_axis(v[0], 0), &[&[3, 4]]);
        check(
            |g, v| g.masked_softmax(v[0], &[true, false, true, true, true, false]),
            &[&[2, 3]],
        );
        check(|g, v| g.log_softmax(v[0]), &[&[2, 5]]);
    }

    #[test]
    fn layer_norm_grad() {
        check(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), &[&[3, 8], &[8], &[8]]);
    }

    #[test]
    fn elementwise_grads() {
        check(|g, v| Ok(g.silu(v[0])), &[&[2, 3]]);
        check(|g, v| Ok(g.sigmoid(v[0])), &[&[2, 3]]);
        check(|g, v| g.glu(v[0]), &[&[2, 6]]);
        check(|g, v| g.mul(v[0], v[1]), &[&[2, 3], &[2, 3]]);
        check(|g, v| g.sub(v[0], v[1]), &[&[2, 3], &[2, 3]]);
        check(|g, v| g.add_bias(v[0], v[1]), &[&[4, 3], &[3]]);
        check(|g, v| g.scale_by(v[0], v[1]), &[&[2, 3], &[1]]);
        check(|g, v| g.transpose(v[0]), &[&[2, 3]]);
        check(|g, v| Ok(g.mean(v[0])), &[&[2, 3]]);
    }

    #[test]
    fn relu_grad_away_from_kink() {
        let x = Tensor::matrix(2, 2, vec![0.5, -0.7, 1.3, -2.0]).unwrap();
        let r = grad_check_at(|g, v| Ok(g.relu(v[0])), vec![x], 0).unwrap();
        assert!(r.max_rel_error < TOL);
    }

    #[test]
    fn structural_grads() {
        check(|g, v| g.depthwise_conv1d(v[0], v[1]), &[&[6, 3], &[5, 3]]);
        check(|g, v| g.concat_rows(&[v[0], v[1]]), &[&[2, 3], &[1, 3]]);
        check(|g, v| g.concat_cols(&[v[0], v[1]]), &[&[2, 3], &[2, 1]]);
        check(|g, v| g.slice_rows(v[0], 1, 2), &[&[4, 3]]);
        check(|g, v| g.slice_cols(v[0], 1, 2), &[&[4, 3]]);
        check(|g, v| g.gather_rows(v[0], &[2, 0, 2]), &[&[3, 4]]);
        check(|g, v| g.mask_rows(v[0], &[true, false, true]), &[&[3, 2]]);
    }

    #[test]
    fn cross_entropy_grad() {
        check(|g, v| g.cross_entropy(v[0], &[1, 0, 3], 0.1, None), &[&[3, 4]]);
        check(|g, v| g.cross_entropy(v[0], &[1, 9, 3], 0.0, Some(9)), &[&[3, 4]]);
    }

    #[test]
    fn nonfinite_gradient_is_reported() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = grad_check_at(
            |g, v| {
                let big = g.scale(v[0], f64::INFINITY);
                Ok(g.sum(big))
            },
            vec![x],
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::GradCheck { index: 0, .. }));
    }
}
