// Plain loop kernels. Every output element is accumulated over the inner
// index in ascending order regardless of the row count, so computing one row
// alone gives bit-identical results to computing it inside a larger batch.

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3×4
        let mut out = vec![0.0; 8];
        matmul_acc(&a, &b, &mut out, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let e: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert!((out[i * 4 + j] - e).abs() < 1e-12);
            }
        }
        // b as 4×3 for the NT form
        let mut nt = vec![0.0; 8];
        matmul_nt_acc(&a, &b, &mut nt, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let e: f64 = (0..3).map(|k| a[i * 3 + k] * b[j * 3 + k]).sum();
                assert!((nt[i * 4 + j] - e).abs() < 1e-12);
            }
        }
        // aᵀ (3×2) · c (2×4)
        let c: Vec<f64> = (0..8).map(|v| v as f64 * 0.5).collect();
        let mut tn = vec![0.0; 12];
        matmul_tn_acc(&a, &c, &mut tn, 2, 3, 4);
        for k in 0..3 {
            for j in 0..4 {
                let e: f64 = (0..2).map(|i| a[i * 3 + k] * c[i * 4 + j]).sum();
                assert!((tn[k * 4 + j] - e).abs() < 1e-12);
            }
        }
    }
}
