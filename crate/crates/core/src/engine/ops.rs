//! Dense building blocks shared by the simulator and the rate proxy.

use crate::numerics::Matrix;

pub(crate) const LN_EPS: f64 = 1e-5;

/// `x · W + b` where `x` is a binary spike matrix; only rows of `W` selected
/// by a spike are accumulated.
pub(crate) fn spike_matmul(spikes: &Matrix, w: &Matrix, bias: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(spikes.rows(), w.cols());
    for r in 0..spikes.rows() {
        let o = out.row_mut(r);
        o.copy_from_slice(bias);
        for (j, &s) in spikes.row(r).iter().enumerate() {
            if s != 0.0 {
                for (acc, &wv) in o.iter_mut().zip(w.row(j)) {
                    *acc += s * wv;
                }
            }
        }
    }
    out
}

/// `x · W + b` for real-valued `x`.
pub(crate) fn affine(x: &Matrix, w: &Matrix, bias: &[f64]) -> Matrix {
    let mut out = x.matmul(w);
    out.add_row_bias(bias);
    out
}

/// Per-head scaled dot-product attention of real queries over key and value
/// rates. Returns the concatenated context (before head masks) and each
/// head's row-softmax probabilities.
pub(crate) fn attention(q: &Matrix, k: &Matrix, v: &Matrix, head_dim: usize) -> (Matrix, Vec<Matrix>) {
    let n = q.rows();
    let heads = q.cols() / head_dim;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut ctx = Matrix::zeros(n, q.cols());
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let off = h * head_dim;
        let mut p = Matrix::zeros(n, n);
        for i in 0..n {
            let qi = &q.row(i)[off..off + head_dim];
            let row = p.row_mut(i);
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &k.row(j)[off..off + head_dim];
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(row);
        }
        for i in 0..n {
            let out = &mut ctx.row_mut(i)[off..off + head_dim];
            for j in 0..n {
                let pij = p.get(i, j);
                if pij != 0.0 {
                    for (o, &vv) in out.iter_mut().zip(&v.row(j)[off..off + head_dim]) {
                        *o += pij * vv;
                    }
                }
            }
        }
        probs.push(p);
    }
    (ctx, probs)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise layer normalization. Returns the output, the normalized input and
/// each row's inverse standard deviation.
pub(crate) fn layer_norm(z: &Matrix, gain: &[f64], shift: &[f64]) -> (Matrix, Matrix, Vec<f64>) {
    let d = z.cols() as f64;
    let mut out = Matrix::zeros(z.rows(), z.cols());
    let mut xhat = Matrix::zeros(z.rows(), z.cols());
    let mut inv_std = Vec::with_capacity(z.rows());
    for r in 0..z.rows() {
        let row = z.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xr = xhat.row_mut(r);
        for (x, &v) in xr.iter_mut().zip(row) {
            *x = (v - mean) * is;
        }
        let orow = out.row_mut(r);
        for (c, o) in orow.iter_mut().enumerate() {
            *o = xhat.get(r, c) * gain[c] + shift[c];
        }
    }
    (out, xhat, inv_std)
}

/// Steady-state rate of a population driven by constant current `c`.
pub(crate) fn clip_rate(c: f64, vth: f64) -> f64 {
    (c / vth).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spike_matmul_matches_dense() {
        let s = Matrix::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let b = [0.5, -0.5];
        assert_eq!(spike_matmul(&s, &w, &b), affine(&s, &w, &b));
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut r = [1.0, 2.0, 3.0, 1000.0];
        softmax_in_place(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r[3] > 0.999);
    }

    #[test]
    fn uniform_keys_average_values() {
        let q = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 3.0]]).unwrap();
        let k = Matrix::zeros(2, 2);
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (ctx, p) = attention(&q, &k, &v, 1);
        assert_eq!(p.len(), 2);
        assert!(ctx.data().iter().all(|&x| (x - 0.5).abs() < 1e-12));
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let z = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let (out, _, _) = layer_norm(&z, &[1.0; 4], &[0.0; 4]);
        let mean: f64 = out.row(0).iter().sum::<f64>() / 4.0;
        let var: f64 = out.row(0).iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
