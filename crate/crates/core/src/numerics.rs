//! Dense row-major matrices, symmetric eigenvalues, PCA component counting,
//! seeded random streams and a central-difference gradient helper.
//!
//! Everything here is small and deliberately plain: the models this crate
//! simulates have hidden sizes in the tens, so a cache-friendly triple loop is
//! all the linear algebra that is needed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};

use crate::error::{invalid, shape, Error, Result};

/// A dense matrix stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "entry ({}, {}) is {}",
                pos / cols.max(1),
                pos % cols.max(1),
                data[pos]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(shape(format!(
                "row {bad} has {} entries, expected {cols}",
                rows[bad].len()
            )));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other`, used for weight gradients.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul shared dimension");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let b_row = other.row(r);
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`, used to push gradients back through a weight.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t shared dimension");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let a_row = self.row(r);
            for k in 0..other.rows {
                out.data[r * other.rows + k] = dot(a_row, other.row(k));
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shapes");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_row_bias(&mut self, bias: &[f64]) {
        assert_eq!(self.cols, bias.len(), "bias length");
        for r in 0..self.rows {
            for (v, b) in self.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
    }

    /// Column sums, i.e. the gradient of a broadcast row bias.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    /// Copies the listed columns into a new matrix.
    pub fn select_columns(&self, cols: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, cols.len());
        for r in 0..self.rows {
            for (j, &c) in cols.iter().enumerate() {
                out.data[r * cols.len() + j] = self.get(r, c);
            }
        }
        out
    }

    /// Copies the listed rows into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A seeded ChaCha20 stream.
///
/// ChaCha20 is a counter-based generator: the output depends only on the
/// 64-bit seed, the 64-bit stream id and the position in the stream, so the
/// same draws come out on every platform. Child streams for samples, epochs
/// and so on are derived with [`RandomStream::derive`] rather than by sharing
/// one generator.
#[derive(Clone, Debug)]
pub struct RandomStream {
    seed: u64,
    stream: u64,
    rng: ChaCha20Rng,
}

impl RandomStream {
    pub const ALGORITHM: &'static str = "chacha20";

    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// A fresh stream keyed by `(seed, parent stream, tag)`; independent of how
    /// many values the parent has already produced.
    pub fn derive(&self, tag: u64) -> Self {
        let mut z = self
            .stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(tag.wrapping_add(1));
        // splitmix64 finalizer
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        Self::with_stream(self.seed, z)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn binomial(&mut self, trials: u64, p: f64) -> u64 {
        if p <= 0.0 || trials == 0 {
            return 0;
        }
        if p >= 1.0 {
            return trials;
        }
        Binomial::new(trials, p)
            .expect("probability checked above")
            .sample(&mut self.rng)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted in
/// descending order.
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    let n = m.rows();
    if m.cols() != n {
        return Err(shape(format!("eigenvalues need a square matrix, got {:?}", m.shape())));
    }
    let mut a = m.clone();
    for sweep in 0..100 {
        let mut off = 0.0;
        let mut diag = 0.0;
        for i in 0..n {
            diag += a.get(i, i).powi(2);
            for j in (i + 1)..n {
                off += a.get(i, j).powi(2);
            }
        }
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) || off == 0.0 {
            break;
        }
        if sweep == 99 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    Ok(eig)
}

/// Number of principal components of `x` (rows are observations, columns
/// variables) needed to explain at least `variance_threshold` of the total
/// variance. Columns are centered, not scaled. Zero total variance counts as
/// one component.
pub fn pca_component_count(x: &Matrix, variance_threshold: f64) -> Result<usize> {
    if !(variance_threshold > 0.0 && variance_threshold <= 1.0) {
        return Err(invalid(format!(
            "variance threshold must lie in (0, 1], got {variance_threshold}"
        )));
    }
    if x.rows() < 2 {
        return Err(invalid(format!(
            "PCA needs at least two observations, got {}",
            x.rows()
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("PCA input contains non-finite entries".into()));
    }
    let (rows, cols) = x.shape();
    let mut centered = x.clone();
    for c in 0..cols {
        let first = x.get(0, c);
        let constant = (1..rows).all(|r| x.get(r, c) == first);
        let mean = if constant {
            first
        } else {
            (0..rows).map(|r| x.get(r, c)).sum::<f64>() / rows as f64
        };
        for r in 0..rows {
            centered.set(r, c, x.get(r, c) - mean);
        }
    }
    // The nonzero spectrum of XᵀX equals that of XXᵀ; use the smaller one.
    let gram = if cols <= rows {
        centered.t_matmul(&centered)
    } else {
        centered.matmul_t(&centered)
    };
    let eig = symmetric_eigenvalues(&gram)?;
    let eig: Vec<f64> = eig.into_iter().map(|v| v.max(0.0)).collect();
    let total: f64 = eig.iter().sum();
    if total == 0.0 {
        return Ok(1);
    }
    let target = variance_threshold * total * (1.0 - 1e-12);
    let mut acc = 0.0;
    for (k, v) in eig.iter().enumerate() {
        acc += v;
        if acc >= target {
            return Ok(k + 1);
        }
    }
    Ok(eig.len())
}

/// Samples a `t × units` spike matrix where column `i` is an independent
/// Bernoulli train with probability `p[i]` (entries of `p` taken row-major).
pub fn bernoulli_matrix(p: &Matrix, t: usize, stream: &mut RandomStream) -> Result<Matrix> {
    if let Some(bad) = p.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid(format!("probability {bad} outside [0, 1]")));
    }
    let units = p.len();
    let mut out = Matrix::zeros(t, units);
    for step in 0..t {
        for (o, &prob) in out.row_mut(step).iter_mut().zip(p.data()) {
            *o = if stream.bernoulli(prob) { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}

/// Central differences `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every entry of `x`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Matrix, eps: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(invalid(format!("step size must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective is not finite around entry {i}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![-1.0, 1.0, 0.5]]).unwrap();
        let ab = a.matmul(&b);
        assert_eq!(ab.row(0), &[-1.0, 2.0, 3.0]);
        assert_eq!(a.transpose().t_matmul(&b), ab);
        assert_eq!(a.matmul_t(&b.transpose()), ab);
    }

    #[test]
    fn from_vec_rejects_nan_and_bad_length() {
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            Matrix::from_vec(2, 2, vec![1.0]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn pca_identical_rows_is_one() {
        let x = Matrix::from_rows(&vec![vec![0.1, 0.7, 0.3]; 6]).unwrap();
        assert_eq!(pca_component_count(&x, 0.99999).unwrap(), 1);
    }

    #[test]
    fn pca_rank_one() {
        let dir = [0.6, 0.8, 0.0];
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| dir.iter().map(|d| d * (i as f64).sin()).collect())
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        assert_eq!(pca_component_count(&x, 0.5).unwrap(), 1);
        assert_eq!(pca_component_count(&x, 1.0).unwrap(), 1);
    }

    #[test]
    fn pca_rejects_bad_inputs() {
        let x = Matrix::zeros(1, 3);
        assert!(pca_component_count(&x, 0.9).is_err());
        let x = Matrix::zeros(3, 3);
        assert!(pca_component_count(&x, 0.0).is_err());
        assert!(pca_component_count(&x, 1.5).is_err());
    }

    #[test]
    fn jacobi_diagonalizes_known_matrix() {
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let eig = symmetric_eigenvalues(&m).unwrap();
        assert!((eig[0] - 3.0).abs() < 1e-12);
        assert!((eig[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_degenerate_columns() {
        let mut s = RandomStream::new(3);
        let ones = bernoulli_matrix(&Matrix::row_vector(&[1.0]), 5, &mut s).unwrap();
        assert_eq!(ones.data(), &[1.0; 5]);
        let zeros = bernoulli_matrix(&Matrix::row_vector(&[0.0]), 5, &mut s).unwrap();
        assert_eq!(zeros.data(), &[0.0; 5]);
    }

    #[test]
    fn bernoulli_half_mean_in_binomial_interval() {
        let mut s = RandomStream::new(42);
        let m = bernoulli_matrix(&Matrix::row_vector(&[0.5]), 1000, &mut s).unwrap();
        let mean = m.data().iter().sum::<f64>() / 1000.0;
        assert!((0.45..=0.55).contains(&mean), "mean {mean}");
    }

    #[test]
    fn bernoulli_rejects_out_of_range() {
        let mut s = RandomStream::new(0);
        assert!(bernoulli_matrix(&Matrix::row_vector(&[1.2]), 3, &mut s).is_err());
    }

    #[test]
    fn finite_differences_of_simple_functions() {
        let x = Matrix::row_vector(&[1.0, 2.0]);
        let g = finite_difference_gradient(|m| Ok(m.data().iter().map(|v| v * v).sum()), &x, 1e-5)
            .unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);

        let x = Matrix::row_vector(&[3.0, 5.0]);
        let g = finite_difference_gradient(|m| Ok(m.data()[0] * m.data()[1]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 5.0).abs() < 1e-6);
        assert!((g.data()[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn finite_differences_propagate_non_finite() {
        let x = Matrix::row_vector(&[0.0]);
        let r = finite_difference_gradient(|m| Ok(1.0 / m.data()[0].abs().min(0.0)), &x, 1e-5);
        assert!(r.is_err());
    }

    #[test]
    fn streams_are_reproducible_and_derived_streams_differ() {
        let mut a = RandomStream::new(9);
        let mut b = RandomStream::new(9);
        let xa: Vec<f64> = (0..4).map(|_| a.uniform()).collect();
        let xb: Vec<f64> = (0..4).map(|_| b.uniform()).collect();
        assert_eq!(xa, xb);
        let mut c = a.derive(1);
        let mut d = a.derive(2);
        assert_ne!(c.uniform(), d.uniform());
        // derive ignores parent position
        let mut e = RandomStream::new(9).derive(1);
        assert_eq!(RandomStream::new(9).derive(1).uniform(), e.uniform());
    }
}
