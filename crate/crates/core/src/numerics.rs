//! Dense vector/matrix arithmetic and the deterministic RNG shared by every
//! other module.
//!
//! Everything is `f64`. Matrices are dense and row-major; the problem sizes
//! this crate targets (mixtures in a handful of dimensions, images up to
//! 64×64 handled matrix-free) never need sparse storage.

use rand::seq::index;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};

/// A flat real vector with a 2-D shape. Pure vectors use `width == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    data: Vec<f64>,
    height: usize,
    width: usize,
}

impl Signal {
    pub fn new(data: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        check_len("Signal::new", height * width, data.len())?;
        Ok(Self {
            data,
            height,
            width,
        })
    }

    /// Column vector (`width == 1`).
    pub fn vector(data: Vec<f64>) -> Self {
        let height = data.len();
        Self {
            data,
            height,
            width: 1,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: vec![0.0; height * width],
            height,
            width,
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            data: vec![value; height * width],
            height,
            width,
        }
    }

    pub fn zeros_like(other: &Signal) -> Self {
        Self::zeros(other.height, other.width)
    }

    /// Reuses this signal's shape for new data of the same length.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(data, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Degenerate(format!("non-finite values in {context}")))
        }
    }

    pub fn dot(&self, other: &Signal) -> Result<f64> {
        dot(self, other)
    }

    pub fn norm_sq(&self) -> f64 {
        dot_slices(&self.data, &self.data)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Signal {
        Signal {
            data: self.data.iter().map(|v| v * factor).collect(),
            height: self.height,
            width: self.width,
        }
    }

    pub fn add(&self, other: &Signal) -> Result<Signal> {
        check_len("Signal::add", self.len(), other.len())?;
        Ok(Signal {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
            height: self.height,
            width: self.width,
        })
    }

    pub fn sub(&self, other: &Signal) -> Result<Signal> {
        check_len("Signal::sub", self.len(), other.len())?;
        Ok(Signal {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
            height: self.height,
            width: self.width,
        })
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Signal) -> Result<()> {
        check_len("Signal::axpy", self.len(), other.len())?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Signal) -> Result<f64> {
        check_len("Signal::max_abs_diff", self.len(), other.len())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Standard inner product `⟨a, b⟩`.
pub fn dot(a: &Signal, b: &Signal) -> Result<f64> {
    check_len("dot", a.len(), b.len())?;
    Ok(dot_slices(a.as_slice(), b.as_slice()))
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log(Σ exp(v_i))` without overflow. Returns `-inf` for an empty or
/// all-`-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, value: f64) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = value;
        }
        m
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("DenseMatrix::from_row_major", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for row in rows {
            check_len("DenseMatrix::from_rows", n_cols, row.len())?;
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: n_rows,
            cols: n_cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("DenseMatrix::matvec", self.cols, x.len())?;
        Ok((0..self.rows).map(|r| dot_slices(self.row(r), x)).collect())
    }

    /// `Mᵀ x`
    pub fn matvec_transpose(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("DenseMatrix::matvec_transpose", self.rows, x.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, xr) in x.iter().enumerate() {
            for (o, m) in out.iter_mut().zip(self.row(r)) {
                *o += m * xr;
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        check_len("DenseMatrix::matmul", self.cols, other.rows)?;
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    pub fn scaled(&self, factor: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        check_len("DenseMatrix::add", self.data.len(), other.data.len())?;
        check_len("DenseMatrix::add(rows)", self.rows, other.rows)?;
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn add_diagonal(&self, value: f64) -> DenseMatrix {
        let mut m = self.clone();
        for i in 0..self.rows.min(self.cols) {
            m.data[i * self.cols + i] += value;
        }
        m
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.data.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                if (self.get(r, c) - self.get(c, r)).abs() > tol * scale {
                    return false;
                }
            }
        }
        true
    }

    pub fn cholesky(&self) -> Result<CholeskyFactor> {
        CholeskyFactor::new(self)
    }
}

/// Lower-triangular `L` with `L Lᵀ = m`.
pub fn cholesky(m: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(CholeskyFactor::new(m)?.lower)
}

/// A Cholesky factorization kept around for repeated solves.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: DenseMatrix,
}

impl CholeskyFactor {
    pub fn new(m: &DenseMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Contract(format!(
                "cholesky needs a square matrix, got {}x{}",
                m.rows, m.cols
            )));
        }
        if !m.is_symmetric(1e-10) {
            return Err(Error::Contract("cholesky needs a symmetric matrix".into()));
        }
        let n = m.rows;
        let mut l = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let mut diag = m.get(j, j);
            for k in 0..j {
                diag -= l.get(j, k) * l.get(j, k);
            }
            if diag <= 0.0 || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: j,
                    value: diag,
                });
            }
            let d = diag.sqrt();
            l.set(j, j, d);
            for i in (j + 1)..n {
                let mut v = m.get(i, j);
                for k in 0..j {
                    v -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, v / d);
            }
        }
        Ok(Self { lower: l })
    }

    pub fn lower(&self) -> &DenseMatrix {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.rows
    }

    /// Solves `L z = b` (forward substitution).
    pub fn solve_lower(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len("CholeskyFactor::solve_lower", self.dim(), b.len())?;
        let n = self.dim();
        let mut z = b.to_vec();
        for i in 0..n {
            let row = self.lower.row(i);
            let s = dot_slices(&row[..i], &z[..i]);
            z[i] = (z[i] - s) / row[i];
        }
        Ok(z)
    }

    /// Solves `(L Lᵀ) x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        let mut x = self.solve_lower(b)?;
        for i in (0..n).rev() {
            let mut v = x[i];
            for k in (i + 1)..n {
                v -= self.lower.get(k, i) * x[k];
            }
            x[i] = v / self.lower.get(i, i);
        }
        Ok(x)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim())
            .map(|i| self.lower.get(i, i).ln())
            .sum::<f64>()
    }

    /// Inverse of the factored matrix, column by column.
    pub fn inverse(&self) -> Result<DenseMatrix> {
        let n = self.dim();
        let mut inv = DenseMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for c in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[c] = 1.0;
            let col = self.solve(&e)?;
            for (r, v) in col.into_iter().enumerate() {
                inv.set(r, c, v);
            }
        }
        Ok(inv)
    }
}

/// Eigendecomposition `M = Q diag(λ) Qᵀ` of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    /// Eigenvectors as columns.
    pub vectors: DenseMatrix,
}

impl SymmetricEigen {
    pub fn new(m: &DenseMatrix) -> Result<Self> {
        if !m.is_symmetric(1e-10) {
            return Err(Error::Contract(
                "eigendecomposition needs a symmetric matrix".into(),
            ));
        }
        let n = m.rows;
        let na = nalgebra::DMatrix::from_row_slice(n, n, &m.data);
        let eig = na.symmetric_eigen();
        let mut vectors = DenseMatrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                vectors.set(r, c, eig.eigenvectors[(r, c)]);
            }
        }
        Ok(Self {
            values: eig.eigenvalues.iter().copied().collect(),
            vectors,
        })
    }
}

/// Deterministic random source: ChaCha20 keyed by a 64-bit seed and a 64-bit
/// stream index. Gaussian draws use `rand_distr::StandardNormal`.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha20Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent stream for `(seed, stream)`; used to give every sampling
    /// chain its own sequence regardless of how many chains run.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// `count` distinct indices from `0..n`, sorted ascending.
    pub fn distinct_indices(&mut self, n: usize, count: usize) -> Vec<usize> {
        let mut idx = index::sample(&mut self.inner, n, count).into_vec();
        idx.sort_unstable();
        idx
    }

    /// Index drawn with probability proportional to `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}

/// `n` i.i.d. draws from `N(mean, std²)`. `std == 0` yields the constant
/// vector without consuming randomness.
pub fn gaussian_sample(rng: &mut Rng, n: usize, mean: f64, std: f64) -> Result<Signal> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::Contract(format!(
            "gaussian_sample needs std >= 0, got {std}"
        )));
    }
    if std == 0.0 {
        return Ok(Signal::vector(vec![mean; n]));
    }
    Ok(Signal::vector(
        (0..n).map(|_| mean + std * rng.normal()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(rng: &mut Rng, n: usize) -> DenseMatrix {
        let mut b = DenseMatrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                b.set(r, c, rng.normal());
            }
        }
        b.matmul(&b.transpose()).unwrap().add_diagonal(0.5)
    }

    #[test]
    fn dot_examples() {
        let e1 = Signal::vector(vec![1.0, 0.0]);
        let e2 = Signal::vector(vec![0.0, 1.0]);
        assert_eq!(dot(&e1, &e2).unwrap(), 0.0);

        let a = Signal::vector(vec![2.0, 0.0]);
        let b = Signal::vector(vec![2.5, 0.5]);
        let oracle: f64 = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .fold(0.0, |acc, (x, y)| acc + x * y);
        assert_eq!(oracle, 5.0);
        assert_eq!(dot(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn dot_rejects_mismatched_lengths() {
        let a = Signal::vector(vec![1.0, 2.0]);
        let b = Signal::vector(vec![1.0]);
        assert!(matches!(dot(&a, &b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn signal_shape_is_checked() {
        assert!(Signal::new(vec![0.0; 5], 2, 3).is_err());
        let s = Signal::new(vec![0.0; 6], 2, 3).unwrap();
        assert_eq!(s.shape(), (2, 3));
    }

    #[test]
    fn zero_std_sample_is_constant() {
        let mut rng = Rng::new(7);
        let s = gaussian_sample(&mut rng, 4, 0.0, 0.0).unwrap();
        assert_eq!(s.as_slice(), &[0.0; 4]);
        assert!(gaussian_sample(&mut rng, 4, 0.0, -1.0).is_err());
    }

    #[test]
    fn gaussian_sample_mean_converges() {
        let mut rng = Rng::new(2024);
        let s = gaussian_sample(&mut rng, 1_000_000, 0.0, 1.0).unwrap();
        let mean = s.as_slice().iter().sum::<f64>() / s.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn reseeding_reproduces_bitwise() {
        let a = gaussian_sample(&mut Rng::new(99), 64, 1.0, 2.0).unwrap();
        let b = gaussian_sample(&mut Rng::new(99), 64, 1.0, 2.0).unwrap();
        assert_eq!(a, b);
        let c = gaussian_sample(&mut Rng::with_stream(99, 1), 64, 1.0, 2.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cholesky_examples() {
        let id = DenseMatrix::identity(3);
        assert_eq!(cholesky(&id).unwrap(), id);

        let d = DenseMatrix::from_rows(&[vec![4.0, 0.0], vec![0.0, 9.0]]).unwrap();
        let l = cholesky(&d).unwrap();
        assert_eq!(
            l,
            DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap()
        );
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let mut rng = Rng::new(5);
        for n in [1, 2, 5, 12] {
            let m = random_spd(&mut rng, n);
            let l = cholesky(&m).unwrap();
            let rebuilt = l.matmul(&l.transpose()).unwrap();
            assert!(rebuilt.max_abs_diff(&m) < 1e-10);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            cholesky(&m),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn cholesky_solve_and_logdet() {
        let mut rng = Rng::new(11);
        let m = random_spd(&mut rng, 6);
        let f = m.cholesky().unwrap();
        let b = rng.normal_vec(6);
        let x = f.solve(&b).unwrap();
        let back = m.matvec(&x).unwrap();
        for (u, v) in back.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10);
        }
        let inv = f.inverse().unwrap();
        let prod = m.matmul(&inv).unwrap();
        assert!(prod.max_abs_diff(&DenseMatrix::identity(6)) < 1e-9);

        let d = DenseMatrix::diagonal(&[2.0, 3.0, 5.0]);
        let ld = d.cholesky().unwrap().log_det();
        assert!((ld - 30.0_f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn eigen_reconstructs() {
        let mut rng = Rng::new(3);
        let m = random_spd(&mut rng, 5);
        let eig = SymmetricEigen::new(&m).unwrap();
        let q = &eig.vectors;
        let rebuilt = q
            .matmul(&DenseMatrix::diagonal(&eig.values))
            .unwrap()
            .matmul(&q.transpose())
            .unwrap();
        assert!(rebuilt.max_abs_diff(&m) < 1e-10);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2.0_f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn categorical_respects_zero_weights() {
        let mut rng = Rng::new(1);
        for _ in 0..1000 {
            assert_ne!(rng.categorical(&[0.5, 0.0, 0.5]), 1);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn dot_is_symmetric(v in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..32)) {
                let a = Signal::vector(v.iter().map(|p| p.0).collect());
                let b = Signal::vector(v.iter().map(|p| p.1).collect());
                prop_assert_eq!(dot(&a, &b).unwrap(), dot(&b, &a).unwrap());
            }

            #[test]
            fn norm_sq_matches_self_dot(v in proptest::collection::vec(-1e3f64..1e3, 1..32)) {
                let a = Signal::vector(v);
                let n2 = a.norm_sq();
                let d = dot(&a, &a).unwrap();
                prop_assert!(n2 >= 0.0);
                prop_assert!((n2 - d).abs() <= 1e-14 * d.max(1e-300));
            }
        }
    }
}
