//! Linear measurement operators and the noisy measurement model `y = A x + n`.
//!
//! All three operator kinds are applied matrix-free. `dense_materialize` exists
//! for the oracle code paths, which need an explicit `A`.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numerics::{DenseMatrix, Rng, Signal};

/// Default cap on `in_dim * out_dim` for [`LinearOperator::dense_materialize`].
pub const DEFAULT_DENSE_LIMIT: usize = 4096 * 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Identity,
    Mask,
    UniformBlur,
}

/// Which pixels an inpainting mask removes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MaskSpec {
    /// Drop `round(missing_fraction * N)` pixels chosen uniformly at random.
    Random { missing_fraction: f64 },
    /// Drop a `height × width` rectangle whose top-left corner is `(top, left)`.
    Box {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
}

impl MaskSpec {
    /// A centred square box of side `side`.
    pub fn centered_box(image_height: usize, image_width: usize, side: usize) -> Self {
        MaskSpec::Box {
            top: image_height.saturating_sub(side) / 2,
            left: image_width.saturating_sub(side) / 2,
            height: side,
            width: side,
        }
    }

    /// Indices (row-major) of the pixels that are observed.
    pub fn kept_indices(&self, height: usize, width: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        let n = height * width;
        match *self {
            MaskSpec::Random { missing_fraction } => {
                if !(0.0..=1.0).contains(&missing_fraction) {
                    return Err(Error::Contract(format!(
                        "missing_fraction must lie in [0, 1], got {missing_fraction}"
                    )));
                }
                let missing = (missing_fraction * n as f64).round() as usize;
                let dropped = rng.distinct_indices(n, missing.min(n));
                let mut keep = vec![true; n];
                for i in dropped {
                    keep[i] = false;
                }
                Ok((0..n).filter(|&i| keep[i]).collect())
            }
            MaskSpec::Box {
                top,
                left,
                height: bh,
                width: bw,
            } => {
                if top + bh > height || left + bw > width {
                    return Err(Error::Contract(format!(
                        "box ({top}, {left}, {bh}, {bw}) exceeds {height}x{width} image"
                    )));
                }
                Ok((0..n)
                    .filter(|&i| {
                        let (r, c) = (i / width, i % width);
                        !(r >= top && r < top + bh && c >= left && c < left + bw)
                    })
                    .collect())
            }
        }
    }
}

/// A linear forward operator `A ∈ R^{M×N}` acting on row-major images.
#[derive(Debug, Clone)]
pub enum LinearOperator {
    Identity {
        height: usize,
        width: usize,
    },
    /// Keeps the listed pixel indices (ascending), drops the rest.
    Mask {
        height: usize,
        width: usize,
        kept: Arc<Vec<usize>>,
    },
    /// `k × k` box average with periodic boundary. `k` is odd.
    UniformBlur {
        height: usize,
        width: usize,
        kernel: usize,
    },
}

impl LinearOperator {
    pub fn identity(dim: usize) -> Self {
        LinearOperator::Identity {
            height: dim,
            width: 1,
        }
    }

    pub fn identity_image(height: usize, width: usize) -> Self {
        LinearOperator::Identity { height, width }
    }

    pub fn mask(height: usize, width: usize, kept: Vec<usize>) -> Result<Self> {
        let n = height * width;
        if kept.windows(2).any(|w| w[0] >= w[1]) || kept.last().is_some_and(|&k| k >= n) {
            return Err(Error::Contract(
                "mask indices must be strictly increasing and in range".into(),
            ));
        }
        Ok(LinearOperator::Mask {
            height,
            width,
            kept: Arc::new(kept),
        })
    }

    pub fn from_mask_spec(
        height: usize,
        width: usize,
        spec: &MaskSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::mask(height, width, spec.kept_indices(height, width, rng)?)
    }

    pub fn uniform_blur(height: usize, width: usize, kernel: usize) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::Contract(format!(
                "blur kernel size must be odd and positive, got {kernel}"
            )));
        }
        Ok(LinearOperator::UniformBlur {
            height,
            width,
            kernel,
        })
    }

    pub fn kind(&self) -> OperatorKind {
        match self {
            LinearOperator::Identity { .. } => OperatorKind::Identity,
            LinearOperator::Mask { .. } => OperatorKind::Mask,
            LinearOperator::UniformBlur { .. } => OperatorKind::UniformBlur,
        }
    }

    pub fn image_shape(&self) -> (usize, usize) {
        match *self {
            LinearOperator::Identity { height, width }
            | LinearOperator::Mask { height, width, .. }
            | LinearOperator::UniformBlur { height, width, .. } => (height, width),
        }
    }

    pub fn in_dim(&self) -> usize {
        let (h, w) = self.image_shape();
        h * w
    }

    pub fn out_dim(&self) -> usize {
        match self {
            LinearOperator::Mask { kept, .. } => kept.len(),
            _ => self.in_dim(),
        }
    }

    fn output_shape(&self) -> (usize, usize) {
        match self {
            LinearOperator::Mask { kept, .. } => (kept.len(), 1),
            _ => self.image_shape(),
        }
    }

    /// `A x`
    pub fn apply(&self, x: &Signal) -> Result<Signal> {
        check_len("LinearOperator::apply", self.in_dim(), x.len())?;
        let (oh, ow) = self.output_shape();
        let data = match self {
            LinearOperator::Identity { .. } => x.as_slice().to_vec(),
            LinearOperator::Mask { kept, .. } => kept.iter().map(|&i| x.as_slice()[i]).collect(),
            LinearOperator::UniformBlur {
                height,
                width,
                kernel,
            } => box_blur(x.as_slice(), *height, *width, *kernel),
        };
        Signal::new(data, oh, ow)
    }

    /// `Aᵀ u`
    pub fn adjoint(&self, u: &Signal) -> Result<Signal> {
        check_len("LinearOperator::adjoint", self.out_dim(), u.len())?;
        let (h, w) = self.image_shape();
        let data = match self {
            LinearOperator::Identity { .. } => u.as_slice().to_vec(),
            LinearOperator::Mask { kept, .. } => {
                let mut out = vec![0.0; h * w];
                for (&i, v) in kept.iter().zip(u.as_slice()) {
                    out[i] = *v;
                }
                out
            }
            // symmetric kernel under periodic boundary: A is symmetric
            LinearOperator::UniformBlur { kernel, .. } => box_blur(u.as_slice(), h, w, *kernel),
        };
        Signal::new(data, h, w)
    }

    pub fn dense_materialize(&self) -> Result<DenseMatrix> {
        self.dense_materialize_with_limit(DEFAULT_DENSE_LIMIT)
    }

    /// Explicit `M × N` matrix, built column by column from `apply`.
    pub fn dense_materialize_with_limit(&self, limit: usize) -> Result<DenseMatrix> {
        let (n, m) = (self.in_dim(), self.out_dim());
        let requested = n.saturating_mul(m);
        if requested > limit {
            return Err(Error::ResourceLimit {
                what: "dense operator",
                requested,
                limit,
            });
        }
        let (h, w) = self.image_shape();
        let mut dense = DenseMatrix::zeros(m, n);
        let mut e = Signal::zeros(h, w);
        for c in 0..n {
            e.as_mut_slice()[c] = 1.0;
            let col = self.apply(&e)?;
            for (r, v) in col.as_slice().iter().enumerate() {
                if *v != 0.0 {
                    dense.set(r, c, *v);
                }
            }
            e.as_mut_slice()[c] = 0.0;
        }
        Ok(dense)
    }

    /// `(r2 · A Aᵀ + sigma2 · I) u`, used to check [`Self::solve_gram`].
    pub fn apply_gram(&self, r2: f64, sigma2: f64, u: &Signal) -> Result<Signal> {
        let aat = self.apply(&self.adjoint(u)?)?;
        let mut out = u.scaled(sigma2);
        out.axpy(r2, &aat)?;
        Ok(out)
    }

    /// Solves `(r2 · A Aᵀ + sigma2 · I) z = u`.
    ///
    /// Identity and mask operators have `A Aᵀ = I`, so the system is diagonal.
    /// The blur's `A Aᵀ` is block-circulant and is diagonalised by the 2-D DFT.
    pub fn solve_gram(&self, r2: f64, sigma2: f64, u: &Signal) -> Result<Signal> {
        check_len("LinearOperator::solve_gram", self.out_dim(), u.len())?;
        if r2 < 0.0 || sigma2 < 0.0 {
            return Err(Error::Contract(format!(
                "gram solve needs r2, sigma2 >= 0, got {r2}, {sigma2}"
            )));
        }
        match self {
            LinearOperator::Identity { .. } | LinearOperator::Mask { .. } => {
                let d = r2 + sigma2;
                if d <= 0.0 {
                    return Err(Error::Degenerate("r2 + sigma2 == 0 in gram solve".into()));
                }
                Ok(u.scaled(1.0 / d))
            }
            LinearOperator::UniformBlur {
                height,
                width,
                kernel,
            } => {
                let (h, w, k) = (*height, *width, *kernel);
                let eig_r = box_eigenvalues(h, k);
                let eig_c = box_eigenvalues(w, k);
                let mut spec: Vec<Complex64> = u
                    .as_slice()
                    .iter()
                    .map(|&v| Complex64::new(v, 0.0))
                    .collect();
                fft2(&mut spec, h, w, false);
                for p in 0..h {
                    for q in 0..w {
                        let lam = eig_r[p] * eig_c[q];
                        let d = r2 * lam * lam + sigma2;
                        if d <= 0.0 {
                            return Err(Error::Degenerate(
                                "singular blur gram matrix (sigma = 0 and zero frequency response)"
                                    .into(),
                            ));
                        }
                        spec[p * w + q] /= d;
                    }
                }
                fft2(&mut spec, h, w, true);
                let scale = 1.0 / (h * w) as f64;
                u.with_data(spec.iter().map(|c| c.re * scale).collect())
            }
        }
    }
}

/// Eigenvalues of the 1-D circular box average of odd width `k` on `n` points.
fn box_eigenvalues(n: usize, k: usize) -> Vec<f64> {
    let half = (k / 2) as i64;
    (0..n)
        .map(|p| {
            (-half..=half)
                .map(|j| (2.0 * std::f64::consts::PI * p as f64 * j as f64 / n as f64).cos())
                .sum::<f64>()
                / k as f64
        })
        .collect()
}

fn fft2(data: &mut [Complex64], height: usize, width: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(width)
    } else {
        planner.plan_fft_forward(width)
    };
    for row in data.chunks_mut(width) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(height)
    } else {
        planner.plan_fft_forward(height)
    };
    let mut col = vec![Complex64::new(0.0, 0.0); height];
    for c in 0..width {
        for r in 0..height {
            col[r] = data[r * width + c];
        }
        col_fft.process(&mut col);
        for r in 0..height {
            data[r * width + c] = col[r];
        }
    }
}

fn box_blur(x: &[f64], height: usize, width: usize, kernel: usize) -> Vec<f64> {
    let half = (kernel / 2) as i64;
    let inv = 1.0 / kernel as f64;
    let mut horiz = vec![0.0; x.len()];
    for r in 0..height {
        let row = &x[r * width..(r + 1) * width];
        for c in 0..width {
            let mut acc = 0.0;
            for j in -half..=half {
                acc += row[(c as i64 + j).rem_euclid(width as i64) as usize];
            }
            horiz[r * width + c] = acc * inv;
        }
    }
    let mut out = vec![0.0; x.len()];
    for r in 0..height {
        for c in 0..width {
            let mut acc = 0.0;
            for j in -half..=half {
                let rr = (r as i64 + j).rem_euclid(height as i64) as usize;
                acc += horiz[rr * width + c];
            }
            out[r * width + c] = acc * inv;
        }
    }
    out
}

/// `y = A x + σ ε` with `ε ~ N(0, I)`.
#[derive(Debug, Clone)]
pub struct MeasurementModel {
    pub operator: LinearOperator,
    pub noise_std: f64,
}

impl MeasurementModel {
    pub fn new(operator: LinearOperator, noise_std: f64) -> Result<Self> {
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(Error::Contract(format!(
                "noise_std must be finite and >= 0, got {noise_std}"
            )));
        }
        Ok(Self {
            operator,
            noise_std,
        })
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_std * self.noise_std
    }

    pub fn in_dim(&self) -> usize {
        self.operator.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.operator.out_dim()
    }

    pub fn measure(&self, x: &Signal, rng: &mut Rng) -> Result<Signal> {
        let mut y = self.operator.apply(x)?;
        if self.noise_std > 0.0 {
            for v in y.as_mut_slice() {
                *v += self.noise_std * rng.normal();
            }
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;

    fn rand_signal(rng: &mut Rng, h: usize, w: usize) -> Signal {
        Signal::new(rng.normal_vec(h * w), h, w).unwrap()
    }

    fn all_kinds(rng: &mut Rng) -> Vec<LinearOperator> {
        vec![
            LinearOperator::identity_image(6, 5),
            LinearOperator::from_mask_spec(
                6,
                5,
                &MaskSpec::Random {
                    missing_fraction: 0.4,
                },
                rng,
            )
            .unwrap(),
            LinearOperator::from_mask_spec(6, 5, &MaskSpec::centered_box(6, 5, 3), rng).unwrap(),
            LinearOperator::uniform_blur(6, 5, 3).unwrap(),
            LinearOperator::uniform_blur(16, 16, 9).unwrap(),
        ]
    }

    #[test]
    fn identity_roundtrip() {
        let op = LinearOperator::identity(3);
        let x = Signal::vector(vec![1.0, -2.0, 3.0]);
        assert_eq!(op.apply(&x).unwrap(), x);
        assert_eq!(op.adjoint(&x).unwrap(), x);
    }

    #[test]
    fn mask_selects_and_scatters() {
        let op = LinearOperator::mask(3, 1, vec![0, 2]).unwrap();
        let y = op.apply(&Signal::vector(vec![5.0, 6.0, 7.0])).unwrap();
        assert_eq!(y.as_slice(), &[5.0, 7.0]);
        let back = op.adjoint(&Signal::vector(vec![5.0, 7.0])).unwrap();
        assert_eq!(back.as_slice(), &[5.0, 0.0, 7.0]);
        let dense = op.dense_materialize().unwrap();
        assert_eq!(
            dense,
            DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap()
        );
    }

    #[test]
    fn blur_preserves_constants() {
        let op = LinearOperator::uniform_blur(16, 16, 9).unwrap();
        let x = Signal::filled(16, 16, 0.37);
        let y = op.apply(&x).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn blur_rejects_even_kernel() {
        assert!(LinearOperator::uniform_blur(8, 8, 4).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let op = LinearOperator::uniform_blur(4, 4, 3).unwrap();
        assert!(op.apply(&Signal::vector(vec![0.0; 15])).is_err());
        assert!(op.adjoint(&Signal::vector(vec![0.0; 17])).is_err());
    }

    #[test]
    fn adjoint_consistency_all_kinds() {
        let mut rng = Rng::new(42);
        for op in all_kinds(&mut rng) {
            let (h, w) = op.image_shape();
            for _ in 0..100 {
                let x = rand_signal(&mut rng, h, w);
                let u = Signal::vector(rng.normal_vec(op.out_dim()));
                let lhs = dot(&op.apply(&x).unwrap(), &u).unwrap();
                let rhs = dot(&x, &op.adjoint(&u).unwrap()).unwrap();
                let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
                assert!(rel < 1e-10, "{:?}: {lhs} vs {rhs}", op.kind());
            }
        }
    }

    #[test]
    fn dense_agrees_with_matrix_free() {
        let mut rng = Rng::new(43);
        for op in all_kinds(&mut rng) {
            let dense = op.dense_materialize().unwrap();
            let (h, w) = op.image_shape();
            for _ in 0..20 {
                let x = rand_signal(&mut rng, h, w);
                let a = op.apply(&x).unwrap();
                let b = dense.matvec(x.as_slice()).unwrap();
                for (u, v) in a.as_slice().iter().zip(&b) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn blur_is_doubly_stochastic_and_symmetric() {
        for (h, w, k) in [(16, 16, 3), (16, 16, 9), (5, 7, 9)] {
            let op = LinearOperator::uniform_blur(h, w, k).unwrap();
            let dense = op.dense_materialize().unwrap();
            for i in 0..dense.rows() {
                let row_sum: f64 = dense.row(i).iter().sum();
                let col_sum: f64 = (0..dense.rows()).map(|r| dense.get(r, i)).sum();
                assert!((row_sum - 1.0).abs() < 1e-12);
                assert!((col_sum - 1.0).abs() < 1e-12);
            }
            assert!(dense.max_abs_diff(&dense.transpose()) < 1e-15);
        }
    }

    #[test]
    fn dense_limit_is_enforced() {
        let op = LinearOperator::identity(100);
        assert!(matches!(
            op.dense_materialize_with_limit(50),
            Err(Error::ResourceLimit { .. })
        ));
    }

    #[test]
    fn gram_solve_inverts_gram_apply() {
        let mut rng = Rng::new(44);
        for op in all_kinds(&mut rng) {
            for (r2, s2) in [(0.7, 0.05), (2.0, 1e-3), (0.0, 0.3)] {
                let u = Signal::vector(rng.normal_vec(op.out_dim()));
                let z = op.solve_gram(r2, s2, &u).unwrap();
                let back = op.apply_gram(r2, s2, &z).unwrap();
                assert!(back.max_abs_diff(&u).unwrap() < 1e-9, "{:?}", op.kind());
            }
        }
    }

    #[test]
    fn gram_solve_matches_dense_cholesky() {
        let op = LinearOperator::uniform_blur(8, 8, 3).unwrap();
        let a = op.dense_materialize().unwrap();
        let g = a
            .matmul(&a.transpose())
            .unwrap()
            .scaled(0.4)
            .add_diagonal(0.09);
        let mut rng = Rng::new(45);
        let u = rng.normal_vec(64);
        let expect = g.cholesky().unwrap().solve(&u).unwrap();
        let got = op.solve_gram(0.4, 0.09, &Signal::vector(u)).unwrap();
        for (e, v) in expect.iter().zip(got.as_slice()) {
            assert!((e - v).abs() < 1e-10);
        }
    }

    #[test]
    fn random_mask_fraction_and_determinism() {
        let spec = MaskSpec::Random {
            missing_fraction: 0.9,
        };
        let a = spec.kept_indices(16, 16, &mut Rng::new(3)).unwrap();
        let b = spec.kept_indices(16, 16, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 256 - 230);
    }

    #[test]
    fn box_mask_must_fit() {
        let spec = MaskSpec::Box {
            top: 10,
            left: 0,
            height: 8,
            width: 4,
        };
        assert!(spec.kept_indices(16, 16, &mut Rng::new(0)).is_err());
        let ok = MaskSpec::centered_box(16, 16, 8);
        assert_eq!(
            ok.kept_indices(16, 16, &mut Rng::new(0)).unwrap().len(),
            256 - 64
        );
    }

    #[test]
    fn noiseless_measurement_is_exact() {
        let model =
            MeasurementModel::new(LinearOperator::uniform_blur(8, 8, 3).unwrap(), 0.0).unwrap();
        let mut rng = Rng::new(1);
        let x = rand_signal(&mut rng, 8, 8);
        let y = model.measure(&x, &mut rng).unwrap();
        assert_eq!(y, model.operator.apply(&x).unwrap());
    }

    #[test]
    fn denoising_measurement_adds_scaled_noise() {
        let model = MeasurementModel::new(LinearOperator::identity_image(4, 4), 0.5).unwrap();
        let x = Signal::filled(4, 4, 0.2);
        let y = model.measure(&x, &mut Rng::new(8)).unwrap();
        let mut eps_rng = Rng::new(8);
        for (yv, xv) in y.as_slice().iter().zip(x.as_slice()) {
            let expect = xv + 0.5 * eps_rng.normal();
            assert_eq!(*yv, expect);
        }
    }

    #[test]
    fn measurement_noise_std_matches() {
        let model = MeasurementModel::new(LinearOperator::identity(100_000), 0.05).unwrap();
        let x = Signal::vector(vec![0.5; 100_000]);
        let y = model.measure(&x, &mut Rng::new(77)).unwrap();
        let r: Vec<f64> = y.as_slice().iter().map(|v| v - 0.5).collect();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r.len() - 1) as f64;
        assert!((var.sqrt() - 0.05).abs() < 0.002);
    }
}
