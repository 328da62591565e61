//! Dense vector/matrix arithmetic, seeded randomness, l2 geometry, PCA and
//! a finite-difference gradient checker.
//!
//! Everything here is f64 and deterministic. All stochastic code in the
//! crate draws from [`RngState`], a seeded ChaCha8 stream that produces the
//! same values on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Name of the generator backing [`RngState`]; recorded in checkpoints.
pub const RNG_ALGORITHM: &str = "chacha8";

/// Seeded random stream. The underlying ChaCha8 bitstream and all uniform
/// draws are identical on every platform; [`RngState::normal`] goes through
/// libm (ln, cos), so its last bits follow the platform's math library.
/// Single-owner: clone it if two consumers need independent draws, never
/// share one state across threads.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Identifier of the generator algorithm; equal seeds and algorithm
    /// give identical streams on every platform.
    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    /// Uniform f64 in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform f64 in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal draw via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1], keeps ln finite
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform index in [0, n). Panics if n = 0.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Uniform integer in the inclusive range [lo, hi].
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.gen_range(lo..=hi)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            items.swap(i, j);
        }
    }
}

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: format!("{rows}x{cols} matrix needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    context: format!("ragged rows: expected {cols}, got {}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self * v` for a column vector `v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimMismatch { expected: self.cols, got: v.len() });
        }
        Ok((0..self.rows)
            .map(|r| dot(self.row(r), v))
            .collect())
    }

    /// `self^T * v` for a column vector `v`.
    pub fn transpose_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::DimMismatch { expected: self.rows, got: v.len() });
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let s = v[r];
            for (o, x) in out.iter_mut().zip(row) {
                *o += s * x;
            }
        }
        Ok(out)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn ensure_finite(v: &[f64], context: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteValue { context: context.to_string() });
    }
    Ok(())
}

/// Scale `v` to unit l2 norm.
///
/// Fails with `ZeroVector` when the norm is at or below `1e-15 * dim`,
/// the scale at which the direction is numerically meaningless.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    ensure_finite(v, "l2_normalize input")?;
    let n = norm(v);
    if n <= 1e-15 * v.len() as f64 {
        return Err(Error::ZeroVector { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Backward pass of [`l2_normalize`]: given the pre-normalization vector
/// `raw` and the gradient `upstream` w.r.t. the unit output, returns the
/// gradient w.r.t. `raw` via the Jacobian (I - u u^T) / ||raw||.
pub fn l2_normalize_backward(raw: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    if raw.len() != upstream.len() {
        return Err(Error::DimMismatch { expected: raw.len(), got: upstream.len() });
    }
    let n = norm(raw);
    if n <= 1e-15 * raw.len() as f64 {
        return Err(Error::ZeroVector { norm: n });
    }
    let unit: Vec<f64> = raw.iter().map(|x| x / n).collect();
    let along = dot(&unit, upstream);
    Ok(upstream
        .iter()
        .zip(&unit)
        .map(|(g, u)| (g - along * u) / n)
        .collect())
}

/// Euclidean distance between two equal-dimension vectors.
pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch { expected: a.len(), got: b.len() });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// An l2-normalized feature vector. Unit norm holds by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalize `raw` into an embedding.
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        Ok(Self(l2_normalize(raw)?))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn distance(&self, other: &Embedding) -> Result<f64> {
        euclidean_distance(&self.0, &other.0)
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }
}

/// Linear projection fitted by [`pca_fit`]: rows of `components` are the
/// top principal directions of the training covariance.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    pub components: Matrix,
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.components.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.components.rows()
    }
}

/// Fit PCA on `data` (rows are samples), keeping `out_dim` components.
///
/// Components are eigenvectors of the sample covariance, ordered by
/// decreasing eigenvalue, each with its largest-magnitude coordinate made
/// positive so the output is deterministic. Fails with `RankDeficient`
/// when fewer than `out_dim` eigenvalues are nonzero; use
/// [`pca_fit_allow_deficient`] to accept zero-variance padding instead.
pub fn pca_fit(data: &Matrix, out_dim: usize) -> Result<PcaModel> {
    let (model, rank) = pca_fit_impl(data, out_dim)?;
    if rank < out_dim {
        return Err(Error::RankDeficient { available: rank, requested: out_dim });
    }
    Ok(model)
}

/// Like [`pca_fit`] but pads with zero-variance directions (still
/// mutually orthonormal) when the covariance rank is below `out_dim`.
pub fn pca_fit_allow_deficient(data: &Matrix, out_dim: usize) -> Result<PcaModel> {
    Ok(pca_fit_impl(data, out_dim)?.0)
}

fn pca_fit_impl(data: &Matrix, out_dim: usize) -> Result<(PcaModel, usize)> {
    let n = data.rows();
    let d = data.cols();
    if n < 2 {
        return Err(Error::InsufficientSamples { got: n });
    }
    if out_dim == 0 || out_dim > d.min(n - 1) {
        return Err(Error::BadSpec {
            context: format!("out_dim {out_dim} not in 1..=min(samples-1={}, dim={d})", n - 1),
        });
    }
    ensure_finite(data.values(), "pca_fit input")?;

    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, x) in mean.iter_mut().zip(data.row(r)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    // Sample covariance of the centered data.
    let mut cov = Matrix::zeros(d, d);
    for r in 0..n {
        let row = data.row(r);
        for i in 0..d {
            let xi = row[i] - mean[i];
            for j in i..d {
                let xj = row[j] - mean[j];
                let v = cov.get(i, j) + xi * xj;
                cov.set(i, j, v);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) / (n - 1) as f64;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }

    let (mut eigvals, eigvecs) = jacobi_eigen_symmetric(&cov);

    // Sort descending; the eigenvector for index i is column i of eigvecs.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap_or(std::cmp::Ordering::Equal));
    for v in &mut eigvals {
        if *v < 0.0 {
            *v = 0.0; // numerical noise on a PSD matrix
        }
    }

    let max_eig = eigvals[order[0]];
    let tol = max_eig * 1e-12;
    let rank = order.iter().filter(|&&i| eigvals[i] > tol).count();

    let mut components = Matrix::zeros(out_dim, d);
    let mut explained = Vec::with_capacity(out_dim);
    for (k, &src) in order.iter().take(out_dim).enumerate() {
        let mut comp: Vec<f64> = (0..d).map(|r| eigvecs.get(r, src)).collect();
        // Deterministic sign: largest-magnitude coordinate positive.
        let pivot = comp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if comp[pivot] < 0.0 {
            for c in &mut comp {
                *c = -*c;
            }
        }
        components.row_mut(k).copy_from_slice(&comp);
        explained.push(eigvals[src]);
    }

    let model = PcaModel { mean, components, explained_variance: explained };
    Ok((model, rank))
}

/// Project `v` with a fitted model: `components * (v - mean)`.
pub fn pca_apply(model: &PcaModel, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != model.input_dim() {
        return Err(Error::DimMismatch { expected: model.input_dim(), got: v.len() });
    }
    let centered: Vec<f64> = v.iter().zip(&model.mean).map(|(x, m)| x - m).collect();
    model.components.matvec(&centered)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns (eigenvalues, eigenvectors-as-columns), unsorted.
fn jacobi_eigen_symmetric(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.rows();
    debug_assert_eq!(n, a.cols());
    let mut m = a.clone();
    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        v.set(i, i, 1.0);
    }

    let off = |m: &Matrix| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                s += m.get(p, q) * m.get(p, q);
            }
        }
        s
    };

    let scale: f64 = (0..n).map(|i| m.get(i, i).abs()).fold(1e-300, f64::max);
    let stop = (scale * 1e-15).powi(2) * (n * n) as f64;

    for _sweep in 0..100 {
        if off(&m) <= stop {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= scale * 1e-18 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let eig = (0..n).map(|i| m.get(i, i)).collect();
    (eig, v)
}

/// Central-difference gradient of a scalar function at `x`.
///
/// This is the independent oracle used by gradient tests throughout the
/// crate; it never calls any analytic backward code.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteValue { context: format!("finite_diff_grad probe at coordinate {i}") });
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn l2_normalize_pythagorean() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12);
        assert!((v[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_already_unit() {
        let v = l2_normalize(&[0.0, 1.0]).unwrap();
        assert_eq!(v, vec![0.0, 1.0]);
    }

    #[test]
    fn l2_normalize_zero_vector_rejected() {
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroVector { .. })));
    }

    #[test]
    fn distance_examples() {
        let a = [0.3, -1.2, 4.0];
        assert_eq!(euclidean_distance(&a, &a).unwrap(), 0.0);
        let d = euclidean_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((d - 2.0f64.sqrt()).abs() < 1e-12);
        let d = euclidean_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
        assert!(matches!(
            euclidean_distance(&[1.0], &[1.0, 2.0]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn distance_triangle_inequality_seeded() {
        let mut rng = RngState::new(7);
        for _ in 0..1000 {
            let a: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let c: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let ab = euclidean_distance(&a, &b).unwrap();
            let bc = euclidean_distance(&b, &c).unwrap();
            let ac = euclidean_distance(&a, &c).unwrap();
            assert!(ac <= ab + bc + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn l2_normalize_idempotent(v in proptest::collection::vec(-100.0f64..100.0, 1..16)) {
            if let Ok(once) = l2_normalize(&v) {
                let twice = l2_normalize(&once).unwrap();
                for (a, b) in once.iter().zip(&twice) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rng_equal_seeds_equal_streams() {
        let mut a = RngState::new(99);
        let mut b = RngState::new(99);
        for _ in 0..256 {
            assert_eq!(a.next_f64().to_bits(), b.next_f64().to_bits());
        }
    }

    #[test]
    fn pca_variance_on_one_axis() {
        let data = Matrix::from_rows(&[
            vec![-1.0, 0.0],
            vec![1.0, 0.0],
            vec![-2.0, 0.0],
            vec![2.0, 0.0],
        ])
        .unwrap();
        let m = pca_fit(&data, 1).unwrap();
        let c = m.components.row(0);
        assert!((c[0].abs() - 1.0).abs() < 1e-10);
        assert!(c[1].abs() < 1e-10);
        // sign convention: largest-magnitude coordinate positive
        assert!(c[0] > 0.0);
    }

    #[test]
    fn pca_isotropic_variances_close() {
        let mut rng = RngState::new(3);
        let rows: Vec<Vec<f64>> = (0..4000).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let data = Matrix::from_rows(&rows).unwrap();
        let m = pca_fit(&data, 2).unwrap();
        let ratio = m.explained_variance[0] / m.explained_variance[1];
        assert!(ratio < 1.2, "isotropic sample should have near-equal variances, ratio {ratio}");
    }

    #[test]
    fn pca_matches_covariance_eigensolve_oracle() {
        // Brute-force oracle: form the covariance explicitly and verify the
        // eigen-equation residual Cov*v = lambda*v for every component.
        let mut rng = RngState::new(11);
        let rows: Vec<Vec<f64>> = (0..10).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let data = Matrix::from_rows(&rows).unwrap();
        let m = pca_fit(&data, 4).unwrap();

        let n = data.rows();
        let d = data.cols();
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (mu, x) in mean.iter_mut().zip(data.row(r)) {
                *mu += x / n as f64;
            }
        }
        let mut cov = vec![vec![0.0; d]; d];
        for r in 0..n {
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] += (data.get(r, i) - mean[i]) * (data.get(r, j) - mean[j]) / (n - 1) as f64;
                }
            }
        }

        for k in 0..4 {
            let comp = m.components.row(k);
            let lambda = m.explained_variance[k];
            for i in 0..d {
                let cv: f64 = (0..d).map(|j| cov[i][j] * comp[j]).sum();
                assert!(
                    (cv - lambda * comp[i]).abs() < 1e-8,
                    "eigen-equation residual too large for component {k}"
                );
            }
            // orthonormality against every other component
            for k2 in 0..4 {
                let expect = if k == k2 { 1.0 } else { 0.0 };
                assert!((dot(comp, m.components.row(k2)) - expect).abs() < 1e-8);
            }
        }
        for k in 1..4 {
            assert!(m.explained_variance[k - 1] >= m.explained_variance[k] - 1e-12);
        }
    }

    #[test]
    fn pca_apply_centering_and_orthonormality() {
        let mut rng = RngState::new(21);
        let rows: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let data = Matrix::from_rows(&rows).unwrap();
        let m = pca_fit(&data, 3).unwrap();

        let at_mean = pca_apply(&m, &m.mean).unwrap();
        assert!(at_mean.iter().all(|x| x.abs() < 1e-12));

        let shifted: Vec<f64> = m.mean.iter().zip(m.components.row(0)).map(|(a, b)| a + b).collect();
        let out = pca_apply(&m, &shifted).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-10);
        assert!(out[1].abs() < 1e-10 && out[2].abs() < 1e-10);
    }

    #[test]
    fn pca_apply_matches_matvec_oracle() {
        let mut rng = RngState::new(22);
        let rows: Vec<Vec<f64>> = (0..9).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let data = Matrix::from_rows(&rows).unwrap();
        let m = pca_fit(&data, 2).unwrap();
        let v: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let got = pca_apply(&m, &v).unwrap();
        for k in 0..2 {
            let mut expect = 0.0;
            for j in 0..4 {
                expect += m.components.get(k, j) * (v[j] - m.mean[j]);
            }
            assert!((got[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn pca_full_rank_preserves_distances() {
        let mut rng = RngState::new(23);
        let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        let data = Matrix::from_rows(&rows).unwrap();
        let m = pca_fit(&data, 5).unwrap();
        for _ in 0..50 {
            let a: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let d0 = euclidean_distance(&a, &b).unwrap();
            let d1 = euclidean_distance(&pca_apply(&m, &a).unwrap(), &pca_apply(&m, &b).unwrap()).unwrap();
            assert!((d0 - d1).abs() < 1e-9);
        }
    }

    #[test]
    fn pca_rank_deficient_signalled_and_padded() {
        // Two distinct directions only; third component has zero variance.
        let data = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![2.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 2.0, 0.0],
        ])
        .unwrap();
        assert!(matches!(pca_fit(&data, 3), Err(Error::RankDeficient { available: 2, .. })));
        let padded = pca_fit_allow_deficient(&data, 3).unwrap();
        assert_eq!(padded.output_dim(), 3);
        assert!(padded.explained_variance[2].abs() < 1e-12);
        // padding stays orthonormal
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot(padded.components.row(i), padded.components.row(j)) - expect).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pca_insufficient_samples() {
        let data = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(pca_fit(&data, 1), Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn finite_diff_quadratic() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let g = finite_diff_grad(f, &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_constant_and_bilinear() {
        let g = finite_diff_grad(|_| 3.5, &[0.2, -0.4, 1.0], 1e-5).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-10));
        let g = finite_diff_grad(|x| x[0] * x[1], &[3.0, 5.0], 1e-5).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_nonfinite_probe() {
        // the x - h probe lands at -1e-5, where sqrt is NaN
        let f = |x: &[f64]| x[0].sqrt();
        assert!(matches!(
            finite_diff_grad(f, &[0.0], 1e-5),
            Err(Error::NonFiniteValue { .. })
        ));
    }

    #[test]
    fn embedding_unit_norm() {
        let e = Embedding::from_raw(&[3.0, 4.0]).unwrap();
        assert!((norm(e.values()) - 1.0).abs() < 1e-12);
    }
}
