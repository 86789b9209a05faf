//! Dense matrix helpers and the orthogonalization primitives.
//!
//! Matrices are plain `ndarray` arrays. A matrix is "semi-orthogonal" when
//! its Gram matrix on the smaller dimension is the identity: `W Wᵀ = I` for
//! wide matrices, `Wᵀ W = I` for tall ones.

use ndarray::{Array1, Array2, ArrayBase, Data, Dimension, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub type Matrix<T> = Array2<T>;

/// Default Björck step size.
pub const BJORCK_BETA: f64 = 0.5;

/// Iteration cap for [`orthogonal_init`].
const INIT_MAX_ITERS: usize = 1000;
const INIT_TOLERANCE: f64 = 1e-6;

const POWER_ITERS: usize = 50;
const POWER_SEED: u64 = 0x5eed_5eed;

pub fn matmul<T: Real, S1, S2>(a: &ArrayBase<S1, Ix2>, b: &ArrayBase<S2, Ix2>) -> Result<Matrix<T>>
where
    S1: Data<Elem = T>,
    S2: Data<Elem = T>,
{
    if a.ncols() != b.nrows() {
        return Err(Error::dimension("matmul", a.shape(), b.shape()));
    }
    Ok(a.dot(b))
}

pub fn frobenius_norm<T: Real, S: Data<Elem = T>, D: Dimension>(a: &ArrayBase<S, D>) -> T {
    a.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Gram matrix on the smaller dimension.
pub fn small_gram<T: Real, S: Data<Elem = T>>(w: &ArrayBase<S, Ix2>) -> Matrix<T> {
    if w.nrows() <= w.ncols() {
        w.dot(&w.t())
    } else {
        w.t().dot(w)
    }
}

fn identity_residual<T: Real>(gram: &Matrix<T>) -> T {
    let mut acc = T::zero();
    for ((i, j), &g) in gram.indexed_iter() {
        let d = if i == j { g - T::one() } else { g };
        acc += d * d;
    }
    acc.sqrt()
}

/// `‖G − I‖_F` with `G` the Gram matrix on the smaller dimension.
pub fn gram_residual<T: Real, S: Data<Elem = T>>(w: &ArrayBase<S, Ix2>) -> T {
    identity_residual(&small_gram(w))
}

/// Power-iteration estimate of the largest singular value.
pub fn spectral_norm_estimate<T: Real>(w: &Matrix<T>) -> T {
    let wide = w.nrows() < w.ncols();
    // Iterate on the smaller Gram: v lives in the smaller dimension.
    let n = if wide { w.nrows() } else { w.ncols() };
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v: Array1<T> = Array1::from_shape_fn(n, |_| T::sample_normal(&mut rng));
    let norm = frobenius_norm(&v);
    if norm == T::zero() {
        return T::zero();
    }
    v /= norm;
    let mut sigma = T::zero();
    for _ in 0..POWER_ITERS {
        let u = if wide { w.t().dot(&v) } else { w.dot(&v) };
        let next_sigma = frobenius_norm(&u);
        let mut next = if wide { w.dot(&u) } else { w.t().dot(&u) };
        let nn = frobenius_norm(&next);
        if nn == T::zero() {
            return next_sigma;
        }
        next /= nn;
        v = next;
        let converged = (next_sigma - sigma).abs() <= T::lit(1e-7) * next_sigma;
        sigma = next_sigma;
        if converged {
            break;
        }
    }
    let u = if wide { w.t().dot(&v) } else { w.dot(&v) };
    frobenius_norm(&u).max(sigma)
}

/// Divides `w` by `max(1, 1.01·σ̂)` so the largest singular value lands
/// inside Björck's convergence region.
pub fn spectral_rescale<T: Real>(w: &Matrix<T>) -> Result<Matrix<T>> {
    if w.is_empty() {
        return Err(Error::Degenerate("cannot rescale an empty matrix".into()));
    }
    if w.iter().all(|&x| x == T::zero()) {
        return Err(Error::Degenerate("cannot rescale an all-zero matrix".into()));
    }
    let s = (spectral_norm_estimate(w) * T::lit(1.01)).max(T::one());
    Ok(w.mapv(|x| x / s))
}

fn bjorck_core<T: Real>(
    w: &Matrix<T>,
    iters: usize,
    beta: T,
    measure_final: bool,
) -> Result<(Matrix<T>, Vec<f64>)> {
    let wide = w.nrows() <= w.ncols();
    let n = w.nrows().min(w.ncols());
    let floor = T::noise_floor(n).as_f64();
    let mut cur = w.clone();
    let mut residuals = Vec::with_capacity(iters + 1);
    let mut rising = 0usize;
    let one_plus = T::one() + beta;
    for _ in 0..iters {
        let gram = small_gram(&cur);
        let r = identity_residual(&gram).as_f64();
        if !r.is_finite() {
            residuals.push(r);
            return Err(Error::Convergence { residuals });
        }
        if let Some(&prev) = residuals.last() {
            if r > prev && r > floor {
                rising += 1;
                if rising >= 2 {
                    residuals.push(r);
                    return Err(Error::Convergence { residuals });
                }
            } else {
                rising = 0;
            }
        }
        residuals.push(r);
        // M = (1 + β) I − β G
        let mut m = gram.mapv(|g| -beta * g);
        for i in 0..n {
            m[[i, i]] += one_plus;
        }
        cur = if wide { m.dot(&cur) } else { cur.dot(&m) };
    }
    if measure_final {
        residuals.push(gram_residual(&cur).as_f64());
    }
    if cur.iter().any(|x| !x.is_finite()) {
        return Err(Error::Convergence { residuals });
    }
    Ok((cur, residuals))
}

/// Runs `iters` first-order Björck steps `W ← W (I + β (I − WᵀW))` on the
/// orientation whose Gram matrix is on the smaller dimension.
///
/// The input must already be spectrally rescaled. Two consecutive residual
/// increases above rounding noise are reported as divergence.
pub fn bjorck_orthogonalize<T: Real>(w: &Matrix<T>, iters: usize, beta: T) -> Result<Matrix<T>> {
    if iters == 0 {
        return Err(Error::Input("Björck needs at least one iteration".into()));
    }
    bjorck_core(w, iters, beta, false).map(|(m, _)| m)
}

/// Like [`bjorck_orthogonalize`] but also returns the residual of every
/// iterate, including the final one.
pub fn bjorck_trace<T: Real>(w: &Matrix<T>, iters: usize, beta: T) -> Result<(Matrix<T>, Vec<f64>)> {
    if iters == 0 {
        return Err(Error::Input("Björck needs at least one iteration".into()));
    }
    bjorck_core(w, iters, beta, true)
}

/// Rescale followed by Björck: the projection applied during training.
pub fn project_semi_orthogonal<T: Real>(w: &Matrix<T>, iters: usize) -> Result<Matrix<T>> {
    let scaled = spectral_rescale(w)?;
    bjorck_orthogonalize(&scaled, iters, T::lit(BJORCK_BETA))
}

/// Semi-orthogonal `rows × cols` matrix from a seeded Gaussian sample.
pub fn orthogonal_init<T: Real>(rows: usize, cols: usize, seed: u64) -> Matrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    orthogonal_init_with(rows, cols, &mut rng)
}

pub fn orthogonal_init_with<T: Real, R: rand::Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    assert!(rows >= 1 && cols >= 1, "orthogonal_init needs positive extents");
    // Always iterate in f64 so that the tolerance is reachable; cast at the end.
    let mut w: Matrix<f64> = Array2::from_shape_fn((rows, cols), |_| f64::sample_normal(rng));
    if rows == 1 || cols == 1 {
        let n = frobenius_norm(&w);
        return w.mapv(|x| T::lit(x / n));
    }
    w = spectral_rescale(&w).expect("Gaussian sample is nonzero");
    let wide = rows <= cols;
    let n = rows.min(cols);
    // Past the tolerance, a few extra steps polish to rounding level
    // (convergence is quadratic there).
    let mut polish = 3;
    for _ in 0..INIT_MAX_ITERS {
        let gram = small_gram(&w);
        if identity_residual(&gram) < INIT_TOLERANCE {
            if polish == 0 {
                break;
            }
            polish -= 1;
        }
        let mut m = gram.mapv(|g| -BJORCK_BETA * g);
        for i in 0..n {
            m[[i, i]] += 1.0 + BJORCK_BETA;
        }
        w = if wide { m.dot(&w) } else { w.dot(&m) };
    }
    w.mapv(T::lit)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Exactly one of the two inputs was zero; `value` is 0 by convention.
    pub degenerate: bool,
}

pub fn cosine_similarity<T, S1, S2, D>(u: &ArrayBase<S1, D>, v: &ArrayBase<S2, D>) -> Result<Cosine>
where
    T: Real,
    S1: Data<Elem = T>,
    S2: Data<Elem = T>,
    D: Dimension,
{
    if u.shape() != v.shape() {
        return Err(Error::dimension("cosine_similarity", u.shape(), v.shape()));
    }
    let (mut dot, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v.iter()) {
        let (a, b) = (a.as_f64(), b.as_f64());
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    match (uu == 0.0, vv == 0.0) {
        (true, true) => Err(Error::Degenerate("cosine similarity of two zero vectors".into())),
        (true, false) | (false, true) => Ok(Cosine {
            value: 0.0,
            degenerate: true,
        }),
        _ => Ok(Cosine {
            value: (dot / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0),
            degenerate: false,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn naive(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut c = Matrix::zeros((a.nrows(), b.ncols()));
        for i in 0..a.nrows() {
            for j in 0..b.ncols() {
                let mut s = 0.0;
                for k in 0..a.ncols() {
                    s += a[[i, k]] * b[[k, j]];
                }
                c[[i, j]] = s;
            }
        }
        c
    }

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| f64::sample_normal(&mut rng))
    }

    #[test]
    fn matmul_identity_and_annihilation() {
        let i2 = array![[1.0, 0.0], [0.0, 1.0]];
        let m = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(matmul(&i2, &m).unwrap(), m);
        let p = array![[1.0, 0.0], [0.0, 0.0]];
        let e = array![[0.0], [1.0]];
        assert_eq!(matmul(&p, &e).unwrap(), array![[0.0], [0.0]]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = gaussian(5, 7, 1);
        let b = gaussian(7, 3, 2);
        let diff = &matmul(&a, &b).unwrap() - &naive(&a, &b);
        assert!(diff.iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&gaussian(2, 3, 0), &gaussian(2, 3, 0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn rescale_keeps_contractive_matrix() {
        let w = array![[0.5, 0.0], [0.0, 0.5]];
        assert_eq!(spectral_rescale(&w).unwrap(), w);
    }

    #[test]
    fn rescale_divides_by_inflated_top_singular_value() {
        // Exact SVD of diag(3, 0): σ_max = 3, so s = 3.03.
        let w: Matrix<f64> = array![[3.0, 0.0], [0.0, 0.0]];
        let r = spectral_rescale(&w).unwrap();
        assert!((r[[0, 0]] - 3.0 / 3.03).abs() < 1e-9);
        assert_eq!(r[[1, 1]], 0.0);
    }

    #[test]
    fn rescale_rejects_zero_matrix() {
        assert!(matches!(
            spectral_rescale(&Matrix::<f64>::zeros((3, 2))),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn rescale_of_orthogonal_is_within_one_percent() {
        let q = orthogonal_init::<f64>(6, 6, 3);
        let r = spectral_rescale(&q).unwrap();
        let rel = frobenius_norm(&(&r - &q)) / frobenius_norm(&q);
        assert!(rel <= 0.0101, "{rel}");
    }

    #[test]
    fn bjorck_fixed_point() {
        let q = orthogonal_init::<f64>(5, 5, 9);
        for iters in [1, 3, 10] {
            let out = bjorck_orthogonalize(&q, iters, 0.5).unwrap();
            assert!((&out - &q).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn bjorck_half_identity_converges_to_identity() {
        // The polar factor of diag(0.5, 0.5) is I.
        let w = array![[0.5, 0.0], [0.0, 0.5]];
        let out = bjorck_orthogonalize(&w, 20, 0.5).unwrap();
        let eye = Matrix::<f64>::eye(2);
        assert!((&out - &eye).iter().all(|d| d.abs() < 1e-6));
    }

    #[test]
    fn bjorck_wide_near_orthogonal_five_iterations() {
        let q = orthogonal_init::<f64>(4, 8, 11);
        let w = &q + &(gaussian(4, 8, 12) * 0.1);
        let scaled = spectral_rescale(&w).unwrap();
        let out = bjorck_orthogonalize(&scaled, 5, 0.5).unwrap();
        let g = out.dot(&out.t());
        assert!(identity_residual(&g) < 1e-3);
    }

    #[test]
    fn bjorck_residual_decreases_monotonically() {
        let w = spectral_rescale(&gaussian(6, 16, 4)).unwrap();
        let (_, res) = bjorck_trace(&w, 12, 0.5).unwrap();
        for pair in res.windows(2) {
            assert!(pair[1] < pair[0] || pair[1] < 1e-12, "{res:?}");
        }
    }

    #[test]
    fn bjorck_reports_divergence() {
        // σ = 3 is outside the convergence region (σ_max < √3).
        let w = array![[3.0, 0.0], [0.0, 3.0]];
        match bjorck_orthogonalize(&w, 10, 0.5) {
            Err(Error::Convergence { residuals }) => assert!(residuals.len() >= 2),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn bjorck_is_idempotent() {
        let w = spectral_rescale(&gaussian(5, 12, 8)).unwrap();
        let once = bjorck_orthogonalize(&w, 30, 0.5).unwrap();
        let twice = bjorck_orthogonalize(&once, 30, 0.5).unwrap();
        assert!((&once - &twice).iter().all(|d| d.abs() < 1e-10));
    }

    #[test]
    fn orthogonal_init_square_and_rectangular() {
        let w = orthogonal_init::<f64>(3, 3, 0);
        assert!(identity_residual(&w.t().dot(&w)) < 1e-6);
        let w = orthogonal_init::<f64>(4, 8, 1);
        assert!(identity_residual(&w.dot(&w.t())) < 1e-6);
        let w = orthogonal_init::<f64>(9, 2, 5);
        assert!(identity_residual(&w.t().dot(&w)) < 1e-6);
    }

    #[test]
    fn orthogonal_init_is_deterministic() {
        let a = orthogonal_init::<f32>(7, 5, 42);
        let b = orthogonal_init::<f32>(7, 5, 42);
        assert_eq!(a, b);
        assert_ne!(a, orthogonal_init::<f32>(7, 5, 43));
    }

    #[test]
    fn cosine_examples() {
        let u = array![1.0, 2.0, 3.0];
        assert!((cosine_similarity(&u, &u).unwrap().value - 1.0).abs() < 1e-15);
        let c = cosine_similarity(&array![1.0, 0.0], &array![0.0, 1.0]).unwrap();
        assert_eq!(c.value, 0.0);
        let c = cosine_similarity(&array![1.0, 0.0], &array![1.0, 1.0]).unwrap();
        assert!((c.value - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_degenerate_cases() {
        let c = cosine_similarity(&array![0.0, 0.0], &array![1.0, 1.0]).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.value, 0.0);
        assert!(cosine_similarity(&array![0.0, 0.0], &array![0.0, 0.0]).is_err());
        assert!(cosine_similarity(&array![1.0], &array![1.0, 2.0]).is_err());
    }
}
