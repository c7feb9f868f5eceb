//! Complex linear algebra primitives shared by every other module.
//!
//! Conventions used throughout the crate:
//!
//! * Matrices are dense `f64`-precision complex matrices ([`CMat`]).
//! * The gradient of a real-valued objective `f` with respect to a complex
//!   matrix `W` is always reported as `grad = 2 * df/d(conj(W))`, so that a
//!   gradient-ascent step `W + eta * grad` moves along steepest ascent of `f`.
//!   Under this convention `grad ||W||^2 == 2 W`, which is pinned by a test.
//! * Complex Gaussian `CN(0, s2)` draws have independent real and imaginary
//!   parts, each `N(0, s2/2)`, so that `E|x|^2 == s2`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;
pub type RMat = DMatrix<f64>;
pub type RVec = DVector<f64>;

/// Deterministic random stream. Identical seeds yield bit-identical draws.
pub type RngStream = ChaCha8Rng;

/// Creates the root random stream for a seed.
pub fn seeded_rng(seed: u64) -> RngStream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a sub-task (one per sample, epoch, ...).
///
/// Parallel batch generation must use one derived stream per sample so that
/// results do not depend on scheduling order.
pub fn derived_rng(seed: u64, a: u64, b: u64) -> RngStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(mix64(a, b).into());
    rng
}

/// SplitMix64-style mixer used to combine stream coordinates.
pub fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(b)
        .wrapping_add(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One draw from the standard real normal `N(0, 1)`.
pub fn randn(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// One draw from the circularly-symmetric complex Gaussian `CN(0, sigma2)`.
pub fn crandn(rng: &mut impl Rng, sigma2: f64) -> C64 {
    let s = (sigma2 / 2.0).sqrt();
    C64::new(s * randn(rng), s * randn(rng))
}

/// Matrix with i.i.d. `CN(0, sigma2)` entries.
pub fn crandn_matrix(rng: &mut impl Rng, rows: usize, cols: usize, sigma2: f64) -> CMat {
    CMat::from_fn(rows, cols, |_, _| crandn(rng, sigma2))
}

/// Matrix with i.i.d. real `N(0, sigma2)` entries.
pub fn randn_matrix(rng: &mut impl Rng, rows: usize, cols: usize, sigma2: f64) -> RMat {
    let s = sigma2.sqrt();
    RMat::from_fn(rows, cols, |_, _| s * randn(rng))
}

/// ULA array response `a_n(theta, d/lambda)`, entry `q` (1-based) equal to
/// `(1/sqrt(n)) * exp(j 2 pi (d/lambda) (q-1) sin(theta))`. Unit Euclidean norm.
pub fn array_response(n: usize, theta: f64, d_over_lambda: f64) -> Result<CVec> {
    ula_response_from_sin(n, theta.sin(), d_over_lambda)
}

/// Array response parameterized directly by `sin(theta)`; used where the
/// geometry produces the sine rather than the angle.
pub fn ula_response_from_sin(n: usize, sin_theta: f64, d_over_lambda: f64) -> Result<CVec> {
    if n == 0 {
        return Err(Error::invalid("array_response: antenna count must be >= 1"));
    }
    if d_over_lambda <= 0.0 {
        return Err(Error::invalid("array_response: d/lambda must be positive"));
    }
    let scale = 1.0 / (n as f64).sqrt();
    let step = 2.0 * std::f64::consts::PI * d_over_lambda * sin_theta;
    Ok(CVec::from_fn(n, |q, _| {
        C64::from_polar(scale, step * q as f64)
    }))
}

/// Central-difference estimate of `2 * df/d(conj(W))` — the repo's gradient
/// convention — obtained from independent real and imaginary perturbations of
/// every entry. This is the reference every analytical gradient is checked
/// against; it never shares code with the analytical paths.
pub fn wirtinger_fd_oracle<F>(f: F, w: &CMat, h: f64) -> Result<CMat>
where
    F: Fn(&CMat) -> f64,
{
    if h <= 0.0 {
        return Err(Error::invalid("wirtinger_fd_oracle: step must be positive"));
    }
    let mut grad = CMat::zeros(w.nrows(), w.ncols());
    let mut probe = w.clone();
    for idx in 0..w.len() {
        let base = w[idx];

        probe[idx] = base + C64::new(h, 0.0);
        let f_rp = f(&probe);
        probe[idx] = base - C64::new(h, 0.0);
        let f_rm = f(&probe);
        probe[idx] = base + C64::new(0.0, h);
        let f_ip = f(&probe);
        probe[idx] = base - C64::new(0.0, h);
        let f_im = f(&probe);
        probe[idx] = base;

        if !(f_rp.is_finite() && f_rm.is_finite() && f_ip.is_finite() && f_im.is_finite()) {
            return Err(Error::numeric(format!(
                "wirtinger_fd_oracle: non-finite objective near entry {idx}"
            )));
        }
        grad[idx] = C64::new((f_rp - f_rm) / (2.0 * h), (f_ip - f_im) / (2.0 * h));
    }
    Ok(grad)
}

/// Default finite-difference step balancing truncation and rounding error.
pub const FD_STEP: f64 = 1e-5;

/// `||a - b||_F / max(||b||_F, floor)`.
pub fn rel_err(a: &CMat, b: &CMat) -> f64 {
    let denom = b.norm().max(1e-300);
    (a - b).norm() / denom
}

/// `||a - b|| / max(||b||, floor)` for real vectors.
pub fn rel_err_real(a: &RVec, b: &RVec) -> f64 {
    let denom = b.norm().max(1e-300);
    (a - b).norm() / denom
}

pub fn all_finite(m: &CMat) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

pub fn all_finite_real(m: &RMat) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Stacks `[vec(Re M); vec(Im M)]` (column-major vec) into a real vector of
/// length `2 * rows * cols`. This is the realification every network input
/// and output uses.
pub fn realify(m: &CMat) -> RVec {
    let n = m.len();
    let mut out = RVec::zeros(2 * n);
    for (i, z) in m.iter().enumerate() {
        out[i] = z.re;
        out[n + i] = z.im;
    }
    out
}

/// Inverse of [`realify`]: first half becomes the real part, second half the
/// imaginary part, reshaped column-major into `rows x cols`.
pub fn complexify(v: &RVec, rows: usize, cols: usize) -> Result<CMat> {
    let n = rows * cols;
    if v.len() != 2 * n {
        return Err(Error::invalid(format!(
            "complexify: expected length {}, got {}",
            2 * n,
            v.len()
        )));
    }
    Ok(CMat::from_fn(rows, cols, |r, c| {
        let i = c * rows + r;
        C64::new(v[i], v[n + i])
    }))
}
