//! Sum-rate objectives, their analytical gradients in the crate's Wirtinger
//! convention (`grad = 2 df/d(conj W)`), the closed-form MMSE beamformer used
//! as the distillation teacher, and gradient-ascent refinement.
//!
//! Per-user channels are "receive rows": `H_k` is `M x N` and the received
//! signal is `H_k W x + noise`, so the MISO (`M = 1`) row equals `h_k^H`.

pub mod unrolled;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{all_finite, CMat, CVec};

const LN2: f64 = std::f64::consts::LN_2;

/// Overall precoding matrix (N x KM, per-user blocks of M columns) plus its
/// power budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Beamformer {
    pub w: CMat,
    /// Total transmit power budget P; `||w||_F^2 <= P` holds for anything
    /// produced by a normalization layer or projection.
    pub power: f64,
}

impl Beamformer {
    pub fn new(w: CMat, power: f64) -> Result<Self> {
        if power <= 0.0 {
            return Err(Error::invalid("beamformer: power budget must be positive"));
        }
        if !all_finite(&w) {
            return Err(Error::numeric("beamformer: non-finite entries"));
        }
        Ok(Self { w, power })
    }

    /// Scales `raw` so that `||w||_F^2 == power` exactly.
    pub fn normalized(raw: &CMat, power: f64) -> Result<Self> {
        let norm = raw.norm();
        if norm < 1e-300 {
            return Err(Error::DegenerateOutput(
                "beamformer normalization: zero matrix".into(),
            ));
        }
        let scale = power.sqrt() / norm;
        Self::new(raw.map(|z| z * scale), power)
    }
}

/// Iterates of a gradient-ascent refinement run, `W_0 ..= W_Q`.
#[derive(Debug, Clone)]
pub struct RefinementTrace {
    pub iterates: Vec<CMat>,
    pub eta_ga: f64,
    pub projected: bool,
    pub power: f64,
}

impl RefinementTrace {
    pub fn steps(&self) -> usize {
        self.iterates.len() - 1
    }

    pub fn final_beamformer(&self) -> &CMat {
        self.iterates.last().expect("trace holds at least W_0")
    }
}

fn check_shapes(h: &[CMat], w: &CMat) -> Result<(usize, usize, usize)> {
    let k = h.len();
    if k == 0 {
        return Err(Error::invalid("rate: no users"));
    }
    let m = h[0].nrows();
    let n = h[0].ncols();
    if h.iter().any(|hk| hk.nrows() != m || hk.ncols() != n) {
        return Err(Error::invalid("rate: inconsistent per-user channel shapes"));
    }
    if w.nrows() != n || w.ncols() != k * m {
        return Err(Error::invalid(format!(
            "rate: beamformer is {}x{}, expected {}x{}",
            w.nrows(),
            w.ncols(),
            n,
            k * m
        )));
    }
    Ok((k, m, n))
}

/// MISO sum rate from per-user channel column vectors `h_k`:
/// `sum_k log2(1 + |h_k^H w_k|^2 / (1 + sum_{i != k} |h_k^H w_i|^2))`.
pub fn sum_rate_miso(h: &[CVec], w: &CMat) -> Result<f64> {
    let k = h.len();
    if k == 0 {
        return Err(Error::invalid("rate: no users"));
    }
    let n = h[0].len();
    if h.iter().any(|hk| hk.len() != n) || w.nrows() != n || w.ncols() != k {
        return Err(Error::invalid("sum_rate_miso: shape mismatch"));
    }
    let mut rate = 0.0;
    for (kk, hk) in h.iter().enumerate() {
        let mut signal = 0.0;
        let mut interference = 0.0;
        for i in 0..k {
            let c: Complex64 = hk.iter().zip(w.column(i).iter()).map(|(a, b)| a.conj() * b).sum();
            if i == kk {
                signal = c.norm_sqr();
            } else {
                interference += c.norm_sqr();
            }
        }
        rate += (1.0 + signal / (1.0 + interference)).log2();
    }
    if !rate.is_finite() {
        return Err(Error::numeric("sum_rate_miso: non-finite rate"));
    }
    Ok(rate)
}

/// General sum rate from per-user `M x N` channels:
/// `sum_k log2 det(I_M + Sigma_k^{-1} H_k W_k W_k^H H_k^H)` with
/// `Sigma_k = I_M + H_k (sum_{i != k} W_i W_i^H) H_k^H`.
pub fn sum_rate_mimo(h: &[CMat], w: &CMat) -> Result<f64> {
    let (k, m, _n) = check_shapes(h, w)?;
    let mut rate = 0.0;
    for (kk, hk) in h.iter().enumerate() {
        // D_i = H_k W_i (M x M); Sigma_k = I + sum_{i != k} D_i D_i^H.
        let mut sigma = CMat::identity(m, m);
        let mut d_own = CMat::zeros(m, m);
        for i in 0..k {
            let wi = w.columns(i * m, m);
            let d = hk * wi;
            if i == kk {
                d_own = d;
            } else {
                sigma += &d * d.adjoint();
            }
        }
        let sigma_inv = sigma
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::numeric("sum_rate_mimo: singular interference covariance"))?;
        let inner = CMat::identity(m, m) + sigma_inv * (&d_own * d_own.adjoint());
        let det = inner.determinant();
        rate += det.re.log2();
    }
    if !rate.is_finite() {
        return Err(Error::numeric("sum_rate_mimo: non-finite rate"));
    }
    Ok(rate)
}

/// Sum rate on receive-row channels, dispatching to the scalar MISO path for
/// `M = 1` and the log-det path otherwise.
pub fn sum_rate(h: &[CMat], w: &CMat) -> Result<f64> {
    let (_, m, _) = check_shapes(h, w)?;
    if m == 1 {
        let cols: Vec<CVec> = h.iter().map(row_to_column).collect();
        sum_rate_miso(&cols, w)
    } else {
        sum_rate_mimo(h, w)
    }
}

/// Conjugate-transposes a 1 x N receive row into the column vector `h_k`
/// satisfying `h_k^H w = row * w`.
pub fn row_to_column(row: &CMat) -> CVec {
    CVec::from_fn(row.ncols(), |i, _| row[(0, i)].conj())
}

/// Per-user cross gains `c[k][i] = h_k^H w_i` and the per-user totals used by
/// the MISO rate, gradient, and Hessian-vector formulas.
pub(crate) struct MisoTerms {
    pub c: Vec<Vec<Complex64>>,
    /// `T_k = 1 + sum_i |c[k][i]|^2`
    pub total: Vec<f64>,
    /// `I_k = T_k - |c[k][k]|^2`
    pub interf: Vec<f64>,
}

pub(crate) fn miso_terms(rows: &[CMat], w: &CMat) -> MisoTerms {
    let k = rows.len();
    let mut c = vec![vec![Complex64::ZERO; k]; k];
    let mut total = vec![1.0; k];
    let mut interf = vec![1.0; k];
    for (kk, row) in rows.iter().enumerate() {
        for i in 0..k {
            let cv: Complex64 = row
                .iter()
                .zip(w.column(i).iter())
                .map(|(a, b)| a * b)
                .sum();
            c[kk][i] = cv;
            total[kk] += cv.norm_sqr();
            if i != kk {
                interf[kk] += cv.norm_sqr();
            }
        }
    }
    MisoTerms { c, total, interf }
}

/// Analytical MISO sum-rate gradient (receive-row channels), shape of `w`.
pub fn grad_sum_rate_miso_rows(rows: &[CMat], w: &CMat) -> Result<CMat> {
    let (k, m, n) = check_shapes(rows, w)?;
    if m != 1 {
        return Err(Error::invalid("grad_sum_rate_miso_rows: M must be 1"));
    }
    let t = miso_terms(rows, w);
    let mut grad = CMat::zeros(n, k);
    for j in 0..k {
        for (kk, row) in rows.iter().enumerate() {
            let a = 1.0 / t.total[kk]
                - if kk == j { 0.0 } else { 1.0 / t.interf[kk] };
            if a == 0.0 {
                continue;
            }
            let coeff = t.c[kk][j] * (2.0 / LN2 * a);
            for q in 0..n {
                // h_k(q) = conj(row(q))
                grad[(q, j)] += row[(0, q)].conj() * coeff;
            }
        }
    }
    Ok(grad)
}

/// Analytical MISO sum-rate gradient from per-user channel columns `h_k`.
pub fn grad_sum_rate_miso(h: &[CVec], w: &CMat) -> Result<CMat> {
    let rows: Vec<CMat> = h.iter().map(|hk| CMat::from_fn(1, hk.len(), |_, i| hk[i].conj())).collect();
    grad_sum_rate_miso_rows(&rows, w)
}

/// Per-user inverse covariance pieces shared by the MIMO gradient and its
/// directional derivative.
pub(crate) struct MimoTerms {
    /// `T_k^{-1}` with `T_k = I + H_k S_tot H_k^H`, `S_tot = sum_i W_i W_i^H`.
    pub t_inv: Vec<CMat>,
    /// `Sigma_k^{-1}` with `Sigma_k = T_k - (H_k W_k)(H_k W_k)^H`.
    pub s_inv: Vec<CMat>,
}

pub(crate) fn mimo_terms(h: &[CMat], w: &CMat) -> Result<MimoTerms> {
    let (k, m, _n) = check_shapes(h, w)?;
    let mut t_inv = Vec::with_capacity(k);
    let mut s_inv = Vec::with_capacity(k);
    for (kk, hk) in h.iter().enumerate() {
        let mut t = CMat::identity(m, m);
        let mut d_own = CMat::zeros(m, m);
        for i in 0..k {
            let d = hk * w.columns(i * m, m);
            if i == kk {
                d_own = d.clone();
            }
            t += &d * d.adjoint();
        }
        let sigma = &t - &d_own * d_own.adjoint();
        t_inv.push(t.try_inverse().ok_or_else(|| Error::numeric("mimo: singular T_k"))?);
        s_inv.push(
            sigma
                .try_inverse()
                .ok_or_else(|| Error::numeric("mimo: singular Sigma_k"))?,
        );
    }
    Ok(MimoTerms { t_inv, s_inv })
}

/// Analytical MIMO sum-rate gradient:
/// `grad_j = (2/ln2) [(A - B + F_j)] W_j` with `A = sum_k H_k^H T_k^{-1} H_k`,
/// `B = sum_k H_k^H Sigma_k^{-1} H_k`, `F_j = H_j^H Sigma_j^{-1} H_j`.
pub fn grad_sum_rate_mimo(h: &[CMat], w: &CMat) -> Result<CMat> {
    let (k, m, n) = check_shapes(h, w)?;
    let terms = mimo_terms(h, w)?;
    let mut a = CMat::zeros(n, n);
    let mut b = CMat::zeros(n, n);
    let mut f = Vec::with_capacity(k);
    for (kk, hk) in h.iter().enumerate() {
        let hk_adj = hk.adjoint();
        a += &hk_adj * &terms.t_inv[kk] * hk;
        let fk = &hk_adj * &terms.s_inv[kk] * hk;
        b += &fk;
        f.push(fk);
    }
    let mut grad = CMat::zeros(n, k * m);
    for j in 0..k {
        let coef = (&a - &b + &f[j]) * w.columns(j * m, m);
        grad.columns_mut(j * m, m).copy_from(&(coef * Complex64::new(2.0 / LN2, 0.0)));
    }
    Ok(grad)
}

/// Sum-rate gradient on receive-row channels, M = 1 fast path included.
pub fn grad_sum_rate(h: &[CMat], w: &CMat) -> Result<CMat> {
    let (_, m, _) = check_shapes(h, w)?;
    if m == 1 {
        grad_sum_rate_miso_rows(h, w)
    } else {
        grad_sum_rate_mimo(h, w)
    }
}

/// Closed-form MMSE beamformer (the distillation teacher):
/// `M = (I_N + sum_i (P/K) H_i^H H_i)^{-1}`,
/// `W_k = sqrt(P/K) M H_k^H / ||M H_k^H||_F`. Total power is exactly P.
pub fn mmse_beamformer(h: &[CMat], p: f64) -> Result<Beamformer> {
    if p <= 0.0 {
        return Err(Error::invalid("mmse_beamformer: power must be positive"));
    }
    let k = h.len();
    if k == 0 {
        return Err(Error::invalid("mmse_beamformer: no users"));
    }
    let n = h[0].ncols();
    let m = h[0].nrows();
    let mut reg = CMat::identity(n, n);
    let rho = Complex64::new(p / k as f64, 0.0);
    for hk in h {
        reg += hk.adjoint() * hk.map(|z| z * rho);
    }
    let inv = reg
        .try_inverse()
        .ok_or_else(|| Error::numeric("mmse_beamformer: singular regularized Gram matrix"))?;
    let mut w = CMat::zeros(n, k * m);
    let block_power = (p / k as f64).sqrt();
    for (kk, hk) in h.iter().enumerate() {
        let raw = &inv * hk.adjoint();
        let norm = raw.norm();
        if norm < 1e-300 {
            return Err(Error::DegenerateChannel(format!(
                "mmse_beamformer: user {kk} has a zero channel"
            )));
        }
        let scale = Complex64::new(block_power / norm, 0.0);
        w.columns_mut(kk * m, m).copy_from(&raw.map(|z| z * scale));
    }
    Beamformer::new(w, p)
}

/// Runs `q` steps of gradient ascent `W <- W + eta * grad R_sum(h_used, W)`,
/// recording every iterate. With `project` on, iterates exceeding the power
/// budget are rescaled onto the ball after each step; the default leaves the
/// iteration exactly as stated (no projection), which is also what the
/// unrolled pullback differentiates.
pub fn refine(
    w0: &Beamformer,
    h_used: &[CMat],
    eta_ga: f64,
    q: usize,
    project: bool,
) -> Result<RefinementTrace> {
    if eta_ga < 0.0 {
        return Err(Error::invalid("refine: eta_ga must be >= 0"));
    }
    let mut iterates = Vec::with_capacity(q + 1);
    iterates.push(w0.w.clone());
    let mut w = w0.w.clone();
    for _ in 0..q {
        let g = grad_sum_rate(h_used, &w)?;
        w += g.map(|z| z * eta_ga);
        if project {
            let nsq = w.norm_squared();
            if nsq > w0.power {
                let s = (w0.power / nsq).sqrt();
                w.iter_mut().for_each(|z| *z *= s);
            }
        }
        if !all_finite(&w) {
            return Err(Error::numeric("refine: non-finite iterate"));
        }
        iterates.push(w.clone());
    }
    Ok(RefinementTrace { iterates, eta_ga, projected: project, power: w0.power })
}

/// Where a refinement ran and which channel estimate it ascended; reported in
/// experiment manifests alongside post-refinement norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefineChannel {
    TrueChannel,
    Estimated,
    Reconstructed,
}

/// Dense real matrix alias used by the test-only Jacobian path.
pub type RMatBlock = DMatrix<f64>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{
        crandn_matrix, rel_err, seeded_rng, wirtinger_fd_oracle, FD_STEP,
    };
    use approx::assert_relative_eq;

    fn random_rows(rng: &mut impl rand::Rng, k: usize, m: usize, n: usize) -> Vec<CMat> {
        (0..k).map(|_| crandn_matrix(rng, m, n, 1.0)).collect()
    }

    #[test]
    fn zero_beamformer_gives_zero_rate() {
        let mut rng = seeded_rng(0);
        let rows = random_rows(&mut rng, 3, 1, 4);
        let w = CMat::zeros(4, 3);
        assert_eq!(sum_rate(&rows, &w).unwrap(), 0.0);
        let rows2 = random_rows(&mut rng, 2, 2, 4);
        let w2 = CMat::zeros(4, 4);
        assert_eq!(sum_rate_mimo(&rows2, &w2).unwrap(), 0.0);
    }

    #[test]
    fn single_user_rate_is_log_snr() {
        let mut rng = seeded_rng(1);
        let h = crandn_matrix(&mut rng, 4, 1, 1.0);
        let hv = CVec::from_column_slice(h.as_slice());
        let w = crandn_matrix(&mut rng, 4, 1, 1.0);
        let r = sum_rate_miso(&[hv.clone()], &w).unwrap();
        let c: Complex64 = hv.iter().zip(w.iter()).map(|(a, b)| a.conj() * b).sum();
        assert_relative_eq!(r, (1.0 + c.norm_sqr()).log2(), epsilon = 1e-12);
    }

    #[test]
    fn orthogonal_users_have_no_cross_terms() {
        // h_1 = e_0, h_2 = e_1 scaled; w_k = c h_k.
        let n = 4;
        let mut h1 = CVec::zeros(n);
        h1[0] = Complex64::new(2.0, 0.0);
        let mut h2 = CVec::zeros(n);
        h2[1] = Complex64::new(3.0, 0.0);
        let c = 0.7;
        let mut w = CMat::zeros(n, 2);
        w[(0, 0)] = Complex64::new(2.0 * c, 0.0);
        w[(1, 1)] = Complex64::new(3.0 * c, 0.0);
        let r = sum_rate_miso(&[h1, h2], &w).unwrap();
        let expected = (1.0 + c * c * 16.0).log2() + (1.0 + c * c * 81.0).log2();
        assert_relative_eq!(r, expected, epsilon = 1e-12);
    }

    #[test]
    fn mimo_reduces_to_miso_for_single_antenna_users() {
        let mut rng = seeded_rng(2);
        for _ in 0..10 {
            let rows = random_rows(&mut rng, 3, 1, 5);
            let w = crandn_matrix(&mut rng, 5, 3, 1.0);
            let miso = sum_rate(&rows, &w).unwrap();
            let mimo = sum_rate_mimo(&rows, &w).unwrap();
            assert_relative_eq!(miso, mimo, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    /// Laplace-expansion determinant, independent of nalgebra's LU.
    fn det_laplace(m: &CMat) -> Complex64 {
        let n = m.nrows();
        if n == 1 {
            return m[(0, 0)];
        }
        let mut det = Complex64::ZERO;
        for c in 0..n {
            let minor = m.clone().remove_row(0).remove_column(c);
            let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
            det += m[(0, c)] * det_laplace(&minor) * Complex64::new(sign, 0.0);
        }
        det
    }

    #[test]
    fn mimo_rate_matches_independent_logdet_oracle() {
        let mut rng = seeded_rng(3);
        let (n, k, m) = (6, 2, 2);
        let rows = random_rows(&mut rng, k, m, n);
        let w = crandn_matrix(&mut rng, n, k * m, 0.5);
        let got = sum_rate_mimo(&rows, &w).unwrap();

        let mut expected = 0.0;
        for kk in 0..k {
            let hk = &rows[kk];
            let mut sigma = CMat::identity(m, m);
            for i in 0..k {
                if i == kk {
                    continue;
                }
                let d = hk * w.columns(i * m, m);
                sigma += &d * d.adjoint();
            }
            let d = hk * w.columns(kk * m, m);
            let num = &sigma + &d * d.adjoint();
            expected += (det_laplace(&num).re / det_laplace(&sigma).re).log2();
        }
        assert_relative_eq!(got, expected, max_relative = 1e-10);
    }

    #[test]
    fn rate_depends_on_w_only_through_channel_products() {
        // Right-rotating W by a unitary U while replacing H by H U^H... the
        // literal identity from the spec: rate(H U, W) == rate(H, U W) since
        // every term is H_k (U W_i).
        let mut rng = seeded_rng(4);
        let (n, k) = (4, 3);
        let rows = random_rows(&mut rng, k, 1, n);
        let w = crandn_matrix(&mut rng, n, k, 1.0);
        // Build a unitary from the QR of a random matrix.
        let q = crandn_matrix(&mut rng, n, n, 1.0).qr().q();
        let rows_rot: Vec<CMat> = rows.iter().map(|r| r * &q).collect();
        let w_rot = &q * &w;
        let a = sum_rate(&rows_rot, &w).unwrap();
        let b = sum_rate(&rows, &w_rot).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-10);
    }

    #[test]
    fn grad_zero_channel_is_zero() {
        let rows = vec![CMat::zeros(1, 4); 2];
        let w = crandn_matrix(&mut seeded_rng(5), 4, 2, 1.0);
        let g = grad_sum_rate(&rows, &w).unwrap();
        assert_eq!(g, CMat::zeros(4, 2));
    }

    #[test]
    fn single_user_grad_closed_form() {
        // grad = (2/ln2) h h^H w / (1 + |h^H w|^2)
        let mut rng = seeded_rng(6);
        let h = crandn_matrix(&mut rng, 1, 5, 1.0);
        let w = crandn_matrix(&mut rng, 5, 1, 1.0);
        let g = grad_sum_rate(&[h.clone()], &w).unwrap();
        let hv = row_to_column(&h);
        let c: Complex64 = hv.iter().zip(w.iter()).map(|(a, b)| a.conj() * b).sum();
        let scale = 2.0 / LN2 / (1.0 + c.norm_sqr());
        let expected = CMat::from_fn(5, 1, |i, _| hv[i] * c * scale);
        assert!(rel_err(&g, &expected) < 1e-12);
    }

    #[test]
    fn miso_grad_matches_fd_oracle() {
        let mut rng = seeded_rng(7);
        for trial in 0..20 {
            let k = 1 + trial % 3;
            let n = 4 + trial % 5;
            let rows = random_rows(&mut rng, k, 1, n);
            let w = crandn_matrix(&mut rng, n, k, 0.5);
            let g = grad_sum_rate(&rows, &w).unwrap();
            let fd = wirtinger_fd_oracle(|m| sum_rate(&rows, m).unwrap(), &w, FD_STEP).unwrap();
            assert!(rel_err(&g, &fd) < 1e-6, "trial {trial}: rel err {}", rel_err(&g, &fd));
        }
    }

    #[test]
    fn mimo_grad_matches_fd_oracle() {
        let mut rng = seeded_rng(8);
        for trial in 0..20 {
            let k = 1 + trial % 3;
            let m = 1 + trial % 2;
            let n = 4 + trial % 4;
            let rows = random_rows(&mut rng, k, m, n);
            let w = crandn_matrix(&mut rng, n, k * m, 0.5);
            let g = grad_sum_rate_mimo(&rows, &w).unwrap();
            let fd =
                wirtinger_fd_oracle(|mm| sum_rate_mimo(&rows, mm).unwrap(), &w, FD_STEP).unwrap();
            assert!(rel_err(&g, &fd) < 1e-6, "trial {trial}: rel err {}", rel_err(&g, &fd));
        }
    }

    #[test]
    fn miso_and_mimo_grads_agree_for_single_antenna() {
        let mut rng = seeded_rng(9);
        let rows = random_rows(&mut rng, 3, 1, 6);
        let w = crandn_matrix(&mut rng, 6, 3, 1.0);
        let a = grad_sum_rate_miso_rows(&rows, &w).unwrap();
        let b = grad_sum_rate_mimo(&rows, &w).unwrap();
        assert!(rel_err(&a, &b) < 1e-12);
    }

    #[test]
    fn mmse_single_user_is_matched_filter() {
        let mut rng = seeded_rng(10);
        let h = crandn_matrix(&mut rng, 1, 6, 1.0);
        let p = 2.0;
        let w = mmse_beamformer(&[h.clone()], p).unwrap();
        let hv = row_to_column(&h);
        let mrt = hv.map(|z| z * Complex64::new(p.sqrt() / hv.norm(), 0.0));
        // Collinear up to a unit-modulus constant; here M H^H is a positive
        // multiple of h so the match is exact.
        let got = CVec::from_column_slice(w.w.as_slice());
        assert!((got.clone() - mrt.clone()).norm() < 1e-12 * mrt.norm());
    }

    #[test]
    fn mmse_block_norms_are_exact() {
        let mut rng = seeded_rng(11);
        let k = 4;
        let rows = random_rows(&mut rng, k, 1, 8);
        let p = 1.0;
        let w = mmse_beamformer(&rows, p).unwrap();
        for j in 0..k {
            let b = w.w.column(j).norm();
            assert_relative_eq!(b, (p / k as f64).sqrt(), epsilon = 1e-12);
        }
        assert_relative_eq!(w.w.norm_squared(), p, epsilon = 1e-12);
    }

    #[test]
    fn mmse_orthogonal_channels_are_per_user_mrt() {
        let n = 6;
        let mut rows = Vec::new();
        for k in 0..2 {
            let mut r = CMat::zeros(1, n);
            r[(0, k)] = Complex64::new(1.5, 0.3);
            rows.push(r);
        }
        let w = mmse_beamformer(&rows, 1.0).unwrap();
        for k in 0..2 {
            let hv = row_to_column(&rows[k]);
            let wk = w.w.column(k);
            let cos = hv.dotc(&wk).norm() / (hv.norm() * wk.norm());
            assert!(cos >= 1.0 - 1e-10, "user {k} cosine {cos}");
        }
    }

    #[test]
    fn mmse_rejects_zero_channel() {
        let rows = vec![CMat::zeros(1, 4)];
        assert!(matches!(
            mmse_beamformer(&rows, 1.0),
            Err(Error::DegenerateChannel(_))
        ));
    }

    #[test]
    fn refine_edge_cases() {
        let mut rng = seeded_rng(12);
        let rows = random_rows(&mut rng, 2, 1, 4);
        let w0 = Beamformer::normalized(&crandn_matrix(&mut rng, 4, 2, 1.0), 1.0).unwrap();
        let t0 = refine(&w0, &rows, 1e-3, 0, false).unwrap();
        assert_eq!(t0.iterates.len(), 1);
        assert_eq!(t0.final_beamformer(), &w0.w);
        let t1 = refine(&w0, &rows, 0.0, 5, false).unwrap();
        assert!(t1.iterates.iter().all(|wq| wq == &w0.w));
    }

    #[test]
    fn refine_increases_rate_on_most_instances() {
        let mut rng = seeded_rng(13);
        let mut monotone = 0;
        let total = 100;
        for _ in 0..total {
            let rows = random_rows(&mut rng, 3, 1, 8);
            let w0 = Beamformer::normalized(&crandn_matrix(&mut rng, 8, 3, 1.0), 1.0).unwrap();
            let trace = refine(&w0, &rows, 1e-3, 10, false).unwrap();
            let rates: Vec<f64> = trace
                .iterates
                .iter()
                .map(|wq| sum_rate(&rows, wq).unwrap())
                .collect();
            if rates.windows(2).all(|p| p[1] >= p[0] - 1e-12) {
                monotone += 1;
            }
        }
        assert!(monotone >= 95, "monotone on {monotone}/{total}");
    }

    #[test]
    fn projection_keeps_power_feasible() {
        let mut rng = seeded_rng(14);
        let rows = random_rows(&mut rng, 2, 1, 4);
        let w0 = Beamformer::normalized(&crandn_matrix(&mut rng, 4, 2, 1.0), 1.0).unwrap();
        let trace = refine(&w0, &rows, 0.05, 8, true).unwrap();
        for it in &trace.iterates {
            assert!(it.norm_squared() <= 1.0 + 1e-9);
        }
    }
}
