//! Differentiation through the gradient-ascent refinement.
//!
//! One ascent step is `F(w) = w + eta * grad R(w)` with
//! `grad R = 2 dR/d(conj w)`. For a real loss evaluated at the final iterate,
//! the adjoint in the crate's convention, `g_q = 2 dL/d(conj w_q)`, pulls back
//! through one step as
//!
//! ```text
//! g_{q-1} = g_q + eta * d/dt[ grad R(w_{q-1} + t g_q) ] at t = 0
//! ```
//!
//! i.e. one Hessian-vector product of the sum rate per step, evaluated along
//! the real direction `g_q`. The conjugate-pair structure of the complex
//! chain rule (the two off-diagonal Jacobian blocks) is exactly what folds the
//! two second-derivative blocks into this single directional derivative; the
//! dense block path below keeps them separate and is used to cross-check.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numerics::{CMat, C64};
use crate::rate::{mimo_terms, miso_terms, RefinementTrace};

const LN2: f64 = std::f64::consts::LN_2;

/// Directional derivative of the sum-rate gradient along the real direction
/// `u`: `d/dt grad R(w + t u)` at `t = 0`. Dispatches on the user antenna
/// count like [`grad_sum_rate`].
pub fn grad_directional_derivative(h: &[CMat], w: &CMat, u: &CMat) -> Result<CMat> {
    if h[0].nrows() == 1 {
        hvp_miso(h, w, u)
    } else {
        hvp_mimo(h, w, u)
    }
}

fn hvp_miso(rows: &[CMat], w: &CMat, u: &CMat) -> Result<CMat> {
    let k = rows.len();
    let n = w.nrows();
    if u.nrows() != n || u.ncols() != w.ncols() {
        return Err(Error::invalid("hvp: direction shape mismatch"));
    }
    let t = miso_terms(rows, w);
    // d[k][i] = h_k^H u_i = row_k * u_i
    let mut d = vec![vec![Complex64::ZERO; k]; k];
    let mut dt = vec![0.0; k];
    let mut di = vec![0.0; k];
    for (kk, row) in rows.iter().enumerate() {
        for i in 0..k {
            let dv: Complex64 = row.iter().zip(u.column(i).iter()).map(|(a, b)| a * b).sum();
            d[kk][i] = dv;
            let inc = 2.0 * (t.c[kk][i].conj() * dv).re;
            dt[kk] += inc;
            if i != kk {
                di[kk] += inc;
            }
        }
    }
    let mut out = CMat::zeros(n, k);
    for j in 0..k {
        for (kk, row) in rows.iter().enumerate() {
            let not_own = if kk == j { 0.0 } else { 1.0 };
            let a = 1.0 / t.total[kk] - not_own / t.interf[kk];
            let da = -dt[kk] / (t.total[kk] * t.total[kk])
                + not_own * di[kk] / (t.interf[kk] * t.interf[kk]);
            let coeff = (t.c[kk][j] * da + d[kk][j] * a) * (2.0 / LN2);
            if coeff == Complex64::ZERO {
                continue;
            }
            for q in 0..n {
                out[(q, j)] += row[(0, q)].conj() * coeff;
            }
        }
    }
    Ok(out)
}

fn hvp_mimo(h: &[CMat], w: &CMat, u: &CMat) -> Result<CMat> {
    let k = h.len();
    let m = h[0].nrows();
    let n = h[0].ncols();
    if u.nrows() != w.nrows() || u.ncols() != w.ncols() {
        return Err(Error::invalid("hvp: direction shape mismatch"));
    }
    let terms = mimo_terms(h, w)?;
    // dS = sum_i (u_i W_i^H + W_i u_i^H)
    let mut ds = CMat::zeros(n, n);
    for i in 0..k {
        let wi = w.columns(i * m, m);
        let ui = u.columns(i * m, m);
        ds += &ui * wi.adjoint();
        ds += wi * ui.adjoint();
    }

    let mut a_sum = CMat::zeros(n, n);
    let mut b_sum = CMat::zeros(n, n);
    let mut a1_sum = CMat::zeros(n, n);
    let mut a2_sum = CMat::zeros(n, n);
    let mut f = Vec::with_capacity(k);
    let mut fg = Vec::with_capacity(k);
    for (kk, hk) in h.iter().enumerate() {
        let hk_adj = hk.adjoint();
        let t_inv = &terms.t_inv[kk];
        let s_inv = &terms.s_inv[kk];
        let dt = hk * &ds * &hk_adj;
        let dk = hk * w.columns(kk * m, m);
        let duk = hk * u.columns(kk * m, m);
        let dsig = &dt - &duk * dk.adjoint() - &dk * duk.adjoint();
        let g1 = -(t_inv * &dt * t_inv);
        let g2 = -(s_inv * &dsig * s_inv);
        a_sum += &hk_adj * t_inv * hk;
        let fk = &hk_adj * s_inv * hk;
        b_sum += &fk;
        a1_sum += &hk_adj * &g1 * hk;
        let fgk = &hk_adj * &g2 * hk;
        a2_sum += &fgk;
        f.push(fk);
        fg.push(fgk);
    }

    let mut out = CMat::zeros(n, k * m);
    let scale = Complex64::new(2.0 / LN2, 0.0);
    for j in 0..k {
        let wj = w.columns(j * m, m);
        let uj = u.columns(j * m, m);
        let block = (&a1_sum - &a2_sum + &fg[j]) * wj + (&a_sum - &b_sum + &f[j]) * uj;
        out.columns_mut(j * m, m).copy_from(&(block * scale));
    }
    Ok(out)
}

/// Pulls an endpoint adjoint `grad_at_wq = 2 dL/d(conj W_Q)` back through the
/// recorded refinement to `2 dL/d(conj W_0)` by reverse accumulation, one
/// Hessian-vector product per step. Rejects projected traces: the projection
/// step is not part of the differentiated map.
pub fn unrolled_pullback(
    h: &[CMat],
    trace: &RefinementTrace,
    grad_at_wq: &CMat,
) -> Result<CMat> {
    if trace.projected {
        return Err(Error::UnsupportedConfiguration(
            "unrolled_pullback: projected traces are not differentiable here".into(),
        ));
    }
    let q = trace.steps();
    let mut g = grad_at_wq.clone();
    for step in (0..q).rev() {
        let w_prev = &trace.iterates[step];
        let hvp = grad_directional_derivative(h, w_prev, &g)?;
        g += hvp.map(|z| z * trace.eta_ga);
    }
    Ok(g)
}

// --- dense block path (small MISO instances only) ---------------------------

/// Second-derivative blocks of the MISO sum rate at `w`, with `w` flattened
/// column-major (`vec(W)`, length K*N):
/// `P(a, b) = d^2 R / (dw(b) d conj(w)(a))` (Hermitian) and
/// `C(a, b) = d^2 R / (d conj(w)(b) d conj(w)(a))` (symmetric).
pub fn miso_hessian_blocks(rows: &[CMat], w: &CMat) -> Result<(CMat, CMat)> {
    let k = rows.len();
    let n = w.nrows();
    if rows.iter().any(|r| r.nrows() != 1) {
        return Err(Error::invalid("miso_hessian_blocks: M must be 1"));
    }
    let t = miso_terms(rows, w);
    let dim = k * n;
    let mut p = CMat::zeros(dim, dim);
    let mut c = CMat::zeros(dim, dim);
    for kk in 0..k {
        let row = &rows[kk];
        let tk = t.total[kk];
        let ik = t.interf[kk];
        for j in 0..k {
            let not_j = if kk == j { 0.0 } else { 1.0 };
            let a_kj = 1.0 / tk - not_j / ik;
            for i in 0..k {
                let not_i = if kk == i { 0.0 } else { 1.0 };
                let m_kji = -1.0 / (tk * tk) + not_j * not_i / (ik * ik);
                let pc = if i == j { C64::new(a_kj, 0.0) } else { C64::ZERO }
                    + t.c[kk][j] * t.c[kk][i].conj() * m_kji;
                let cc = t.c[kk][j] * t.c[kk][i] * m_kji;
                for a in 0..n {
                    let ha = row[(0, a)].conj();
                    for b in 0..n {
                        let hb = row[(0, b)];
                        // h_k(a) conj(h_k(b)) = conj(row(a)) row(b)
                        p[(j * n + a, i * n + b)] += pc * ha * hb * (1.0 / LN2);
                        c[(j * n + a, i * n + b)] += cc * ha * hb.conj() * (1.0 / LN2);
                    }
                }
            }
        }
    }
    Ok((p, c))
}

/// Dense Jacobian of one ascent step `w -> w + eta grad R(w)` in stacked
/// `(dw, d conj w)` coordinates: `[[I + 2 eta P, 2 eta C], [conj(2 eta C),
/// I + 2 eta conj(P)]]`, size `2KN x 2KN`.
pub fn step_jacobian(rows: &[CMat], w: &CMat, eta: f64) -> Result<CMat> {
    let (p, c) = miso_hessian_blocks(rows, w)?;
    let dim = p.nrows();
    let mut s = CMat::zeros(2 * dim, 2 * dim);
    let two_eta = 2.0 * eta;
    for a in 0..dim {
        for b in 0..dim {
            let top_left =
                if a == b { C64::ONE } else { C64::ZERO } + p[(a, b)] * two_eta;
            let top_right = c[(a, b)] * two_eta;
            s[(a, b)] = top_left;
            s[(a, dim + b)] = top_right;
            s[(dim + a, b)] = top_right.conj();
            s[(dim + a, dim + b)] = top_left.conj();
        }
    }
    Ok(s)
}

/// Same pullback as [`unrolled_pullback`] but computed by building every
/// step's dense Jacobian and multiplying the blocks out; an independent code
/// path used to validate the Hessian-vector route on small instances.
pub fn unrolled_pullback_dense(
    rows: &[CMat],
    trace: &RefinementTrace,
    grad_at_wq: &CMat,
) -> Result<CMat> {
    if trace.projected {
        return Err(Error::UnsupportedConfiguration(
            "unrolled_pullback_dense: projected traces are not differentiable here".into(),
        ));
    }
    let n = grad_at_wq.nrows();
    let k = grad_at_wq.ncols();
    let dim = n * k;
    // Accumulated Jacobian from W_0 to the current iterate.
    let mut jac = CMat::identity(2 * dim, 2 * dim);
    for step in 0..trace.steps() {
        let s = step_jacobian(rows, &trace.iterates[step], trace.eta_ga)?;
        jac = s * jac;
    }
    // Row vector [dL/dw_Q, dL/d conj(w_Q)] = [conj(g)^T, g^T] / 2.
    let mut row = CMat::zeros(1, 2 * dim);
    for (i, z) in grad_at_wq.iter().enumerate() {
        row[(0, i)] = z.conj() * 0.5;
        row[(0, dim + i)] = *z * 0.5;
    }
    let pulled = row * jac;
    // g_0 = 2 * (dL/d conj(w_0))^T, read off the second block.
    let mut out = CMat::zeros(n, k);
    for i in 0..dim {
        out[i] = pulled[(0, dim + i)] * 2.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{crandn_matrix, rel_err, seeded_rng, wirtinger_fd_oracle};
    use crate::rate::{grad_sum_rate, refine, sum_rate, Beamformer};

    fn random_rows(rng: &mut impl rand::Rng, k: usize, m: usize, n: usize) -> Vec<CMat> {
        (0..k).map(|_| crandn_matrix(rng, m, n, 1.0)).collect()
    }

    fn fd_hvp(h: &[CMat], w: &CMat, u: &CMat, step: f64) -> CMat {
        let wp = w + u.map(|z| z * step);
        let wm = w - u.map(|z| z * step);
        let gp = grad_sum_rate(h, &wp).unwrap();
        let gm = grad_sum_rate(h, &wm).unwrap();
        (gp - gm).map(|z| z / (2.0 * step))
    }

    #[test]
    fn miso_hvp_matches_fd_of_gradient() {
        let mut rng = seeded_rng(0);
        for _ in 0..10 {
            let rows = random_rows(&mut rng, 3, 1, 6);
            let w = crandn_matrix(&mut rng, 6, 3, 0.5);
            let u = crandn_matrix(&mut rng, 6, 3, 1.0);
            let got = grad_directional_derivative(&rows, &w, &u).unwrap();
            let fd = fd_hvp(&rows, &w, &u, 1e-6);
            assert!(rel_err(&got, &fd) < 1e-6, "rel err {}", rel_err(&got, &fd));
        }
    }

    #[test]
    fn mimo_hvp_matches_fd_of_gradient() {
        let mut rng = seeded_rng(1);
        for _ in 0..10 {
            let rows = random_rows(&mut rng, 2, 2, 5);
            let w = crandn_matrix(&mut rng, 5, 4, 0.5);
            let u = crandn_matrix(&mut rng, 5, 4, 1.0);
            let got = grad_directional_derivative(&rows, &w, &u).unwrap();
            let fd = fd_hvp(&rows, &w, &u, 1e-6);
            assert!(rel_err(&got, &fd) < 1e-6, "rel err {}", rel_err(&got, &fd));
        }
    }

    #[test]
    fn zero_step_pullback_is_identity() {
        let mut rng = seeded_rng(2);
        let rows = random_rows(&mut rng, 2, 1, 4);
        let w0 = Beamformer::normalized(&crandn_matrix(&mut rng, 4, 2, 1.0), 1.0).unwrap();
        let trace = refine(&w0, &rows, 0.0, 3, false).unwrap();
        let g = crandn_matrix(&mut rng, 4, 2, 1.0);
        let pulled = unrolled_pullback(&rows, &trace, &g).unwrap();
        assert_eq!(pulled, g);
    }

    #[test]
    fn pullback_rejects_projected_traces() {
        let mut rng = seeded_rng(3);
        let rows = random_rows(&mut rng, 2, 1, 4);
        let w0 = Beamformer::normalized(&crandn_matrix(&mut rng, 4, 2, 1.0), 1.0).unwrap();
        let trace = refine(&w0, &rows, 0.05, 2, true).unwrap();
        let g = crandn_matrix(&mut rng, 4, 2, 1.0);
        assert!(matches!(
            unrolled_pullback(&rows, &trace, &g),
            Err(Error::UnsupportedConfiguration(_))
        ));
    }

    /// End-to-end quadratic endpoint loss through the refinement, checked
    /// against the Wirtinger finite-difference oracle at W_0.
    fn endpoint_check(q: usize, eta: f64, seed: u64, tol: f64) {
        let mut rng = seeded_rng(seed);
        let (n, k) = (4, 2);
        let rows = random_rows(&mut rng, k, 1, n);
        let w0 = Beamformer::normalized(&crandn_matrix(&mut rng, n, k, 1.0), 1.0).unwrap();
        let target = crandn_matrix(&mut rng, n, k, 1.0);

        let trace = refine(&w0, &rows, eta, q, false).unwrap();
        let g_end = (trace.final_beamformer() - &target).map(|z| z * 2.0);
        let pulled = unrolled_pullback(&rows, &trace, &g_end).unwrap();

        let rows_fd = rows.clone();
        let target_fd = target.clone();
        let fd = wirtinger_fd_oracle(
            |w| {
                let b = Beamformer::new(w.clone(), 1.0).unwrap();
                let t = refine(&b, &rows_fd, eta, q, false).unwrap();
                (t.final_beamformer() - &target_fd).norm_squared()
            },
            &w0.w,
            1e-5,
        )
        .unwrap();
        assert!(
            rel_err(&pulled, &fd) < tol,
            "q={q}: rel err {}",
            rel_err(&pulled, &fd)
        );
    }

    #[test]
    fn one_step_pullback_matches_end_to_end_fd() {
        endpoint_check(1, 0.01, 4, 1e-5);
    }

    #[test]
    fn three_step_pullback_matches_end_to_end_fd() {
        endpoint_check(3, 0.01, 5, 1e-5);
    }

    #[test]
    fn sum_rate_endpoint_pullback_matches_fd() {
        // Endpoint loss = -R(H, W_Q): the training-relevant composition.
        let mut rng = seeded_rng(6);
        let (n, k, q, eta) = (4, 2, 3, 0.02);
        let rows = random_rows(&mut rng, k, 1, n);
        let w0 = Beamformer::normalized(&crandn_matrix(&mut rng, n, k, 1.0), 1.0).unwrap();
        let trace = refine(&w0, &rows, eta, q, false).unwrap();
        let g_end = grad_sum_rate(&rows, trace.final_beamformer())
            .unwrap()
            .map(|z| -z);
        let pulled = unrolled_pullback(&rows, &trace, &g_end).unwrap();
        let rows_fd = rows.clone();
        let fd = wirtinger_fd_oracle(
            |w| {
                let b = Beamformer::new(w.clone(), 1.0).unwrap();
                let t = refine(&b, &rows_fd, eta, q, false).unwrap();
                -sum_rate(&rows_fd, t.final_beamformer()).unwrap()
            },
            &w0.w,
            1e-5,
        )
        .unwrap();
        assert!(rel_err(&pulled, &fd) < 1e-5, "rel err {}", rel_err(&pulled, &fd));
    }

    #[test]
    fn dense_blocks_agree_with_hvp_route() {
        // Reconstruct the Hessian blocks from directional derivatives of the
        // analytic gradient and compare entrywise.
        let mut rng = seeded_rng(7);
        let (n, k) = (3, 2);
        let rows = random_rows(&mut rng, k, 1, n);
        let w = crandn_matrix(&mut rng, n, k, 0.5);
        let (p, c) = miso_hessian_blocks(&rows, &w).unwrap();
        let dim = n * k;
        for b in 0..dim {
            let mut e = CMat::zeros(n, k);
            e[b] = C64::ONE;
            let d_re = grad_directional_derivative(&rows, &w, &e).unwrap();
            e[b] = C64::i();
            let d_im = grad_directional_derivative(&rows, &w, &e).unwrap();
            for a in 0..dim {
                // grad dir-derivs give 2(P u + C conj(u)).
                let p_ab = (d_re[a] - C64::i() * d_im[a]) / 4.0;
                let c_ab = (d_re[a] + C64::i() * d_im[a]) / 4.0;
                assert!((p_ab - p[(a, b)]).norm() < 1e-10);
                assert!((c_ab - c[(a, b)]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn dense_and_reverse_pullbacks_agree() {
        let mut rng = seeded_rng(8);
        for q in [1usize, 2, 3] {
            let (n, k) = (4, 2);
            let rows = random_rows(&mut rng, k, 1, n);
            let w0 = Beamformer::normalized(&crandn_matrix(&mut rng, n, k, 1.0), 1.0).unwrap();
            let trace = refine(&w0, &rows, 0.02, q, false).unwrap();
            let g = crandn_matrix(&mut rng, n, k, 1.0);
            let a = unrolled_pullback(&rows, &trace, &g).unwrap();
            let b = unrolled_pullback_dense(&rows, &trace, &g).unwrap();
            assert!(rel_err(&a, &b) < 1e-8, "q={q}: rel err {}", rel_err(&a, &b));
        }
    }
}
