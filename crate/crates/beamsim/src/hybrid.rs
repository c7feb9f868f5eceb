//! Hybrid beamforming: pre-determined far-field steering matrices, near-field
//! channels with per-subarray distance phases, TTD + phase-shifter analog
//! focusing, effective channels, and hybrid power normalization.
//!
//! Near-field geometry follows the piecewise-far-field model: the BS array is
//! split into `S` subarrays of `n_sub` antennas; a user is in the far field of
//! each subarray but the subarrays see different distances, so each channel
//! subvector carries a distance-dependent phase on top of a plain array
//! response.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{sector_center, GeometryScenario};
use crate::error::{Error, Result};
use crate::numerics::{array_response, crandn, randn, ula_response_from_sin, CMat, CVec};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HybridConfig {
    /// RF-chain count.
    pub n_rf: usize,
    /// Subarray count (near field).
    pub s: usize,
    /// Antennas per subarray (near field); N = s * n_sub.
    pub n_sub: usize,
    /// Carrier wavelength, meters.
    pub lambda: f64,
    /// Antenna spacing, meters (lambda/2 by default).
    pub d: f64,
}

impl HybridConfig {
    pub fn new(n_rf: usize, s: usize, n_sub: usize, lambda: f64) -> Self {
        Self { n_rf, s, n_sub, lambda, d: lambda / 2.0 }
    }

    pub fn antennas(&self) -> usize {
        self.s * self.n_sub
    }

    /// Conventional near/far boundary `N^2 lambda / 2`.
    pub fn rayleigh_distance(&self) -> f64 {
        let n = self.antennas() as f64;
        n * n * self.lambda / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rf == 0 || self.s == 0 || self.n_sub == 0 {
            return Err(Error::invalid("hybrid: counts must be >= 1"));
        }
        if self.lambda <= 0.0 || self.d <= 0.0 {
            return Err(Error::invalid("hybrid: lambda and d must be positive"));
        }
        Ok(())
    }
}

/// Pre-determined far-field analog beamformer: each column is a steering
/// vector on an even angle grid. Single-cell grids cover the sector; the
/// spatial-division grid puts `M` beams in each user's sector and requires
/// `N_RF == K * M`.
pub fn analog_farfield(
    scenario: &GeometryScenario,
    n: usize,
    n_rf: usize,
    m: usize,
    k: usize,
) -> Result<CMat> {
    if n_rf == 0 {
        return Err(Error::invalid("analog_farfield: N_RF must be >= 1"));
    }
    let angles: Vec<f64> = match *scenario {
        GeometryScenario::SingleCell { phi } => (1..=n_rf)
            .map(|i| -phi / 2.0 + (i as f64 - 0.5) * phi / n_rf as f64)
            .collect(),
        GeometryScenario::SpatialDivision { psi } => {
            if n_rf != k * m {
                return Err(Error::UnsupportedConfiguration(format!(
                    "analog_farfield: spatial-division grid needs N_RF == K*M \
                     (got N_RF={n_rf}, K*M={})",
                    k * m
                )));
            }
            let mut a = Vec::with_capacity(n_rf);
            for kk in 1..=k {
                let center = sector_center(kk, k);
                for mm in 1..=m {
                    a.push(center - psi / 2.0 + (mm as f64 - 0.5) * psi / m as f64);
                }
            }
            a
        }
    };
    let mut wa = CMat::zeros(n, n_rf);
    for (c, &beta) in angles.iter().enumerate() {
        wa.set_column(c, &array_response(n, beta, 0.5)?);
    }
    Ok(wa)
}

/// Per-subarray view of one near-field user: distance and direction from each
/// subarray head, plus the TTD/PS parameters that focus on the user.
#[derive(Debug, Clone)]
pub struct NearFieldUser {
    /// BS distance (from the first antenna), meters.
    pub r: f64,
    /// Azimuth, radians.
    pub theta: f64,
    /// Distance from each subarray's first antenna, meters.
    pub r_s: Vec<f64>,
    /// Sine of the per-subarray direction.
    pub sin_theta_s: Vec<f64>,
    /// TTD delays in meters of path length, `max_s r_s - r_s` (so the
    /// minimum is 0 and all are nonnegative).
    pub mu_s: Vec<f64>,
    /// Phase-shifter steering sines, `sin(eta_s) = -sin(theta_s)`.
    pub sin_eta_s: Vec<f64>,
}

/// Per-subarray distances and directions from the law of cosines:
/// `r_s = sqrt(r^2 + ((s-1) n d)^2 - 2 (s-1) n d r sin(theta))`,
/// `sin(theta_s) = (r sin(theta) - (s-1) n d) / r_s` (1-based s).
pub fn nearfield_subarray_geometry(
    r: f64,
    theta: f64,
    cfg: &HybridConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if r <= 0.0 {
        return Err(Error::invalid("nearfield geometry: distance must be positive"));
    }
    let sin_t = theta.sin();
    let mut r_s = Vec::with_capacity(cfg.s);
    let mut sin_theta_s = Vec::with_capacity(cfg.s);
    for s in 0..cfg.s {
        let offset = s as f64 * cfg.n_sub as f64 * cfg.d;
        let rs2 = r * r + offset * offset - 2.0 * offset * r * sin_t;
        if rs2 <= 0.0 {
            return Err(Error::DegenerateGeometry(
                "nearfield geometry: user coincides with an array element".into(),
            ));
        }
        let rs = rs2.sqrt();
        r_s.push(rs);
        sin_theta_s.push(((r * sin_t - offset) / rs).clamp(-1.0, 1.0));
    }
    Ok((r_s, sin_theta_s))
}

/// Builds the full per-user view including the optimal TTD/PS parameters:
/// `eta_s = -theta_s` and `mu_s = max_s r_s - r_s`.
pub fn nearfield_user(r: f64, theta: f64, cfg: &HybridConfig) -> Result<NearFieldUser> {
    let (r_s, sin_theta_s) = nearfield_subarray_geometry(r, theta, cfg)?;
    let r_max = r_s.iter().cloned().fold(f64::MIN, f64::max);
    let mu_s = r_s.iter().map(|&rs| r_max - rs).collect();
    let sin_eta_s = sin_theta_s.iter().map(|&s| -s).collect();
    Ok(NearFieldUser { r, theta, r_s, sin_theta_s, mu_s, sin_eta_s })
}

/// Near-field channel column `h_bar_k` (N x 1): subvector `s` equals
/// `sqrt(n) * alpha * exp(-j 2 pi r_s / lambda) * conj(a_n(theta_s))`.
pub fn nearfield_channel(
    user: &NearFieldUser,
    alpha: Complex64,
    cfg: &HybridConfig,
) -> Result<CVec> {
    let n = cfg.antennas();
    let mut h = CVec::zeros(n);
    let scale = (cfg.n_sub as f64).sqrt();
    for s in 0..cfg.s {
        let phase = Complex64::from_polar(
            scale,
            -2.0 * std::f64::consts::PI * user.r_s[s] / cfg.lambda,
        ) * alpha;
        let a = ula_response_from_sin(cfg.n_sub, user.sin_theta_s[s], cfg.d / cfg.lambda)?;
        for q in 0..cfg.n_sub {
            h[s * cfg.n_sub + q] = phase * a[q].conj();
        }
    }
    Ok(h)
}

/// Analog focusing vector `v_k` (N x 1, unit norm): subvector `s` equals
/// `sqrt(n/N) * exp(j 2 pi mu_s / lambda) * a_n(eta_s)`.
pub fn nearfield_analog(user: &NearFieldUser, cfg: &HybridConfig) -> Result<CVec> {
    let n = cfg.antennas();
    let mut v = CVec::zeros(n);
    let scale = (cfg.n_sub as f64 / n as f64).sqrt();
    for s in 0..cfg.s {
        let phase = Complex64::from_polar(
            scale,
            2.0 * std::f64::consts::PI * user.mu_s[s] / cfg.lambda,
        );
        let a = ula_response_from_sin(cfg.n_sub, user.sin_eta_s[s], cfg.d / cfg.lambda)?;
        for q in 0..cfg.n_sub {
            v[s * cfg.n_sub + q] = phase * a[q];
        }
    }
    Ok(v)
}

/// Normalized beamforming gain `b_k = |h_bar^H v| / (sqrt(N) |alpha|)`;
/// equals 1 when `v` uses the optimal TTD/PS parameters.
pub fn normalized_gain(h_bar: &CVec, v: &CVec, alpha: Complex64) -> f64 {
    let n = h_bar.len() as f64;
    h_bar.dotc(v).norm() / (n.sqrt() * alpha.norm())
}

/// Stacks per-user focusing vectors into the overall analog matrix `W^a(P)`.
pub fn nearfield_analog_matrix(users: &[NearFieldUser], cfg: &HybridConfig) -> Result<CMat> {
    let n = cfg.antennas();
    let mut wa = CMat::zeros(n, users.len());
    for (k, u) in users.iter().enumerate() {
        wa.set_column(k, &nearfield_analog(u, cfg)?);
    }
    Ok(wa)
}

/// Draws a near-field user position: distance `r ~ N(r_c, sigma_r^2)`
/// redrawn until it lands in `[r_min, rayleigh_distance]` so the
/// piecewise-far-field model stays valid. Errors if the window has
/// negligible mass under the configured distribution.
pub fn sample_nearfield_position(
    r_center: f64,
    sigma_r: f64,
    r_min: f64,
    cfg: &HybridConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let r_max = cfg.rayleigh_distance();
    if r_min > r_max {
        return Err(Error::DegenerateGeometry(format!(
            "near-field distance window is empty: r_min {r_min} > Rayleigh distance {r_max}"
        )));
    }
    for _ in 0..10_000 {
        let r = r_center + sigma_r * randn(rng);
        if r >= r_min && r <= r_max {
            return Ok(r);
        }
    }
    Err(Error::DegenerateGeometry(format!(
        "near-field distance draw N({r_center}, {sigma_r}^2) almost never lands in \
         [{r_min}, {r_max}]"
    )))
}

/// One near-field scene: users with geometry, gains, channel columns
/// (receive-row form is their adjoint), and the focused analog matrix.
#[derive(Debug, Clone)]
pub struct NearFieldScene {
    pub users: Vec<NearFieldUser>,
    pub gains: Vec<Complex64>,
    /// Per-user receive rows `h_bar_k^H` (1 x N), ready for the rate stack.
    pub rows: Vec<CMat>,
    pub analog: CMat,
}

/// Draws a complete near-field scene for `k` users.
pub fn draw_nearfield_scene(
    scenario: &GeometryScenario,
    k: usize,
    r_center: f64,
    sigma_r: f64,
    r_min: f64,
    cfg: &HybridConfig,
    rng: &mut impl Rng,
) -> Result<NearFieldScene> {
    let thetas = crate::channel::sample_user_angles(scenario, k, rng);
    let mut users = Vec::with_capacity(k);
    let mut gains = Vec::with_capacity(k);
    let mut rows = Vec::with_capacity(k);
    for &theta in &thetas {
        let r = sample_nearfield_position(r_center, sigma_r, r_min, cfg, rng)?;
        let user = nearfield_user(r, theta, cfg)?;
        let alpha = crandn(rng, 1.0);
        let h = nearfield_channel(&user, alpha, cfg)?;
        // receive row h^H
        let row = CMat::from_fn(1, h.len(), |_, i| h[i].conj());
        users.push(user);
        gains.push(alpha);
        rows.push(row);
    }
    let analog = nearfield_analog_matrix(&users, cfg)?;
    Ok(NearFieldScene { users, gains, rows, analog })
}

/// Effective channels `G_k = H_bar_k W^a / sigma2_k` (receive-row form in,
/// receive-row form out).
pub fn effective_channel(h: &[CMat], wa: &CMat, sigma2: &[f64]) -> Result<Vec<CMat>> {
    if h.len() != sigma2.len() {
        return Err(Error::invalid("effective_channel: length mismatch"));
    }
    h.iter()
        .zip(sigma2)
        .map(|(hk, &s2)| {
            if hk.ncols() != wa.nrows() {
                return Err(Error::invalid(format!(
                    "effective_channel: channel has {} columns, analog has {} rows",
                    hk.ncols(),
                    wa.nrows()
                )));
            }
            Ok((hk * wa).map(|z| z / s2))
        })
        .collect()
}

/// Scales a raw digital beamformer so the radiated hybrid product meets the
/// power budget: `W^D = sqrt(P) W_raw / ||W^a W_raw||_F`.
pub fn hybrid_power_normalize(wd_raw: &CMat, wa: &CMat, p: f64) -> Result<CMat> {
    if wa.ncols() != wd_raw.nrows() {
        return Err(Error::invalid("hybrid_power_normalize: shape mismatch"));
    }
    let norm = (wa * wd_raw).norm();
    if norm < 1e-300 {
        return Err(Error::DegenerateOutput(
            "hybrid_power_normalize: analog-digital product is zero".into(),
        ));
    }
    let scale = Complex64::new(p.sqrt() / norm, 0.0);
    Ok(wd_raw.map(|z| z * scale))
}
