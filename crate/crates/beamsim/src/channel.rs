//! Sparse far-field channel generation, user geometries, estimation-error
//! injection, and noise normalization.
//!
//! Channels are stored in "receive-row" form: the per-user matrix `H_k` is
//! `M x N` and multiplies the beamformer from the left in the received-signal
//! model, so for single-antenna users the stored row is `h_k^H` and the MISO
//! SINR terms are `|h_k^H w_i|^2 = |row_k w_i|^2`.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{all_finite, array_response, crandn, crandn_matrix, randn, CMat};

/// Physical system dimensions and the transmit power budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemConfig {
    /// BS antenna count.
    pub n: usize,
    /// Per-user antenna count (1 for MISO).
    pub m: usize,
    /// User count.
    pub k: usize,
    /// Total transmit power budget (normalized).
    pub p: f64,
    /// Antenna-spacing ratio d/lambda.
    pub d_over_lambda: f64,
}

impl SystemConfig {
    pub fn new(n: usize, m: usize, k: usize, p: f64) -> Self {
        Self { n, m, k, p, d_over_lambda: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.k == 0 {
            return Err(Error::invalid("system: N, M, K must all be >= 1"));
        }
        if self.p <= 0.0 {
            return Err(Error::invalid("system: power budget must be positive"));
        }
        if self.d_over_lambda <= 0.0 {
            return Err(Error::invalid("system: d/lambda must be positive"));
        }
        Ok(())
    }
}

/// User-placement scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeometryScenario {
    /// All users uniform in `[-phi/2, phi/2]`.
    SingleCell { phi: f64 },
    /// `[-pi/2, pi/2]` split into K sectors; user k uniform in a width-psi
    /// window around its sector center.
    SpatialDivision { psi: f64 },
}

/// Center angle of the k-th sector (1-based k) when `[-pi/2, pi/2]` is evenly
/// divided into `k_total` sectors.
pub fn sector_center(k: usize, k_total: usize) -> f64 {
    -std::f64::consts::FRAC_PI_2
        + (k as f64 - 0.5) * std::f64::consts::PI / k_total as f64
}

impl GeometryScenario {
    pub fn validate(&self, k_total: usize) -> Result<()> {
        match *self {
            GeometryScenario::SingleCell { phi } => {
                if !(0.0..=std::f64::consts::PI).contains(&phi) {
                    return Err(Error::invalid("geometry: phi must be in [0, pi]"));
                }
            }
            GeometryScenario::SpatialDivision { psi } => {
                let max = std::f64::consts::PI / k_total as f64;
                if !(0.0..=max).contains(&psi) {
                    return Err(Error::invalid(format!(
                        "geometry: psi must be in [0, pi/K] = [0, {max}]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Multipath description of one user's channel.
#[derive(Debug, Clone)]
pub struct PathSet {
    /// Complex gains, one per path, drawn CN(0, 1).
    pub gains: Vec<Complex64>,
    /// Angles of departure (BS side), radians.
    pub aod: Vec<f64>,
    /// Angles of arrival (user side), radians.
    pub aoa: Vec<f64>,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }
}

/// Multipath statistics shared by all users.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathConfig {
    /// Scattering path count L.
    pub l: usize,
    /// Std dev of the departure angles around the user azimuth, radians.
    pub sigma_aod: f64,
    /// Std dev of the arrival angles around `pi + azimuth`, radians.
    pub sigma_aoa: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self { l: 10, sigma_aod: 0.1, sigma_aoa: 0.1 }
    }
}

/// One draw of the K-user channel state: the physical channels, their
/// noise-normalized versions, and the normalized estimates handed to the
/// encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    /// Physical per-user channels, each M x N.
    pub h_bar: Vec<CMat>,
    /// Per-user noise variances.
    pub sigma2: Vec<f64>,
    /// Normalized channels `H_k = H_bar_k / sigma2_k`.
    pub h: Vec<CMat>,
    /// Injected estimation errors, same shapes as `h`.
    pub delta_h: Vec<CMat>,
    /// Estimated normalized channels `H_tilde_k = H_k + delta_H_k`.
    pub h_tilde: Vec<CMat>,
}

impl ChannelSample {
    pub fn users(&self) -> usize {
        self.h.len()
    }
}

/// Draws each user's azimuth angle per the placement scenario.
pub fn sample_user_angles(
    scenario: &GeometryScenario,
    k_total: usize,
    rng: &mut impl Rng,
) -> Vec<f64> {
    match *scenario {
        GeometryScenario::SingleCell { phi } => (0..k_total)
            .map(|_| {
                if phi == 0.0 {
                    0.0
                } else {
                    rng.random_range(-phi / 2.0..=phi / 2.0)
                }
            })
            .collect(),
        GeometryScenario::SpatialDivision { psi } => (1..=k_total)
            .map(|k| {
                let c = sector_center(k, k_total);
                if psi == 0.0 {
                    c
                } else {
                    rng.random_range(c - psi / 2.0..=c + psi / 2.0)
                }
            })
            .collect(),
    }
}

/// Draws the per-path angles for a user at azimuth `zeta`. Mean AOD is `zeta`,
/// mean AOA is `pi + zeta`; both are normally dispersed and deliberately not
/// truncated (only the sine of an angle enters the array response).
pub fn sample_path_angles(
    zeta: f64,
    paths: &PathConfig,
    rng: &mut impl Rng,
) -> (Vec<f64>, Vec<f64>) {
    let aod = (0..paths.l)
        .map(|_| zeta + paths.sigma_aod * randn(rng))
        .collect();
    let aoa = (0..paths.l)
        .map(|_| std::f64::consts::PI + zeta + paths.sigma_aoa * randn(rng))
        .collect();
    (aod, aoa)
}

/// Draws a complete path set (gains and angles) for a user at azimuth `zeta`.
pub fn sample_path_set(zeta: f64, paths: &PathConfig, rng: &mut impl Rng) -> PathSet {
    let gains = (0..paths.l).map(|_| crandn(rng, 1.0)).collect();
    let (aod, aoa) = sample_path_angles(zeta, paths, rng);
    PathSet { gains, aod, aoa }
}

/// Builds the physical channel `H_bar_k` (M x N) from a path set:
/// `sqrt(MN/L) * sum_l alpha_l a_M(beta_l) a_N(gamma_l)^H`. The receive
/// response degenerates to the scalar 1 for M = 1. Deterministic given the
/// path set.
pub fn gen_channel_farfield(cfg: &SystemConfig, paths: &PathSet) -> Result<CMat> {
    if paths.is_empty() {
        return Err(Error::invalid("gen_channel_farfield: empty path set"));
    }
    let l = paths.len();
    let scale = ((cfg.m * cfg.n) as f64 / l as f64).sqrt();
    let mut h = CMat::zeros(cfg.m, cfg.n);
    for p in 0..l {
        let a_rx = array_response(cfg.m, paths.aoa[p], cfg.d_over_lambda)?;
        let a_tx = array_response(cfg.n, paths.aod[p], cfg.d_over_lambda)?;
        // alpha * a_M * a_N^H, accumulated without forming temporaries per path
        let g = paths.gains[p] * scale;
        for c in 0..cfg.n {
            let t = g * a_tx[c].conj();
            for r in 0..cfg.m {
                h[(r, c)] += a_rx[r] * t;
            }
        }
    }
    Ok(h)
}

/// Normalizes physical channels by the per-user noise variance and injects
/// i.i.d. `CN(0, sigma2_h)` estimation errors on the normalized channels.
pub fn normalize_and_estimate(
    h_bar: Vec<CMat>,
    sigma2: Vec<f64>,
    sigma2_h: f64,
    rng: &mut impl Rng,
) -> Result<ChannelSample> {
    if h_bar.len() != sigma2.len() {
        return Err(Error::invalid("normalize_and_estimate: length mismatch"));
    }
    if sigma2.iter().any(|&s| s <= 0.0) {
        return Err(Error::invalid("normalize_and_estimate: sigma2 must be positive"));
    }
    if sigma2_h < 0.0 {
        return Err(Error::invalid("normalize_and_estimate: sigma2_h must be >= 0"));
    }
    let h: Vec<CMat> = h_bar
        .iter()
        .zip(&sigma2)
        .map(|(hb, &s2)| hb.map(|z| z / s2))
        .collect();
    let delta_h: Vec<CMat> = h
        .iter()
        .map(|hk| {
            if sigma2_h == 0.0 {
                CMat::zeros(hk.nrows(), hk.ncols())
            } else {
                crandn_matrix(rng, hk.nrows(), hk.ncols(), sigma2_h)
            }
        })
        .collect();
    let h_tilde: Vec<CMat> = h.iter().zip(&delta_h).map(|(hk, dk)| hk + dk).collect();
    for m in h_tilde.iter().chain(h.iter()) {
        if !all_finite(m) {
            return Err(Error::numeric("normalize_and_estimate: non-finite channel"));
        }
    }
    Ok(ChannelSample { h_bar, sigma2, h, delta_h, h_tilde })
}

/// Set of noise variances used to train one model across an SNR range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseVarianceSet {
    /// SNR levels in dB, evenly spaced.
    pub snr_db: Vec<f64>,
    /// Matching noise variances `sigma2 = 10^(-snr_db/10)` (SNR = 1/sigma2).
    pub sigma2: Vec<f64>,
}

/// Builds the noise-variance set for `count` evenly spaced SNR levels over
/// `[lo_db, hi_db]`.
pub fn make_snr_mixture(lo_db: f64, hi_db: f64, count: usize) -> Result<NoiseVarianceSet> {
    if count == 0 || hi_db < lo_db {
        return Err(Error::invalid("make_snr_mixture: empty range"));
    }
    let snr_db: Vec<f64> = if count == 1 {
        vec![lo_db]
    } else {
        (0..count)
            .map(|i| lo_db + (hi_db - lo_db) * i as f64 / (count - 1) as f64)
            .collect()
    };
    let sigma2 = snr_db.iter().map(|&s| 10f64.powf(-s / 10.0)).collect();
    Ok(NoiseVarianceSet { snr_db, sigma2 })
}

impl NoiseVarianceSet {
    /// Draws one variance uniformly; all users of a sample share it.
    pub fn draw(&self, rng: &mut impl Rng) -> f64 {
        self.sigma2[rng.random_range(0..self.sigma2.len())]
    }

    pub fn for_snr_db(snr_db: f64) -> f64 {
        10f64.powf(-snr_db / 10.0)
    }
}

/// Draws one K-user channel sample: per-user geometry, path sets, physical
/// channels, one shared noise variance from the mixture, and estimation
/// errors.
pub fn draw_sample(
    cfg: &SystemConfig,
    scenario: &GeometryScenario,
    paths: &PathConfig,
    noise: &NoiseVarianceSet,
    sigma2_h: f64,
    rng: &mut impl Rng,
) -> Result<ChannelSample> {
    let zetas = sample_user_angles(scenario, cfg.k, rng);
    let mut h_bar = Vec::with_capacity(cfg.k);
    for &zeta in &zetas {
        let ps = sample_path_set(zeta, paths, rng);
        h_bar.push(gen_channel_farfield(cfg, &ps)?);
    }
    let s2 = noise.draw(rng);
    normalize_and_estimate(h_bar, vec![s2; cfg.k], sigma2_h, rng)
}

// --- binary dataset format -------------------------------------------------
//
// Channel batches serialize to a flat binary record file:
//   magic "BEAMCHAN", version u32, mode u8, has_analog u8,
//   n_samples u32, k u32, m u32, n_cols u32, n_phys u32,
// then per sample:
//   sigma2 (k f64), channels (k blocks of m*n_cols complex),
//   delta (k blocks of m*n_cols complex),
//   [analog matrix n_phys x n_cols complex when has_analog = 1].
// All scalars little-endian; complex entries are interleaved (re, im) f64
// pairs in column-major order.

pub const DATASET_MAGIC: &[u8; 8] = b"BEAMCHAN";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetMode {
    Digital,
    HybridFarField,
    HybridNearField,
}

impl DatasetMode {
    fn to_u8(self) -> u8 {
        match self {
            DatasetMode::Digital => 0,
            DatasetMode::HybridFarField => 1,
            DatasetMode::HybridNearField => 2,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(DatasetMode::Digital),
            1 => Ok(DatasetMode::HybridFarField),
            2 => Ok(DatasetMode::HybridNearField),
            _ => Err(Error::invalid(format!("dataset: unknown mode {v}"))),
        }
    }
}

/// A serializable collection of channel samples, optionally carrying the
/// per-sample analog beamforming matrix (near-field hybrid datasets need it
/// for power normalization).
#[derive(Debug, Clone)]
pub struct ChannelDataset {
    pub mode: DatasetMode,
    pub samples: Vec<ChannelSample>,
    pub analog: Option<Vec<CMat>>,
    /// Physical antenna count (columns of the analog matrix's domain).
    pub n_phys: usize,
}

fn write_cmat(buf: &mut Vec<u8>, m: &CMat) {
    for z in m.iter() {
        buf.extend_from_slice(&z.re.to_le_bytes());
        buf.extend_from_slice(&z.im.to_le_bytes());
    }
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_cmat(r: &mut impl Read, rows: usize, cols: usize) -> Result<CMat> {
    let mut m = CMat::zeros(rows, cols);
    for i in 0..m.len() {
        let re = read_f64(r)?;
        let im = read_f64(r)?;
        m[i] = Complex64::new(re, im);
    }
    Ok(m)
}

impl ChannelDataset {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::invalid("dataset: no samples"))?;
        let k = first.users();
        let m = first.h[0].nrows();
        let n_cols = first.h[0].ncols();
        let mut buf = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.push(self.mode.to_u8());
        buf.push(self.analog.is_some() as u8);
        buf.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(k as u32).to_le_bytes());
        buf.extend_from_slice(&(m as u32).to_le_bytes());
        buf.extend_from_slice(&(n_cols as u32).to_le_bytes());
        buf.extend_from_slice(&(self.n_phys as u32).to_le_bytes());
        for (i, s) in self.samples.iter().enumerate() {
            for &s2 in &s.sigma2 {
                buf.extend_from_slice(&s2.to_le_bytes());
            }
            for hb in &s.h_bar {
                write_cmat(&mut buf, hb);
            }
            for dh in &s.delta_h {
                write_cmat(&mut buf, dh);
            }
            if let Some(analog) = &self.analog {
                write_cmat(&mut buf, &analog[i]);
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::invalid("dataset: bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(Error::invalid(format!("dataset: unsupported version {version}")));
        }
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags)?;
        let mode = DatasetMode::from_u8(flags[0])?;
        let has_analog = flags[1] != 0;
        let n_samples = read_u32(&mut r)? as usize;
        let k = read_u32(&mut r)? as usize;
        let m = read_u32(&mut r)? as usize;
        let n_cols = read_u32(&mut r)? as usize;
        let n_phys = read_u32(&mut r)? as usize;
        let mut samples = Vec::with_capacity(n_samples);
        let mut analog = if has_analog { Some(Vec::with_capacity(n_samples)) } else { None };
        for _ in 0..n_samples {
            let mut sigma2 = Vec::with_capacity(k);
            for _ in 0..k {
                sigma2.push(read_f64(&mut r)?);
            }
            let mut h_bar = Vec::with_capacity(k);
            for _ in 0..k {
                h_bar.push(read_cmat(&mut r, m, n_cols)?);
            }
            let mut delta_h = Vec::with_capacity(k);
            for _ in 0..k {
                delta_h.push(read_cmat(&mut r, m, n_cols)?);
            }
            let h: Vec<CMat> = h_bar
                .iter()
                .zip(&sigma2)
                .map(|(hb, &s2)| hb.map(|z| z / s2))
                .collect();
            let h_tilde: Vec<CMat> = h.iter().zip(&delta_h).map(|(hk, dk)| hk + dk).collect();
            samples.push(ChannelSample { h_bar, sigma2, h, delta_h, h_tilde });
            if let Some(a) = analog.as_mut() {
                a.push(read_cmat(&mut r, n_phys, n_cols)?);
            }
        }
        Ok(ChannelDataset { mode, samples, analog, n_phys })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// SHA-256 of the serialized bytes; recorded in experiment manifests so
    /// baselines demonstrably compare on identical samples.
    pub fn content_hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let bytes = self.to_bytes()?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        Ok(format!("{:x}", hasher.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use approx::assert_relative_eq;

    fn miso_cfg(n: usize, k: usize) -> SystemConfig {
        SystemConfig::new(n, 1, k, 1.0)
    }

    #[test]
    fn spatial_division_zero_width_hits_sector_centers() {
        let mut rng = seeded_rng(0);
        let z = sample_user_angles(&GeometryScenario::SpatialDivision { psi: 0.0 }, 4, &mut rng);
        let expected = [-3.0, -1.0, 1.0, 3.0].map(|x| x * std::f64::consts::PI / 8.0);
        for (a, e) in z.iter().zip(expected) {
            assert_relative_eq!(a, &e, epsilon = 1e-15);
        }
    }

    #[test]
    fn single_cell_zero_sector_collapses_to_broadside() {
        let mut rng = seeded_rng(0);
        let z = sample_user_angles(&GeometryScenario::SingleCell { phi: 0.0 }, 5, &mut rng);
        assert!(z.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn spatial_division_angles_stay_in_their_sectors() {
        let mut rng = seeded_rng(1);
        let k = 16;
        let psi = std::f64::consts::PI / 16.0;
        for _ in 0..200 {
            let z = sample_user_angles(&GeometryScenario::SpatialDivision { psi }, k, &mut rng);
            for (i, &zi) in z.iter().enumerate() {
                let c = sector_center(i + 1, k);
                assert!((zi - c).abs() <= psi / 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn spatial_division_sector_disjointness() {
        // |zeta_k - zeta_k'| >= pi/K - psi whenever psi <= pi/K.
        let mut rng = seeded_rng(2);
        let k = 8;
        let psi = std::f64::consts::PI / 16.0;
        let gap = std::f64::consts::PI / k as f64 - psi;
        for _ in 0..100 {
            let z = sample_user_angles(&GeometryScenario::SpatialDivision { psi }, k, &mut rng);
            for i in 0..k {
                for j in 0..i {
                    assert!((z[i] - z[j]).abs() >= gap - 1e-12);
                }
            }
        }
    }

    #[test]
    fn path_angles_zero_spread_equal_means() {
        let mut rng = seeded_rng(3);
        let paths = PathConfig { l: 6, sigma_aod: 0.0, sigma_aoa: 0.0 };
        let zeta = 0.4;
        let (aod, aoa) = sample_path_angles(zeta, &paths, &mut rng);
        assert!(aod.iter().all(|&g| g == zeta));
        assert!(aoa.iter().all(|&b| b == std::f64::consts::PI + zeta));
    }

    #[test]
    fn path_angle_spread_matches_sigma() {
        let mut rng = seeded_rng(4);
        let paths = PathConfig { l: 1, sigma_aod: 0.1, sigma_aoa: 0.1 };
        let n = 10_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let (aod, _) = sample_path_angles(0.0, &paths, &mut rng);
            sum += aod[0];
            sum_sq += aod[0] * aod[0];
        }
        let mean = sum / n as f64;
        let std = (sum_sq / n as f64 - mean * mean).sqrt();
        assert!((0.097..=0.103).contains(&std), "sample std = {std}");
    }

    #[test]
    fn mean_aoa_is_pi_plus_azimuth() {
        let mut rng = seeded_rng(5);
        let paths = PathConfig { l: 1, sigma_aod: 0.1, sigma_aoa: 0.1 };
        let zeta = std::f64::consts::FRAC_PI_4;
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| sample_path_angles(zeta, &paths, &mut rng).1[0])
            .sum::<f64>()
            / n as f64;
        let se = 0.1 / (n as f64).sqrt();
        assert!((mean - (std::f64::consts::PI + zeta)).abs() < 3.0 * se);
    }

    #[test]
    fn single_path_miso_channel_norm_is_sqrt_n() {
        let cfg = miso_cfg(16, 1);
        let ps = PathSet {
            gains: vec![Complex64::new(1.0, 0.0)],
            aod: vec![0.3],
            aoa: vec![std::f64::consts::PI + 0.3],
        };
        let h = gen_channel_farfield(&cfg, &ps).unwrap();
        assert_eq!((h.nrows(), h.ncols()), (1, 16));
        assert_relative_eq!(h.norm(), (16f64).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn channel_energy_normalization_desk_scale() {
        // E||H_bar||_F^2 = MN; checked at 1e5 samples elsewhere (acceptance),
        // at 2e4 here for speed with a wider gate.
        let cfg = SystemConfig::new(8, 2, 1, 1.0);
        let paths = PathConfig::default();
        let mut rng = seeded_rng(6);
        let n = 20_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let ps = sample_path_set(0.1, &paths, &mut rng);
                gen_channel_farfield(&cfg, &ps).unwrap().norm_squared()
            })
            .sum::<f64>()
            / n as f64;
        let mn = (cfg.m * cfg.n) as f64;
        assert!((mean - mn).abs() / mn < 0.04, "mean = {mean}, MN = {mn}");
    }

    #[test]
    fn identical_path_angles_collapse_to_rank_one() {
        let cfg = SystemConfig::new(8, 4, 1, 1.0);
        let mut rng = seeded_rng(7);
        let paths = PathConfig { l: 10, sigma_aod: 0.0, sigma_aoa: 0.0 };
        let ps = sample_path_set(0.25, &paths, &mut rng);
        let h = gen_channel_farfield(&cfg, &ps).unwrap();
        let svd = h.svd(false, false);
        let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(sv[1] <= 1e-10 * sv[0], "singular values {sv:?}");
    }

    #[test]
    fn gen_channel_is_deterministic_given_paths() {
        let cfg = miso_cfg(8, 1);
        let mut rng = seeded_rng(8);
        let ps = sample_path_set(-0.2, &PathConfig::default(), &mut rng);
        let a = gen_channel_farfield(&cfg, &ps).unwrap();
        let b = gen_channel_farfield(&cfg, &ps).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn normalization_scales_exactly() {
        let mut rng = seeded_rng(9);
        let hb = crandn_matrix(&mut rng, 1, 4, 1.0);
        let s = normalize_and_estimate(vec![hb.clone()], vec![2.0], 0.0, &mut rng).unwrap();
        for i in 0..hb.len() {
            assert_eq!(s.h[0][i], hb[i] / 2.0);
        }
        assert_eq!(s.h_tilde, s.h);
    }

    #[test]
    fn estimation_error_variance_matches_config() {
        let mut rng = seeded_rng(10);
        let n = 100_000;
        let hb = crandn_matrix(&mut rng, 1, n, 1.0);
        let s = normalize_and_estimate(vec![hb], vec![1.0], 0.1, &mut rng).unwrap();
        let mean_sq: f64 = s.delta_h[0].iter().map(|z| z.norm_sqr()).sum::<f64>() / n as f64;
        assert!((0.098..=0.102).contains(&mean_sq), "E|dH|^2 = {mean_sq}");
    }

    #[test]
    fn estimation_error_invariants_hold_exactly() {
        let mut rng = seeded_rng(11);
        let hb = crandn_matrix(&mut rng, 2, 4, 1.0);
        let s = normalize_and_estimate(vec![hb], vec![0.5], 0.3, &mut rng).unwrap();
        for i in 0..8 {
            assert_eq!(s.h_tilde[0][i], s.h[0][i] + s.delta_h[0][i]);
        }
    }

    #[test]
    fn normalize_rejects_nonpositive_sigma2() {
        let mut rng = seeded_rng(12);
        let hb = crandn_matrix(&mut rng, 1, 2, 1.0);
        assert!(normalize_and_estimate(vec![hb], vec![0.0], 0.0, &mut rng).is_err());
    }

    #[test]
    fn snr_mixture_levels() {
        let v = make_snr_mixture(5.0, 20.0, 4).unwrap();
        assert_eq!(v.snr_db, vec![5.0, 10.0, 15.0, 20.0]);
        assert_relative_eq!(v.sigma2[3], 0.01, epsilon = 1e-15);
        let z = make_snr_mixture(0.0, 0.0, 1).unwrap();
        assert_relative_eq!(z.sigma2[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn dataset_roundtrip_preserves_samples() {
        let cfg = SystemConfig::new(4, 1, 2, 1.0);
        let scenario = GeometryScenario::SpatialDivision { psi: 0.2 };
        let noise = make_snr_mixture(5.0, 20.0, 4).unwrap();
        let mut rng = seeded_rng(13);
        let samples: Vec<ChannelSample> = (0..3)
            .map(|_| {
                draw_sample(&cfg, &scenario, &PathConfig::default(), &noise, 0.1, &mut rng)
                    .unwrap()
            })
            .collect();
        let ds = ChannelDataset {
            mode: DatasetMode::Digital,
            samples,
            analog: None,
            n_phys: 4,
        };
        let bytes = ds.to_bytes().unwrap();
        let back = ChannelDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back.samples.len(), 3);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a, b);
        }
        assert_eq!(ds.content_hash().unwrap(), back.content_hash().unwrap());
    }

    #[test]
    fn delta_h_chi_squared_consistency() {
        // ||H_tilde - H||^2 over 1e4 entries is chi-squared with 2e4 real
        // degrees of freedom (each real part N(0, s2/2)); its mean is
        // 1e4 * s2 and its std is sqrt(2e4) * s2/2... use a 99% gate.
        let mut rng = seeded_rng(14);
        let n = 10_000usize;
        let s2 = 0.1;
        let hb = crandn_matrix(&mut rng, 1, n, 1.0);
        let s = normalize_and_estimate(vec![hb], vec![1.0], s2, &mut rng).unwrap();
        let total: f64 = (&s.h_tilde[0] - &s.h[0]).norm_squared();
        let mean = n as f64 * s2;
        // var of sum of 2n terms each Gamma-like: Var(|z|^2) = s2^2 for CN.
        let std = (n as f64).sqrt() * s2;
        assert!(
            (total - mean).abs() < 2.6 * std,
            "total = {total}, expected {mean} +- {}",
            2.6 * std
        );
    }
}
