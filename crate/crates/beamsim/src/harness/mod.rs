//! Experiment runner: scenario presets, baseline implementations, SNR and
//! refinement-depth sweeps, and CSV/JSON outputs.
//!
//! Reported rates are always computed with the true normalized channels; the
//! evaluation routines take the estimate only to drive the model under test.

mod datagen;
mod eval;
mod gradcheck;
mod presets;
mod sweeps;

pub use datagen::generate_dataset;
pub use eval::{
    build_test_set, evaluate_mmse_baseline, evaluate_mmse_baseline_with, evaluate_model,
    EvalResult, TestSet,
};
pub use gradcheck::{run_gradcheck, SuiteResult};
pub use presets::{preset_spec, Preset, Scale, PRESET_NAMES};
pub use sweeps::{
    fixed_analog_for, generator_from_spec, nets_for_spec, sweep_q, sweep_snr, test_sets_for,
    train_baseline, SweepOutput,
};

use serde::{Deserialize, Serialize};

use crate::channel::{GeometryScenario, PathConfig, SystemConfig};
use crate::error::{Error, Result};
use crate::feedback::FeedbackChannelModel;
use crate::nets::EdnConfig;
use crate::training::TrainConfig;

/// The schemes an experiment can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Full scheme: KD ramp, unrolled training refinement, refined inference.
    KdEdn,
    /// Pure sum-rate objective (alpha fixed at 1).
    Unsupervised,
    /// Pure teacher imitation (alpha fixed at 0).
    Supervised,
    /// KD ramp but no refinement at all (trained and evaluated at Q = 0).
    KdEdnQ0,
    /// Non-learning: MMSE beamformer from the estimated channel plus ascent
    /// steps on that estimate.
    Mmse,
}

impl Baseline {
    pub fn name(&self) -> &'static str {
        match self {
            Baseline::KdEdn => "kd-edn",
            Baseline::Unsupervised => "unsupervised",
            Baseline::Supervised => "supervised",
            Baseline::KdEdnQ0 => "kd-edn-q0",
            Baseline::Mmse => "mmse",
        }
    }

    pub fn is_trained(&self) -> bool {
        !matches!(self, Baseline::Mmse)
    }
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kd-edn" => Ok(Baseline::KdEdn),
            "unsupervised" => Ok(Baseline::Unsupervised),
            "supervised" => Ok(Baseline::Supervised),
            "kd-edn-q0" => Ok(Baseline::KdEdnQ0),
            "mmse" => Ok(Baseline::Mmse),
            other => Err(Error::Config(format!(
                "unknown baseline '{other}' (valid: kd-edn, unsupervised, supervised, \
                 kd-edn-q0, mmse)"
            ))),
        }
    }
}

/// Channel-model knobs grouped with the physical system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemSection {
    #[serde(flatten)]
    pub config: SystemConfig,
    pub paths: PathConfig,
    /// Estimation-error variance injected on normalized channels.
    pub sigma2_h: f64,
    /// Training SNR mixture: evenly spaced levels over [lo, hi] dB.
    pub snr_lo_db: f64,
    pub snr_hi_db: f64,
    pub snr_levels: usize,
}

/// Hybrid front-end description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HybridSection {
    pub mode: HybridMode,
    pub n_rf: usize,
    /// Near field only: subarray count and size (N = s * n_sub).
    pub s: usize,
    pub n_sub: usize,
    pub lambda: f64,
    /// Near-field user-distance distribution.
    pub r_center: f64,
    pub sigma_r: f64,
    pub r_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HybridMode {
    FarField,
    NearField,
}

/// Training hyperparameters plus the network architecture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(flatten)]
    pub config: TrainConfig,
    pub d_latent: usize,
    pub edn: EdnConfig,
}

/// Evaluation protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    pub snr_grid_db: Vec<f64>,
    pub test_size: usize,
    pub baselines: Vec<Baseline>,
    pub seeds: Vec<u64>,
    /// Refinement depths probed by the Q sweep.
    pub q_i_grid: Vec<usize>,
    pub q_t_list: Vec<usize>,
}

/// Everything one experiment needs, serializable as the JSON config with
/// sections {system, geometry, hybrid, train, feedback, eval}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Names recorded for the manifest; free-form.
    #[serde(default)]
    pub preset: String,
    #[serde(default)]
    pub scale: String,
    pub system: SystemSection,
    pub geometry: GeometryScenario,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hybrid: Option<HybridSection>,
    pub train: TrainSection,
    pub feedback: FeedbackChannelModel,
    pub eval: EvalSection,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.system
            .config
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.geometry
            .validate(self.system.config.k)
            .map_err(|e| Error::Config(e.to_string()))?;
        self.train.config.validate()?;
        self.feedback
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.eval.baselines.is_empty() {
            return Err(Error::Config("eval: at least one baseline is required".into()));
        }
        if self.eval.snr_grid_db.is_empty() {
            return Err(Error::Config("eval: SNR grid must be nonempty".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval: at least one seed is required".into()));
        }
        if self.eval.test_size == 0 {
            return Err(Error::Config("eval: test size must be >= 1".into()));
        }
        if let Some(h) = &self.hybrid {
            if h.mode == HybridMode::NearField && h.s * h.n_sub != self.system.config.n {
                return Err(Error::Config(format!(
                    "hybrid: S * n_sub = {} must equal N = {}",
                    h.s * h.n_sub,
                    self.system.config.n
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: ExperimentSpec =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path:?}: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// One row of a result table. `seconds` is measured wall time and is the one
/// column exempt from bit-reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub baseline: String,
    pub snr_db: f64,
    pub q_t: Option<usize>,
    pub q_i: Option<usize>,
    pub mean_rate: f64,
    pub std_rate: f64,
    pub n_samples: usize,
    pub seconds: f64,
    /// Power audit: worst deviation of the emitted `W_0` from the budget and
    /// the post-refinement norm range.
    pub w0_power_max_dev: f64,
    pub post_norm_mean: f64,
    pub post_norm_max: f64,
}

/// Serialized alongside every result table so any figure is re-plottable
/// offline and every row is attributable to exact inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: ExperimentSpec,
    pub crate_version: String,
    pub seeds: Vec<u64>,
    /// SHA-256 of each test set, keyed by SNR level.
    pub test_set_hashes: Vec<(String, String)>,
    pub rows: Vec<ResultRow>,
}

pub fn write_snr_csv(rows: &[ResultRow], path: &std::path::Path) -> Result<()> {
    let mut out = String::from("baseline,snr_db,mean_rate,std_rate,n_samples,seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.baseline, r.snr_db, r.mean_rate, r.std_rate, r.n_samples, r.seconds
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_q_csv(rows: &[ResultRow], path: &std::path::Path) -> Result<()> {
    let mut out = String::from("baseline,q_t,q_i,mean_rate,std_rate,n_samples,seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.baseline,
            r.q_t.map_or(String::new(), |q| q.to_string()),
            r.q_i.map_or(String::new(), |q| q.to_string()),
            r.mean_rate,
            r.std_rate,
            r.n_samples,
            r.seconds
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Training metrics stream. Wall times go to a separate sidecar so this file
/// is byte-identical across reruns of the same seed.
pub fn write_metrics_csv(
    metrics: &[crate::training::EpochMetrics],
    path: &std::path::Path,
) -> Result<()> {
    let mut out = String::from("epoch,alpha,mean_lu,mean_ls,mean_rate\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.epoch, m.alpha, m.mean_lu, m.mean_ls, m.mean_rate
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_timings_csv(seconds: &[f64], path: &std::path::Path) -> Result<()> {
    let mut out = String::from("epoch,seconds\n");
    for (i, s) in seconds.iter().enumerate() {
        out.push_str(&format!("{i},{s}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}
