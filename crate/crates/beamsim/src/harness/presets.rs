//! Named scenario presets at two sizes: `desk` keeps every code path
//! exercisable in minutes on a laptop; `paper` is the full-size operating
//! point (MISO 64x16, MIMO 64x4x4, hybrid 64/16 RF chains, near-field
//! 16 subarrays of 4 at 3 mm wavelength with users around 3 m).

use std::str::FromStr;

use crate::channel::{GeometryScenario, PathConfig, SystemConfig};
use crate::error::{Error, Result};
use crate::feedback::FeedbackChannelModel;
use crate::nets::EdnConfig;
use crate::training::TrainConfig;

use super::{
    Baseline, EvalSection, ExperimentSpec, HybridMode, HybridSection, SystemSection,
    TrainSection,
};

pub const PRESET_NAMES: [&str; 6] =
    ["miso-sc", "miso-sd", "mimo-sc", "mimo-sd", "hybrid-ff", "hybrid-nf"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    MisoSc,
    MisoSd,
    MimoSc,
    MimoSd,
    HybridFf,
    HybridNf,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "miso-sc" => Ok(Preset::MisoSc),
            "miso-sd" => Ok(Preset::MisoSd),
            "mimo-sc" => Ok(Preset::MimoSc),
            "mimo-sd" => Ok(Preset::MimoSd),
            "hybrid-ff" => Ok(Preset::HybridFf),
            "hybrid-nf" => Ok(Preset::HybridNf),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (valid: {})",
                PRESET_NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Paper,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(Error::Config(format!(
                "unknown scale '{other}' (valid: desk, paper)"
            ))),
        }
    }
}

const SECTOR_PHI: f64 = std::f64::consts::FRAC_PI_2;
const PSI_MISO: f64 = std::f64::consts::PI / 16.0;
const PSI_MIMO: f64 = std::f64::consts::FRAC_PI_4;

fn edn_widths(scale: Scale, hybrid: bool) -> EdnConfig {
    match (scale, hybrid) {
        (Scale::Desk, false) => EdnConfig {
            enc_hidden: vec![128, 64],
            beamdec_hidden: vec![256, 256],
            chandec_hidden: vec![64, 128],
            ..EdnConfig::default()
        },
        (Scale::Desk, true) => EdnConfig {
            enc_hidden: vec![64, 32],
            beamdec_hidden: vec![128, 128],
            chandec_hidden: vec![32, 64],
            ..EdnConfig::default()
        },
        (Scale::Paper, false) => EdnConfig::default(),
        (Scale::Paper, true) => EdnConfig {
            enc_hidden: vec![256, 128],
            beamdec_hidden: vec![512, 512],
            chandec_hidden: vec![128, 256],
            ..EdnConfig::default()
        },
    }
}

fn train_section(scale: Scale, d_latent: usize, hybrid: bool) -> TrainSection {
    let config = match scale {
        Scale::Desk => TrainConfig {
            n_batch: 64,
            epochs: 300,
            chandec_epochs: 200,
            chandec_steps_per_epoch: 2,
            chandec_lr: 0.02,
            ..TrainConfig::default()
        },
        Scale::Paper => TrainConfig {
            epochs: 400,
            chandec_epochs: 300,
            ..TrainConfig::default()
        },
    };
    TrainSection { config, d_latent, edn: edn_widths(scale, hybrid) }
}

fn eval_section(scale: Scale) -> EvalSection {
    EvalSection {
        snr_grid_db: vec![5.0, 10.0, 15.0, 20.0],
        test_size: match scale {
            Scale::Desk => 200,
            Scale::Paper => 500,
        },
        baselines: vec![
            Baseline::KdEdn,
            Baseline::Unsupervised,
            Baseline::Supervised,
            Baseline::KdEdnQ0,
            Baseline::Mmse,
        ],
        seeds: vec![0, 1, 2],
        q_i_grid: (0..=10).collect(),
        q_t_list: vec![0, 5],
    }
}

fn system_section(n: usize, m: usize, k: usize) -> SystemSection {
    SystemSection {
        config: SystemConfig::new(n, m, k, 1.0),
        paths: PathConfig::default(),
        sigma2_h: 0.1,
        snr_lo_db: 5.0,
        snr_hi_db: 20.0,
        snr_levels: 4,
    }
}

/// Builds the full experiment spec for a named preset at a given scale.
pub fn preset_spec(preset: Preset, scale: Scale) -> ExperimentSpec {
    let (system, geometry, hybrid, d_latent) = match (preset, scale) {
        (Preset::MisoSc, Scale::Desk) => (
            system_section(16, 1, 4),
            GeometryScenario::SingleCell { phi: SECTOR_PHI },
            None,
            16,
        ),
        (Preset::MisoSd, Scale::Desk) => (
            system_section(16, 1, 4),
            GeometryScenario::SpatialDivision { psi: PSI_MISO },
            None,
            16,
        ),
        (Preset::MimoSc, Scale::Desk) => (
            system_section(16, 2, 2),
            GeometryScenario::SingleCell { phi: SECTOR_PHI },
            None,
            16,
        ),
        (Preset::MimoSd, Scale::Desk) => (
            system_section(16, 2, 2),
            GeometryScenario::SpatialDivision { psi: PSI_MIMO },
            None,
            16,
        ),
        (Preset::HybridFf, Scale::Desk) => (
            system_section(16, 1, 4),
            GeometryScenario::SingleCell { phi: SECTOR_PHI },
            Some(HybridSection {
                mode: HybridMode::FarField,
                n_rf: 4,
                s: 4,
                n_sub: 4,
                lambda: 3e-3,
                r_center: 0.0,
                sigma_r: 0.0,
                r_min: 0.0,
            }),
            4,
        ),
        (Preset::HybridNf, Scale::Desk) => (
            system_section(16, 1, 4),
            GeometryScenario::SingleCell { phi: SECTOR_PHI },
            Some(HybridSection {
                mode: HybridMode::NearField,
                n_rf: 4,
                s: 4,
                n_sub: 4,
                lambda: 3e-3,
                r_center: 0.19,
                sigma_r: 0.063,
                r_min: 0.1,
            }),
            4,
        ),
        (Preset::MisoSc, Scale::Paper) => (
            system_section(64, 1, 16),
            GeometryScenario::SingleCell { phi: SECTOR_PHI },
            None,
            32,
        ),
        (Preset::MisoSd, Scale::Paper) => (
            system_section(64, 1, 16),
            GeometryScenario::SpatialDivision { psi: PSI_MISO },
            None,
            32,
        ),
        (Preset::MimoSc, Scale::Paper) => (
            system_section(64, 4, 4),
            GeometryScenario::SingleCell { phi: SECTOR_PHI },
            None,
            32,
        ),
        (Preset::MimoSd, Scale::Paper) => (
            system_section(64, 4, 4),
            GeometryScenario::SpatialDivision { psi: PSI_MIMO },
            None,
            32,
        ),
        (Preset::HybridFf, Scale::Paper) => (
            system_section(64, 1, 16),
            GeometryScenario::SingleCell { phi: SECTOR_PHI },
            Some(HybridSection {
                mode: HybridMode::FarField,
                n_rf: 16,
                s: 16,
                n_sub: 4,
                lambda: 3e-3,
                r_center: 0.0,
                sigma_r: 0.0,
                r_min: 0.0,
            }),
            16,
        ),
        (Preset::HybridNf, Scale::Paper) => (
            system_section(64, 1, 16),
            GeometryScenario::SingleCell { phi: SECTOR_PHI },
            Some(HybridSection {
                mode: HybridMode::NearField,
                n_rf: 16,
                s: 16,
                n_sub: 4,
                lambda: 3e-3,
                r_center: 3.0,
                sigma_r: 1.0,
                r_min: 0.1,
            }),
            16,
        ),
    };
    let hybrid_flag = hybrid.is_some();
    let preset_name = match preset {
        Preset::MisoSc => "miso-sc",
        Preset::MisoSd => "miso-sd",
        Preset::MimoSc => "mimo-sc",
        Preset::MimoSd => "mimo-sd",
        Preset::HybridFf => "hybrid-ff",
        Preset::HybridNf => "hybrid-nf",
    };
    ExperimentSpec {
        preset: preset_name.to_string(),
        scale: match scale {
            Scale::Desk => "desk".to_string(),
            Scale::Paper => "paper".to_string(),
        },
        system,
        geometry,
        hybrid,
        train: train_section(scale, d_latent, hybrid_flag),
        feedback: FeedbackChannelModel::additive(0.1),
        eval: eval_section(scale),
    }
}
