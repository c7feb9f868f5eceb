//! Baseline training and the two sweep experiments (rate vs SNR, rate vs
//! refinement depth).

use crate::channel::make_snr_mixture;
use crate::error::{Error, Result};
use crate::hybrid::{analog_farfield, HybridConfig};
use crate::nets::{EdnDims, EdnNets, NormMode};
use crate::numerics::{derived_rng, mix64, CMat};
use crate::training::{
    run_algorithm, InferenceOptions, LossSchedule, SampleGenerator, ScenarioKind, TrainOutputs,
    TrainedEdn,
};

use super::eval::{build_test_set, evaluate_mmse_baseline, evaluate_model, TestSet};
use super::{Baseline, ExperimentSpec, HybridMode, Manifest, ResultRow};

const PHASE_NET_INIT: u64 = 0x4e45_5453;
const PHASE_TEST_SET: u64 = 0x5445_5354;

/// Builds the far-field analog matrix an experiment uses, if any.
pub fn fixed_analog_for(spec: &ExperimentSpec) -> Result<Option<CMat>> {
    match &spec.hybrid {
        Some(h) if h.mode == HybridMode::FarField => Ok(Some(analog_farfield(
            &spec.geometry,
            spec.system.config.n,
            h.n_rf,
            spec.system.config.m,
            spec.system.config.k,
        )?)),
        _ => Ok(None),
    }
}

/// Assembles the deterministic sample source for an experiment. `seed`
/// selects the stream; `noise_override` pins evaluation sets to one level.
pub fn generator_from_spec(
    spec: &ExperimentSpec,
    seed: u64,
    noise_override: Option<f64>,
) -> Result<SampleGenerator> {
    let noise = match noise_override {
        Some(snr_db) => make_snr_mixture(snr_db, snr_db, 1)?,
        None => make_snr_mixture(
            spec.system.snr_lo_db,
            spec.system.snr_hi_db,
            spec.system.snr_levels,
        )?,
    };
    let kind = match &spec.hybrid {
        None => ScenarioKind::Digital,
        Some(h) => match h.mode {
            HybridMode::FarField => ScenarioKind::HybridFarField {
                analog: fixed_analog_for(spec)?.expect("far-field mode builds an analog"),
            },
            HybridMode::NearField => ScenarioKind::HybridNearField {
                hybrid: HybridConfig::new(h.n_rf, h.s, h.n_sub, h.lambda),
                r_center: h.r_center,
                sigma_r: h.sigma_r,
                r_min: h.r_min,
            },
        },
    };
    Ok(SampleGenerator {
        system: spec.system.config.clone(),
        geometry: spec.geometry,
        paths: spec.system.paths.clone(),
        noise,
        sigma2_h: spec.system.sigma2_h,
        feedback: spec.feedback,
        d_latent: spec.train.d_latent,
        kind,
        seed,
    })
}

/// Freshly initialized networks matching the experiment's shapes.
pub fn nets_for_spec(spec: &ExperimentSpec, gen: &SampleGenerator, seed: u64) -> Result<EdnNets> {
    let dims = EdnDims {
        k: spec.system.config.k,
        m: spec.system.config.m,
        n_cols: gen.n_cols(),
        n_bf: gen.n_cols(),
        d_latent: spec.train.d_latent,
    };
    let norm = match &gen.kind {
        ScenarioKind::Digital => NormMode::Digital,
        ScenarioKind::HybridFarField { analog } => NormMode::hybrid_fixed(analog.clone()),
        ScenarioKind::HybridNearField { .. } => NormMode::HybridPerSample,
    };
    let mut rng = derived_rng(seed, PHASE_NET_INIT, 0);
    EdnNets::init(dims, &spec.train.edn, norm, &mut rng)
}

/// Trains one baseline for one seed. `q_t_override` substitutes the training
/// refinement depth (used by the Q sweep).
pub fn train_baseline(
    spec: &ExperimentSpec,
    baseline: Baseline,
    seed: u64,
    q_t_override: Option<usize>,
) -> Result<(TrainedEdn, TrainOutputs)> {
    if !baseline.is_trained() {
        return Err(Error::Config(format!(
            "baseline {} does not train",
            baseline.name()
        )));
    }
    let schedule = match baseline {
        Baseline::KdEdn | Baseline::KdEdnQ0 => LossSchedule::KdRamp {
            step: spec.train.config.alpha_step,
        },
        Baseline::Unsupervised => LossSchedule::FixedAlpha { alpha: 1.0 },
        Baseline::Supervised => LossSchedule::FixedAlpha { alpha: 0.0 },
        Baseline::Mmse => unreachable!(),
    };
    let mut cfg = spec.train.config.clone();
    cfg.seed = seed;
    cfg.q_t = match baseline {
        Baseline::KdEdnQ0 => 0,
        _ => q_t_override.unwrap_or(cfg.q_t),
    };
    let gen = generator_from_spec(spec, seed, None)?;
    let nets = nets_for_spec(spec, &gen, seed)?;
    let outputs = run_algorithm(nets, &gen, &cfg, schedule)?;
    Ok((outputs.model.clone(), outputs))
}

fn inference_options(spec: &ExperimentSpec, q_i: usize) -> InferenceOptions {
    InferenceOptions {
        q_i,
        eta_ga: spec.train.config.eta_ga,
        feedback: spec.feedback,
        project: false,
        oracle_channel: false,
    }
}

/// Builds the per-level evaluation test sets, shared by all baselines.
pub fn test_sets_for(spec: &ExperimentSpec, seed: u64) -> Result<Vec<TestSet>> {
    spec.eval
        .snr_grid_db
        .iter()
        .enumerate()
        .map(|(i, &snr_db)| {
            let gen = generator_from_spec(spec, mix64(seed, PHASE_TEST_SET), Some(snr_db))?;
            build_test_set(&gen, snr_db, spec.eval.test_size, i as u64)
        })
        .collect()
}

/// Result tables plus the manifest that makes them re-plottable.
pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    pub manifest: Manifest,
}

fn manifest_for(spec: &ExperimentSpec, tests: &[TestSet], rows: Vec<ResultRow>) -> Manifest {
    Manifest {
        spec: spec.clone(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: spec.eval.seeds.clone(),
        test_set_hashes: tests
            .iter()
            .map(|t| (format!("{} dB", t.snr_db), t.hash.clone()))
            .collect(),
        rows,
    }
}

/// Sum rate versus SNR for every configured baseline: models train once on
/// the SNR mixture (first seed), then evaluate at each grid level on shared
/// test sets.
pub fn sweep_snr(spec: &ExperimentSpec) -> Result<SweepOutput> {
    spec.validate()?;
    let seed = spec.eval.seeds[0];
    let tests = test_sets_for(spec, seed)?;
    let fixed_analog = fixed_analog_for(spec)?;
    let mut rows = Vec::new();
    for &baseline in &spec.eval.baselines {
        let model = if baseline.is_trained() {
            Some(train_baseline(spec, baseline, seed, None)?.0)
        } else {
            None
        };
        let q_i = match baseline {
            Baseline::KdEdnQ0 => 0,
            _ => spec.train.config.q_i,
        };
        for test in &tests {
            let res = match &model {
                Some(m) => evaluate_model(
                    m,
                    test,
                    &inference_options(spec, q_i),
                    seed,
                    fixed_analog.as_ref(),
                )?,
                None => evaluate_mmse_baseline(
                    test,
                    spec.system.config.p,
                    q_i,
                    spec.train.config.eta_ga,
                    fixed_analog.as_ref(),
                )?,
            };
            rows.push(ResultRow {
                baseline: baseline.name().to_string(),
                snr_db: test.snr_db,
                q_t: None,
                q_i: Some(q_i),
                mean_rate: res.mean,
                std_rate: res.std,
                n_samples: res.rates.len(),
                seconds: res.seconds,
                w0_power_max_dev: res.w0_power_max_dev,
                post_norm_mean: res.post_norm_mean,
                post_norm_max: res.post_norm_max,
            });
        }
    }
    let manifest = manifest_for(spec, &tests, rows.clone());
    Ok(SweepOutput { rows, manifest })
}

/// Sum rate versus inference refinement depth: one trained model per `q_t`
/// in the spec's list, each evaluated across the `q_i` grid, plus the
/// MMSE-initialized refinement curve. Evaluation uses the median SNR level.
pub fn sweep_q(spec: &ExperimentSpec) -> Result<SweepOutput> {
    spec.validate()?;
    let seed = spec.eval.seeds[0];
    let grid = &spec.eval.snr_grid_db;
    let snr_db = grid[grid.len() / 2];
    let gen = generator_from_spec(spec, mix64(seed, PHASE_TEST_SET), Some(snr_db))?;
    let test = build_test_set(&gen, snr_db, spec.eval.test_size, 0)?;
    let fixed_analog = fixed_analog_for(spec)?;
    let mut rows = Vec::new();
    for &q_t in &spec.eval.q_t_list {
        let (model, _) = train_baseline(spec, Baseline::KdEdn, seed, Some(q_t))?;
        for &q_i in &spec.eval.q_i_grid {
            let res = evaluate_model(
                &model,
                &test,
                &inference_options(spec, q_i),
                seed,
                fixed_analog.as_ref(),
            )?;
            rows.push(ResultRow {
                baseline: Baseline::KdEdn.name().to_string(),
                snr_db,
                q_t: Some(q_t),
                q_i: Some(q_i),
                mean_rate: res.mean,
                std_rate: res.std,
                n_samples: res.rates.len(),
                seconds: res.seconds,
                w0_power_max_dev: res.w0_power_max_dev,
                post_norm_mean: res.post_norm_mean,
                post_norm_max: res.post_norm_max,
            });
        }
    }
    for &q_i in &spec.eval.q_i_grid {
        let res = evaluate_mmse_baseline(
            &test,
            spec.system.config.p,
            q_i,
            spec.train.config.eta_ga,
            fixed_analog.as_ref(),
        )?;
        rows.push(ResultRow {
            baseline: Baseline::Mmse.name().to_string(),
            snr_db,
            q_t: None,
            q_i: Some(q_i),
            mean_rate: res.mean,
            std_rate: res.std,
            n_samples: res.rates.len(),
            seconds: res.seconds,
            w0_power_max_dev: res.w0_power_max_dev,
            post_norm_mean: res.post_norm_mean,
            post_norm_max: res.post_norm_max,
        });
    }
    let tests = vec![test];
    let manifest = manifest_for(spec, &tests, rows.clone());
    Ok(SweepOutput { rows, manifest })
}
