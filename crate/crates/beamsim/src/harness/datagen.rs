//! Channel-dataset generation for the `generate` CLI command: draws the
//! channel samples an experiment's pipeline would consume (physical for
//! fully digital runs, effective for hybrid runs) and packs them into the
//! binary record format.

use crate::channel::{
    draw_sample, normalize_and_estimate, ChannelDataset, DatasetMode,
};
use crate::error::Result;
use crate::hybrid::{draw_nearfield_scene, HybridConfig};
use crate::numerics::{derived_rng, CMat};

use super::sweeps::fixed_analog_for;
use super::{ExperimentSpec, HybridMode};

const PHASE_DATASET: u64 = 0x6461_7461;

/// Draws `count` samples per the experiment spec into a serializable dataset.
pub fn generate_dataset(spec: &ExperimentSpec, seed: u64, count: usize) -> Result<ChannelDataset> {
    spec.validate()?;
    let sys = &spec.system.config;
    let noise = crate::channel::make_snr_mixture(
        spec.system.snr_lo_db,
        spec.system.snr_hi_db,
        spec.system.snr_levels,
    )?;
    let mut samples = Vec::with_capacity(count);
    let mut analogs: Option<Vec<CMat>> = None;
    let mode;
    match &spec.hybrid {
        None => {
            mode = DatasetMode::Digital;
            for i in 0..count {
                let mut rng = derived_rng(seed, PHASE_DATASET, i as u64);
                samples.push(draw_sample(
                    sys,
                    &spec.geometry,
                    &spec.system.paths,
                    &noise,
                    spec.system.sigma2_h,
                    &mut rng,
                )?);
            }
        }
        Some(h) if h.mode == HybridMode::FarField => {
            mode = DatasetMode::HybridFarField;
            let wa = fixed_analog_for(spec)?.expect("far-field analog");
            let mut list = Vec::with_capacity(count);
            for i in 0..count {
                let mut rng = derived_rng(seed, PHASE_DATASET, i as u64);
                let phys = draw_sample(
                    sys,
                    &spec.geometry,
                    &spec.system.paths,
                    &noise,
                    0.0,
                    &mut rng,
                )?;
                let g_bar: Vec<CMat> = phys.h_bar.iter().map(|hb| hb * &wa).collect();
                samples.push(normalize_and_estimate(
                    g_bar,
                    phys.sigma2,
                    spec.system.sigma2_h,
                    &mut rng,
                )?);
                list.push(wa.clone());
            }
            analogs = Some(list);
        }
        Some(h) => {
            mode = DatasetMode::HybridNearField;
            let cfg = HybridConfig::new(h.n_rf, h.s, h.n_sub, h.lambda);
            let mut list = Vec::with_capacity(count);
            for i in 0..count {
                let mut rng = derived_rng(seed, PHASE_DATASET, i as u64);
                let scene = draw_nearfield_scene(
                    &spec.geometry,
                    sys.k,
                    h.r_center,
                    h.sigma_r,
                    h.r_min,
                    &cfg,
                    &mut rng,
                )?;
                let s2 = noise.draw(&mut rng);
                let g_bar: Vec<CMat> =
                    scene.rows.iter().map(|row| row * &scene.analog).collect();
                samples.push(normalize_and_estimate(
                    g_bar,
                    vec![s2; sys.k],
                    spec.system.sigma2_h,
                    &mut rng,
                )?);
                list.push(scene.analog);
            }
            analogs = Some(list);
        }
    }
    Ok(ChannelDataset { mode, samples, analog: analogs, n_phys: sys.n })
}
