//! End-to-end training: knowledge-distillation loss with an alpha ramp,
//! alternating encoder/decoder SGD through the unrolled refinement, the
//! supervised channel-decoder stage, and the assembled inference path.
//!
//! Stage 1 jointly trains the encoder and beamformer decoder: each SGD step
//! draws a fresh batch of `(H, dH, dz)` tuples with the MMSE teacher computed
//! from the true `H`, runs the sample pipeline (encode, perturb, decode,
//! normalize, refine on the true channel), and pulls the KD-loss gradient
//! back through the unrolled ascent, the normalization layer, and the MLPs.
//! Stage 2 freezes the encoder and fits the channel decoder by supervised
//! regression on the recovered latents.

mod pipeline;

pub use pipeline::{backward_pipeline, forward_pipeline, PipelineIntermediates};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    draw_sample, GeometryScenario, NoiseVarianceSet, PathConfig, SystemConfig,
};
use crate::error::{Error, Result};
use crate::feedback::{apply_feedback_error, FeedbackChannelModel};
use crate::hybrid::{draw_nearfield_scene, effective_channel, hybrid_power_normalize, HybridConfig};
use crate::nets::{EdnNets, Mode, MlpGrads};
use crate::numerics::{crandn_matrix, derived_rng, mix64, randn, CMat, RMat, RVec};
use crate::rate::{mmse_beamformer, refine, sum_rate, Beamformer, RefinementTrace};

/// Hyperparameters of the two training stages. Defaults are the reference
/// operating point: batch 128, SGD rate 1e-4, 2 encoder + 8 decoder steps per
/// epoch, 5 training / 10 inference ascent steps, alpha ramp step 0.01.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_batch: usize,
    pub lr: f64,
    pub n_en: usize,
    pub n_de: usize,
    pub q_t: usize,
    pub q_i: usize,
    pub eta_ga: f64,
    pub alpha_step: f64,
    pub epochs: usize,
    pub chandec_epochs: usize,
    pub chandec_steps_per_epoch: usize,
    pub chandec_lr: f64,
    /// Write a checkpoint every this many stage-1 epochs (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_batch: 128,
            lr: 1e-4,
            n_en: 2,
            n_de: 8,
            q_t: 5,
            q_i: 10,
            eta_ga: 1e-3,
            alpha_step: 0.01,
            epochs: 300,
            chandec_epochs: 200,
            chandec_steps_per_epoch: 2,
            chandec_lr: 0.02,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || self.eta_ga < 0.0 || self.alpha_step < 0.0 || self.chandec_lr < 0.0 {
            return Err(Error::Config("train: rates must be >= 0".into()));
        }
        if self.n_batch == 0 {
            return Err(Error::Config("train: batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// How the KD weight evolves: the ramp used by the full scheme, or a fixed
/// alpha for the pure-unsupervised (alpha = 1) and pure-supervised (alpha = 0)
/// baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossSchedule {
    KdRamp { step: f64 },
    FixedAlpha { alpha: f64 },
}

impl LossSchedule {
    pub fn alpha_at(&self, epoch: usize) -> f64 {
        match *self {
            LossSchedule::KdRamp { step } => alpha_schedule(epoch, step),
            LossSchedule::FixedAlpha { alpha } => alpha.clamp(0.0, 1.0),
        }
    }
}

/// KD weight after `epoch` whole epochs: `min(1, epoch * step)`.
pub fn alpha_schedule(epoch: usize, step: f64) -> f64 {
    (epoch as f64 * step).min(1.0)
}

/// Blends the two loss terms: `alpha * (-R_sum) + (1 - alpha) * MSE`.
pub fn kd_loss(alpha: f64, r_sum: f64, mse: f64) -> f64 {
    alpha * (-r_sum) + (1.0 - alpha) * mse
}

/// One training/evaluation tuple: true channels in receive-row form (physical
/// for fully digital runs, effective for hybrid runs), their estimates, the
/// latent feedback error, the MMSE teacher for the true channels, and the
/// per-sample analog matrix when one exists.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub h: Vec<CMat>,
    pub h_tilde: Vec<CMat>,
    /// d_latent x K feedback errors.
    pub delta_z: RMat,
    pub teacher: CMat,
    pub analog: Option<CMat>,
    pub sigma2: f64,
}

/// Which front end produces the channels the EDN sees.
#[derive(Debug, Clone)]
pub enum ScenarioKind {
    Digital,
    HybridFarField {
        analog: CMat,
    },
    HybridNearField {
        hybrid: HybridConfig,
        r_center: f64,
        sigma_r: f64,
        r_min: f64,
    },
}

/// Deterministic sample source: every sample comes from a stream derived from
/// `(seed, phase, index)`, so batches are reproducible and parallel
/// generation cannot depend on scheduling.
#[derive(Debug, Clone)]
pub struct SampleGenerator {
    pub system: SystemConfig,
    pub geometry: GeometryScenario,
    pub paths: PathConfig,
    pub noise: NoiseVarianceSet,
    pub sigma2_h: f64,
    pub feedback: FeedbackChannelModel,
    pub d_latent: usize,
    pub kind: ScenarioKind,
    pub seed: u64,
}

impl SampleGenerator {
    /// Columns of the per-user channel the EDN consumes (N, or N_RF in hybrid
    /// scenarios).
    pub fn n_cols(&self) -> usize {
        match &self.kind {
            ScenarioKind::Digital => self.system.n,
            ScenarioKind::HybridFarField { analog } => analog.ncols(),
            ScenarioKind::HybridNearField { hybrid, .. } => hybrid.n_rf,
        }
    }

    pub fn draw(&self, phase: u64, index: u64) -> Result<TrainSample> {
        let mut rng = derived_rng(self.seed, phase, index);
        let p = self.system.p;
        let (h, h_tilde, analog, sigma2) = match &self.kind {
            ScenarioKind::Digital => {
                let s = draw_sample(
                    &self.system,
                    &self.geometry,
                    &self.paths,
                    &self.noise,
                    self.sigma2_h,
                    &mut rng,
                )?;
                let s2 = s.sigma2[0];
                (s.h, s.h_tilde, None, s2)
            }
            ScenarioKind::HybridFarField { analog } => {
                let s = draw_sample(
                    &self.system,
                    &self.geometry,
                    &self.paths,
                    &self.noise,
                    0.0,
                    &mut rng,
                )?;
                let g = effective_channel(&s.h_bar, analog, &s.sigma2)?;
                let (g, g_tilde) = inject_errors(g, self.sigma2_h, &mut rng);
                (g, g_tilde, None, s.sigma2[0])
            }
            ScenarioKind::HybridNearField { hybrid, r_center, sigma_r, r_min } => {
                let scene = draw_nearfield_scene(
                    &self.geometry,
                    self.system.k,
                    *r_center,
                    *sigma_r,
                    *r_min,
                    hybrid,
                    &mut rng,
                )?;
                let s2 = self.noise.draw(&mut rng);
                let g = effective_channel(
                    &scene.rows,
                    &scene.analog,
                    &vec![s2; self.system.k],
                )?;
                let (g, g_tilde) = inject_errors(g, self.sigma2_h, &mut rng);
                (g, g_tilde, Some(scene.analog), s2)
            }
        };
        let teacher = mmse_beamformer(&h, p)?;
        // In hybrid scenarios the teacher is rescaled so the radiated product
        // meets the budget, like everything else the decoder is asked to
        // produce.
        let teacher = match (&self.kind, &analog) {
            (ScenarioKind::HybridFarField { analog }, _) => {
                hybrid_power_normalize(&teacher.w, analog, p)?
            }
            (_, Some(wa)) => hybrid_power_normalize(&teacher.w, wa, p)?,
            _ => teacher.w,
        };
        let s = self.feedback.sigma2_z.sqrt();
        let delta_z = RMat::from_fn(self.d_latent, self.system.k, |_, _| s * randn(&mut rng));
        Ok(TrainSample { h, h_tilde, delta_z, teacher, analog, sigma2 })
    }

    /// Draws an ordered batch; generation parallelizes across samples with
    /// one derived stream each.
    pub fn batch(&self, phase: u64, n: usize) -> Result<Vec<TrainSample>> {
        (0..n as u64)
            .into_par_iter()
            .map(|i| self.draw(phase, i))
            .collect()
    }
}

fn inject_errors(
    g: Vec<CMat>,
    sigma2_h: f64,
    rng: &mut crate::numerics::RngStream,
) -> (Vec<CMat>, Vec<CMat>) {
    let g_tilde = g
        .iter()
        .map(|gk| {
            if sigma2_h == 0.0 {
                gk.clone()
            } else {
                gk + crandn_matrix(rng, gk.nrows(), gk.ncols(), sigma2_h)
            }
        })
        .collect();
    (g, g_tilde)
}

// Stream phases keep the independent random uses of one (epoch, step) apart.
const PHASE_DATA: u64 = 1;
const PHASE_DROPOUT: u64 = 2;
const PHASE_CHANDEC: u64 = 3;
const PHASE_EVAL: u64 = 4;

pub fn data_phase(epoch: u64, step: u64) -> u64 {
    mix64(PHASE_DATA, mix64(epoch, step))
}

pub fn dropout_phase(epoch: u64, step: u64) -> u64 {
    mix64(PHASE_DROPOUT, mix64(epoch, step))
}

pub fn chandec_phase(epoch: u64, step: u64) -> u64 {
    mix64(PHASE_CHANDEC, mix64(epoch, step))
}

pub fn eval_phase(tag: u64) -> u64 {
    mix64(PHASE_EVAL, tag)
}

/// Epoch-level running means emitted as the training metrics stream.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub alpha: f64,
    pub mean_lu: f64,
    pub mean_ls: f64,
    pub mean_rate: f64,
}

/// Mean gradients and losses over one batch. Per-sample work runs in
/// parallel; the reduction order is fixed by sample index so results are
/// bit-identical at any worker count.
pub struct BatchGradients {
    pub enc: MlpGrads,
    pub dec: MlpGrads,
    pub mean_lu: f64,
    pub mean_ls: f64,
    pub mean_rate: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn batch_gradients(
    nets: &EdnNets,
    samples: &[TrainSample],
    alpha: f64,
    power: f64,
    q_t: usize,
    eta_ga: f64,
    mode: Mode,
    seed: u64,
    dropout_phase: u64,
) -> Result<BatchGradients> {
    // Fixed-size chunks keep the floating-point summation order independent
    // of the worker count, so results are bit-identical in parallel and
    // single-threaded runs.
    const CHUNK: usize = 16;
    let chunk_sums: Vec<(MlpGrads, MlpGrads, f64, f64)> = samples
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut enc = MlpGrads::zeros_like(&nets.encoder);
            let mut dec = MlpGrads::zeros_like(&nets.beam_decoder);
            let mut rate = 0.0;
            let mut ls = 0.0;
            for (j, sample) in chunk.iter().enumerate() {
                let i = ci * CHUNK + j;
                let mut rng = derived_rng(seed, dropout_phase, i as u64);
                let inter =
                    forward_pipeline(nets, sample, power, q_t, eta_ga, mode, Some(&mut rng))?;
                let (enc_g, dec_g) = backward_pipeline(nets, sample, &inter, alpha, power)?;
                enc.add_scaled(&enc_g, 1.0);
                dec.add_scaled(&dec_g, 1.0);
                rate += inter.r_sum;
                ls += inter.l_sup;
            }
            Ok((enc, dec, rate, ls))
        })
        .collect::<Result<_>>()?;

    let n = samples.len() as f64;
    let mut enc = MlpGrads::zeros_like(&nets.encoder);
    let mut dec = MlpGrads::zeros_like(&nets.beam_decoder);
    let mut mean_rate = 0.0;
    let mut mean_ls = 0.0;
    for (enc_g, dec_g, r, ls) in &chunk_sums {
        enc.add_scaled(enc_g, 1.0 / n);
        dec.add_scaled(dec_g, 1.0 / n);
        mean_rate += r / n;
        mean_ls += ls / n;
    }
    Ok(BatchGradients { enc, dec, mean_lu: -mean_rate, mean_ls, mean_rate })
}

/// One alternating epoch: `n_en` encoder-only SGD steps, then `n_de`
/// decoder-only steps, each on a fresh batch. Returns means over all step
/// batches of the epoch.
pub fn train_epoch(
    nets: &mut EdnNets,
    gen: &SampleGenerator,
    cfg: &TrainConfig,
    alpha: f64,
    epoch: usize,
) -> Result<EpochMetrics> {
    let steps = cfg.n_en + cfg.n_de;
    let mut mean = EpochMetrics { epoch, alpha, mean_lu: 0.0, mean_ls: 0.0, mean_rate: 0.0 };
    for step in 0..steps {
        let batch = gen.batch(data_phase(epoch as u64, step as u64), cfg.n_batch)?;
        let grads = batch_gradients(
            nets,
            &batch,
            alpha,
            gen.system.p,
            cfg.q_t,
            cfg.eta_ga,
            Mode::Train,
            gen.seed,
            dropout_phase(epoch as u64, step as u64),
        )?;
        let loss = kd_loss(alpha, grads.mean_rate, grads.mean_ls);
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "train_epoch: non-finite loss at epoch {epoch} step {step} \
                 (mean rate {}, mean mse {})",
                grads.mean_rate, grads.mean_ls
            )));
        }
        if step < cfg.n_en {
            nets.encoder.sgd_step(&grads.enc, cfg.lr);
        } else {
            nets.beam_decoder.sgd_step(&grads.dec, cfg.lr);
        }
        mean.mean_lu += grads.mean_lu / steps as f64;
        mean.mean_ls += grads.mean_ls / steps as f64;
        mean.mean_rate += grads.mean_rate / steps as f64;
    }
    Ok(mean)
}

/// Stage 2: supervised channel-decoder training against the true normalized
/// channels, with the encoder frozen. Returns the per-step loss curve (the
/// per-sample loss summed over users, averaged over the batch).
pub fn train_channel_decoder(
    nets: &mut EdnNets,
    gen: &SampleGenerator,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let dims = nets.dims;
    let mut curve = Vec::new();
    for epoch in 0..cfg.chandec_epochs {
        for step in 0..cfg.chandec_steps_per_epoch {
            let phase = chandec_phase(epoch as u64, step as u64);
            let batch = gen.batch(phase, cfg.n_batch)?;
            let items = cfg.n_batch * dims.k;
            // inputs: recovered latents; targets: realified true channels
            let mut x = RMat::zeros(2 * dims.m * dims.n_cols, items);
            let mut target = RMat::zeros(2 * dims.m * dims.n_cols, items);
            for (j, s) in batch.iter().enumerate() {
                for k in 0..dims.k {
                    let col = j * dims.k + k;
                    x.set_column(col, &crate::numerics::realify(&s.h_tilde[k]));
                    target.set_column(col, &crate::numerics::realify(&s.h[k]));
                }
            }
            let z = nets.encoder.forward_eval(&x)?;
            let mut z_hat = z;
            for (j, s) in batch.iter().enumerate() {
                for k in 0..dims.k {
                    let mut col = z_hat.column_mut(j * dims.k + k);
                    col += s.delta_z.column(k);
                }
            }
            let tape = nets.chan_decoder.forward_tape(&z_hat, Mode::Train, None)?;
            let diff = tape.output() - &target;
            // loss in the sum-over-users, mean-over-batch convention
            let loss = diff.norm_squared() / cfg.n_batch as f64;
            if !loss.is_finite() {
                return Err(Error::numeric("train_channel_decoder: non-finite loss"));
            }
            curve.push(loss);
            let upstream = diff.map(|v| 2.0 * v / cfg.n_batch as f64);
            let (grads, _) = nets.chan_decoder.backward(&tape, &upstream)?;
            nets.chan_decoder.sgd_step(&grads, cfg.chandec_lr);
        }
    }
    Ok(curve)
}

/// A fully trained model; constructing one requires running both training
/// stages (or loading a checkpoint), so inference cannot run on untrained
/// parameters by construction.
#[derive(Debug, Clone)]
pub struct TrainedEdn {
    pub nets: EdnNets,
    pub power: f64,
}

/// Inference-time knobs.
#[derive(Debug, Clone)]
pub struct InferenceOptions {
    pub q_i: usize,
    pub eta_ga: f64,
    pub feedback: FeedbackChannelModel,
    /// Re-projects refinement iterates onto the power ball (off by default,
    /// matching the plain ascent; post-refinement norms are reported either
    /// way).
    pub project: bool,
    /// Diagnostic: bypass the channel decoder and refine on the estimated
    /// channel itself.
    pub oracle_channel: bool,
}

/// Everything inference produces for one sample.
#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub w0: CMat,
    pub w_final: CMat,
    pub h_hat: Vec<CMat>,
    pub trace: RefinementTrace,
}

impl TrainedEdn {
    /// The deployed path: encode each user's estimate, push the latents
    /// through the feedback channel, decode the initial beamformer and the
    /// reconstructed channels, then run `q_i` ascent steps on the
    /// reconstruction.
    pub fn infer(
        &self,
        h_tilde: &[CMat],
        analog: Option<&CMat>,
        opts: &InferenceOptions,
        rng: &mut crate::numerics::RngStream,
    ) -> Result<InferenceOutput> {
        let dims = self.nets.dims;
        if h_tilde.len() != dims.k {
            return Err(Error::invalid("infer: wrong user count"));
        }
        let mut z_hat_all = RVec::zeros(dims.k * dims.d_latent);
        let mut h_hat = Vec::with_capacity(dims.k);
        for (k, ht) in h_tilde.iter().enumerate() {
            let z = self.nets.encode(ht)?;
            let z_hat = apply_feedback_error(&z, &opts.feedback, rng)?;
            if z_hat.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("infer: non-finite latent"));
            }
            z_hat_all
                .rows_mut(k * dims.d_latent, dims.d_latent)
                .copy_from(&z_hat);
            h_hat.push(if opts.oracle_channel {
                ht.clone()
            } else {
                self.nets.decode_channel(&z_hat)?
            });
        }
        let w0 = self.nets.decode_beamformer(&z_hat_all, self.power, analog)?;
        let trace = refine(
            &Beamformer::new(w0.clone(), self.power)?,
            &h_hat,
            opts.eta_ga,
            opts.q_i,
            opts.project,
        )?;
        Ok(InferenceOutput { w0, w_final: trace.final_beamformer().clone(), h_hat, trace })
    }
}

/// Outputs of the full two-stage run. Wall times live apart from the metrics
/// so the metrics stream stays byte-reproducible.
pub struct TrainOutputs {
    pub model: TrainedEdn,
    pub stage1: Vec<EpochMetrics>,
    pub stage1_seconds: Vec<f64>,
    pub chandec_curve: Vec<f64>,
    pub chandec_seconds: f64,
}

/// Runs both stages: the alternating KD-trained encoder/beamformer-decoder
/// stage over `cfg.epochs` epochs, then the supervised channel-decoder stage.
pub fn run_algorithm(
    nets: EdnNets,
    gen: &SampleGenerator,
    cfg: &TrainConfig,
    schedule: LossSchedule,
) -> Result<TrainOutputs> {
    run_algorithm_with(nets, gen, cfg, schedule, |_, _, _| Ok(()))
}

/// [`run_algorithm`] with a per-epoch hook (periodic checkpoints, progress
/// logging).
pub fn run_algorithm_with(
    mut nets: EdnNets,
    gen: &SampleGenerator,
    cfg: &TrainConfig,
    schedule: LossSchedule,
    mut on_epoch: impl FnMut(usize, &EdnNets, &EpochMetrics) -> Result<()>,
) -> Result<TrainOutputs> {
    cfg.validate()?;
    let mut stage1 = Vec::with_capacity(cfg.epochs);
    let mut stage1_seconds = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let t0 = std::time::Instant::now();
        let alpha = schedule.alpha_at(epoch);
        let metrics = train_epoch(&mut nets, gen, cfg, alpha, epoch)?;
        stage1_seconds.push(t0.elapsed().as_secs_f64());
        on_epoch(epoch, &nets, &metrics)?;
        stage1.push(metrics);
    }
    let t0 = std::time::Instant::now();
    let chandec_curve = train_channel_decoder(&mut nets, gen, cfg)?;
    Ok(TrainOutputs {
        model: TrainedEdn { nets, power: gen.system.p },
        stage1,
        stage1_seconds,
        chandec_curve,
        chandec_seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Mean sum rate of the deployed path over freshly drawn samples, reported
/// with the true channels.
pub fn mean_inference_rate(
    model: &TrainedEdn,
    gen: &SampleGenerator,
    opts: &InferenceOptions,
    n_samples: usize,
    tag: u64,
) -> Result<f64> {
    let samples = gen.batch(eval_phase(tag), n_samples)?;
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let mut rng = derived_rng(gen.seed, eval_phase(mix64(tag, 77)), i as u64);
        let out = model.infer(&s.h_tilde, s.analog.as_ref(), opts, &mut rng)?;
        total += sum_rate(&s.h, &out.w_final)?;
    }
    Ok(total / n_samples as f64)
}
