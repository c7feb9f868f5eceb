//! The per-sample forward/backward pass that stage-1 training differentiates:
//! encode every user's channel estimate, add the feedback error, decode and
//! power-normalize the initial beamformer, refine it on the true channel, and
//! score the KD loss at the final iterate.

use crate::error::{Error, Result};
use crate::nets::{EdnNets, Mode, MlpGrads, NormalizationLayer, Tape};
use crate::numerics::{realify, CMat, RMat, RVec, RngStream};
use crate::rate::unrolled::unrolled_pullback;
use crate::rate::{grad_sum_rate, refine, sum_rate, Beamformer, RefinementTrace};
use crate::training::TrainSample;

/// Everything the backward pass needs from one forward evaluation.
pub struct PipelineIntermediates {
    pub enc_tape: Tape,
    pub dec_tape: Tape,
    /// Raw (pre-normalization) decoder output.
    pub raw: RVec,
    pub norm: NormalizationLayer,
    pub trace: RefinementTrace,
    /// Sum rate of the final iterate on the true channels.
    pub r_sum: f64,
    /// Squared Frobenius distance of the final iterate to the teacher.
    pub l_sup: f64,
}

impl PipelineIntermediates {
    pub fn w0(&self) -> &CMat {
        &self.trace.iterates[0]
    }
}

/// Forward pass for one sample. `Mode::Train` activates decoder dropout
/// (masks drawn from `rng` and frozen on the tape so the backward pass
/// differentiates the same stochastic function).
pub fn forward_pipeline(
    nets: &EdnNets,
    sample: &TrainSample,
    power: f64,
    q_t: usize,
    eta_ga: f64,
    mode: Mode,
    rng: Option<&mut RngStream>,
) -> Result<PipelineIntermediates> {
    let dims = nets.dims;
    if sample.h.len() != dims.k {
        return Err(Error::invalid("pipeline: wrong user count"));
    }
    // Encoder over all K users at once (columns are users).
    let mut x = RMat::zeros(dims.channel_real_dim(), dims.k);
    for (k, ht) in sample.h_tilde.iter().enumerate() {
        x.set_column(k, &realify(ht));
    }
    let enc_tape = nets.encoder.forward_tape_frozen(&x, mode, None)?;
    // Recovered latents: encoder output plus the sample's feedback error.
    let z_hat = enc_tape.output() + &sample.delta_z;
    let dec_in = RMat::from_column_slice(dims.k * dims.d_latent, 1, z_hat.as_slice());
    let dec_tape = nets.beam_decoder.forward_tape_frozen(&dec_in, mode, rng)?;
    let raw = RVec::from_column_slice(dec_tape.output().as_slice());
    let norm = nets.norm.resolve(sample.analog.as_ref())?;
    let (_, w0) = norm.forward(&raw, power, dims.n_bf, dims.k * dims.m)?;
    // Refinement on the TRUE channels during training.
    let trace = refine(&Beamformer::new(w0, power)?, &sample.h, eta_ga, q_t, false)?;
    let w_final = trace.final_beamformer();
    let r_sum = sum_rate(&sample.h, w_final)?;
    let l_sup = (w_final - &sample.teacher).norm_squared();
    Ok(PipelineIntermediates { enc_tape, dec_tape, raw, norm, trace, r_sum, l_sup })
}

/// Backward pass: combines the KD endpoint gradient at `W_Q`, pulls it back
/// through the unrolled ascent, the normalization layer, the decoder, and the
/// shared encoder. Returns (encoder grads, decoder grads).
pub fn backward_pipeline(
    nets: &EdnNets,
    sample: &TrainSample,
    inter: &PipelineIntermediates,
    alpha: f64,
    power: f64,
) -> Result<(MlpGrads, MlpGrads)> {
    let dims = nets.dims;
    let w_final = inter.trace.final_beamformer();
    // gamma_Q = -alpha grad R + (1 - alpha) * 2 (W_Q - teacher)
    let grad_rate = grad_sum_rate(&sample.h, w_final)?;
    let gamma_q = grad_rate.map(|z| z * (-alpha))
        + (w_final - &sample.teacher).map(|z| z * (2.0 * (1.0 - alpha)));
    let gamma_0 = unrolled_pullback(&sample.h, &inter.trace, &gamma_q)?;
    // Real-parameter gradient of the reshaped beamformer, then through the
    // normalization layer's Jacobian.
    let g_w = realify(&gamma_0);
    let g_raw = inter
        .norm
        .backward(&inter.raw, power, dims.n_bf, dims.k * dims.m, &g_w)?;
    let upstream = RMat::from_column_slice(g_raw.len(), 1, g_raw.as_slice());
    let (dec_grads, g_dec_in) = nets.beam_decoder.backward(&inter.dec_tape, &upstream)?;
    // Scatter the decoder-input gradient back to per-user latent columns; the
    // feedback error enters additively so the Jacobian is the identity.
    let g_z = RMat::from_column_slice(dims.d_latent, dims.k, g_dec_in.as_slice());
    let (enc_grads, _) = nets.encoder.backward(&inter.enc_tape, &g_z)?;
    Ok((enc_grads, dec_grads))
}
