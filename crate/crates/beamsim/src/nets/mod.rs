//! The three fully-connected subnetworks (encoder, beamformer decoder,
//! channel decoder), their manual backpropagation, and the power
//! normalization layer that turns decoder output into a feasible beamformer.
//!
//! Forward passes are batched: inputs are `in_dim x batch` matrices. Training
//! forwards record a tape; [`Mlp::backward`] consumes it and returns parameter
//! gradients plus the gradient with respect to the input batch. Dropout is
//! inverted (activations scaled by `1/(1-p)` during training) so inference
//! needs no rescaling, and batch normalization carries running statistics for
//! deterministic eval-mode forwards.

pub mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{all_finite_real, complexify, realify, CMat, RMat, RVec, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    LeakyRelu { slope: f64 },
    Tanh,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::Identity => x,
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the activation input and output.
    fn derivative(&self, input: f64, output: f64) -> f64 {
        match *self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu { slope } => {
                if input >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => 1.0 - output * output,
        }
    }
}

/// One layer: `x -> dropout(act(batchnorm(W x + b)))`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub batchnorm: bool,
    pub dropout: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MlpSpec {
    pub layers: Vec<LayerSpec>,
}

impl MlpSpec {
    /// Chains `dims = [in, h1, ..., out]` into hidden layers with the given
    /// activation and a final layer with `head` activation.
    pub fn chain(
        dims: &[usize],
        hidden: Activation,
        head: Activation,
        batchnorm_hidden: bool,
        dropout_hidden: f64,
    ) -> Self {
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let last = i == dims.len() - 2;
            layers.push(LayerSpec {
                in_dim: dims[i],
                out_dim: dims[i + 1],
                activation: if last { head } else { hidden },
                batchnorm: batchnorm_hidden && !last,
                dropout: if last { 0.0 } else { dropout_hidden },
            });
        }
        MlpSpec { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("mlp: no layers"));
        }
        for w in self.layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::invalid("mlp: layer dimensions do not chain"));
            }
        }
        if self.layers.iter().any(|l| !(0.0..1.0).contains(&l.dropout)) {
            return Err(Error::invalid("mlp: dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Running statistics of a batch-normalization layer (no learnable affine).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub running_mean: RVec,
    pub running_var: RVec,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    fn new(dim: usize) -> Self {
        Self {
            running_mean: RVec::zeros(dim),
            running_var: RVec::from_element(dim, 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub weight: RMat,
    pub bias: RVec,
    pub batchnorm: Option<BatchNorm>,
    pub activation: Activation,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct BnCache {
    xhat: RMat,
    inv_std: RVec,
    batch_stats: bool,
}

struct LayerTape {
    input: RMat,
    bn: Option<BnCache>,
    act_in: RMat,
    act_out: RMat,
    mask: Option<RMat>,
}

/// Recorded activations of one forward pass; consumed by [`Mlp::backward`].
pub struct Tape {
    layers: Vec<LayerTape>,
    output: RMat,
}

impl Tape {
    pub fn output(&self) -> &RMat {
        &self.output
    }
}

/// Per-layer parameter gradients, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<RMat>,
    pub biases: Vec<RVec>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            weights: mlp
                .layers
                .iter()
                .map(|l| RMat::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
            biases: mlp.layers.iter().map(|l| RVec::zeros(l.bias.len())).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.zip_apply(b, |x, y| *x += scale * y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.zip_apply(b, |x, y| *x += scale * y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }
}

impl Mlp {
    /// He-style uniform init for LeakyReLU layers, Xavier-style for Tanh and
    /// identity heads; zero biases.
    pub fn init(spec: &MlpSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layers
            .iter()
            .map(|ls| {
                let limit = match ls.activation {
                    Activation::LeakyRelu { .. } => (6.0 / ls.in_dim as f64).sqrt(),
                    _ => (6.0 / (ls.in_dim + ls.out_dim) as f64).sqrt(),
                };
                Layer {
                    weight: RMat::from_fn(ls.out_dim, ls.in_dim, |_, _| {
                        rng.random_range(-limit..limit)
                    }),
                    bias: RVec::zeros(ls.out_dim),
                    batchnorm: ls.batchnorm.then(|| BatchNorm::new(ls.out_dim)),
                    activation: ls.activation,
                    dropout: ls.dropout,
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn spec(&self) -> MlpSpec {
        MlpSpec {
            layers: self
                .layers
                .iter()
                .map(|l| LayerSpec {
                    in_dim: l.weight.ncols(),
                    out_dim: l.weight.nrows(),
                    activation: l.activation,
                    batchnorm: l.batchnorm.is_some(),
                    dropout: l.dropout,
                })
                .collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    /// Deterministic inference forward (no dropout, running batchnorm stats).
    pub fn forward_eval(&self, x: &RMat) -> Result<RMat> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = &layer.weight * &cur;
            for mut col in cur.column_iter_mut() {
                col += &layer.bias;
            }
            if let Some(bn) = &layer.batchnorm {
                for f in 0..cur.nrows() {
                    let inv = 1.0 / (bn.running_var[f] + bn.eps).sqrt();
                    for c in 0..cur.ncols() {
                        cur[(f, c)] = (cur[(f, c)] - bn.running_mean[f]) * inv;
                    }
                }
            }
            cur.iter_mut().for_each(|v| *v = layer.activation.apply(*v));
        }
        if !all_finite_real(&cur) {
            return Err(Error::numeric("mlp: non-finite forward output"));
        }
        Ok(cur)
    }

    fn forward_tape_impl(
        layers: &[Layer],
        x: &RMat,
        mode: Mode,
        rng: Option<&mut RngStream>,
    ) -> Result<(Tape, Vec<Option<(RVec, RVec)>>)> {
        let batch = x.ncols();
        let mut rng = rng;
        let mut tapes = Vec::with_capacity(layers.len());
        let mut batch_stats = Vec::with_capacity(layers.len());
        let mut cur = x.clone();
        for layer in layers {
            let input = cur;
            let mut z = &layer.weight * &input;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            let mut stats = None;
            let bn_cache = match &layer.batchnorm {
                None => None,
                Some(bn) => {
                    let dim = z.nrows();
                    let mut xhat = RMat::zeros(dim, batch);
                    let mut inv_std = RVec::zeros(dim);
                    if mode == Mode::Train {
                        if batch < 2 {
                            return Err(Error::invalid(
                                "mlp: training-mode batchnorm needs batch >= 2",
                            ));
                        }
                        let mut means = RVec::zeros(dim);
                        let mut vars = RVec::zeros(dim);
                        for f in 0..dim {
                            let row = z.row(f);
                            let mean = row.sum() / batch as f64;
                            let var =
                                row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                                    / batch as f64;
                            let inv = 1.0 / (var + bn.eps).sqrt();
                            inv_std[f] = inv;
                            for c in 0..batch {
                                xhat[(f, c)] = (z[(f, c)] - mean) * inv;
                            }
                            means[f] = mean;
                            vars[f] = var;
                        }
                        stats = Some((means, vars));
                    } else {
                        for f in 0..dim {
                            let inv = 1.0 / (bn.running_var[f] + bn.eps).sqrt();
                            inv_std[f] = inv;
                            for c in 0..batch {
                                xhat[(f, c)] = (z[(f, c)] - bn.running_mean[f]) * inv;
                            }
                        }
                    }
                    Some(BnCache { xhat, inv_std, batch_stats: mode == Mode::Train })
                }
            };
            batch_stats.push(stats);
            let act_in = match &bn_cache {
                Some(c) => c.xhat.clone(),
                None => z,
            };
            let act_out = act_in.map(|v| layer.activation.apply(v));
            let (mask, dropped) = if mode == Mode::Train && layer.dropout > 0.0 {
                let rng = rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::invalid("mlp: training forward needs an rng"))?;
                let keep = 1.0 - layer.dropout;
                let mask = RMat::from_fn(act_out.nrows(), act_out.ncols(), |_, _| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let dropped = act_out.component_mul(&mask);
                (Some(mask), dropped)
            } else {
                (None, act_out.clone())
            };
            cur = dropped;
            tapes.push(LayerTape { input, bn: bn_cache, act_in, act_out, mask });
        }
        if !all_finite_real(&cur) {
            return Err(Error::numeric("mlp: non-finite forward output"));
        }
        Ok((Tape { layers: tapes, output: cur }, batch_stats))
    }

    /// Forward pass that records a tape for [`Mlp::backward`]. `Mode::Train`
    /// uses batch statistics (updating the running ones) and samples dropout
    /// masks from `rng`; `Mode::Eval` is the deterministic inference path.
    pub fn forward_tape(
        &mut self,
        x: &RMat,
        mode: Mode,
        rng: Option<&mut RngStream>,
    ) -> Result<Tape> {
        let (tape, batch_stats) = Self::forward_tape_impl(&self.layers, x, mode, rng)?;
        for (layer, stats) in self.layers.iter_mut().zip(batch_stats) {
            if let (Some(bn), Some((means, vars))) = (&mut layer.batchnorm, stats) {
                for f in 0..means.len() {
                    bn.running_mean[f] =
                        (1.0 - bn.momentum) * bn.running_mean[f] + bn.momentum * means[f];
                    bn.running_var[f] =
                        (1.0 - bn.momentum) * bn.running_var[f] + bn.momentum * vars[f];
                }
            }
        }
        Ok(tape)
    }

    /// Like [`Mlp::forward_tape`] but without the running-statistics side
    /// effect, so shared references can run concurrent forwards. Intended for
    /// networks without train-mode batchnorm (the encoder and beamformer
    /// decoder).
    pub fn forward_tape_frozen(
        &self,
        x: &RMat,
        mode: Mode,
        rng: Option<&mut RngStream>,
    ) -> Result<Tape> {
        Ok(Self::forward_tape_impl(&self.layers, x, mode, rng)?.0)
    }

    /// Backpropagates `upstream` (gradient of a scalar loss w.r.t. the
    /// forward output, same shape) through a recorded tape. Returns parameter
    /// gradients summed over the batch and the gradient w.r.t. the input.
    pub fn backward(&self, tape: &Tape, upstream: &RMat) -> Result<(MlpGrads, RMat)> {
        if tape.layers.len() != self.layers.len() {
            return Err(Error::invalid("mlp: tape does not match network"));
        }
        if upstream.shape() != tape.output.shape() {
            return Err(Error::invalid("mlp: upstream gradient shape mismatch"));
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut g = upstream.clone();
        for (idx, (layer, lt)) in self.layers.iter().zip(&tape.layers).enumerate().rev() {
            if let Some(mask) = &lt.mask {
                g.component_mul_assign(mask);
            }
            // activation
            for r in 0..g.nrows() {
                for c in 0..g.ncols() {
                    g[(r, c)] *=
                        layer.activation.derivative(lt.act_in[(r, c)], lt.act_out[(r, c)]);
                }
            }
            // batchnorm
            if let Some(bn) = &lt.bn {
                let batch = g.ncols() as f64;
                if bn.batch_stats {
                    let mut gz = RMat::zeros(g.nrows(), g.ncols());
                    for f in 0..g.nrows() {
                        let grow = g.row(f);
                        let xrow = bn.xhat.row(f);
                        let mean_g = grow.sum() / batch;
                        let mean_gx = grow
                            .iter()
                            .zip(xrow.iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / batch;
                        for c in 0..g.ncols() {
                            gz[(f, c)] = bn.inv_std[f]
                                * (g[(f, c)] - mean_g - bn.xhat[(f, c)] * mean_gx);
                        }
                    }
                    g = gz;
                } else {
                    for f in 0..g.nrows() {
                        for c in 0..g.ncols() {
                            g[(f, c)] *= bn.inv_std[f];
                        }
                    }
                }
            }
            // linear: dW = g x^T, db = row sums of g, dx = W^T g
            grads.weights[idx] = &g * lt.input.transpose();
            grads.biases[idx] = RVec::from_fn(g.nrows(), |r, _| g.row(r).sum());
            g = layer.weight.tr_mul(&g);
        }
        Ok((grads, g))
    }

    /// Plain SGD update `param -= lr * grad`.
    pub fn sgd_step(&mut self, grads: &MlpGrads, lr: f64) {
        for (layer, (gw, gb)) in self
            .layers
            .iter_mut()
            .zip(grads.weights.iter().zip(&grads.biases))
        {
            layer.weight.zip_apply(gw, |x, g| *x -= lr * g);
            layer.bias.zip_apply(gb, |x, g| *x -= lr * g);
        }
    }
}

// --- power normalization ----------------------------------------------------

/// Final layer of the beamformer decoder: scales the raw real output vector
/// onto the power budget. Digital mode scales by the output's own norm; hybrid
/// mode scales by the norm of the analog-digital product so the radiated
/// power meets the budget.
#[derive(Debug, Clone)]
pub enum NormalizationLayer {
    Digital,
    Hybrid {
        analog: CMat,
        /// Cached `analog^H analog`.
        gram: CMat,
    },
}

impl NormalizationLayer {
    pub fn digital() -> Self {
        NormalizationLayer::Digital
    }

    pub fn hybrid(analog: CMat) -> Self {
        let gram = analog.adjoint() * &analog;
        NormalizationLayer::Hybrid { analog, gram }
    }

    fn norm_for(&self, raw: &RVec, rows: usize, cols: usize) -> Result<f64> {
        let norm = match self {
            NormalizationLayer::Digital => raw.norm(),
            NormalizationLayer::Hybrid { analog, .. } => {
                let wt = complexify(raw, rows, cols)?;
                (analog * wt).norm()
            }
        };
        if norm < 1e-300 {
            return Err(Error::DegenerateOutput(
                "normalization layer: zero pre-normalization output".into(),
            ));
        }
        Ok(norm)
    }

    /// Scales `raw` (length `2 * rows * cols`) onto the budget and reshapes
    /// it into the complex `rows x cols` beamformer.
    pub fn forward(&self, raw: &RVec, power: f64, rows: usize, cols: usize) -> Result<(RVec, CMat)> {
        let norm = self.norm_for(raw, rows, cols)?;
        let scale = power.sqrt() / norm;
        let w_real = raw * scale;
        let w0 = complexify(&w_real, rows, cols)?;
        Ok((w_real, w0))
    }

    /// Pulls the gradient w.r.t. the normalized output back to the raw
    /// vector: `J^T g` with `J = sqrt(P) (I/n - u grad_n^T / n^2)`.
    pub fn backward(
        &self,
        raw: &RVec,
        power: f64,
        rows: usize,
        cols: usize,
        g_out: &RVec,
    ) -> Result<RVec> {
        let norm = self.norm_for(raw, rows, cols)?;
        let grad_norm = match self {
            NormalizationLayer::Digital => raw / norm,
            NormalizationLayer::Hybrid { gram, .. } => {
                let wt = complexify(raw, rows, cols)?;
                realify(&(gram * wt)) / norm
            }
        };
        let scale = power.sqrt();
        let coupling = raw.dot(g_out) / (norm * norm);
        Ok((g_out / norm - grad_norm * coupling) * scale)
    }
}

// --- the three subnetworks --------------------------------------------------

/// Shapes shared by the subnetworks: per-user channel is `m x n_cols`
/// (columns are BS antennas or RF chains), the beamformer is
/// `n_bf x (k * m)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdnDims {
    pub k: usize,
    pub m: usize,
    pub n_cols: usize,
    pub n_bf: usize,
    pub d_latent: usize,
}

impl EdnDims {
    pub fn channel_real_dim(&self) -> usize {
        2 * self.m * self.n_cols
    }

    pub fn beamformer_real_dim(&self) -> usize {
        2 * self.n_bf * self.k * self.m
    }
}

/// Hidden widths and regularization knobs; the per-network layer stacks are
/// derived from these plus [`EdnDims`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdnConfig {
    pub enc_hidden: Vec<usize>,
    pub beamdec_hidden: Vec<usize>,
    pub chandec_hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub dropout: f64,
}

impl Default for EdnConfig {
    fn default() -> Self {
        Self {
            enc_hidden: vec![512, 256],
            beamdec_hidden: vec![1024, 1024],
            chandec_hidden: vec![256, 512],
            leaky_slope: 0.01,
            dropout: 0.2,
        }
    }
}

impl EdnConfig {
    pub fn encoder_spec(&self, dims: &EdnDims) -> MlpSpec {
        let mut d = vec![dims.channel_real_dim()];
        d.extend_from_slice(&self.enc_hidden);
        d.push(dims.d_latent);
        MlpSpec::chain(
            &d,
            Activation::LeakyRelu { slope: self.leaky_slope },
            Activation::Tanh,
            false,
            0.0,
        )
    }

    pub fn beam_decoder_spec(&self, dims: &EdnDims) -> MlpSpec {
        let mut d = vec![dims.k * dims.d_latent];
        d.extend_from_slice(&self.beamdec_hidden);
        d.push(dims.beamformer_real_dim());
        MlpSpec::chain(
            &d,
            Activation::LeakyRelu { slope: self.leaky_slope },
            Activation::Identity,
            false,
            self.dropout,
        )
    }

    pub fn chan_decoder_spec(&self, dims: &EdnDims) -> MlpSpec {
        let mut d = vec![dims.d_latent];
        d.extend_from_slice(&self.chandec_hidden);
        d.push(dims.channel_real_dim());
        MlpSpec::chain(
            &d,
            Activation::LeakyRelu { slope: self.leaky_slope },
            Activation::Identity,
            true,
            0.0,
        )
    }
}

/// How the beamformer decoder's normalization layer finds its analog matrix.
/// Fully digital systems scale by the output norm; far-field hybrid systems
/// share one pre-determined analog matrix; near-field hybrid systems focus a
/// fresh analog matrix per channel sample, supplied alongside the sample.
#[derive(Debug, Clone)]
pub enum NormMode {
    Digital,
    HybridFixed(NormalizationLayer),
    HybridPerSample,
}

impl NormMode {
    pub fn hybrid_fixed(analog: CMat) -> Self {
        NormMode::HybridFixed(NormalizationLayer::hybrid(analog))
    }

    /// Resolves the layer for one sample.
    pub fn resolve(&self, sample_analog: Option<&CMat>) -> Result<NormalizationLayer> {
        match self {
            NormMode::Digital => Ok(NormalizationLayer::Digital),
            NormMode::HybridFixed(layer) => Ok(layer.clone()),
            NormMode::HybridPerSample => sample_analog
                .map(|a| NormalizationLayer::hybrid(a.clone()))
                .ok_or_else(|| {
                    Error::invalid("normalization: per-sample analog matrix missing")
                }),
        }
    }
}

/// The full encoder-decoder network bundle.
#[derive(Debug, Clone)]
pub struct EdnNets {
    pub encoder: Mlp,
    pub beam_decoder: Mlp,
    pub chan_decoder: Mlp,
    pub norm: NormMode,
    pub dims: EdnDims,
}

impl EdnNets {
    pub fn init(
        dims: EdnDims,
        cfg: &EdnConfig,
        norm: NormMode,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(Self {
            encoder: Mlp::init(&cfg.encoder_spec(&dims), rng)?,
            beam_decoder: Mlp::init(&cfg.beam_decoder_spec(&dims), rng)?,
            chan_decoder: Mlp::init(&cfg.chan_decoder_spec(&dims), rng)?,
            norm,
            dims,
        })
    }

    /// Encoder forward for one user channel estimate; output entries lie in
    /// `[-1, 1]` (Tanh head).
    pub fn encode(&self, h_tilde_k: &CMat) -> Result<RVec> {
        if (h_tilde_k.nrows(), h_tilde_k.ncols()) != (self.dims.m, self.dims.n_cols) {
            return Err(Error::invalid("encode: channel shape mismatch"));
        }
        let x = RMat::from_column_slice(
            self.dims.channel_real_dim(),
            1,
            realify(h_tilde_k).as_slice(),
        );
        Ok(RVec::from_column_slice(self.encoder.forward_eval(&x)?.as_slice()))
    }

    /// Channel decoder forward: recovered latent to reconstructed `m x n_cols`
    /// channel.
    pub fn decode_channel(&self, z_hat_k: &RVec) -> Result<CMat> {
        if z_hat_k.len() != self.dims.d_latent {
            return Err(Error::invalid("decode_channel: latent length mismatch"));
        }
        let x = RMat::from_column_slice(self.dims.d_latent, 1, z_hat_k.as_slice());
        let y = self.chan_decoder.forward_eval(&x)?;
        complexify(
            &RVec::from_column_slice(y.as_slice()),
            self.dims.m,
            self.dims.n_cols,
        )
    }

    /// Beamformer decoder forward (inference mode): concatenated latents to a
    /// power-feasible beamformer. `analog` is required only in per-sample
    /// hybrid mode.
    pub fn decode_beamformer(
        &self,
        z_hat_all: &RVec,
        power: f64,
        analog: Option<&CMat>,
    ) -> Result<CMat> {
        if z_hat_all.len() != self.dims.k * self.dims.d_latent {
            return Err(Error::invalid("decode_beamformer: latent length mismatch"));
        }
        let x = RMat::from_column_slice(z_hat_all.len(), 1, z_hat_all.as_slice());
        let raw = self.beam_decoder.forward_eval(&x)?;
        let raw = RVec::from_column_slice(raw.as_slice());
        let norm = self.norm.resolve(analog)?;
        let (_, w0) = norm.forward(&raw, power, self.dims.n_bf, self.dims.k * self.dims.m)?;
        Ok(w0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{crandn_matrix, randn_matrix, seeded_rng};
    use approx::assert_relative_eq;

    fn tiny_spec() -> MlpSpec {
        MlpSpec::chain(
            &[8, 6, 4],
            Activation::LeakyRelu { slope: 0.01 },
            Activation::Tanh,
            false,
            0.0,
        )
    }

    #[test]
    fn spec_validation_catches_broken_chain() {
        let mut spec = tiny_spec();
        spec.layers[1].in_dim = 5;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_net_outputs_zero_through_tanh() {
        let mut rng = seeded_rng(0);
        let mut mlp = Mlp::init(&tiny_spec(), &mut rng).unwrap();
        for l in &mut mlp.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let x = randn_matrix(&mut rng, 8, 3, 1.0);
        let y = mlp.forward_eval(&x).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tanh_head_bounds_output() {
        let mut rng = seeded_rng(1);
        let mlp = Mlp::init(&tiny_spec(), &mut rng).unwrap();
        let x = randn_matrix(&mut rng, 8, 5, 1e6);
        let y = mlp.forward_eval(&x).unwrap();
        assert!(y.iter().all(|&v| v.abs() <= 1.0));
    }

    #[test]
    fn forward_matches_hand_rolled_reference() {
        let mut rng = seeded_rng(2);
        let mlp = Mlp::init(&tiny_spec(), &mut rng).unwrap();
        let x = randn_matrix(&mut rng, 8, 1, 1.0);
        let y = mlp.forward_eval(&x).unwrap();
        // independent dense forward, plain loops
        let mut cur: Vec<f64> = x.column(0).iter().copied().collect();
        for l in &mlp.layers {
            let mut next = vec![0.0; l.weight.nrows()];
            for (r, nx) in next.iter_mut().enumerate() {
                let mut acc = l.bias[r];
                for (c, cv) in cur.iter().enumerate() {
                    acc += l.weight[(r, c)] * cv;
                }
                *nx = l.activation.apply(acc);
            }
            cur = next;
        }
        for (a, b) in y.iter().zip(&cur) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    fn fd_param_check(spec: MlpSpec, mode: Mode, batch: usize, seed: u64) {
        let mut rng = seeded_rng(seed);
        let mut mlp = Mlp::init(&spec, &mut rng).unwrap();
        let x = randn_matrix(&mut rng, spec.in_dim(), batch, 1.0);
        let target = randn_matrix(&mut rng, spec.out_dim(), batch, 1.0);

        // analytic gradient of L = 0.5 ||y - target||^2
        let tape = mlp.forward_tape(&x, mode, None).unwrap();
        let upstream = tape.output() - &target;
        let (grads, input_grad) = mlp.backward(&tape, &upstream).unwrap();

        let loss = |mlp: &mut Mlp, x: &RMat| -> f64 {
            let t = mlp.forward_tape(x, mode, None).unwrap();
            0.5 * (t.output() - &target).norm_squared()
        };

        let h = 1e-6;
        for li in 0..mlp.layers.len() {
            for idx in [0usize, mlp.layers[li].weight.len() / 2] {
                let orig = mlp.layers[li].weight[idx];
                mlp.layers[li].weight[idx] = orig + h;
                let lp = loss(&mut mlp, &x);
                mlp.layers[li].weight[idx] = orig - h;
                let lm = loss(&mut mlp, &x);
                mlp.layers[li].weight[idx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.weights[li][idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1.0),
                    "layer {li} weight[{idx}]: fd {fd} vs analytic {an}"
                );
            }
            let orig = mlp.layers[li].bias[0];
            mlp.layers[li].bias[0] = orig + h;
            let lp = loss(&mut mlp, &x);
            mlp.layers[li].bias[0] = orig - h;
            let lm = loss(&mut mlp, &x);
            mlp.layers[li].bias[0] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.biases[li][0];
            assert!(
                (fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1.0),
                "layer {li} bias: fd {fd} vs analytic {an}"
            );
        }
        // input gradient
        let mut xp = x.clone();
        xp[(0, 0)] += h;
        let lp = loss(&mut mlp, &xp);
        xp[(0, 0)] = x[(0, 0)] - h;
        let lm = loss(&mut mlp, &xp);
        let fd = (lp - lm) / (2.0 * h);
        assert!((fd - input_grad[(0, 0)]).abs() <= 1e-6 * fd.abs().max(1.0));
    }

    #[test]
    fn backward_matches_fd_tanh_head() {
        fd_param_check(tiny_spec(), Mode::Eval, 3, 3);
    }

    #[test]
    fn backward_matches_fd_identity_head() {
        let spec = MlpSpec::chain(
            &[6, 10, 5],
            Activation::LeakyRelu { slope: 0.01 },
            Activation::Identity,
            false,
            0.0,
        );
        fd_param_check(spec, Mode::Eval, 4, 4);
    }

    #[test]
    fn backward_matches_fd_batchnorm_train_mode() {
        let spec = MlpSpec::chain(
            &[5, 8, 6, 4],
            Activation::LeakyRelu { slope: 0.01 },
            Activation::Identity,
            true,
            0.0,
        );
        fd_param_check(spec, Mode::Train, 6, 5);
    }

    #[test]
    fn backward_matches_fd_batchnorm_eval_mode() {
        let spec = MlpSpec::chain(
            &[5, 8, 4],
            Activation::LeakyRelu { slope: 0.01 },
            Activation::Identity,
            true,
            0.0,
        );
        // Give the running stats a non-trivial state first.
        let mut rng = seeded_rng(6);
        let mut mlp = Mlp::init(&spec, &mut rng).unwrap();
        let warm = randn_matrix(&mut rng, 5, 16, 2.0);
        mlp.forward_tape(&warm, Mode::Train, None).unwrap();
        let x = randn_matrix(&mut rng, 5, 3, 1.0);
        let target = randn_matrix(&mut rng, 4, 3, 1.0);
        let tape = mlp.forward_tape(&x, Mode::Eval, None).unwrap();
        let upstream = tape.output() - &target;
        let (grads, _) = mlp.backward(&tape, &upstream).unwrap();
        let h = 1e-6;
        let orig = mlp.layers[0].weight[(0, 0)];
        let loss_at = |m: &mut Mlp| {
            let t = m.forward_tape(&x, Mode::Eval, None).unwrap();
            0.5 * (t.output() - &target).norm_squared()
        };
        mlp.layers[0].weight[(0, 0)] = orig + h;
        let lp = loss_at(&mut mlp);
        mlp.layers[0].weight[(0, 0)] = orig - h;
        let lm = loss_at(&mut mlp);
        mlp.layers[0].weight[(0, 0)] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let an = grads.weights[0][(0, 0)];
        assert!((fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1.0));
    }

    #[test]
    fn single_linear_layer_weight_grad_is_outer_product() {
        let spec = MlpSpec {
            layers: vec![LayerSpec {
                in_dim: 3,
                out_dim: 2,
                activation: Activation::Identity,
                batchnorm: false,
                dropout: 0.0,
            }],
        };
        let mut rng = seeded_rng(7);
        let mut mlp = Mlp::init(&spec, &mut rng).unwrap();
        let x = randn_matrix(&mut rng, 3, 1, 1.0);
        let g = randn_matrix(&mut rng, 2, 1, 1.0);
        let tape = mlp.forward_tape(&x, Mode::Eval, None).unwrap();
        let (grads, _) = mlp.backward(&tape, &g).unwrap();
        let expected = &g * x.transpose();
        assert_relative_eq!(grads.weights[0], expected, epsilon = 1e-14);
    }

    #[test]
    fn batchnorm_eval_with_unit_stats_is_nearly_identity() {
        let spec = MlpSpec::chain(
            &[4, 4],
            Activation::Identity,
            Activation::Identity,
            false,
            0.0,
        );
        let mut rng = seeded_rng(8);
        let with_bn = Mlp::init(
            &MlpSpec {
                layers: vec![LayerSpec {
                    in_dim: 4,
                    out_dim: 4,
                    activation: Activation::Identity,
                    batchnorm: true,
                    dropout: 0.0,
                }],
            },
            &mut rng,
        )
        .unwrap();
        let mut without = Mlp::init(&spec, &mut rng).unwrap();
        without.layers[0].weight = with_bn.layers[0].weight.clone();
        without.layers[0].bias = with_bn.layers[0].bias.clone();
        // running stats already are (mean 0, var 1)
        let x = randn_matrix(&mut rng, 4, 3, 1.0);
        let a = with_bn.forward_eval(&x).unwrap();
        let b = without.forward_eval(&x).unwrap();
        assert!((a - b).norm() < 1e-4 * with_bn.layers[0].weight.norm());
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        // Linear-only net: averaging many training-mode forwards approximates
        // the inference forward.
        let spec = MlpSpec {
            layers: vec![LayerSpec {
                in_dim: 6,
                out_dim: 4,
                activation: Activation::Identity,
                batchnorm: false,
                dropout: 0.2,
            }],
        };
        let mut rng = seeded_rng(9);
        let mut mlp = Mlp::init(&spec, &mut rng).unwrap();
        let x = randn_matrix(&mut rng, 6, 1, 1.0);
        let eval = mlp.forward_eval(&x).unwrap();
        let trials = 10_000;
        let mut acc = RMat::zeros(4, 1);
        let mut drop_rng = seeded_rng(10);
        for _ in 0..trials {
            let t = mlp
                .forward_tape(&x, Mode::Train, Some(&mut drop_rng))
                .unwrap();
            acc += t.output();
        }
        acc /= trials as f64;
        // std error of the mean ~ |y| * sqrt(p/(1-p)/trials)
        for r in 0..4 {
            let se = (eval[(r, 0)].abs() + 0.1) * (0.25f64 / trials as f64).sqrt() * 3.0;
            assert!(
                (acc[(r, 0)] - eval[(r, 0)]).abs() < se.max(0.02),
                "row {r}: mean {} vs eval {}",
                acc[(r, 0)],
                eval[(r, 0)]
            );
        }
    }

    #[test]
    fn dropout_inference_is_deterministic() {
        let spec = MlpSpec::chain(
            &[5, 8, 3],
            Activation::LeakyRelu { slope: 0.01 },
            Activation::Identity,
            false,
            0.2,
        );
        let mut rng = seeded_rng(11);
        let mlp = Mlp::init(&spec, &mut rng).unwrap();
        let x = randn_matrix(&mut rng, 5, 2, 1.0);
        assert_eq!(mlp.forward_eval(&x).unwrap(), mlp.forward_eval(&x).unwrap());
    }

    #[test]
    fn digital_normalization_hits_power_budget() {
        let mut rng = seeded_rng(12);
        let layer = NormalizationLayer::digital();
        let raw = RVec::from_fn(16, |_, _| rng.random_range(-1.0..1.0));
        let p = 2.5;
        let (w_real, w0) = layer.forward(&raw, p, 4, 2).unwrap();
        assert_relative_eq!(w_real.norm_squared(), p, epsilon = 1e-12);
        assert_relative_eq!(w0.norm_squared(), p, epsilon = 1e-12);
    }

    #[test]
    fn normalization_rejects_zero_output() {
        let layer = NormalizationLayer::digital();
        let raw = RVec::zeros(8);
        assert!(matches!(
            layer.forward(&raw, 1.0, 2, 2),
            Err(Error::DegenerateOutput(_))
        ));
    }

    #[test]
    fn normalization_jacobian_annihilates_radial_direction() {
        let mut rng = seeded_rng(13);
        let layer = NormalizationLayer::digital();
        let p = 1.0f64;
        let mut raw = RVec::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        raw *= p.sqrt() / raw.norm();
        // J u = J^T u for the symmetric digital Jacobian; feeding u itself
        // must vanish.
        let ju = layer.backward(&raw, p, 3, 2, &raw).unwrap();
        assert!(ju.norm() < 1e-12);
    }

    #[test]
    fn normalization_backward_matches_fd() {
        let mut rng = seeded_rng(14);
        for hybrid in [false, true] {
            let (rows, cols) = (3, 2);
            let layer = if hybrid {
                NormalizationLayer::hybrid(crandn_matrix(&mut rng, 5, rows, 1.0))
            } else {
                NormalizationLayer::digital()
            };
            let p = 1.7;
            let raw = RVec::from_fn(2 * rows * cols, |_, _| rng.random_range(-1.0..1.0));
            let probe = RVec::from_fn(2 * rows * cols, |_, _| rng.random_range(-1.0..1.0));
            // L(u) = probe . forward(u)
            let g = layer.backward(&raw, p, rows, cols, &probe).unwrap();
            let h = 1e-7;
            for idx in 0..raw.len() {
                let mut up = raw.clone();
                up[idx] += h;
                let (wp, _) = layer.forward(&up, p, rows, cols).unwrap();
                let mut um = raw.clone();
                um[idx] -= h;
                let (wm, _) = layer.forward(&um, p, rows, cols).unwrap();
                let fd = (probe.dot(&wp) - probe.dot(&wm)) / (2.0 * h);
                assert!(
                    (fd - g[idx]).abs() < 1e-6 * fd.abs().max(1.0),
                    "hybrid={hybrid} idx {idx}: fd {fd} vs {}",
                    g[idx]
                );
            }
        }
    }

    #[test]
    fn hybrid_normalization_with_orthonormal_analog_matches_digital() {
        let mut rng = seeded_rng(15);
        // QR of a random tall matrix gives orthonormal columns.
        let q = crandn_matrix(&mut rng, 6, 3, 1.0).qr().q();
        let hybrid = NormalizationLayer::hybrid(q);
        let digital = NormalizationLayer::digital();
        let raw = RVec::from_fn(2 * 3 * 2, |_, _| rng.random_range(-1.0..1.0));
        let (a, _) = hybrid.forward(&raw, 1.0, 3, 2).unwrap();
        let (b, _) = digital.forward(&raw, 1.0, 3, 2).unwrap();
        assert!((a - b).norm() < 1e-10);
    }

    #[test]
    fn encoder_outputs_stay_bounded_for_extreme_inputs() {
        let dims = EdnDims { k: 2, m: 1, n_cols: 4, n_bf: 4, d_latent: 3 };
        let cfg = EdnConfig {
            enc_hidden: vec![8],
            beamdec_hidden: vec![8],
            chandec_hidden: vec![8],
            ..EdnConfig::default()
        };
        let mut rng = seeded_rng(16);
        let nets =
            EdnNets::init(dims, &cfg, NormMode::Digital, &mut rng).unwrap();
        let huge = crandn_matrix(&mut rng, 1, 4, 1e8);
        let z = nets.encode(&huge).unwrap();
        assert!(z.iter().all(|&v| v.abs() <= 1.0));
    }

    #[test]
    fn decode_channel_reshape_bookkeeping() {
        let dims = EdnDims { k: 1, m: 2, n_cols: 3, n_bf: 3, d_latent: 4 };
        let cfg = EdnConfig {
            enc_hidden: vec![8],
            beamdec_hidden: vec![8],
            chandec_hidden: vec![8],
            ..EdnConfig::default()
        };
        let mut rng = seeded_rng(17);
        let mut nets =
            EdnNets::init(dims, &cfg, NormMode::Digital, &mut rng).unwrap();
        // Force the decoder to output e_0 in the real half regardless of input.
        for l in &mut nets.chan_decoder.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
            l.batchnorm = None;
        }
        let last = nets.chan_decoder.layers.len() - 1;
        nets.chan_decoder.layers[last].bias[0] = 1.0;
        let z = RVec::zeros(4);
        let h = nets.decode_channel(&z).unwrap();
        assert_eq!(h[(0, 0)], num_complex::Complex64::new(1.0, 0.0));
        assert!(h.iter().skip(1).all(|v| v.re == 0.0 && v.im == 0.0));
    }
}
