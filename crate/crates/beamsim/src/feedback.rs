//! The user-to-BS latent feedback path: uniform quantization, an additive
//! feedback-error channel, and per-user bitstream framing.
//!
//! Training uses the additive-Gaussian mode (differentiable); the quantizer
//! modes exist for inference-time studies. The injected error is a REAL
//! Gaussian `N(0, sigma2_z)` per entry since the latent vector is real.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{randn, RVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedbackMode {
    AdditiveGaussian,
    UniformQuantizer,
    QuantizerPlusGaussian,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FeedbackChannelModel {
    pub mode: FeedbackMode,
    /// Error variance of the additive component.
    pub sigma2_z: f64,
    /// Bits per latent entry in quantizer modes.
    pub bits_per_entry: u8,
}

impl FeedbackChannelModel {
    pub fn additive(sigma2_z: f64) -> Self {
        Self { mode: FeedbackMode::AdditiveGaussian, sigma2_z, bits_per_entry: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma2_z < 0.0 {
            return Err(Error::invalid("feedback: sigma2_z must be >= 0"));
        }
        if matches!(
            self.mode,
            FeedbackMode::UniformQuantizer | FeedbackMode::QuantizerPlusGaussian
        ) && self.bits_per_entry == 0
        {
            return Err(Error::invalid("feedback: quantizer modes need B >= 1"));
        }
        Ok(())
    }
}

/// Result of quantizing one latent vector.
#[derive(Debug, Clone)]
pub struct QuantizedLatent {
    /// Packed payload bits, MSB-first ("big-endian bit order").
    pub bits: Vec<u8>,
    /// Total payload bit count (`B * d`).
    pub bit_len: usize,
    /// Entries that fell outside `[-1, 1]` and were clamped.
    pub saturated: usize,
}

struct BitWriter {
    bytes: Vec<u8>,
    used: usize,
}

impl BitWriter {
    fn new() -> Self {
        Self { bytes: Vec::new(), used: 0 }
    }

    fn push_bits(&mut self, value: u32, count: u8) {
        for i in (0..count).rev() {
            let bit = (value >> i) & 1;
            if self.used % 8 == 0 {
                self.bytes.push(0);
            }
            let byte = self.bytes.last_mut().unwrap();
            *byte |= (bit as u8) << (7 - (self.used % 8));
            self.used += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn read_bits(&mut self, count: u8) -> Result<u32> {
        let mut v = 0u32;
        for _ in 0..count {
            let byte = self
                .bytes
                .get(self.pos / 8)
                .ok_or_else(|| Error::Framing("bitstream exhausted".into()))?;
            let bit = (byte >> (7 - (self.pos % 8))) & 1;
            v = (v << 1) | bit as u32;
            self.pos += 1;
        }
        Ok(v)
    }
}

/// Mid-rise uniform quantizer with `2^B` levels on `[-1, 1]`. Entries outside
/// the range are clamped and counted in the saturation statistic.
pub fn quantize(z: &RVec, b: u8) -> Result<QuantizedLatent> {
    if b == 0 || b > 24 {
        return Err(Error::invalid("quantize: B must be in 1..=24"));
    }
    let levels = 1u32 << b;
    let cell = 2.0 / levels as f64;
    let mut writer = BitWriter::new();
    let mut saturated = 0;
    for &v in z.iter() {
        let clamped = if (-1.0..=1.0).contains(&v) {
            v
        } else {
            saturated += 1;
            v.clamp(-1.0, 1.0)
        };
        let idx = (((clamped + 1.0) / cell) as u32).min(levels - 1);
        writer.push_bits(idx, b);
    }
    Ok(QuantizedLatent { bits: writer.bytes, bit_len: z.len() * b as usize, saturated })
}

/// Reconstructs latent entries at cell midpoints from `B * d_latent` bits.
pub fn dequantize(bits: &[u8], b: u8, d_latent: usize) -> Result<RVec> {
    if b == 0 || b > 24 {
        return Err(Error::invalid("dequantize: B must be in 1..=24"));
    }
    let need = d_latent * b as usize;
    if bits.len() * 8 < need || bits.len() > need.div_ceil(8) {
        return Err(Error::Framing(format!(
            "dequantize: got {} bytes for {} bits",
            bits.len(),
            need
        )));
    }
    let cell = 2.0 / (1u32 << b) as f64;
    let mut reader = BitReader::new(bits);
    let mut out = RVec::zeros(d_latent);
    for i in 0..d_latent {
        let idx = reader.read_bits(b)?;
        out[i] = -1.0 + (idx as f64 + 0.5) * cell;
    }
    Ok(out)
}

/// Applies the configured feedback perturbation to a latent vector.
pub fn apply_feedback_error(
    z: &RVec,
    model: &FeedbackChannelModel,
    rng: &mut impl Rng,
) -> Result<RVec> {
    model.validate()?;
    let quantized = |z: &RVec| -> Result<RVec> {
        let q = quantize(z, model.bits_per_entry)?;
        dequantize(&q.bits, model.bits_per_entry, z.len())
    };
    match model.mode {
        FeedbackMode::AdditiveGaussian => Ok(z + sample_feedback_error(model, z.len(), rng)),
        FeedbackMode::UniformQuantizer => quantized(z),
        FeedbackMode::QuantizerPlusGaussian => {
            Ok(quantized(z)? + sample_feedback_error(model, z.len(), rng))
        }
    }
}

/// Draws the additive error vector `delta_z ~ N(0, sigma2_z)` entrywise.
pub fn sample_feedback_error(
    model: &FeedbackChannelModel,
    d_latent: usize,
    rng: &mut impl Rng,
) -> RVec {
    if model.sigma2_z == 0.0 {
        return RVec::zeros(d_latent);
    }
    let s = model.sigma2_z.sqrt();
    RVec::from_fn(d_latent, |_, _| s * randn(rng))
}

// --- bitstream framing -------------------------------------------------------
//
// Per-user frame: user id (u16), d_latent (u16), B (u8) — all big-endian —
// followed by B * d_latent payload bits, MSB-first, zero-padded to a byte.

pub fn frame_latent(user_id: u16, z: &RVec, b: u8) -> Result<Vec<u8>> {
    let q = quantize(z, b)?;
    let mut frame = Vec::with_capacity(5 + q.bits.len());
    frame.extend_from_slice(&user_id.to_be_bytes());
    frame.extend_from_slice(&(z.len() as u16).to_be_bytes());
    frame.push(b);
    frame.extend_from_slice(&q.bits);
    Ok(frame)
}

/// Parses one frame, returning `(user_id, reconstructed latent, bytes consumed)`.
pub fn parse_frame(bytes: &[u8]) -> Result<(u16, RVec, usize)> {
    if bytes.len() < 5 {
        return Err(Error::Framing("frame shorter than header".into()));
    }
    let user_id = u16::from_be_bytes([bytes[0], bytes[1]]);
    let d_latent = u16::from_be_bytes([bytes[2], bytes[3]]) as usize;
    let b = bytes[4];
    let payload_bytes = (d_latent * b as usize).div_ceil(8);
    let end = 5 + payload_bytes;
    if bytes.len() < end {
        return Err(Error::Framing("frame truncated".into()));
    }
    let z = dequantize(&bytes[5..end], b, d_latent)?;
    Ok((user_id, z, end))
}
