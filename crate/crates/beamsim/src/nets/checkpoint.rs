//! Versioned binary checkpoint container.
//!
//! Layout: magic `BEAMCKPT`, format version (u32 LE), header length (u32 LE),
//! a JSON architecture descriptor, then every parameter as little-endian f64
//! in a fixed order (per network: per layer weight column-major, bias, then
//! batchnorm running mean/var and momentum/eps when present), and finally the
//! fixed analog matrix (interleaved re/im) when the normalization mode embeds
//! one. Loading rejects any mismatched architecture descriptor.

use std::io::Read;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{BatchNorm, EdnDims, EdnNets, Layer, Mlp, MlpSpec, NormMode, NormalizationLayer};
use crate::numerics::{CMat, RMat, RVec};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BEAMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArchDescriptor {
    pub dims: EdnDims,
    pub encoder: MlpSpec,
    pub beam_decoder: MlpSpec,
    pub chan_decoder: MlpSpec,
    /// "digital" | "hybrid-fixed" | "hybrid-per-sample"
    pub norm_mode: String,
    /// Rows of the embedded analog matrix (hybrid-fixed only).
    pub analog_rows: usize,
}

/// A trained-network snapshot plus the training-state needed to resume or
/// audit a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub nets: EdnNets,
    pub seed: u64,
    pub alpha: f64,
    pub epoch: u64,
}

fn norm_mode_tag(mode: &NormMode) -> (&'static str, usize) {
    match mode {
        NormMode::Digital => ("digital", 0),
        NormMode::HybridFixed(NormalizationLayer::Hybrid { analog, .. }) => {
            ("hybrid-fixed", analog.nrows())
        }
        NormMode::HybridFixed(NormalizationLayer::Digital) => ("digital", 0),
        NormMode::HybridPerSample => ("hybrid-per-sample", 0),
    }
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_mlp(buf: &mut Vec<u8>, mlp: &Mlp) {
    for layer in &mlp.layers {
        for v in layer.weight.iter() {
            push_f64(buf, *v);
        }
        for v in layer.bias.iter() {
            push_f64(buf, *v);
        }
        if let Some(bn) = &layer.batchnorm {
            for v in bn.running_mean.iter() {
                push_f64(buf, *v);
            }
            for v in bn.running_var.iter() {
                push_f64(buf, *v);
            }
            push_f64(buf, bn.momentum);
            push_f64(buf, bn.eps);
        }
    }
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_mlp(r: &mut impl Read, spec: &MlpSpec) -> Result<Mlp> {
    let mut layers = Vec::with_capacity(spec.layers.len());
    for ls in &spec.layers {
        let mut weight = RMat::zeros(ls.out_dim, ls.in_dim);
        for i in 0..weight.len() {
            weight[i] = read_f64(r)?;
        }
        let mut bias = RVec::zeros(ls.out_dim);
        for i in 0..bias.len() {
            bias[i] = read_f64(r)?;
        }
        let batchnorm = if ls.batchnorm {
            let mut running_mean = RVec::zeros(ls.out_dim);
            for i in 0..running_mean.len() {
                running_mean[i] = read_f64(r)?;
            }
            let mut running_var = RVec::zeros(ls.out_dim);
            for i in 0..running_var.len() {
                running_var[i] = read_f64(r)?;
            }
            let momentum = read_f64(r)?;
            let eps = read_f64(r)?;
            Some(BatchNorm { running_mean, running_var, momentum, eps })
        } else {
            None
        };
        layers.push(Layer {
            weight,
            bias,
            batchnorm,
            activation: ls.activation,
            dropout: ls.dropout,
        });
    }
    Ok(Mlp { layers })
}

impl Checkpoint {
    pub fn descriptor(&self) -> ArchDescriptor {
        let (norm_mode, analog_rows) = norm_mode_tag(&self.nets.norm);
        ArchDescriptor {
            dims: self.nets.dims,
            encoder: self.nets.encoder.spec(),
            beam_decoder: self.nets.beam_decoder.spec(),
            chan_decoder: self.nets.chan_decoder.spec(),
            norm_mode: norm_mode.to_string(),
            analog_rows,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&HeaderJson {
            arch: self.descriptor(),
            seed: self.seed,
            alpha: self.alpha,
            epoch: self.epoch,
        })?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        push_mlp(&mut buf, &self.nets.encoder);
        push_mlp(&mut buf, &self.nets.beam_decoder);
        push_mlp(&mut buf, &self.nets.chan_decoder);
        if let NormMode::HybridFixed(NormalizationLayer::Hybrid { analog, .. }) = &self.nets.norm
        {
            for z in analog.iter() {
                push_f64(&mut buf, z.re);
                push_f64(&mut buf, z.im);
            }
        }
        Ok(buf)
    }

    /// Parses a checkpoint, rejecting wrong magic/version and — when
    /// `expected` is given — any architecture mismatch.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ArchDescriptor>) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::invalid("checkpoint: bad magic"));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v)?;
        let version = u32::from_le_bytes(v);
        if version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint: unsupported version {version}"
            )));
        }
        r.read_exact(&mut v)?;
        let header_len = u32::from_le_bytes(v) as usize;
        if r.len() < header_len {
            return Err(Error::invalid("checkpoint: truncated header"));
        }
        let header: HeaderJson = serde_json::from_slice(&r[..header_len])?;
        r = &r[header_len..];
        if let Some(exp) = expected {
            if exp != &header.arch {
                return Err(Error::invalid(
                    "checkpoint: architecture descriptor does not match the requested \
                     configuration",
                ));
            }
        }
        let encoder = read_mlp(&mut r, &header.arch.encoder)?;
        let beam_decoder = read_mlp(&mut r, &header.arch.beam_decoder)?;
        let chan_decoder = read_mlp(&mut r, &header.arch.chan_decoder)?;
        let norm = match header.arch.norm_mode.as_str() {
            "digital" => NormMode::Digital,
            "hybrid-per-sample" => NormMode::HybridPerSample,
            "hybrid-fixed" => {
                let rows = header.arch.analog_rows;
                let cols = header.arch.dims.n_bf;
                let mut analog = CMat::zeros(rows, cols);
                for i in 0..analog.len() {
                    let re = read_f64(&mut r)?;
                    let im = read_f64(&mut r)?;
                    analog[i] = Complex64::new(re, im);
                }
                NormMode::hybrid_fixed(analog)
            }
            other => {
                return Err(Error::invalid(format!(
                    "checkpoint: unknown normalization mode {other}"
                )))
            }
        };
        Ok(Checkpoint {
            nets: EdnNets {
                encoder,
                beam_decoder,
                chan_decoder,
                norm,
                dims: header.arch.dims,
            },
            seed: header.seed,
            alpha: header.alpha,
            epoch: header.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path, expected: Option<&ArchDescriptor>) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, expected)
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderJson {
    arch: ArchDescriptor,
    seed: u64,
    alpha: f64,
    epoch: u64,
}
