//! Differentiable inverse STFT and conversions between `dsp` values and tensors.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use crate::dsp::{SpectrumPair, StftConfig, ENVELOPE_FLOOR};
use crate::error::{Error, Result};

/// Inverse STFT expressed with matrix products so gradients flow to magnitude and phase.
#[derive(Debug, Clone)]
pub struct Istft {
    cfg: StftConfig,
    cos_basis: Tensor,
    sin_basis: Tensor,
    window_sq: Vec<f64>,
}

impl Istft {
    pub fn new(cfg: &StftConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_fft;
        if !n.is_multiple_of(cfg.hop_length) {
            return Err(Error::Config(format!(
                "stft.hop_length: differentiable synthesis needs n_fft divisible by hop, got {n} and {}",
                cfg.hop_length
            )));
        }
        let bins = cfg.n_bins();
        let window = cfg.window();
        let mut cos = vec![0.0; bins * n];
        let mut sin = vec![0.0; bins * n];
        for k in 0..bins {
            let edge = k == 0 || (n.is_multiple_of(2) && k == n / 2);
            let a = if edge { 1.0 } else { 2.0 };
            for (j, w) in window.iter().enumerate() {
                let arg = 2.0 * PI * ((k * j) % n) as f64 / n as f64;
                cos[k * n + j] = a * arg.cos() * w / n as f64;
                if !edge {
                    sin[k * n + j] = -a * arg.sin() * w / n as f64;
                }
            }
        }
        Ok(Self {
            cfg: *cfg,
            cos_basis: Tensor::from_vec(cos, (bins, n), device)?.to_dtype(dtype)?,
            sin_basis: Tensor::from_vec(sin, (bins, n), device)?.to_dtype(dtype)?,
            window_sq: window.iter().map(|w| w * w).collect(),
        })
    }

    /// `[b, t, f]` magnitude and phase to `[b, length]` samples.
    pub fn forward(&self, magnitude: &Tensor, phase: &Tensor, length: usize) -> Result<Tensor> {
        let (b, t, f) = magnitude.dims3()?;
        if phase.dims() != magnitude.dims() {
            return Err(Error::invalid("magnitude and phase shapes differ"));
        }
        if f != self.cfg.n_bins() || t == 0 {
            return Err(Error::invalid(format!(
                "spectrum of {t} frames x {f} bins does not match the STFT config"
            )));
        }
        let n = self.cfg.n_fft;
        let hop = self.cfg.hop_length;
        let re = (magnitude * phase.cos()?)?.reshape((b * t, f))?;
        let im = (magnitude * phase.sin()?)?.reshape((b * t, f))?;
        let frames = (re.matmul(&self.cos_basis)? + im.matmul(&self.sin_basis)?)?;
        let r = n / hop;
        let frames = frames.reshape((b, t, r, hop))?;
        let mut acc: Option<Tensor> = None;
        for j in 0..r {
            let part = frames
                .narrow(2, j, 1)?
                .reshape((b, t * hop))?
                .pad_with_zeros(1, j * hop, (r - 1 - j) * hop)?;
            acc = Some(match acc {
                None => part,
                Some(a) => (a + part)?,
            });
        }
        let signal = acc.expect("at least one hop per frame");
        let total = (t - 1) * hop + n;
        let mut envelope = vec![0.0; total];
        for frame in 0..t {
            for (i, w) in self.window_sq.iter().enumerate() {
                envelope[frame * hop + i] += w;
            }
        }
        let inv: Vec<f64> = envelope.iter().map(|e| 1.0 / e.max(ENVELOPE_FLOOR)).collect();
        let inv = Tensor::from_vec(inv, total, signal.device())?.to_dtype(signal.dtype())?;
        let signal = signal.broadcast_mul(&inv)?;
        let pad = self.cfg.center_pad();
        let available = total.saturating_sub(pad).min(length);
        let body = signal.narrow(1, pad, available)?;
        Ok(if available < length {
            body.pad_with_zeros(1, 0, length - available)?
        } else {
            body
        })
    }
}

fn stack(arrays: &[&Array2<f64>], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = arrays
        .first()
        .ok_or_else(|| Error::invalid("empty batch"))?
        .dim();
    let mut data = Vec::with_capacity(arrays.len() * first.0 * first.1);
    for a in arrays {
        if a.dim() != first {
            return Err(Error::invalid("batch items have different shapes"));
        }
        data.extend(a.iter().copied());
    }
    Ok(Tensor::from_vec(data, (arrays.len(), first.0, first.1), device)?.to_dtype(dtype)?)
}

/// Batches spectra into `[b, t, f]` magnitude and phase tensors.
pub fn spectra_to_tensors(
    spectra: &[SpectrumPair],
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, Tensor)> {
    let mags: Vec<_> = spectra.iter().map(|s| &s.magnitude).collect();
    let phases: Vec<_> = spectra.iter().map(|s| &s.phase).collect();
    Ok((stack(&mags, dtype, device)?, stack(&phases, dtype, device)?))
}

/// Batches equal-length sample vectors into a `[b, len]` tensor.
pub fn samples_to_tensor(rows: &[&[f64]], dtype: DType, device: &Device) -> Result<Tensor> {
    let len = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.is_empty() || rows.iter().any(|r| r.len() != len) {
        return Err(Error::invalid("batch rows must be non-empty and equally long"));
    }
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (rows.len(), len), device)?.to_dtype(dtype)?)
}

/// Row `i` of a `[b, t, f]` tensor as an `Array2`.
pub fn tensor_to_array(x: &Tensor, i: usize) -> Result<Array2<f64>> {
    let (_, t, f) = x.dims3()?;
    let v = x.get(i)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(Array2::from_shape_vec((t, f), v).expect("shape matches element count"))
}

pub fn tensor_row(x: &Tensor, i: usize) -> Result<Vec<f64>> {
    Ok(x.get(i)?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
