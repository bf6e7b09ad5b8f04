use candle_core::{DType, Device, Tensor};

use super::conformer::TsConformer;
use super::layers::{sigmoid, Conv2d, ConvGeometry, ConvNormAct, FreqConvTranspose, InstanceNorm2d, PRelu};
use super::ops::phase_from_tensors;
use super::params::{ParamBuilder, ParamStore};
use super::spectral::{spectra_to_tensors, tensor_to_array};
use super::{MaskActivation, ModelConfig, Mode};
use crate::dsp::{istft, stft, SpectrumPair, StftConfig, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

/// `beta / (1 + exp(1 - alpha * t))`, with `alpha` broadcast over the last axis.
pub fn lsigmoid(t: &Tensor, alpha: &Tensor, beta: f64) -> Result<Tensor> {
    let z = (t.broadcast_mul(alpha)? - 1.0)?;
    Ok((sigmoid(&z)? * beta)?)
}

/// Applies a compressed mask to a compressed magnitude and undoes the compression.
pub fn mask_decode(compressed_mag: &Tensor, mask: &Tensor, c: f64) -> Result<Tensor> {
    let product = (compressed_mag * mask)?;
    Ok(if c == 1.0 {
        product
    } else {
        product.powf(1.0 / c)?
    })
}

/// Dilated dense block: every layer sees the concatenation of all earlier outputs.
#[derive(Debug, Clone)]
struct DenseBlock {
    layers: Vec<ConvNormAct>,
}

impl DenseBlock {
    fn new(b: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.base_channels;
        let layers = cfg
            .dilations()
            .into_iter()
            .enumerate()
            .map(|(i, d)| {
                let geometry = ConvGeometry {
                    kernel: (3, 3),
                    stride: (1, 1),
                    dilation: (d, 1),
                    pad_time: (d, d),
                    pad_freq: (1, 1),
                };
                ConvNormAct::new(b, &format!("{name}.{i}"), c * (i + 1), c, geometry)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut skip = x.clone();
        let mut out = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            out = layer.forward(&skip)?;
            if i + 1 < self.layers.len() {
                skip = Tensor::cat(&[&out, &skip], 3)?;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct UpBlock {
    deconv: FreqConvTranspose,
    norm: InstanceNorm2d,
    act: PRelu,
}

impl UpBlock {
    fn new(b: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.base_channels;
        let s = cfg.downsample_stride;
        Ok(Self {
            deconv: FreqConvTranspose::new(b, &format!("{name}.deconv"), c, c, 3, s, 1)?,
            norm: InstanceNorm2d::new(b, &format!("{name}.norm"), c)?,
            act: PRelu::new(b, &format!("{name}.act"), c)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.act.forward(&self.norm.forward(&self.deconv.forward(x)?)?)
    }
}

#[derive(Debug, Clone)]
enum MaskHead {
    LSigmoid { alpha: Tensor, beta: f64 },
    PRelu(PRelu),
}

/// Everything the generator produces for one batch, all `[b, t, f]`.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub mask: Tensor,
    pub magnitude: Tensor,
    pub phase: Tensor,
}

#[derive(Debug)]
pub struct Generator {
    cfg: ModelConfig,
    store: ParamStore,
    enc_in: ConvNormAct,
    enc_dense: DenseBlock,
    enc_down: ConvNormAct,
    blocks: Vec<TsConformer>,
    mask_dense: DenseBlock,
    mask_up: UpBlock,
    mask_out: Conv2d,
    mask_head: MaskHead,
    phase_dense: DenseBlock,
    phase_up: UpBlock,
    phase_re: Conv2d,
    phase_im: Conv2d,
}

impl Generator {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(device, dtype, seed);
        let c = cfg.base_channels;
        let enc_in = ConvNormAct::new(&mut b, "encoder.input", 2, c, ConvGeometry::pointwise())?;
        let enc_dense = DenseBlock::new(&mut b, "encoder.dense", cfg)?;
        let mut down = ConvGeometry::with_kernel(1, 3);
        down.stride = (1, cfg.downsample_stride);
        down.pad_freq = (1, 1);
        let enc_down = ConvNormAct::new(&mut b, "encoder.down", c, c, down)?;
        let blocks = (0..cfg.n_conformers)
            .map(|i| TsConformer::new(&mut b, &format!("conformer.{i}"), cfg))
            .collect::<Result<_>>()?;
        let mask_dense = DenseBlock::new(&mut b, "mask.dense", cfg)?;
        let mask_up = UpBlock::new(&mut b, "mask.up", cfg)?;
        let mask_out = Conv2d::new(&mut b, "mask.out", c, 1, ConvGeometry::pointwise(), true)?;
        let mask_head = match cfg.mask_activation {
            MaskActivation::LSigmoid => MaskHead::LSigmoid {
                alpha: b.constant("mask.alpha", &[cfg.n_freq], 1.0)?,
                beta: cfg.lsigmoid_beta,
            },
            MaskActivation::PRelu => MaskHead::PRelu(PRelu::new(&mut b, "mask.prelu", cfg.n_freq)?),
        };
        let phase_dense = DenseBlock::new(&mut b, "phase.dense", cfg)?;
        let phase_up = UpBlock::new(&mut b, "phase.up", cfg)?;
        let phase_re = Conv2d::new(&mut b, "phase.real", c, 1, ConvGeometry::pointwise(), true)?;
        let phase_im = Conv2d::new(&mut b, "phase.imag", c, 1, ConvGeometry::pointwise(), true)?;
        Ok(Self {
            cfg: cfg.clone(),
            store: b.finish(),
            enc_in,
            enc_dense,
            enc_down,
            blocks,
            mask_dense,
            mask_up,
            mask_out,
            mask_head,
            phase_dense,
            phase_up,
            phase_re,
            phase_im,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn count_parameters(&self) -> usize {
        self.store.count()
    }

    /// `[b, t, f, 2]` (compressed magnitude, phase) to the `[b, t, f', c]` latent.
    pub fn encode(&self, input: &Tensor) -> Result<Tensor> {
        let (_, t, f, ch) = input.dims4()?;
        if f != self.cfg.n_freq || ch != 2 || t == 0 {
            return Err(Error::invalid(format!(
                "encoder input must be [b, t>0, {}, 2], got {:?}",
                self.cfg.n_freq,
                input.dims()
            )));
        }
        let x = self.enc_in.forward(input)?;
        let x = self.enc_dense.forward(&x)?;
        self.enc_down.forward(&x)
    }

    pub fn ts_conformer_stack(&self, latent: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut x = latent.clone();
        for block in &self.blocks {
            x = block.forward(&x, &self.store, mode)?;
        }
        Ok(x)
    }

    /// Returns the compressed mask and the enhanced magnitude.
    pub fn decode_magnitude(&self, latent: &Tensor, noisy_mag: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.mask_up.forward(&self.mask_dense.forward(latent)?)?;
        let logits = self.mask_out.forward(&h)?.squeeze(3)?;
        if logits.dims() != noisy_mag.dims() {
            return Err(Error::invalid("latent and noisy magnitude disagree in shape"));
        }
        let c = self.cfg.effective_c();
        let compressed = compress(noisy_mag, c)?;
        let (mask, enhanced) = match &self.mask_head {
            MaskHead::LSigmoid { alpha, beta } => {
                let mask = lsigmoid(&logits, alpha, *beta)?;
                let enhanced = mask_decode(&compressed, &mask, c)?;
                (mask, enhanced)
            }
            MaskHead::PRelu(act) => {
                let mask = act.forward(&logits)?;
                let enhanced = mask_decode(&compressed, &mask.relu()?, c)?;
                (mask, enhanced)
            }
        };
        Ok((mask, enhanced))
    }

    pub fn decode_phase(&self, latent: &Tensor) -> Result<Tensor> {
        let h = self.phase_up.forward(&self.phase_dense.forward(latent)?)?;
        let re = self.phase_re.forward(&h)?.squeeze(3)?;
        let im = self.phase_im.forward(&h)?.squeeze(3)?;
        Ok(phase_from_tensors(&re, &im)?)
    }

    /// Enhances `[b, t, f]` noisy magnitude and phase.
    pub fn forward(&self, noisy_mag: &Tensor, noisy_phase: &Tensor, mode: Mode) -> Result<GeneratorOutput> {
        if noisy_mag.dims() != noisy_phase.dims() {
            return Err(Error::invalid("noisy magnitude and phase shapes differ"));
        }
        let compressed = compress(noisy_mag, self.cfg.effective_c())?;
        let input = Tensor::stack(&[&compressed, noisy_phase], 3)?;
        let latent = self.ts_conformer_stack(&self.encode(&input)?, mode)?;
        let (mask, magnitude) = self.decode_magnitude(&latent, noisy_mag)?;
        let phase = if self.cfg.disable_phase_decoder {
            noisy_phase.clone()
        } else {
            self.decode_phase(&latent)?
        };
        Ok(GeneratorOutput {
            mask,
            magnitude,
            phase,
        })
    }

    /// Inference on one waveform: the input is scaled to unit RMS, enhanced,
    /// and scaled back, so the output has the input's length and level.
    pub fn enhance(&self, noisy: &Waveform, stft_cfg: &StftConfig) -> Result<(Waveform, SpectrumPair)> {
        if noisy.sample_rate() != DEFAULT_SAMPLE_RATE {
            return Err(Error::invalid(format!(
                "generator expects {DEFAULT_SAMPLE_RATE} Hz audio, got {}",
                noisy.sample_rate()
            )));
        }
        if noisy.is_empty() {
            return Err(Error::invalid("empty waveform"));
        }
        let norm = rms_normaliser(noisy.samples());
        let spec = stft(&noisy.scaled(norm), stft_cfg)?;
        let (mag, phase) = spectra_to_tensors(
            std::slice::from_ref(&spec),
            self.store.dtype(),
            self.store.device(),
        )?;
        let out = self.forward(&mag, &phase, Mode::Eval)?;
        let magnitude = tensor_to_array(&out.magnitude, 0)?.mapv(|m| m / norm);
        let phase = if self.cfg.disable_phase_decoder {
            spec.phase.clone()
        } else {
            // single precision can land a hair outside (-pi, pi]
            tensor_to_array(&out.phase, 0)?.mapv(|p| {
                if p <= -std::f64::consts::PI || p > std::f64::consts::PI {
                    std::f64::consts::PI
                } else {
                    p
                }
            })
        };
        let enhanced = SpectrumPair::new(magnitude, phase)?;
        let wave = istft(&enhanced, stft_cfg, noisy.len())?;
        Ok((wave, enhanced))
    }
}

fn compress(mag: &Tensor, c: f64) -> Result<Tensor> {
    Ok(if c == 1.0 { mag.clone() } else { mag.powf(c)? })
}

/// Gain that brings `samples` to unit RMS; 1 for silent input.
pub fn rms_normaliser(samples: &[f64]) -> f64 {
    let energy: f64 = samples.iter().map(|x| x * x).sum();
    if energy > 0.0 {
        (samples.len() as f64 / energy).sqrt()
    } else {
        1.0
    }
}
