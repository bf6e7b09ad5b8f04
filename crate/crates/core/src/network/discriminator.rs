use candle_core::{DType, Device, Tensor};

use super::layers::{sigmoid, ConvGeometry, ConvNormAct, Linear, PRelu};
use super::params::{ParamBuilder, ParamStore};
use crate::error::{Error, Result};

const CHANNELS: [usize; 4] = [16, 32, 64, 128];
/// Shortest extent along either axis that survives four stride-2 blocks.
const MIN_EXTENT: usize = 16;

/// Regresses a quality score in (0, 1) from a (clean, other) magnitude pair.
#[derive(Debug)]
pub struct Discriminator {
    store: ParamStore,
    blocks: Vec<ConvNormAct>,
    hidden: Linear,
    act: PRelu,
    head: Linear,
}

impl Discriminator {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut b = ParamBuilder::new(device, dtype, seed);
        let geometry = ConvGeometry {
            kernel: (4, 4),
            stride: (2, 2),
            dilation: (1, 1),
            pad_time: (1, 1),
            pad_freq: (1, 1),
        };
        let mut blocks = Vec::new();
        let mut c_in = 2;
        for (i, &c) in CHANNELS.iter().enumerate() {
            blocks.push(ConvNormAct::new(&mut b, &format!("block.{i}"), c_in, c, geometry)?);
            c_in = c;
        }
        let hidden = Linear::new(&mut b, "hidden", c_in, c_in / 2, true)?;
        let act = PRelu::new(&mut b, "hidden_act", c_in / 2)?;
        let head = Linear::new(&mut b, "head", c_in / 2, 1, true)?;
        Ok(Self {
            store: b.finish(),
            blocks,
            hidden,
            act,
            head,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn count_parameters(&self) -> usize {
        self.store.count()
    }

    /// Scores `[b, t, f]` magnitude pairs, returning `[b]`.
    pub fn forward(&self, clean_mag: &Tensor, other_mag: &Tensor) -> Result<Tensor> {
        if clean_mag.dims() != other_mag.dims() {
            return Err(Error::invalid(format!(
                "discriminator inputs differ in shape: {:?} vs {:?}",
                clean_mag.dims(),
                other_mag.dims()
            )));
        }
        let (_, t, f) = clean_mag.dims3()?;
        let mut x = Tensor::stack(&[clean_mag, other_mag], 3)?;
        if t < MIN_EXTENT {
            x = x.pad_with_zeros(1, 0, MIN_EXTENT - t)?;
        }
        if f < MIN_EXTENT {
            x = x.pad_with_zeros(2, 0, MIN_EXTENT - f)?;
        }
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let pooled = x.mean((1, 2))?;
        let h = self.act.forward(&self.hidden.forward(&pooled)?)?;
        let score = self.head.forward(&h)?.squeeze(1)?;
        Ok(sigmoid(&score)?)
    }
}
