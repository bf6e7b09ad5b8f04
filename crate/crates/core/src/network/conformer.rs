//! Conformer blocks and the two-stage (time, then frequency) wrapper.

use candle_core::Tensor;

use super::fused::{Attention, SiluOp};
use super::layers::{BatchNorm, LayerNorm, Linear};
use super::ops::depthwise_conv1d;
use super::params::{ParamBuilder, ParamStore};
use super::{ModelConfig, Mode};
use crate::error::Result;

#[derive(Debug, Clone)]
struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(b: &mut ParamBuilder, name: &str, dim: usize, mult: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(b, &format!("{name}.norm"), dim)?,
            up: Linear::new(b, &format!("{name}.up"), dim, dim * mult, true)?,
            down: Linear::new(b, &format!("{name}.down"), dim * mult, dim, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.up.forward(&self.norm.forward(x)?)?.apply_op1(SiluOp)?;
        self.down.forward(&h)
    }
}

#[derive(Debug, Clone)]
struct SelfAttention {
    norm: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    fn new(b: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(b, &format!("{name}.norm"), dim)?,
            query: Linear::new(b, &format!("{name}.query"), dim, dim, true)?,
            // a key bias adds the same term to every score in a row and cancels in the softmax
            key: Linear::new(b, &format!("{name}.key"), dim, dim, false)?,
            value: Linear::new(b, &format!("{name}.value"), dim, dim, true)?,
            out: Linear::new(b, &format!("{name}.out"), dim, dim, true)?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dh = x.dim(2)? / self.heads;
        let h = self.norm.forward(x)?;
        let op = Attention {
            heads: self.heads,
            scale: 1.0 / (dh as f64).sqrt(),
        };
        let ctx = self.query.forward(&h)?.apply_op3(
            &self.key.forward(&h)?,
            &self.value.forward(&h)?,
            op,
        )?;
        self.out.forward(&ctx)
    }
}

#[derive(Debug, Clone)]
struct ConvModule {
    norm: LayerNorm,
    pointwise_in: Linear,
    depthwise: Tensor,
    batch_norm: BatchNorm,
    pointwise_out: Linear,
    inner: usize,
}

impl ConvModule {
    fn new(b: &mut ParamBuilder, name: &str, dim: usize, kernel: usize) -> Result<Self> {
        let inner = 2 * dim;
        let bound = 1.0 / (kernel as f64).sqrt();
        Ok(Self {
            norm: LayerNorm::new(b, &format!("{name}.norm"), dim)?,
            pointwise_in: Linear::new(b, &format!("{name}.pointwise_in"), dim, 2 * inner, true)?,
            depthwise: b.uniform(&format!("{name}.depthwise.weight"), &[kernel, inner], bound)?,
            batch_norm: BatchNorm::new(b, &format!("{name}.batch_norm"), inner)?,
            pointwise_out: Linear::new(b, &format!("{name}.pointwise_out"), inner, dim, true)?,
            inner,
        })
    }

    fn forward(&self, x: &Tensor, store: &ParamStore, mode: Mode) -> Result<Tensor> {
        let h = self.pointwise_in.forward(&self.norm.forward(x)?)?;
        let a = h.narrow(2, 0, self.inner)?;
        let gate = h.narrow(2, self.inner, self.inner)?;
        let glu = (a * super::layers::sigmoid(&gate)?)?;
        let h = depthwise_conv1d(&glu, &self.depthwise)?;
        let h = self.batch_norm.forward(&h, store, mode)?.apply_op1(SiluOp)?;
        self.pointwise_out.forward(&h)
    }
}

/// One conformer block over `[batch, len, dim]` sequences.
#[derive(Debug, Clone)]
pub struct Conformer {
    ff1: FeedForward,
    attention: SelfAttention,
    conv: ConvModule,
    ff2: FeedForward,
    norm: LayerNorm,
}

impl Conformer {
    pub fn new(b: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let dim = cfg.base_channels;
        Ok(Self {
            ff1: FeedForward::new(b, &format!("{name}.ff1"), dim, cfg.ff_mult)?,
            attention: SelfAttention::new(b, &format!("{name}.attention"), dim, cfg.conformer_heads)?,
            conv: ConvModule::new(b, &format!("{name}.conv"), dim, cfg.conv_kernel)?,
            ff2: FeedForward::new(b, &format!("{name}.ff2"), dim, cfg.ff_mult)?,
            norm: LayerNorm::new(b, &format!("{name}.norm"), dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, store: &ParamStore, mode: Mode) -> Result<Tensor> {
        let x = (x + (self.ff1.forward(x)? * 0.5)?)?;
        let x = (&x + self.attention.forward(&x)?)?;
        let x = (&x + self.conv.forward(&x, store, mode)?)?;
        let x = (&x + (self.ff2.forward(&x)? * 0.5)?)?;
        self.norm.forward(&x)
    }
}

/// A time-axis conformer followed by a frequency-axis conformer on `[b, t, f, c]`.
#[derive(Debug, Clone)]
pub struct TsConformer {
    time: Conformer,
    freq: Conformer,
}

impl TsConformer {
    pub fn new(b: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            time: Conformer::new(b, &format!("{name}.time"), cfg)?,
            freq: Conformer::new(b, &format!("{name}.freq"), cfg)?,
        })
    }

    pub fn forward(&self, x: &Tensor, store: &ParamStore, mode: Mode) -> Result<Tensor> {
        let (b, t, f, c) = x.dims4()?;
        let seq = x.transpose(1, 2)?.contiguous()?.reshape((b * f, t, c))?;
        let seq = (self.time.forward(&seq, store, mode)? + &seq)?;
        let x = seq.reshape((b, f, t, c))?.transpose(1, 2)?.contiguous()?;
        let seq = x.reshape((b * t, f, c))?;
        let seq = (self.freq.forward(&seq, store, mode)? + &seq)?;
        Ok(seq.reshape((b, t, f, c))?)
    }
}
