//! Building blocks operating on channels-last tensors.
//!
//! 2-D feature maps are `[batch, time, freq, channels]`; sequences are
//! `[batch, len, channels]`.

use candle_core::{Tensor, D};

use super::ops::{TapGrid, TapMode, TapShift};
use super::fused::{AddBias, AffineStandardize, PReluOp, SigmoidOp};
use super::params::{ParamBuilder, ParamStore};
use super::Mode;
use crate::error::Result;

const NORM_EPS: f64 = 1e-5;
const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Numerically stable logistic function.
pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(SigmoidOp)
}

fn standardize(x: &Tensor, gamma: &Tensor, beta: &Tensor, op: AffineStandardize) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op3(gamma, beta, op)?)
}

fn flat_matmul(x: &Tensor, weight: &Tensor) -> candle_core::Result<Tensor> {
    let dims = x.dims().to_vec();
    let inner = *dims.last().unwrap();
    let rows = x.elem_count() / inner;
    let y = x.reshape((rows, inner))?.matmul(weight)?;
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = weight.dim(1)?;
    y.reshape(out_dims)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = b.uniform(&format!("{name}.weight"), &[d_in, d_out], bound)?;
        let bias = if bias {
            Some(b.uniform(&format!("{name}.bias"), &[d_out], bound)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = flat_matmul(&x.contiguous()?, &self.weight)?;
        Ok(match &self.bias {
            Some(b) => y.apply_op2(b, AddBias)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: b.constant(&format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dim = x.dim(D::Minus1)?;
        let op = AffineStandardize {
            a: x.elem_count() / dim,
            m: dim,
            c: 1,
            per_c: false,
            eps: NORM_EPS,
        };
        standardize(x, &self.gamma, &self.beta, op)
    }
}

/// Per-channel normalisation over the time and frequency axes of each example.
#[derive(Debug, Clone)]
pub struct InstanceNorm2d {
    gamma: Tensor,
    beta: Tensor,
}

impl InstanceNorm2d {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: b.constant(&format!("{name}.beta"), &[channels], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, f, c) = x.dims4()?;
        let op = AffineStandardize {
            a: b,
            m: t * f,
            c,
            per_c: true,
            eps: NORM_EPS,
        };
        standardize(x, &self.gamma, &self.beta, op)
    }
}

/// Batch normalisation over the last (channel) axis with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    mean_key: String,
    var_key: String,
}

impl BatchNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        let mean_key = format!("{name}.running_mean");
        let var_key = format!("{name}.running_var");
        b.buffer(&mean_key, &[channels], 0.0)?;
        b.buffer(&var_key, &[channels], 1.0)?;
        Ok(Self {
            gamma: b.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: b.constant(&format!("{name}.beta"), &[channels], 0.0)?,
            mean_key,
            var_key,
        })
    }

    pub fn forward(&self, x: &Tensor, store: &ParamStore, mode: Mode) -> Result<Tensor> {
        let ch = x.dim(D::Minus1)?;
        let rows = x.elem_count() / ch;
        match mode {
            Mode::Train => {
                let flat = x.detach().reshape((rows, ch))?;
                let mean = flat.mean_keepdim(0)?;
                let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)?;
                let unbiased = if rows > 1 {
                    (var * (rows as f64 / (rows as f64 - 1.0)))?
                } else {
                    var
                };
                let m = BATCH_NORM_MOMENTUM;
                let mut rm = store.buffer_slot(&self.mean_key).lock().unwrap();
                *rm = ((&*rm * (1.0 - m))? + (mean.squeeze(0)? * m)?)?;
                let mut rv = store.buffer_slot(&self.var_key).lock().unwrap();
                *rv = ((&*rv * (1.0 - m))? + (unbiased.squeeze(0)? * m)?)?;
                let op = AffineStandardize {
                    a: 1,
                    m: rows,
                    c: ch,
                    per_c: true,
                    eps: NORM_EPS,
                };
                standardize(x, &self.gamma, &self.beta, op)
            }
            Mode::Eval => {
                let rm = store.buffer_slot(&self.mean_key).lock().unwrap().clone();
                let rv = store.buffer_slot(&self.var_key).lock().unwrap().clone();
                let scale = (rv + NORM_EPS)?.sqrt()?.recip()?.mul(&self.gamma)?;
                let shift = (&self.beta - rm.mul(&scale)?)?;
                Ok(x.broadcast_mul(&scale)?.broadcast_add(&shift)?)
            }
        }
    }
}

/// Parametric ReLU with one learnable negative slope per channel.
#[derive(Debug, Clone)]
pub struct PRelu {
    slope: Tensor,
}

impl PRelu {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            slope: b.constant(&format!("{name}.slope"), &[channels], 0.25)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.contiguous()?.apply_op2(&self.slope, PReluOp)?)
    }
}

/// Geometry of a 2-D convolution over `[batch, time, freq, channels]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    /// (before, after) zero padding along time.
    pub pad_time: (usize, usize),
    /// (before, after) zero padding along frequency.
    pub pad_freq: (usize, usize),
}

impl ConvGeometry {
    pub fn pointwise() -> Self {
        Self::with_kernel(1, 1)
    }

    pub fn with_kernel(kt: usize, kf: usize) -> Self {
        Self {
            kernel: (kt, kf),
            stride: (1, 1),
            dilation: (1, 1),
            pad_time: (0, 0),
            pad_freq: (0, 0),
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    fn out_len(len: usize, k: usize, s: usize, d: usize, pad: (usize, usize)) -> Option<usize> {
        let span = d * (k - 1) + 1;
        let padded = len + pad.0 + pad.1;
        (padded >= span).then(|| (padded - span) / s + 1)
    }

    /// Output (time, freq) extent, or `None` if the input is too small.
    pub fn output_size(&self, time: usize, freq: usize) -> Option<(usize, usize)> {
        Some((
            Self::out_len(time, self.kernel.0, self.stride.0, self.dilation.0, self.pad_time)?,
            Self::out_len(freq, self.kernel.1, self.stride.1, self.dilation.1, self.pad_freq)?,
        ))
    }
}

fn tap_weight(b: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize, taps: usize) -> Result<Tensor> {
    let bound = 1.0 / ((c_in * taps) as f64).sqrt();
    // stored as [c_in, taps * c_out] so every tap is computed by one product
    b.uniform(&format!("{name}.weight"), &[c_in, taps * c_out], bound)
}

/// 2-D convolution: one matrix product over all taps, then a shifted sum.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    geometry: ConvGeometry,
    c_out: usize,
}

impl Conv2d {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        geometry: ConvGeometry,
        bias: bool,
    ) -> Result<Self> {
        let weight = tap_weight(b, name, c_in, c_out, geometry.taps())?;
        let bias = if bias {
            let bound = 1.0 / ((c_in * geometry.taps()) as f64).sqrt();
            Some(b.uniform(&format!("{name}.bias"), &[c_out], bound)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            geometry,
            c_out,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = &self.geometry;
        let (batch, t, f, _) = x.dims4()?;
        let (to, fo) = g.output_size(t, f).ok_or_else(|| {
            crate::Error::invalid(format!("input {t}x{f} too small for kernel {:?}", g.kernel))
        })?;
        let z = flat_matmul(&x.contiguous()?, &self.weight)?;
        let identity = g.taps() == 1 && (to, fo) == (t, f) && g.stride == (1, 1);
        let y = if identity {
            z
        } else {
            let grid = TapGrid {
                batch,
                small: (to, fo),
                large: (t, f),
                kernel: g.kernel,
                stride: g.stride,
                dilation: g.dilation,
                pad: (g.pad_time.0, g.pad_freq.0),
                channels: self.c_out,
            };
            z.apply_op1(TapShift {
                grid,
                mode: TapMode::Gather,
            })?
        };
        Ok(match &self.bias {
            Some(b) => y.apply_op2(b, AddBias)?,
            None => y,
        })
    }
}

/// Transposed convolution along frequency with kernel `(1, k)`, stride `(1, s)`
/// and symmetric padding `p`: output length `(f - 1) * s + k - 2p`.
#[derive(Debug, Clone)]
pub struct FreqConvTranspose {
    weight: Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
    c_out: usize,
}

impl FreqConvTranspose {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if 2 * padding >= kernel + stride {
            return Err(crate::Error::Config(format!(
                "{name}: transposed conv padding {padding} too large for kernel {kernel}"
            )));
        }
        Ok(Self {
            weight: tap_weight(b, name, c_in, c_out, kernel)?,
            kernel,
            stride,
            padding,
            c_out,
        })
    }

    pub fn output_len(&self, freq: usize) -> usize {
        (freq - 1) * self.stride + self.kernel - 2 * self.padding
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (batch, t, f, _) = x.dims4()?;
        let z = flat_matmul(&x.contiguous()?, &self.weight)?;
        let grid = TapGrid {
            batch,
            small: (t, f),
            large: (t, self.output_len(f)),
            kernel: (1, self.kernel),
            stride: (1, self.stride),
            dilation: (1, 1),
            pad: (0, self.padding),
            channels: self.c_out,
        };
        Ok(z.apply_op1(TapShift {
            grid,
            mode: TapMode::Scatter,
        })?)
    }
}

/// Convolution, instance normalisation and PReLU in sequence.
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    conv: Conv2d,
    norm: InstanceNorm2d,
    act: PRelu,
}

impl ConvNormAct {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        geometry: ConvGeometry,
    ) -> Result<Self> {
        // a bias would be cancelled by the normalisation
        Ok(Self {
            conv: Conv2d::new(b, &format!("{name}.conv"), c_in, c_out, geometry, false)?,
            norm: InstanceNorm2d::new(b, &format!("{name}.norm"), c_out)?,
            act: PRelu::new(b, &format!("{name}.act"), c_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.act.forward(&self.norm.forward(&self.conv.forward(x)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// Direct nested-loop convolution on [b, t, f, c] with weight [c_in, (i, j, c_out)].
    fn direct_conv(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Vec<f64> {
        let (b, t, f, c) = x.dims4().unwrap();
        let co = w.dim(1).unwrap() / g.taps();
        let xv = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let wv = w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let (to, fo) = g.output_size(t, f).unwrap();
        let mut out = vec![0.0; b * to * fo * co];
        for bb in 0..b {
            for ot in 0..to {
                for of in 0..fo {
                    for o in 0..co {
                        let mut acc = 0.0;
                        for i in 0..g.kernel.0 {
                            for j in 0..g.kernel.1 {
                                let st = (ot * g.stride.0 + i * g.dilation.0) as i64 - g.pad_time.0 as i64;
                                let sf = (of * g.stride.1 + j * g.dilation.1) as i64 - g.pad_freq.0 as i64;
                                if st < 0 || sf < 0 || st as usize >= t || sf as usize >= f {
                                    continue;
                                }
                                for ci in 0..c {
                                    let xi = ((bb * t + st as usize) * f + sf as usize) * c + ci;
                                    let wi = ci * g.taps() * co + (i * g.kernel.1 + j) * co + o;
                                    acc += xv[xi] * wv[wi];
                                }
                            }
                        }
                        out[((bb * to + ot) * fo + of) * co + o] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let geometries = [
            ConvGeometry {
                kernel: (3, 3),
                stride: (1, 1),
                dilation: (2, 1),
                pad_time: (2, 2),
                pad_freq: (1, 1),
            },
            ConvGeometry {
                kernel: (1, 3),
                stride: (1, 2),
                dilation: (1, 1),
                pad_time: (0, 0),
                pad_freq: (1, 1),
            },
            ConvGeometry {
                kernel: (4, 4),
                stride: (2, 2),
                dilation: (1, 1),
                pad_time: (1, 1),
                pad_freq: (1, 1),
            },
        ];
        for (n, g) in geometries.iter().enumerate() {
            let mut b = ParamBuilder::new(&Device::Cpu, DType::F64, n as u64);
            let conv = Conv2d::new(&mut b, "c", 3, 2, *g, false).unwrap();
            let x = rand_tensor(&[2, 9, 11, 3], 10 + n as u64);
            let got = conv.forward(&x).unwrap();
            let (to, fo) = g.output_size(9, 11).unwrap();
            assert_eq!(got.dims(), &[2, to, fo, 2]);
            let want = direct_conv(&x, &conv.weight, g);
            for (a, b) in got.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_conv_matches_direct_loop() {
        let mut b = ParamBuilder::new(&Device::Cpu, DType::F64, 0);
        let (ci, co, k, st, p) = (2, 3, 3, 2, 1);
        let up = FreqConvTranspose::new(&mut b, "up", ci, co, k, st, p).unwrap();
        let x = rand_tensor(&[1, 2, 101, ci], 3);
        let y = up.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2, 201, co]);
        assert_eq!(up.output_len(101), 201);
        let xv = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let wv = up.weight.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut want = vec![0.0; 2 * 201 * co];
        for t in 0..2 {
            for v in 0..101 {
                for j in 0..k {
                    let q = (v * st + j) as i64 - p as i64;
                    if !(0..201).contains(&q) {
                        continue;
                    }
                    for c in 0..ci {
                        for o in 0..co {
                            want[(t * 201 + q as usize) * co + o] +=
                                xv[(t * 101 + v) * ci + c] * wv[c * k * co + j * co + o];
                        }
                    }
                }
            }
        }
        for (a, b) in y.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn finite_difference_check(x: &Tensor, f: &dyn Fn(&Tensor) -> Tensor) {
        let weights = rand_tensor(f(x).dims(), 77);
        let objective = |t: &Tensor| (f(t) * &weights).unwrap().sum_all().unwrap();
        let var = Var::from_tensor(x).unwrap();
        let grads = objective(var.as_tensor()).backward().unwrap();
        let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for idx in (0..base.len()).step_by(7) {
            let eval = |d: f64| {
                let mut v = base.clone();
                v[idx] += d;
                objective(&Tensor::from_vec(v, x.dims(), &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            assert!((numeric - analytic[idx]).abs() < 1e-6, "{idx}: {numeric} vs {}", analytic[idx]);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut b = ParamBuilder::new(&Device::Cpu, DType::F64, 4);
        let g = ConvGeometry {
            kernel: (3, 3),
            stride: (1, 2),
            dilation: (2, 1),
            pad_time: (2, 2),
            pad_freq: (1, 1),
        };
        let conv = Conv2d::new(&mut b, "c", 2, 3, g, true).unwrap();
        finite_difference_check(&rand_tensor(&[1, 5, 7, 2], 8), &|x| conv.forward(x).unwrap());
        let up = FreqConvTranspose::new(&mut b, "up", 2, 2, 3, 2, 1).unwrap();
        finite_difference_check(&rand_tensor(&[1, 3, 6, 2], 9), &|x| up.forward(x).unwrap());
    }

    #[test]
    fn sigmoid_is_stable_and_differentiable() {
        let x = Var::new(&[-1000.0f64, -3.0, 0.0, 2.0, 1000.0], &Device::Cpu).unwrap();
        let y = sigmoid(&x).unwrap();
        let v = y.to_vec1::<f64>().unwrap();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[2], 0.5);
        assert_eq!(v[4], 1.0);
        let g = y.sum_all().unwrap().backward().unwrap();
        let gv = g.get(&x).unwrap().to_vec1::<f64>().unwrap();
        assert!(gv.iter().all(|v| v.is_finite()));
        assert!((gv[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let mut b = ParamBuilder::new(&Device::Cpu, DType::F64, 0);
        let norm = InstanceNorm2d::new(&mut b, "n", 3).unwrap();
        let y = norm.forward(&rand_tensor(&[2, 5, 7, 3], 1)).unwrap();
        let mean = y.mean_keepdim((1, 2)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn batch_norm_tracks_running_stats() {
        let mut b = ParamBuilder::new(&Device::Cpu, DType::F64, 0);
        let bn = BatchNorm::new(&mut b, "bn", 2).unwrap();
        let store = b.finish();
        let x = (rand_tensor(&[4, 6, 2], 2) + 3.0).unwrap();
        bn.forward(&x, &store, Mode::Train).unwrap();
        let rm = store.buffer("bn.running_mean").unwrap().to_vec1::<f64>().unwrap();
        assert!(rm.iter().all(|m| (m - 0.3).abs() < 0.05), "{rm:?}");
        let before = store.buffer("bn.running_mean").unwrap().to_vec1::<f64>().unwrap();
        bn.forward(&x, &store, Mode::Eval).unwrap();
        assert_eq!(store.buffer("bn.running_mean").unwrap().to_vec1::<f64>().unwrap(), before);
    }
}
