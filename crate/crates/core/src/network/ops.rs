//! Hand-written CPU kernels with explicit backward passes.

use std::f64::consts::{FRAC_PI_2, PI};

use candle_core::{
    backend::BackendStorage, CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor, WithDType,
};

type CResult<T> = candle_core::Result<T>;

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("custom op expects contiguous input".into()))?;
    Ok(&s.as_slice::<T>()?[start..end])
}

fn check_float(a: DType, b: DType, op: &str) -> CResult<()> {
    if a != b || !matches!(a, DType::F32 | DType::F64) {
        return Err(candle_core::Error::Msg(format!(
            "{op}: expected matching f32/f64 inputs, got {a:?} and {b:?}"
        )));
    }
    Ok(())
}

/// Wrapped phase from pseudo-real and pseudo-imaginary components:
/// `atan(i / r) - pi/2 * sgn(i) * (sgn(r) - 1)` with `sgn(t) = 1` for `t >= 0`.
///
/// The origin maps to 0 and the result always lies in `(-pi, pi]`.
pub fn phase_from_components(re: f64, im: f64) -> f64 {
    // fold negative zero so the t >= 0 branch sees +0
    let (re, im) = (re + 0.0, im + 0.0);
    if re == 0.0 && im == 0.0 {
        return 0.0;
    }
    let sgn = |t: f64| if t >= 0.0 { 1.0 } else { -1.0 };
    let phase = (im / re).atan() - FRAC_PI_2 * sgn(im) * (sgn(re) - 1.0);
    if phase <= -PI {
        PI
    } else {
        phase
    }
}

/// Elementwise [`phase_from_components`] over `(re, im)` tensors.
pub struct PhaseFromComponents;

impl PhaseFromComponents {
    fn run<T: WithDType>(re: &[T], im: &[T]) -> Vec<T> {
        let lo = T::from_f64(-PI);
        let hi = T::from_f64(PI);
        re.iter()
            .zip(im)
            .map(|(&r, &i)| {
                let v = T::from_f64(phase_from_components(r.to_f64(), i.to_f64()));
                if v <= lo {
                    hi
                } else {
                    v
                }
            })
            .collect()
    }
}

impl CustomOp2 for PhaseFromComponents {
    fn name(&self) -> &'static str {
        "phase-from-components"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        check_float(s1.dtype(), s2.dtype(), self.name())?;
        if l1.shape() != l2.shape() {
            return Err(candle_core::Error::Msg("phase components differ in shape".into()));
        }
        let out = match s1.dtype() {
            DType::F32 => CpuStorage::F32(Self::run::<f32>(
                contiguous(s1, l1)?,
                contiguous(s2, l2)?,
            )),
            _ => CpuStorage::F64(Self::run::<f64>(contiguous(s1, l1)?, contiguous(s2, l2)?)),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        re: &Tensor,
        im: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        // d/dr = -i / (r^2 + i^2), d/di = r / (r^2 + i^2); zero at the origin
        let denom = ((re.sqr()? + im.sqr()?)? + 1e-30)?;
        let g = (grad / denom)?;
        let d_re = (im.neg()? * &g)?;
        let d_im = (re * &g)?;
        Ok((Some(d_re), Some(d_im)))
    }
}

/// Depthwise 1-D convolution over the middle axis of `[n, len, channels]` with
/// an odd kernel `[k, channels]` and same-length zero padding. No bias.
pub struct DepthwiseConv1d;

struct Dims {
    n: usize,
    len: usize,
    ch: usize,
    k: usize,
}

fn dw_dims(x: &Layout, w: &Layout) -> CResult<Dims> {
    let (n, len, ch) = x.shape().dims3()?;
    let (k, wc) = w.shape().dims2()?;
    if wc != ch || k % 2 == 0 {
        return Err(candle_core::Error::Msg(format!(
            "depthwise conv: kernel {:?} incompatible with input {:?}",
            w.dims(),
            x.dims()
        )));
    }
    Ok(Dims { n, len, ch, k })
}

fn dw_forward<T: WithDType>(x: &[T], w: &[T], d: &Dims) -> Vec<T> {
    let pad = d.k / 2;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..d.n {
        let base = b * d.len * d.ch;
        for l in 0..d.len {
            let dst = &mut out[base + l * d.ch..base + (l + 1) * d.ch];
            for k in 0..d.k {
                let src = l + k;
                if src < pad || src - pad >= d.len {
                    continue;
                }
                let xs = &x[base + (src - pad) * d.ch..base + (src - pad + 1) * d.ch];
                let ws = &w[k * d.ch..(k + 1) * d.ch];
                for ((o, &xv), &wv) in dst.iter_mut().zip(xs).zip(ws) {
                    *o += xv * wv;
                }
            }
        }
    }
    out
}

fn dw_grad_input<T: WithDType>(g: &[T], w: &[T], d: &Dims) -> Vec<T> {
    let pad = d.k / 2;
    let mut out = vec![T::zero(); g.len()];
    for b in 0..d.n {
        let base = b * d.len * d.ch;
        for l in 0..d.len {
            let gs = &g[base + l * d.ch..base + (l + 1) * d.ch];
            for k in 0..d.k {
                let src = l + k;
                if src < pad || src - pad >= d.len {
                    continue;
                }
                let dst = &mut out[base + (src - pad) * d.ch..base + (src - pad + 1) * d.ch];
                let ws = &w[k * d.ch..(k + 1) * d.ch];
                for ((o, &gv), &wv) in dst.iter_mut().zip(gs).zip(ws) {
                    *o += gv * wv;
                }
            }
        }
    }
    out
}

fn dw_grad_weight<T: WithDType>(g: &[T], x: &[T], d: &Dims) -> Vec<T> {
    let pad = d.k / 2;
    let mut out = vec![T::zero(); d.k * d.ch];
    for b in 0..d.n {
        let base = b * d.len * d.ch;
        for l in 0..d.len {
            let gs = &g[base + l * d.ch..base + (l + 1) * d.ch];
            for k in 0..d.k {
                let src = l + k;
                if src < pad || src - pad >= d.len {
                    continue;
                }
                let xs = &x[base + (src - pad) * d.ch..base + (src - pad + 1) * d.ch];
                let dst = &mut out[k * d.ch..(k + 1) * d.ch];
                for ((o, &gv), &xv) in dst.iter_mut().zip(gs).zip(xs) {
                    *o += gv * xv;
                }
            }
        }
    }
    out
}

macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $f:ident, $d:expr) => {
        match $s1.dtype() {
            DType::F32 => CpuStorage::F32($f::<f32>(
                contiguous($s1, $l1)?,
                contiguous($s2, $l2)?,
                $d,
            )),
            _ => CpuStorage::F64($f::<f64>(contiguous($s1, $l1)?, contiguous($s2, $l2)?, $d)),
        }
    };
}

impl CustomOp2 for DepthwiseConv1d {
    fn name(&self) -> &'static str {
        "depthwise-conv1d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        check_float(s1.dtype(), s2.dtype(), self.name())?;
        let d = dw_dims(l1, l2)?;
        let out = dispatch!(s1, l1, s2, l2, dw_forward, &d);
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(&w.contiguous()?, &DepthwiseGradInput)?;
        let gw = grad.apply_op2_no_bwd(&x.contiguous()?, &DepthwiseGradWeight { k: w.dim(0)? })?;
        Ok((Some(gx), Some(gw)))
    }
}

struct DepthwiseGradInput;

impl CustomOp2 for DepthwiseGradInput {
    fn name(&self) -> &'static str {
        "depthwise-conv1d-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        check_float(s1.dtype(), s2.dtype(), self.name())?;
        let d = dw_dims(l1, l2)?;
        let out = dispatch!(s1, l1, s2, l2, dw_grad_input, &d);
        Ok((out, l1.shape().clone()))
    }
}

struct DepthwiseGradWeight {
    k: usize,
}

impl CustomOp2 for DepthwiseGradWeight {
    fn name(&self) -> &'static str {
        "depthwise-conv1d-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        check_float(s1.dtype(), s2.dtype(), self.name())?;
        let (n, len, ch) = l1.shape().dims3()?;
        if l2.dims() != l1.dims() {
            return Err(candle_core::Error::Msg("depthwise grad: shape mismatch".into()));
        }
        let d = Dims {
            n,
            len,
            ch,
            k: self.k,
        };
        let out = dispatch!(s1, l1, s2, l2, dw_grad_weight, &d);
        Ok((out, Shape::from((self.k, ch))))
    }
}

/// Index map shared by convolution and transposed convolution on
/// `[batch, time, freq, channels]` maps: tap `(i, j)` of small-grid position
/// `(u, v)` touches large-grid position `(u*st + i*dt - pt, v*sf + j*df - pf)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapGrid {
    pub batch: usize,
    pub small: (usize, usize),
    pub large: (usize, usize),
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub pad: (usize, usize),
    pub channels: usize,
}

/// Which side of the tap map an operation reads and writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapMode {
    /// `[b, large, taps*c]` to `[b, small, c]`, summing taps (convolution).
    Gather,
    /// Adjoint of `Gather`.
    GatherAdjoint,
    /// `[b, small, taps*c]` to `[b, large, c]`, summing taps (transposed convolution).
    Scatter,
    /// Adjoint of `Scatter`.
    ScatterAdjoint,
}

impl TapMode {
    fn adjoint(self) -> Self {
        match self {
            TapMode::Gather => TapMode::GatherAdjoint,
            TapMode::GatherAdjoint => TapMode::Gather,
            TapMode::Scatter => TapMode::ScatterAdjoint,
            TapMode::ScatterAdjoint => TapMode::Scatter,
        }
    }
}

impl TapGrid {
    fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    fn shapes(&self, mode: TapMode) -> (Shape, Shape) {
        let tc = self.taps() * self.channels;
        let (s, l) = (self.small, self.large);
        let small = |c| Shape::from((self.batch, s.0, s.1, c));
        let large = |c| Shape::from((self.batch, l.0, l.1, c));
        match mode {
            TapMode::Gather => (large(tc), small(self.channels)),
            TapMode::GatherAdjoint => (small(self.channels), large(tc)),
            TapMode::Scatter => (small(tc), large(self.channels)),
            TapMode::ScatterAdjoint => (large(self.channels), small(tc)),
        }
    }

    fn run<T: WithDType>(&self, mode: TapMode, src: &[T]) -> Vec<T> {
        let c = self.channels;
        let taps = self.taps();
        let (_, out_shape) = self.shapes(mode);
        let mut out = vec![T::zero(); out_shape.elem_count()];
        let (st, sf) = self.small;
        let (lt, lf) = self.large;
        for b in 0..self.batch {
            for u in 0..st {
                for i in 0..self.kernel.0 {
                    let Some(bt) = (u * self.stride.0 + i * self.dilation.0).checked_sub(self.pad.0) else {
                        continue;
                    };
                    if bt >= lt {
                        continue;
                    }
                    for v in 0..sf {
                        for j in 0..self.kernel.1 {
                            let Some(bf) = (v * self.stride.1 + j * self.dilation.1).checked_sub(self.pad.1) else {
                                continue;
                            };
                            if bf >= lf {
                                continue;
                            }
                            let tap = i * self.kernel.1 + j;
                            let small = (b * st + u) * sf + v;
                            let large = (b * lt + bt) * lf + bf;
                            let (from, to, add) = match mode {
                                TapMode::Gather => ((large * taps + tap) * c, small * c, true),
                                TapMode::GatherAdjoint => (small * c, (large * taps + tap) * c, false),
                                TapMode::Scatter => ((small * taps + tap) * c, large * c, true),
                                TapMode::ScatterAdjoint => (large * c, (small * taps + tap) * c, false),
                            };
                            let dst = &mut out[to..to + c];
                            let src = &src[from..from + c];
                            if add {
                                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                            } else {
                                dst.copy_from_slice(src);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Applies a [`TapGrid`] map; its backward is the adjoint map.
#[derive(Debug, Clone, Copy)]
pub struct TapShift {
    pub grid: TapGrid,
    pub mode: TapMode,
}

impl CustomOp1 for TapShift {
    fn name(&self) -> &'static str {
        "tap-shift"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (input, output) = self.grid.shapes(self.mode);
        if l.shape() != &input {
            return Err(candle_core::Error::Msg(format!(
                "tap shift: expected input {input:?}, got {:?}",
                l.shape()
            )));
        }
        let out = match s.dtype() {
            DType::F32 => CpuStorage::F32(self.grid.run(self.mode, contiguous::<f32>(s, l)?)),
            DType::F64 => CpuStorage::F64(self.grid.run(self.mode, contiguous::<f64>(s, l)?)),
            other => {
                return Err(candle_core::Error::Msg(format!("tap shift: unsupported {other:?}")))
            }
        };
        Ok((out, output))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let adjoint = TapShift {
            grid: self.grid,
            mode: self.mode.adjoint(),
        };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&adjoint)?))
    }
}

pub fn phase_from_tensors(re: &Tensor, im: &Tensor) -> CResult<Tensor> {
    re.contiguous()?
        .apply_op2(&im.contiguous()?, PhaseFromComponents)
}

pub fn depthwise_conv1d(x: &Tensor, w: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, DepthwiseConv1d)
}
