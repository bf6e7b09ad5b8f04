//! Fused normalisation and activation kernels. Each keeps one saved tensor for
//! the backward pass instead of the chain of intermediates the composed version
//! would hold.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};
use num_traits::Float;

type CResult<T> = candle_core::Result<T>;

fn msg<T>(s: impl Into<String>) -> CResult<T> {
    Err(candle_core::Error::Msg(s.into()))
}

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [T]> {
    let Some((start, end)) = l.contiguous_offsets() else {
        return msg("fused op expects contiguous input");
    };
    Ok(&s.as_slice::<T>()?[start..end])
}

/// Runs a kernel generic over the float type on 1-3 storages of one dtype.
macro_rules! float_kernel {
    ($f:ident, $s1:expr, $l1:expr $(, $s:expr, $l:expr)*) => {
        match $s1 {
            CpuStorage::F32(_) => CpuStorage::F32($f::<f32>(slice($s1, $l1)? $(, slice($s, $l)?)*)?),
            CpuStorage::F64(_) => CpuStorage::F64($f::<f64>(slice($s1, $l1)? $(, slice($s, $l)?)*)?),
            _ => return msg(concat!(stringify!($f), ": expected f32 or f64")),
        }
    };
}

/// Splits a packed gradient vector into tensors shaped like `like`.
fn unpack(packed: &Tensor, like: &[&Tensor]) -> CResult<Vec<Tensor>> {
    let mut out = Vec::with_capacity(like.len());
    let mut offset = 0;
    for t in like {
        let n = t.elem_count();
        out.push(packed.narrow(0, offset, n)?.reshape(t.shape())?);
        offset += n;
    }
    Ok(out)
}

/// Standardises `x` viewed as `[a, m, c]` over the `m` axis for every `(a, c)`,
/// then applies a scale and shift indexed by `c` (`per_c`) or by `m`.
#[derive(Debug, Clone, Copy)]
pub struct AffineStandardize {
    pub a: usize,
    pub m: usize,
    pub c: usize,
    pub per_c: bool,
    pub eps: f64,
}

impl AffineStandardize {
    fn check(&self, x: &Layout, g: &Layout, b: &Layout) -> CResult<()> {
        let k = if self.per_c { self.c } else { self.m };
        if x.shape().elem_count() != self.a * self.m * self.c
            || g.shape().elem_count() != k
            || b.shape().elem_count() != k
        {
            return msg("affine standardize: shape mismatch");
        }
        Ok(())
    }

    /// Per-(a, c) mean and reciprocal standard deviation, accumulated in f64.
    fn stats<T: WithDType>(&self, x: &[T]) -> (Vec<f64>, Vec<f64>) {
        let (m, c) = (self.m, self.c);
        let mut mean = vec![0.0; self.a * c];
        let mut rstd = vec![0.0; self.a * c];
        let mut var = vec![0.0; c];
        for a in 0..self.a {
            let block = &x[a * m * c..(a + 1) * m * c];
            let mu = &mut mean[a * c..(a + 1) * c];
            for row in block.chunks_exact(c) {
                for (s, v) in mu.iter_mut().zip(row) {
                    *s += v.to_f64();
                }
            }
            mu.iter_mut().for_each(|s| *s /= m as f64);
            var.iter_mut().for_each(|v| *v = 0.0);
            for row in block.chunks_exact(c) {
                for ((s, v), mu) in var.iter_mut().zip(row).zip(mu.iter()) {
                    let d = v.to_f64() - mu;
                    *s += d * d;
                }
            }
            for (r, v) in rstd[a * c..(a + 1) * c].iter_mut().zip(&var) {
                *r = 1.0 / (v / m as f64 + self.eps).sqrt();
            }
        }
        (mean, rstd)
    }

    /// Mean and reciprocal standard deviation of one contiguous row.
    fn row_stats<T: WithDType>(&self, row: &[T]) -> (f64, f64) {
        let n = row.len() as f64;
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / n;
        let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
        (mean, 1.0 / (var + self.eps).sqrt())
    }

    /// The `c == 1` layout: standardise each contiguous row of length `m`.
    fn rows_forward<T: WithDType + Float>(&self, x: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
        let mut y = Vec::with_capacity(x.len());
        for row in x.chunks_exact(self.m) {
            let (mean, rstd) = self.row_stats(row);
            let (mean, rstd) = (T::from_f64(mean), T::from_f64(rstd));
            y.extend(row.iter().zip(gamma).zip(beta).map(|((&v, &g), &b)| (v - mean) * rstd * g + b));
        }
        y
    }

    fn rows_backward<T: WithDType + Float>(&self, g: &[T], x: &[T], gamma: &[T]) -> Vec<T> {
        let m = self.m;
        let mut dx = Vec::with_capacity(x.len() + 2 * m);
        let mut dgamma = vec![0.0; m];
        let mut dbeta = vec![0.0; m];
        let mut xhat = vec![0.0; m];
        let mut gh = vec![0.0; m];
        for (row, grow) in x.chunks_exact(m).zip(g.chunks_exact(m)) {
            let (mean, rstd) = self.row_stats(row);
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for i in 0..m {
                let gi = grow[i].to_f64();
                xhat[i] = (row[i].to_f64() - mean) * rstd;
                gh[i] = gi * gamma[i].to_f64();
                dgamma[i] += gi * xhat[i];
                dbeta[i] += gi;
                sum_g += gh[i];
                sum_gx += gh[i] * xhat[i];
            }
            let (sum_g, sum_gx) = (sum_g / m as f64, sum_gx / m as f64);
            dx.extend((0..m).map(|i| T::from_f64(rstd * (gh[i] - sum_g - xhat[i] * sum_gx))));
        }
        dx.extend(dgamma.into_iter().map(T::from_f64));
        dx.extend(dbeta.into_iter().map(T::from_f64));
        dx
    }

    fn forward<T: WithDType + Float>(&self, x: &[T], gamma: &[T], beta: &[T]) -> CResult<Vec<T>> {
        if self.c == 1 && !self.per_c {
            return Ok(self.rows_forward(x, gamma, beta));
        }
        let (mean, rstd) = self.stats(x);
        let (m, c) = (self.m, self.c);
        let mut y = Vec::with_capacity(x.len());
        for a in 0..self.a {
            let mu = &mean[a * c..(a + 1) * c];
            let rs = &rstd[a * c..(a + 1) * c];
            for mi in 0..m {
                let row = &x[(a * m + mi) * c..(a * m + mi + 1) * c];
                for ci in 0..c {
                    let k = if self.per_c { ci } else { mi };
                    let xhat = T::from_f64((row[ci].to_f64() - mu[ci]) * rs[ci]);
                    y.push(xhat * gamma[k] + beta[k]);
                }
            }
        }
        Ok(y)
    }

    /// Packed `[dx, dgamma, dbeta]`.
    fn backward<T: WithDType + Float>(&self, g: &[T], x: &[T], gamma: &[T]) -> CResult<Vec<T>> {
        if self.c == 1 && !self.per_c {
            return Ok(self.rows_backward(g, x, gamma));
        }
        let (mean, rstd) = self.stats(x);
        let (m, c) = (self.m, self.c);
        let k = gamma.len();
        let mut dx = vec![T::zero(); x.len()];
        let mut dgamma = vec![0.0; k];
        let mut dbeta = vec![0.0; k];
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for a in 0..self.a {
            sum_g.iter_mut().for_each(|v| *v = 0.0);
            sum_gx.iter_mut().for_each(|v| *v = 0.0);
            let (mu, rs) = (&mean[a * c..(a + 1) * c], &rstd[a * c..(a + 1) * c]);
            for mi in 0..m {
                let base = (a * m + mi) * c;
                for ci in 0..c {
                    let kk = if self.per_c { ci } else { mi };
                    let gi = g[base + ci].to_f64();
                    let xhat = (x[base + ci].to_f64() - mu[ci]) * rs[ci];
                    dgamma[kk] += gi * xhat;
                    dbeta[kk] += gi;
                    let gh = gi * gamma[kk].to_f64();
                    sum_g[ci] += gh;
                    sum_gx[ci] += gh * xhat;
                }
            }
            for mi in 0..m {
                let base = (a * m + mi) * c;
                for ci in 0..c {
                    let kk = if self.per_c { ci } else { mi };
                    let xhat = (x[base + ci].to_f64() - mu[ci]) * rs[ci];
                    let gh = g[base + ci].to_f64() * gamma[kk].to_f64();
                    let v = rs[ci] * (gh - (sum_g[ci] + xhat * sum_gx[ci]) / m as f64);
                    dx[base + ci] = T::from_f64(v);
                }
            }
        }
        dx.extend(dgamma.into_iter().map(T::from_f64));
        dx.extend(dbeta.into_iter().map(T::from_f64));
        Ok(dx)
    }
}

impl CustomOp3 for AffineStandardize {
    fn name(&self) -> &'static str {
        "affine-standardize"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        self.check(l1, l2, l3)?;
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(self.forward::<f32>(slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?)?),
            CpuStorage::F64(_) => CpuStorage::F64(self.forward::<f64>(slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?)?),
            _ => return msg("affine standardize: expected f32 or f64"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let packed = grad.contiguous()?.apply_op3_no_bwd(
            &x.contiguous()?,
            &gamma.contiguous()?,
            &AffineStandardizeGrad(*self),
        )?;
        let mut it = unpack(&packed, &[x, gamma, beta])?.into_iter();
        Ok((it.next(), it.next(), it.next()))
    }
}

struct AffineStandardizeGrad(AffineStandardize);

impl CustomOp3 for AffineStandardizeGrad {
    fn name(&self) -> &'static str {
        "affine-standardize-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let op = &self.0;
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(op.backward::<f32>(slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?)?),
            CpuStorage::F64(_) => CpuStorage::F64(op.backward::<f64>(slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?)?),
            _ => return msg("affine standardize: expected f32 or f64"),
        };
        let n = l1.shape().elem_count() + 2 * l3.shape().elem_count();
        Ok((out, Shape::from(n)))
    }
}

fn prelu_forward<T: WithDType + Float>(x: &[T], slope: &[T]) -> CResult<Vec<T>> {
    let c = slope.len();
    Ok(x.chunks_exact(c)
        .flat_map(|row| row.iter().zip(slope).map(|(&v, &a)| if v > T::zero() { v } else { a * v }))
        .collect())
}

/// Packed `[dx, dslope]`.
fn prelu_backward<T: WithDType + Float>(g: &[T], x: &[T], slope: &[T]) -> CResult<Vec<T>> {
    let c = slope.len();
    let mut dx = Vec::with_capacity(x.len() + c);
    let mut ds = vec![0.0; c];
    for (grow, xrow) in g.chunks_exact(c).zip(x.chunks_exact(c)) {
        for ci in 0..c {
            if xrow[ci] > T::zero() {
                dx.push(grow[ci]);
            } else {
                dx.push(grow[ci] * slope[ci]);
                ds[ci] += (grow[ci] * xrow[ci]).to_f64();
            }
        }
    }
    dx.extend(ds.into_iter().map(T::from_f64));
    Ok(dx)
}

/// `x` for positive entries, `slope[c] * x` otherwise, over a trailing channel axis.
pub struct PReluOp;

impl CustomOp2 for PReluOp {
    fn name(&self) -> &'static str {
        "prelu"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        if l1.dims().last() != Some(&l2.shape().elem_count()) {
            return msg("prelu: slope length must match the last axis");
        }
        Ok((float_kernel!(prelu_forward, s1, l1, s2, l2), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        slope: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let packed = grad
            .contiguous()?
            .apply_op3_no_bwd(&x.contiguous()?, &slope.contiguous()?, &PReluGrad)?;
        let mut it = unpack(&packed, &[x, slope])?.into_iter();
        Ok((it.next(), it.next()))
    }
}

struct PReluGrad;

impl CustomOp3 for PReluGrad {
    fn name(&self) -> &'static str {
        "prelu-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let n = l1.shape().elem_count() + l3.shape().elem_count();
        Ok((float_kernel!(prelu_backward, s1, l1, s2, l2, s3, l3), Shape::from(n)))
    }
}

fn logistic<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn sigmoid_forward<T: WithDType + Float>(x: &[T]) -> CResult<Vec<T>> {
    Ok(x.iter().map(|&v| logistic(v)).collect())
}

fn sigmoid_backward<T: WithDType + Float>(g: &[T], y: &[T]) -> CResult<Vec<T>> {
    Ok(g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect())
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub struct SigmoidOp;

impl CustomOp1 for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        Ok((float_kernel!(sigmoid_forward, s, l), l.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op2_no_bwd(&res.contiguous()?, &ActivationGrad::Sigmoid)?))
    }
}

fn silu_forward<T: WithDType + Float>(x: &[T]) -> CResult<Vec<T>> {
    Ok(x.iter().map(|&v| v * logistic(v)).collect())
}

fn silu_backward<T: WithDType + Float>(g: &[T], x: &[T]) -> CResult<Vec<T>> {
    Ok(g.iter()
        .zip(x)
        .map(|(&g, &x)| {
            let s = logistic(x);
            g * s * (T::one() + x * (T::one() - s))
        })
        .collect())
}

/// `x * sigmoid(x)`.
pub struct SiluOp;

impl CustomOp1 for SiluOp {
    fn name(&self) -> &'static str {
        "silu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        Ok((float_kernel!(silu_forward, s, l), l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op2_no_bwd(&x.contiguous()?, &ActivationGrad::Silu)?))
    }
}

fn softmax_forward<T: WithDType + Float>(x: &[T], n: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), Float::max);
        let start = y.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            y.push(e);
        }
        let inv = T::one() / sum;
        y[start..].iter_mut().for_each(|e| *e *= inv);
    }
    y
}

fn softmax_backward<T: WithDType + Float>(g: &[T], y: &[T], n: usize) -> Vec<T> {
    let mut dx = Vec::with_capacity(g.len());
    for (grow, yrow) in g.chunks_exact(n).zip(y.chunks_exact(n)) {
        let dot = grow.iter().zip(yrow).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        dx.extend(grow.iter().zip(yrow).map(|(&a, &b)| b * (a - dot)));
    }
    dx
}

/// Softmax over the last axis.
pub struct SoftmaxLast;

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let n = l.dims().last().copied().unwrap_or(1).max(1);
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(softmax_forward::<f32>(slice(s, l)?, n)),
            CpuStorage::F64(_) => CpuStorage::F64(softmax_forward::<f64>(slice(s, l)?, n)),
            _ => return msg("softmax: expected f32 or f64"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op2_no_bwd(&res.contiguous()?, &ActivationGrad::Softmax)?))
    }
}

/// Input gradients of the activations above, from the output gradient and the saved output.
enum ActivationGrad {
    Sigmoid,
    Softmax,
    /// Saves the input rather than the output.
    Silu,
}

impl CustomOp2 for ActivationGrad {
    fn name(&self) -> &'static str {
        "activation-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let n = l1.dims().last().copied().unwrap_or(1).max(1);
        let out = match (self, s1) {
            (ActivationGrad::Sigmoid, _) => float_kernel!(sigmoid_backward, s1, l1, s2, l2),
            (ActivationGrad::Silu, _) => float_kernel!(silu_backward, s1, l1, s2, l2),
            (ActivationGrad::Softmax, CpuStorage::F32(_)) => {
                CpuStorage::F32(softmax_backward::<f32>(slice(s1, l1)?, slice(s2, l2)?, n))
            }
            (ActivationGrad::Softmax, _) => {
                CpuStorage::F64(softmax_backward::<f64>(slice(s1, l1)?, slice(s2, l2)?, n))
            }
        };
        Ok((out, l1.shape().clone()))
    }
}

fn add_bias_forward<T: WithDType + Float>(x: &[T], bias: &[T]) -> CResult<Vec<T>> {
    let mut y = x.to_vec();
    for row in y.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(y)
}

fn column_sums<T: WithDType + Float>(g: &[T], like: &[T]) -> CResult<Vec<T>> {
    let mut acc = vec![T::zero(); like.len()];
    for row in g.chunks_exact(like.len()) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    Ok(acc)
}

/// Adds a bias over the trailing channel axis.
pub struct AddBias;

impl CustomOp2 for AddBias {
    fn name(&self) -> &'static str {
        "add-bias"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        if l1.dims().last() != Some(&l2.shape().elem_count()) {
            return msg("add bias: bias length must match the last axis");
        }
        Ok((float_kernel!(add_bias_forward, s1, l1, s2, l2), l1.shape().clone()))
    }

    fn bwd(
        &self,
        _x: &Tensor,
        bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let db = grad.contiguous()?.apply_op2_no_bwd(bias, &ColumnSums)?;
        Ok((Some(grad.clone()), Some(db)))
    }
}

struct ColumnSums;

impl CustomOp2 for ColumnSums {
    fn name(&self) -> &'static str {
        "column-sums"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        Ok((float_kernel!(column_sums, s1, l1, s2, l2), l2.shape().clone()))
    }
}

/// Float element types the kernels run on.
pub trait Real: WithDType + Float {
    fn exp_in_place(v: &mut [Self]);
}

impl Real for f64 {
    fn exp_in_place(v: &mut [Self]) {
        v.iter_mut().for_each(|x| *x = x.exp());
    }
}

impl Real for f32 {
    /// Branch-free so the loop vectorises; relative error about 3e-7.
    fn exp_in_place(v: &mut [Self]) {
        const ROUND: f32 = 12_582_912.0;
        for x in v.iter_mut() {
            let y = x.clamp(-87.0, 88.0);
            let k = (y * std::f32::consts::LOG2_E + ROUND) - ROUND;
            let r = y - k * 0.693_145_75 - k * 1.428_606_8e-6;
            let p = 1.0
                + r * (1.0
                    + r * (0.5 + r * (0.166_666_67 + r * (0.041_665_79 + r * (0.008_333_452 + r * 0.001_394_4)))));
            *x = p * f32::from_bits(((k as i32 + 127) as u32) << 23);
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    lanes.iter().fold(tail, |acc, &v| acc + v)
}

/// `y += alpha * x`.
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += alpha * x;
    }
}

/// Multi-head scaled dot-product attention on `[n, len, heads * dh]` queries, keys
/// and values. The probabilities are recomputed in the backward pass rather than stored.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub heads: usize,
    pub scale: f64,
}

/// One head's keys and values stored feature-major, so loops over keys are contiguous.
struct HeadCache<T> {
    k: Vec<T>,
    v: Vec<T>,
    p: Vec<T>,
}

impl<T: Real> HeadCache<T> {
    fn new(len: usize, dh: usize) -> Self {
        Self {
            k: vec![T::zero(); dh * len],
            v: vec![T::zero(); dh * len],
            p: vec![T::zero(); len],
        }
    }

    /// Loads head `h` from `[len, stride]` blocks whose key and value columns start at the given offsets.
    fn load(&mut self, block: &[T], stride: usize, k_at: usize, v_at: usize, dh: usize) {
        let len = self.p.len();
        for (j, row) in block.chunks_exact(stride).enumerate() {
            for c in 0..dh {
                self.k[c * len + j] = row[k_at + c];
                self.v[c * len + j] = row[v_at + c];
            }
        }
    }

    /// Softmax probabilities of query `q` against every key, left in `self.p`.
    fn probabilities(&mut self, q: &[T], scale: T) {
        let len = self.p.len();
        self.p.iter_mut().for_each(|p| *p = T::zero());
        for (c, &qc) in q.iter().enumerate() {
            axpy(qc * scale, &self.k[c * len..(c + 1) * len], &mut self.p);
        }
        let max = self.p.iter().copied().fold(T::neg_infinity(), Float::max);
        self.p.iter_mut().for_each(|p| *p -= max);
        T::exp_in_place(&mut self.p);
        let inv = T::one() / self.p.iter().fold(T::zero(), |acc, &p| acc + p);
        self.p.iter_mut().for_each(|p| *p *= inv);
    }
}

impl Attention {
    fn dims(&self, l: &Layout) -> CResult<(usize, usize, usize)> {
        let &[n, len, dim] = l.dims() else {
            return msg("attention: expected [n, len, dim]");
        };
        if dim % self.heads != 0 {
            return msg("attention: heads must divide dim");
        }
        Ok((n, len, dim / self.heads))
    }

    fn forward<T: Real>(&self, q: &[T], k: &[T], v: &[T], n: usize, len: usize, dh: usize) -> Vec<T> {
        let dim = self.heads * dh;
        let scale = T::from_f64(self.scale);
        let mut out = vec![T::zero(); q.len()];
        let mut kv = vec![T::zero(); len * 2 * dim];
        let mut cache = HeadCache::new(len, dh);
        for b in 0..n {
            let range = b * len * dim..(b + 1) * len * dim;
            for (j, row) in kv.chunks_exact_mut(2 * dim).enumerate() {
                row[..dim].copy_from_slice(&k[range.start + j * dim..][..dim]);
                row[dim..].copy_from_slice(&v[range.start + j * dim..][..dim]);
            }
            for h in 0..self.heads {
                cache.load(&kv, 2 * dim, h * dh, dim + h * dh, dh);
                for i in 0..len {
                    let at = range.start + i * dim + h * dh;
                    cache.probabilities(&q[at..at + dh], scale);
                    for c in 0..dh {
                        out[at + c] = dot(&cache.p, &cache.v[c * len..(c + 1) * len]);
                    }
                }
            }
        }
        out
    }

    /// Gradients packed as `[n, len, 3 * dim]` in (query, key, value) order.
    fn backward<T: Real>(&self, qkv: &[T], g: &[T], n: usize, len: usize, dh: usize) -> Vec<T> {
        let dim = self.heads * dh;
        let scale = T::from_f64(self.scale);
        let mut out = vec![T::zero(); qkv.len()];
        let mut cache = HeadCache::new(len, dh);
        let (mut dk, mut dv) = (vec![T::zero(); dh * len], vec![T::zero(); dh * len]);
        let mut ds = vec![T::zero(); len];
        for b in 0..n {
            let packed = &qkv[b * len * 3 * dim..(b + 1) * len * 3 * dim];
            let grad = &g[b * len * dim..(b + 1) * len * dim];
            let target = &mut out[b * len * 3 * dim..(b + 1) * len * 3 * dim];
            for h in 0..self.heads {
                cache.load(packed, 3 * dim, dim + h * dh, 2 * dim + h * dh, dh);
                dk.iter_mut().for_each(|x| *x = T::zero());
                dv.iter_mut().for_each(|x| *x = T::zero());
                for i in 0..len {
                    let qi = &packed[i * 3 * dim + h * dh..][..dh];
                    let gi = &grad[i * dim + h * dh..][..dh];
                    cache.probabilities(qi, scale);
                    ds.iter_mut().for_each(|x| *x = T::zero());
                    for (c, &gc) in gi.iter().enumerate() {
                        axpy(gc, &cache.v[c * len..(c + 1) * len], &mut ds);
                        axpy(gc, &cache.p, &mut dv[c * len..(c + 1) * len]);
                    }
                    let mean = dot(&cache.p, &ds);
                    for (d, &p) in ds.iter_mut().zip(&cache.p) {
                        *d = p * (*d - mean) * scale;
                    }
                    for c in 0..dh {
                        target[i * 3 * dim + h * dh + c] = dot(&ds, &cache.k[c * len..(c + 1) * len]);
                        axpy(qi[c], &ds, &mut dk[c * len..(c + 1) * len]);
                    }
                }
                for j in 0..len {
                    let row = &mut target[j * 3 * dim..(j + 1) * 3 * dim];
                    for c in 0..dh {
                        row[dim + h * dh + c] = dk[c * len + j];
                        row[2 * dim + h * dh + c] = dv[c * len + j];
                    }
                }
            }
        }
        out
    }
}

impl CustomOp3 for Attention {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let (n, len, dh) = self.dims(l1)?;
        if l2.dims() != l1.dims() || l3.dims() != l1.dims() {
            return msg("attention: query, key and value shapes differ");
        }
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(self.forward::<f32>(slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?, n, len, dh)),
            CpuStorage::F64(_) => CpuStorage::F64(self.forward::<f64>(slice(s1, l1)?, slice(s2, l2)?, slice(s3, l3)?, n, len, dh)),
            _ => return msg("attention: expected f32 or f64"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let qkv = Tensor::cat(&[q, k, v], 2)?;
        let packed = qkv.apply_op2_no_bwd(&grad.contiguous()?, &AttentionGrad(*self))?;
        let dim = q.dim(2)?;
        Ok((
            Some(packed.narrow(2, 0, dim)?),
            Some(packed.narrow(2, dim, dim)?),
            Some(packed.narrow(2, 2 * dim, dim)?),
        ))
    }
}

struct AttentionGrad(Attention);

impl CustomOp2 for AttentionGrad {
    fn name(&self) -> &'static str {
        "attention-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let (n, len, dh) = self.0.dims(l2)?;
        let op = &self.0;
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(op.backward::<f32>(slice(s1, l1)?, slice(s2, l2)?, n, len, dh)),
            CpuStorage::F64(_) => CpuStorage::F64(op.backward::<f64>(slice(s1, l1)?, slice(s2, l2)?, n, len, dh)),
            _ => return msg("attention: expected f32 or f64"),
        };
        Ok((out, l1.shape().clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    /// Checks every input gradient of `f` against central differences.
    fn check_grads(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> Tensor) {
        let vars: Vec<Var> = inputs.iter().map(|t| Var::from_tensor(t).unwrap()).collect();
        let ts: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
        let weights = random(f(inputs).dims(), 99);
        let objective = |xs: &[Tensor]| (f(xs) * &weights).unwrap().sum_all().unwrap();
        let grads = objective(&ts).backward().unwrap();
        let h = 1e-6;
        for (which, t) in inputs.iter().enumerate() {
            let analytic = flat(grads.get(&ts[which]).unwrap());
            let base = flat(t);
            for idx in 0..base.len() {
                let eval = |delta: f64| {
                    let mut v = base.clone();
                    v[idx] += delta;
                    let mut xs = inputs.to_vec();
                    xs[which] = Tensor::from_vec(v, t.dims(), &Device::Cpu).unwrap();
                    objective(&xs).to_scalar::<f64>().unwrap()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (numeric - analytic[idx]).abs();
                assert!(
                    err < 1e-6 * numeric.abs().max(1.0),
                    "input {which}[{idx}]: {numeric} vs {}",
                    analytic[idx]
                );
            }
        }
    }

    fn composed_standardize(x: &Tensor, g: &Tensor, b: &Tensor, op: AffineStandardize) -> Tensor {
        let x3 = x.reshape((op.a, op.m, op.c)).unwrap();
        let mean = x3.mean_keepdim(1).unwrap();
        let centred = x3.broadcast_sub(&mean).unwrap();
        let var = centred.sqr().unwrap().mean_keepdim(1).unwrap();
        let xhat = centred
            .broadcast_div(&(var + op.eps).unwrap().sqrt().unwrap())
            .unwrap();
        let (g, b) = if op.per_c {
            (g.reshape((1, 1, op.c)).unwrap(), b.reshape((1, 1, op.c)).unwrap())
        } else {
            (g.reshape((1, op.m, 1)).unwrap(), b.reshape((1, op.m, 1)).unwrap())
        };
        xhat.broadcast_mul(&g)
            .unwrap()
            .broadcast_add(&b)
            .unwrap()
            .reshape(x.dims())
            .unwrap()
    }

    #[test]
    fn standardize_matches_composed_ops_and_gradients() {
        for (per_c, c) in [(true, 3), (false, 3), (false, 1)] {
            let op = AffineStandardize {
                a: 2,
                m: 5,
                c,
                per_c,
                eps: 1e-5,
            };
            let k = if per_c { c } else { 5 };
            let x = random(&[2, 5, c], 1);
            let g = (random(&[k], 2) + 1.0).unwrap();
            let b = random(&[k], 3);
            let fused = x.apply_op3(&g, &b, op).unwrap();
            for (p, q) in flat(&fused).iter().zip(flat(&composed_standardize(&x, &g, &b, op))) {
                assert!((p - q).abs() < 1e-12);
            }
            check_grads(&[x, g, b], &|xs| xs[0].apply_op3(&xs[1], &xs[2], op).unwrap());
        }
    }

    #[test]
    fn prelu_values_and_gradients() {
        let x = random(&[4, 3], 4);
        let a = Tensor::new(&[0.25f64, -0.5, 1.5], &Device::Cpu).unwrap();
        let y = flat(&x.apply_op2(&a, PReluOp).unwrap());
        let (xv, av) = (flat(&x), flat(&a));
        for (i, v) in y.iter().enumerate() {
            let want = if xv[i] > 0.0 { xv[i] } else { av[i % 3] * xv[i] };
            assert_eq!(*v, want);
        }
        check_grads(&[x, a], &|xs| xs[0].apply_op2(&xs[1], PReluOp).unwrap());
    }

    #[test]
    fn softmax_sigmoid_and_bias_gradients() {
        let x = random(&[3, 4], 5);
        let s = x.apply_op1(SoftmaxLast).unwrap();
        for row in s.to_vec2::<f64>().unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        check_grads(std::slice::from_ref(&x), &|xs| xs[0].apply_op1(SoftmaxLast).unwrap());
        check_grads(std::slice::from_ref(&x), &|xs| xs[0].apply_op1(SigmoidOp).unwrap());
        check_grads(std::slice::from_ref(&x), &|xs| xs[0].apply_op1(SiluOp).unwrap());
        let silu = flat(&x.apply_op1(SiluOp).unwrap());
        for (a, b) in silu.iter().zip(flat(&x.silu().unwrap())) {
            assert!((a - b).abs() < 1e-15);
        }
        check_grads(&[x, random(&[4], 6)], &|xs| xs[0].apply_op2(&xs[1], AddBias).unwrap());
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        let x = Tensor::new(&[-1000.0f64, 0.0, 1000.0], &Device::Cpu).unwrap();
        assert_eq!(flat(&x.apply_op1(SigmoidOp).unwrap()), vec![0.0, 0.5, 1.0]);
        let x32 = Tensor::new(&[-200.0f32, 200.0], &Device::Cpu).unwrap();
        assert_eq!(x32.apply_op1(SigmoidOp).unwrap().to_vec1::<f32>().unwrap(), vec![0.0, 1.0]);
    }
    #[test]
    fn attention_matches_composed_ops_and_gradients() {
        let op = Attention { heads: 2, scale: 0.7 };
        let (n, len, heads, dh) = (2, 5, 2, 3);
        let (q, k, v) = (random(&[n, len, 6], 7), random(&[n, len, 6], 8), random(&[n, len, 6], 9));
        let split = |t: &Tensor| t.reshape((n, len, heads, dh)).unwrap().transpose(1, 2).unwrap().contiguous().unwrap();
        let scores = (split(&q).matmul(&split(&k).transpose(2, 3).unwrap()).unwrap() * 0.7).unwrap();
        let composed = scores
            .apply_op1(SoftmaxLast)
            .unwrap()
            .matmul(&split(&v))
            .unwrap()
            .transpose(1, 2)
            .unwrap()
            .reshape((n, len, 6))
            .unwrap();
        let fused = q.apply_op3(&k, &v, op).unwrap();
        for (a, b) in flat(&fused).iter().zip(flat(&composed)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        check_grads(&[q, k, v], &|xs| xs[0].apply_op3(&xs[1], &xs[2], op).unwrap());
    }
}
