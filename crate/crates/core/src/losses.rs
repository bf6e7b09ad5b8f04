//! Training objectives: time, magnitude, complex, anti-wrapping phase and
//! metric losses, their weighted sum, and the discriminator objective.
//!
//! The free functions work on `dsp` values in f64 and serve as references and
//! for reporting. [`graph`] holds the differentiable versions used in training.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dsp::{anti_wrap, diff_along_freq, diff_along_time, Waveform};
use crate::error::{Error, Result};

/// Weights of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Time loss.
    pub gamma1: f64,
    /// Magnitude loss.
    pub gamma2: f64,
    /// Complex loss.
    pub gamma3: f64,
    /// Metric loss.
    pub gamma4: f64,
    /// Phase loss.
    pub gamma5: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma1: 0.2,
            gamma2: 0.9,
            gamma3: 0.1,
            gamma4: 0.05,
            gamma5: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("gamma3", self.gamma3),
            ("gamma4", self.gamma4),
            ("gamma5", self.gamma5),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{key}: must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Loss values of one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub time: f64,
    pub mag: f64,
    pub complex: f64,
    pub ip: f64,
    pub gd: f64,
    pub iaf: f64,
    pub phase_total: f64,
    pub metric: f64,
    pub generator_total: f64,
    pub discriminator: f64,
}

impl LossReport {
    /// Fills `phase_total` and `generator_total` from the components.
    pub fn from_components(
        time: f64,
        mag: f64,
        complex: f64,
        (ip, gd, iaf): (f64, f64, f64),
        metric: f64,
        discriminator: f64,
        weights: &LossWeights,
    ) -> Self {
        let mut r = Self {
            time,
            mag,
            complex,
            ip,
            gd,
            iaf,
            phase_total: ip + gd + iaf,
            metric,
            generator_total: 0.0,
            discriminator,
        };
        r.generator_total = generator_loss(&r, weights);
        r
    }

    pub fn fields(&self) -> [(&'static str, f64); 10] {
        [
            ("time", self.time),
            ("mag", self.mag),
            ("complex", self.complex),
            ("ip", self.ip),
            ("gd", self.gd),
            ("iaf", self.iaf),
            ("phase_total", self.phase_total),
            ("metric", self.metric),
            ("generator_total", self.generator_total),
            ("discriminator", self.discriminator),
        ]
    }

    /// Name of the first non-finite field, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.fields().into_iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| k)
    }
}

/// Maps a raw PESQ score in `[-0.5, 4.5]` onto `[0, 1]`.
pub fn scale_pesq(raw: f64) -> f64 {
    ((raw + 0.5) / 5.0).clamp(0.0, 1.0)
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("shape mismatch: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn mean_sq(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    same_shape(a, b)?;
    if a.is_empty() {
        return Err(Error::invalid("empty spectrum"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

fn mean_anti_wrap(d: &Array2<f64>) -> f64 {
    d.iter().map(|&v| anti_wrap(v)).sum::<f64>() / d.len() as f64
}

pub fn time_loss(x: &Waveform, x_hat: &Waveform) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::invalid(format!(
            "waveform lengths differ: {} vs {}",
            x.len(),
            x_hat.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::invalid("empty waveform"));
    }
    let sum: f64 = x.samples().iter().zip(x_hat.samples()).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / x.len() as f64)
}

pub fn magnitude_loss(mag: &Array2<f64>, mag_hat: &Array2<f64>) -> Result<f64> {
    mean_sq(mag, mag_hat)
}

pub fn complex_loss(
    re: &Array2<f64>,
    im: &Array2<f64>,
    re_hat: &Array2<f64>,
    im_hat: &Array2<f64>,
) -> Result<f64> {
    Ok(mean_sq(re, re_hat)? + mean_sq(im, im_hat)?)
}

pub fn ip_loss(phase: &Array2<f64>, phase_hat: &Array2<f64>) -> Result<f64> {
    same_shape(phase, phase_hat)?;
    Ok(mean_anti_wrap(&(phase - phase_hat)))
}

pub fn gd_loss(phase: &Array2<f64>, phase_hat: &Array2<f64>) -> Result<f64> {
    same_shape(phase, phase_hat)?;
    Ok(mean_anti_wrap(&diff_along_freq(&(phase - phase_hat))?))
}

pub fn iaf_loss(phase: &Array2<f64>, phase_hat: &Array2<f64>) -> Result<f64> {
    same_shape(phase, phase_hat)?;
    Ok(mean_anti_wrap(&diff_along_time(&(phase - phase_hat))?))
}

pub fn phase_loss(phase: &Array2<f64>, phase_hat: &Array2<f64>) -> Result<f64> {
    Ok(ip_loss(phase, phase_hat)? + gd_loss(phase, phase_hat)? + iaf_loss(phase, phase_hat)?)
}

/// Mean of `(score - 1)^2` over the batch.
pub fn metric_loss(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    Ok(scores.iter().map(|s| (s - 1.0).powi(2)).sum::<f64>() / scores.len() as f64)
}

fn check_targets(q: &[f64]) -> Result<()> {
    match q.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        Some(bad) => Err(Error::invalid(format!("scaled quality target {bad} lies outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Batch mean of `(D(clean, clean) - 1)^2 + (D(clean, enhanced) - q)^2`.
pub fn discriminator_loss(clean_clean: &[f64], clean_enhanced: &[f64], q: &[f64]) -> Result<f64> {
    let n = clean_clean.len();
    if n == 0 || clean_enhanced.len() != n || q.len() != n {
        return Err(Error::invalid("discriminator scores and targets must share a non-empty batch"));
    }
    check_targets(q)?;
    let real = clean_clean.iter().map(|d| (d - 1.0).powi(2)).sum::<f64>() / n as f64;
    let fake = clean_enhanced.iter().zip(q).map(|(d, q)| (d - q).powi(2)).sum::<f64>() / n as f64;
    Ok(real + fake)
}

/// Weighted sum of the components held in `r`; `phase_total` stands for the phase loss.
pub fn generator_loss(r: &LossReport, w: &LossWeights) -> f64 {
    w.gamma1 * r.time + w.gamma2 * r.mag + w.gamma3 * r.complex + w.gamma4 * r.metric + w.gamma5 * r.phase_total
}

/// Differentiable losses over batched tensors. Spectra are `[b, t, f]`, waveforms `[b, len]`,
/// discriminator scores `[b]`.
pub mod graph {
    use std::f64::consts::PI;

    use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

    use super::{check_targets, LossWeights};
    use crate::error::{Error, Result};

    /// Wrapped difference `t - 2 pi round(t / 2 pi)`, in `[-pi, pi]`.
    fn wrap(t: f64) -> f64 {
        t - 2.0 * PI * (t / (2.0 * PI)).round()
    }

    /// Slope of the anti-wrapping function. Zero on the wrap boundary and at zero.
    fn slope(t: f64) -> f64 {
        let w = wrap(t);
        if w.abs() < PI {
            w.signum() * f64::from(w != 0.0)
        } else {
            0.0
        }
    }

    fn map_storage(s: &CpuStorage, l: &Layout, f: fn(f64) -> f64) -> candle_core::Result<CpuStorage> {
        let Some((start, end)) = l.contiguous_offsets() else {
            return Err(candle_core::Error::Msg("anti-wrap expects contiguous input".into()));
        };
        Ok(match s {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].iter().map(|&x| f(x as f64) as f32).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].iter().map(|&x| f(x)).collect()),
            _ => return Err(candle_core::Error::Msg("anti-wrap expects f32 or f64".into())),
        })
    }

    /// Elementwise distance to the nearest multiple of `2 pi`.
    pub struct AntiWrap;

    impl CustomOp1 for AntiWrap {
        fn name(&self) -> &'static str {
            "anti-wrap"
        }

        fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
            Ok((map_storage(s, l, |t| wrap(t).abs())?, l.shape().clone()))
        }

        fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
            let s = arg.contiguous()?.apply_op1_no_bwd(&AntiWrapSlope)?;
            Ok(Some(grad.mul(&s)?))
        }
    }

    struct AntiWrapSlope;

    impl CustomOp1 for AntiWrapSlope {
        fn name(&self) -> &'static str {
            "anti-wrap-slope"
        }

        fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
            Ok((map_storage(s, l, slope)?, l.shape().clone()))
        }
    }

    pub fn anti_wrap(t: &Tensor) -> Result<Tensor> {
        Ok(t.contiguous()?.apply_op1(AntiWrap)?)
    }

    fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
        if a.dims() != b.dims() {
            return Err(Error::invalid(format!("shape mismatch: {:?} vs {:?}", a.dims(), b.dims())));
        }
        Ok(())
    }

    fn mean_sq(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b)?;
        Ok((a - b)?.sqr()?.mean_all()?)
    }

    /// Forward difference along `axis`, one element shorter.
    fn diff(t: &Tensor, axis: usize, what: &str) -> Result<Tensor> {
        let n = t.dim(axis)?;
        if n < 2 {
            return Err(Error::invalid(format!("{what} axis needs at least two entries")));
        }
        Ok((t.narrow(axis, 1, n - 1)? - t.narrow(axis, 0, n - 1)?)?)
    }

    pub fn time_loss(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        same_shape(x, x_hat)?;
        Ok((x - x_hat)?.abs()?.mean_all()?)
    }

    pub fn magnitude_loss(mag: &Tensor, mag_hat: &Tensor) -> Result<Tensor> {
        mean_sq(mag, mag_hat)
    }

    /// Complex loss with both spectra given in polar form.
    pub fn complex_loss(mag: &Tensor, phase: &Tensor, mag_hat: &Tensor, phase_hat: &Tensor) -> Result<Tensor> {
        same_shape(mag, phase)?;
        same_shape(mag_hat, phase_hat)?;
        let re = (mag * phase.cos()?)?;
        let im = (mag * phase.sin()?)?;
        let re_hat = (mag_hat * phase_hat.cos()?)?;
        let im_hat = (mag_hat * phase_hat.sin()?)?;
        Ok((mean_sq(&re, &re_hat)? + mean_sq(&im, &im_hat)?)?)
    }

    pub fn ip_loss(phase: &Tensor, phase_hat: &Tensor) -> Result<Tensor> {
        same_shape(phase, phase_hat)?;
        Ok(anti_wrap(&(phase - phase_hat)?)?.mean_all()?)
    }

    pub fn gd_loss(phase: &Tensor, phase_hat: &Tensor) -> Result<Tensor> {
        same_shape(phase, phase_hat)?;
        let axis = phase.rank() - 1;
        Ok(anti_wrap(&diff(&(phase - phase_hat)?, axis, "frequency")?)?.mean_all()?)
    }

    pub fn iaf_loss(phase: &Tensor, phase_hat: &Tensor) -> Result<Tensor> {
        same_shape(phase, phase_hat)?;
        if phase.rank() < 2 {
            return Err(Error::invalid("phase needs time and frequency axes"));
        }
        let axis = phase.rank() - 2;
        Ok(anti_wrap(&diff(&(phase - phase_hat)?, axis, "time")?)?.mean_all()?)
    }

    pub fn metric_loss(scores: &Tensor) -> Result<Tensor> {
        Ok((scores - 1.0)?.sqr()?.mean_all()?)
    }

    pub fn discriminator_loss(clean_clean: &Tensor, clean_enhanced: &Tensor, q: &Tensor) -> Result<Tensor> {
        same_shape(clean_clean, clean_enhanced)?;
        same_shape(clean_clean, q)?;
        check_targets(&q.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?)?;
        let real = (clean_clean - 1.0)?.sqr()?.mean_all()?;
        let fake = (clean_enhanced - q)?.sqr()?.mean_all()?;
        Ok((real + fake)?)
    }

    /// Scalar loss terms of the generator, each a zero-dimensional tensor.
    #[derive(Debug, Clone)]
    pub struct GeneratorTerms {
        pub time: Tensor,
        pub magnitude: Tensor,
        pub complex: Tensor,
        pub ip: Tensor,
        pub gd: Tensor,
        pub iaf: Tensor,
        /// Absent when the metric discriminator is disabled.
        pub metric: Option<Tensor>,
    }

    impl GeneratorTerms {
        pub fn phase(&self) -> Result<Tensor> {
            Ok(((&self.ip + &self.gd)? + &self.iaf)?)
        }

        /// Weighted sum. Terms with zero weight are left out of the graph entirely,
        /// so they contribute exactly zero gradient.
        pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
            let phase = self.phase()?;
            let mut parts = vec![
                (w.gamma1, &self.time),
                (w.gamma2, &self.magnitude),
                (w.gamma3, &self.complex),
                (w.gamma5, &phase),
            ];
            if let Some(m) = &self.metric {
                parts.push((w.gamma4, m));
            }
            let mut total = self.time.zeros_like()?;
            for (gamma, term) in parts {
                if gamma != 0.0 {
                    total = (total + (term * gamma)?)?;
                }
            }
            Ok(total)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Tensor, Var};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_array(t: usize, f: usize, range: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((t, f), |_| rng.random_range(-range..range))
    }

    fn tensor(a: &Array2<f64>) -> Tensor {
        let (t, f) = a.dim();
        Tensor::from_vec(a.iter().copied().collect::<Vec<_>>(), (1, t, f), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn time_loss_examples() {
        let w = |v: Vec<f64>| Waveform::new(v, 16_000).unwrap();
        assert_eq!(time_loss(&w(vec![1.0, 0.0]), &w(vec![0.0, 0.0])).unwrap(), 0.5);
        assert_eq!(time_loss(&w(vec![0.3, -0.2]), &w(vec![0.3, -0.2])).unwrap(), 0.0);
        assert!(time_loss(&w(vec![1.0]), &w(vec![1.0, 2.0])).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..257).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..257).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut oracle = 0.0;
        for i in 0..a.len() {
            oracle += (a[i] - b[i]).abs();
        }
        oracle /= a.len() as f64;
        let got = time_loss(&w(a), &w(b)).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn magnitude_and_complex_examples() {
        assert_eq!(magnitude_loss(&array![[2.0]], &array![[0.0]]).unwrap(), 4.0);
        assert_eq!(magnitude_loss(&array![[1.5, 2.0]], &array![[1.5, 2.0]]).unwrap(), 0.0);
        assert!(magnitude_loss(&array![[1.0]], &array![[1.0, 2.0]]).is_err());
        let c = complex_loss(&array![[1.0]], &array![[0.0]], &array![[0.0]], &array![[1.0]]).unwrap();
        assert_eq!(c, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let parts: Vec<_> = (0..4).map(|_| random_array(6, 9, 2.0, &mut rng)).collect();
        let mut oracle_m = 0.0;
        let mut oracle_c = 0.0;
        for t in 0..6 {
            for f in 0..9 {
                oracle_m += (parts[0][[t, f]] - parts[1][[t, f]]).powi(2);
                oracle_c += (parts[0][[t, f]] - parts[2][[t, f]]).powi(2) + (parts[1][[t, f]] - parts[3][[t, f]]).powi(2);
            }
        }
        let m = magnitude_loss(&parts[0], &parts[1]).unwrap();
        let c = complex_loss(&parts[0], &parts[1], &parts[2], &parts[3]).unwrap();
        assert!((m - oracle_m / 54.0).abs() < 1e-12);
        assert!((c - oracle_c / 54.0).abs() < 1e-12);
    }

    #[test]
    fn phase_loss_examples() {
        let zero = Array2::zeros((4, 5));
        let pi = Array2::from_elem((4, 5), PI);
        assert!((ip_loss(&zero, &pi).unwrap() - PI).abs() < 1e-12);
        assert_eq!(gd_loss(&zero, &pi).unwrap(), 0.0);
        assert_eq!(iaf_loss(&zero, &pi).unwrap(), 0.0);
        assert!((phase_loss(&zero, &pi).unwrap() - PI).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_array(6, 9, PI, &mut rng);
        let shifted = p.mapv(|v| v + 2.0 * PI);
        assert!(phase_loss(&p, &p).unwrap() == 0.0);
        assert!(phase_loss(&p, &shifted).unwrap() < 1e-12);
        let q = random_array(6, 9, PI, &mut rng);
        let sum = ip_loss(&p, &q).unwrap() + gd_loss(&p, &q).unwrap() + iaf_loss(&p, &q).unwrap();
        assert!((phase_loss(&p, &q).unwrap() - sum).abs() < 1e-12);
        assert!(gd_loss(&Array2::zeros((3, 1)), &Array2::zeros((3, 1))).is_err());
        assert!(iaf_loss(&Array2::zeros((1, 3)), &Array2::zeros((1, 3))).is_err());
    }

    #[test]
    fn adversarial_examples() {
        assert_eq!(metric_loss(&[1.0]).unwrap(), 0.0);
        assert_eq!(metric_loss(&[0.0]).unwrap(), 1.0);
        assert_eq!(metric_loss(&[0.5]).unwrap(), 0.25);
        assert_eq!(discriminator_loss(&[1.0], &[0.3], &[0.3]).unwrap(), 0.0);
        assert_eq!(discriminator_loss(&[0.0], &[1.0], &[0.0]).unwrap(), 2.0);
        assert!(matches!(
            discriminator_loss(&[0.5], &[0.5], &[1.2]),
            Err(Error::InvalidInput(_))
        ));
        let (dcc, dce, q): ([f64; 3], [f64; 3], [f64; 3]) = ([0.9, 0.2, 0.6], [0.1, 0.4, 0.7], [0.3, 0.5, 0.25]);
        let mut oracle = 0.0;
        for i in 0..3 {
            oracle += ((dcc[i] - 1.0).powi(2) + (dce[i] - q[i]).powi(2)) / 3.0;
        }
        assert!((discriminator_loss(&dcc, &dce, &q).unwrap() - oracle).abs() < 1e-12);
        assert_eq!(scale_pesq(4.5), 1.0);
        assert_eq!(scale_pesq(-0.5), 0.0);
        assert!((scale_pesq(2.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn generator_combination() {
        let w = LossWeights::default();
        assert_eq!(generator_loss(&LossReport::default(), &w), 0.0);
        let r = LossReport::from_components(1.0, 1.0, 1.0, (1.0, 0.0, 0.0), 1.0, 0.0, &w);
        assert!((r.generator_total - 1.55).abs() < 1e-12);
        let base = LossReport::from_components(0.3, 0.7, 0.2, (0.1, 0.2, 0.3), 0.4, 0.0, &w);
        let doubled = LossReport::from_components(0.6, 0.7, 0.2, (0.1, 0.2, 0.3), 0.4, 0.0, &w);
        assert!((doubled.generator_total - base.generator_total - w.gamma1 * 0.3).abs() < 1e-12);
        let no_phase = LossWeights { gamma5: 0.0, ..w };
        let r = LossReport::from_components(0.0, 0.0, 0.0, (1.0, 1.0, 1.0), 0.0, 0.0, &no_phase);
        assert_eq!(r.generator_total, 0.0);
        assert!(LossWeights { gamma2: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn tensor_losses_match_references() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, mh) = (random_array(6, 9, 2.0, &mut rng), random_array(6, 9, 2.0, &mut rng));
        let (p, ph) = (random_array(6, 9, 4.0, &mut rng), random_array(6, 9, 4.0, &mut rng));
        let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        close(scalar(&graph::magnitude_loss(&tensor(&m), &tensor(&mh)).unwrap()), magnitude_loss(&m, &mh).unwrap());
        close(scalar(&graph::ip_loss(&tensor(&p), &tensor(&ph)).unwrap()), ip_loss(&p, &ph).unwrap());
        close(scalar(&graph::gd_loss(&tensor(&p), &tensor(&ph)).unwrap()), gd_loss(&p, &ph).unwrap());
        close(scalar(&graph::iaf_loss(&tensor(&p), &tensor(&ph)).unwrap()), iaf_loss(&p, &ph).unwrap());
        let polar = |m: &Array2<f64>, p: &Array2<f64>| (m * &p.mapv(f64::cos), m * &p.mapv(f64::sin));
        let ((r, i), (rh, ih)) = (polar(&m, &p), polar(&mh, &ph));
        close(
            scalar(&graph::complex_loss(&tensor(&m), &tensor(&p), &tensor(&mh), &tensor(&ph)).unwrap()),
            complex_loss(&r, &i, &rh, &ih).unwrap(),
        );
        let q = Tensor::new(&[1.2f64], &Device::Cpu).unwrap();
        assert!(graph::discriminator_loss(&q, &q, &q).is_err());
    }

    #[test]
    fn anti_wrap_slope_is_zero_on_the_boundary() {
        let x = Var::new(&[PI, -PI, 0.0, 1.0, -1.0, 3.0 * PI + 0.5], &Device::Cpu).unwrap();
        let y = graph::anti_wrap(x.as_tensor()).unwrap();
        let g = y.sum_all().unwrap().backward().unwrap();
        let slope = g.get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(slope, vec![0.0, 0.0, 0.0, 1.0, -1.0, -1.0]);
    }

    #[test]
    fn zero_weight_terms_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Var::from_tensor(&tensor(&random_array(6, 9, 3.0, &mut rng))).unwrap();
        let c = tensor(&random_array(6, 9, 3.0, &mut rng));
        let m = tensor(&random_array(6, 9, 1.0, &mut rng).mapv(f64::abs));
        let zero = Tensor::new(0.0f64, &Device::Cpu).unwrap();
        let terms = graph::GeneratorTerms {
            time: zero.clone(),
            magnitude: zero.clone(),
            complex: graph::complex_loss(&m, &c, &m, p.as_tensor()).unwrap(),
            ip: zero.clone(),
            gd: zero.clone(),
            iaf: zero,
            metric: None,
        };
        let w = LossWeights { gamma3: 0.0, ..Default::default() };
        let grads = terms.total(&w).unwrap().backward().unwrap();
        assert!(grads.get(p.as_tensor()).is_none());
    }
    /// Central-difference check of `f` with respect to `x`, step 1e-4, relative error below 1e-3.
    fn check_gradient(x: &Array2<f64>, f: &dyn Fn(&Tensor) -> Tensor) {
        let var = Var::from_tensor(&tensor(x)).unwrap();
        let grads = f(var.as_tensor()).backward().unwrap();
        let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-4;
        let flat: Vec<f64> = x.iter().copied().collect();
        for i in 0..flat.len() {
            let eval = |d: f64| {
                let mut v = flat.clone();
                v[i] += d;
                scalar(&f(&tensor(&Array2::from_shape_vec(x.dim(), v).unwrap())))
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-3);
            assert!(err < 1e-3, "entry {i}: numeric {numeric} vs analytic {}", analytic[i]);
        }
    }

    /// Phase pairs whose differences (and their differences) stay clear of 0 and pi.
    fn smooth_phase_pair(rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
        let clear = |d: &Array2<f64>| d.iter().all(|&v| (0.05..PI - 0.05).contains(&anti_wrap(v)));
        loop {
            let p = random_array(6, 9, PI, rng);
            let ph = random_array(6, 9, PI, rng);
            let d = &p - &ph;
            if clear(&d) && clear(&diff_along_freq(&d).unwrap()) && clear(&diff_along_time(&d).unwrap()) {
                return (p, ph);
            }
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_array(6, 9, 2.0, &mut rng).mapv(f64::abs);
        let mh = random_array(6, 9, 2.0, &mut rng).mapv(f64::abs);
        let (p, ph) = smooth_phase_pair(&mut rng);
        check_gradient(&mh, &|x| graph::magnitude_loss(&tensor(&m), x).unwrap());
        check_gradient(&mh, &|x| graph::complex_loss(&tensor(&m), &tensor(&p), x, &tensor(&ph)).unwrap());
        check_gradient(&ph, &|x| graph::complex_loss(&tensor(&m), &tensor(&p), &tensor(&mh), x).unwrap());
        check_gradient(&ph, &|x| graph::ip_loss(&tensor(&p), x).unwrap());
        check_gradient(&ph, &|x| graph::gd_loss(&tensor(&p), x).unwrap());
        check_gradient(&ph, &|x| graph::iaf_loss(&tensor(&p), x).unwrap());
    }
}
