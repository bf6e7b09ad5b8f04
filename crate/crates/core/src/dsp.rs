//! Deterministic signal transforms with no learned parameters.
//!
//! Spectra are laid out frame-major: a `(frames, bins)` array where
//! `bins = n_fft / 2 + 1`. Frames are centred, with `n_fft / 2` samples of
//! reflect padding on both ends, so a waveform of `L` samples produces
//! `1 + L / hop` frames.

use std::f64::consts::PI;

use ndarray::{s, Array2, Axis};
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magnitudes below this are treated as exact zeros when extracting phase.
pub const ZERO_MAGNITUDE: f64 = 1e-10;
/// Floor for the squared-window overlap-add envelope during synthesis.
pub const ENVELOPE_FLOOR: f64 = 1e-11;
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// A mono signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean square over all samples.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|x| x * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    /// Periodic Hann window.
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 400,
            win_length: 400,
            hop_length: 100,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn new(n_fft: usize, win_length: usize, hop_length: usize) -> Result<Self> {
        let cfg = Self {
            n_fft,
            win_length,
            hop_length,
            window: WindowKind::Hann,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks the size ordering and that the window overlap-adds to a constant at this hop.
    pub fn validate(&self) -> Result<()> {
        if self.hop_length == 0 || self.n_fft < 2 {
            return Err(Error::Config("stft sizes must be positive".into()));
        }
        if !(self.hop_length <= self.win_length && self.win_length <= self.n_fft) {
            return Err(Error::Config(format!(
                "stft requires hop_length <= win_length <= n_fft, got {}/{}/{}",
                self.hop_length, self.win_length, self.n_fft
            )));
        }
        let window = self.window();
        let mut sums = vec![0.0; self.hop_length];
        for (i, w) in window.iter().enumerate() {
            sums[i % self.hop_length] += w;
        }
        let max = sums.iter().cloned().fold(f64::MIN, f64::max);
        let min = sums.iter().cloned().fold(f64::MAX, f64::min);
        if max <= 0.0 || (max - min) / max > 1e-9 {
            return Err(Error::Config(format!(
                "window does not satisfy constant overlap-add at hop {}",
                self.hop_length
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count produced for a waveform of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        1 + len / self.hop_length
    }

    /// Analysis window zero-padded (centred) to `n_fft` samples.
    pub fn window(&self) -> Vec<f64> {
        let core: Vec<f64> = match self.window {
            WindowKind::Hann => (0..self.win_length)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / self.win_length as f64).cos())
                .collect(),
        };
        let mut out = vec![0.0; self.n_fft];
        let offset = (self.n_fft - self.win_length) / 2;
        out[offset..offset + self.win_length].copy_from_slice(&core);
        out
    }

    pub fn center_pad(&self) -> usize {
        self.n_fft / 2
    }

    /// Number of output samples synthesis can place for `frames` frames.
    pub fn representable_len(&self, frames: usize) -> usize {
        if frames == 0 {
            return 0;
        }
        self.n_fft + self.hop_length * (frames - 1) - self.center_pad()
    }
}

/// Magnitude and wrapped phase over `(frames, bins)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumPair {
    pub magnitude: Array2<f64>,
    pub phase: Array2<f64>,
}

impl SpectrumPair {
    pub fn new(magnitude: Array2<f64>, phase: Array2<f64>) -> Result<Self> {
        if magnitude.dim() != phase.dim() {
            return Err(Error::invalid(format!(
                "magnitude shape {:?} does not match phase shape {:?}",
                magnitude.dim(),
                phase.dim()
            )));
        }
        if magnitude.iter().any(|&m| !(m >= 0.0)) {
            return Err(Error::invalid("magnitude must be nonnegative"));
        }
        Ok(Self { magnitude, phase })
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            magnitude: Array2::zeros((frames, bins)),
            phase: Array2::zeros((frames, bins)),
        }
    }

    pub fn frames(&self) -> usize {
        self.magnitude.nrows()
    }

    pub fn bins(&self) -> usize {
        self.magnitude.ncols()
    }

    /// Real and imaginary parts.
    pub fn to_complex(&self) -> (Array2<f64>, Array2<f64>) {
        let re = ndarray::Zip::from(&self.magnitude)
            .and(&self.phase)
            .map_collect(|m, p| m * p.cos());
        let im = ndarray::Zip::from(&self.magnitude)
            .and(&self.phase)
            .map_collect(|m, p| m * p.sin());
        (re, im)
    }
}

/// Principal-value angle in `(-pi, pi]`, zero for vanishing magnitude.
pub fn wrapped_angle(re: f64, im: f64) -> f64 {
    if re.hypot(im) < ZERO_MAGNITUDE {
        return 0.0;
    }
    let a = im.atan2(re);
    if a <= -PI {
        PI
    } else {
        a
    }
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    if n > pad {
        out.extend((1..=pad).rev().map(|i| x[i]));
        out.extend_from_slice(x);
        out.extend((0..pad).map(|i| x[n - 2 - i]));
    } else {
        // too short to reflect
        out.extend(std::iter::repeat_n(0.0, pad));
        out.extend_from_slice(x);
        out.extend(std::iter::repeat_n(0.0, pad));
    }
    out
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<SpectrumPair> {
    if w.is_empty() {
        return Err(Error::invalid("cannot take the STFT of an empty waveform"));
    }
    cfg.validate()?;
    let n_fft = cfg.n_fft;
    let bins = cfg.n_bins();
    let frames = cfg.n_frames(w.len());
    let padded = reflect_pad(w.samples(), cfg.center_pad());
    let window = cfg.window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);

    let mut magnitude = Array2::zeros((frames, bins));
    let mut phase = Array2::zeros((frames, bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for t in 0..frames {
        let start = t * cfg.hop_length;
        for (n, slot) in buf.iter_mut().enumerate() {
            *slot = Complex64::new(padded[start + n] * window[n], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            let c = buf[k];
            let m = c.norm();
            magnitude[[t, k]] = m;
            phase[[t, k]] = if m < ZERO_MAGNITUDE {
                0.0
            } else {
                wrapped_angle(c.re, c.im)
            };
        }
    }
    Ok(SpectrumPair { magnitude, phase })
}

/// Overlap-add synthesis normalised by the squared-window envelope, cropped or
/// zero-padded to `length` samples.
pub fn istft(s: &SpectrumPair, cfg: &StftConfig, length: usize) -> Result<Waveform> {
    cfg.validate()?;
    if s.magnitude.dim() != s.phase.dim() {
        return Err(Error::invalid("magnitude and phase shapes differ"));
    }
    if s.bins() != cfg.n_bins() {
        return Err(Error::invalid(format!(
            "spectrum has {} bins, config expects {}",
            s.bins(),
            cfg.n_bins()
        )));
    }
    let frames = s.frames();
    if frames == 0 {
        return Err(Error::invalid("spectrum has no frames"));
    }
    let n_fft = cfg.n_fft;
    let hop = cfg.hop_length;
    let window = cfg.window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
    let total = n_fft + hop * (frames - 1);
    let mut out = vec![0.0; total];
    let mut envelope = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let bins = cfg.n_bins();
    for t in 0..frames {
        for k in 0..bins {
            let (m, p) = (s.magnitude[[t, k]], s.phase[[t, k]]);
            buf[k] = Complex64::from_polar(m, p);
        }
        // Hermitian completion; DC and Nyquist are taken as real.
        buf[0].im = 0.0;
        if n_fft.is_multiple_of(2) {
            buf[n_fft / 2].im = 0.0;
        }
        for k in bins..n_fft {
            buf[k] = buf[n_fft - k].conj();
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for n in 0..n_fft {
            out[start + n] += buf[n].re / n_fft as f64 * window[n];
            envelope[start + n] += window[n] * window[n];
        }
    }
    let pad = cfg.center_pad();
    let samples = (0..length)
        .map(|i| {
            let j = i + pad;
            if j < total {
                out[j] / envelope[j].max(ENVELOPE_FLOOR)
            } else {
                0.0
            }
        })
        .collect();
    Waveform::new(samples, DEFAULT_SAMPLE_RATE)
}

fn check_compression(c: f64) -> Result<()> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::invalid(format!(
            "compression factor must lie in (0, 1], got {c}"
        )));
    }
    Ok(())
}

fn check_nonnegative(m: &Array2<f64>) -> Result<()> {
    if m.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::invalid("magnitude has negative or NaN entries"));
    }
    Ok(())
}

/// Power-law compression `m^c`.
pub fn compress_magnitude(m: &Array2<f64>, c: f64) -> Result<Array2<f64>> {
    check_compression(c)?;
    check_nonnegative(m)?;
    Ok(m.mapv(|v| v.powf(c)))
}

/// Inverse of [`compress_magnitude`]: `m^(1/c)`.
pub fn decompress_magnitude(m: &Array2<f64>, c: f64) -> Result<Array2<f64>> {
    check_compression(c)?;
    check_nonnegative(m)?;
    Ok(m.mapv(|v| v.powf(1.0 / c)))
}

/// Distance of `t` to the nearest multiple of `2 pi`, in `[0, pi]`.
pub fn anti_wrap(t: f64) -> f64 {
    // f64::round rounds half away from zero
    (t - 2.0 * PI * (t / (2.0 * PI)).round()).abs()
}

pub fn anti_wrap_array(t: &Array2<f64>) -> Array2<f64> {
    t.mapv(anti_wrap)
}

/// Forward difference along the frequency (column) axis.
pub fn diff_along_freq(t: &Array2<f64>) -> Result<Array2<f64>> {
    if t.ncols() < 2 {
        return Err(Error::invalid("frequency axis needs at least two bins"));
    }
    Ok(&t.slice(s![.., 1..]) - &t.slice(s![.., ..-1]))
}

/// Forward difference along the time (row) axis.
pub fn diff_along_time(t: &Array2<f64>) -> Result<Array2<f64>> {
    if t.nrows() < 2 {
        return Err(Error::invalid("time axis needs at least two frames"));
    }
    Ok(&t.slice(s![1.., ..]) - &t.slice(s![..-1, ..]))
}

/// Sum of squared magnitudes over all frames and bins.
pub fn spectral_energy(s: &SpectrumPair) -> f64 {
    s.magnitude.iter().map(|m| m * m).sum()
}

/// Index of the loudest bin in each frame.
pub fn peak_bins(s: &SpectrumPair) -> Vec<usize> {
    s.magnitude
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::MIN), |best, (k, &m)| if m > best.1 { (k, m) } else { best })
                .0
        })
        .collect()
}
