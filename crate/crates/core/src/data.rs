//! Manifests, resampling, SNR mixing, crops and batching, plus the synthetic desk corpus.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::wav::{read_wav, write_wav, WavEncoding};

/// SNR grid used to mix the synthetic corpus.
pub const SNR_GRID_DB: [f64; 4] = [0.0, 5.0, 10.0, 15.0];
/// Mixtures are scaled down so that no sample exceeds this magnitude.
pub const PEAK_LIMIT: f64 = 0.99;

/// Derives an independent seed from a base seed and a path of integers.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    // splitmix64 finaliser applied after folding in each component
    let mut z = seed;
    for &p in path {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One clean clip and where its noisy counterpart comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clean_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    pub split: Split,
}

impl ManifestEntry {
    fn validate(&self) -> Result<()> {
        match (&self.noisy_path, &self.noise_path, self.snr_db) {
            (Some(_), None, _) => {}
            (None, Some(_), Some(snr)) if snr.is_finite() => {}
            (None, Some(_), _) => return Err(Error::invalid("noise_path needs a finite snr_db")),
            (Some(_), Some(_), _) => return Err(Error::invalid("give noisy_path or noise_path, not both")),
            (None, None, _) => return Err(Error::invalid("entry needs noisy_path or noise_path with snr_db")),
        }
        Ok(())
    }

    /// A short name for reports: the clean file's stem.
    pub fn id(&self) -> String {
        self.clean_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.clean_path.display().to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Parses line-delimited JSON records. Blank lines are skipped; paths are kept as written.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| Error::invalid(format!("manifest line {}: {e}", i + 1)))?;
            entry
                .validate()
                .map_err(|e| Error::invalid(format!("manifest line {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    /// Reads a manifest, resolving relative paths against its directory and checking they exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut m.entries {
            for p in [Some(&mut e.clean_path), e.noisy_path.as_mut(), e.noise_path.as_mut()]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
                if !p.is_file() {
                    return Err(Error::invalid(format!("manifest references missing file {}", p.display())));
                }
            }
        }
        Ok(m)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Noise gain that puts the scaled noise `snr_db` below the clean signal.
pub fn mixing_gain(clean_power: f64, noise_power: f64, snr_db: f64) -> Result<f64> {
    if !(clean_power > 0.0) {
        return Err(Error::invalid("clean signal is silent"));
    }
    if !(noise_power > 0.0) {
        return Err(Error::invalid("noise signal is silent"));
    }
    Ok((clean_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Adds a seeded random crop of `noise` to `clean` at the requested SNR.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64, seed: u64) -> Result<Waveform> {
    if clean.sample_rate() != noise.sample_rate() {
        return Err(Error::invalid("clean and noise sample rates differ"));
    }
    if noise.len() < clean.len() {
        return Err(Error::invalid(format!(
            "noise ({} samples) is shorter than clean ({} samples)",
            noise.len(),
            clean.len()
        )));
    }
    if clean.is_empty() {
        return Err(Error::invalid("empty clean signal"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.random_range(0..=noise.len() - clean.len());
    let crop = &noise.samples()[offset..offset + clean.len()];
    let noise_power = crop.iter().map(|v| v * v).sum::<f64>() / crop.len() as f64;
    let g = mixing_gain(clean.power(), noise_power, snr_db)?;
    let mixed = clean.samples().iter().zip(crop).map(|(c, n)| c + g * n).collect();
    Waveform::new(mixed, clean.sample_rate())
}

/// Gain applied to both signals of a pair so the noisy peak stays within [`PEAK_LIMIT`].
pub fn peak_gain(noisy: &Waveform) -> f64 {
    let peak = noisy.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > PEAK_LIMIT {
        PEAK_LIMIT / peak
    } else {
        1.0
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc resampling with the cutoff at 0.9 of the lower Nyquist frequency.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    const ZERO_CROSSINGS: f64 = 16.0;
    const BETA: f64 = 8.6;
    let source = w.sample_rate();
    if target_rate == 0 {
        return Err(Error::invalid("target sample rate must be positive"));
    }
    if source == target_rate || w.is_empty() {
        return Waveform::new(w.samples().to_vec(), target_rate);
    }
    let ratio = target_rate as f64 / source as f64;
    let out_len = (w.len() as f64 * ratio).round() as usize;
    // cutoff as a fraction of the source rate
    let cutoff = 0.9 * 0.5 * ratio.min(1.0);
    let half_width = ZERO_CROSSINGS / (2.0 * cutoff);
    let norm = bessel_i0(BETA);
    let x = w.samples();
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let t = n as f64 / ratio;
        let lo = (t - half_width).ceil().max(0.0) as usize;
        let hi = ((t + half_width).floor() as usize).min(x.len() - 1);
        let mut acc = 0.0;
        for (k, &xk) in x.iter().enumerate().take(hi + 1).skip(lo) {
            let tau = t - k as f64;
            let arg = 2.0 * cutoff * tau;
            let sinc = if arg == 0.0 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
            let r = tau / half_width;
            let window = bessel_i0(BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
            acc += xk * 2.0 * cutoff * sinc * window;
        }
        out.push(acc);
    }
    Waveform::new(out, target_rate)
}

/// A fixed-length, sample-aligned (clean, noisy) training crop.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSegment {
    pub clean: Waveform,
    pub noisy: Waveform,
}

/// Crops both signals at the same seeded offset, right-padding shorter clips with zeros.
pub fn segment_pair(clean: &Waveform, noisy: &Waveform, segment_length: usize, seed: u64) -> Result<TrainSegment> {
    if clean.len() != noisy.len() || clean.is_empty() {
        return Err(Error::invalid(format!(
            "clean and noisy must be equally long and non-empty, got {} and {}",
            clean.len(),
            noisy.len()
        )));
    }
    if clean.sample_rate() != noisy.sample_rate() {
        return Err(Error::invalid("clean and noisy sample rates differ"));
    }
    if segment_length == 0 {
        return Err(Error::invalid("segment length must be positive"));
    }
    let rate = clean.sample_rate();
    let crop = |w: &Waveform, offset: usize| {
        let mut v: Vec<f64> = w.samples()[offset..(offset + segment_length).min(w.len())].to_vec();
        v.resize(segment_length, 0.0);
        Waveform::new(v, rate)
    };
    let offset = if clean.len() > segment_length {
        ChaCha8Rng::seed_from_u64(seed).random_range(0..=clean.len() - segment_length)
    } else {
        0
    };
    Ok(TrainSegment {
        clean: crop(clean, offset)?,
        noisy: crop(noisy, offset)?,
    })
}

/// A clean clip and its noisy version, both at 16 kHz.
#[derive(Debug, Clone)]
pub struct ClipPair {
    pub id: String,
    pub clean: Waveform,
    pub noisy: Waveform,
}

fn to_16k(w: Waveform) -> Result<Waveform> {
    if w.sample_rate() == DEFAULT_SAMPLE_RATE {
        Ok(w)
    } else {
        resample(&w, DEFAULT_SAMPLE_RATE)
    }
}

/// Reads one entry, resampling to 16 kHz and mixing on the fly when the entry names a noise file.
pub fn load_pair(entry: &ManifestEntry, seed: u64) -> Result<ClipPair> {
    let clean = to_16k(read_wav(&entry.clean_path)?)?;
    let noisy = match (&entry.noisy_path, &entry.noise_path, entry.snr_db) {
        (Some(p), _, _) => to_16k(read_wav(p)?)?,
        (None, Some(p), Some(snr)) => {
            let noise = to_16k(read_wav(p)?)?;
            let mixed = mix_at_snr(&clean, &noise, snr, seed)?;
            let g = peak_gain(&mixed);
            let clean = clean.scaled(g);
            return Ok(ClipPair {
                id: entry.id(),
                clean,
                noisy: mixed.scaled(g),
            });
        }
        _ => return Err(Error::invalid("entry has no noisy source")),
    };
    if clean.len() != noisy.len() {
        return Err(Error::invalid(format!(
            "{}: clean and noisy lengths differ ({} vs {})",
            entry.id(),
            clean.len(),
            noisy.len()
        )));
    }
    Ok(ClipPair {
        id: entry.id(),
        clean,
        noisy,
    })
}

pub fn load_split(manifest: &Manifest, split: Split, seed: u64) -> Result<Vec<ClipPair>> {
    manifest
        .split(split)
        .enumerate()
        .map(|(i, e)| load_pair(e, derive_seed(seed, &[1, i as u64])))
        .collect()
}

/// Deterministic shuffled batches of random crops.
#[derive(Debug, Clone)]
pub struct Loader {
    pairs: Vec<ClipPair>,
    segment_length: usize,
    batch_size: usize,
    seed: u64,
}

impl Loader {
    pub fn new(pairs: Vec<ClipPair>, segment_length: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("no training clips"));
        }
        if batch_size == 0 || segment_length == 0 {
            return Err(Error::invalid("batch size and segment length must be positive"));
        }
        Ok(Self {
            pairs,
            segment_length,
            batch_size,
            seed,
        })
    }

    pub fn pairs(&self) -> &[ClipPair] {
        &self.pairs
    }

    /// Batches per epoch; the last batch may be smaller.
    pub fn batches_per_epoch(&self) -> usize {
        self.pairs.len().div_ceil(self.batch_size)
    }

    /// Batch `index` of `epoch`. Depends only on the seed, epoch and index.
    pub fn batch(&self, epoch: u64, index: usize) -> Result<Vec<TrainSegment>> {
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[2, epoch])));
        let chunk = order
            .chunks(self.batch_size)
            .nth(index)
            .ok_or_else(|| Error::invalid(format!("batch {index} is past the end of the epoch")))?;
        chunk
            .iter()
            .map(|&i| {
                let p = &self.pairs[i];
                let seed = derive_seed(self.seed, &[3, epoch, i as u64]);
                segment_pair(&p.clean, &p.noisy, self.segment_length, seed)
            })
            .collect()
    }
}

/// Settings for the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_clips: usize,
    pub n_test_clips: usize,
    pub clip_seconds: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_clips: 8,
            n_test_clips: 2,
            clip_seconds: 0.5,
            seed: 0,
        }
    }
}

/// Harmonic pseudo-speech: a wandering pitch, a few formant-shaped harmonics and syllable-rate
/// amplitude bursts separated by short pauses.
pub fn pseudo_speech(len: usize, rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = rate as f64;
    let f0_base = rng.random_range(100.0..220.0);
    let vibrato_rate = rng.random_range(3.0..6.0);
    let vibrato_depth = rng.random_range(0.03..0.08);
    let syllable_rate = rng.random_range(3.0..5.0);
    let syllable_phase = rng.random_range(0.0..2.0 * PI);
    let formants = [rng.random_range(500.0..900.0), rng.random_range(1100.0..2000.0), rng.random_range(2300.0..3200.0)];
    let n_harmonics = ((4000.0 / f0_base) as usize).max(1);
    let gains: Vec<f64> = (1..=n_harmonics)
        .map(|k| {
            let f = k as f64 * f0_base;
            let formant: f64 = formants.iter().map(|c| (-((f - c) / 300.0).powi(2)).exp()).sum();
            (0.2 + formant) / k as f64
        })
        .collect();
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(len);
    for n in 0..len {
        let t = n as f64 / fs;
        let f0 = f0_base * (1.0 + vibrato_depth * (2.0 * PI * vibrato_rate * t).sin());
        phase += 2.0 * PI * f0 / fs;
        let envelope = (2.0 * PI * syllable_rate * t / 2.0 + syllable_phase).sin().abs().powf(1.5);
        let voiced: f64 = gains.iter().enumerate().map(|(k, g)| g * ((k + 1) as f64 * phase).sin()).sum();
        out.push(0.1 * envelope * voiced);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Pink,
    Babble,
}

pub fn synth_noise(kind: NoiseKind, len: usize, rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match kind {
        NoiseKind::White => (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        NoiseKind::Pink => {
            // Paul Kellet's economy filter on white noise
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..len)
                .map(|_| {
                    let w: f64 = rng.random_range(-1.0..1.0);
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseKind::Babble => {
            let mut acc = vec![0.0; len];
            for _ in 0..6 {
                for (a, v) in acc.iter_mut().zip(pseudo_speech(len, rate, rng)) {
                    *a += v;
                }
            }
            acc
        }
    }
}

/// Writes `clean_*` and `noisy_*` WAV folders plus `manifest.jsonl` under `dir`.
/// Clip `i` uses noise kind `i mod 3` and SNR `SNR_GRID_DB[i mod 4]`.
pub fn synth_desk_corpus(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    if spec.n_clips == 0 {
        return Err(Error::Config("synth.n_clips: must be at least 1".into()));
    }
    if !(spec.clip_seconds > 0.0 && spec.clip_seconds <= 60.0) {
        return Err(Error::Config("synth.clip_seconds: must lie in (0, 60]".into()));
    }
    let rate = DEFAULT_SAMPLE_RATE;
    let len = (spec.clip_seconds * rate as f64).round() as usize;
    let kinds = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble];
    let mut entries = Vec::new();
    for (split, count, folder) in [(Split::Train, spec.n_clips, "trainset"), (Split::Test, spec.n_test_clips, "testset")] {
        let clean_dir = dir.join(format!("clean_{folder}"));
        let noisy_dir = dir.join(format!("noisy_{folder}"));
        for d in [&clean_dir, &noisy_dir] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for i in 0..count {
            let tag = if split == Split::Train { 0 } else { 1 };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[tag, i as u64]));
            let clean = Waveform::new(pseudo_speech(len, rate, &mut rng), rate)?;
            let noise = Waveform::new(synth_noise(kinds[i % 3], len, rate, &mut rng), rate)?;
            let snr = SNR_GRID_DB[i % SNR_GRID_DB.len()];
            let noisy = mix_at_snr(&clean, &noise, snr, rng.random())?;
            let g = peak_gain(&noisy);
            let name = format!("{}_{i:03}.wav", if split == Split::Train { "p_train" } else { "p_test" });
            let (clean_path, noisy_path) = (clean_dir.join(&name), noisy_dir.join(&name));
            write_wav(&clean_path, &clean.scaled(g), WavEncoding::Float32)?;
            write_wav(&noisy_path, &noisy.scaled(g), WavEncoding::Float32)?;
            entries.push(ManifestEntry {
                clean_path: PathBuf::from(format!("clean_{folder}")).join(&name),
                noisy_path: Some(PathBuf::from(format!("noisy_{folder}")).join(&name)),
                noise_path: None,
                snr_db: Some(snr),
                split,
            });
        }
    }
    let manifest = Manifest { entries };
    manifest.save(dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
