//! Objective metrics (SSNR, SI-SDR) and the quality oracles that stand in for PESQ.

use std::path::PathBuf;
use std::process::Command;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::losses::scale_pesq;
use crate::wav::{write_wav, WavEncoding};

/// Bounds returned by [`si_sdr`] for perfect and orthogonal estimates.
pub const SI_SDR_CAP_DB: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsnrConfig {
    pub frame_ms: f64,
    /// Fraction of a frame shared with the next one.
    pub overlap: f64,
    pub min_db: f64,
    pub max_db: f64,
    /// Frames whose clean energy falls below this are skipped.
    pub silence_energy: f64,
}

impl Default for SsnrConfig {
    fn default() -> Self {
        Self {
            frame_ms: 30.0,
            overlap: 0.5,
            min_db: -10.0,
            max_db: 35.0,
            silence_energy: 1e-8,
        }
    }
}

impl SsnrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_ms > 0.0 && self.frame_ms.is_finite()) {
            return Err(Error::Config("ssnr.frame_ms: must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config("ssnr.overlap: must lie in [0, 1)".into()));
        }
        if !(self.min_db < self.max_db) {
            return Err(Error::Config("ssnr.min_db: must be below max_db".into()));
        }
        if !(self.silence_energy >= 0.0) {
            return Err(Error::Config("ssnr.silence_energy: must be >= 0".into()));
        }
        Ok(())
    }

    /// Frame length and hop in samples at `rate`.
    pub fn framing(&self, rate: u32) -> (usize, usize) {
        let frame = ((self.frame_ms / 1000.0 * rate as f64).round() as usize).max(1);
        let hop = ((frame as f64 * (1.0 - self.overlap)).round() as usize).max(1);
        (frame, hop)
    }
}

fn check_pair(clean: &Waveform, other: &Waveform) -> Result<()> {
    if clean.len() != other.len() {
        return Err(Error::invalid(format!(
            "waveform lengths differ: {} vs {}",
            clean.len(),
            other.len()
        )));
    }
    if clean.sample_rate() != other.sample_rate() {
        return Err(Error::invalid("waveforms have different sample rates"));
    }
    if clean.is_empty() {
        return Err(Error::invalid("empty waveform"));
    }
    Ok(())
}

pub fn ssnr(clean: &Waveform, enhanced: &Waveform) -> Result<f64> {
    ssnr_with(clean, enhanced, &SsnrConfig::default())
}

/// Segmental SNR in dB. A signal shorter than one frame is scored as a single frame.
pub fn ssnr_with(clean: &Waveform, enhanced: &Waveform, cfg: &SsnrConfig) -> Result<f64> {
    check_pair(clean, enhanced)?;
    cfg.validate()?;
    let (frame, hop) = cfg.framing(clean.sample_rate());
    let frame = frame.min(clean.len());
    let (c, e) = (clean.samples(), enhanced.samples());
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + frame <= c.len() {
        let end = start + frame;
        let signal: f64 = c[start..end].iter().map(|v| v * v).sum();
        if signal >= cfg.silence_energy && signal > 0.0 {
            let noise: f64 = c[start..end].iter().zip(&e[start..end]).map(|(a, b)| (a - b).powi(2)).sum();
            let db = if noise == 0.0 {
                cfg.max_db
            } else {
                10.0 * (signal / noise).log10()
            };
            total += db.clamp(cfg.min_db, cfg.max_db);
            count += 1;
        }
        start += hop;
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("every SSNR frame of the clean signal is silent".into()));
    }
    Ok(total / count as f64)
}

/// Scale-invariant SDR in dB, clamped to `[-SI_SDR_CAP_DB, SI_SDR_CAP_DB]`.
pub fn si_sdr(clean: &Waveform, enhanced: &Waveform) -> Result<f64> {
    check_pair(clean, enhanced)?;
    let (c, e) = (clean.samples(), enhanced.samples());
    let energy: f64 = c.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::UndefinedMetric("SI-SDR needs a non-zero clean signal".into()));
    }
    let alpha = c.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / energy;
    let target = alpha * alpha * energy;
    let residual: f64 = c.iter().zip(e).map(|(a, b)| (b - alpha * a).powi(2)).sum();
    let db = if residual == 0.0 {
        SI_SDR_CAP_DB
    } else if target == 0.0 {
        -SI_SDR_CAP_DB
    } else {
        10.0 * (target / residual).log10()
    };
    Ok(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// Scores a degraded waveform against its clean reference on `[0, 1]`.
pub trait QualityOracle: Send + Sync {
    fn score(&self, clean: &Waveform, degraded: &Waveform) -> Result<f64>;
}

/// Logistic squash of SI-SDR centred at 8 dB with a 4 dB scale.
#[derive(Debug, Clone, Copy, Default)]
pub struct SurrogateOracle;

impl SurrogateOracle {
    pub fn squash(si_sdr_db: f64) -> f64 {
        (1.0 / (1.0 + (-(si_sdr_db - 8.0) / 4.0).exp())).clamp(0.0, 1.0)
    }
}

impl QualityOracle for SurrogateOracle {
    fn score(&self, clean: &Waveform, degraded: &Waveform) -> Result<f64> {
        Ok(Self::squash(si_sdr(clean, degraded)?))
    }
}

/// How an external scorer's raw output maps onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExternalScale {
    /// Raw PESQ in `[-0.5, 4.5]`.
    Pesq,
    /// Already on `[0, 1]`; only clamped.
    Unit,
}

impl ExternalScale {
    pub fn apply(self, raw: f64) -> f64 {
        match self {
            ExternalScale::Pesq => scale_pesq(raw),
            ExternalScale::Unit => raw.clamp(0.0, 1.0),
        }
    }
}

/// Oracle selection as written in configs and on the command line:
/// `surrogate`, `external:<command>` (PESQ scale) or `external-unit:<command>`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum OracleSpec {
    #[default]
    Surrogate,
    External { command: Vec<String>, scale: ExternalScale },
}

impl std::str::FromStr for OracleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let external = |rest: &str, scale| {
            let command: Vec<String> = rest.split_whitespace().map(String::from).collect();
            if command.is_empty() {
                return Err(Error::Config("oracle: external scorer command is empty".into()));
            }
            Ok(OracleSpec::External { command, scale })
        };
        if s == "surrogate" {
            Ok(OracleSpec::Surrogate)
        } else if let Some(rest) = s.strip_prefix("external-unit:") {
            external(rest, ExternalScale::Unit)
        } else if let Some(rest) = s.strip_prefix("external:") {
            external(rest, ExternalScale::Pesq)
        } else {
            Err(Error::Config(format!(
                "oracle: expected surrogate, external:<cmd> or external-unit:<cmd>, got {s:?}"
            )))
        }
    }
}

impl TryFrom<String> for OracleSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<OracleSpec> for String {
    fn from(o: OracleSpec) -> String {
        match o {
            OracleSpec::Surrogate => "surrogate".into(),
            OracleSpec::External { command, scale } => {
                let prefix = match scale {
                    ExternalScale::Pesq => "external",
                    ExternalScale::Unit => "external-unit",
                };
                format!("{prefix}:{}", command.join(" "))
            }
        }
    }
}

impl OracleSpec {
    /// Builds the oracle, checking up front that an external scorer can be found.
    pub fn build(&self) -> Result<Box<dyn QualityOracle>> {
        Ok(match self {
            OracleSpec::Surrogate => Box::new(SurrogateOracle),
            OracleSpec::External { command, scale } => Box::new(ExternalOracle::new(command.clone(), *scale)?),
        })
    }
}

/// Runs `command... clean.wav degraded.wav` and reads one number from its stdout.
#[derive(Debug)]
pub struct ExternalOracle {
    program: PathBuf,
    args: Vec<String>,
    scale: ExternalScale,
    lock: Mutex<()>,
}

fn find_program(name: &str) -> Option<PathBuf> {
    let path = PathBuf::from(name);
    if path.components().count() > 1 {
        return path.is_file().then_some(path);
    }
    std::env::var_os("PATH").and_then(|dirs| {
        std::env::split_paths(&dirs)
            .map(|d| d.join(name))
            .find(|p| p.is_file())
    })
}

impl ExternalOracle {
    pub fn new(command: Vec<String>, scale: ExternalScale) -> Result<Self> {
        let (name, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("oracle: external scorer command is empty".into()))?;
        let program = find_program(name)
            .ok_or_else(|| Error::Config(format!("oracle: external scorer {name:?} not found")))?;
        Ok(Self {
            program,
            args: args.to_vec(),
            scale,
            lock: Mutex::new(()),
        })
    }
}

impl QualityOracle for ExternalOracle {
    fn score(&self, clean: &Waveform, degraded: &Waveform) -> Result<f64> {
        check_pair(clean, degraded)?;
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let (a, b) = (dir.path().join("clean.wav"), dir.path().join("degraded.wav"));
        write_wav(&a, clean, WavEncoding::Float32)?;
        write_wav(&b, degraded, WavEncoding::Float32)?;
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(&a)
            .arg(&b)
            .output()
            .map_err(|e| Error::Oracle(format!("{}: {e}", self.program.display())))?;
        if !out.status.success() {
            return Err(Error::Oracle(format!(
                "{} exited with {}: {}",
                self.program.display(),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let raw: f64 = text
            .trim()
            .parse()
            .map_err(|_| Error::Oracle(format!("expected one number on stdout, got {:?}", text.trim())))?;
        if !raw.is_finite() {
            return Err(Error::Oracle(format!("scorer returned {raw}")));
        }
        Ok(self.scale.apply(raw))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub id: String,
    pub ssnr_db: f64,
    pub si_sdr_db: f64,
    pub oracle_score: f64,
}

impl ClipMetrics {
    pub fn compute(
        id: impl Into<String>,
        clean: &Waveform,
        enhanced: &Waveform,
        oracle: &dyn QualityOracle,
        ssnr_cfg: &SsnrConfig,
    ) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            ssnr_db: ssnr_with(clean, enhanced, ssnr_cfg)?,
            si_sdr_db: si_sdr(clean, enhanced)?,
            oracle_score: oracle.score(clean, enhanced)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: Vec<ClipMetrics>,
    pub clip_count: usize,
    pub mean_ssnr_db: f64,
    pub mean_si_sdr_db: f64,
    pub mean_oracle_score: f64,
}

impl EvalReport {
    pub fn from_clips(clips: Vec<ClipMetrics>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::UndefinedMetric("no clips to evaluate".into()));
        }
        let n = clips.len() as f64;
        let mean = |f: fn(&ClipMetrics) -> f64| clips.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            clip_count: clips.len(),
            mean_ssnr_db: mean(|c| c.ssnr_db),
            mean_si_sdr_db: mean(|c| c.si_sdr_db),
            mean_oracle_score: mean(|c| c.oracle_score),
            clips,
        })
    }

    /// One JSON record per clip, then a summary record.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.clips {
            out.push_str(&serde_json::to_string(&serde_json::json!({"record": "clip", "clip": c}))?);
            out.push('\n');
        }
        let summary = serde_json::json!({
            "record": "summary",
            "clip_count": self.clip_count,
            "mean_ssnr_db": self.mean_ssnr_db,
            "mean_si_sdr_db": self.mean_si_sdr_db,
            "mean_oracle_score": self.mean_oracle_score,
        });
        out.push_str(&serde_json::to_string(&summary)?);
        out.push('\n');
        Ok(out)
    }

    pub fn to_table(&self) -> String {
        let width = self.clips.iter().map(|c| c.id.len()).max().unwrap_or(4).max(4);
        let mut out = format!("{:<width$}  {:>9}  {:>10}  {:>7}\n", "clip", "SSNR(dB)", "SI-SDR(dB)", "oracle");
        for c in &self.clips {
            out.push_str(&format!(
                "{:<width$}  {:>9.3}  {:>10.3}  {:>7.4}\n",
                c.id, c.ssnr_db, c.si_sdr_db, c.oracle_score
            ));
        }
        out.push_str(&format!(
            "{:<width$}  {:>9.3}  {:>10.3}  {:>7.4}\n",
            "mean", self.mean_ssnr_db, self.mean_si_sdr_db, self.mean_oracle_score
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave(v: Vec<f64>) -> Waveform {
        Waveform::new(v, 16_000).unwrap()
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn ssnr_of_identical_signals_hits_the_ceiling() {
        let c = wave(noise(4000, 1));
        assert_eq!(ssnr(&c, &c).unwrap(), 35.0);
    }

    #[test]
    fn ssnr_at_zero_db_per_frame() {
        // a silent estimate is the clean signal plus its negation, an error of equal energy in every frame
        let c = noise(4800, 2);
        let e: Vec<f64> = c.iter().map(|v| 0.0 * v).collect();
        let got = ssnr(&wave(c), &wave(e)).unwrap();
        assert!(got.abs() < 1e-12, "{got}");
    }

    #[test]
    fn ssnr_matches_frame_loop() {
        let c = noise(5000, 3);
        let e: Vec<f64> = c.iter().zip(noise(5000, 4)).map(|(a, b)| a + 0.3 * b).collect();
        let mut sum = 0.0;
        let mut n = 0;
        let mut s = 0;
        while s + 480 <= 5000 {
            let mut sig = 0.0;
            let mut err = 0.0;
            for i in s..s + 480 {
                sig += c[i] * c[i];
                err += (c[i] - e[i]) * (c[i] - e[i]);
            }
            sum += (10.0 * (sig / err).log10()).clamp(-10.0, 35.0);
            n += 1;
            s += 240;
        }
        let got = ssnr(&wave(c), &wave(e)).unwrap();
        assert!((got - sum / n as f64).abs() < 1e-9);
    }

    #[test]
    fn ssnr_errors() {
        let z = wave(vec![0.0; 1000]);
        assert!(matches!(ssnr(&z, &z), Err(Error::UndefinedMetric(_))));
        assert!(matches!(ssnr(&wave(vec![1.0; 10]), &wave(vec![1.0; 11])), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn si_sdr_properties() {
        let c = noise(3000, 5);
        let scaled: Vec<f64> = c.iter().map(|v| 3.7 * v).collect();
        assert_eq!(si_sdr(&wave(c.clone()), &wave(scaled)).unwrap(), 60.0);
        // Gram-Schmidt: remove the clean component from a noise vector, then match energies
        let n = noise(3000, 6);
        let energy: f64 = c.iter().map(|v| v * v).sum();
        let proj = c.iter().zip(&n).map(|(a, b)| a * b).sum::<f64>() / energy;
        let orth: Vec<f64> = n.iter().zip(&c).map(|(b, a)| b - proj * a).collect();
        let orth_energy: f64 = orth.iter().map(|v| v * v).sum();
        let orth: Vec<f64> = orth.iter().map(|v| v * (energy / orth_energy).sqrt()).collect();
        assert!(si_sdr(&wave(c.clone()), &wave(orth.clone())).unwrap() <= -60.0);
        let mix: Vec<f64> = c.iter().zip(&orth).map(|(a, b)| a + b).collect();
        assert!(si_sdr(&wave(c.clone()), &wave(mix.clone())).unwrap().abs() < 1e-9);
        let mix2: Vec<f64> = mix.iter().map(|v| 0.25 * v).collect();
        let (a, b) = (si_sdr(&wave(c.clone()), &wave(mix)).unwrap(), si_sdr(&wave(c), &wave(mix2)).unwrap());
        assert!((a - b).abs() < 1e-9);
        assert!(matches!(si_sdr(&wave(vec![0.0; 5]), &wave(vec![1.0; 5])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn surrogate_oracle_shape() {
        assert_eq!(SurrogateOracle::squash(8.0), 0.5);
        let c = wave(noise(2000, 7));
        assert!(SurrogateOracle.score(&c, &c).unwrap() > 0.9999);
        let mut last = 0.0;
        for db in -80..80 {
            let s = SurrogateOracle::squash(db as f64);
            assert!((0.0..=1.0).contains(&s) && s >= last);
            last = s;
        }
    }

    #[test]
    fn pesq_scaling_and_specs() {
        assert_eq!(ExternalScale::Pesq.apply(4.5), 1.0);
        assert_eq!(ExternalScale::Pesq.apply(-0.5), 0.0);
        assert!((ExternalScale::Pesq.apply(3.5) - 0.8).abs() < 1e-12);
        assert_eq!(ExternalScale::Unit.apply(1.7), 1.0);
        assert_eq!("surrogate".parse::<OracleSpec>().unwrap(), OracleSpec::Surrogate);
        let spec: OracleSpec = "external:pesq-cli --wb".parse().unwrap();
        assert_eq!(String::from(spec.clone()), "external:pesq-cli --wb");
        assert!("pesq".parse::<OracleSpec>().is_err());
        let missing: OracleSpec = "external:/nonexistent/scorer".parse().unwrap();
        assert!(matches!(missing.build(), Err(Error::Config(_))));
    }

    #[test]
    fn external_oracle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("scorer.sh");
        std::fs::write(&script, "#!/bin/sh\ntest -f \"$1\" && test -f \"$2\" && echo 3.5\n").unwrap();
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
            let oracle = OracleSpec::External {
                command: vec![script.display().to_string()],
                scale: ExternalScale::Pesq,
            }
            .build()
            .unwrap();
            let c = wave(noise(800, 8));
            assert!((oracle.score(&c, &c).unwrap() - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn report_means_match_clips() {
        let clips = vec![
            ClipMetrics { id: "a".into(), ssnr_db: 1.0, si_sdr_db: 2.0, oracle_score: 0.2 },
            ClipMetrics { id: "b".into(), ssnr_db: 4.0, si_sdr_db: -2.0, oracle_score: 0.6 },
        ];
        let r = EvalReport::from_clips(clips).unwrap();
        assert_eq!(r.clip_count, 2);
        assert_eq!(r.mean_ssnr_db, 2.5);
        assert_eq!(r.mean_si_sdr_db, 0.0);
        assert!((r.mean_oracle_score - 0.4).abs() < 1e-12);
        assert_eq!(r.to_jsonl().unwrap().lines().count(), 3);
        assert!(r.to_table().contains("mean"));
        assert!(EvalReport::from_clips(vec![]).is_err());
    }
}
