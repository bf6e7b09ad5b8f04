//! Subcommands behind the `mpsenet` binary. Each returns an error whose
//! [`exit_code`] follows the 0 / 1 / 2 convention.

pub mod spectrogram;

use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Args, Parser, Subcommand};

use mpsenet::checkpoint::Checkpoint;
use mpsenet::config::{Ablation, RunConfig};
use mpsenet::data::{load_pair, load_split, resample, synth_desk_corpus, ClipPair, Loader, Manifest, Split, SynthSpec};
use mpsenet::dsp::{StftConfig, DEFAULT_SAMPLE_RATE};
use mpsenet::metrics::{ClipMetrics, EvalReport, OracleSpec};
use mpsenet::network::{Discriminator, Generator};
use mpsenet::trainer::{evaluate_generator, LogRecord, Trainer, LAST_CHECKPOINT};
use mpsenet::wav::{read_wav, write_wav, WavEncoding};
use mpsenet::Error;

pub const CONFIG_ECHO: &str = "config.toml";
pub const REPORT_JSONL: &str = "report.jsonl";
pub const REPORT_TABLE: &str = "report.txt";

#[derive(Debug, Parser)]
#[command(name = "mpsenet", version, about = "Magnitude and phase speech enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a manifest; writes checkpoints, a log and a final report to --out.
    Train(TrainArgs),
    /// Enhance one WAV file.
    Enhance(EnhanceArgs),
    /// Score the test split of a manifest.
    Eval(EvalArgs),
    /// Write the synthetic desk-scale corpus.
    SynthData(SynthArgs),
    /// Render a log-magnitude spectrogram as PNG.
    Spectrogram(SpectrogramArgs),
    /// Print parameter counts.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ablation row to apply; may be repeated.
    #[arg(long = "ablation")]
    pub ablations: Vec<String>,
    #[arg(long)]
    pub oracle: Option<String>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Resume from a training checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Generator checkpoint; required unless --passthrough.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Score the noisy inputs as they are, without enhancement.
    #[arg(long)]
    pub passthrough: bool,
    #[arg(long)]
    pub oracle: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = SynthSpec::default().n_clips)]
    pub clips: usize,
    #[arg(long, default_value_t = SynthSpec::default().n_test_clips)]
    pub test_clips: usize,
    #[arg(long, default_value_t = SynthSpec::default().clip_seconds)]
    pub seconds: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SpectrogramArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Dynamic range shown, in dB below the peak.
    #[arg(long, default_value_t = spectrogram::DEFAULT_RANGE_DB)]
    pub range_db: f64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long = "ablation")]
    pub ablations: Vec<String>,
}

/// 2 for configuration problems, 1 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> mpsenet::Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Enhance(a) => cmd_enhance(&a.checkpoint, &a.input, &a.out),
        Command::Eval(a) => cmd_eval(&a),
        Command::SynthData(a) => cmd_synth(&a),
        Command::Spectrogram(a) => cmd_spectrogram(&a.input, &a.out, a.range_db),
        Command::Inspect(a) => cmd_inspect(&a),
    }
}

fn load_config(path: Option<&Path>) -> mpsenet::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("--config: cannot read {path}: {source}")),
            other => other,
        }),
        None => Ok(RunConfig::default()),
    }
}

fn parse_oracle(spec: &str) -> mpsenet::Result<OracleSpec> {
    spec.parse::<OracleSpec>()
        .map_err(|e| Error::Config(format!("oracle: {e}")))
}

/// Config file, then command-line overrides, then validation.
pub fn resolve_train_config(a: &TrainArgs) -> mpsenet::Result<RunConfig> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    for name in &a.ablations {
        cfg.apply_ablation(name.parse::<Ablation>()?);
    }
    if let Some(o) = &a.oracle {
        cfg.oracle = parse_oracle(o)?;
    }
    if let Some(m) = &a.manifest {
        cfg.paths.manifest = Some(m.clone());
    }
    if let Some(o) = &a.out {
        cfg.paths.out_dir = Some(o.clone());
    }
    if let Some(c) = &a.checkpoint {
        cfg.paths.resume = Some(c.clone());
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.max_steps {
        cfg.train.max_steps = Some(s);
    }
    cfg.validate_for_training()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> mpsenet::Result<()> {
    write_bytes(path, text.as_bytes())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> mpsenet::Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> mpsenet::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(a: &TrainArgs) -> mpsenet::Result<()> {
    let cfg = resolve_train_config(a)?;
    let manifest_path = cfg.paths.manifest.clone().expect("validated");
    let out_dir = cfg.paths.out_dir.clone().expect("validated");
    // build the oracle first so a missing external scorer fails before any work
    cfg.oracle.build()?;
    let manifest = Manifest::load(&manifest_path).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("paths.manifest: cannot read {path}: {source}")),
        other => other,
    })?;
    let train = load_split(&manifest, Split::Train, cfg.seed)?;
    let test = load_split(&manifest, Split::Test, cfg.seed)?;
    let loader = Loader::new(train, cfg.train.segment_length, cfg.train.batch_size, cfg.seed)?;
    create_dir(&out_dir)?;
    write_text(&out_dir.join(CONFIG_ECHO), &cfg.to_toml()?)?;

    let device = Device::Cpu;
    let mut trainer = match &cfg.paths.resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p, &device)?, Some(cfg.clone()), &device)?,
        None => Trainer::new(cfg.clone(), &device)?,
    };
    eprintln!(
        "training {} generator parameters on {} clips ({} batches per epoch)",
        trainer.generator().count_parameters(),
        loader.pairs().len(),
        loader.batches_per_epoch()
    );
    let quiet = a.quiet;
    let summary = trainer.fit(&loader, &test, Some(&out_dir), &mut |r| {
        if quiet {
            return;
        }
        match r {
            LogRecord::Step { step, epoch, losses, .. } if step % 10 == 0 => {
                eprintln!(
                    "step {step:>6}  epoch {epoch:>4}  G {:.4}  D {:.4}",
                    losses.generator_total, losses.discriminator
                );
            }
            LogRecord::Eval {
                epoch,
                mean_ssnr_db,
                mean_oracle_score,
                ..
            } => eprintln!("eval epoch {epoch}: SSNR {mean_ssnr_db:.3} dB, oracle {mean_oracle_score:.4}"),
            _ => {}
        }
    })?;
    trainer.inference_checkpoint()?.save(out_dir.join("generator.ckpt"))?;
    if let Some(report) = &summary.final_eval {
        write_report(&out_dir, report)?;
        print!("{}", report.to_table());
    }
    eprintln!("wrote {}", out_dir.join(LAST_CHECKPOINT).display());
    Ok(())
}

/// Enhances `input`, resampling to 16 kHz and back when needed.
pub fn cmd_enhance(checkpoint: &Path, input: &Path, out: &Path) -> mpsenet::Result<()> {
    let ck = Checkpoint::load(checkpoint, &Device::Cpu)?;
    let generator = ck.generator(&Device::Cpu)?;
    let noisy = read_wav(input)?;
    let rate = noisy.sample_rate();
    let at_16k = if rate == DEFAULT_SAMPLE_RATE {
        noisy.clone()
    } else {
        resample(&noisy, DEFAULT_SAMPLE_RATE)?
    };
    let (enhanced, _) = generator.enhance(&at_16k, &ck.meta.config.stft)?;
    let enhanced = if rate == DEFAULT_SAMPLE_RATE {
        enhanced
    } else {
        let back = resample(&enhanced, rate)?;
        let mut v = back.into_samples();
        v.resize(noisy.len(), 0.0);
        mpsenet::dsp::Waveform::new(v, rate)?
    };
    write_wav(out, &enhanced, WavEncoding::Float32)?;
    let echo = out.with_extension("config.toml");
    write_text(&echo, &ck.meta.config.to_toml()?)
}

fn write_report(dir: &Path, report: &EvalReport) -> mpsenet::Result<()> {
    create_dir(dir)?;
    write_text(&dir.join(REPORT_JSONL), &report.to_jsonl()?)?;
    write_text(&dir.join(REPORT_TABLE), &report.to_table())
}

pub fn cmd_eval(a: &EvalArgs) -> mpsenet::Result<()> {
    let ck = match (&a.checkpoint, a.passthrough) {
        (Some(p), false) => Some(Checkpoint::load(p, &Device::Cpu)?),
        (None, true) => None,
        (Some(_), true) => return Err(Error::Config("--passthrough: cannot be combined with --checkpoint".into())),
        (None, false) => return Err(Error::Config("--checkpoint: required unless --passthrough".into())),
    };
    let mut cfg = match (&a.config, &ck) {
        (Some(p), _) => load_config(Some(p))?,
        (None, Some(ck)) => ck.meta.config.clone(),
        (None, None) => RunConfig::default(),
    };
    if let Some(o) = &a.oracle {
        cfg.oracle = parse_oracle(o)?;
    }
    cfg.validate()?;
    let oracle = cfg.oracle.build()?;
    let manifest = Manifest::load(&a.manifest)?;
    let pairs: Vec<ClipPair> = manifest
        .split(a.split.into())
        .enumerate()
        .map(|(i, e)| load_pair(e, mpsenet::data::derive_seed(cfg.seed, &[1, i as u64])))
        .collect::<mpsenet::Result<_>>()?;
    if pairs.is_empty() {
        return Err(Error::Config(format!("--manifest: no {:?} entries", a.split)));
    }
    let report = match &ck {
        Some(ck) => evaluate_generator(&ck.generator(&Device::Cpu)?, &pairs, &cfg, oracle.as_ref())?,
        None => {
            let clips = pairs
                .iter()
                .map(|p| ClipMetrics::compute(p.id.clone(), &p.clean, &p.noisy, oracle.as_ref(), &cfg.ssnr))
                .collect::<mpsenet::Result<Vec<_>>>()?;
            EvalReport::from_clips(clips)?
        }
    };
    write_report(&a.out, &report)?;
    write_text(&a.out.join(CONFIG_ECHO), &cfg.to_toml()?)?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> mpsenet::Result<()> {
    let spec = SynthSpec {
        n_clips: a.clips,
        n_test_clips: a.test_clips,
        clip_seconds: a.seconds,
        seed: a.seed,
    };
    create_dir(&a.out)?;
    let m = synth_desk_corpus(&spec, &a.out)?;
    let echo = toml::to_string_pretty(&spec).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&a.out.join("synth.toml"), &echo)?;
    eprintln!("wrote {} clips and {}", m.entries.len(), a.out.join("manifest.jsonl").display());
    Ok(())
}

pub fn cmd_spectrogram(input: &Path, out: &Path, range_db: f64) -> mpsenet::Result<()> {
    let w = read_wav(input)?;
    let png = spectrogram::render(&w, &StftConfig::default(), range_db)?;
    write_bytes(out, &png)
}

pub fn cmd_inspect(a: &InspectArgs) -> mpsenet::Result<()> {
    let (mut cfg, generator) = match &a.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p, &Device::Cpu)?;
            let g = ck.generator(&Device::Cpu)?;
            (ck.meta.config, Some(g))
        }
        None => (load_config(a.config.as_deref())?, None),
    };
    for name in &a.ablations {
        cfg.apply_ablation(name.parse::<Ablation>()?);
    }
    cfg.validate()?;
    let generator = match generator {
        Some(g) if a.ablations.is_empty() => g,
        _ => Generator::new(&cfg.model, cfg.seed, candle_core::DType::F32, &Device::Cpu)?,
    };
    let disc = Discriminator::new(cfg.seed, candle_core::DType::F32, &Device::Cpu)?;
    let n = generator.count_parameters();
    let reference = 2.05e6;
    println!("generator parameters: {n} ({:.3}M)", n as f64 / 1e6);
    println!("delta from 2.05M: {:+.2}%", 100.0 * (n as f64 - reference) / reference);
    for prefix in ["encoder.", "conformer.", "mask.", "phase."] {
        println!("  {prefix:<12}{}", generator.params().count_with_prefix(prefix));
    }
    println!("discriminator parameters: {}", disc.count_parameters());
    Ok(())
}
