//! Adversarial training of the generator against the metric discriminator.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::Serialize;

use crate::checkpoint::{
    restore_exact, Checkpoint, CheckpointMeta, DISCRIMINATOR, DISCRIMINATOR_OPTIM, GENERATOR, GENERATOR_OPTIM,
};
use crate::config::{RunConfig, UpdateOrder};
use crate::data::{derive_seed, ClipPair, Loader, TrainSegment};
use crate::dsp::{stft, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::losses::graph::{self, GeneratorTerms};
use crate::losses::LossReport;
use crate::metrics::{ClipMetrics, EvalReport, QualityOracle};
use crate::network::generator::rms_normaliser;
use crate::network::spectral::{samples_to_tensor, spectra_to_tensors, tensor_row, Istft};
use crate::network::{Discriminator, Generator, Mode};
use crate::optim::{clip_global_norm, collect_gradients, lr_schedule, AdamW};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: u64,
        epoch: u64,
        batch: usize,
        lr: f64,
        grad_norm: f64,
        #[serde(flatten)]
        losses: LossReport,
    },
    Eval {
        epoch: u64,
        step: u64,
        clip_count: usize,
        mean_ssnr_db: f64,
        mean_si_sdr_db: f64,
        mean_oracle_score: f64,
    },
}

#[derive(Debug, Clone, Default)]
pub struct FitSummary {
    pub history: Vec<LogRecord>,
    pub final_eval: Option<EvalReport>,
    /// True when `max_steps` cut the run short.
    pub stopped_early: bool,
}

impl FitSummary {
    pub fn losses(&self) -> Vec<LossReport> {
        self.history
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { losses, .. } => Some(*losses),
                LogRecord::Eval { .. } => None,
            })
            .collect()
    }
}

/// Spectra and samples of one batch, scaled so each noisy input has unit RMS.
struct PreparedBatch {
    clean_wave: Tensor,
    clean_mag: Tensor,
    clean_phase: Tensor,
    noisy_mag: Tensor,
    noisy_phase: Tensor,
    clean: Vec<Waveform>,
    len: usize,
}

pub struct Trainer {
    cfg: RunConfig,
    device: Device,
    generator: Generator,
    discriminator: Discriminator,
    g_opt: AdamW,
    d_opt: AdamW,
    istft: Istft,
    oracle: Box<dyn QualityOracle>,
    pub epoch: u64,
    pub batch_in_epoch: usize,
    pub global_step: u64,
    pub best_oracle_score: Option<f64>,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("epoch", &self.epoch)
            .field("batch_in_epoch", &self.batch_in_epoch)
            .field("global_step", &self.global_step)
            .finish_non_exhaustive()
    }
}

impl Trainer {
    /// Fresh networks initialised from `cfg.seed`.
    pub fn new(cfg: RunConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let generator = Generator::new(&cfg.model, derive_seed(cfg.seed, &[10]), DType::F32, device)?;
        let discriminator = Discriminator::new(derive_seed(cfg.seed, &[11]), DType::F32, device)?;
        let oracle = cfg.oracle.build()?;
        Self::assemble(cfg, device, generator, discriminator, oracle)
    }

    fn assemble(
        cfg: RunConfig,
        device: &Device,
        generator: Generator,
        discriminator: Discriminator,
        oracle: Box<dyn QualityOracle>,
    ) -> Result<Self> {
        let g_opt = AdamW::new(cfg.train.optimizer, generator.params())?;
        let d_opt = AdamW::new(cfg.train.optimizer, discriminator.params())?;
        let istft = Istft::new(&cfg.stft, DType::F32, device)?;
        Ok(Self {
            cfg,
            device: device.clone(),
            generator,
            discriminator,
            g_opt,
            d_opt,
            istft,
            oracle,
            epoch: 0,
            batch_in_epoch: 0,
            global_step: 0,
            best_oracle_score: None,
        })
    }

    /// Continues from a training checkpoint. `cfg` replaces the stored config but
    /// must describe the same model.
    pub fn resume(ck: &Checkpoint, cfg: Option<RunConfig>, device: &Device) -> Result<Self> {
        let cfg = cfg.unwrap_or_else(|| ck.meta.config.clone());
        cfg.validate()?;
        if cfg.model != ck.meta.config.model || cfg.stft != ck.meta.config.stft {
            return Err(Error::Config("model: differs from the checkpoint being resumed".into()));
        }
        for group in [DISCRIMINATOR, GENERATOR_OPTIM, DISCRIMINATOR_OPTIM] {
            if !ck.has_group(group) {
                return Err(Error::Checkpoint(format!("not a training checkpoint: no {group} tensors")));
            }
        }
        let generator = ck.generator(device)?;
        let discriminator = ck.discriminator(device)?;
        let oracle = cfg.oracle.build()?;
        let mut t = Self::assemble(cfg, device, generator, discriminator, oracle)?;
        t.g_opt.load_state(ck.meta.generator_optim_steps, &ck.group(GENERATOR_OPTIM))?;
        t.d_opt.load_state(ck.meta.discriminator_optim_steps, &ck.group(DISCRIMINATOR_OPTIM))?;
        t.epoch = ck.meta.epoch;
        t.batch_in_epoch = ck.meta.batch_in_epoch;
        t.global_step = ck.meta.global_step;
        t.best_oracle_score = ck.meta.best_oracle_score;
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn oracle(&self) -> &dyn QualityOracle {
        self.oracle.as_ref()
    }

    pub fn generator_lr(&self) -> f64 {
        lr_schedule(self.epoch, self.cfg.train.lr_init, self.cfg.train.lr_halving_period)
    }

    pub fn discriminator_lr(&self) -> f64 {
        lr_schedule(self.epoch, self.cfg.train.disc_lr(), self.cfg.train.lr_halving_period)
    }

    /// Full training state, including optimiser moments and discriminator.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut meta = CheckpointMeta::new(self.cfg.clone());
        meta.epoch = self.epoch;
        meta.batch_in_epoch = self.batch_in_epoch;
        meta.global_step = self.global_step;
        meta.generator_optim_steps = self.g_opt.steps_taken();
        meta.discriminator_optim_steps = self.d_opt.steps_taken();
        meta.best_oracle_score = self.best_oracle_score;
        let mut ck = Checkpoint::new(meta);
        ck.insert_group(GENERATOR, self.generator.params().snapshot()?);
        ck.insert_group(DISCRIMINATOR, self.discriminator.params().snapshot()?);
        ck.insert_group(GENERATOR_OPTIM, self.g_opt.state());
        ck.insert_group(DISCRIMINATOR_OPTIM, self.d_opt.state());
        Ok(ck)
    }

    /// Generator weights only, enough for inference. Paths are dropped.
    pub fn inference_checkpoint(&self) -> Result<Checkpoint> {
        let mut cfg = self.cfg.clone();
        cfg.paths = Default::default();
        let mut meta = CheckpointMeta::new(cfg);
        meta.epoch = self.epoch;
        meta.global_step = self.global_step;
        meta.best_oracle_score = self.best_oracle_score;
        let mut ck = Checkpoint::new(meta);
        ck.insert_group(GENERATOR, self.generator.params().snapshot()?);
        Ok(ck)
    }

    /// Replaces the generator weights, e.g. to start from a pretrained model.
    pub fn load_generator(&self, ck: &Checkpoint) -> Result<()> {
        restore_exact(self.generator.params(), &ck.group(GENERATOR), GENERATOR)
    }

    fn prepare(&self, batch: &[TrainSegment]) -> Result<PreparedBatch> {
        let first = batch.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let len = first.clean.len();
        let mut clean = Vec::with_capacity(batch.len());
        let mut clean_spec = Vec::with_capacity(batch.len());
        let mut noisy_spec = Vec::with_capacity(batch.len());
        for seg in batch {
            if seg.clean.len() != len || seg.noisy.len() != len {
                return Err(Error::invalid("batch segments differ in length"));
            }
            if seg.clean.sample_rate() != DEFAULT_SAMPLE_RATE || seg.noisy.sample_rate() != DEFAULT_SAMPLE_RATE {
                return Err(Error::invalid("training audio must be 16 kHz"));
            }
            let norm = rms_normaliser(seg.noisy.samples());
            let c = seg.clean.scaled(norm);
            clean_spec.push(stft(&c, &self.cfg.stft)?);
            noisy_spec.push(stft(&seg.noisy.scaled(norm), &self.cfg.stft)?);
            clean.push(c);
        }
        let dtype = DType::F32;
        let (clean_mag, clean_phase) = spectra_to_tensors(&clean_spec, dtype, &self.device)?;
        let (noisy_mag, noisy_phase) = spectra_to_tensors(&noisy_spec, dtype, &self.device)?;
        let rows: Vec<&[f64]> = clean.iter().map(|w| w.samples()).collect();
        let clean_wave = samples_to_tensor(&rows, dtype, &self.device)?;
        Ok(PreparedBatch {
            clean_wave,
            clean_mag,
            clean_phase,
            noisy_mag,
            noisy_phase,
            clean,
            len,
        })
    }

    fn non_finite(&self, batch_id: usize, detail: impl Into<String>) -> Error {
        Error::NonFinite {
            step: self.global_step,
            batch_id,
            detail: format!("epoch {}: {}", self.epoch, detail.into()),
        }
    }

    /// One discriminator update followed by one generator update (or the reverse,
    /// per `train.update_order`). Returns the losses computed during the step.
    pub fn train_step(&mut self, batch: &[TrainSegment], batch_id: usize) -> Result<(LossReport, f64)> {
        let b = self.prepare(batch)?;
        let use_disc = !self.cfg.discriminator_disabled();
        let out = self.generator.forward(&b.noisy_mag, &b.noisy_phase, Mode::Train)?;
        let wave_hat = self.istft.forward(&out.magnitude, &out.phase, b.len)?;

        let mut disc_loss = 0.0;
        let d_first = self.cfg.train.update_order == UpdateOrder::DiscriminatorFirst;
        if use_disc && d_first {
            disc_loss = self.discriminator_step(&b, &out.magnitude, &wave_hat, batch_id)?;
        }

        let terms = GeneratorTerms {
            time: graph::time_loss(&b.clean_wave, &wave_hat)?,
            magnitude: graph::magnitude_loss(&b.clean_mag, &out.magnitude)?,
            complex: graph::complex_loss(&b.clean_mag, &b.clean_phase, &out.magnitude, &out.phase)?,
            ip: graph::ip_loss(&b.clean_phase, &out.phase)?,
            gd: graph::gd_loss(&b.clean_phase, &out.phase)?,
            iaf: graph::iaf_loss(&b.clean_phase, &out.phase)?,
            metric: if use_disc {
                Some(graph::metric_loss(&self.discriminator.forward(&b.clean_mag, &out.magnitude)?)?)
            } else {
                None
            },
        };
        let total = terms.total(&self.cfg.loss)?;
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let metric = match &terms.metric {
            Some(m) => scalar(m)?,
            None => 0.0,
        };
        let mut report = LossReport::from_components(
            scalar(&terms.time)?,
            scalar(&terms.magnitude)?,
            scalar(&terms.complex)?,
            (scalar(&terms.ip)?, scalar(&terms.gd)?, scalar(&terms.iaf)?),
            metric,
            disc_loss,
            &self.cfg.loss,
        );
        if let Some(field) = report.first_non_finite() {
            return Err(self.non_finite(batch_id, format!("{field} is not finite: {report:?}")));
        }

        let grads = total.backward()?;
        let mut g_grads = collect_gradients(self.generator.params(), &grads);
        let grad_norm = clip_global_norm(&mut g_grads, self.cfg.train.grad_clip)?;
        if !grad_norm.is_finite() {
            return Err(self.non_finite(batch_id, "generator gradient norm is not finite"));
        }
        self.g_opt.step(self.generator.params(), &g_grads, self.generator_lr())?;

        if use_disc && !d_first {
            // scores the pre-update estimate, as the generator step already consumed it
            report.discriminator = self.discriminator_step(&b, &out.magnitude, &wave_hat, batch_id)?;
        }
        self.global_step += 1;
        Ok((report, grad_norm))
    }

    fn discriminator_step(&mut self, b: &PreparedBatch, mag_hat: &Tensor, wave_hat: &Tensor, batch_id: usize) -> Result<f64> {
        let mut q = Vec::with_capacity(b.clean.len());
        for (i, clean) in b.clean.iter().enumerate() {
            let row = tensor_row(wave_hat, i)?;
            if row.iter().any(|v| !v.is_finite()) {
                return Err(self.non_finite(batch_id, format!("enhanced waveform {i} is not finite")));
            }
            let enhanced = Waveform::new(row, DEFAULT_SAMPLE_RATE)?;
            q.push(self.oracle.score(clean, &enhanced)?);
        }
        let q = Tensor::from_vec(q, b.clean.len(), &self.device)?.to_dtype(DType::F32)?;
        let real = self.discriminator.forward(&b.clean_mag, &b.clean_mag)?;
        let fake = self.discriminator.forward(&b.clean_mag, &mag_hat.detach())?;
        let loss = graph::discriminator_loss(&real, &fake, &q)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(self.non_finite(batch_id, "discriminator loss is not finite"));
        }
        let grads = loss.backward()?;
        let mut d_grads = collect_gradients(self.discriminator.params(), &grads);
        let norm = clip_global_norm(&mut d_grads, self.cfg.train.grad_clip)?;
        if !norm.is_finite() {
            return Err(self.non_finite(batch_id, "discriminator gradient norm is not finite"));
        }
        self.d_opt.step(self.discriminator.params(), &d_grads, self.discriminator_lr())?;
        Ok(value)
    }

    /// Enhances each clip with the current generator and scores it.
    pub fn evaluate(&self, pairs: &[ClipPair]) -> Result<EvalReport> {
        evaluate_generator(&self.generator, pairs, &self.cfg, self.oracle.as_ref())
    }

    /// Runs the remaining epochs. With `out_dir`, appends to the log file and
    /// writes `last.ckpt` on schedule and `best.ckpt` whenever the test-split
    /// oracle score improves.
    pub fn fit(
        &mut self,
        loader: &Loader,
        test: &[ClipPair],
        out_dir: Option<&Path>,
        observer: &mut dyn FnMut(&LogRecord),
    ) -> Result<FitSummary> {
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(LOG_FILE);
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((BufWriter::new(f), path))
            }
            None => None,
        };
        let mut summary = FitSummary::default();
        let mut emit = |rec: LogRecord, log: &mut Option<(BufWriter<File>, std::path::PathBuf)>| -> Result<()> {
            observer(&rec);
            if let Some((w, path)) = log.as_mut() {
                let line = serde_json::to_string(&rec)?;
                writeln!(w, "{line}")
                    .and_then(|_| w.flush())
                    .map_err(|e| Error::io(&*path, e))?;
            }
            summary.history.push(rec);
            Ok(())
        };
        let per_epoch = loader.batches_per_epoch();
        let mut stopped_early = false;
        'epochs: while self.epoch < self.cfg.train.epochs {
            while self.batch_in_epoch < per_epoch {
                if self.cfg.train.max_steps.is_some_and(|m| self.global_step >= m) {
                    stopped_early = true;
                    break 'epochs;
                }
                let batch = loader.batch(self.epoch, self.batch_in_epoch)?;
                let lr = self.generator_lr();
                let (losses, grad_norm) = self.train_step(&batch, self.batch_in_epoch)?;
                let rec = LogRecord::Step {
                    step: self.global_step,
                    epoch: self.epoch,
                    batch: self.batch_in_epoch,
                    lr,
                    grad_norm,
                    losses,
                };
                emit(rec, &mut log)?;
                self.batch_in_epoch += 1;
            }
            self.epoch += 1;
            self.batch_in_epoch = 0;
            let every = self.cfg.train.eval_every;
            if every > 0 && self.epoch.is_multiple_of(every) && !test.is_empty() {
                let report = self.evaluate(test)?;
                emit(eval_record(self.epoch, self.global_step, &report), &mut log)?;
                if self.best_oracle_score.is_none_or(|b| report.mean_oracle_score > b) {
                    self.best_oracle_score = Some(report.mean_oracle_score);
                    if let Some(dir) = out_dir {
                        self.inference_checkpoint()?.save(dir.join(BEST_CHECKPOINT))?;
                    }
                }
            }
            if let Some(dir) = out_dir {
                if self.epoch.is_multiple_of(self.cfg.train.checkpoint_every) {
                    self.checkpoint()?.save(dir.join(LAST_CHECKPOINT))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint()?.save(dir.join(LAST_CHECKPOINT))?;
        }
        summary.stopped_early = stopped_early;
        if !test.is_empty() {
            summary.final_eval = Some(self.evaluate(test)?);
        }
        Ok(summary)
    }
}

fn eval_record(epoch: u64, step: u64, r: &EvalReport) -> LogRecord {
    LogRecord::Eval {
        epoch,
        step,
        clip_count: r.clip_count,
        mean_ssnr_db: r.mean_ssnr_db,
        mean_si_sdr_db: r.mean_si_sdr_db,
        mean_oracle_score: r.mean_oracle_score,
    }
}

/// Metrics of `generator` on each (clean, noisy) pair.
pub fn evaluate_generator(
    generator: &Generator,
    pairs: &[ClipPair],
    cfg: &RunConfig,
    oracle: &dyn QualityOracle,
) -> Result<EvalReport> {
    let clips = pairs
        .iter()
        .map(|p| {
            let (enhanced, _) = generator.enhance(&p.noisy, &cfg.stft)?;
            ClipMetrics::compute(p.id.clone(), &p.clean, &enhanced, oracle, &cfg.ssnr)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_clips(clips)
}
