use candle_core::Device;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpsenet::checkpoint::Checkpoint;
use mpsenet::config::RunConfig;
use mpsenet::data::{pseudo_speech, ClipPair, Loader, TrainSegment};
use mpsenet::dsp::Waveform;
use mpsenet::network::ModelConfig;
use mpsenet::trainer::{LogRecord, Trainer};

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        base_channels: 4,
        n_conformers: 1,
        conformer_heads: 2,
        dense_depth: 2,
        ..Default::default()
    };
    cfg.train.batch_size = 2;
    cfg.train.segment_length = 1600;
    cfg.train.eval_every = 0;
    cfg
}

fn pair(len: usize, rng: &mut ChaCha8Rng) -> (Waveform, Waveform) {
    let clean = pseudo_speech(len, 16_000, rng);
    let noisy = clean.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
    (Waveform::new(clean, 16_000).unwrap(), Waveform::new(noisy, 16_000).unwrap())
}

fn clips(n: usize, seed: u64) -> Vec<ClipPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (clean, noisy) = pair(2400, &mut rng);
            ClipPair {
                id: format!("c{i}"),
                clean,
                noisy,
            }
        })
        .collect()
}

fn step_losses(history: &[LogRecord]) -> Vec<(u64, f64)> {
    history
        .iter()
        .filter_map(|r| match r {
            LogRecord::Step { step, losses, .. } => Some((*step, losses.generator_total)),
            _ => None,
        })
        .collect()
}

#[test]
fn generator_total_falls_on_a_fixed_batch() {
    let mut cfg = tiny();
    cfg.train.batch_size = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch: Vec<TrainSegment> = (0..4)
        .map(|_| {
            let (clean, noisy) = pair(1600, &mut rng);
            TrainSegment { clean, noisy }
        })
        .collect();
    let mut trainer = Trainer::new(cfg, &Device::Cpu).unwrap();
    let totals: Vec<f64> = (0..200).map(|_| trainer.train_step(&batch, 0).unwrap().0.generator_total).collect();
    let head = totals[..10].iter().sum::<f64>() / 10.0;
    let tail = totals[190..].iter().sum::<f64>() / 10.0;
    assert!(totals.iter().all(|v| v.is_finite()));
    assert!(tail < 0.7 * head, "moving average {head} -> {tail}");
}

#[test]
fn zero_epochs_leaves_the_model_untouched() {
    let mut cfg = tiny();
    cfg.train.epochs = 0;
    let loader = Loader::new(clips(4, 2), 1600, 2, 0).unwrap();
    let mut trainer = Trainer::new(cfg, &Device::Cpu).unwrap();
    let before = trainer.generator().params().snapshot().unwrap();
    let summary = trainer.fit(&loader, &[], None, &mut |_| {}).unwrap();
    assert!(summary.history.is_empty());
    let after = trainer.generator().params().snapshot().unwrap();
    for (k, v) in &before {
        let (a, b) = (v.flatten_all().unwrap(), after[k].flatten_all().unwrap());
        assert_eq!(a.to_vec1::<f32>().unwrap(), b.to_vec1::<f32>().unwrap(), "{k}");
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let mut cfg = tiny();
    cfg.train.epochs = 100;
    cfg.train.max_steps = Some(5);
    let loader = Loader::new(clips(4, 3), 1600, 2, 0).unwrap();
    let test = clips(1, 4);

    let mut straight = Trainer::new(cfg.clone(), &Device::Cpu).unwrap();
    let full = step_losses(&straight.fit(&loader, &test, None, &mut |_| {}).unwrap().history);
    assert_eq!(full.len(), 5);

    let mut first = cfg.clone();
    first.train.max_steps = Some(3);
    let mut part = Trainer::new(first, &Device::Cpu).unwrap();
    let mut resumed_losses = step_losses(&part.fit(&loader, &test, None, &mut |_| {}).unwrap().history);
    let bytes = part.checkpoint().unwrap().encode().unwrap();
    let ck = Checkpoint::decode(&bytes, &Device::Cpu).unwrap();
    let mut resumed = Trainer::resume(&ck, Some(cfg), &Device::Cpu).unwrap();
    resumed_losses.extend(step_losses(&resumed.fit(&loader, &test, None, &mut |_| {}).unwrap().history));
    assert_eq!(resumed_losses, full);

    let (a, b) = (
        straight.generator().params().snapshot().unwrap(),
        resumed.generator().params().snapshot().unwrap(),
    );
    for (k, v) in &a {
        let (x, y) = (v.flatten_all().unwrap(), b[k].flatten_all().unwrap());
        assert_eq!(x.to_vec1::<f32>().unwrap(), y.to_vec1::<f32>().unwrap(), "{k}");
    }
}
