//! Training step, fit loop and resume behaviour on tiny synthetic data.

use super::fixtures::{tiny_config, wave_images};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swiftsr::data::{make_pair, Batch, Dataset};
use swiftsr::model::load_checkpoint;
use swiftsr::train::{
    discriminator_step, fit_datasets, train_step, Trainer, BEST_GENERATOR_FILE, DISCRIMINATOR_FILE, GENERATOR_FILE,
    METRICS_FILE, METRICS_HEADER,
};
use swiftsr::Error;

fn batch(n: usize, crop: usize, seed: u64) -> Batch {
    let cfg = tiny_config(crop, seed).pipeline;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<_> = wave_images(n, crop + 8, crop + 8, seed)
        .iter()
        .map(|img| make_pair(img, &cfg, &mut rng).unwrap())
        .collect();
    Batch::from_pairs(&pairs).unwrap()
}

pub fn steps_are_deterministic() {
    let b = batch(2, 32, 1);
    let mut t1 = Trainer::new(tiny_config(32, 5)).unwrap();
    let mut t2 = Trainer::new(tiny_config(32, 5)).unwrap();
    for _ in 0..3 {
        assert_eq!(t1.step(&b).unwrap(), t2.step(&b).unwrap());
    }
    assert_eq!(t1, t2);
    assert_eq!(t1.state.step, 3);
    assert_eq!((t1.opt_g.step, t1.opt_d.step), (3, 3));
}

pub fn loss_report_is_consistent() {
    let b = batch(2, 32, 2);
    let mut t = Trainer::new(tiny_config(32, 0)).unwrap();
    let w = t.cfg.adversarial_weight;
    for _ in 0..3 {
        let r = t.step(&b).unwrap();
        assert!(r.content > 0.0 && r.adversarial > 0.0 && r.discriminator > 0.0);
        assert!((r.perceptual - (r.content + w * r.adversarial)).abs() <= 1e-12 * r.perceptual.abs().max(1.0));
    }
}

pub fn extractor_is_never_updated() {
    let b = batch(2, 32, 3);
    let mut t = Trainer::new(tiny_config(32, 0)).unwrap();
    let before = t.extractor.clone();
    for _ in 0..3 {
        t.step(&b).unwrap();
    }
    assert_eq!(t.extractor, before);
}

pub fn discriminator_update_ignores_generator_graph() {
    let b = batch(2, 32, 4);
    let t = Trainer::new(tiny_config(32, 0)).unwrap();
    let cfg = t.step_config();

    let (mut g, mut d, mut og, mut od) = (t.generator.clone(), t.discriminator.clone(), t.opt_g.clone(), t.opt_d.clone());
    train_step(&mut g, &mut d, &t.extractor, &b.lr, &b.hr, &mut og, &mut od, &cfg).unwrap();

    // the same D update computed from a detached copy of the generator output
    let sr = t.generator.forward_tape(&b.lr, swiftsr::nn::Mode::Train).unwrap().0;
    let (mut d2, mut od2) = (t.discriminator.clone(), t.opt_d.clone());
    discriminator_step(&mut d2, &b.hr, &sr, &mut od2, &cfg.adam_d, cfg.lr_d).unwrap();
    assert_eq!(d, d2);
    assert_eq!(od, od2);
    assert_ne!(g, t.generator);
}

pub fn generator_update_leaves_discriminator_alone() {
    let b = batch(2, 32, 5);
    let t = Trainer::new(tiny_config(32, 0)).unwrap();
    let d_before = t.discriminator.clone();
    let cfg = t.step_config();
    let (mut g, mut og) = (t.generator.clone(), t.opt_g.clone());
    let (sr, tape) = g.forward_tape(&b.lr, swiftsr::nn::Mode::Train).unwrap();
    swiftsr::train::generator_step(&mut g, &tape, &sr, &b.hr, &t.discriminator, &t.extractor, &mut og, &cfg).unwrap();
    assert_ne!(g, t.generator);
    assert_eq!(t.discriminator, d_before);
}

pub fn zero_adversarial_weight_decouples_generator() {
    let b = batch(2, 32, 6);
    let mut cfg = tiny_config(32, 0);
    cfg.adversarial_weight = 0.0;
    let mut a = Trainer::new(cfg.clone()).unwrap();
    let mut c = Trainer::new(cfg).unwrap();
    // a different discriminator must not change the generator trajectory
    c.discriminator = Trainer::new(tiny_config(32, 77)).unwrap().discriminator;
    for _ in 0..3 {
        let (ra, rc) = (a.step(&b).unwrap(), c.step(&b).unwrap());
        assert_eq!(ra.content, rc.content);
        assert_eq!(ra.perceptual, ra.content);
    }
    assert_eq!(a.generator, c.generator);
    assert_ne!(a.discriminator, c.discriminator);
}

pub fn non_finite_input_aborts_without_changes() {
    let mut b = batch(2, 32, 7);
    b.lr.data_mut()[3] = f32::NAN;
    let mut t = Trainer::new(tiny_config(32, 0)).unwrap();
    let before = t.clone();
    assert!(matches!(t.step(&b), Err(Error::StepAborted(_))));
    assert_eq!(t, before);
}

fn datasets(crop: usize, seed: u64) -> (Dataset, Dataset) {
    let cfg = tiny_config(crop, seed).pipeline;
    let train = Dataset::from_images(wave_images(4, crop + 8, crop + 6, seed), cfg).unwrap();
    let val = Dataset::from_images(wave_images(2, crop, crop, seed + 50), cfg).unwrap();
    (train, val)
}

pub fn zero_epochs_writes_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = datasets(32, 0);
    let mut cfg = tiny_config(32, 0);
    cfg.epochs = 0;
    let report = fit_datasets(&train, &val, cfg.clone(), dir.path(), false).unwrap();
    assert!(report.logs.is_empty());
    let csv = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv, format!("{METRICS_HEADER}\n"));
    let (g, _) = load_checkpoint(dir.path().join(GENERATOR_FILE)).unwrap();
    assert_eq!(g, Trainer::new(cfg).unwrap().generator);
    assert!(dir.path().join(DISCRIMINATOR_FILE).exists());
}

pub fn fit_logs_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = datasets(32, 1);
    let cfg = tiny_config(32, 1);
    let report = fit_datasets(&train, &val, cfg, dir.path(), false).unwrap();
    assert_eq!(report.logs.len(), 2);
    assert_eq!(report.trainer.state.epoch, 2);
    assert_eq!(report.trainer.state.step, 4);
    let csv = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], METRICS_HEADER);
    for (line, log) in lines[1..].iter().zip(&report.logs) {
        assert_eq!(*line, log.csv_row());
        assert_eq!(line.split(',').count(), METRICS_HEADER.split(',').count());
        assert!(log.val.psnr.is_finite() && (0.0..=1.0).contains(&log.val.ssim));
    }
    assert!(dir.path().join(BEST_GENERATOR_FILE).exists());
}

pub fn resume_matches_uninterrupted_run() {
    let (train, val) = datasets(32, 2);
    let mut cfg = tiny_config(32, 2);
    cfg.epochs = 4;
    let full_dir = tempfile::tempdir().unwrap();
    let full = fit_datasets(&train, &val, cfg.clone(), full_dir.path(), false).unwrap();

    let split_dir = tempfile::tempdir().unwrap();
    let mut half = cfg.clone();
    half.epochs = 2;
    fit_datasets(&train, &val, half, split_dir.path(), false).unwrap();
    let resumed = fit_datasets(&train, &val, cfg, split_dir.path(), true).unwrap();
    assert_eq!(resumed.resumed_from_epoch, Some(2));
    assert_eq!(resumed.trainer, full.trainer);
    assert_eq!(resumed.logs, full.logs[2..]);
    for f in [GENERATOR_FILE, DISCRIMINATOR_FILE, METRICS_FILE] {
        let a = std::fs::read(full_dir.path().join(f)).unwrap();
        let b = std::fs::read(split_dir.path().join(f)).unwrap();
        assert!(a == b, "{f} differs after resume");
    }
}

pub fn resume_rejects_other_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = datasets(32, 3);
    let mut cfg = tiny_config(32, 3);
    cfg.epochs = 1;
    fit_datasets(&train, &val, cfg.clone(), dir.path(), false).unwrap();
    cfg.seed = 4;
    assert!(matches!(Trainer::load(dir.path(), cfg), Err(Error::Config(_))));
}

pub fn content_only_training_overfits() {
    let b = batch(4, 64, 8);
    let mut cfg = tiny_config(64, 8);
    cfg.adversarial_weight = 0.0;
    cfg.adam_g.lr = 1e-3;
    let mut t = Trainer::new(cfg).unwrap();
    let mut losses = Vec::new();
    for _ in 0..1000 {
        losses.push(t.step(&b).unwrap().content);
        let early = losses[..losses.len().min(10)].iter().sum::<f64>() / losses.len().min(10) as f64;
        if losses.len() > 10 && *losses.last().unwrap() <= 0.5 * early {
            return;
        }
    }
    panic!("content loss stalled: first {:?}, last {:?}", &losses[..10], losses.last());
}
