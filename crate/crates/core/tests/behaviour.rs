mod common;

use common::*;
use exgan_core::compressor::{code_distance, train_compressor, Compressor, CompressorConfig, EyeCropSample};
use exgan_core::evaluation::mean_abs_error;
use exgan_core::masking::MaskSpec;
use exgan_core::training::{inpaint_batch, ModelFamily, RunOptions, Trainer, TrainingSet};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn short_training_reduces_content_loss() {
    let data = tiny_dataset(10, 32, 2);
    let compressor = small_compressor();
    for (family, required_drop) in [(ModelFamily::NonExemplar, 0.3), (ModelFamily::Reference, 0.0), (ModelFamily::Code, 0.0)] {
        let (mut t, mut g, d) = tiny_family_configs(family, 32);
        g.base_channels = 8;
        g.dilations = vec![2, 4];
        t.batch_size = 10;
        t.learning_rate = 2e-3;
        let c = (family == ModelFamily::Code).then(|| compressor.clone());
        let mut trainer = Trainer::new(t, g, d, c).unwrap();
        let set = trainer.training_set(&data).unwrap();
        trainer.run(&set, RunOptions::budget(2000)).unwrap();
        let h = &trainer.state.history;
        assert_eq!(h.len(), 200);
        let content: Vec<f64> = h.iter().map(|r| r.content).collect();
        let (start, end) = (mean(&content[..20]), mean(&content[180..]));
        assert!(end < (1.0 - required_drop) * start, "{family:?}: content {start} -> {end}");
        assert!(h.iter().all(|r| r.total_g.is_finite() && r.adv_d.is_finite()));
    }
}

#[test]
fn overfits_a_handful_of_pairs() {
    let data = tiny_dataset(2, 32, 8);
    let (mut t, mut g, d) = tiny_family_configs(ModelFamily::Reference, 32);
    g.base_channels = 8;
    t.learning_rate = 3e-3;
    t.weights.adversarial = 0.0;
    let mut trainer = Trainer::new(t, g, d, None).unwrap();
    let set = trainer.training_set(&data).unwrap();
    trainer.run(&set, RunOptions::budget(2400)).unwrap();
    let samples = TrainingSet::new(&data, None).unwrap().evaluation_samples(&MaskSpec::default()).unwrap();
    let out = inpaint_batch(&trainer.state.generator, &samples).unwrap();
    // L1 over the masked region only, where all the error lives.
    let mut masked_l1 = Vec::new();
    for (o, s) in out.iter().zip(&samples) {
        let n = s.mask.sum() * 3.0;
        masked_l1.push(mean_abs_error(o, &s.target).unwrap() * o.len() as f64 / n);
    }
    assert!(mean(&masked_l1) < 0.05, "masked L1 {masked_l1:?}");
}

fn crops(ids: usize, seed: u64, cfg: &CompressorConfig) -> (exgan_core::data::Dataset, Vec<EyeCropSample>) {
    let data = tiny_dataset(ids, 32, seed);
    let crops = Compressor::new(cfg.clone()).unwrap().crop_dataset(&data).unwrap();
    (data, crops)
}

fn compressor_config(epochs: usize) -> CompressorConfig {
    CompressorConfig {
        base_channels: 8,
        epochs,
        seed: 2,
        ..Default::default()
    }
}

#[test]
fn compressor_branches_agree_on_mirrored_eyes() {
    let cfg = compressor_config(15);
    let (_, mut samples) = crops(16, 4, &cfg);
    for s in &mut samples {
        s.right = s.left.clone();
    }
    let (_, curve) = train_compressor(&samples, &cfg).unwrap();
    assert!(curve.total.last().unwrap() < &(0.6 * curve.total[0]), "{:?}", curve.total);
    let (l, r) = (*curve.left.last().unwrap(), *curve.right.last().unwrap());
    assert!((l - r).abs() / l.max(r) < 0.1, "left {l} right {r}");
}

#[test]
fn compressor_overfits_a_single_example() {
    let cfg = CompressorConfig {
        batch_size: 1,
        learning_rate: 3e-3,
        ..compressor_config(300)
    };
    let (_, samples) = crops(2, 6, &cfg);
    let (_, curve) = train_compressor(&samples[..1], &cfg).unwrap();
    let (l, r) = (*curve.left.last().unwrap(), *curve.right.last().unwrap());
    assert!(l < 0.05 && r < 0.05, "left {l} right {r}");
}

#[test]
fn compressor_codes_separate_identities() {
    let cfg = compressor_config(15);
    let (data, samples) = crops(24, 4, &cfg);
    let (c, _) = train_compressor(&samples, &cfg).unwrap();
    let mut codes = Vec::new();
    for (record, images) in data.records().iter().zip(data.images()) {
        let items: Vec<_> = images.iter().zip(&record.images).map(|(i, e)| (i, &e.annotation)).collect();
        codes.push(c.codes_for_images(&items).unwrap());
    }
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    for (i, a) in codes.iter().enumerate() {
        for (j, b) in codes.iter().enumerate() {
            for (x, ca) in a.iter().enumerate() {
                for (y, cb) in b.iter().enumerate() {
                    if (i, x) < (j, y) {
                        let d = code_distance(ca, cb);
                        if i == j { same.push(d) } else { diff.push(d) }
                    }
                }
            }
        }
    }
    assert!(mean(&same) < mean(&diff), "same {} different {}", mean(&same), mean(&diff));
}
