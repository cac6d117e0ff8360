//! Checks shared by the integration tests and the acceptance report. Each
//! returns a one-line summary on success and a description of the first
//! violation otherwise.
#![allow(dead_code)]

use std::time::Instant;

use exgan_core::compressor::{Compressor, CompressorConfig, Eye, EYE_CODE_DIM, EYE_CODE_HALF_DIM};
use exgan_core::data::{assemble_sample, generate_synthetic_dataset, SyntheticConfig};
use exgan_core::discriminator::{Discriminator, DiscriminatorConfig, DiscriminatorInput};
use exgan_core::evaluation::report::{latex_table, text_table, Orientation, ORIENTATION};
use exgan_core::evaluation::{fid_from_embeddings, MetricReport};
use exgan_core::generator::{Generator, GeneratorConfig};
use exgan_core::masking::{apply_mask, build_mask, composite, MaskSpec};
use exgan_core::nn::{check_input_gradient, check_param_gradients, Adam, AdamConfig, ParamSet, Tape};
use exgan_core::training::{
    binary_cross_entropy, inpaint_sample, perceptual_loss_and_gradient, ModelFamily, TrainingConfig,
};
use exgan_core::{EyeAnnotation, Rect, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Deterministic pseudo-random image in [0, 1].
pub fn pattern(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen::<f64>()).collect())
}

pub fn annotation16() -> EyeAnnotation {
    EyeAnnotation::new(Rect::new(2, 5, 5, 3), Rect::new(9, 5, 5, 3), 1.0)
}

const GRAD_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

pub fn bce_cases() -> Check {
    let ln2 = std::f64::consts::LN_2;
    let real = binary_cross_entropy(0.5, 1.0);
    let fake = binary_cross_entropy(0.5, 0.0);
    ensure((real + fake - 2.0 * ln2).abs() < 1e-9, || format!("D loss at 1/2 is {}", real + fake))?;
    ensure((real - ln2).abs() < 1e-9, || format!("G loss at 1/2 is {real}"))?;
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[2, 1], vec![0.0, 0.0]), true);
    let l = tape.bce_with_logits(x, &[1.0, 0.0]);
    let v = tape.value(l).item();
    ensure((v - ln2).abs() < 1e-9, || format!("mean BCE of two zero logits is {v}"))?;
    Ok(format!("D(1/2) = {:.12}, G(1/2) = {:.12}", real + fake, real))
}

/// One Adam step on a single scalar against a hand-computed reference.
pub fn adam_reference() -> Check {
    let cfg = AdamConfig {
        learning_rate: 0.01,
        ..AdamConfig::default()
    };
    let mut params = ParamSet::new();
    params.push("w", Tensor::scalar(1.0));
    let mut opt = Adam::new(cfg, &params);
    let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 1.0f64);
    let mut worst = 0.0f64;
    for t in 1..=5 {
        // Gradient of w^2.
        let g = 2.0 * w;
        opt.update(&mut params, &[Tensor::scalar(g)]);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        w -= 0.01 * mh / (vh.sqrt() + 1e-8);
        worst = worst.max((params.tensors()[0].item() - w).abs());
    }
    ensure(worst <= 1e-12, || format!("Adam deviates from the reference by {worst:e}"))?;
    Ok(format!("5 steps, max deviation {worst:.1e}"))
}

fn grad_report(name: &str, check: exgan_core::nn::GradCheck) -> Result<f64, String> {
    ensure(check.max_relative_error < GRAD_TOL, || format!("{name}: {check:?}"))?;
    Ok(check.max_relative_error)
}

pub fn generator_gradients() -> Result<f64, String> {
    let mut worst = 0.0f64;
    let configs = [
        ("dilated-4", GeneratorConfig { base_channels: 2, dilations: vec![2], image_size: 16, ..GeneratorConfig::dilated(4) }),
        ("dilated-8", GeneratorConfig { base_channels: 2, dilations: vec![2], image_size: 16, ..GeneratorConfig::dilated(8) }),
        (
            "encoder-decoder",
            GeneratorConfig {
                base_channels: 2,
                image_size: 16,
                bottleneck_dim: 4,
                code_dim: 6,
                ..GeneratorConfig::encoder_decoder()
            },
        ),
        (
            "encoder-decoder-skips",
            GeneratorConfig {
                base_channels: 2,
                image_size: 16,
                bottleneck_dim: 4,
                code_dim: 6,
                skip_connections: true,
                ..GeneratorConfig::encoder_decoder()
            },
        ),
    ];
    for (name, cfg) in configs {
        let g = Generator::new(cfg.clone()).map_err(e2s)?;
        let c = cfg.input_channels;
        let x = pattern(&[2, c, 16, 16], 3);
        let code = pattern(&[2, 6], 4);
        let target = pattern(&[2, 3, 16, 16], 5);
        let run = |params: &ParamSet, trainable: bool| {
            let mut tape = Tape::new();
            let p = tape.bind(params, trainable);
            let xv = tape.constant(x.clone());
            let cv = g.config().uses_code().then(|| tape.constant(code.clone()));
            let y = g.forward_on_tape(&mut tape, &p, xv, cv);
            let loss = tape.mean_abs_diff(y, &target);
            let value = tape.value(loss).item();
            (value, trainable.then(|| tape.backward(loss).collect(&tape, &p)))
        };
        let grads = run(g.params(), true).1.unwrap();
        let check = check_param_gradients(g.params(), &grads, 3, STEP, 1, |p| run(p, false).0);
        worst = worst.max(grad_report(name, check)?);
    }
    Ok(worst)
}

pub fn discriminator_gradients() -> Result<f64, String> {
    let mut worst = 0.0f64;
    for (with_reference, code_fusion) in [(false, false), (true, false), (false, true)] {
        let cfg = DiscriminatorConfig {
            with_reference,
            code_fusion,
            base_channels: 2,
            code_dim: 8,
            fusion_hidden: vec![4],
            image_size: 16,
            local_height: 16,
            local_width: 32,
            ..Default::default()
        };
        let d = Discriminator::new(cfg.clone()).map_err(e2s)?;
        let global = pattern(&[2, 3, 16, 16], 6);
        let local = pattern(&[2, 3, 16, 32], 7);
        let reference = pattern(&[2, 3, 16, 16], 8);
        let code = pattern(&[2, 8], 9);
        let run = |params: &ParamSet, trainable: bool| {
            let mut tape = Tape::new();
            let p = tape.bind(params, trainable);
            let gv = tape.constant(global.clone());
            let lv = tape.constant(local.clone());
            let rv = cfg.with_reference.then(|| tape.constant(reference.clone()));
            let cv = cfg.code_fusion.then(|| tape.constant(code.clone()));
            let logits = d.forward_on_tape(&mut tape, &p, gv, lv, rv, cv);
            let loss = tape.bce_with_logits(logits, &[0.9, 0.0]);
            let value = tape.value(loss).item();
            (value, trainable.then(|| tape.backward(loss).collect(&tape, &p)))
        };
        let grads = run(d.params(), true).1.unwrap();
        let check = check_param_gradients(d.params(), &grads, 3, STEP, 2, |p| run(p, false).0);
        worst = worst.max(grad_report("discriminator", check)?);
    }
    Ok(worst)
}

fn tiny_compressor() -> Result<Compressor, String> {
    Compressor::new(CompressorConfig {
        crop_height: 8,
        crop_width: 8,
        base_channels: 2,
        code_dim: 4,
        seed: 3,
        ..Default::default()
    })
    .map_err(e2s)
}

pub fn compressor_gradients() -> Result<f64, String> {
    let c = tiny_compressor()?;
    let inputs = pattern(&[2, 3, 8, 8], 10);
    let left = pattern(&[2, 3, 8, 8], 11);
    let right = pattern(&[2, 3, 8, 8], 12);
    let run = |params: &ParamSet, trainable: bool| {
        let mut tape = Tape::new();
        let p = tape.bind(params, trainable);
        let (total, _, _) = c.reconstruction_loss(&mut tape, &p, &inputs, &left, &right);
        let value = tape.value(total).item();
        (value, trainable.then(|| tape.backward(total).collect(&tape, &p)))
    };
    let grads = run(c.params(), true).1.unwrap();
    let check = check_param_gradients(c.params(), &grads, 3, STEP, 3, |p| run(p, false).0);
    let mut worst = grad_report("compressor", check)?;
    // The decoder halves see the same code; each branch alone is checked too.
    for eye in [Eye::Left, Eye::Right] {
        let run = |params: &ParamSet, trainable: bool| {
            let mut tape = Tape::new();
            let p = tape.bind(params, trainable);
            let x = tape.constant(inputs.clone());
            let code = c.encode_on_tape(&mut tape, &p, x);
            let y = c.decode_on_tape(&mut tape, &p, code, eye);
            let loss = tape.mean_abs_diff(y, if eye == Eye::Left { &left } else { &right });
            let value = tape.value(loss).item();
            (value, trainable.then(|| tape.backward(loss).collect(&tape, &p)))
        };
        let grads = run(c.params(), true).1.unwrap();
        let check = check_param_gradients(c.params(), &grads, 2, STEP, 4, |p| run(p, false).0);
        worst = worst.max(grad_report("compressor branch", check)?);
    }
    Ok(worst)
}

pub fn perceptual_gradients() -> Result<f64, String> {
    let c = tiny_compressor()?;
    let generated = pattern(&[2, 3, 16, 16], 13);
    let anns = [annotation16(), annotation16().translate(0, 2)];
    let code = pattern(&[2, 8], 14);
    let (_, grad) = perceptual_loss_and_gradient(&c, &generated, &anns, &code).map_err(e2s)?;
    ensure(grad.data().iter().any(|&g| g != 0.0), || "perceptual gradient is identically zero".into())?;
    let check = check_input_gradient(&generated, &grad, 40, STEP, 5, |x| {
        perceptual_loss_and_gradient(&c, x, &anns, &code).unwrap().0
    });
    grad_report("perceptual", check)
}

pub fn all_gradients() -> Check {
    let t = Instant::now();
    let g = generator_gradients()?;
    let d = discriminator_gradients()?;
    let c = compressor_gradients()?;
    let p = perceptual_gradients()?;
    Ok(format!(
        "max relative error G {g:.1e}, D {d:.1e}, compressor {c:.1e}, perceptual {p:.1e} in {:.1}s",
        t.elapsed().as_secs_f64()
    ))
}

pub fn architecture_contracts() -> Check {
    let ed = Generator::new(GeneratorConfig::encoder_decoder()).map_err(e2s)?;
    let bottleneck = ed.config().bottleneck_dim;
    let decoder_in = ed.decoder_input_dim();
    ensure(bottleneck == 256 && decoder_in == Some(512), || {
        format!("encoder-decoder bottleneck {bottleneck}, decoder input {decoder_in:?}")
    })?;
    let comp = Compressor::new(CompressorConfig::default()).map_err(e2s)?;
    ensure(comp.code_half_dim() == EYE_CODE_HALF_DIM && comp.code_dim() == EYE_CODE_DIM && EYE_CODE_DIM == 256, || {
        format!("code {} + {} = {}", comp.code_half_dim(), comp.code_half_dim(), comp.code_dim())
    })?;
    let mut channels = Vec::new();
    for family in [ModelFamily::NonExemplar, ModelFamily::Reference, ModelFamily::Code] {
        let mut g = GeneratorConfig::default();
        let mut d = DiscriminatorConfig::default();
        family.apply(&mut g, &mut d);
        channels.push(Generator::new(g).map_err(e2s)?.config().input_channels);
    }
    ensure(channels == [4, 8, 4], || format!("generator input channels {channels:?}"))?;
    ensure(GeneratorConfig::dilated(5).validate().is_err(), || "5 input channels accepted".into())?;
    let mut outputs = Vec::new();
    for (with_reference, code_fusion, seed) in [(false, false, 1), (true, false, 2), (false, true, 3)] {
        let d = Discriminator::new(DiscriminatorConfig {
            with_reference,
            code_fusion,
            seed,
            ..Default::default()
        })
        .map_err(e2s)?;
        for k in 0..3u64 {
            let g = pattern(&[3, 64, 64], 20 + k).map(|v| v * 50.0 - 25.0);
            let l = pattern(&[3, 32, 64], 30 + k);
            let code = exgan_core::EyeCode::new(vec![k as f64; 128], vec![-(k as f64); 128]).map_err(e2s)?;
            let p = d
                .discriminate(&DiscriminatorInput {
                    global: &g,
                    local: &l,
                    reference: with_reference.then_some(&g),
                    code: code_fusion.then_some(&code),
                })
                .map_err(e2s)?;
            outputs.push(p);
        }
    }
    ensure(outputs.iter().all(|&p| p > 0.0 && p < 1.0), || format!("discriminator outputs {outputs:?}"))?;
    Ok(format!(
        "bottleneck {bottleneck} -> {}, code {}+{}, input channels 4/8/4+code, D outputs in (0,1)",
        decoder_in.unwrap(),
        EYE_CODE_HALF_DIM,
        EYE_CODE_HALF_DIM
    ))
}

fn random_annotation<R: Rng>(rng: &mut R, size: usize) -> EyeAnnotation {
    let s = size as i32;
    let h = rng.gen_range(2..=s / 4);
    let y = rng.gen_range(0..=s - h);
    let lw = rng.gen_range(2..=s / 3);
    let rw = rng.gen_range(2..=s / 3);
    let lx = rng.gen_range(0..=s / 2 - lw);
    let rx = rng.gen_range(s / 2..=s - rw);
    EyeAnnotation::new(Rect::new(lx, y, lw, h), Rect::new(rx, y + rng.gen_range(-1..=1).clamp(-y, s - h - y), rw, h), 1.0)
}

/// Mask, composite and in-painting invariants over randomised boxes, sizes
/// and padding.
pub fn masking_invariants(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let generators: Vec<(usize, Generator)> = [16usize, 32]
        .iter()
        .map(|&s| {
            let cfg = GeneratorConfig {
                base_channels: 2,
                dilations: vec![2],
                image_size: s,
                seed: s as u64,
                ..GeneratorConfig::dilated(4)
            };
            (s, Generator::new(cfg).unwrap())
        })
        .collect();
    let mut masked_pixels = 0usize;
    for case in 0..cases {
        let (size, g) = &generators[case % generators.len()];
        let size = *size;
        let ann = random_annotation(&mut rng, size);
        let spec = if rng.gen_bool(0.5) {
            MaskSpec::per_eye(rng.gen_range(0..3))
        } else {
            MaskSpec::union(rng.gen_range(0..3))
        };
        let image = pattern(&[3, size, size], rng.gen());
        let other = pattern(&[3, size, size], rng.gen());
        let mask = build_mask(&ann, &spec, size, size).map_err(e2s)?;
        ensure(mask.data().iter().all(|&m| m == 0.0 || m == 1.0), || format!("case {case}: non-binary mask"))?;
        let masked = apply_mask(&image, &mask).map_err(e2s)?;
        let comp = composite(&other, &image, &mask).map_err(e2s)?;
        // composite(image, masked) == image; composite(image, other) with
        // the mask restores image inside the mask.
        let back = composite(&image, &masked, &mask).map_err(e2s)?;
        let inside = composite(&image, &other, &mask).map_err(e2s)?;
        let again = composite(&other, &comp, &mask).map_err(e2s)?;
        ensure(again == comp, || format!("case {case}: composite is not idempotent"))?;
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let m = mask.at(&[0, y, x]);
                    let i = image.at(&[c, y, x]);
                    let o = other.at(&[c, y, x]);
                    let ok = if m == 1.0 {
                        masked.at(&[c, y, x]) == 0.0 && comp.at(&[c, y, x]) == o && inside.at(&[c, y, x]) == i
                    } else {
                        masked.at(&[c, y, x]).to_bits() == i.to_bits()
                            && comp.at(&[c, y, x]).to_bits() == i.to_bits()
                            && inside.at(&[c, y, x]) == o
                    };
                    ensure(ok && back.at(&[c, y, x]) == i, || format!("case {case}: pixel ({c},{y},{x}) mask {m}"))?;
                }
            }
        }
        // Full in-painting pipeline.
        let sample = assemble_sample(&image, &other, &ann, &ann, &spec).map_err(e2s)?;
        let out = inpaint_sample(g, &sample).map_err(e2s)?;
        for (k, (&o, &i)) in out.data().iter().zip(image.data()).enumerate() {
            let m = mask.data()[k % (size * size)];
            ensure(m == 1.0 || o.to_bits() == i.to_bits(), || format!("case {case}: in-painting changed unmasked value {k}"))?;
        }
        masked_pixels += mask.data().iter().filter(|&&m| m == 1.0).count();
        let empty = assemble_sample(&image, &other, &ann, &ann, &MaskSpec::empty()).map_err(e2s)?;
        let out = inpaint_sample(g, &empty).map_err(e2s)?;
        ensure(out == image, || format!("case {case}: empty mask changed the image"))?;
    }
    Ok(format!("{cases} randomised cases, {masked_pixels} masked pixels, unmasked values bit-exact"))
}

/// FID self-distance, pure mean shift and symmetry on embeddings.
pub fn fid_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a: Vec<Vec<f64>> = (0..200).map(|_| (0..6).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()).collect();
    let self_fid = fid_from_embeddings(&a, &a).map_err(e2s)?;
    ensure(self_fid.abs() <= 1e-6, || format!("FID(A,A) = {self_fid:e}"))?;
    let d = [0.5, -1.0, 0.25, 2.0, 0.0, -0.75];
    let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().zip(&d).map(|(x, s)| x + s).collect()).collect();
    let shift = fid_from_embeddings(&a, &b).map_err(e2s)?;
    let norm2: f64 = d.iter().map(|v| v * v).sum();
    ensure((shift - norm2).abs() <= 1e-6, || format!("mean shift FID {shift} vs |d|^2 {norm2}"))?;
    Ok(format!("FID(A,A) = {self_fid:.1e}, shift {shift:.9} vs {norm2}"))
}

pub fn table_fixture() -> Check {
    let row = |model: &str, dataset: &str, l1: f64, ms: f64, inc: f64, fid: f64| MetricReport {
        model_name: model.into(),
        dataset_name: dataset.into(),
        l1,
        ms_ssim_dissimilarity: ms,
        ms_ssim: 1.0 - ms,
        inception: inc,
        fid,
    };
    let rows = [
        row("Non-exemplar", "Internal benchmark", 0.018, 5.05e-2, 3.96, 11.27),
        row("Reference", "Internal benchmark", 0.014, 3.97e-2, 3.82, 7.67),
        row("Code", "Internal benchmark", 0.015, 4.15e-2, 3.94, 8.49),
        row("Non-exemplar", "Celeb-ID", 7.36e-3, 8.44e-3, 3.72, 15.30),
        row("Reference", "Celeb-ID", 7.15e-3, 7.97e-3, 3.56, 15.66),
        row("Code", "Celeb-ID", 7.00e-3, 7.80e-3, 3.77, 14.62),
    ];
    let expected = [
        "Non-exemplar & 0.018 & 5.05E-2 & 3.96 & 11.27\\\\",
        "Reference & 0.014 & 3.97E-2 & 3.82 & 7.67\\\\",
        "Code & 0.015 & 4.15E-2 & 3.94 & 8.49\\\\",
        "Non-exemplar & 7.36E-3 & 8.44E-3 & 3.72 & 15.30\\\\",
        "Reference & 7.15E-3 & 7.97E-3 & 3.56 & 15.66\\\\",
        "Code & 7.00E-3 & 7.80E-3 & 3.77 & 14.62\\\\",
    ];
    for (r, want) in rows.iter().zip(expected) {
        let got = r.latex_row();
        ensure(got == want, || format!("row renders as {got:?}, expected {want:?}"))?;
    }
    let tex = latex_table(&rows);
    for needle in [
        "Model & L1 & MS-SSIM & Inception & FID",
        "\\multicolumn{5}{|c|}{Internal benchmark}\\\\",
        "\\multicolumn{5}{|c|}{Celeb-ID}\\\\",
    ] {
        ensure(tex.contains(needle), || format!("LaTeX table lacks {needle:?}"))?;
    }
    let order: Vec<usize> = expected.iter().map(|e| tex.find(e).unwrap_or(usize::MAX)).collect();
    ensure(order.windows(2).all(|w| w[0] < w[1]), || "rows out of order in the LaTeX table".into())?;
    let want = [
        Orientation::LowerIsBetter,
        Orientation::LowerIsBetter,
        Orientation::HigherIsBetter,
        Orientation::LowerIsBetter,
    ];
    ensure(ORIENTATION == want, || format!("orientation {ORIENTATION:?}"))?;
    let text = text_table(&rows);
    let orient_line = text.lines().find(|l| l.contains("higher")).unwrap_or("");
    ensure(orient_line.matches("lower").count() == 3 && orient_line.matches("higher").count() == 1, || {
        format!("orientation row {orient_line:?}")
    })?;
    Ok("6 published rows reproduced; lower is better except inception".into())
}

/// Small synthetic dataset for quick training checks.
pub fn tiny_dataset(ids: usize, size: usize, seed: u64) -> exgan_core::data::Dataset {
    generate_synthetic_dataset(&SyntheticConfig::new(ids, 3, size, seed)).unwrap().into_dataset()
}

pub fn tiny_family_configs(family: ModelFamily, size: usize) -> (TrainingConfig, GeneratorConfig, DiscriminatorConfig) {
    let mut g = GeneratorConfig {
        base_channels: 2,
        dilations: vec![2],
        image_size: size,
        seed: 1,
        ..Default::default()
    };
    let mut d = DiscriminatorConfig {
        base_channels: 2,
        fusion_hidden: vec![4],
        image_size: size,
        local_height: size / 2,
        local_width: size,
        seed: 2,
        ..Default::default()
    };
    family.apply(&mut g, &mut d);
    let t = TrainingConfig {
        batch_size: 2,
        seed: 3,
        ..Default::default()
    };
    (t, g, d)
}

pub fn small_compressor() -> Compressor {
    Compressor::new(CompressorConfig {
        base_channels: 2,
        seed: 4,
        ..Default::default()
    })
    .unwrap()
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Synthesis, a short training run of every family and evaluation, each
/// performed twice with the same seeds and compared byte for byte.
pub fn determinism() -> Check {
    use exgan_core::evaluation::{evaluate_model, AttributeClassifier, ClassifierConfig, EvalConfig};
    use exgan_core::training::{RunOptions, Trainer};

    let tmp = tempfile::tempdir().map_err(e2s)?;
    let synth = |name: &str| {
        let dir = tmp.path().join(name);
        generate_synthetic_dataset(&SyntheticConfig::new(5, 3, 32, 21)).unwrap().write(&dir).unwrap();
        dir_bytes(&dir)
    };
    let first = synth("a");
    ensure(first.len() == 5 * 3 + 2, || format!("synthesis wrote {} files", first.len()))?;
    ensure(first == synth("b"), || "synthesis differs between runs".into())?;
    let data = exgan_core::data::Dataset::load(&tmp.path().join("a/manifest.jsonl")).map_err(e2s)?.0;
    let (train, held) = data.split(2);
    let classifier = AttributeClassifier::new(ClassifierConfig::for_image_size(32)).map_err(e2s)?;
    let mut families = Vec::new();
    for family in [ModelFamily::NonExemplar, ModelFamily::Reference, ModelFamily::Code] {
        let run = || -> Result<(Vec<u8>, String), String> {
            let (t, g, d) = tiny_family_configs(family, 32);
            let c = (family == ModelFamily::Code).then(small_compressor);
            let mut trainer = Trainer::new(t, g, d, c.clone()).map_err(e2s)?;
            trainer.record_wall_time = false;
            let set = trainer.training_set(&train).map_err(e2s)?;
            trainer.run(&set, RunOptions::budget(6)).map_err(e2s)?;
            let ck = trainer.to_checkpoint().map_err(e2s)?.encode();
            let ev = evaluate_model(
                family.label(),
                "synthetic",
                &trainer.state.generator,
                c.as_ref(),
                &held,
                &classifier,
                &classifier,
                &EvalConfig::default(),
                None,
            )
            .map_err(e2s)?;
            Ok((ck, serde_json::to_string(&ev).map_err(e2s)?))
        };
        let (a, b) = (run()?, run()?);
        ensure(a.0 == b.0, || format!("{} checkpoints differ", family.label()))?;
        ensure(a.1 == b.1, || format!("{} evaluations differ", family.label()))?;
        families.push(family.label());
    }
    Ok(format!("synth ({} files), train and eval of {} identical across runs", first.len(), families.join("/")))
}
