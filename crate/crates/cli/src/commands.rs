use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use exgan_core::compressor::{train_compressor as fit_compressor, Compressor, CompressorConfig};
use exgan_core::config::ExperimentConfig;
use exgan_core::data::{
    assemble_sample, generate_synthetic_dataset, load_image, save_image, Dataset, EyeAnnotation, SyntheticConfig,
};
use exgan_core::evaluation::{
    csv_table, evaluate_images, evaluate_model, fid_from_embeddings, latex_table, mean_iris_rgb, text_table,
    train_classifier, AttributeClassifier, ClassifierConfig, CodeExtractor, EvalConfig, Evaluation,
    FeatureExtractor, MetricReport,
};
use exgan_core::masking::{apply_mask, MaskSpec};
use exgan_core::training::{inpaint_batch, inpaint_sample, loss_curve_csv, RunOptions, Trainer};
use exgan_core::{Error, Rect, Tensor};
use log::{info, warn};
use serde::Serialize;

use crate::grid::comparison_grid;
use crate::record::RunRecord;
use crate::{EvalArgs, InpaintArgs, ReportArgs, SynthArgs, TrainArgs, TrainCompressorArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_user_error() => 1,
            CliError::Core(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Usage(msg.into()))
}

/// Creates `dir`, refusing a non-empty existing one unless `force`.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = dir.read_dir()?.next().is_some();
        if non_empty && !force {
            return usage(format!("{} already exists and is not empty (use --force)", dir.display()));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let (d, rejections) = Dataset::load(manifest)?;
    for r in &rejections {
        warn!("skipped identity {}: {}", r.identity_id, r.reason);
    }
    if d.is_empty() {
        return usage(format!("{} contains no usable identities", manifest.display()));
    }
    Ok(d)
}

fn image_side(d: &Dataset) -> Result<usize> {
    match d.image_size() {
        Some((h, w)) if h == w => Ok(h),
        Some((h, w)) => usage(format!("images must be square, got {w}x{h}")),
        None => usage("dataset has no images"),
    }
}

pub fn synth(a: SynthArgs, det: bool) -> Result<()> {
    let mut cfg = SyntheticConfig::new(a.ids, a.per_id, a.size, a.seed);
    if let Some(v) = a.min_iris_distance {
        cfg.min_iris_distance = v;
    }
    if let Some(v) = a.pose_jitter {
        cfg.pose_jitter = v;
    }
    if let Some(p) = &a.id_prefix {
        cfg.id_prefix = p.clone();
    }
    cfg.validate()?;
    prepare_dir(&a.out, a.force)?;
    let data = generate_synthetic_dataset(&cfg)?;
    let manifest = data.write(&a.out)?;
    info!("wrote {} images of {} identities to {}", data.image_count(), a.ids, a.out.display());
    let mut rec = RunRecord::new("synth", &cfg, det);
    rec.output_file(&manifest)?;
    rec.write(&a.out.join("run.json"))?;
    Ok(())
}

fn train_compressor_on(dataset: &Dataset, config: &CompressorConfig) -> Result<Compressor> {
    let crops = Compressor::new(config.clone())?.crop_dataset(dataset)?;
    let (model, curve) = fit_compressor(&crops, config)?;
    if let Some(last) = curve.total.last() {
        info!("compressor trained for {} epochs, final loss {last:.5}", curve.total.len());
    }
    Ok(model)
}

pub fn train_compressor(a: TrainCompressorArgs, det: bool) -> Result<()> {
    if a.out.exists() && !a.force {
        return usage(format!("{} already exists (use --force)", a.out.display()));
    }
    let mut cfg = CompressorConfig {
        seed: a.seed,
        ..CompressorConfig::default()
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.base_channels {
        cfg.base_channels = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    cfg.validate()?;
    let data = load_dataset(&a.manifest)?;
    let model = train_compressor_on(&data, &cfg)?;
    model.save(&a.out)?;
    let mut rec = RunRecord::new("train-compressor", &cfg, det);
    rec.input_manifest(&a.manifest)?;
    rec.output_file(&a.out)?;
    let mut name = a.out.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    rec.write(&a.out.with_file_name(name))?;
    Ok(())
}

/// FID extractor for validation during training: the attribute classifier
/// when the data carries synthetic traits, otherwise the eye code.
enum ValidationExtractor {
    Classifier(AttributeClassifier),
    Code(Compressor),
}

impl ValidationExtractor {
    fn embed(&self, items: &[(&Tensor, &EyeAnnotation)]) -> exgan_core::Result<Vec<Vec<f64>>> {
        match self {
            ValidationExtractor::Classifier(c) => c.embed(items),
            ValidationExtractor::Code(c) => CodeExtractor(c).embed(items),
        }
    }
}

pub fn train(a: TrainArgs, det: bool) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let out = cfg.run.output_dir.clone();
    prepare_dir(&out, a.force)?;
    let full = load_dataset(&cfg.data.train_manifest)?;
    let (train, validation) = match (&cfg.data.validation_manifest, cfg.data.held_out_identities) {
        (Some(v), _) => (full, Some(load_dataset(v)?)),
        (None, 0) => (full, None),
        (None, k) if k >= full.len() => {
            return usage(format!("cannot hold out {k} of {} identities", full.len()));
        }
        (None, k) => {
            let (t, v) = full.split(k);
            (t, Some(v))
        }
    };
    if image_side(&train)? != cfg.image_size {
        return usage(format!(
            "config image_size is {} but the training images are {}",
            cfg.image_size,
            image_side(&train)?
        ));
    }
    if let Some(v) = &validation {
        if let Some(id) = train.identity_ids().intersection(&v.identity_ids()).next() {
            return Err(Error::IdentityLeak {
                count: train.identity_ids().intersection(&v.identity_ids()).count(),
                example: id.clone(),
            }
            .into());
        }
    }
    let mut rec = RunRecord::new("train", &cfg, det);
    rec.input_file(&a.config)?;
    rec.input_manifest(&cfg.data.train_manifest)?;

    let compressor = match (&cfg.compressor, &cfg.run.compressor_checkpoint) {
        (None, _) => None,
        (Some(_), Some(path)) => {
            rec.input_file(path)?;
            Some(Compressor::load(path)?)
        }
        (Some(c), None) => {
            info!("pre-training the compressor");
            let model = train_compressor_on(&train, c)?;
            let path = out.join("compressor.exgan");
            model.save(&path)?;
            rec.output_file(&path)?;
            Some(model)
        }
    };

    let mut trainer = match &a.resume {
        Some(path) => {
            rec.input_file(path)?;
            let t = Trainer::from_checkpoint(&exgan_core::checkpoint::Checkpoint::load(path)?)?;
            if t.family != cfg.family {
                return usage(format!(
                    "checkpoint is a {} model but the config asks for {}",
                    t.family.name(),
                    cfg.family.name()
                ));
            }
            t
        }
        None => Trainer::new(
            cfg.training.clone(),
            cfg.generator.clone(),
            cfg.discriminator.clone(),
            compressor.clone(),
        )?,
    };
    trainer.record_wall_time = !det;
    info!(
        "training {} model on {} identities ({} images) for {} image pairs",
        cfg.family.name(),
        train.len(),
        train.image_count(),
        cfg.run.budget_images
    );

    let extractor = match (&validation, cfg.run.validate_every) {
        (Some(_), n) if n > 0 => Some(if train.sidecar().is_some() {
            let (c, _) = train_classifier(&train, &cfg.eval.classifier)?;
            let path = out.join("classifier.exgan");
            c.save(&path)?;
            rec.output_file(&path)?;
            ValidationExtractor::Classifier(c)
        } else if let Some(c) = &compressor {
            ValidationExtractor::Code(c.clone())
        } else {
            return usage("validation FID needs synthetic traits or a compressor");
        }),
        _ => None,
    };

    let set = trainer.training_set(&train)?;
    let mask = cfg.training.mask.base();
    let val_samples = match &validation {
        Some(v) if extractor.is_some() => {
            let vset = exgan_core::training::TrainingSet::new(v, trainer.compressor.as_ref())?;
            Some(vset.evaluation_samples(&mask)?)
        }
        _ => None,
    };
    let real_embeddings = match (&extractor, &val_samples) {
        (Some(e), Some(s)) => {
            let items: Vec<_> = s.iter().map(|x| (&x.target, &x.target_annotation)).collect();
            Some(e.embed(&items)?)
        }
        _ => None,
    };
    let mut validations = Vec::new();
    let mut validate = |t: &Trainer| -> exgan_core::Result<f64> {
        let (e, s, real) = match (&extractor, &val_samples, &real_embeddings) {
            (Some(e), Some(s), Some(r)) => (e, s, r),
            _ => return Ok(0.0),
        };
        let fake = inpaint_batch(&t.state.generator, s)?;
        let items: Vec<_> = fake.iter().zip(s).map(|(f, x)| (f, &x.target_annotation)).collect();
        let fid = fid_from_embeddings(&e.embed(&items)?, real)?;
        info!("validation after {} pairs: FID {fid:.4}", t.state.images_seen);
        Ok(fid)
    };
    let ck_dir = out.join("checkpoints");
    let mut on_checkpoint = |t: &Trainer| -> exgan_core::Result<()> {
        let path = ck_dir.join(format!("images_{:010}.exgan", t.state.images_seen));
        t.to_checkpoint()?.save(&path)?;
        info!("checkpoint {}", path.display());
        Ok(())
    };
    let options = RunOptions {
        budget_images: cfg.run.budget_images,
        validate_every: if extractor.is_some() { cfg.run.validate_every } else { 0 },
        validate: Some(&mut validate),
        checkpoint_every: cfg.run.checkpoint_every,
        on_checkpoint: Some(&mut on_checkpoint),
    };
    let summary = trainer.run(&set, options)?;
    validations.extend(summary.validation.iter().copied());

    let final_path = out.join("checkpoint_final.exgan");
    trainer.to_checkpoint()?.save(&final_path)?;
    rec.output_file(&final_path)?;
    if let Some(best) = &summary.best_checkpoint {
        let path = out.join("checkpoint_best.exgan");
        best.save(&path)?;
        rec.output_file(&path)?;
    }
    let curve = out.join("loss_curve.csv");
    std::fs::write(&curve, loss_curve_csv(&trainer.state.history))?;
    rec.output_file(&curve)?;
    if !validations.is_empty() {
        let mut csv = String::from("images_seen,fid\n");
        for (n, f) in &validations {
            csv.push_str(&format!("{n},{f}\n"));
        }
        let path = out.join("validation.csv");
        std::fs::write(&path, csv)?;
        rec.output_file(&path)?;
    }
    rec.write(&out.join("run.json"))?;
    info!("finished after {} image pairs", trainer.state.images_seen);
    Ok(())
}

fn leak_guard(eval_ids: &BTreeSet<String>, train_ids: &BTreeSet<String>) -> Result<()> {
    let overlap: Vec<&String> = eval_ids.intersection(train_ids).collect();
    match overlap.first() {
        Some(first) => Err(Error::IdentityLeak {
            count: overlap.len(),
            example: (*first).clone(),
        }
        .into()),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct EvalConfigRecord<'a> {
    checkpoint: Option<&'a Path>,
    ground_truth: bool,
    mask_padding: u32,
    inception_splits: usize,
    seed: u64,
}

pub fn eval(a: EvalArgs, det: bool) -> Result<()> {
    let data = load_dataset(&a.manifest)?;
    let size = image_side(&data)?;
    let eval_ids = data.identity_ids();
    let trainer = match &a.checkpoint {
        Some(p) => Some(Trainer::from_checkpoint(&exgan_core::checkpoint::Checkpoint::load(p)?)?),
        None => None,
    };
    if let Some(t) = &trainer {
        leak_guard(&eval_ids, &t.train_identities)?;
    }
    let train_data = match &a.train_manifest {
        Some(p) => {
            let d = load_dataset(p)?;
            leak_guard(&eval_ids, &d.identity_ids())?;
            Some(d)
        }
        None => None,
    };
    prepare_dir(&a.out, a.force)?;
    let mut rec = RunRecord::new(
        "eval",
        &EvalConfigRecord {
            checkpoint: a.checkpoint.as_deref(),
            ground_truth: a.ground_truth,
            mask_padding: a.mask_padding,
            inception_splits: a.inception_splits,
            seed: a.seed,
        },
        det,
    );
    rec.input_manifest(&a.manifest)?;
    let classifier = match (&a.classifier, &train_data) {
        (Some(p), _) => {
            rec.input_file(p)?;
            AttributeClassifier::load(p)?
        }
        (None, Some(d)) => {
            let cfg = ClassifierConfig {
                seed: a.seed,
                ..ClassifierConfig::for_image_size(size)
            };
            let (c, _) = train_classifier(d, &cfg)?;
            let path = a.out.join("classifier.exgan");
            c.save(&path)?;
            rec.output_file(&path)?;
            c
        }
        (None, None) => return usage("eval needs --classifier or --train-manifest for the feature extractor"),
    };
    if let Some(p) = &a.checkpoint {
        rec.input_file(p)?;
    }
    let dataset_name = a.dataset_name.clone().unwrap_or_else(|| {
        a.manifest
            .parent()
            .and_then(|p| p.file_name())
            .map_or("dataset".into(), |n| n.to_string_lossy().into_owned())
    });
    let config = EvalConfig {
        inception_splits: a.inception_splits,
        mask: MaskSpec::per_eye(a.mask_padding),
    };
    let evaluation = match &trainer {
        Some(t) => {
            let name = a.model_name.clone().unwrap_or_else(|| t.family.label().to_string());
            let train_mean = match &train_data {
                Some(d) if d.sidecar().is_some() => Some(mean_iris_rgb(d)?),
                _ => None,
            };
            evaluate_model(
                &name,
                &dataset_name,
                &t.state.generator,
                t.compressor.as_ref(),
                &data,
                &classifier,
                &classifier,
                &config,
                train_mean,
            )?
        }
        None => {
            let set = exgan_core::training::TrainingSet::new(&data, None)?;
            let pairs = set.evaluation_pairs();
            let gt: Vec<Tensor> = pairs.iter().map(|p| data.image(p.identity, p.target).clone()).collect();
            let anns: Vec<EyeAnnotation> = pairs
                .iter()
                .map(|p| data.records()[p.identity].images[p.target].annotation)
                .collect();
            let name = a.model_name.clone().unwrap_or_else(|| "Ground truth".into());
            let (report, l1s) = evaluate_images(
                &name,
                &dataset_name,
                &gt,
                &gt,
                &anns,
                &classifier,
                &classifier,
                a.inception_splits,
            )?;
            Evaluation {
                report,
                per_image: pairs
                    .iter()
                    .zip(l1s)
                    .map(|(p, l1)| exgan_core::evaluation::ImageScore {
                        identity_id: data.records()[p.identity].identity_id.clone(),
                        target: p.target,
                        reference: p.reference,
                        l1,
                    })
                    .collect(),
                identity: None,
                mean_predictor: None,
            }
        }
    };
    let rows = std::slice::from_ref(&evaluation.report);
    let files = [
        ("report.json", serde_json::to_string_pretty(&evaluation.report)?),
        ("report.csv", csv_table(rows)),
        ("report.txt", text_table(rows)),
        ("report.tex", latex_table(rows)),
        ("evaluation.json", serde_json::to_string_pretty(&evaluation)?),
    ];
    for (name, body) in files {
        let path = a.out.join(name);
        std::fs::write(&path, body)?;
        rec.output_file(&path)?;
    }
    let mut per = String::from("identity_id,target,reference,l1\n");
    for s in &evaluation.per_image {
        per.push_str(&format!("{},{},{},{}\n", s.identity_id, s.target, s.reference, s.l1));
    }
    let path = a.out.join("per_image_l1.csv");
    std::fs::write(&path, per)?;
    rec.output_file(&path)?;
    rec.write(&a.out.join("run.json"))?;
    print!("{}", text_table(rows));
    if let Some(id) = &evaluation.identity {
        println!("identity: iris colour error {:.5}, eye shape error {:.5}", id.iris_color, id.eye_shape);
    }
    Ok(())
}

/// Parses `lx,ly,lw,lh,rx,ry,rw,rh`.
pub fn parse_eyes(text: &str) -> Result<EyeAnnotation> {
    let v: Vec<i32> = text
        .split(',')
        .map(|t| t.trim().parse::<i32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("bad eye boxes {text:?}: {e}")))?;
    if v.len() != 8 {
        return usage(format!("eye boxes need 8 integers, got {}", v.len()));
    }
    let ann = EyeAnnotation::new(Rect::new(v[0], v[1], v[2], v[3]), Rect::new(v[4], v[5], v[6], v[7]), 1.0);
    ann.validate()?;
    Ok(ann)
}

fn lookup_annotation(manifest: &Path, image: &Path) -> Result<EyeAnnotation> {
    let load = exgan_core::data::load_manifest(manifest)?;
    let want = image.canonicalize()?;
    for record in &load.records {
        for entry in &record.images {
            if let Ok(p) = load.base_dir.join(&entry.path).canonicalize() {
                if p == want {
                    return Ok(entry.annotation);
                }
            }
        }
    }
    usage(format!("{} is not listed in {}", image.display(), manifest.display()))
}

fn annotation_for(boxes: &Option<String>, manifest: &Option<PathBuf>, image: &Path) -> Result<EyeAnnotation> {
    match (boxes, manifest) {
        (Some(b), _) => parse_eyes(b),
        (None, Some(m)) => lookup_annotation(m, image),
        (None, None) => usage(format!("no eye boxes for {} (give them or a --manifest)", image.display())),
    }
}

pub fn inpaint(a: InpaintArgs, det: bool) -> Result<()> {
    let trainer = Trainer::from_checkpoint(&exgan_core::checkpoint::Checkpoint::load(&a.checkpoint)?)?;
    let gcfg = trainer.state.generator.config();
    let exemplar = gcfg.uses_reference() || gcfg.uses_code();
    if exemplar && a.reference.is_none() {
        return usage(format!("a {} model needs --reference", trainer.family.name()));
    }
    let image = load_image(&a.image)?;
    let ann = annotation_for(&a.eyes, &a.manifest, &a.image)?;
    let (reference, ref_ann) = match &a.reference {
        Some(p) => (load_image(p)?, annotation_for(&a.reference_eyes, &a.manifest, p)?),
        None => (image.clone(), ann),
    };
    prepare_dir(&a.out, a.force)?;
    let mask_spec = MaskSpec::per_eye(a.mask_padding);
    let mut sample = assemble_sample(&image, &reference, &ann, &ref_ann, &mask_spec)?;
    if gcfg.uses_code() {
        let c = trainer
            .compressor
            .as_ref()
            .ok_or_else(|| CliError::Usage("checkpoint lacks its compressor".into()))?;
        sample.code = Some(c.code_for_image(&reference, &ref_ann)?);
    }
    let out = inpaint_sample(&trainer.state.generator, &sample)?;
    let masked = apply_mask(&image, &sample.mask)?;
    let grid = comparison_grid(&reference, &masked, &image, &out, &ann)?;
    let mut rec = RunRecord::new(
        "inpaint",
        &(a.mask_padding, a.eyes.as_deref(), a.reference_eyes.as_deref()),
        det,
    );
    rec.input_file(&a.checkpoint)?;
    rec.input_file(&a.image)?;
    if let Some(r) = &a.reference {
        rec.input_file(r)?;
    }
    for (name, img) in [("inpainted.png", &out), ("masked.png", &masked), ("grid.png", &grid)] {
        let path = a.out.join(name);
        save_image(&path, img)?;
        rec.output_file(&path)?;
    }
    rec.write(&a.out.join("run.json"))?;
    Ok(())
}

pub fn report(a: ReportArgs, det: bool) -> Result<()> {
    let mut rows = Vec::with_capacity(a.inputs.len());
    let mut rec = RunRecord::new("report", &a.inputs, det);
    for p in &a.inputs {
        let row: MetricReport = serde_json::from_slice(&std::fs::read(p)?)?;
        row.validate()?;
        rec.input_file(p)?;
        rows.push(row);
    }
    prepare_dir(&a.out, a.force)?;
    for (name, body) in [
        ("table.csv", csv_table(&rows)),
        ("table.txt", text_table(&rows)),
        ("table.tex", latex_table(&rows)),
    ] {
        let path = a.out.join(name);
        std::fs::write(&path, body)?;
        rec.output_file(&path)?;
    }
    rec.write(&a.out.join("run.json"))?;
    print!("{}", text_table(&rows));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eye_boxes_parse() {
        let a = parse_eyes("1,2,3,4, 10,2,3,4").unwrap();
        assert_eq!(a.right_box, Rect::new(10, 2, 3, 4));
        assert!(parse_eyes("1,2,3").is_err());
        assert!(parse_eyes("a,2,3,4,5,6,7,8").is_err());
    }

    #[test]
    fn leak_guard_reports_overlap() {
        let a: BTreeSet<String> = ["x".to_string(), "y".to_string()].into();
        let b: BTreeSet<String> = ["y".to_string()].into();
        let e = leak_guard(&a, &b).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(leak_guard(&a, &BTreeSet::new()).is_ok());
    }
}
