//! Metric suite: L1, MS-SSIM dissimilarity, inception score, FID with a
//! pluggable feature extractor, and identity probes on synthetic faces.

pub mod extractor;
pub mod fid;
pub mod filters;
pub mod identity;
pub mod inception;
pub mod ms_ssim;
pub mod report;

use serde::{Deserialize, Serialize};

pub use extractor::{
    attribute_class, labelled_items, train_classifier, AttributeClassifier, Classifier, ClassifierConfig,
    CodeExtractor, FeatureExtractor, ATTRIBUTE_CLASSES,
};
pub use fid::{fid_from_embeddings, frechet_distance, mean_and_covariance, sqrtm_psd};
pub use filters::gaussian_blur;
pub use identity::{
    identity_preservation_score, identity_truths, mean_iris_rgb, mean_predictor_score, IdentityScore, IdentityTruth,
};
pub use inception::inception_score_from_probs;
pub use ms_ssim::{ms_ssim, ms_ssim_dissimilarity};
pub use report::{csv_table, latex_table, text_table, MetricReport};

use crate::compressor::Compressor;
use crate::data::{Dataset, EyeAnnotation};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::masking::MaskSpec;
use crate::tensor::Tensor;
use crate::training::{inpaint_batch, TrainingSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub inception_splits: usize,
    pub mask: MaskSpec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            inception_splits: 1,
            mask: MaskSpec::default(),
        }
    }
}

pub fn mean_abs_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    crate::error::check_shape(a.shape(), b.shape())?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

pub fn fid(
    a: &[(&Tensor, &EyeAnnotation)],
    b: &[(&Tensor, &EyeAnnotation)],
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    fid_from_embeddings(&extractor.embed(a)?, &extractor.embed(b)?)
}

pub fn inception_score(items: &[(&Tensor, &EyeAnnotation)], classifier: &dyn Classifier, splits: usize) -> Result<f64> {
    inception_score_from_probs(&classifier.probabilities(items)?, splits)
}

/// FID between a set and Gaussian-blurred copies of itself, one value per
/// blur standard deviation.
pub fn blur_ladder(
    items: &[(&Tensor, &EyeAnnotation)],
    sigmas: &[f64],
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<f64>> {
    let sharp = extractor.embed(items)?;
    sigmas
        .iter()
        .map(|&s| {
            let blurred: Vec<Tensor> = items.iter().map(|(img, _)| gaussian_blur(img, s)).collect();
            let pairs: Vec<_> = blurred.iter().zip(items).map(|(b, (_, a))| (b, *a)).collect();
            fid_from_embeddings(&sharp, &extractor.embed(&pairs)?)
        })
        .collect()
}

/// Metrics of in-painted images against their ground truth.
pub fn evaluate_images(
    model_name: &str,
    dataset_name: &str,
    inpainted: &[Tensor],
    ground_truth: &[Tensor],
    annotations: &[EyeAnnotation],
    extractor: &dyn FeatureExtractor,
    classifier: &dyn Classifier,
    inception_splits: usize,
) -> Result<(MetricReport, Vec<f64>)> {
    if inpainted.len() != ground_truth.len() || annotations.len() != ground_truth.len() || inpainted.is_empty() {
        return Err(Error::Validation(format!(
            "need equal, non-empty sets: {} in-painted, {} ground truth, {} annotations",
            inpainted.len(),
            ground_truth.len(),
            annotations.len()
        )));
    }
    let n = inpainted.len() as f64;
    let per_image = inpainted
        .iter()
        .zip(ground_truth)
        .map(|(a, b)| mean_abs_error(a, b))
        .collect::<Result<Vec<_>>>()?;
    let mut ms = 0.0;
    for (a, b) in inpainted.iter().zip(ground_truth) {
        ms += ms_ssim(a, b)?;
    }
    ms /= n;
    let fake: Vec<_> = inpainted.iter().zip(annotations).collect();
    let real: Vec<_> = ground_truth.iter().zip(annotations).collect();
    let report = MetricReport {
        model_name: model_name.into(),
        dataset_name: dataset_name.into(),
        l1: per_image.iter().sum::<f64>() / n,
        ms_ssim_dissimilarity: (1.0 - ms).clamp(0.0, 1.0),
        ms_ssim: ms,
        inception: inception_score(&fake, classifier, inception_splits)?,
        fid: fid(&fake, &real, extractor)?,
    };
    report.validate()?;
    Ok((report, per_image))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub identity_id: String,
    pub target: usize,
    pub reference: usize,
    pub l1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    pub per_image: Vec<ImageScore>,
    /// Present when the dataset carries synthetic ground-truth traits.
    pub identity: Option<IdentityScore>,
    pub mean_predictor: Option<f64>,
}

/// In-paints every evaluation pair of `dataset` and scores the composites.
/// `train_mean_iris` is the mean iris colour of the training set, used for
/// the mean-predictor baseline.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    model_name: &str,
    dataset_name: &str,
    generator: &Generator,
    compressor: Option<&Compressor>,
    dataset: &Dataset,
    extractor: &dyn FeatureExtractor,
    classifier: &dyn Classifier,
    config: &EvalConfig,
    train_mean_iris: Option<[f64; 3]>,
) -> Result<Evaluation> {
    if generator.config().uses_code() && compressor.is_none() {
        return Err(Error::Config("a code-conditioned generator needs its compressor".into()));
    }
    let set = TrainingSet::new(dataset, compressor.filter(|_| generator.config().uses_code()))?;
    let pairs = set.evaluation_pairs();
    let samples = set.evaluation_samples(&config.mask)?;
    let inpainted = inpaint_batch(generator, &samples)?;
    let gt: Vec<Tensor> = samples.iter().map(|s| s.target.clone()).collect();
    let anns: Vec<EyeAnnotation> = samples.iter().map(|s| s.target_annotation).collect();
    let (report, l1s) = evaluate_images(
        model_name,
        dataset_name,
        &inpainted,
        &gt,
        &anns,
        extractor,
        classifier,
        config.inception_splits,
    )?;
    let per_image = pairs
        .iter()
        .zip(l1s)
        .map(|(p, l1)| ImageScore {
            identity_id: dataset.records()[p.identity].identity_id.clone(),
            target: p.target,
            reference: p.reference,
            l1,
        })
        .collect();
    let (identity, mean_predictor) = if dataset.sidecar().is_some() {
        let truths = identity_truths(dataset, &pairs)?;
        let score = identity_preservation_score(&inpainted, &gt, &truths)?;
        (Some(score), train_mean_iris.map(|m| mean_predictor_score(&truths, m)))
    } else {
        (None, None)
    };
    Ok(Evaluation {
        report,
        per_image,
        identity,
        mean_predictor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticConfig};

    #[test]
    fn ground_truth_against_itself_is_a_zero_row() {
        let d = generate_synthetic_dataset(&SyntheticConfig::new(8, 3, 32, 4)).unwrap().into_dataset();
        let c = AttributeClassifier::new(ClassifierConfig::for_image_size(32)).unwrap();
        let items = labelled_items(&d).unwrap();
        let imgs: Vec<Tensor> = items.iter().map(|i| i.0.clone()).collect();
        let anns: Vec<EyeAnnotation> = items.iter().map(|i| i.1).collect();
        let (r, per) = evaluate_images("gt", "syn", &imgs, &imgs, &anns, &c, &c, 1).unwrap();
        assert_eq!(r.l1, 0.0);
        assert!(per.iter().all(|&v| v == 0.0));
        assert!(r.ms_ssim_dissimilarity.abs() < 1e-12);
        assert!(r.fid.abs() < 1e-6);
    }

    #[test]
    fn blur_ladder_increases() {
        let d = generate_synthetic_dataset(&SyntheticConfig::new(30, 3, 32, 5)).unwrap().into_dataset();
        let c = AttributeClassifier::new(ClassifierConfig::for_image_size(32)).unwrap();
        let items = labelled_items(&d).unwrap();
        let refs: Vec<_> = items.iter().map(|(i, a, _)| (i, a)).collect();
        let f = blur_ladder(&refs, &[0.5, 1.0, 1.5, 2.0], &c).unwrap();
        assert!(f[0] > 0.0);
        assert!(f.windows(2).all(|w| w[1] > w[0]), "{f:?}");
    }
}
