//! Stage two of the pre-hoc pipeline: classify detected regions as
//! malignant vs not, and aggregate detection probabilities into a
//! breast confidence score.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{dice_box_mask, BoundingVolume};
use crate::dqn::Detection;
use crate::error::{Error, Result};
use crate::metrics::{roc_auc, ScoredCase};
use crate::nn::presets::{densenet_classifier, DenseNetConfig};
use crate::nn::{class_probabilities, sgd_step, softmax_cross_entropy, Network, ParameterSet};
use crate::phantom::{BreastSample, LesionClass, ScanLabel};
use crate::tensor::Array;
use crate::volume::{batch_input, Volume};

/// A detection with its malignancy probability.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ClassifiedDetection {
    pub bv: BoundingVolume,
    pub probability: f64,
}

/// Training label of one detection: it corresponds to the ground-truth
/// lesion of maximal Dice when that Dice reaches `dice_min`, and is
/// positive exactly when that lesion is malignant. Detections matching
/// nothing (false positives) and benign matches are negative.
pub fn label_detections(
    detections: &[Detection],
    sample: &BreastSample,
    dice_min: f64,
) -> Vec<bool> {
    detections
        .iter()
        .map(|d| {
            let mut best: Option<(f64, LesionClass)> = None;
            for l in &sample.lesions {
                let dice = dice_box_mask(&d.bv, &l.mask);
                if best.map_or(true, |(b, _)| dice > b) {
                    best = Some((dice, l.spec.class));
                }
            }
            match best {
                Some((dice, class)) => dice >= dice_min && class == LesionClass::Malignant,
                None => false,
            }
        })
        .collect()
}

/// Breast confidence: the maximum malignancy probability over the
/// breast's detections, zero when there are none.
pub fn breast_score(probabilities: &[f64]) -> f64 {
    probabilities.iter().cloned().fold(0.0, f64::max)
}

/// The detection classifier: a small DenseNet over resampled boxes.
pub struct PrehocClassifier {
    net: Network<f32>,
    cfg: DenseNetConfig,
}

impl PrehocClassifier {
    pub fn new(cfg: DenseNetConfig, params: ParameterSet<f32>) -> Self {
        let mut net = Network::from_parts(densenet_classifier(&cfg), params);
        net.set_train(false);
        PrehocClassifier { net, cfg }
    }

    pub fn init(cfg: DenseNetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::init(densenet_classifier(&cfg), &mut rng)?;
        net.set_train(false);
        Ok(PrehocClassifier { net, cfg })
    }

    pub fn config(&self) -> &DenseNetConfig {
        &self.cfg
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<f32> {
        &mut self.net
    }

    /// Box content resampled to the classifier input extents.
    pub fn patch(&self, volume: &Volume, bv: &BoundingVolume) -> Result<Volume> {
        volume.resample_box(bv.min, bv.max, self.cfg.input)
    }

    /// Malignancy probability per patch of a prepared batch.
    pub fn classify_batch(&self, patches: &Array<f32>) -> Result<Vec<f64>> {
        let expect = [self.cfg.input[2], self.cfg.input[1], self.cfg.input[0]];
        if patches.shape().len() != 5 || patches.shape()[2..] != expect {
            return Err(Error::InvalidArgument(format!(
                "patch batch {:?} does not match the classifier input {:?}",
                patches.shape(),
                self.cfg.input
            )));
        }
        let pass = self.net.evaluate(patches)?;
        let probs = class_probabilities(pass.output())?;
        Ok(probs.values().chunks(2).map(|c| f64::from(c[1])).collect())
    }

    /// Classifies every detection of one breast.
    pub fn classify_detections(
        &self,
        volume: &Volume,
        detections: &[Detection],
    ) -> Result<Vec<ClassifiedDetection>> {
        if detections.is_empty() {
            return Ok(Vec::new());
        }
        let patches: Vec<Volume> = detections
            .iter()
            .map(|d| self.patch(volume, &d.bv))
            .collect::<Result<_>>()?;
        let refs: Vec<&Volume> = patches.iter().collect();
        let probs = self.classify_batch(&batch_input::<f32>(&refs)?)?;
        Ok(detections
            .iter()
            .zip(probs)
            .map(|(d, probability)| ClassifiedDetection { bv: d.bv, probability })
            .collect())
    }

    /// Breast score straight from a volume and its detections.
    pub fn score_breast(&self, volume: &Volume, detections: &[Detection]) -> Result<f64> {
        let classified = self.classify_detections(volume, detections)?;
        Ok(breast_score(&classified.iter().map(|c| c.probability).collect::<Vec<_>>()))
    }
}

/// Optimization knobs for detection classification.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrehocTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    /// SGD learning rate.
    pub lr: f64,
    /// Dice floor for the correspondence rule.
    pub dice_min: f64,
    pub seed: u64,
}

impl Default for PrehocTrainConfig {
    fn default() -> Self {
        PrehocTrainConfig { epochs: 8, batch: 16, lr: 0.01, dice_min: 0.2, seed: 0 }
    }
}

/// A breast with its raw detections.
pub struct DetectedBreast<'a> {
    pub sample: &'a BreastSample,
    pub detections: Vec<Detection>,
}

/// Trains the detection classifier on labeled training detections with
/// SGD, selecting the epoch with the best validation breast-wise AUC.
/// Returns the classifier and that AUC (when computable).
pub fn train_prehoc_classifier(
    train: &[DetectedBreast],
    val: &[DetectedBreast],
    arch: &DenseNetConfig,
    cfg: &PrehocTrainConfig,
) -> Result<(PrehocClassifier, Option<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut classifier = PrehocClassifier::init(arch.clone(), cfg.seed ^ 0xc1a5)?;

    // Materialize the labeled patch set once.
    let mut patches: Vec<Volume> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for b in train {
        let det_labels = label_detections(&b.detections, b.sample, cfg.dice_min);
        for (d, &positive) in b.detections.iter().zip(&det_labels) {
            patches.push(classifier.patch(&b.sample.volume, &d.bv)?);
            labels.push(positive as usize);
        }
    }
    if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
        return Err(Error::Dataset(format!(
            "detection classifier needs both classes; got {} positives of {}",
            labels.iter().sum::<usize>(),
            labels.len()
        )));
    }

    let mut best: Option<(f64, ParameterSet<f32>)> = None;
    for epoch in 0..cfg.epochs {
        classifier.network_mut().set_train(true);
        let mut order: Vec<usize> = (0..patches.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let refs: Vec<&Volume> = chunk.iter().map(|&i| &patches[i]).collect();
            let chunk_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let input = batch_input::<f32>(&refs)?;
            let net = classifier.network_mut();
            net.zero_grads();
            let pass = net.forward(&input)?;
            let (loss, dlogits) = softmax_cross_entropy(pass.output(), &chunk_labels)?;
            net.backward(&dlogits)?;
            sgd_step(&mut net.params, cfg.lr, |_| true)?;
            loss_sum += f64::from(loss);
            batches += 1;
        }
        classifier.network_mut().set_train(false);

        let val_auc = validation_auc(&classifier, val)?;
        if let Some(auc) = val_auc {
            if best.as_ref().map_or(true, |(b, _)| auc > *b) {
                best = Some((auc, classifier.network().params.clone()));
            }
        }
        log::info!(
            "detection classifier epoch {epoch}: loss {:.4} val auc {:?}",
            loss_sum / batches.max(1) as f64,
            val_auc
        );
    }

    let best_auc = match best {
        Some((auc, params)) => {
            classifier.network_mut().params.copy_values_from(&params)?;
            classifier.network_mut().clear_pass();
            Some(auc)
        }
        None => None,
    };
    Ok((classifier, best_auc))
}

/// Breast-wise AUC of max-probability scores over the given breasts;
/// `None` when the breast labels are single-class.
fn validation_auc(classifier: &PrehocClassifier, val: &[DetectedBreast]) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut cases = Vec::with_capacity(val.len());
    for (i, b) in val.iter().enumerate() {
        let score = classifier.score_breast(&b.sample.volume, &b.detections)?;
        cases.push(ScoredCase::new(
            format!("breast{i}"),
            score,
            b.sample.label == ScanLabel::Malignant,
        ));
    }
    match roc_auc(&cases) {
        Ok(auc) => Ok(Some(auc)),
        Err(Error::MetricUndefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PatientId, PhantomConfig, Side};

    fn tiny_arch() -> DenseNetConfig {
        DenseNetConfig {
            input: [12, 12, 6],
            stem_channels: 3,
            stem_stride: 1,
            growth: 2,
            blocks: 3,
            layers_per_block: 2,
            compression: 0.5,
            transition_strides: vec![2, 2],
            classes: 2,
        }
    }

    fn detection(min: [i64; 3], max: [i64; 3]) -> Detection {
        Detection { bv: BoundingVolume::new(min, max).unwrap(), score: 1.0 }
    }

    #[test]
    fn labels_follow_the_correspondence_rule() {
        let mut cfg = PhantomConfig::easy();
        cfg.malignant_prior = 1.0;
        let s = generate_phantom(3, PatientId(0), Side::Left, &cfg);
        let (lo, hi) = s.lesions[0].mask.bbox().unwrap();
        let on_lesion = detection(lo, hi);
        let off_lesion = detection([0, 0, 0], [4, 4, 4]);
        let labels = label_detections(&[on_lesion, off_lesion], &s, 0.2);
        assert_eq!(labels, vec![true, false]);

        // The same overlap against a benign lesion is negative.
        let mut cfg = PhantomConfig::easy();
        cfg.malignant_prior = 0.0;
        let s = generate_phantom(3, PatientId(0), Side::Left, &cfg);
        let (lo, hi) = s.lesions[0].mask.bbox().unwrap();
        let labels = label_detections(&[detection(lo, hi)], &s, 0.2);
        assert_eq!(labels, vec![false]);
    }

    #[test]
    fn labeling_is_deterministic() {
        let s = generate_phantom(9, PatientId(0), Side::Right, &PhantomConfig::default_family());
        let dets = vec![detection([2, 2, 2], [14, 14, 9]), detection([10, 10, 4], [30, 30, 14])];
        assert_eq!(label_detections(&dets, &s, 0.2), label_detections(&dets, &s, 0.2));
    }

    #[test]
    fn breast_score_is_the_max_and_defaults_to_zero() {
        assert_eq!(breast_score(&[0.2, 0.7]), 0.7);
        assert_eq!(breast_score(&[0.4]), 0.4);
        assert_eq!(breast_score(&[]), 0.0);
    }

    #[test]
    fn breast_score_is_monotone_and_permutation_invariant() {
        let base = [0.3, 0.5, 0.1];
        let more = [0.3, 0.5, 0.1, 0.45];
        assert!(breast_score(&more) >= breast_score(&base));
        let mut shuffled = base;
        shuffled.swap(0, 2);
        assert_eq!(breast_score(&base), breast_score(&shuffled));
    }

    #[test]
    fn classification_is_deterministic_and_in_range() {
        let classifier = PrehocClassifier::init(tiny_arch(), 5).unwrap();
        let s = generate_phantom(4, PatientId(0), Side::Left, &PhantomConfig::easy());
        let dets = vec![detection([4, 4, 2], [20, 20, 12])];
        let a = classifier.classify_detections(&s.volume, &dets).unwrap();
        let b = classifier.classify_detections(&s.volume, &dets).unwrap();
        assert_eq!(a[0].probability, b[0].probability);
        assert!((0.0..=1.0).contains(&a[0].probability));
    }

    #[test]
    fn wrong_patch_extents_are_rejected() {
        let classifier = PrehocClassifier::init(tiny_arch(), 6).unwrap();
        let bad = Array::<f32>::zeros(&[1, 1, 4, 12, 12]);
        assert!(classifier.classify_batch(&bad).is_err());
    }
}
