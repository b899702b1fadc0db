//! The observation encoder: a residual patch classifier whose
//! penultimate activation embeds a bounding-volume's content.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{best_lesion_dice, BoundingVolume};
use crate::error::{Error, Result};
use crate::nn::presets::{resnet_encoder, ResNetEncoderConfig};
use crate::nn::{
    class_probabilities, softmax_cross_entropy, AdamState, Network, ParameterSet,
};
use crate::phantom::BreastSample;
use crate::tensor::Array;
use crate::volume::{batch_input, Volume};

/// A trained patch encoder. `embed` taps the flattened penultimate
/// activation; `classify` returns the lesion probability used during
/// encoder training.
pub struct PatchEncoder {
    net: Network<f32>,
    cfg: ResNetEncoderConfig,
    min_extent: i64,
}

impl PatchEncoder {
    pub fn new(cfg: ResNetEncoderConfig, params: ParameterSet<f32>, min_extent: i64) -> Self {
        let mut net = Network::from_parts(resnet_encoder(&cfg), params);
        net.set_train(false);
        PatchEncoder { net, cfg, min_extent }
    }

    pub fn init(cfg: ResNetEncoderConfig, min_extent: i64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::init(resnet_encoder(&cfg), &mut rng)?;
        net.set_train(false);
        Ok(PatchEncoder { net, cfg, min_extent })
    }

    pub fn config(&self) -> &ResNetEncoderConfig {
        &self.cfg
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<f32> {
        &mut self.net
    }

    pub fn embedding_dim(&self) -> usize {
        self.cfg.embedding_dim()
    }

    /// Extracts the box content resampled to the encoder input extents.
    pub fn patch(&self, volume: &Volume, bv: &BoundingVolume) -> Result<Volume> {
        if (0..3).any(|a| bv.extent(a) < self.min_extent) {
            return Err(Error::DegenerateBoundingVolume(format!(
                "box {:?}..{:?} is below the minimum extent {}",
                bv.min, bv.max, self.min_extent
            )));
        }
        volume.resample_box(bv.min, bv.max, self.cfg.input)
    }

    /// Embedding of the box content: deterministic, finite.
    pub fn embed(&self, volume: &Volume, bv: &BoundingVolume) -> Result<Vec<f32>> {
        let patch = self.patch(volume, bv)?;
        let pass = self.net.evaluate(&patch.to_input::<f32>())?;
        let emb = pass.tap(&self.net.spec, "embedding")?;
        Ok(emb.values().to_vec())
    }

    /// Lesion probability of a prepared patch batch (class 1 = overlaps
    /// a lesion).
    pub fn lesion_probabilities(&self, patches: &Array<f32>) -> Result<Vec<f32>> {
        let pass = self.net.evaluate(patches)?;
        let probs = class_probabilities(pass.output())?;
        Ok(probs.values().chunks(2).map(|c| c[1]).collect())
    }
}

/// Patch sampling and optimization knobs for encoder training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    /// Positive/negative patch counts (paper scale: 8000 each).
    pub positives: usize,
    pub negatives: usize,
    /// Dice threshold against a lesion above which a patch is positive.
    pub positive_dice: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Fraction of patches held out for the accuracy report.
    pub holdout: f64,
    pub min_extent: i64,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig {
            positives: 800,
            negatives: 800,
            positive_dice: 0.6,
            batch: 16,
            epochs: 3,
            lr: 1e-3,
            holdout: 0.1,
            min_extent: 4,
            seed: 0,
        }
    }
}

/// A sampled patch: its box, source sample index and label.
struct PatchDraw {
    sample: usize,
    bv: BoundingVolume,
    positive: bool,
}

/// Whether a box counts as a positive patch.
pub fn patch_is_positive(bv: &BoundingVolume, sample: &BreastSample, threshold: f64) -> bool {
    let masks: Vec<_> = sample.lesions.iter().map(|l| &l.mask).collect();
    best_lesion_dice(bv, &masks).0 > threshold
}

fn random_box(dims: [usize; 3], min_extent: i64, rng: &mut impl Rng) -> BoundingVolume {
    let mut min = [0i64; 3];
    let mut max = [0i64; 3];
    for a in 0..3 {
        let dim = dims[a] as i64;
        let hi = (dim * 3 / 4).max(min_extent);
        let ext = if hi > min_extent { rng.gen_range(min_extent..=hi) } else { min_extent };
        let start_hi = dim - ext;
        min[a] = if start_hi > 0 { rng.gen_range(0..=start_hi) } else { 0 };
        max[a] = min[a] + ext;
    }
    BoundingVolume { min, max }
}

/// Jitters a lesion's bounding box until the Dice threshold is met;
/// falls back to the exact bounding box.
fn positive_box(
    sample: &BreastSample,
    threshold: f64,
    min_extent: i64,
    rng: &mut impl Rng,
) -> Option<BoundingVolume> {
    if sample.lesions.is_empty() {
        return None;
    }
    let lesion = &sample.lesions[rng.gen_range(0..sample.lesions.len())];
    let (lo, hi) = lesion.mask.bbox()?;
    let dims = sample.volume.dims;
    for _ in 0..24 {
        let mut min = [0i64; 3];
        let mut max = [0i64; 3];
        for a in 0..3 {
            let span = ((hi[a] - lo[a]) / 4).max(1);
            min[a] = lo[a] + rng.gen_range(-span..=span);
            max[a] = hi[a] + rng.gen_range(-span..=span);
        }
        if (0..3).any(|a| max[a] - min[a] < 1) {
            continue;
        }
        let bv = BoundingVolume { min, max }.clamp_to(dims, min_extent);
        if patch_is_positive(&bv, sample, threshold) {
            return Some(bv);
        }
    }
    let bv = BoundingVolume { min: lo, max: hi }.clamp_to(dims, min_extent);
    patch_is_positive(&bv, sample, threshold).then_some(bv)
}

fn draw_patches(
    samples: &[&BreastSample],
    cfg: &EncoderTrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<PatchDraw>> {
    let with_lesions: Vec<usize> = (0..samples.len())
        .filter(|&i| !samples[i].lesions.is_empty())
        .collect();
    if with_lesions.is_empty() {
        return Err(Error::Dataset(
            "no positive patch obtainable: no sample carries a lesion".into(),
        ));
    }
    let mut out: Vec<PatchDraw> = Vec::with_capacity(cfg.positives + cfg.negatives);
    let mut failures = 0usize;
    while out.iter().filter(|p| p.positive).count() < cfg.positives {
        let i = with_lesions[rng.gen_range(0..with_lesions.len())];
        match positive_box(samples[i], cfg.positive_dice, cfg.min_extent, rng) {
            Some(bv) => out.push(PatchDraw { sample: i, bv, positive: true }),
            None => {
                failures += 1;
                if failures > 50 {
                    return Err(Error::Dataset(format!(
                        "no positive patch obtainable: {failures} draws failed the \
                         Dice > {} test; lesions may be too rough for box patches",
                        cfg.positive_dice
                    )));
                }
            }
        }
    }
    let mut negs = 0;
    while negs < cfg.negatives {
        let i = rng.gen_range(0..samples.len());
        let bv = random_box(samples[i].volume.dims, cfg.min_extent, rng);
        if !patch_is_positive(&bv, samples[i], cfg.positive_dice) {
            out.push(PatchDraw { sample: i, bv, positive: false });
            negs += 1;
        }
    }
    // Interleave so every minibatch sees both classes.
    for i in (1..out.len()).rev() {
        let j = rng.gen_range(0..=i);
        out.swap(i, j);
    }
    Ok(out)
}

/// Trains the patch encoder as a binary lesion-overlap classifier on
/// randomly sampled boxes; returns the encoder and its held-out
/// accuracy.
pub fn train_patch_encoder(
    samples: &[&BreastSample],
    arch: &ResNetEncoderConfig,
    cfg: &EncoderTrainConfig,
) -> Result<(PatchEncoder, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draws = draw_patches(samples, cfg, &mut rng)?;
    let holdout = ((draws.len() as f64 * cfg.holdout).round() as usize).max(2);
    let (val, train) = draws.split_at(holdout.min(draws.len() / 2));

    let mut encoder = PatchEncoder::init(arch.clone(), cfg.min_extent, cfg.seed ^ 0x5eed)?;
    let mut adam = AdamState::<f32>::new();
    encoder.network_mut().set_train(true);

    let resample = |enc: &PatchEncoder, chunk: &[PatchDraw]| -> Result<(Array<f32>, Vec<usize>)> {
        let mut patches = Vec::with_capacity(chunk.len());
        for d in chunk {
            patches.push(enc.patch(&samples[d.sample].volume, &d.bv)?);
        }
        let refs: Vec<&Volume> = patches.iter().collect();
        let labels = chunk.iter().map(|d| d.positive as usize).collect();
        Ok((batch_input::<f32>(&refs)?, labels))
    };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let rows: Vec<PatchDraw> = chunk
                .iter()
                .map(|&i| PatchDraw {
                    sample: train[i].sample,
                    bv: train[i].bv,
                    positive: train[i].positive,
                })
                .collect();
            let (input, labels) = resample(&encoder, &rows)?;
            let net = encoder.network_mut();
            net.zero_grads();
            let pass = net.forward(&input)?;
            let (loss, dlogits) = softmax_cross_entropy(pass.output(), &labels)?;
            net.backward(&dlogits)?;
            adam.step(&mut net.params, cfg.lr, |_| true)?;
            epoch_loss += f64::from(loss);
            batches += 1;
        }
        log::info!(
            "encoder epoch {epoch}: mean loss {:.4}",
            epoch_loss / batches.max(1) as f64
        );
    }

    encoder.network_mut().set_train(false);
    let mut correct = 0usize;
    for chunk in val.chunks(cfg.batch.max(1)) {
        let rows: Vec<PatchDraw> = chunk
            .iter()
            .map(|d| PatchDraw { sample: d.sample, bv: d.bv, positive: d.positive })
            .collect();
        let (input, labels) = resample(&encoder, &rows)?;
        let probs = encoder.lesion_probabilities(&input)?;
        correct += probs
            .iter()
            .zip(&labels)
            .filter(|(p, &l)| (**p > 0.5) as usize == l)
            .count();
    }
    let accuracy = correct as f64 / val.len().max(1) as f64;
    log::info!("encoder held-out accuracy {accuracy:.3} over {} patches", val.len());
    Ok((encoder, accuracy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PatientId, PhantomConfig, Side};

    fn tiny_arch() -> ResNetEncoderConfig {
        ResNetEncoderConfig {
            input: [8, 8, 4],
            channels: [2, 2, 3, 3, 4],
            strides: [2, 1, 1, 1, 1],
            tail_channels: [4, 3],
            classes: 2,
        }
    }

    #[test]
    fn embedding_is_deterministic_and_finite() {
        let enc = PatchEncoder::init(tiny_arch(), 4, 1).unwrap();
        let cfg = PhantomConfig::easy();
        let s = generate_phantom(3, PatientId(0), Side::Left, &cfg);
        let bv = BoundingVolume::new([4, 4, 2], [20, 20, 10]).unwrap();
        let a = enc.embed(&s.volume, &bv).unwrap();
        let b = enc.embed(&s.volume, &bv).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a.len(), enc.embedding_dim());
    }

    #[test]
    fn zero_volume_embeds_to_the_zero_response() {
        let enc = PatchEncoder::init(tiny_arch(), 4, 2).unwrap();
        let zeros = Volume::zeros([16, 16, 8]);
        let bv = BoundingVolume::new([0, 0, 0], [16, 16, 8]).unwrap();
        let e = enc.embed(&zeros, &bv).unwrap();
        assert!(e.iter().all(|v| v.is_finite()));
        let patch = Volume::zeros(enc.config().input);
        let pass = enc.network().evaluate(&patch.to_input::<f32>()).unwrap();
        let direct = pass.tap(&enc.network().spec, "embedding").unwrap();
        assert_eq!(e, direct.values());
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let enc = PatchEncoder::init(tiny_arch(), 4, 3).unwrap();
        let cfg = PhantomConfig::easy();
        let s = generate_phantom(5, PatientId(0), Side::Left, &cfg);
        let bv = BoundingVolume { min: [0, 0, 0], max: [3, 8, 8] };
        assert!(matches!(
            enc.embed(&s.volume, &bv),
            Err(Error::DegenerateBoundingVolume(_))
        ));
    }

    #[test]
    fn positive_patches_really_overlap_lesions() {
        let cfg = PhantomConfig::easy();
        let samples: Vec<BreastSample> =
            (0..6).map(|i| generate_phantom(i, PatientId(i as u32), Side::Left, &cfg)).collect();
        let refs: Vec<&BreastSample> = samples.iter().collect();
        let tcfg = EncoderTrainConfig {
            positives: 12,
            negatives: 12,
            ..EncoderTrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws = draw_patches(&refs, &tcfg, &mut rng).unwrap();
        assert_eq!(draws.iter().filter(|d| d.positive).count(), 12);
        for d in &draws {
            assert_eq!(
                patch_is_positive(&d.bv, refs[d.sample], tcfg.positive_dice),
                d.positive
            );
        }
    }

    #[test]
    fn lesion_free_trainset_is_rejected() {
        let mut cfg = PhantomConfig::default_family();
        cfg.lesion_count_weights = [1.0, 0.0, 0.0];
        let samples: Vec<BreastSample> =
            (0..3).map(|i| generate_phantom(i, PatientId(i as u32), Side::Left, &cfg)).collect();
        let refs: Vec<&BreastSample> = samples.iter().collect();
        let err = train_patch_encoder(&refs, &tiny_arch(), &EncoderTrainConfig::default());
        assert!(err.is_err());
    }
}
