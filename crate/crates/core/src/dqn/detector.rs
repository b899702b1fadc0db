//! Detector training and multi-initialization inference on breast
//! volumes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{
    apply_action, dice_boxes, inference_inits, Action, BoundingVolume, DetectEnv, EnvConfig,
    PatchEncoder,
};
use crate::dqn::{trainer_rng, EpsilonSchedule, QEnvironment, QLearnConfig, QTrainer};
use crate::error::{Error, Result};
use crate::nn::presets::dqn_head;
use crate::nn::Network;
use crate::phantom::BreastSample;
use crate::volume::{Volume, VoxelMask};

/// A [`DetectEnv`] episode observed through the patch encoder.
pub struct EmbeddedEnv<'a> {
    pub env: DetectEnv<'a>,
    pub encoder: &'a PatchEncoder,
}

impl QEnvironment for EmbeddedEnv<'_> {
    fn actions(&self) -> usize {
        Action::ALL.len()
    }

    fn observe(&self) -> Result<Vec<f32>> {
        self.encoder.embed(self.env.volume(), &self.env.bv())
    }

    fn peek_rewards(&self) -> Vec<f64> {
        self.env.peek_rewards().to_vec()
    }

    fn step(&mut self, action: usize) -> Result<(f64, bool)> {
        let out = self.env.step(Action::from_index(action)?);
        Ok((out.reward, out.done))
    }

    fn is_done(&self) -> bool {
        self.env.is_done()
    }
}

/// A triggered search result: the final box and its trigger Q-value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bv: BoundingVolume,
    pub score: f32,
}

/// Detector training knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    /// Training breasts visited per epoch (0 = all, in a seeded shuffled
    /// order).
    pub episodes_per_epoch: usize,
    pub hidden: usize,
    pub learn: QLearnConfig,
    pub schedule: EpsilonSchedule,
    pub env: EnvConfig,
    /// Pairwise Dice at or above which inference detections merge.
    pub merge_dice: f64,
    /// Epochs between validation scans (always scored at the last epoch).
    pub val_every: usize,
    /// Cap on validation breasts per scan.
    pub val_max: usize,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            epochs: 12,
            episodes_per_epoch: 0,
            hidden: 64,
            learn: QLearnConfig::default(),
            // Anneal over the configured epoch count rather than the
            // schedule's own full-scale horizon.
            schedule: EpsilonSchedule { horizon: 12, ..EpsilonSchedule::default() },
            env: EnvConfig::default(),
            merge_dice: 0.5,
            val_every: 3,
            val_max: 16,
            seed: 0,
        }
    }
}

/// Per-epoch training log row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectorEpochLog {
    pub epoch: usize,
    pub epsilon: f64,
    pub mean_reward: f64,
    pub mean_loss: f64,
    pub trigger_rate: f64,
    pub replay: usize,
    pub val_score: Option<f64>,
}

/// Centered box covering 75% of every axis: the training initialization.
pub fn training_init(dims: [usize; 3], min_extent: i64) -> BoundingVolume {
    inference_inits(dims, min_extent)[0]
}

/// Greedy multi-initialization inference: 13 searches of up to
/// `env.max_steps` greedy steps each; searches that trigger contribute
/// their final box, near-duplicates (pairwise Dice ≥ `merge_dice`) are
/// merged keeping the highest trigger Q.
pub fn detect(
    volume: &Volume,
    encoder: &PatchEncoder,
    head: &Network<f32>,
    env: &EnvConfig,
    merge_dice: f64,
) -> Result<Vec<Detection>> {
    let trigger = Action::Trigger.index();
    let mut raw = Vec::new();
    for init in inference_inits(volume.dims, env.min_extent) {
        let mut bv = init;
        for _ in 0..env.max_steps {
            let obs = encoder.embed(volume, &bv)?;
            let input = crate::tensor::Array::from_vec(&[1, obs.len()], obs)?;
            let q = head.evaluate(&input)?;
            let q = q.output().values();
            let a = crate::dqn::argmax(q);
            if a == trigger {
                raw.push(Detection { bv, score: q[trigger] });
                break;
            }
            bv = apply_action(bv, Action::from_index(a)?, volume.dims, env.min_extent);
        }
    }
    // Highest trigger Q first; the index tie-break keeps merging
    // deterministic when scores are bit-equal.
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        raw[b].score.partial_cmp(&raw[a].score).expect("finite Q-values").then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.iter().all(|k| dice_boxes(&k.bv, &raw[i].bv) < merge_dice) {
            kept.push(raw[i]);
        }
    }
    Ok(kept)
}

/// Model-selection score on validation breasts: lesion recall at
/// Dice ≥ τ_w minus a small false-positive penalty.
fn validation_score(
    breasts: &[&BreastSample],
    encoder: &PatchEncoder,
    head: &Network<f32>,
    cfg: &DetectorTrainConfig,
) -> Result<f64> {
    let mut lesions = 0usize;
    let mut hits = 0usize;
    let mut false_pos = 0usize;
    for b in breasts {
        let dets = detect(&b.volume, encoder, head, &cfg.env, cfg.merge_dice)?;
        let masks: Vec<&VoxelMask> = b.lesions.iter().map(|l| &l.mask).collect();
        let pairs: Vec<Vec<f64>> = dets
            .iter()
            .map(|d| masks.iter().map(|m| crate::detect::dice_box_mask(&d.bv, m)).collect())
            .collect();
        let matches = crate::metrics::match_by_dice(&pairs, cfg.env.reward.tau_w);
        lesions += masks.len();
        hits += matches.len();
        false_pos += dets.len() - matches.len();
    }
    let recall = if lesions > 0 { hits as f64 / lesions as f64 } else { 1.0 };
    let fpp = false_pos as f64 / breasts.len().max(1) as f64;
    Ok(recall - 0.02 * fpp)
}

/// Trains the Q-network: one episode per visited training breast per
/// epoch from the centered 75% box, TD updates on uniform replay
/// batches, target sync at every epoch end, model selection by the
/// validation detection score. On divergence the best finite parameters
/// seen so far are returned.
pub fn train_detector(
    train: &[&BreastSample],
    val: &[&BreastSample],
    encoder: &PatchEncoder,
    cfg: &DetectorTrainConfig,
) -> Result<(Network<f32>, Vec<DetectorEpochLog>)> {
    if train.is_empty() {
        return Err(Error::Dataset("detector training needs at least one breast".into()));
    }
    let mut rng = trainer_rng(cfg.seed);
    let head = Network::<f32>::init(dqn_head(encoder.embedding_dim(), cfg.hidden, 9), &mut rng)?;
    let mut trainer = QTrainer::new(head, cfg.learn);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, crate::nn::ParameterSet<f32>)> = None;

    'epochs: for epoch in 0..cfg.epochs {
        let epsilon = cfg.schedule.epsilon(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        if cfg.episodes_per_epoch > 0 {
            order.truncate(cfg.episodes_per_epoch);
        }

        let mut reward_sum = 0.0;
        let mut loss_sum = 0.0;
        let mut triggers = 0usize;
        let mut episodes = 0usize;
        for &i in &order {
            let b = train[i];
            let masks: Vec<&VoxelMask> = b.lesions.iter().map(|l| &l.mask).collect();
            let init = training_init(b.volume.dims, cfg.env.min_extent);
            let mut env = EmbeddedEnv {
                env: DetectEnv::new(&b.volume, masks, init, cfg.env),
                encoder,
            };
            match trainer.run_episode(&mut env, epsilon, cfg.schedule.kappa, &mut rng) {
                Ok(stats) => {
                    reward_sum += stats.total_reward;
                    loss_sum += stats.mean_loss;
                    triggers += stats.triggered as usize;
                    episodes += 1;
                }
                Err(Error::NonFinite(what)) => {
                    log::warn!("detector training diverged ({what}); stopping at epoch {epoch}");
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        trainer.sync_target();

        let scan = !val.is_empty()
            && (epoch + 1 == cfg.epochs || (epoch + 1) % cfg.val_every.max(1) == 0);
        let val_score = if scan {
            let subset: Vec<&BreastSample> =
                val.iter().take(cfg.val_max.max(1)).copied().collect();
            let score = validation_score(&subset, encoder, &trainer.head, cfg)?;
            if best.as_ref().map_or(true, |(s, _)| score > *s) {
                best = Some((score, trainer.head.params.clone()));
            }
            Some(score)
        } else {
            None
        };

        let n = episodes.max(1) as f64;
        logs.push(DetectorEpochLog {
            epoch,
            epsilon,
            mean_reward: reward_sum / n,
            mean_loss: loss_sum / n,
            trigger_rate: triggers as f64 / n,
            replay: trainer.replay.len(),
            val_score,
        });
        log::info!(
            "detector epoch {epoch}: eps {epsilon:.2} reward {:.2} loss {:.4} triggers {:.2} val {:?}",
            reward_sum / n,
            loss_sum / n,
            triggers as f64 / n,
            val_score
        );
    }

    let mut head = trainer.head;
    if let Some((_, params)) = best {
        head.params.copy_values_from(&params)?;
        head.clear_pass();
    }
    head.set_train(false);
    Ok((head, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::presets::ResNetEncoderConfig;
    use crate::phantom::{generate_phantom, PatientId, PhantomConfig, Side};

    fn tiny_encoder() -> PatchEncoder {
        let arch = ResNetEncoderConfig {
            input: [8, 8, 4],
            channels: [2, 2, 2, 2, 2],
            strides: [2, 1, 1, 1, 1],
            tail_channels: [2, 2],
            classes: 2,
        };
        PatchEncoder::init(arch, 4, 7).unwrap()
    }

    #[test]
    fn constant_trigger_policy_yields_thirteen_raw_detections() {
        let encoder = tiny_encoder();
        let dim = encoder.embedding_dim();
        let mut rng = trainer_rng(0);
        let mut head = Network::<f32>::init(dqn_head(dim, 4, 9), &mut rng).unwrap();
        // Zero all parameters, then bias the trigger output: Q is the
        // trigger-favoring constant vector everywhere.
        for (_, a) in head.params.iter_mut() {
            for v in a.values_mut() {
                *v = 0.0;
            }
        }
        head.params.get_mut("out.bias").unwrap().values_mut()[Action::Trigger.index()] = 1.0;
        head.set_train(false);

        let s = generate_phantom(1, PatientId(0), Side::Left, &PhantomConfig::easy());
        // Merging disabled: every initialization triggers immediately.
        let dets = detect(&s.volume, &encoder, &head, &EnvConfig::default(), 1.1).unwrap();
        assert_eq!(dets.len(), 13);
        // With the default merge threshold the duplicates collapse.
        let merged = detect(&s.volume, &encoder, &head, &EnvConfig::default(), 0.5).unwrap();
        assert!(merged.len() < 13);
    }

    #[test]
    fn never_triggering_policy_detects_nothing() {
        let encoder = tiny_encoder();
        let dim = encoder.embedding_dim();
        let mut rng = trainer_rng(1);
        let mut head = Network::<f32>::init(dqn_head(dim, 4, 9), &mut rng).unwrap();
        for (_, a) in head.params.iter_mut() {
            for v in a.values_mut() {
                *v = 0.0;
            }
        }
        head.params.get_mut("out.bias").unwrap().values_mut()[0] = 1.0;
        head.set_train(false);
        let s = generate_phantom(2, PatientId(0), Side::Left, &PhantomConfig::easy());
        let dets = detect(&s.volume, &encoder, &head, &EnvConfig::default(), 0.5).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn greedy_inference_is_deterministic() {
        let encoder = tiny_encoder();
        let dim = encoder.embedding_dim();
        let mut rng = trainer_rng(2);
        let mut head = Network::<f32>::init(dqn_head(dim, 8, 9), &mut rng).unwrap();
        head.set_train(false);
        let s = generate_phantom(3, PatientId(0), Side::Left, &PhantomConfig::easy());
        let a = detect(&s.volume, &encoder, &head, &EnvConfig::default(), 0.5).unwrap();
        let b = detect(&s.volume, &encoder, &head, &EnvConfig::default(), 0.5).unwrap();
        assert_eq!(a, b);
        for d in &a {
            assert!(d.bv.voxel_count() > 0);
        }
    }
}
