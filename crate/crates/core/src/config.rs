//! Run configuration: one TOML file drives a whole experiment.
//!
//! The file nests every stage's knobs under its own section, so a run
//! directory carrying its `config.toml` is reproducible from that file
//! and the root seed alone. Stage seeds are never stored: they fan out
//! from the root seed through a counter-based split ([`stage_seed`]),
//! which lets any stage be rerun independently with the same stream.
//!
//! The `[full_scale]` section is documentation, not knobs: it records
//! the clinical-scale constants next to the desk-scale values the other
//! sections actually use, so the file shows both side by side.
//!
//! [`stage_seed`]: ExperimentConfig::stage_seed

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::EncoderTrainConfig;
use crate::dqn::DetectorTrainConfig;
use crate::error::{Error, Result};
use crate::meta::{FineTuneConfig, MetaHyper, MetaTrainConfig};
use crate::nn::presets::{DecoderConfig, DenseNetConfig, ResNetEncoderConfig};
use crate::phantom::{derive_seed, PhantomConfig};
use crate::prehoc::PrehocTrainConfig;
use crate::saliency::SaliencyTrainConfig;

/// Which pipeline(s) a run trains and evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    PreHoc,
    PostHoc,
    Both,
}

impl Pipeline {
    pub fn includes_prehoc(self) -> bool {
        matches!(self, Pipeline::PreHoc | Pipeline::Both)
    }

    pub fn includes_posthoc(self) -> bool {
        matches!(self, Pipeline::PostHoc | Pipeline::Both)
    }
}

/// Pipeline stages, in dependency order. Each owns one seed stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    GenData,
    TrainEncoder,
    TrainDetector,
    TrainClassifier,
    MetaTrain,
    FineTune,
    TrainSaliency,
    Infer,
    Evaluate,
}

impl Stage {
    /// Counter used by the seed split.
    pub fn index(self) -> u64 {
        match self {
            Stage::GenData => 0,
            Stage::TrainEncoder => 1,
            Stage::TrainDetector => 2,
            Stage::TrainClassifier => 3,
            Stage::MetaTrain => 4,
            Stage::FineTune => 5,
            Stage::TrainSaliency => 6,
            Stage::Infer => 7,
            Stage::Evaluate => 8,
        }
    }
}

/// Dataset section: how many patients and which phantom family.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub patients: u32,
    /// Phantom family: `default` (mixed difficulty) or `easy`.
    pub family: String,
    /// Train/validation/test fractions; must sum to 1.
    pub split: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { patients: 60, family: "default".into(), split: [0.6, 0.2, 0.2] }
    }
}

impl DataSection {
    /// Resolves the family name to a generator configuration.
    pub fn phantom(&self) -> Result<PhantomConfig> {
        match self.family.as_str() {
            "default" => Ok(PhantomConfig::default_family()),
            "easy" => Ok(PhantomConfig::easy()),
            other => Err(Error::Config(format!(
                "unknown phantom family `{other}` (expected `default` or `easy`)"
            ))),
        }
    }
}

/// Detection stage: patch encoder plus the Q-learning detector.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectSection {
    pub encoder: ResNetEncoderConfig,
    pub encoder_train: EncoderTrainConfig,
    pub detector: DetectorTrainConfig,
}

impl Default for DetectSection {
    fn default() -> Self {
        DetectSection {
            encoder: desk_patch_encoder(),
            encoder_train: EncoderTrainConfig { positives: 400, negatives: 400, ..Default::default() },
            detector: DetectorTrainConfig::default(),
        }
    }
}

/// Detection classifier of the pre-hoc pipeline.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PrehocSection {
    pub arch: DenseNetConfig,
    pub train: PrehocTrainConfig,
}

impl Default for PrehocSection {
    fn default() -> Self {
        PrehocSection { arch: desk_patch_classifier(), train: PrehocTrainConfig::default() }
    }
}

/// Diagnosis network of the post-hoc pipeline: meta-training then
/// fine-tuning on the screening task.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PosthocSection {
    pub arch: DenseNetConfig,
    pub meta: MetaTrainConfig,
    pub fine_tune: FineTuneConfig,
}

impl Default for PosthocSection {
    fn default() -> Self {
        PosthocSection {
            arch: desk_scan_classifier(),
            // The outer budget is compressed against the full-scale run
            // (fewer, larger meta-steps with the same total movement).
            meta: MetaTrainConfig {
                meta_iterations: 150,
                task_batch: 2,
                hyper: MetaHyper { beta: 0.02, ..Default::default() },
                ..Default::default()
            },
            // Gentle rate: aggressive fine-tuning erases the initialization
            // before the best-epoch selection can bank it.
            fine_tune: FineTuneConfig { lr: 0.003, ..Default::default() },
        }
    }
}

/// Saliency localization stage of the post-hoc pipeline.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SaliencySection {
    pub decoder: DecoderConfig,
    pub train: SaliencyTrainConfig,
    /// Mask binarization threshold.
    pub zeta: f64,
    /// Smallest surviving connected component, voxels.
    pub min_voxels: usize,
}

impl Default for SaliencySection {
    fn default() -> Self {
        SaliencySection {
            decoder: DecoderConfig { channels: vec![8, 6, 4] },
            train: SaliencyTrainConfig::default(),
            zeta: 0.8,
            min_voxels: 8,
        }
    }
}

/// Evaluation protocol knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Dice at or above which a detection counts as a true positive.
    pub dice_min: f64,
    /// Largest false-positives-per-patient value kept on FROC plots.
    pub fpp_max: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { dice_min: 0.2, fpp_max: 8.0 }
    }
}

/// Clinical-scale constants, recorded for reference next to the
/// desk-scale values in the stage sections. Nothing reads these.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FullScaleConstants {
    pub gamma: f64,
    pub eta: f64,
    pub tau_w: f64,
    pub replay_capacity: usize,
    pub replay_batch: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_epochs: usize,
    pub kappa: f64,
    pub inference_inits: usize,
    pub max_steps: usize,
    pub patch: [usize; 3],
    pub embedding_dim: usize,
    pub detector_lr: f64,
    pub classifier_lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub inner_steps: usize,
    pub meta_iterations: usize,
    pub task_batch: usize,
    pub n_tr: usize,
    pub n_val: usize,
    pub reward_buffer: usize,
    pub zeta: f64,
    pub lambda: [f64; 4],
}

impl Default for FullScaleConstants {
    fn default() -> Self {
        FullScaleConstants {
            gamma: 0.9,
            eta: 10.0,
            tau_w: 0.2,
            replay_capacity: 10_000,
            replay_batch: 100,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_epochs: 300,
            kappa: 0.5,
            inference_inits: 13,
            max_steps: 20,
            patch: [24, 24, 12],
            embedding_dim: 2304,
            detector_lr: 1e-6,
            classifier_lr: 0.01,
            alpha: 0.01,
            beta: 0.001,
            inner_steps: 5,
            meta_iterations: 3000,
            task_batch: 5,
            n_tr: 4,
            n_val: 4,
            reward_buffer: 40,
            zeta: 0.8,
            lambda: [0.1, 3.0, 1.0, 2.5],
        }
    }
}

/// The whole run: root seed, pipeline selector, width multiplier and
/// one section per stage. Every field has a default, so a partial TOML
/// (or none at all) is a valid run description.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub pipeline: Pipeline,
    /// Multiplies every channel width; applied once by [`Self::load`].
    pub scale: f64,
    pub data: DataSection,
    pub detect: DetectSection,
    pub prehoc: PrehocSection,
    pub posthoc: PosthocSection,
    pub saliency: SaliencySection,
    pub eval: EvalSection,
    pub full_scale: FullScaleConstants,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 17,
            pipeline: Pipeline::Both,
            scale: 1.0,
            data: DataSection::default(),
            detect: DetectSection::default(),
            prehoc: PrehocSection::default(),
            posthoc: PosthocSection::default(),
            saliency: SaliencySection::default(),
            eval: EvalSection::default(),
            full_scale: FullScaleConstants::default(),
        }
    }
}

/// Patch encoder sized for the desk phantoms: half the clinical patch
/// extents, an order of magnitude fewer channels.
pub fn desk_patch_encoder() -> ResNetEncoderConfig {
    ResNetEncoderConfig {
        input: [12, 12, 6],
        channels: [4, 6, 6, 8, 8],
        strides: [2, 1, 1, 1, 1],
        tail_channels: [8, 6],
        classes: 2,
    }
}

/// Patch-level lesion classifier of the pre-hoc pipeline.
pub fn desk_patch_classifier() -> DenseNetConfig {
    DenseNetConfig {
        input: [12, 12, 6],
        stem_channels: 4,
        stem_stride: 1,
        growth: 3,
        blocks: 3,
        layers_per_block: 2,
        compression: 0.5,
        transition_strides: vec![2, 2],
        classes: 2,
    }
}

/// Whole-volume diagnosis network of the post-hoc pipeline. Reduces
/// every axis by 8 overall so the three-block saliency decoder returns
/// exactly to the volume extents.
pub fn desk_scan_classifier() -> DenseNetConfig {
    DenseNetConfig {
        input: [32, 32, 16],
        stem_channels: 4,
        stem_stride: 2,
        growth: 3,
        blocks: 3,
        layers_per_block: 2,
        compression: 0.5,
        transition_strides: vec![2, 2],
        classes: 2,
    }
}

fn scaled(c: usize, scale: f64) -> usize {
    ((c as f64 * scale).round() as usize).max(1)
}

impl ExperimentConfig {
    /// Parses, scales and validates a TOML run description.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_scale();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes the configuration (defaults included) to TOML.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize: {e}")))?;
        fs::write(path, text)?;
        Ok(())
    }

    /// Multiplies every channel width by `scale` and resets the knob to
    /// 1 so the operation is idempotent.
    pub fn apply_scale(&mut self) {
        let s = self.scale;
        if s == 1.0 {
            return;
        }
        for c in &mut self.detect.encoder.channels {
            *c = scaled(*c, s);
        }
        for c in &mut self.detect.encoder.tail_channels {
            *c = scaled(*c, s);
        }
        self.detect.detector.hidden = scaled(self.detect.detector.hidden, s);
        for arch in [&mut self.prehoc.arch, &mut self.posthoc.arch] {
            arch.stem_channels = scaled(arch.stem_channels, s);
            arch.growth = scaled(arch.growth, s);
        }
        for c in &mut self.saliency.decoder.channels {
            *c = scaled(*c, s);
        }
        self.scale = 1.0;
    }

    /// Deterministic per-stage seed derived from the root seed.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.seed, &[0x57a6e, stage.index()])
    }

    /// Cross-section consistency checks, so misconfigurations surface
    /// here instead of deep inside a stage.
    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        let sum: f64 = self.data.split.iter().sum();
        if self.data.split.iter().any(|&r| r <= 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to 1, got {:?}",
                self.data.split
            )));
        }
        let extents = self.data.phantom()?.extents;
        if self.posthoc.arch.input != extents {
            return Err(Error::Config(format!(
                "diagnosis network input {:?} must match the volume extents {:?}",
                self.posthoc.arch.input, extents
            )));
        }
        if self.prehoc.arch.input != self.detect.encoder.input {
            return Err(Error::Config(format!(
                "detection classifier input {:?} must match the encoder patch {:?}",
                self.prehoc.arch.input, self.detect.encoder.input
            )));
        }
        let blocks = self.posthoc.arch.blocks;
        if self.saliency.decoder.channels.len() != blocks {
            return Err(Error::Config(format!(
                "decoder has {} blocks but the trunk has {blocks}",
                self.saliency.decoder.channels.len()
            )));
        }
        if self.posthoc.arch.transition_strides.len() + 1 != blocks {
            return Err(Error::Config(format!(
                "trunk needs {} transition strides for {blocks} blocks, got {}",
                blocks - 1,
                self.posthoc.arch.transition_strides.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.saliency.zeta) {
            return Err(Error::Config(format!(
                "zeta must lie in [0, 1], got {}",
                self.saliency.zeta
            )));
        }
        if !(0.0..1.0).contains(&self.eval.dice_min) {
            return Err(Error::Config(format!(
                "dice_min must lie in [0, 1), got {}",
                self.eval.dice_min
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn defaults_round_trip_through_toml() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("config.toml");
        let cfg = ExperimentConfig::default();
        cfg.save(&path).unwrap();
        let loaded = ExperimentConfig::load(&path).unwrap();
        assert_eq!(loaded.seed, cfg.seed);
        assert_eq!(loaded.pipeline, cfg.pipeline);
        assert_eq!(loaded.data.patients, cfg.data.patients);
        assert_eq!(loaded.detect.encoder.channels, cfg.detect.encoder.channels);
        assert_eq!(loaded.posthoc.meta.meta_iterations, cfg.posthoc.meta.meta_iterations);
        assert_eq!(loaded.saliency.zeta, cfg.saliency.zeta);
        assert_eq!(loaded.full_scale.replay_capacity, 10_000);
    }

    #[test]
    fn a_partial_file_fills_in_defaults() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("config.toml");
        fs::write(&path, "seed = 5\npipeline = \"pre-hoc\"\n\n[data]\npatients = 8\n").unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.pipeline, Pipeline::PreHoc);
        assert_eq!(cfg.data.patients, 8);
        assert_eq!(cfg.data.split, [0.6, 0.2, 0.2]);
        assert_eq!(cfg.eval.dice_min, 0.2);
    }

    #[test]
    fn stage_seeds_are_distinct_and_reproducible() {
        let cfg = ExperimentConfig::default();
        let stages = [
            Stage::GenData,
            Stage::TrainEncoder,
            Stage::TrainDetector,
            Stage::TrainClassifier,
            Stage::MetaTrain,
            Stage::FineTune,
            Stage::TrainSaliency,
            Stage::Infer,
            Stage::Evaluate,
        ];
        let seeds: Vec<u64> = stages.iter().map(|&s| cfg.stage_seed(s)).collect();
        for (i, a) in seeds.iter().enumerate() {
            assert_eq!(*a, cfg.stage_seed(stages[i]));
            for b in &seeds[i + 1..] {
                assert_ne!(a, b);
            }
        }
        let other = ExperimentConfig { seed: 18, ..Default::default() };
        assert_ne!(cfg.stage_seed(Stage::GenData), other.stage_seed(Stage::GenData));
    }

    #[test]
    fn scaling_widens_channels_once() {
        let mut cfg = ExperimentConfig { scale: 2.0, ..Default::default() };
        let base = cfg.detect.encoder.channels;
        cfg.apply_scale();
        for (orig, wide) in base.iter().zip(&cfg.detect.encoder.channels) {
            assert_eq!(*wide, orig * 2);
        }
        assert_eq!(cfg.scale, 1.0);
        let widened = cfg.clone();
        cfg.apply_scale();
        assert_eq!(cfg.detect.encoder.channels, widened.detect.encoder.channels);
    }

    #[test]
    fn validation_rejects_mismatched_shapes() {
        let mut cfg = ExperimentConfig::default();
        cfg.posthoc.arch.input = [16, 16, 16];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = ExperimentConfig::default();
        cfg.saliency.decoder.channels = vec![4, 4];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = ExperimentConfig::default();
        cfg.data.split = [0.5, 0.5, 0.5];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = ExperimentConfig::default();
        cfg.data.family = "nonexistent".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
