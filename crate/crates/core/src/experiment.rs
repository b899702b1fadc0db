//! Run-directory orchestration: every subcommand reads and writes its
//! declared artifacts under one directory, so a run is reproducible
//! from its stored `config.toml` and root seed alone.
//!
//! ```text
//! run/
//!   config.toml        the configuration that produced everything below
//!   data/              manifest.csv, volumes.bin, masks.bin
//!   encoder.ck         patch encoder weights
//!   detector.ck        Q-network head weights
//!   prehoc.ck          detection classifier weights
//!   meta.ck            meta-learned initialization
//!   screen.ck          fine-tuned diagnosis network
//!   saliency.ck        mask decoder (with its frozen trunk)
//!   tau.json           equal-error-rate gate of the saliency stage
//!   logs/              per-stage training traces (CSV)
//!   infer/             test-set scores, detections and saliency masks
//!   eval/              ROC and FROC curves (CSV + SVG), summary.json
//!   compare/           pipeline AUC table and combined curves
//! ```
//!
//! A stage that cannot find an upstream artifact reports which
//! subcommand produces it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Stage};
use crate::detect::{BoundingVolume, PatchEncoder};
use crate::dqn::{self, DetectorEpochLog};
use crate::error::{Error, Result};
use crate::meta::{self, FineTuneReport};
use crate::metrics::{
    eer_threshold, froc, froc_thresholds, patient_score, roc_auc, roc_points, tpr_at_fpp,
    write_curve_csv, write_curve_svg, FrocPatient, FrocPoint, RocPoint, ScoredCase,
};
use crate::nn::presets::densenet_classifier;
use crate::nn::{load_checkpoint, save_checkpoint, Network};
use crate::phantom::{
    self, derive_seed, BreastSample, PatientId, ScanLabel, SplitKind,
};
use crate::prehoc::{breast_score, train_prehoc_classifier, DetectedBreast, PrehocClassifier};
use crate::saliency::{self, mask_components, SaliencyModel};
use crate::volume::{Volume, VoxelMask};

/// Paths of one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn encoder_checkpoint(&self) -> PathBuf {
        self.root.join("encoder.ck")
    }

    pub fn detector_checkpoint(&self) -> PathBuf {
        self.root.join("detector.ck")
    }

    pub fn prehoc_checkpoint(&self) -> PathBuf {
        self.root.join("prehoc.ck")
    }

    pub fn meta_checkpoint(&self) -> PathBuf {
        self.root.join("meta.ck")
    }

    pub fn screen_checkpoint(&self) -> PathBuf {
        self.root.join("screen.ck")
    }

    pub fn saliency_checkpoint(&self) -> PathBuf {
        self.root.join("saliency.ck")
    }

    pub fn tau_path(&self) -> PathBuf {
        self.root.join("tau.json")
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn infer_dir(&self) -> PathBuf {
        self.root.join("infer")
    }

    pub fn masks_dir(&self) -> PathBuf {
        self.infer_dir().join("masks")
    }

    pub fn mask_path(&self, patient: PatientId, side: phantom::Side) -> PathBuf {
        self.masks_dir().join(format!("{}_{}.bin", patient.0, side.as_str()))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn summary_path(&self) -> PathBuf {
        self.eval_dir().join("summary.json")
    }

    pub fn compare_dir(&self) -> PathBuf {
        self.root.join("compare")
    }
}

fn require(path: PathBuf, producer: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { path: path.display().to_string(), producer: producer.into() })
    }
}

fn io_other(e: impl std::error::Error + Send + Sync + 'static) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn load_network(path: PathBuf, producer: &str) -> Result<Network<f32>> {
    let path = require(path, producer)?;
    let (spec, params) = load_checkpoint::<f32>(&path)?;
    let mut net = Network::from_parts(spec, params);
    net.set_train(false);
    Ok(net)
}

fn load_encoder(run: &RunDir, cfg: &ExperimentConfig) -> Result<PatchEncoder> {
    let path = require(run.encoder_checkpoint(), "volscreen train-encoder")?;
    let (_, params) = load_checkpoint::<f32>(&path)?;
    Ok(PatchEncoder::new(
        cfg.detect.encoder.clone(),
        params,
        cfg.detect.encoder_train.min_extent,
    ))
}

fn write_log_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io_other)?;
    for row in rows {
        w.serialize(row).map_err(io_other)?;
    }
    w.flush()?;
    Ok(())
}

/// Creates the run directory and stores the configuration, leaving an
/// already-stored configuration untouched.
pub fn init_run(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(run.root())?;
    fs::create_dir_all(run.logs_dir())?;
    let path = run.config_path();
    if !path.exists() {
        cfg.save(&path)?;
    }
    Ok(())
}

/// Generates the phantom dataset and its patient-level split.
pub fn gen_data(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    init_run(run, cfg)?;
    let family = cfg.data.phantom()?;
    let seed = cfg.stage_seed(Stage::GenData);
    let samples = phantom::generate_dataset(seed, cfg.data.patients, &family);
    let patients: Vec<PatientId> = (0..cfg.data.patients).map(PatientId).collect();
    let split = phantom::make_split(&patients, cfg.data.split, derive_seed(seed, &[1]))?;
    phantom::write_dataset(&run.data_dir(), &samples, &split)?;

    let mut hist = [0usize; 3];
    for s in &samples {
        hist[s.label.as_u8() as usize] += 1;
    }
    log::info!(
        "generated {} breasts over {} patients (labels 0/1/2: {}/{}/{}; split {}/{}/{})",
        samples.len(),
        cfg.data.patients,
        hist[0],
        hist[1],
        hist[2],
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    Ok(())
}

/// Trains the patch encoder on the training split; returns the holdout
/// accuracy.
pub fn train_encoder(run: &RunDir, cfg: &ExperimentConfig) -> Result<f64> {
    init_run(run, cfg)?;
    let ds = phantom::read_dataset(&run.data_dir())?;
    let train = ds.of_split(SplitKind::Train);
    let mut tc = cfg.detect.encoder_train.clone();
    tc.seed = cfg.stage_seed(Stage::TrainEncoder);
    let (encoder, holdout) = crate::detect::train_patch_encoder(&train, &cfg.detect.encoder, &tc)?;
    let net = encoder.network();
    save_checkpoint(&run.encoder_checkpoint(), &net.spec, &net.params)?;
    log::info!("patch encoder holdout accuracy {holdout:.3}");
    Ok(holdout)
}

/// Trains the Q-network detector against the frozen encoder.
pub fn train_detector(run: &RunDir, cfg: &ExperimentConfig) -> Result<Vec<DetectorEpochLog>> {
    init_run(run, cfg)?;
    let ds = phantom::read_dataset(&run.data_dir())?;
    let train = ds.of_split(SplitKind::Train);
    let val = ds.of_split(SplitKind::Validation);
    let encoder = load_encoder(run, cfg)?;
    let mut tc = cfg.detect.detector.clone();
    tc.seed = cfg.stage_seed(Stage::TrainDetector);
    let (head, rows) = dqn::train_detector(&train, &val, &encoder, &tc)?;
    save_checkpoint(&run.detector_checkpoint(), &head.spec, &head.params)?;
    write_log_csv(&run.logs_dir().join("detector.csv"), &rows)?;
    Ok(rows)
}

fn detect_split<'a>(
    samples: Vec<&'a BreastSample>,
    encoder: &PatchEncoder,
    head: &Network<f32>,
    cfg: &ExperimentConfig,
) -> Result<Vec<DetectedBreast<'a>>> {
    samples
        .into_iter()
        .map(|sample| {
            let detections = dqn::detect(
                &sample.volume,
                encoder,
                head,
                &cfg.detect.detector.env,
                cfg.detect.detector.merge_dice,
            )?;
            Ok(DetectedBreast { sample, detections })
        })
        .collect()
}

/// Trains the detection classifier on the detector's training-split
/// output; returns the best validation breast-wise AUC when computable.
pub fn train_classifier(run: &RunDir, cfg: &ExperimentConfig) -> Result<Option<f64>> {
    init_run(run, cfg)?;
    let ds = phantom::read_dataset(&run.data_dir())?;
    let encoder = load_encoder(run, cfg)?;
    let head = load_network(run.detector_checkpoint(), "volscreen train-detector")?;
    let train = detect_split(ds.of_split(SplitKind::Train), &encoder, &head, cfg)?;
    let val = detect_split(ds.of_split(SplitKind::Validation), &encoder, &head, cfg)?;
    let mut tc = cfg.prehoc.train.clone();
    tc.seed = cfg.stage_seed(Stage::TrainClassifier);
    let (classifier, val_auc) = train_prehoc_classifier(&train, &val, &cfg.prehoc.arch, &tc)?;
    let net = classifier.network();
    save_checkpoint(&run.prehoc_checkpoint(), &net.spec, &net.params)?;
    if let Some(auc) = val_auc {
        log::info!("detection classifier validation AUC {auc:.3}");
    }
    Ok(val_auc)
}

/// Meta-trains the diagnosis initialization over the screening tasks.
pub fn meta_train(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    init_run(run, cfg)?;
    let ds = phantom::read_dataset(&run.data_dir())?;
    let train: Vec<BreastSample> = ds.of_split(SplitKind::Train).into_iter().cloned().collect();
    let seed = cfg.stage_seed(Stage::MetaTrain);
    let spec = densenet_classifier(&cfg.posthoc.arch);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
    let mut net = Network::<f32>::init(spec, &mut rng)?;
    let mut tc = cfg.posthoc.meta.clone();
    tc.seed = seed;
    let rows = meta::meta_train(&mut net, &train, &tc)?;
    let refs: Vec<&BreastSample> = train.iter().collect();
    meta::recalibrate_buffers(&mut net, &refs, 8, 5, derive_seed(seed, &[1]))?;
    save_checkpoint(&run.meta_checkpoint(), &net.spec, &net.params)?;
    write_log_csv(&run.logs_dir().join("meta.csv"), &rows)?;
    Ok(())
}

#[derive(Serialize)]
struct FineTuneRow {
    epoch: usize,
    val_auc: f64,
}

/// Fine-tunes the meta initialization on the screening labels; keeps
/// the best validation epoch.
pub fn fine_tune(run: &RunDir, cfg: &ExperimentConfig) -> Result<FineTuneReport> {
    init_run(run, cfg)?;
    let ds = phantom::read_dataset(&run.data_dir())?;
    let train = ds.of_split(SplitKind::Train);
    let val = ds.of_split(SplitKind::Validation);
    let mut net = load_network(run.meta_checkpoint(), "volscreen meta-train")?;
    let mut tc = cfg.posthoc.fine_tune.clone();
    tc.seed = cfg.stage_seed(Stage::FineTune);
    let report = meta::fine_tune(&mut net, &train, &val, &tc)?;
    save_checkpoint(&run.screen_checkpoint(), &net.spec, &net.params)?;
    let rows: Vec<FineTuneRow> = report
        .epoch_val_auc
        .iter()
        .enumerate()
        .map(|(epoch, &val_auc)| FineTuneRow { epoch, val_auc })
        .collect();
    write_log_csv(&run.logs_dir().join("fine_tune.csv"), &rows)?;
    log::info!(
        "fine-tuning kept epoch {} at validation AUC {:.3}",
        report.best_epoch,
        report.best_val_auc
    );
    Ok(report)
}

/// The saliency gate: the diagnosis threshold at the equal error rate
/// of the validation split, stored as `tau.json`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TauFile {
    pub tau: f64,
    pub eer: f64,
}

fn breast_id(s: &BreastSample) -> String {
    format!("{}-{}", s.patient.0, s.side.as_str())
}

/// Trains the mask decoder against the frozen diagnosis network and
/// calibrates the gate; returns `(tau, eer)`.
pub fn train_saliency(run: &RunDir, cfg: &ExperimentConfig) -> Result<(f64, f64)> {
    init_run(run, cfg)?;
    let ds = phantom::read_dataset(&run.data_dir())?;
    let mut classifier = load_network(run.screen_checkpoint(), "volscreen fine-tune")?;
    let seed = cfg.stage_seed(Stage::TrainSaliency);
    let mut model = SaliencyModel::init(
        cfg.posthoc.arch.clone(),
        cfg.saliency.decoder.clone(),
        &classifier,
        derive_seed(seed, &[0]),
    )?;
    let train = ds.of_split(SplitKind::Train);
    let data: Vec<(&Volume, usize)> =
        train.iter().map(|s| (&s.volume, meta::screening_label(s.label))).collect();
    let mut tc = cfg.saliency.train.clone();
    tc.seed = seed;
    let rows = saliency::train_saliency(&mut model, &mut classifier, &data, &tc)?;
    let net = model.network();
    save_checkpoint(&run.saliency_checkpoint(), &net.spec, &net.params)?;
    write_log_csv(&run.logs_dir().join("saliency.csv"), &rows)?;

    let val = ds.of_split(SplitKind::Validation);
    let cases: Vec<ScoredCase> = val
        .iter()
        .map(|s| {
            let score = meta::diagnose(&classifier, &s.volume)?;
            Ok(ScoredCase::new(breast_id(s), score, s.label == ScanLabel::Malignant))
        })
        .collect::<Result<_>>()?;
    let (tau, eer) = eer_threshold(&cases)?;
    let file = TauFile { tau, eer };
    fs::write(run.tau_path(), serde_json::to_string_pretty(&file).map_err(io_other)?)?;
    log::info!("saliency gate tau {tau:.4} (EER {eer:.3})");
    Ok((tau, eer))
}

fn read_tau(run: &RunDir) -> Result<f64> {
    let path = require(run.tau_path(), "volscreen train-saliency")?;
    let text = fs::read_to_string(path)?;
    let file: TauFile = serde_json::from_str(&text).map_err(io_other)?;
    Ok(file.tau)
}

/// One breast-level score row of `infer/*_scores.csv`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreRow {
    pub patient: u32,
    pub side: String,
    pub label: u8,
    pub score: f64,
}

/// One pre-hoc detection row: box corners, trigger confidence and the
/// classifier's malignancy probability.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionRow {
    pub patient: u32,
    pub side: String,
    pub x0: i64,
    pub y0: i64,
    pub z0: i64,
    pub x1: i64,
    pub y1: i64,
    pub z1: i64,
    pub score: f64,
    pub malignancy: f64,
}

/// One post-hoc detection row: component bounding box, mean saliency
/// and component size.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SaliencyRow {
    pub patient: u32,
    pub side: String,
    pub x0: i64,
    pub y0: i64,
    pub z0: i64,
    pub x1: i64,
    pub y1: i64,
    pub z1: i64,
    pub score: f64,
    pub voxels: usize,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: PathBuf, producer: &str) -> Result<Vec<T>> {
    let path = require(path, producer)?;
    let mut r = csv::Reader::from_path(&path).map_err(io_other)?;
    r.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(io_other)
}

fn infer_prehoc(run: &RunDir, cfg: &ExperimentConfig, test: &[&BreastSample]) -> Result<()> {
    let encoder = load_encoder(run, cfg)?;
    let head = load_network(run.detector_checkpoint(), "volscreen train-detector")?;
    let path = require(run.prehoc_checkpoint(), "volscreen train-classifier")?;
    let (_, params) = load_checkpoint::<f32>(&path)?;
    let classifier = PrehocClassifier::new(cfg.prehoc.arch.clone(), params);

    let mut detections = csv::Writer::from_path(run.infer_dir().join("prehoc_detections.csv"))
        .map_err(io_other)?;
    let mut scores =
        csv::Writer::from_path(run.infer_dir().join("prehoc_scores.csv")).map_err(io_other)?;
    for s in test {
        let found = dqn::detect(
            &s.volume,
            &encoder,
            &head,
            &cfg.detect.detector.env,
            cfg.detect.detector.merge_dice,
        )?;
        let classified = classifier.classify_detections(&s.volume, &found)?;
        for (d, c) in found.iter().zip(&classified) {
            detections
                .serialize(DetectionRow {
                    patient: s.patient.0,
                    side: s.side.as_str().into(),
                    x0: d.bv.min[0],
                    y0: d.bv.min[1],
                    z0: d.bv.min[2],
                    x1: d.bv.max[0],
                    y1: d.bv.max[1],
                    z1: d.bv.max[2],
                    score: f64::from(d.score),
                    malignancy: c.probability,
                })
                .map_err(io_other)?;
        }
        let probs: Vec<f64> = classified.iter().map(|c| c.probability).collect();
        scores
            .serialize(ScoreRow {
                patient: s.patient.0,
                side: s.side.as_str().into(),
                label: s.label.as_u8(),
                score: breast_score(&probs),
            })
            .map_err(io_other)?;
    }
    detections.flush()?;
    scores.flush()?;
    Ok(())
}

fn infer_posthoc(run: &RunDir, cfg: &ExperimentConfig, test: &[&BreastSample]) -> Result<()> {
    let classifier = load_network(run.screen_checkpoint(), "volscreen fine-tune")?;
    let decoder = load_network(run.saliency_checkpoint(), "volscreen train-saliency")?;
    let model =
        SaliencyModel::from_parts(cfg.posthoc.arch.clone(), cfg.saliency.decoder.clone(), decoder);
    let tau = read_tau(run)?;
    fs::create_dir_all(run.masks_dir())?;

    let mut detections = csv::Writer::from_path(run.infer_dir().join("posthoc_detections.csv"))
        .map_err(io_other)?;
    let mut scores =
        csv::Writer::from_path(run.infer_dir().join("posthoc_scores.csv")).map_err(io_other)?;
    for s in test {
        let score = meta::diagnose(&classifier, &s.volume)?;
        scores
            .serialize(ScoreRow {
                patient: s.patient.0,
                side: s.side.as_str().into(),
                label: s.label.as_u8(),
                score,
            })
            .map_err(io_other)?;
        let mask = model.mask_volume(&s.volume)?;
        saliency::write_mask_file(&run.mask_path(s.patient, s.side), &mask)?;
        for d in saliency::localize_mask(&mask, score, tau, cfg.saliency.zeta, cfg.saliency.min_voxels)
        {
            detections
                .serialize(SaliencyRow {
                    patient: s.patient.0,
                    side: s.side.as_str().into(),
                    x0: d.bv.min[0],
                    y0: d.bv.min[1],
                    z0: d.bv.min[2],
                    x1: d.bv.max[0],
                    y1: d.bv.max[1],
                    z1: d.bv.max[2],
                    score: d.score,
                    voxels: d.voxels,
                })
                .map_err(io_other)?;
        }
    }
    detections.flush()?;
    scores.flush()?;
    Ok(())
}

/// Runs the selected pipelines over the test split, writing score and
/// detection tables (and saliency masks) under `infer/`.
pub fn infer(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    init_run(run, cfg)?;
    let ds = phantom::read_dataset(&run.data_dir())?;
    let test = ds.of_split(SplitKind::Test);
    fs::create_dir_all(run.infer_dir())?;
    if cfg.pipeline.includes_prehoc() {
        infer_prehoc(run, cfg, &test)?;
    }
    if cfg.pipeline.includes_posthoc() {
        infer_posthoc(run, cfg, &test)?;
    }
    Ok(())
}

/// Evaluation results of one pipeline.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub breast_auc: f64,
    pub patient_auc: f64,
    /// Best lesion TPR within the false-positives-per-patient budget.
    pub tpr_at_budget: f64,
}

/// `eval/summary.json`: the metrics of whichever pipelines ran.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub fpp_budget: f64,
    pub prehoc: Option<PipelineSummary>,
    pub posthoc: Option<PipelineSummary>,
}

fn roc_rows(points: &[RocPoint]) -> Vec<Vec<f64>> {
    points.iter().map(|p| vec![p.threshold, p.fpr, p.tpr]).collect()
}

fn froc_rows(points: &[FrocPoint]) -> Vec<Vec<f64>> {
    points.iter().map(|p| vec![p.threshold, p.fpp, p.tpr]).collect()
}

fn roc_series(points: &[RocPoint]) -> Vec<(f64, f64)> {
    points.iter().map(|p| (p.fpr, p.tpr)).collect()
}

fn froc_series(points: &[FrocPoint], fpp_max: f64) -> Vec<(f64, f64)> {
    points.iter().filter(|p| p.fpp <= fpp_max).map(|p| (p.fpp, p.tpr)).collect()
}

/// Breast- and patient-wise ROC from score rows; writes both curves.
fn score_rocs(run: &RunDir, rows: &[ScoreRow], prefix: &str) -> Result<(f64, f64)> {
    let breast: Vec<ScoredCase> = rows
        .iter()
        .map(|r| {
            ScoredCase::new(format!("{}-{}", r.patient, r.side), r.score, r.label == 2)
        })
        .collect();
    let breast_auc = roc_auc(&breast)?;
    let points = roc_points(&breast)?;
    write_curve_csv(
        &run.eval_dir().join(format!("{prefix}_roc_breast.csv")),
        &["threshold", "fpr", "tpr"],
        &roc_rows(&points),
    )?;
    write_curve_svg(
        &run.eval_dir().join(format!("{prefix}_roc_breast.svg")),
        &format!("{prefix} breast-wise ROC"),
        "FPR",
        "TPR",
        &[("ROC", roc_series(&points))],
    )?;

    let mut by_patient: BTreeMap<u32, (Vec<f64>, bool)> = BTreeMap::new();
    for r in rows {
        let e = by_patient.entry(r.patient).or_default();
        e.0.push(r.score);
        e.1 |= r.label == 2;
    }
    let patient: Vec<ScoredCase> = by_patient
        .iter()
        .map(|(id, (scores, label))| {
            Ok(ScoredCase::new(format!("{id}"), patient_score(scores)?, *label))
        })
        .collect::<Result<_>>()?;
    let patient_auc = roc_auc(&patient)?;
    let points = roc_points(&patient)?;
    write_curve_csv(
        &run.eval_dir().join(format!("{prefix}_roc_patient.csv")),
        &["threshold", "fpr", "tpr"],
        &roc_rows(&points),
    )?;
    write_curve_svg(
        &run.eval_dir().join(format!("{prefix}_roc_patient.svg")),
        &format!("{prefix} patient-wise ROC"),
        "FPR",
        "TPR",
        &[("ROC", roc_series(&points))],
    )?;
    Ok((breast_auc, patient_auc))
}

/// Malignant lesion masks of each test breast, keyed by patient and
/// side, in a stable order.
type TargetMap<'a> = BTreeMap<u32, Vec<(&'a str, &'a VoxelMask)>>;

fn malignant_targets<'a>(test: &[&'a BreastSample]) -> TargetMap<'a> {
    let mut targets: TargetMap<'a> = BTreeMap::new();
    for s in test {
        let entry = targets.entry(s.patient.0).or_default();
        for l in &s.lesions {
            if l.spec.class == phantom::LesionClass::Malignant {
                entry.push((s.side.as_str(), &l.mask));
            }
        }
        targets.entry(s.patient.0).or_default();
    }
    targets
}

fn evaluate_prehoc(
    run: &RunDir,
    cfg: &ExperimentConfig,
    test: &[&BreastSample],
) -> Result<PipelineSummary> {
    let scores: Vec<ScoreRow> =
        read_rows(run.infer_dir().join("prehoc_scores.csv"), "volscreen infer")?;
    let (breast_auc, patient_auc) = score_rocs(run, &scores, "prehoc")?;

    let detections: Vec<DetectionRow> =
        read_rows(run.infer_dir().join("prehoc_detections.csv"), "volscreen infer")?;
    let targets = malignant_targets(test);
    let mut patients: Vec<FrocPatient> = targets
        .iter()
        .map(|(&id, lesions)| FrocPatient {
            id: id.to_string(),
            detections: Vec::new(),
            lesions: lesions.len(),
        })
        .collect();
    for row in &detections {
        let lesions = targets.get(&row.patient).ok_or_else(|| {
            Error::Dataset(format!("detection for patient {} outside the test split", row.patient))
        })?;
        let bv =
            BoundingVolume::from_coords([row.x0, row.y0, row.z0, row.x1, row.y1, row.z1])?;
        let dice: Vec<f64> = lesions
            .iter()
            .map(|(side, mask)| {
                if *side == row.side {
                    crate::detect::dice_box_mask(&bv, mask)
                } else {
                    0.0
                }
            })
            .collect();
        let idx = patients.iter().position(|p| p.id == row.patient.to_string()).expect("built");
        patients[idx].detections.push((row.score, dice));
    }
    let thresholds = froc_thresholds(&patients);
    let points = froc(&patients, &thresholds, cfg.eval.dice_min)?;
    write_curve_csv(
        &run.eval_dir().join("prehoc_froc.csv"),
        &["threshold", "fpp", "tpr"],
        &froc_rows(&points),
    )?;
    write_curve_svg(
        &run.eval_dir().join("prehoc_froc.svg"),
        "prehoc FROC",
        "FPP",
        "TPR",
        &[("FROC", froc_series(&points, cfg.eval.fpp_max))],
    )?;
    Ok(PipelineSummary {
        breast_auc,
        patient_auc,
        tpr_at_budget: tpr_at_fpp(&points, cfg.eval.fpp_max),
    })
}

/// Builds the post-hoc FROC patient set from stored masks and scores.
/// Gating happens here: breasts at or below `tau` contribute nothing.
/// Detections are the components' tight bounding volumes, so they match
/// lesions exactly the way pre-hoc boxes do.
fn posthoc_froc_patients(
    run: &RunDir,
    cfg: &ExperimentConfig,
    test: &[&BreastSample],
    scores: &[ScoreRow],
    tau: f64,
) -> Result<(Vec<FrocPatient>, Vec<bool>)> {
    let score_of: BTreeMap<(u32, &str), f64> =
        scores.iter().map(|r| ((r.patient, r.side.as_str()), r.score)).collect();
    let targets = malignant_targets(test);
    let mut patients = Vec::new();
    let mut diagnosed = Vec::new();
    for (&id, lesions) in &targets {
        let mut p = FrocPatient {
            id: id.to_string(),
            detections: Vec::new(),
            lesions: lesions.len(),
        };
        let mut positive = false;
        for s in test.iter().filter(|s| s.patient.0 == id) {
            let key = (s.patient.0, s.side.as_str());
            let &score = score_of.get(&key).ok_or_else(|| {
                Error::Dataset(format!("no stored diagnosis for breast {}-{}", key.0, key.1))
            })?;
            if score <= tau {
                continue;
            }
            positive = true;
            let mask_path = require(run.mask_path(s.patient, s.side), "volscreen infer")?;
            let mask = saliency::read_mask_file(&mask_path)?;
            for c in mask_components(&mask, cfg.saliency.zeta, cfg.saliency.min_voxels) {
                let dice: Vec<f64> = lesions
                    .iter()
                    .map(|(side, lesion)| {
                        if *side == s.side.as_str() {
                            crate::detect::dice_box_mask(&c.bv, lesion)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                p.detections.push((c.mean, dice));
            }
        }
        patients.push(p);
        diagnosed.push(positive);
    }
    Ok((patients, diagnosed))
}

fn evaluate_posthoc(
    run: &RunDir,
    cfg: &ExperimentConfig,
    test: &[&BreastSample],
) -> Result<PipelineSummary> {
    let scores: Vec<ScoreRow> =
        read_rows(run.infer_dir().join("posthoc_scores.csv"), "volscreen infer")?;
    let (breast_auc, patient_auc) = score_rocs(run, &scores, "posthoc")?;

    let tau = read_tau(run)?;
    let (patients, diagnosed) = posthoc_froc_patients(run, cfg, test, &scores, tau)?;
    let thresholds = froc_thresholds(&patients);
    let all = froc(&patients, &thresholds, cfg.eval.dice_min)?;
    write_curve_csv(
        &run.eval_dir().join("posthoc_froc_all.csv"),
        &["threshold", "fpp", "tpr"],
        &froc_rows(&all),
    )?;

    let positive: Vec<FrocPatient> = patients
        .iter()
        .zip(&diagnosed)
        .filter(|(_, &d)| d)
        .map(|(p, _)| p.clone())
        .collect();
    let mut series = vec![("all patients", froc_series(&all, cfg.eval.fpp_max))];
    let mut plus_series = Vec::new();
    match froc(&positive, &thresholds, cfg.eval.dice_min) {
        Ok(plus) => {
            write_curve_csv(
                &run.eval_dir().join("posthoc_froc_positive.csv"),
                &["threshold", "fpp", "tpr"],
                &froc_rows(&plus),
            )?;
            plus_series = froc_series(&plus, cfg.eval.fpp_max);
        }
        Err(Error::MetricUndefined(why)) => {
            log::warn!("positively-diagnosed FROC scenario undefined: {why}");
        }
        Err(e) => return Err(e),
    }
    if !plus_series.is_empty() {
        series.push(("positively diagnosed", plus_series));
    }
    write_curve_svg(
        &run.eval_dir().join("posthoc_froc.svg"),
        "posthoc FROC",
        "FPP",
        "TPR",
        &series,
    )?;
    Ok(PipelineSummary {
        breast_auc,
        patient_auc,
        tpr_at_budget: tpr_at_fpp(&all, cfg.eval.fpp_max),
    })
}

/// Scores the stored test-set inference of whichever pipelines ran:
/// breast- and patient-wise ROC/AUC plus lesion-level FROC, written as
/// CSV and SVG curves and a `summary.json`.
pub fn evaluate(run: &RunDir, cfg: &ExperimentConfig) -> Result<EvalSummary> {
    init_run(run, cfg)?;
    let ds = phantom::read_dataset(&run.data_dir())?;
    let test = ds.of_split(SplitKind::Test);
    fs::create_dir_all(run.eval_dir())?;
    let mut summary =
        EvalSummary { fpp_budget: cfg.eval.fpp_max, prehoc: None, posthoc: None };
    if cfg.pipeline.includes_prehoc() {
        summary.prehoc = Some(evaluate_prehoc(run, cfg, &test)?);
    }
    if cfg.pipeline.includes_posthoc() {
        summary.posthoc = Some(evaluate_posthoc(run, cfg, &test)?);
    }
    fs::write(run.summary_path(), serde_json::to_string_pretty(&summary).map_err(io_other)?)?;
    Ok(summary)
}

/// One row of the pipeline comparison table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareRow {
    pub pipeline: String,
    pub breast_auc: f64,
    pub patient_auc: f64,
}

fn read_curve(path: &Path, x: usize, y: usize) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(io_other)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(io_other)?;
        let col = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::Dataset(format!("{}: short row", path.display())))?
                .parse::<f64>()
                .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
        };
        out.push((col(x)?, col(y)?));
    }
    Ok(out)
}

/// Emits the pipeline AUC table and overlays the stored per-pipeline
/// curves into combined plots.
pub fn compare(run: &RunDir, cfg: &ExperimentConfig) -> Result<Vec<CompareRow>> {
    init_run(run, cfg)?;
    let path = require(run.summary_path(), "volscreen evaluate")?;
    let summary: EvalSummary =
        serde_json::from_str(&fs::read_to_string(path)?).map_err(io_other)?;
    fs::create_dir_all(run.compare_dir())?;

    let mut rows = Vec::new();
    if let Some(p) = summary.prehoc {
        rows.push(CompareRow {
            pipeline: "pre-hoc".into(),
            breast_auc: p.breast_auc,
            patient_auc: p.patient_auc,
        });
    }
    if let Some(p) = summary.posthoc {
        rows.push(CompareRow {
            pipeline: "post-hoc".into(),
            breast_auc: p.breast_auc,
            patient_auc: p.patient_auc,
        });
    }
    write_log_csv(&run.compare_dir().join("auc_table.csv"), &rows)?;

    let mut roc_series: Vec<(&str, Vec<(f64, f64)>)> = Vec::new();
    let mut froc_series: Vec<(&str, Vec<(f64, f64)>)> = Vec::new();
    let prehoc_roc = run.eval_dir().join("prehoc_roc_breast.csv");
    if prehoc_roc.exists() {
        roc_series.push(("pre-hoc", read_curve(&prehoc_roc, 1, 2)?));
    }
    let posthoc_roc = run.eval_dir().join("posthoc_roc_breast.csv");
    if posthoc_roc.exists() {
        roc_series.push(("post-hoc", read_curve(&posthoc_roc, 1, 2)?));
    }
    let clip = |pts: Vec<(f64, f64)>| -> Vec<(f64, f64)> {
        pts.into_iter().filter(|&(x, _)| x <= cfg.eval.fpp_max).collect()
    };
    let prehoc_froc = run.eval_dir().join("prehoc_froc.csv");
    if prehoc_froc.exists() {
        froc_series.push(("pre-hoc", clip(read_curve(&prehoc_froc, 1, 2)?)));
    }
    let posthoc_all = run.eval_dir().join("posthoc_froc_all.csv");
    if posthoc_all.exists() {
        froc_series.push(("post-hoc (all)", clip(read_curve(&posthoc_all, 1, 2)?)));
    }
    let posthoc_plus = run.eval_dir().join("posthoc_froc_positive.csv");
    if posthoc_plus.exists() {
        froc_series.push(("post-hoc (+)", clip(read_curve(&posthoc_plus, 1, 2)?)));
    }
    if !roc_series.is_empty() {
        write_curve_svg(
            &run.compare_dir().join("roc_breast.svg"),
            "breast-wise ROC",
            "FPR",
            "TPR",
            &roc_series,
        )?;
    }
    if !froc_series.is_empty() {
        write_curve_svg(
            &run.compare_dir().join("froc.svg"),
            "lesion FROC",
            "FPP",
            "TPR",
            &froc_series,
        )?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Pipeline;
    use tempfile::tempdir;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            seed: 11,
            pipeline: Pipeline::Both,
            data: crate::config::DataSection {
                patients: 6,
                family: "easy".into(),
                split: [0.5, 0.25, 0.25],
            },
            ..Default::default()
        }
    }

    #[test]
    fn generated_data_is_byte_identical_across_runs() {
        let cfg = tiny_config();
        let a = tempdir().unwrap();
        let b = tempdir().unwrap();
        let run_a = RunDir::new(a.path().join("run"));
        let run_b = RunDir::new(b.path().join("run"));
        gen_data(&run_a, &cfg).unwrap();
        gen_data(&run_b, &cfg).unwrap();
        for name in ["manifest.csv", "volumes.bin", "masks.bin"] {
            let x = fs::read(run_a.data_dir().join(name)).unwrap();
            let y = fs::read(run_b.data_dir().join(name)).unwrap();
            assert_eq!(x, y, "{name} differs between identically seeded runs");
        }
    }

    #[test]
    fn missing_artifacts_name_their_producer() {
        let dir = tempdir().unwrap();
        let run = RunDir::new(dir.path().join("run"));
        let cfg = tiny_config();

        match train_encoder(&run, &cfg) {
            Err(Error::MissingArtifact { producer, .. }) => {
                assert_eq!(producer, "volscreen gen-data")
            }
            other => panic!("expected a missing-artifact error, got {other:?}"),
        }

        gen_data(&run, &cfg).unwrap();
        match train_detector(&run, &cfg) {
            Err(Error::MissingArtifact { producer, .. }) => {
                assert_eq!(producer, "volscreen train-encoder")
            }
            other => panic!("expected a missing-artifact error, got {other:?}"),
        }
        match fine_tune(&run, &cfg) {
            Err(Error::MissingArtifact { producer, .. }) => {
                assert_eq!(producer, "volscreen meta-train")
            }
            other => panic!("expected a missing-artifact error, got {other:?}"),
        }
        match compare(&run, &cfg) {
            Err(Error::MissingArtifact { producer, .. }) => {
                assert_eq!(producer, "volscreen evaluate")
            }
            other => panic!("expected a missing-artifact error, got {other:?}"),
        }
    }

    #[test]
    fn the_stored_config_matches_the_run() {
        let dir = tempdir().unwrap();
        let run = RunDir::new(dir.path().join("run"));
        let cfg = tiny_config();
        gen_data(&run, &cfg).unwrap();
        let stored = ExperimentConfig::load(&run.config_path()).unwrap();
        assert_eq!(stored.seed, cfg.seed);
        assert_eq!(stored.data.patients, cfg.data.patients);
        assert_eq!(stored.data.family, cfg.data.family);
    }
}
