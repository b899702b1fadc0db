//! Procedural generation of labeled synthetic breast-like volumes.
//!
//! Each breast is a textured 3D volume (smoothed noise over a
//! low-frequency gradient) carrying zero or more ellipsoidal blob
//! lesions with noisy boundaries. Benign and malignant lesions differ by
//! contrast and boundary roughness, so detection, lesion classification
//! and scan-level diagnosis all have learnable signal. Everything is a
//! pure function of `(seed, config)`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Volume, VoxelMask};

/// Lesion class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LesionClass {
    Benign,
    Malignant,
}

/// Scan-level label: 0 = no lesion, 1 = all lesions benign,
/// 2 = at least one malignant lesion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScanLabel {
    NoLesion,
    Benign,
    Malignant,
}

impl ScanLabel {
    pub fn as_u8(self) -> u8 {
        match self {
            ScanLabel::NoLesion => 0,
            ScanLabel::Benign => 1,
            ScanLabel::Malignant => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(ScanLabel::NoLesion),
            1 => Ok(ScanLabel::Benign),
            2 => Ok(ScanLabel::Malignant),
            other => Err(Error::Dataset(format!("scan label {other} out of range"))),
        }
    }
}

/// Scan-level label from the lesion classes.
pub fn label_breast(lesions: &[LesionClass]) -> ScanLabel {
    if lesions.is_empty() {
        ScanLabel::NoLesion
    } else if lesions.contains(&LesionClass::Malignant) {
        ScanLabel::Malignant
    } else {
        ScanLabel::Benign
    }
}

/// Breast side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            other => Err(Error::Dataset(format!("unknown side `{other}`"))),
        }
    }
}

/// Patient identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatientId(pub u32);

/// The geometry of one generated lesion.
#[derive(Clone, Debug)]
pub struct LesionSpec {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub class: LesionClass,
    pub contrast: f64,
    pub roughness: f64,
}

/// A generated lesion: its parameters plus the exact voxel mask.
#[derive(Clone, Debug)]
pub struct Lesion {
    pub spec: LesionSpec,
    pub mask: VoxelMask,
}

/// One breast: the volume, its lesions and the scan-level label.
#[derive(Clone, Debug)]
pub struct BreastSample {
    pub patient: PatientId,
    pub side: Side,
    pub volume: Volume,
    pub lesions: Vec<Lesion>,
    pub label: ScanLabel,
}

impl BreastSample {
    pub fn lesion_classes(&self) -> Vec<LesionClass> {
        self.lesions.iter().map(|l| l.spec.class).collect()
    }
}

/// Inclusive range helper for the generator knobs.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        if self.hi <= self.lo {
            self.lo
        } else {
            rng.gen_range(self.lo..self.hi)
        }
    }
}

/// Generator configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhantomConfig {
    /// Volume extents `(x, y, z)`.
    pub extents: [usize; 3],
    /// Relative weights of 0, 1 and 2 lesions per breast.
    pub lesion_count_weights: [f64; 3],
    /// Probability that a lesion is malignant.
    pub malignant_prior: f64,
    /// Amplitude of the smoothed background noise.
    pub noise: f64,
    /// Amplitude of the low-frequency background gradient.
    pub gradient: f64,
    /// Mean background intensity.
    pub background: f64,
    /// Lesion radius range, voxels (per axis, drawn independently).
    pub radius: Range,
    /// Additive intensity bump at the lesion center, per class.
    pub benign_contrast: Range,
    pub malignant_contrast: Range,
    /// Boundary roughness (relative radial noise), per class.
    pub benign_roughness: Range,
    pub malignant_roughness: Range,
    /// Fraction of the admissible center range that is actually used;
    /// 0 pins lesions to the volume center, 1 uses the whole range.
    pub center_jitter: f64,
    /// Normalized ellipsoidal radius where the tissue envelope begins to
    /// fall off (1.0 touches the face centers). Intensity fades to zero
    /// by `envelope_end`, leaving an air border the way a breast sits
    /// inside the scanner's field of view. Lesions are placed inside the
    /// plateau.
    pub envelope_start: f64,
    pub envelope_end: f64,
}

impl PhantomConfig {
    /// Default family: mixed lesion counts, moderate contrast. Hard
    /// enough that an untrained pipeline does not solve it by accident.
    pub fn default_family() -> Self {
        PhantomConfig {
            extents: [32, 32, 16],
            lesion_count_weights: [0.35, 0.40, 0.25],
            malignant_prior: 0.5,
            noise: 0.32,
            gradient: 0.25,
            background: 0.32,
            radius: Range::new(2.6, 5.0),
            benign_contrast: Range::new(0.22, 0.38),
            malignant_contrast: Range::new(0.46, 0.70),
            benign_roughness: Range::new(0.06, 0.16),
            malignant_roughness: Range::new(0.30, 0.55),
            center_jitter: 1.0,
            envelope_start: 0.68,
            envelope_end: 0.94,
        }
    }

    /// Easy family: exactly one bright, large, nearly centered lesion on
    /// a quiet background. Used for detector smoke tests.
    pub fn easy() -> Self {
        PhantomConfig {
            extents: [32, 32, 16],
            lesion_count_weights: [0.0, 1.0, 0.0],
            malignant_prior: 0.5,
            noise: 0.15,
            gradient: 0.12,
            background: 0.28,
            radius: Range::new(4.0, 6.0),
            benign_contrast: Range::new(0.55, 0.75),
            malignant_contrast: Range::new(0.60, 0.85),
            benign_roughness: Range::new(0.04, 0.10),
            malignant_roughness: Range::new(0.20, 0.35),
            center_jitter: 0.3,
            envelope_start: 0.68,
            envelope_end: 0.94,
        }
    }
}

/// Splitmix64-style seed derivation so every (patient, side, stage) gets
/// an independent, reproducible stream.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(t.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Smoothed coarse noise: uniform noise on a lattice shrunk by `scale`,
/// trilinearly upsampled, then box-smoothed.
fn smooth_noise(dims: [usize; 3], scale: usize, passes: usize, rng: &mut impl Rng) -> Volume {
    let coarse_dims = [
        (dims[0] / scale).max(2),
        (dims[1] / scale).max(2),
        (dims[2] / scale).max(2),
    ];
    let mut coarse = Volume::zeros(coarse_dims);
    for v in coarse.data.iter_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    let mut out = Volume::zeros(dims);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [
                    (x as f64 + 0.5) * coarse_dims[0] as f64 / dims[0] as f64,
                    (y as f64 + 0.5) * coarse_dims[1] as f64 / dims[1] as f64,
                    (z as f64 + 0.5) * coarse_dims[2] as f64 / dims[2] as f64,
                ];
                out.set(x, y, z, coarse.sample(p));
            }
        }
    }
    for _ in 0..passes {
        let src = out.clone();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let mut sum = src.get(x, y, z);
                    let mut n = 1.0f32;
                    let mut tap = |v: f32| {
                        sum += v;
                        n += 1.0;
                    };
                    if x > 0 {
                        tap(src.get(x - 1, y, z));
                    }
                    if x + 1 < dims[0] {
                        tap(src.get(x + 1, y, z));
                    }
                    if y > 0 {
                        tap(src.get(x, y - 1, z));
                    }
                    if y + 1 < dims[1] {
                        tap(src.get(x, y + 1, z));
                    }
                    if z > 0 {
                        tap(src.get(x, y, z - 1));
                    }
                    if z + 1 < dims[2] {
                        tap(src.get(x, y, z + 1));
                    }
                    out.set(x, y, z, sum / n);
                }
            }
        }
    }
    out
}

fn draw_lesion_spec(cfg: &PhantomConfig, rng: &mut impl Rng) -> LesionSpec {
    let class = if rng.gen_bool(cfg.malignant_prior) {
        LesionClass::Malignant
    } else {
        LesionClass::Benign
    };
    let (contrast, roughness) = match class {
        LesionClass::Benign => (cfg.benign_contrast.draw(rng), cfg.benign_roughness.draw(rng)),
        LesionClass::Malignant => {
            (cfg.malignant_contrast.draw(rng), cfg.malignant_roughness.draw(rng))
        }
    };
    let mut radii = [0.0f64; 3];
    for r in radii.iter_mut() {
        *r = cfg.radius.draw(rng);
    }
    // The z extent is usually the short axis; keep lesions roughly
    // isotropic relative to the lattice.
    radii[2] = radii[2].min(cfg.extents[2] as f64 / 3.2);
    LesionSpec { center: [0.0; 3], radii, class, contrast, roughness }
}

/// Picks a center such that the lesion (radius + roughness margin) fits
/// inside the lattice, shrinking the radii when the volume is too small.
fn place_lesion(
    cfg: &PhantomConfig,
    mut spec: LesionSpec,
    taken: &[LesionSpec],
    rng: &mut impl Rng,
) -> LesionSpec {
    loop {
        let mut lo = [0.0f64; 3];
        let mut hi = [0.0f64; 3];
        let mut fits = true;
        for a in 0..3 {
            let margin = spec.radii[a] * (1.0 + spec.roughness) + 0.5;
            lo[a] = margin;
            hi[a] = cfg.extents[a] as f64 - margin;
            if hi[a] <= lo[a] {
                fits = false;
            }
        }
        if !fits {
            for r in spec.radii.iter_mut() {
                *r *= 0.8;
            }
            log::debug!("lesion does not fit; shrinking radii to {:?}", spec.radii);
            continue;
        }
        for attempt in 0..20 {
            for a in 0..3 {
                let mid = 0.5 * (lo[a] + hi[a]);
                let half = 0.5 * (hi[a] - lo[a]) * cfg.center_jitter.clamp(0.0, 1.0);
                spec.center[a] = if half > 0.0 { rng.gen_range(mid - half..mid + half) } else { mid };
            }
            if attempt == 19 {
                project_to_plateau(cfg, &mut spec.center);
            }
            let off_plateau = center_radius(cfg, &spec.center) > cfg.envelope_start;
            let crowded = taken.iter().any(|o| {
                let d2: f64 =
                    (0..3).map(|a| (o.center[a] - spec.center[a]).powi(2)).sum();
                let reach = o.radii.iter().chain(&spec.radii).cloned().fold(0.0, f64::max);
                d2.sqrt() < reach * 1.4
            });
            if (!crowded && !off_plateau) || attempt == 19 {
                return spec;
            }
        }
    }
}

/// Normalized ellipsoidal radius of a center point (0 at the volume
/// center, 1 at the face centers).
fn center_radius(cfg: &PhantomConfig, center: &[f64; 3]) -> f64 {
    (0..3)
        .map(|a| {
            let u = 2.0 * center[a] / cfg.extents[a] as f64 - 1.0;
            u * u
        })
        .sum::<f64>()
        .sqrt()
}

/// Pulls a center radially onto the envelope plateau, keeping its
/// direction from the volume center.
fn project_to_plateau(cfg: &PhantomConfig, center: &mut [f64; 3]) {
    let r = center_radius(cfg, center);
    if r <= cfg.envelope_start || r == 0.0 {
        return;
    }
    let scale = cfg.envelope_start * 0.95 / r;
    for a in 0..3 {
        let half = cfg.extents[a] as f64 / 2.0;
        let u = center[a] - half;
        center[a] = half + u * scale;
    }
}

/// Rasterizes the lesion: a voxel belongs to the mask when its
/// normalized ellipsoidal distance is below a noise-perturbed threshold.
fn rasterize_lesion(cfg: &PhantomConfig, spec: &LesionSpec, seed: u64) -> VoxelMask {
    let dims = cfg.extents;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = smooth_noise(dims, 2, 1, &mut rng);
    let mut mask = VoxelMask::empty(dims);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                let d2: f64 =
                    (0..3).map(|a| ((p[a] - spec.center[a]) / spec.radii[a]).powi(2)).sum();
                let wobble = (noise.get(x, y, z) as f64 - 0.5) * 2.0 * spec.roughness;
                if d2.sqrt() <= 1.0 + wobble {
                    mask.set(x, y, z, true);
                }
            }
        }
    }
    // The center voxel is inside by construction; guarantee non-empty
    // masks even under extreme roughness draws.
    if mask.count() == 0 {
        let c = spec.center.map(|v| v as usize);
        mask.set(
            c[0].min(dims[0] - 1),
            c[1].min(dims[1] - 1),
            c[2].min(dims[2] - 1),
            true,
        );
    }
    mask
}

/// Tissue envelope weight of a voxel: 1 on the interior plateau, a
/// half-cosine ramp between `envelope_start` and `envelope_end`, 0 past
/// the end (air).
fn envelope(cfg: &PhantomConfig, p: [usize; 3], dims: [usize; 3]) -> f64 {
    let r2: f64 = (0..3)
        .map(|a| {
            let u = 2.0 * (p[a] as f64 + 0.5) / dims[a] as f64 - 1.0;
            u * u
        })
        .sum();
    let r = r2.sqrt();
    let (s, e) = (cfg.envelope_start, cfg.envelope_end);
    if r <= s {
        1.0
    } else if r >= e {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * (r - s) / (e - s)).cos())
    }
}

/// Generates one breast deterministically from `(seed, config)`.
pub fn generate_phantom(seed: u64, patient: PatientId, side: Side, cfg: &PhantomConfig) -> BreastSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = cfg.extents;

    let mut volume = smooth_noise(dims, 4, 2, &mut rng);
    let gdir: [f64; 3] = [
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    ];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let u = [
                    x as f64 / dims[0] as f64 - 0.5,
                    y as f64 / dims[1] as f64 - 0.5,
                    z as f64 / dims[2] as f64 - 0.5,
                ];
                let grad: f64 = (0..3).map(|a| u[a] * gdir[a]).sum();
                let tex = (volume.get(x, y, z) as f64 - 0.5) * cfg.noise;
                let env = envelope(cfg, [x, y, z], dims);
                let v = env * (cfg.background + tex + grad * cfg.gradient);
                volume.set(x, y, z, v.clamp(0.0, 1.0) as f32);
            }
        }
    }

    let w = &cfg.lesion_count_weights;
    let total = w[0] + w[1] + w[2];
    let draw = rng.gen_range(0.0..total.max(f64::MIN_POSITIVE));
    let count = if draw < w[0] {
        0
    } else if draw < w[0] + w[1] {
        1
    } else {
        2
    };

    let mut specs: Vec<LesionSpec> = Vec::new();
    for _ in 0..count {
        let spec = draw_lesion_spec(cfg, &mut rng);
        let spec = place_lesion(cfg, spec, &specs, &mut rng);
        specs.push(spec);
    }

    let mut lesions = Vec::with_capacity(specs.len());
    for (i, spec) in specs.into_iter().enumerate() {
        let mask = rasterize_lesion(cfg, &spec, derive_seed(seed, &[0x11, i as u64]));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                    let d2: f64 =
                        (0..3).map(|a| ((p[a] - spec.center[a]) / spec.radii[a]).powi(2)).sum();
                    let falloff = (1.0 - d2).max(0.0);
                    if falloff > 0.0 || mask.get(x, y, z) {
                        let bump = spec.contrast * falloff.max(if mask.get(x, y, z) { 0.25 } else { 0.0 });
                        let v = volume.get(x, y, z) as f64 + bump;
                        volume.set(x, y, z, v.clamp(0.0, 1.0) as f32);
                    }
                }
            }
        }
        lesions.push(Lesion { spec, mask });
    }

    let label = label_breast(&lesions.iter().map(|l| l.spec.class).collect::<Vec<_>>());
    BreastSample { patient, side, volume, lesions, label }
}

/// Generates both breasts of `n_patients` patients.
pub fn generate_dataset(seed: u64, n_patients: u32, cfg: &PhantomConfig) -> Vec<BreastSample> {
    let mut out = Vec::with_capacity(2 * n_patients as usize);
    for p in 0..n_patients {
        for (si, side) in [Side::Left, Side::Right].into_iter().enumerate() {
            let s = derive_seed(seed, &[p as u64, si as u64]);
            out.push(generate_phantom(s, PatientId(p), side, cfg));
        }
    }
    out
}

/// Patient-wise dataset split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<PatientId>,
    pub validation: Vec<PatientId>,
    pub test: Vec<PatientId>,
}

/// Which split a patient landed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Validation => "validation",
            SplitKind::Test => "test",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "validation" => Ok(SplitKind::Validation),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

impl DatasetSplit {
    pub fn of(&self, patient: PatientId) -> Option<SplitKind> {
        if self.train.contains(&patient) {
            Some(SplitKind::Train)
        } else if self.validation.contains(&patient) {
            Some(SplitKind::Validation)
        } else if self.test.contains(&patient) {
            Some(SplitKind::Test)
        } else {
            None
        }
    }
}

/// Shuffles patients and cuts at cumulative boundaries rounded to the
/// nearest patient, so the requested proportions are honored as closely
/// as integer sizes allow.
pub fn make_split(patients: &[PatientId], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if patients.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 patients for a 3-way split, got {}",
            patients.len()
        )));
    }
    if ratios.iter().any(|&r| r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let mut order: Vec<PatientId> = patients.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates; rand's shuffle would also do, spelled out here so the
    // permutation is stable across rand versions.
    for i in (1..order.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    let n = order.len() as f64;
    let c1 = (n * ratios[0]).round() as usize;
    let c2 = (n * (ratios[0] + ratios[1])).round() as usize;
    let c1 = c1.min(order.len());
    let c2 = c2.clamp(c1, order.len());
    Ok(DatasetSplit {
        train: order[..c1].to_vec(),
        validation: order[c1..c2].to_vec(),
        test: order[c2..].to_vec(),
    })
}

/// A dataset on disk: samples plus the patient-wise split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<BreastSample>,
    pub split: DatasetSplit,
}

impl Dataset {
    /// Samples belonging to one split, in manifest order.
    pub fn of_split(&self, kind: SplitKind) -> Vec<&BreastSample> {
        self.samples
            .iter()
            .filter(|s| self.split.of(s.patient) == Some(kind))
            .collect()
    }

    /// Patient ids of one split, in split order.
    pub fn patients_of(&self, kind: SplitKind) -> &[PatientId] {
        match kind {
            SplitKind::Train => &self.split.train,
            SplitKind::Validation => &self.split.validation,
            SplitKind::Test => &self.split.test,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    patient: u32,
    side: String,
    label: u8,
    split: String,
    volume_offset: u64,
    mask_offset: u64,
}

/// Writes `manifest.csv`, `volumes.bin` (per-record extents header +
/// little-endian f32 voxels) and `masks.bin` (per-record lesion count,
/// then per lesion a class byte and run-length-encoded voxels).
pub fn write_dataset(dir: &Path, samples: &[BreastSample], split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut volumes = BufWriter::new(File::create(dir.join("volumes.bin"))?);
    let mut masks = BufWriter::new(File::create(dir.join("masks.bin"))?);
    let mut manifest = csv::Writer::from_path(dir.join("manifest.csv"))
        .map_err(|e| Error::Dataset(format!("manifest: {e}")))?;

    let mut vol_off = 0u64;
    let mut mask_off = 0u64;
    for s in samples {
        let kind = split.of(s.patient).ok_or_else(|| {
            Error::Dataset(format!("patient {} missing from the split", s.patient.0))
        })?;
        manifest
            .serialize(ManifestRow {
                patient: s.patient.0,
                side: s.side.as_str().to_string(),
                label: s.label.as_u8(),
                split: kind.as_str().to_string(),
                volume_offset: vol_off,
                mask_offset: mask_off,
            })
            .map_err(|e| Error::Dataset(format!("manifest: {e}")))?;

        for d in s.volume.dims {
            volumes.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &s.volume.data {
            volumes.write_all(&v.to_le_bytes())?;
        }
        vol_off += 12 + 4 * s.volume.data.len() as u64;

        masks.write_all(&(s.lesions.len() as u32).to_le_bytes())?;
        mask_off += 4;
        for l in &s.lesions {
            let class = match l.spec.class {
                LesionClass::Benign => 0u8,
                LesionClass::Malignant => 1u8,
            };
            masks.write_all(&[class])?;
            let runs = l.mask.to_runs();
            masks.write_all(&(runs.len() as u32).to_le_bytes())?;
            for (start, len) in &runs {
                masks.write_all(&start.to_le_bytes())?;
                masks.write_all(&len.to_le_bytes())?;
            }
            mask_off += 1 + 4 + 8 * runs.len() as u64;
        }
    }
    manifest.flush().map_err(|e| Error::Dataset(format!("manifest: {e}")))?;
    volumes.flush()?;
    masks.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a dataset written by [`write_dataset`]. Missing files point the
/// caller at the generating subcommand.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let open = |name: &str| -> Result<File> {
        let path = dir.join(name);
        File::open(&path).map_err(|_| Error::MissingArtifact {
            path: path.display().to_string(),
            producer: "volscreen gen-data".into(),
        })
    };
    let mut manifest = csv::Reader::from_reader(BufReader::new(open("manifest.csv")?));
    let mut volumes = BufReader::new(open("volumes.bin")?);
    let mut masks = BufReader::new(open("masks.bin")?);

    let mut samples = Vec::new();
    let mut split =
        DatasetSplit { train: Vec::new(), validation: Vec::new(), test: Vec::new() };
    for row in manifest.deserialize() {
        let row: ManifestRow = row.map_err(|e| Error::Dataset(format!("manifest: {e}")))?;
        let patient = PatientId(row.patient);
        let kind = SplitKind::from_str(&row.split)?;
        let bucket = match kind {
            SplitKind::Train => &mut split.train,
            SplitKind::Validation => &mut split.validation,
            SplitKind::Test => &mut split.test,
        };
        if !bucket.contains(&patient) {
            bucket.push(patient);
        }

        volumes.seek(SeekFrom::Start(row.volume_offset))?;
        let dims = [
            read_u32(&mut volumes)? as usize,
            read_u32(&mut volumes)? as usize,
            read_u32(&mut volumes)? as usize,
        ];
        let n = dims[0] * dims[1] * dims[2];
        let mut data = vec![0f32; n];
        for v in data.iter_mut() {
            let mut b = [0u8; 4];
            volumes.read_exact(&mut b)?;
            *v = f32::from_le_bytes(b);
        }
        let volume = Volume::from_data(dims, data)?;

        masks.seek(SeekFrom::Start(row.mask_offset))?;
        let lesion_count = read_u32(&mut masks)?;
        let mut lesions = Vec::with_capacity(lesion_count as usize);
        for _ in 0..lesion_count {
            let mut class_byte = [0u8; 1];
            masks.read_exact(&mut class_byte)?;
            let class = match class_byte[0] {
                0 => LesionClass::Benign,
                1 => LesionClass::Malignant,
                other => return Err(Error::Dataset(format!("lesion class byte {other}"))),
            };
            let run_count = read_u32(&mut masks)?;
            let mut runs = Vec::with_capacity(run_count as usize);
            for _ in 0..run_count {
                let start = read_u32(&mut masks)?;
                let len = read_u32(&mut masks)?;
                runs.push((start, len));
            }
            let mask = VoxelMask::from_runs(dims, &runs)?;
            // Center/radii are not persisted; reconstruct a nominal spec
            // from the mask so downstream code has geometry to work with.
            let (lo, hi) = mask.bbox().ok_or_else(|| Error::Dataset("empty lesion mask".into()))?;
            let spec = LesionSpec {
                center: [
                    (lo[0] + hi[0]) as f64 / 2.0,
                    (lo[1] + hi[1]) as f64 / 2.0,
                    (lo[2] + hi[2]) as f64 / 2.0,
                ],
                radii: [
                    (hi[0] - lo[0]) as f64 / 2.0,
                    (hi[1] - lo[1]) as f64 / 2.0,
                    (hi[2] - lo[2]) as f64 / 2.0,
                ],
                class,
                contrast: 0.0,
                roughness: 0.0,
            };
            lesions.push(Lesion { spec, mask });
        }

        let label = ScanLabel::from_u8(row.label)?;
        let expect = label_breast(&lesions.iter().map(|l| l.spec.class).collect::<Vec<_>>());
        if label != expect {
            return Err(Error::Dataset(format!(
                "patient {} {}: stored label {} contradicts lesions",
                row.patient,
                row.side,
                row.label
            )));
        }
        samples.push(BreastSample {
            patient,
            side: Side::from_str(&row.side)?,
            volume,
            lesions,
            label,
        });
    }
    Ok(Dataset { samples, split })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn checksum(v: &Volume) -> [u8; 32] {
        let mut h = Sha256::new();
        for x in &v.data {
            h.update(x.to_le_bytes());
        }
        h.finalize().into()
    }

    #[test]
    fn label_rule() {
        use LesionClass::*;
        assert_eq!(label_breast(&[]), ScanLabel::NoLesion);
        assert_eq!(label_breast(&[Benign, Benign]), ScanLabel::Benign);
        assert_eq!(label_breast(&[Benign, Malignant]), ScanLabel::Malignant);
    }

    #[test]
    fn zero_lesion_config_yields_label_zero() {
        let mut cfg = PhantomConfig::default_family();
        cfg.lesion_count_weights = [1.0, 0.0, 0.0];
        let s = generate_phantom(7, PatientId(0), Side::Left, &cfg);
        assert_eq!(s.label, ScanLabel::NoLesion);
        assert!(s.lesions.is_empty());
    }

    #[test]
    fn forced_malignant_yields_label_two() {
        let mut cfg = PhantomConfig::default_family();
        cfg.lesion_count_weights = [0.0, 1.0, 0.0];
        cfg.malignant_prior = 1.0;
        let s = generate_phantom(11, PatientId(0), Side::Left, &cfg);
        assert_eq!(s.label, ScanLabel::Malignant);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let cfg = PhantomConfig::default_family();
        let a = generate_phantom(42, PatientId(3), Side::Right, &cfg);
        let b = generate_phantom(42, PatientId(3), Side::Right, &cfg);
        assert_eq!(checksum(&a.volume), checksum(&b.volume));
        let c = generate_phantom(43, PatientId(3), Side::Right, &cfg);
        assert_ne!(checksum(&a.volume), checksum(&c.volume));
    }

    #[test]
    fn masks_lie_inside_the_lattice_and_carry_signal() {
        let cfg = PhantomConfig::default_family();
        for seed in 0..12u64 {
            let s = generate_phantom(seed, PatientId(0), Side::Left, &cfg);
            assert_eq!(s.label, label_breast(&s.lesion_classes()));
            for l in &s.lesions {
                assert!(l.mask.count() > 0);
                let (lo, hi) = l.mask.bbox().unwrap();
                assert!(lo.iter().all(|&v| v >= 0));
                assert!(hi[0] as usize <= cfg.extents[0]);
                assert!(hi[1] as usize <= cfg.extents[1]);
                assert!(hi[2] as usize <= cfg.extents[2]);
            }
        }
    }

    #[test]
    fn paper_sized_split() {
        let patients: Vec<PatientId> = (0..117).map(PatientId).collect();
        let split = make_split(&patients, [45.0 / 117.0, 13.0 / 117.0, 59.0 / 117.0], 9).unwrap();
        assert_eq!(split.train.len(), 45);
        assert_eq!(split.validation.len(), 13);
        assert_eq!(split.test.len(), 59);
    }

    #[test]
    fn tiny_equal_split() {
        let patients: Vec<PatientId> = (0..3).map(PatientId).collect();
        let split = make_split(&patients, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 0).unwrap();
        assert_eq!(split.train.len(), 1);
        assert_eq!(split.validation.len(), 1);
        assert_eq!(split.test.len(), 1);
    }

    #[test]
    fn splits_are_disjoint() {
        let patients: Vec<PatientId> = (0..23).map(PatientId).collect();
        for seed in 0..5 {
            let s = make_split(&patients, [0.5, 0.2, 0.3], seed).unwrap();
            for p in &s.train {
                assert!(!s.validation.contains(p) && !s.test.contains(p));
            }
            for p in &s.validation {
                assert!(!s.test.contains(p));
            }
            assert_eq!(s.train.len() + s.validation.len() + s.test.len(), 23);
        }
    }

    #[test]
    fn too_few_patients_rejected() {
        let patients: Vec<PatientId> = (0..2).map(PatientId).collect();
        assert!(make_split(&patients, [0.4, 0.3, 0.3], 0).is_err());
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let cfg = PhantomConfig::default_family();
        let samples = generate_dataset(5, 4, &cfg);
        let patients: Vec<PatientId> = (0..4).map(PatientId).collect();
        let split = make_split(&patients, [0.5, 0.25, 0.25], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &samples, &split).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.samples.len(), samples.len());
        assert_eq!(back.split, split);
        for (a, b) in samples.iter().zip(&back.samples) {
            assert_eq!(a.patient, b.patient);
            assert_eq!(a.label, b.label);
            assert_eq!(checksum(&a.volume), checksum(&b.volume));
            assert_eq!(a.lesions.len(), b.lesions.len());
            for (la, lb) in a.lesions.iter().zip(&b.lesions) {
                assert_eq!(la.spec.class, lb.spec.class);
                assert_eq!(la.mask.to_runs(), lb.mask.to_runs());
            }
        }
    }
}
