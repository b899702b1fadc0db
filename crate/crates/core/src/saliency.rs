//! Post-hoc stage two: 1-class saliency. An encoder-decoder shares the
//! screening classifier's trunk (frozen) and learns a per-voxel mask in
//! [0,1] whose salient region preserves a positive diagnosis while its
//! complement destroys it. Masks of positively diagnosed volumes are
//! thresholded into malignant-region detections.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::BoundingVolume;
use crate::error::{Error, Result};
use crate::meta::diagnose;
use crate::nn::presets::{is_decoder_param, saliency_model, DecoderConfig, DenseNetConfig};
use crate::nn::{AdamState, Network};
use crate::scalar::Scalar;
use crate::tensor::Array;
use crate::volume::Volume;

pub use crate::metrics::eer_threshold;

/// Components smaller than this many voxels are treated as speckle.
pub const MIN_COMPONENT_VOXELS: usize = 8;

/// Weights of the four loss terms.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    /// λ1, total variation.
    pub tv: f64,
    /// λ2, mask area.
    pub area: f64,
    /// λ3, preservation of the positive diagnosis under the mask.
    pub preserve: f64,
    /// λ4, destruction of the diagnosis under the complement.
    pub destroy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { tv: 0.1, area: 3.0, preserve: 1.0, destroy: 2.5 }
    }
}

/// Value of each term (unweighted) plus the weighted total.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SaliencyLossParts {
    pub total: f64,
    pub tv: f64,
    pub area: f64,
    pub preserve: f64,
    pub destroy: f64,
}

fn mask_dims(shape: &[usize]) -> Result<[usize; 3]> {
    if shape.len() != 5 || shape[0] != 1 || shape[1] != 1 {
        return Err(Error::InvalidArgument(format!(
            "saliency tensors must be a single [1,1,z,y,x] volume, got {shape:?}"
        )));
    }
    Ok([shape[2], shape[3], shape[4]])
}

/// Total variation: sum of absolute forward differences along the three
/// axes, divided by the voxel count. Returns the value and its gradient.
fn tv_term<T: Scalar>(mask: &Array<T>) -> Result<(T, Array<T>)> {
    let [nz, ny, nx] = mask_dims(mask.shape())?;
    let m = mask.values();
    let mut grad = Array::zeros(mask.shape());
    let g = grad.values_mut();
    let inv_n = T::of64(1.0 / (nz * ny * nx) as f64);
    let mut total = T::zero();
    let at = |z: usize, y: usize, x: usize| (z * ny + y) * nx + x;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = at(z, y, x);
                for j in [
                    (x + 1 < nx).then(|| at(z, y, x + 1)),
                    (y + 1 < ny).then(|| at(z, y + 1, x)),
                    (z + 1 < nz).then(|| at(z + 1, y, x)),
                ]
                .into_iter()
                .flatten()
                {
                    let d = m[j] - m[i];
                    total += d.abs() * inv_n;
                    let s = if d > T::zero() {
                        inv_n
                    } else if d < T::zero() {
                        -inv_n
                    } else {
                        T::zero()
                    };
                    g[j] += s;
                    g[i] -= s;
                }
            }
        }
    }
    Ok((total, grad))
}

/// Mean voxel value of the mask and its (constant) gradient.
fn area_term<T: Scalar>(mask: &Array<T>) -> Result<(T, Array<T>)> {
    mask_dims(mask.shape())?;
    let inv_n = T::of64(1.0 / mask.numel() as f64);
    let value = mask.values().iter().fold(T::zero(), |s, &v| s + v) * inv_n;
    Ok((value, Array::filled(mask.shape(), inv_n)))
}

/// Log-probability of the malignant class for `input`, together with the
/// gradient of that log-probability w.r.t. the input voxels. The
/// classifier's own parameter gradients are scratch and zeroed.
fn log_p1_and_input_grad<T: Scalar>(
    classifier: &mut Network<T>,
    input: &Array<T>,
) -> Result<(T, Array<T>)> {
    classifier.zero_grads();
    let logits = {
        let pass = classifier.forward(input)?;
        let out = pass.output();
        if out.shape() != [1, 2] {
            return Err(Error::InvalidArgument(format!(
                "saliency expects a two-class classifier over one volume, got output {:?}",
                out.shape()
            )));
        }
        [out.values()[0], out.values()[1]]
    };
    let m = logits[0].max(logits[1]);
    let lse = ((logits[0] - m).exp() + (logits[1] - m).exp()).ln() + m;
    let log_p1 = logits[1] - lse;
    let p = [(logits[0] - lse).exp(), (logits[1] - lse).exp()];
    // d log p1 / dz_k = [k = 1] − p_k
    let dlogits = Array::from_vec(&[1, 2], vec![-p[0], T::one() - p[1]])?;
    let input_grad = classifier.backward(&dlogits)?;
    classifier.zero_grads();
    Ok((log_p1, input_grad))
}

/// The four-term saliency loss for one volume and its gradient with
/// respect to the mask:
/// `ℓ = λ1·ℓ_TV(m) + λ2·ℓ_A(m) − y·λ3·ln p₁(m⊙x) + y·λ4·ln p₁((1−m)⊙x)`.
/// With y = 0 the classifier terms are skipped entirely, so the loss is
/// independent of the volume and the classifier.
pub fn saliency_loss<T: Scalar>(
    mask: &Array<T>,
    input: &Array<T>,
    label: usize,
    classifier: &mut Network<T>,
    w: &LossWeights,
) -> Result<(SaliencyLossParts, Array<T>)> {
    if mask.shape() != input.shape() {
        return Err(Error::InvalidArgument(format!(
            "mask {:?} and volume {:?} extents differ",
            mask.shape(),
            input.shape()
        )));
    }
    if label > 1 {
        return Err(Error::InvalidArgument(format!(
            "screening label must be 0 or 1, got {label}"
        )));
    }
    let (tv, tv_grad) = tv_term(mask)?;
    let (area, area_grad) = area_term(mask)?;
    let (l1, l2) = (T::of64(w.tv), T::of64(w.area));

    let mut grad = Array::zeros(mask.shape());
    for ((g, &t), &a) in
        grad.values_mut().iter_mut().zip(tv_grad.values()).zip(area_grad.values())
    {
        *g = l1 * t + l2 * a;
    }
    let mut parts = SaliencyLossParts {
        total: w.tv * tv.as64() + w.area * area.as64(),
        tv: tv.as64(),
        area: area.as64(),
        preserve: 0.0,
        destroy: 0.0,
    };
    if label == 1 {
        let masked: Vec<T> =
            mask.values().iter().zip(input.values()).map(|(&m, &x)| m * x).collect();
        let complement: Vec<T> = mask
            .values()
            .iter()
            .zip(input.values())
            .map(|(&m, &x)| (T::one() - m) * x)
            .collect();
        let (log_p, gp) =
            log_p1_and_input_grad(classifier, &Array::from_vec(mask.shape(), masked)?)?;
        let (log_d, gd) =
            log_p1_and_input_grad(classifier, &Array::from_vec(mask.shape(), complement)?)?;
        let (l3, l4) = (T::of64(w.preserve), T::of64(w.destroy));
        for (((g, &x), &p), &d) in grad
            .values_mut()
            .iter_mut()
            .zip(input.values())
            .zip(gp.values())
            .zip(gd.values())
        {
            // Both classifier terms differentiate through an elementwise
            // product with the volume; the complement flips the sign once
            // in the loss and once in d(1−m)/dm.
            *g = *g - l3 * x * p - l4 * x * d;
        }
        parts.preserve = log_p.as64();
        parts.destroy = log_d.as64();
        parts.total += -w.preserve * parts.preserve + w.destroy * parts.destroy;
    }
    if !parts.total.is_finite() {
        return Err(Error::NonFinite("saliency loss".into()));
    }
    Ok((parts, grad))
}

/// The mask generator: frozen classifier trunk plus trainable decoder.
pub struct SaliencyModel {
    net: Network<f32>,
    trunk: DenseNetConfig,
    dec: DecoderConfig,
}

impl SaliencyModel {
    /// Builds the model around a trained screening classifier: encoder
    /// weights and normalization statistics are copied from it, the
    /// decoder starts from the seeded random initialization.
    pub fn init(
        trunk: DenseNetConfig,
        dec: DecoderConfig,
        classifier: &Network<f32>,
        seed: u64,
    ) -> Result<Self> {
        let spec = saliency_model(&trunk, &dec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::init(spec, &mut rng)?;
        let copied = net.params.copy_values_from(&classifier.params)?;
        if copied == 0 {
            return Err(Error::InvalidArgument(
                "classifier shares no parameters with the saliency trunk".into(),
            ));
        }
        net.set_train(false);
        Ok(SaliencyModel { net, trunk, dec })
    }

    pub fn from_parts(trunk: DenseNetConfig, dec: DecoderConfig, net: Network<f32>) -> Self {
        SaliencyModel { net, trunk, dec }
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<f32> {
        &mut self.net
    }

    pub fn trunk_config(&self) -> &DenseNetConfig {
        &self.trunk
    }

    pub fn decoder_config(&self) -> &DecoderConfig {
        &self.dec
    }

    /// Saliency mask of one volume (evaluation mode), same extents.
    pub fn mask_volume(&self, volume: &Volume) -> Result<Volume> {
        let pass = self.net.evaluate(&volume.to_input())?;
        let data: Vec<f32> = pass.output().values().to_vec();
        Volume::from_data(volume.dims, data)
    }
}

/// Decoder optimization knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SaliencyTrainConfig {
    pub epochs: usize,
    /// Adam learning rate for the decoder parameters.
    pub lr: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for SaliencyTrainConfig {
    fn default() -> Self {
        SaliencyTrainConfig { epochs: 32, lr: 1e-3, weights: LossWeights::default(), seed: 0 }
    }
}

/// Mean loss parts of one training epoch.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SaliencyEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub tv: f64,
    pub area: f64,
    pub preserve: f64,
    pub destroy: f64,
}

/// Trains the decoder on `(volume, screening label)` pairs; the encoder
/// (every non-`dec.*` parameter) never changes.
pub fn train_saliency(
    model: &mut SaliencyModel,
    classifier: &mut Network<f32>,
    samples: &[(&Volume, usize)],
    cfg: &SaliencyTrainConfig,
) -> Result<Vec<SaliencyEpochLog>> {
    if samples.is_empty() {
        return Err(Error::Dataset("saliency training needs at least one sample".into()));
    }
    classifier.set_train(false);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut sums = [0.0f64; 5];
        for &i in &order {
            let (volume, label) = samples[i];
            let input: Array<f32> = volume.to_input();
            model.net.set_train(true);
            model.net.zero_grads();
            let mask = model.net.forward(&input)?.output().clone();
            let (parts, dmask) = saliency_loss(&mask, &input, label, classifier, &cfg.weights)?;
            model.net.backward(&dmask)?;
            adam.step(&mut model.net.params, cfg.lr, is_decoder_param)?;
            for (s, v) in sums
                .iter_mut()
                .zip([parts.total, parts.tv, parts.area, parts.preserve, parts.destroy])
            {
                *s += v;
            }
        }
        let n = samples.len() as f64;
        log.push(SaliencyEpochLog {
            epoch,
            loss: sums[0] / n,
            tv: sums[1] / n,
            area: sums[2] / n,
            preserve: sums[3] / n,
            destroy: sums[4] / n,
        });
        log::info!("saliency epoch {epoch}: loss {:.4} area {:.4}", sums[0] / n, sums[2] / n);
    }
    model.net.set_train(false);
    model.net.clear_pass();
    Ok(log)
}

/// A connected region of the binarized mask.
#[derive(Clone, Debug)]
pub struct MaskComponent {
    /// Linear voxel indices (ascending) of the component.
    pub voxels: Vec<usize>,
    /// Tight bounding volume.
    pub bv: BoundingVolume,
    /// Mean saliency over the component's voxels.
    pub mean: f64,
}

/// 6-connected components of `mask ≥ zeta` with at least `min_voxels`
/// voxels, ordered by their smallest voxel index.
pub fn mask_components(mask: &Volume, zeta: f64, min_voxels: usize) -> Vec<MaskComponent> {
    let [nx, ny, nz] = mask.dims;
    let n = nx * ny * nz;
    let inside = |i: usize| f64::from(mask.data[i]) >= zeta;

    let mut parent: Vec<u32> = (0..n as u32).collect();
    fn find(parent: &mut [u32], mut i: u32) -> u32 {
        while parent[i as usize] != i {
            parent[i as usize] = parent[parent[i as usize] as usize];
            i = parent[i as usize];
        }
        i
    }
    fn union(parent: &mut [u32], a: usize, b: usize) {
        let (ra, rb) = (find(parent, a as u32), find(parent, b as u32));
        if ra != rb {
            parent[ra.max(rb) as usize] = ra.min(rb);
        }
    }
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (z * ny + y) * nx + x;
                if !inside(i) {
                    continue;
                }
                if x > 0 && inside(i - 1) {
                    union(&mut parent, i, i - 1);
                }
                if y > 0 && inside(i - nx) {
                    union(&mut parent, i, i - nx);
                }
                if z > 0 && inside(i - nx * ny) {
                    union(&mut parent, i, i - nx * ny);
                }
            }
        }
    }

    let mut by_root: std::collections::BTreeMap<u32, Vec<usize>> = std::collections::BTreeMap::new();
    for i in 0..n {
        if inside(i) {
            by_root.entry(find(&mut parent, i as u32)).or_default().push(i);
        }
    }
    by_root
        .into_values()
        .filter(|voxels| voxels.len() >= min_voxels.max(1))
        .map(|voxels| {
            let mut lo = [i64::MAX; 3];
            let mut hi = [i64::MIN; 3];
            let mut sum = 0.0;
            for &i in &voxels {
                let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
                for (a, v) in [x, y, z].into_iter().enumerate() {
                    lo[a] = lo[a].min(v as i64);
                    hi[a] = hi[a].max(v as i64 + 1);
                }
                sum += f64::from(mask.data[i]);
            }
            MaskComponent {
                bv: BoundingVolume::new(lo, hi).expect("component voxels span a box"),
                mean: sum / voxels.len() as f64,
                voxels,
            }
        })
        .collect()
}

/// A localized malignant region: the component's tight bounding volume
/// scored by its mean saliency.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SaliencyDetection {
    pub bv: BoundingVolume,
    pub score: f64,
    pub voxels: usize,
}

/// Turns a saliency mask into detections, gated by the diagnosis score:
/// volumes scoring at or below `tau` produce nothing.
pub fn localize_mask(
    mask: &Volume,
    diagnosis: f64,
    tau: f64,
    zeta: f64,
    min_voxels: usize,
) -> Vec<SaliencyDetection> {
    if diagnosis <= tau {
        return Vec::new();
    }
    mask_components(mask, zeta, min_voxels)
        .into_iter()
        .map(|c| SaliencyDetection { bv: c.bv, score: c.mean, voxels: c.voxels.len() })
        .collect()
}

/// Full post-hoc localization for one volume: diagnose, gate at the EER
/// threshold, decode the mask, threshold at ζ and extract components.
pub fn localize(
    volume: &Volume,
    classifier: &Network<f32>,
    model: &SaliencyModel,
    tau: f64,
    zeta: f64,
    min_voxels: usize,
) -> Result<Vec<SaliencyDetection>> {
    let score = diagnose(classifier, volume)?;
    if score <= tau {
        return Ok(Vec::new());
    }
    let mask = model.mask_volume(volume)?;
    Ok(localize_mask(&mask, score, tau, zeta, min_voxels))
}

/// Writes a mask as little-endian `u32` extents (x, y, z) followed by
/// `f32` voxels.
pub fn write_mask_file(path: &Path, mask: &Volume) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in mask.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in &mask.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mask_file(path: &Path) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);
    let mut b4 = [0u8; 4];
    let mut dims = [0usize; 3];
    for d in &mut dims {
        r.read_exact(&mut b4)?;
        *d = u32::from_le_bytes(b4) as usize;
    }
    let n = dims[0] * dims[1] * dims[2];
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b4)?;
        data.push(f32::from_le_bytes(b4));
    }
    Volume::from_data(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::SpecBuilder;

    fn tiny_classifier(input: [usize; 3], seed: u64) -> Network<f64> {
        let (mut b, x) = SpecBuilder::new(vec![1, input[2], input[1], input[0]]);
        let c = b.conv3x3(x, "stem", 2, [1, 1, 1]);
        let r = b.relu(c);
        let g = b.global_avg_pool(r);
        let out = b.linear(g, "fc", 2);
        let spec = b.finish(out);
        let mut net = Network::init(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        net.set_train(false);
        net
    }

    fn random_mask_array(shape: &[usize], seed: u64) -> Array<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_vec(shape, (0..shape.iter().product()).map(|_| rng.gen_range(0.05..0.95)).collect())
            .unwrap()
    }

    #[test]
    fn constant_masks_have_zero_tv_and_their_value_as_area() {
        let mask = Array::<f64>::filled(&[1, 1, 3, 4, 5], 0.37);
        let (tv, _) = tv_term(&mask).unwrap();
        let (area, _) = area_term(&mask).unwrap();
        assert_eq!(tv, 0.0);
        assert!((area - 0.37).abs() < 1e-12);

        let ones = Array::<f64>::filled(&[1, 1, 2, 2, 2], 1.0);
        assert!((area_term(&ones).unwrap().0 - 1.0).abs() < 1e-15);

        let zeros = Array::<f64>::zeros(&[1, 1, 2, 3, 4]);
        assert_eq!(tv_term(&zeros).unwrap().0, 0.0);
        assert_eq!(area_term(&zeros).unwrap().0, 0.0);
    }

    #[test]
    fn negative_labels_ignore_the_volume_and_the_classifier() {
        let shape = [1usize, 1, 2, 4, 4];
        let mut classifier = tiny_classifier([4, 4, 2], 1);
        let mask = random_mask_array(&shape, 2);
        let x1 = random_mask_array(&shape, 3);
        let mut x2 = x1.clone();
        x2.values_mut().iter_mut().for_each(|v| *v += 0.5);

        let w = LossWeights::default();
        let (p1, g1) = saliency_loss(&mask, &x1, 0, &mut classifier, &w).unwrap();
        let (p2, g2) = saliency_loss(&mask, &x2, 0, &mut classifier, &w).unwrap();
        assert_eq!(p1.total, p2.total);
        assert_eq!(g1.values(), g2.values());
        assert_eq!(p1.preserve, 0.0);
        assert_eq!(p1.destroy, 0.0);
        assert!((p1.total - (w.tv * p1.tv + w.area * p1.area)).abs() < 1e-12);
    }

    #[test]
    fn mask_gradient_matches_finite_differences() {
        let shape = [1usize, 1, 2, 3, 3];
        let mut classifier = tiny_classifier([3, 3, 2], 4);
        let mask = random_mask_array(&shape, 5);
        let x = random_mask_array(&shape, 6);
        let w = LossWeights::default();
        let (_, grad) = saliency_loss(&mask, &x, 1, &mut classifier, &w).unwrap();

        let h = 1e-6;
        for i in 0..mask.numel() {
            let mut plus = mask.clone();
            plus.values_mut()[i] += h;
            let mut minus = mask.clone();
            minus.values_mut()[i] -= h;
            let (lp, _) = saliency_loss(&plus, &x, 1, &mut classifier, &w).unwrap();
            let (lm, _) = saliency_loss(&minus, &x, 1, &mut classifier, &w).unwrap();
            let fd = (lp.total - lm.total) / (2.0 * h);
            let denom = fd.abs().max(grad.values()[i].abs()).max(1e-8);
            assert!(
                (fd - grad.values()[i]).abs() / denom < 1e-3,
                "voxel {i}: analytic {} vs finite difference {fd}",
                grad.values()[i]
            );
        }
    }

    #[test]
    fn decoder_gradients_match_finite_differences_of_the_pipeline() {
        // f64 copy of the full decoder pipeline on a tiny trunk.
        let trunk = DenseNetConfig {
            input: [8, 8, 4],
            stem_channels: 2,
            stem_stride: 2,
            growth: 1,
            blocks: 2,
            layers_per_block: 1,
            compression: 0.5,
            transition_strides: vec![2],
            classes: 2,
        };
        let dec = DecoderConfig { channels: vec![2, 2] };
        let spec = saliency_model(&trunk, &dec);
        let mut net =
            Network::<f64>::init(spec, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let mut classifier = tiny_classifier([8, 8, 4], 8);
        let x = random_mask_array(&[1, 1, 4, 8, 8], 9);
        let w = LossWeights::default();

        let dec_names: Vec<String> = net
            .params
            .trainable_names()
            .into_iter()
            .filter(|n| is_decoder_param(n))
            .collect();
        assert!(!dec_names.is_empty());

        net.set_train(true);
        net.zero_grads();
        let mask = net.forward(&x).unwrap().output().clone();
        let (_, dmask) = saliency_loss(&mask, &x, 1, &mut classifier, &w).unwrap();
        net.backward(&dmask).unwrap();
        let analytic = net.params.flatten_grads(&dec_names).unwrap();

        let theta = net.params.flatten(&dec_names).unwrap();
        let losses = |theta: &[f64], classifier: &mut Network<f64>| -> f64 {
            let mut probe = Network::from_parts(net.spec.clone(), net.params.clone());
            probe.params.assign_flat(&dec_names, theta).unwrap();
            probe.set_train(true);
            let mask = probe.forward(&x).unwrap().output().clone();
            let (parts, _) = saliency_loss(&mask, &x, 1, classifier, &w).unwrap();
            parts.total
        };
        let h = 1e-6;
        // Every ~7th coordinate keeps the check broad but quick.
        for i in (0..theta.len()).step_by(7) {
            let mut plus = theta.clone();
            plus[i] += h;
            let mut minus = theta.clone();
            minus[i] -= h;
            let fd = (losses(&plus, &mut classifier) - losses(&minus, &mut classifier)) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(
                (fd - analytic[i]).abs() / denom < 1e-3,
                "decoder coordinate {i}: analytic {} vs finite difference {fd}",
                analytic[i]
            );
        }
    }

    fn volume_from(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Volume {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume::from_data(dims, data).unwrap()
    }

    #[test]
    fn a_single_blob_yields_exactly_its_bounding_box() {
        let blob = |x: usize, y: usize, z: usize| {
            ((2..5).contains(&x) && (3..6).contains(&y) && (1..3).contains(&z)) as u8 as f32 * 0.9
        };
        let mask = volume_from([8, 8, 4], blob);
        let comps = mask_components(&mask, 0.8, 8);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].bv.min, [2, 3, 1]);
        assert_eq!(comps[0].bv.max, [5, 6, 3]);
        assert_eq!(comps[0].voxels.len(), 3 * 3 * 2);
        assert!((comps[0].mean - 0.9).abs() < 1e-6);
    }

    #[test]
    fn small_components_are_discarded() {
        let mask = volume_from([6, 6, 3], |x, y, z| {
            (x < 2 && y < 2 && z == 0) as u8 as f32 // 4 voxels
        });
        assert!(mask_components(&mask, 0.5, 8).is_empty());
        assert_eq!(mask_components(&mask, 0.5, 4).len(), 1);
    }

    /// Brute-force flood fill used as the oracle for the union-find
    /// implementation.
    fn flood_fill_components(mask: &Volume, zeta: f64) -> Vec<Vec<usize>> {
        let [nx, ny, nz] = mask.dims;
        let n = nx * ny * nz;
        let inside: Vec<bool> =
            (0..n).map(|i| f64::from(mask.data[i]) >= zeta).collect();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for start in 0..n {
            if !inside[start] || seen[start] {
                continue;
            }
            let mut stack = vec![start];
            let mut comp = Vec::new();
            seen[start] = true;
            while let Some(i) = stack.pop() {
                comp.push(i);
                let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
                let mut push = |j: usize| {
                    if inside[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < nx {
                    push(i + 1);
                }
                if y > 0 {
                    push(i - nx);
                }
                if y + 1 < ny {
                    push(i + nx);
                }
                if z > 0 {
                    push(i - nx * ny);
                }
                if z + 1 < nz {
                    push(i + nx * ny);
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out.sort();
        out
    }

    #[test]
    fn components_match_a_flood_fill_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..20 {
            let mask = volume_from([9, 7, 5], |_, _, _| rng.gen_range(0.0..1.0));
            let got: Vec<Vec<usize>> =
                mask_components(&mask, 0.5, 1).into_iter().map(|c| c.voxels).collect();
            let mut got_sorted = got.clone();
            got_sorted.sort();
            assert_eq!(got_sorted, flood_fill_components(&mask, 0.5));
        }
    }

    #[test]
    fn raising_zeta_never_adds_voxels() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mask = volume_from([10, 8, 6], |_, _, _| rng.gen_range(0.0..1.0));
        let count = |zeta: f64| -> usize {
            mask_components(&mask, zeta, 1).iter().map(|c| c.voxels.len()).sum()
        };
        let mut prev = count(0.1);
        for z in [0.3, 0.5, 0.7, 0.9] {
            let cur = count(z);
            assert!(cur <= prev, "zeta {z} grew the mask");
            prev = cur;
        }
    }

    #[test]
    fn the_gate_silences_non_positive_diagnoses() {
        let mask = volume_from([8, 8, 4], |x, y, z| (x < 4 && y < 4 && z < 2) as u8 as f32);
        assert!(localize_mask(&mask, 0.4, 0.5, 0.8, 8).is_empty());
        assert!(localize_mask(&mask, 0.5, 0.5, 0.8, 8).is_empty(), "score equal to tau is negative");
        assert_eq!(localize_mask(&mask, 0.6, 0.5, 0.8, 8).len(), 1);
    }

    #[test]
    fn mask_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mask = volume_from([5, 4, 3], |_, _, _| rng.gen_range(0.0..1.0));
        write_mask_file(&path, &mask).unwrap();
        let back = read_mask_file(&path).unwrap();
        assert_eq!(back.dims, mask.dims);
        assert_eq!(back.data, mask.data);
    }

    #[test]
    fn training_moves_the_decoder_but_never_the_encoder() {
        let trunk = DenseNetConfig {
            input: [8, 8, 4],
            stem_channels: 2,
            stem_stride: 2,
            growth: 1,
            blocks: 2,
            layers_per_block: 1,
            compression: 0.5,
            transition_strides: vec![2],
            classes: 2,
        };
        let dec = DecoderConfig { channels: vec![2, 2] };

        // An f32 classifier sharing the trunk parameter names.
        let cls_spec = crate::nn::presets::densenet_classifier(&trunk);
        let mut classifier =
            Network::<f32>::init(cls_spec, &mut ChaCha8Rng::seed_from_u64(30)).unwrap();
        classifier.set_train(false);

        let mut model = SaliencyModel::init(trunk.clone(), dec, &classifier, 31).unwrap();
        let enc_names: Vec<String> = model
            .network()
            .params
            .names()
            .filter(|n| !is_decoder_param(n))
            .map(str::to_string)
            .collect();
        let dec_names: Vec<String> = model
            .network()
            .params
            .trainable_names()
            .into_iter()
            .filter(|n| is_decoder_param(n))
            .collect();
        let enc_before = model.network().params.flatten(&enc_names).unwrap();
        let dec_before = model.network().params.flatten(&dec_names).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let vols: Vec<Volume> = (0..2)
            .map(|_| volume_from([8, 8, 4], |_, _, _| rng.gen_range(0.0..1.0)))
            .collect();
        let samples: Vec<(&Volume, usize)> = vec![(&vols[0], 1), (&vols[1], 0)];
        let cfg = SaliencyTrainConfig { epochs: 2, lr: 1e-2, ..SaliencyTrainConfig::default() };
        train_saliency(&mut model, &mut classifier, &samples, &cfg).unwrap();

        assert_eq!(
            model.network().params.flatten(&enc_names).unwrap(),
            enc_before,
            "encoder parameters moved"
        );
        assert_ne!(
            model.network().params.flatten(&dec_names).unwrap(),
            dec_before,
            "decoder parameters did not move"
        );
        let mask = model.mask_volume(&vols[0]).unwrap();
        assert!(mask.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
