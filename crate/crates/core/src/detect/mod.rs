//! The lesion-search decision process: bounding-volume state, nine
//! actions (axis translations, symmetric scaling, trigger) and
//! Dice-driven rewards.

pub mod encoder;

pub use encoder::{train_patch_encoder, EncoderTrainConfig, PatchEncoder};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Volume, VoxelMask};

/// Axis-aligned box in voxel units with half-open corners: `min` is the
/// top-left-front corner, `max` the lower-right-back corner (exclusive).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingVolume {
    pub min: [i64; 3],
    pub max: [i64; 3],
}

impl BoundingVolume {
    pub fn new(min: [i64; 3], max: [i64; 3]) -> Result<Self> {
        if (0..3).any(|a| min[a] >= max[a]) {
            return Err(Error::DegenerateBoundingVolume(format!(
                "corners {min:?}..{max:?} enclose no voxels"
            )));
        }
        Ok(BoundingVolume { min, max })
    }

    pub fn extent(&self, axis: usize) -> i64 {
        self.max[axis] - self.min[axis]
    }

    pub fn voxel_count(&self) -> i64 {
        (0..3).map(|a| self.extent(a)).product()
    }

    /// The six coordinates in manifest order
    /// `[b_x, b_y, b_z, b_w, b_h, b_d]`.
    pub fn coords(&self) -> [i64; 6] {
        [self.min[0], self.min[1], self.min[2], self.max[0], self.max[1], self.max[2]]
    }

    pub fn from_coords(c: [i64; 6]) -> Result<Self> {
        BoundingVolume::new([c[0], c[1], c[2]], [c[3], c[4], c[5]])
    }

    /// Clamps the box into the lattice, preserving the extent when it
    /// fits and enforcing the minimum extent otherwise.
    pub fn clamp_to(&self, dims: [usize; 3], min_extent: i64) -> BoundingVolume {
        let mut min = self.min;
        let mut max = self.max;
        for a in 0..3 {
            let dim = dims[a] as i64;
            let want = (max[a] - min[a]).clamp(min_extent.min(dim), dim);
            // Slide the interval inside [0, dim] without changing its
            // length, then re-center if the length had to shrink.
            if min[a] < 0 {
                max[a] -= min[a];
                min[a] = 0;
            }
            if max[a] > dim {
                min[a] -= max[a] - dim;
                max[a] = dim;
            }
            min[a] = min[a].max(0);
            let have = max[a] - min[a];
            if have != want {
                let center = min[a] + have / 2;
                min[a] = (center - want / 2).clamp(0, dim - want);
                max[a] = min[a] + want;
            }
        }
        BoundingVolume { min, max }
    }
}

/// The nine search actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    TranslateXPos,
    TranslateXNeg,
    TranslateYPos,
    TranslateYNeg,
    TranslateZPos,
    TranslateZNeg,
    ScaleUp,
    ScaleDown,
    Trigger,
}

impl Action {
    pub const ALL: [Action; 9] = [
        Action::TranslateXPos,
        Action::TranslateXNeg,
        Action::TranslateYPos,
        Action::TranslateYNeg,
        Action::TranslateZPos,
        Action::TranslateZNeg,
        Action::ScaleUp,
        Action::ScaleDown,
        Action::Trigger,
    ];

    pub fn index(self) -> usize {
        Action::ALL.iter().position(|&a| a == self).expect("action is listed")
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("action index {i} out of range")))
    }

    pub fn is_trigger(self) -> bool {
        self == Action::Trigger
    }
}

/// Applies a non-trigger action: translations move one axis by a third
/// of its extent, scaling grows or shrinks every axis by a sixth of its
/// extent per side, and the result is clamped to the lattice and the
/// minimum extent. The trigger leaves the box unchanged.
pub fn apply_action(
    b: BoundingVolume,
    a: Action,
    dims: [usize; 3],
    min_extent: i64,
) -> BoundingVolume {
    let mut min = b.min;
    let mut max = b.max;
    // A zero delta would deadlock small boxes, so moves are at least one
    // voxel (only relevant below extent 3 or 6 respectively).
    let third = |axis: usize| (b.extent(axis) / 3).max(1);
    let sixth = |axis: usize| (b.extent(axis) / 6).max(1);
    match a {
        Action::TranslateXPos => {
            min[0] += third(0);
            max[0] += third(0);
        }
        Action::TranslateXNeg => {
            min[0] -= third(0);
            max[0] -= third(0);
        }
        Action::TranslateYPos => {
            min[1] += third(1);
            max[1] += third(1);
        }
        Action::TranslateYNeg => {
            min[1] -= third(1);
            max[1] -= third(1);
        }
        Action::TranslateZPos => {
            min[2] += third(2);
            max[2] += third(2);
        }
        Action::TranslateZNeg => {
            min[2] -= third(2);
            max[2] -= third(2);
        }
        Action::ScaleUp => {
            for axis in 0..3 {
                min[axis] -= sixth(axis);
                max[axis] += sixth(axis);
            }
        }
        Action::ScaleDown => {
            for axis in 0..3 {
                min[axis] += sixth(axis);
                max[axis] -= sixth(axis);
            }
        }
        Action::Trigger => return b,
    }
    BoundingVolume { min, max }.clamp_to(dims, min_extent)
}

/// Dice of two boxes: `2|A∩B| / (|A| + |B|)`.
pub fn dice_boxes(a: &BoundingVolume, b: &BoundingVolume) -> f64 {
    let mut inter = 1i64;
    for axis in 0..3 {
        let lo = a.min[axis].max(b.min[axis]);
        let hi = a.max[axis].min(b.max[axis]);
        inter *= (hi - lo).max(0);
        if inter == 0 {
            break;
        }
    }
    let total = a.voxel_count() + b.voxel_count();
    if total == 0 {
        log::warn!("dice of two empty regions; defining it as 0");
        return 0.0;
    }
    2.0 * inter as f64 / total as f64
}

/// Dice of a box (rasterized to voxels) against a voxel mask.
pub fn dice_box_mask(b: &BoundingVolume, mask: &VoxelMask) -> f64 {
    let inter = mask.count_in_box(b.min, b.max) as i64;
    let total = b.voxel_count() + mask.count() as i64;
    if total == 0 {
        log::warn!("dice of two empty regions; defining it as 0");
        return 0.0;
    }
    2.0 * inter as f64 / total as f64
}

/// Best Dice over the given lesions and the index achieving it; an empty
/// lesion list scores 0.
pub fn best_lesion_dice(b: &BoundingVolume, lesions: &[&VoxelMask]) -> (f64, Option<usize>) {
    let mut best = (0.0, None);
    for (i, m) in lesions.iter().enumerate() {
        let d = dice_box_mask(b, m);
        if best.1.is_none() || d > best.0 {
            best = (d, Some(i));
        }
    }
    best
}

/// Reward constants.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Trigger reward magnitude η.
    pub eta: f64,
    /// Trigger acceptance threshold τ_w on the Dice coefficient.
    pub tau_w: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { eta: 10.0, tau_w: 0.2 }
    }
}

/// Reward of one transition, from the Dice before and after. Non-trigger
/// actions earn the sign of the Dice change; the trigger earns ±η
/// depending on whether the final Dice reaches τ_w.
pub fn step_reward(prev_dice: f64, next_dice: f64, trigger: bool, cfg: &RewardConfig) -> f64 {
    if trigger {
        if next_dice >= cfg.tau_w {
            cfg.eta
        } else {
            -cfg.eta
        }
    } else {
        match next_dice.partial_cmp(&prev_dice).expect("dice values are finite") {
            std::cmp::Ordering::Greater => 1.0,
            std::cmp::Ordering::Less => -1.0,
            std::cmp::Ordering::Equal => 0.0,
        }
    }
}

/// Environment limits.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EnvConfig {
    pub reward: RewardConfig,
    /// Minimum box extent per axis, voxels.
    pub min_extent: i64,
    /// Episode step cap.
    pub max_steps: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { reward: RewardConfig::default(), min_extent: 4, max_steps: 20 }
    }
}

/// Outcome of one environment step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub triggered: bool,
}

/// One search episode over one volume. The Dice target is always the
/// ground-truth lesion currently agreeing best with the box, which makes
/// the reward well defined on multi-lesion (and lesion-free) volumes.
pub struct DetectEnv<'a> {
    volume: &'a Volume,
    lesions: Vec<&'a VoxelMask>,
    cfg: EnvConfig,
    bv: BoundingVolume,
    steps: usize,
    done: bool,
}

impl<'a> DetectEnv<'a> {
    pub fn new(
        volume: &'a Volume,
        lesions: Vec<&'a VoxelMask>,
        init: BoundingVolume,
        cfg: EnvConfig,
    ) -> Self {
        let bv = init.clamp_to(volume.dims, cfg.min_extent);
        DetectEnv { volume, lesions, cfg, bv, steps: 0, done: false }
    }

    pub fn volume(&self) -> &Volume {
        self.volume
    }

    pub fn bv(&self) -> BoundingVolume {
        self.bv
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    /// Dice of the current box against its best-matching lesion.
    pub fn current_dice(&self) -> f64 {
        best_lesion_dice(&self.bv, &self.lesions).0
    }

    /// Reward each action would earn from the current state, without
    /// moving. Used by guided exploration and tested against `step`.
    pub fn peek_rewards(&self) -> [f64; 9] {
        let here = self.current_dice();
        let mut out = [0.0; 9];
        for (i, &a) in Action::ALL.iter().enumerate() {
            out[i] = if a.is_trigger() {
                step_reward(here, here, true, &self.cfg.reward)
            } else {
                let next = apply_action(self.bv, a, self.volume.dims, self.cfg.min_extent);
                let d = best_lesion_dice(&next, &self.lesions).0;
                step_reward(here, d, false, &self.cfg.reward)
            };
        }
        out
    }

    /// Applies an action. The episode ends on the trigger or when the
    /// step cap is reached; both count as terminal transitions.
    pub fn step(&mut self, a: Action) -> StepOutcome {
        assert!(!self.done, "episode already finished");
        let before = self.current_dice();
        self.steps += 1;
        let (reward, triggered) = if a.is_trigger() {
            (step_reward(before, before, true, &self.cfg.reward), true)
        } else {
            self.bv = apply_action(self.bv, a, self.volume.dims, self.cfg.min_extent);
            let after = self.current_dice();
            (step_reward(before, after, false, &self.cfg.reward), false)
        };
        self.done = triggered || self.steps >= self.cfg.max_steps;
        StepOutcome { reward, done: self.done, triggered }
    }
}

/// The 13 inference starting boxes: one centered box covering 75% of
/// each axis, eight half-extent boxes in the corners, and four
/// half-extent boxes at the xy-corners centered along z.
pub fn inference_inits(dims: [usize; 3], min_extent: i64) -> Vec<BoundingVolume> {
    let d = [dims[0] as i64, dims[1] as i64, dims[2] as i64];
    let mut out = Vec::with_capacity(13);

    let mut center_min = [0i64; 3];
    let mut center_max = [0i64; 3];
    for a in 0..3 {
        let ext = (d[a] * 3 / 4).max(min_extent);
        center_min[a] = (d[a] - ext) / 2;
        center_max[a] = center_min[a] + ext;
    }
    out.push(BoundingVolume { min: center_min, max: center_max }.clamp_to(dims, min_extent));

    let half = [
        (d[0] / 2).max(min_extent),
        (d[1] / 2).max(min_extent),
        (d[2] / 2).max(min_extent),
    ];
    for cz in 0..2i64 {
        for cy in 0..2i64 {
            for cx in 0..2i64 {
                let min = [
                    cx * (d[0] - half[0]),
                    cy * (d[1] - half[1]),
                    cz * (d[2] - half[2]),
                ];
                let max = [min[0] + half[0], min[1] + half[1], min[2] + half[2]];
                out.push(BoundingVolume { min, max }.clamp_to(dims, min_extent));
            }
        }
    }

    let zc = (d[2] - half[2]) / 2;
    for cy in 0..2i64 {
        for cx in 0..2i64 {
            let min = [cx * (d[0] - half[0]), cy * (d[1] - half[1]), zc];
            let max = [min[0] + half[0], min[1] + half[1], zc + half[2]];
            out.push(BoundingVolume { min, max }.clamp_to(dims, min_extent));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball_mask(dims: [usize; 3], center: [f64; 3], r: f64) -> VoxelMask {
        let mut m = VoxelMask::empty(dims);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let d2 = (x as f64 + 0.5 - center[0]).powi(2)
                        + (y as f64 + 0.5 - center[1]).powi(2)
                        + (z as f64 + 0.5 - center[2]).powi(2);
                    if d2.sqrt() <= r {
                        m.set(x, y, z, true);
                    }
                }
            }
        }
        m
    }

    #[test]
    fn dice_identical_and_disjoint() {
        let a = BoundingVolume::new([0, 0, 0], [4, 4, 4]).unwrap();
        let b = BoundingVolume::new([8, 8, 8], [12, 12, 12]).unwrap();
        assert_eq!(dice_boxes(&a, &a), 1.0);
        assert_eq!(dice_boxes(&a, &b), 0.0);
        assert_eq!(dice_boxes(&a, &b), dice_boxes(&b, &a));
    }

    #[test]
    fn dice_half_shifted_box() {
        let a = BoundingVolume::new([0, 0, 0], [10, 10, 10]).unwrap();
        let b = BoundingVolume::new([5, 0, 0], [15, 10, 10]).unwrap();
        assert!((dice_boxes(&a, &b) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn translate_moves_one_third() {
        let b = BoundingVolume::new([0, 0, 0], [30, 30, 30]).unwrap();
        let t = apply_action(b, Action::TranslateXPos, [64, 64, 64], 4);
        assert_eq!(t, BoundingVolume::new([10, 0, 0], [40, 30, 30]).unwrap());
    }

    #[test]
    fn scale_down_shrinks_one_sixth_per_side() {
        let b = BoundingVolume::new([10, 10, 10], [40, 40, 40]).unwrap();
        let t = apply_action(b, Action::ScaleDown, [64, 64, 64], 4);
        assert_eq!(t, BoundingVolume::new([15, 15, 15], [35, 35, 35]).unwrap());
    }

    #[test]
    fn translation_clamps_at_the_lattice_edge() {
        let b = BoundingVolume::new([20, 0, 0], [30, 10, 10]).unwrap();
        let t = apply_action(b, Action::TranslateXPos, [32, 32, 32], 4);
        assert_eq!(t.max[0], 32);
        assert_eq!(t.extent(0), 10);
    }

    #[test]
    fn translate_then_inverse_returns_when_unclamped() {
        let b = BoundingVolume::new([10, 10, 10], [22, 22, 22]).unwrap();
        let dims = [64, 64, 64];
        let fwd = apply_action(b, Action::TranslateYPos, dims, 4);
        let back = apply_action(fwd, Action::TranslateYNeg, dims, 4);
        assert_eq!(back, b);
    }

    #[test]
    fn min_extent_is_enforced() {
        let b = BoundingVolume::new([10, 10, 10], [15, 15, 15]).unwrap();
        let mut cur = b;
        for _ in 0..5 {
            cur = apply_action(cur, Action::ScaleDown, [32, 32, 32], 4);
        }
        for a in 0..3 {
            assert_eq!(cur.extent(a), 4);
        }
    }

    #[test]
    fn reward_signs_and_trigger_branches() {
        let cfg = RewardConfig::default();
        assert_eq!(step_reward(0.1, 0.3, false, &cfg), 1.0);
        assert_eq!(step_reward(0.3, 0.1, false, &cfg), -1.0);
        assert_eq!(step_reward(0.3, 0.3, false, &cfg), 0.0);
        assert_eq!(step_reward(0.0, 0.25, true, &cfg), 10.0);
        assert_eq!(step_reward(0.0, 0.1, true, &cfg), -10.0);
        // The threshold itself is accepted.
        assert_eq!(step_reward(0.0, 0.2, true, &cfg), 10.0);
        assert_eq!(step_reward(0.0, 0.19999, true, &cfg), -10.0);
    }

    #[test]
    fn growing_inside_a_lesion_raises_then_lowers_dice() {
        let dims = [32, 32, 32];
        let mask = ball_mask(dims, [16.0, 16.0, 16.0], 10.0);
        let volume = Volume::zeros(dims);
        let init = BoundingVolume::new([14, 14, 14], [18, 18, 18]).unwrap();
        let mut env = DetectEnv::new(&volume, vec![&mask], init, EnvConfig::default());
        let mut rewards = Vec::new();
        for _ in 0..8 {
            rewards.push(env.step(Action::ScaleUp).reward);
        }
        assert_eq!(rewards[0], 1.0, "growing a tiny inner box gains Dice");
        assert!(rewards.contains(&-1.0), "overgrowing eventually loses Dice");
        let first_neg = rewards.iter().position(|&r| r < 0.0).unwrap();
        assert!(rewards[..first_neg].iter().all(|&r| r > 0.0));
    }

    #[test]
    fn peek_rewards_match_step() {
        let dims = [32, 32, 16];
        let mask = ball_mask(dims, [20.0, 12.0, 8.0], 5.0);
        let volume = Volume::zeros(dims);
        let init = BoundingVolume::new([4, 4, 4], [16, 16, 12]).unwrap();
        let cfg = EnvConfig::default();
        let env = DetectEnv::new(&volume, vec![&mask], init, cfg);
        let peek = env.peek_rewards();
        for (i, &a) in Action::ALL.iter().enumerate() {
            let mut fresh = DetectEnv::new(&volume, vec![&mask], init, cfg);
            assert_eq!(peek[i], fresh.step(a).reward, "action {a:?}");
        }
    }

    #[test]
    fn episode_terminates_on_cap_or_trigger() {
        let dims = [16, 16, 16];
        let volume = Volume::zeros(dims);
        let init = BoundingVolume::new([2, 2, 2], [10, 10, 10]).unwrap();
        let cfg = EnvConfig { max_steps: 3, ..EnvConfig::default() };
        let mut env = DetectEnv::new(&volume, vec![], init, cfg);
        assert!(!env.step(Action::TranslateXPos).done);
        assert!(!env.step(Action::TranslateXNeg).done);
        let out = env.step(Action::TranslateXPos);
        assert!(out.done && !out.triggered);

        let mut env = DetectEnv::new(&volume, vec![], init, cfg);
        let out = env.step(Action::Trigger);
        assert!(out.done && out.triggered);
        assert_eq!(out.reward, -10.0, "no lesion means the trigger is wrong");
    }

    #[test]
    fn thirteen_inits_cover_center_corners_and_band() {
        let dims = [32, 32, 16];
        let inits = inference_inits(dims, 4);
        assert_eq!(inits.len(), 13);
        assert_eq!(inits[0], BoundingVolume::new([4, 4, 2], [28, 28, 14]).unwrap());
        assert!(inits.iter().skip(1).all(|b| (0..3).all(|a| b.extent(a) == dims[a] as i64 / 2)));
        // All eight corners are hit.
        let corners: Vec<[i64; 3]> = inits[1..9].iter().map(|b| b.min).collect();
        assert!(corners.contains(&[0, 0, 0]));
        assert!(corners.contains(&[16, 16, 8]));
        // The in-between four sit centered along z.
        assert!(inits[9..].iter().all(|b| b.min[2] == 4 && b.max[2] == 12));
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BoundingVolume::new([4, 4, 4], [4, 8, 8]).is_err());
        assert!(BoundingVolume::from_coords([0, 0, 0, 4, 4, 4]).is_ok());
    }
}
