//! Voxel volumes and binary voxel masks.
//!
//! Volumes are stored as `f32` row-major grids (x fastest) regardless of
//! the scalar type used by the networks; network input construction casts
//! at the boundary.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Array;

/// Dense scalar field over an `nx x ny x nz` voxel lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume { dims, data: vec![0.0; dims[0] * dims[1] * dims[2]] }
    }

    pub fn from_data(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::InvalidArgument(format!(
                "volume dims {dims:?} need {} voxels, got {}",
                dims[0] * dims[1] * dims[2],
                data.len()
            )));
        }
        Ok(Volume { dims, data })
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.idx(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.idx(x, y, z);
        self.data[i] = v;
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }

    /// Value at integer voxel indices clamped to the lattice.
    #[inline]
    fn get_clamped(&self, x: i64, y: i64, z: i64) -> f32 {
        let cx = x.clamp(0, self.dims[0] as i64 - 1) as usize;
        let cy = y.clamp(0, self.dims[1] as i64 - 1) as usize;
        let cz = z.clamp(0, self.dims[2] as i64 - 1) as usize;
        self.get(cx, cy, cz)
    }

    /// Trilinear sample at a continuous point in voxel coordinates
    /// (voxel `i` covers `[i, i+1)`, its center sits at `i + 0.5`).
    pub fn sample(&self, p: [f64; 3]) -> f32 {
        let mut w = [0.0f64; 3];
        let mut base = [0i64; 3];
        for a in 0..3 {
            let s = p[a] - 0.5;
            let f = s.floor();
            base[a] = f as i64;
            w[a] = s - f;
        }
        let mut acc = 0.0f64;
        for dz in 0..2i64 {
            for dy in 0..2i64 {
                for dx in 0..2i64 {
                    let weight = (if dx == 0 { 1.0 - w[0] } else { w[0] })
                        * (if dy == 0 { 1.0 - w[1] } else { w[1] })
                        * (if dz == 0 { 1.0 - w[2] } else { w[2] });
                    if weight > 0.0 {
                        acc += weight
                            * self.get_clamped(base[0] + dx, base[1] + dy, base[2] + dz) as f64;
                    }
                }
            }
        }
        acc as f32
    }

    /// Resamples the content of the half-open voxel box `[min, max)` onto a
    /// grid of `out` voxels with trilinear interpolation.
    pub fn resample_box(&self, min: [i64; 3], max: [i64; 3], out: [usize; 3]) -> Result<Volume> {
        for a in 0..3 {
            if min[a] >= max[a] {
                return Err(Error::DegenerateBoundingVolume(format!(
                    "empty box {min:?}..{max:?}"
                )));
            }
            if out[a] == 0 {
                return Err(Error::InvalidArgument("zero output extent".into()));
            }
        }
        let mut v = Volume::zeros(out);
        for z in 0..out[2] {
            for y in 0..out[1] {
                for x in 0..out[0] {
                    let o = [x, y, z];
                    let mut p = [0.0f64; 3];
                    for a in 0..3 {
                        let span = (max[a] - min[a]) as f64;
                        p[a] = min[a] as f64 + (o[a] as f64 + 0.5) * span / out[a] as f64;
                    }
                    v.set(x, y, z, self.sample(p));
                }
            }
        }
        Ok(v)
    }

    /// Network input of shape `[1, 1, nz, ny, nx]`.
    pub fn to_input<T: Scalar>(&self) -> Array<T> {
        let vals: Vec<T> = self.data.iter().map(|&v| T::of64(v as f64)).collect();
        Array::from_vec(&[1, 1, self.dims[2], self.dims[1], self.dims[0]], vals)
            .expect("volume layout matches input shape")
    }
}

/// Stacks volumes into a batched network input `[n, 1, nz, ny, nx]`.
pub fn batch_input<T: Scalar>(volumes: &[&Volume]) -> Result<Array<T>> {
    let dims = volumes
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?
        .dims;
    let mut vals = Vec::with_capacity(volumes.len() * dims[0] * dims[1] * dims[2]);
    for v in volumes {
        if v.dims != dims {
            return Err(Error::InvalidArgument("mixed volume dims in batch".into()));
        }
        vals.extend(v.data.iter().map(|&x| T::of64(x as f64)));
    }
    Array::from_vec(&[volumes.len(), 1, dims[2], dims[1], dims[0]], vals)
}

/// Binary voxel mask over the same lattice layout as [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelMask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl VoxelMask {
    pub fn empty(dims: [usize; 3]) -> Self {
        VoxelMask { dims, data: vec![false; dims[0] * dims[1] * dims[2]] }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.idx(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.idx(x, y, z);
        self.data[i] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Tight bounding corners (min inclusive, max exclusive), if non-empty.
    pub fn bbox(&self) -> Option<([i64; 3], [i64; 3])> {
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        let mut any = false;
        for z in 0..self.dims[2] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[0] {
                    if self.get(x, y, z) {
                        any = true;
                        let p = [x as i64, y as i64, z as i64];
                        for a in 0..3 {
                            lo[a] = lo[a].min(p[a]);
                            hi[a] = hi[a].max(p[a] + 1);
                        }
                    }
                }
            }
        }
        any.then_some((lo, hi))
    }

    /// Number of set voxels inside the half-open box `[min, max)` clipped
    /// to the lattice.
    pub fn count_in_box(&self, min: [i64; 3], max: [i64; 3]) -> usize {
        let x0 = min[0].clamp(0, self.dims[0] as i64) as usize;
        let x1 = max[0].clamp(0, self.dims[0] as i64) as usize;
        let y0 = min[1].clamp(0, self.dims[1] as i64) as usize;
        let y1 = max[1].clamp(0, self.dims[1] as i64) as usize;
        let z0 = min[2].clamp(0, self.dims[2] as i64) as usize;
        let z1 = max[2].clamp(0, self.dims[2] as i64) as usize;
        let mut n = 0;
        for z in z0..z1 {
            for y in y0..y1 {
                for x in x0..x1 {
                    if self.get(x, y, z) {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    pub fn overlap(&self, other: &VoxelMask) -> usize {
        assert_eq!(self.dims, other.dims, "mask lattices must agree");
        self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count()
    }

    /// Run-length encoding of the flattened mask: `(start, len)` pairs over
    /// set voxels, ascending.
    pub fn to_runs(&self) -> Vec<(u32, u32)> {
        let mut runs = Vec::new();
        let mut i = 0usize;
        while i < self.data.len() {
            if self.data[i] {
                let start = i;
                while i < self.data.len() && self.data[i] {
                    i += 1;
                }
                runs.push((start as u32, (i - start) as u32));
            } else {
                i += 1;
            }
        }
        runs
    }

    pub fn from_runs(dims: [usize; 3], runs: &[(u32, u32)]) -> Result<Self> {
        let mut m = VoxelMask::empty(dims);
        for &(start, len) in runs {
            let (s, l) = (start as usize, len as usize);
            if s + l > m.data.len() {
                return Err(Error::Dataset(format!(
                    "run {start}+{len} exceeds lattice of {} voxels",
                    m.data.len()
                )));
            }
            m.data[s..s + l].iter_mut().for_each(|b| *b = true);
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn resample_identity_on_constant() {
        let mut v = Volume::zeros([8, 8, 4]);
        v.data.iter_mut().for_each(|x| *x = 0.7);
        let r = v.resample_box([0, 0, 0], [8, 8, 4], [5, 3, 2]).unwrap();
        assert!(r.data.iter().all(|&x| (x - 0.7).abs() < 1e-6));
    }

    #[test]
    fn resample_same_grid_is_identity() {
        let mut v = Volume::zeros([4, 3, 2]);
        for (i, x) in v.data.iter_mut().enumerate() {
            *x = i as f32;
        }
        let r = v.resample_box([0, 0, 0], [4, 3, 2], [4, 3, 2]).unwrap();
        assert_eq!(r.data, v.data);
    }

    #[test]
    fn resample_rejects_empty_box() {
        let v = Volume::zeros([4, 4, 4]);
        assert!(v.resample_box([2, 0, 0], [2, 4, 4], [2, 2, 2]).is_err());
    }

    #[test]
    fn bbox_is_tight() {
        let mut m = VoxelMask::empty([6, 5, 4]);
        m.set(1, 2, 3, true);
        m.set(4, 2, 3, true);
        let (lo, hi) = m.bbox().unwrap();
        assert_eq!(lo, [1, 2, 3]);
        assert_eq!(hi, [5, 3, 4]);
        assert_eq!(VoxelMask::empty([2, 2, 2]).bbox(), None);
    }

    #[test]
    fn count_in_box_clips_to_lattice() {
        let mut m = VoxelMask::empty([4, 4, 4]);
        m.set(0, 0, 0, true);
        m.set(3, 3, 3, true);
        assert_eq!(m.count_in_box([-5, -5, -5], [10, 10, 10]), 2);
        assert_eq!(m.count_in_box([1, 1, 1], [4, 4, 4]), 1);
    }

    proptest! {
        #[test]
        fn rle_round_trips(bits in proptest::collection::vec(any::<bool>(), 24)) {
            let mut m = VoxelMask::empty([2, 3, 4]);
            m.data.copy_from_slice(&bits);
            let runs = m.to_runs();
            let back = VoxelMask::from_runs([2, 3, 4], &runs).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
