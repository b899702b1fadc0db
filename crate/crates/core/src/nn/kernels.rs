//! Per-operation compute kernels over flat slices.
//!
//! All kernels take explicit dimensions and are shared between the
//! forward and backward walkers. Inner loops run over the fastest (x)
//! axis contiguously where the stride allows.

use crate::scalar::Scalar;

/// Dimensions of one convolution application.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    /// Input spatial extents `[d, h, w]`.
    pub in_sp: [usize; 3],
    /// Output spatial extents `[d, h, w]`.
    pub out_sp: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvDims {
    #[inline]
    fn in_plane(&self) -> usize {
        self.in_sp[1] * self.in_sp[2]
    }

    #[inline]
    fn out_plane(&self) -> usize {
        self.out_sp[1] * self.out_sp[2]
    }

    #[inline]
    fn in_vol(&self) -> usize {
        self.in_sp[0] * self.in_plane()
    }

    #[inline]
    fn out_vol(&self) -> usize {
        self.out_sp[0] * self.out_plane()
    }

    /// Output index range `[lo, hi)` along `axis` for kernel offset `k`
    /// such that the corresponding input index stays inside the lattice.
    #[inline]
    fn valid_out_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let s = self.stride[axis] as i64;
        let lo_num = self.padding[axis] as i64 - k as i64;
        let lo = if lo_num <= 0 { 0 } else { ((lo_num + s - 1) / s) as usize };
        let hi_num = self.in_sp[axis] as i64 - 1 + self.padding[axis] as i64 - k as i64;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = ((hi_num / s) as usize + 1).min(self.out_sp[axis]);
        (lo, hi.max(lo))
    }

    /// Input index corresponding to output index `o` at kernel offset `k`.
    #[inline]
    fn in_idx(&self, axis: usize, o: usize, k: usize) -> usize {
        (o * self.stride[axis] + k) - self.padding[axis]
    }
}

pub fn conv3_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], d: &ConvDims, out: &mut [T]) {
    let (kd, kh, kw) = (d.kernel[0], d.kernel[1], d.kernel[2]);
    for n in 0..d.batch {
        for co in 0..d.out_ch {
            let out_base = (n * d.out_ch + co) * d.out_vol();
            out[out_base..out_base + d.out_vol()].iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..d.in_ch {
                let in_base = (n * d.in_ch + ci) * d.in_vol();
                for kz in 0..kd {
                    let (oz0, oz1) = d.valid_out_range(0, kz);
                    for ky in 0..kh {
                        let (oy0, oy1) = d.valid_out_range(1, ky);
                        for kx in 0..kw {
                            let (ox0, ox1) = d.valid_out_range(2, kx);
                            if ox1 <= ox0 {
                                continue;
                            }
                            let wv = w[(((co * d.in_ch + ci) * kd + kz) * kh + ky) * kw + kx];
                            for oz in oz0..oz1 {
                                let iz = d.in_idx(0, oz, kz);
                                for oy in oy0..oy1 {
                                    let iy = d.in_idx(1, oy, ky);
                                    let orow = out_base + (oz * d.out_sp[1] + oy) * d.out_sp[2];
                                    let irow = in_base + (iz * d.in_sp[1] + iy) * d.in_sp[2];
                                    let ix0 = d.in_idx(2, ox0, kx);
                                    if d.stride[2] == 1 {
                                        let on = &mut out[orow + ox0..orow + ox1];
                                        let inr = &x[irow + ix0..irow + ix0 + (ox1 - ox0)];
                                        for (o, i) in on.iter_mut().zip(inr) {
                                            *o = *o + wv * *i;
                                        }
                                    } else {
                                        let mut ix = ix0;
                                        for ox in ox0..ox1 {
                                            out[orow + ox] = out[orow + ox] + wv * x[irow + ix];
                                            ix += d.stride[2];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3_backward_input<T: Scalar>(dy: &[T], w: &[T], d: &ConvDims, dx: &mut [T]) {
    let (kd, kh, kw) = (d.kernel[0], d.kernel[1], d.kernel[2]);
    for n in 0..d.batch {
        for co in 0..d.out_ch {
            let out_base = (n * d.out_ch + co) * d.out_vol();
            for ci in 0..d.in_ch {
                let in_base = (n * d.in_ch + ci) * d.in_vol();
                for kz in 0..kd {
                    let (oz0, oz1) = d.valid_out_range(0, kz);
                    for ky in 0..kh {
                        let (oy0, oy1) = d.valid_out_range(1, ky);
                        for kx in 0..kw {
                            let (ox0, ox1) = d.valid_out_range(2, kx);
                            if ox1 <= ox0 {
                                continue;
                            }
                            let wv = w[(((co * d.in_ch + ci) * kd + kz) * kh + ky) * kw + kx];
                            for oz in oz0..oz1 {
                                let iz = d.in_idx(0, oz, kz);
                                for oy in oy0..oy1 {
                                    let iy = d.in_idx(1, oy, ky);
                                    let orow = out_base + (oz * d.out_sp[1] + oy) * d.out_sp[2];
                                    let irow = in_base + (iz * d.in_sp[1] + iy) * d.in_sp[2];
                                    let ix0 = d.in_idx(2, ox0, kx);
                                    if d.stride[2] == 1 {
                                        let dxr = &mut dx[irow + ix0..irow + ix0 + (ox1 - ox0)];
                                        let dyr = &dy[orow + ox0..orow + ox1];
                                        for (i, o) in dxr.iter_mut().zip(dyr) {
                                            *i = *i + wv * *o;
                                        }
                                    } else {
                                        let mut ix = ix0;
                                        for ox in ox0..ox1 {
                                            dx[irow + ix] = dx[irow + ix] + wv * dy[orow + ox];
                                            ix += d.stride[2];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3_backward_params<T: Scalar>(x: &[T], dy: &[T], d: &ConvDims, dw: &mut [T], db: &mut [T]) {
    let (kd, kh, kw) = (d.kernel[0], d.kernel[1], d.kernel[2]);
    for n in 0..d.batch {
        for co in 0..d.out_ch {
            let out_base = (n * d.out_ch + co) * d.out_vol();
            let mut bsum = T::zero();
            for v in &dy[out_base..out_base + d.out_vol()] {
                bsum += *v;
            }
            db[co] += bsum;
            for ci in 0..d.in_ch {
                let in_base = (n * d.in_ch + ci) * d.in_vol();
                for kz in 0..kd {
                    let (oz0, oz1) = d.valid_out_range(0, kz);
                    for ky in 0..kh {
                        let (oy0, oy1) = d.valid_out_range(1, ky);
                        for kx in 0..kw {
                            let (ox0, ox1) = d.valid_out_range(2, kx);
                            if ox1 <= ox0 {
                                continue;
                            }
                            let mut acc = T::zero();
                            for oz in oz0..oz1 {
                                let iz = d.in_idx(0, oz, kz);
                                for oy in oy0..oy1 {
                                    let iy = d.in_idx(1, oy, ky);
                                    let orow = out_base + (oz * d.out_sp[1] + oy) * d.out_sp[2];
                                    let irow = in_base + (iz * d.in_sp[1] + iy) * d.in_sp[2];
                                    let ix0 = d.in_idx(2, ox0, kx);
                                    if d.stride[2] == 1 {
                                        let dyr = &dy[orow + ox0..orow + ox1];
                                        let xr = &x[irow + ix0..irow + ix0 + (ox1 - ox0)];
                                        for (o, i) in dyr.iter().zip(xr) {
                                            acc = acc + *o * *i;
                                        }
                                    } else {
                                        let mut ix = ix0;
                                        for ox in ox0..ox1 {
                                            acc = acc + dy[orow + ox] * x[irow + ix];
                                            ix += d.stride[2];
                                        }
                                    }
                                }
                            }
                            dw[(((co * d.in_ch + ci) * kd + kz) * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
            }
        }
    }
}

pub const BN_EPS: f64 = 1e-5;

/// Saved context a batch-norm node needs for its backward pass.
pub struct BnAux<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Whether batch statistics (train path) were used.
    pub batch_stats: bool,
}

/// Batch statistics path: normalizes with this batch's mean/variance and
/// returns the updated running statistics (momentum 0.9).
#[allow(clippy::too_many_arguments)]
pub fn bn_forward_train<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    run_mean: &[T],
    run_var: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    momentum: f64,
    out: &mut [T],
) -> (BnAux<T>, Vec<T>, Vec<T>) {
    let m = (batch * spatial) as f64;
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); channels];
    let mut new_mean = vec![T::zero(); channels];
    let mut new_var = vec![T::zero(); channels];
    for c in 0..channels {
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for n in 0..batch {
            let base = (n * channels + c) * spatial;
            for v in &x[base..base + spatial] {
                let f = v.as64();
                sum += f;
                sq += f * f;
            }
        }
        let mean = sum / m;
        let var = (sq / m - mean * mean).max(0.0);
        let istd = 1.0 / (var + BN_EPS).sqrt();
        inv_std[c] = T::of64(istd);
        new_mean[c] = T::of64(momentum * run_mean[c].as64() + (1.0 - momentum) * mean);
        new_var[c] = T::of64(momentum * run_var[c].as64() + (1.0 - momentum) * var);
        let (g, b, mt) = (gamma[c], beta[c], T::of64(mean));
        let istd_t = inv_std[c];
        for n in 0..batch {
            let base = (n * channels + c) * spatial;
            for i in base..base + spatial {
                let xh = (x[i] - mt) * istd_t;
                xhat[i] = xh;
                out[i] = g * xh + b;
            }
        }
    }
    (BnAux { xhat, inv_std, batch_stats: true }, new_mean, new_var)
}

/// Running statistics path (eval mode and frozen nodes).
pub fn bn_forward_eval<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    run_mean: &[T],
    run_var: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    out: &mut [T],
) -> BnAux<T> {
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); channels];
    for c in 0..channels {
        let istd = T::of64(1.0 / (run_var[c].as64() + BN_EPS).sqrt());
        inv_std[c] = istd;
        let (g, b, mt) = (gamma[c], beta[c], run_mean[c]);
        for n in 0..batch {
            let base = (n * channels + c) * spatial;
            for i in base..base + spatial {
                let xh = (x[i] - mt) * istd;
                xhat[i] = xh;
                out[i] = g * xh + b;
            }
        }
    }
    BnAux { xhat, inv_std, batch_stats: false }
}

#[allow(clippy::too_many_arguments)]
pub fn bn_backward<T: Scalar>(
    dy: &[T],
    gamma: &[T],
    aux: &BnAux<T>,
    batch: usize,
    channels: usize,
    spatial: usize,
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let m = T::of64((batch * spatial) as f64);
    for c in 0..channels {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..batch {
            let base = (n * channels + c) * spatial;
            for i in base..base + spatial {
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * aux.xhat[i];
            }
        }
        dgamma[c] += sum_dy_xhat;
        dbeta[c] += sum_dy;
        let g_istd = gamma[c] * aux.inv_std[c];
        if aux.batch_stats {
            let mean_dy = sum_dy / m;
            let mean_dy_xhat = sum_dy_xhat / m;
            for n in 0..batch {
                let base = (n * channels + c) * spatial;
                for i in base..base + spatial {
                    dx[i] = dx[i] + g_istd * (dy[i] - mean_dy - aux.xhat[i] * mean_dy_xhat);
                }
            }
        } else {
            // Statistics are constants on this path.
            for n in 0..batch {
                let base = (n * channels + c) * spatial;
                for i in base..base + spatial {
                    dx[i] = dx[i] + g_istd * dy[i];
                }
            }
        }
    }
}

pub fn linear_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], batch: usize, k: usize, o: usize, out: &mut [T]) {
    for n in 0..batch {
        let xr = &x[n * k..(n + 1) * k];
        let or = &mut out[n * o..(n + 1) * o];
        for (j, ov) in or.iter_mut().enumerate() {
            let wr = &w[j * k..(j + 1) * k];
            let mut acc = b[j];
            for (wv, xv) in wr.iter().zip(xr) {
                acc = acc + *wv * *xv;
            }
            *ov = acc;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    batch: usize,
    k: usize,
    o: usize,
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
) {
    for n in 0..batch {
        let xr = &x[n * k..(n + 1) * k];
        let dyr = &dy[n * o..(n + 1) * o];
        let dxr = &mut dx[n * k..(n + 1) * k];
        for (j, &g) in dyr.iter().enumerate() {
            db[j] += g;
            let wr = &w[j * k..(j + 1) * k];
            let dwr = &mut dw[j * k..(j + 1) * k];
            for i in 0..k {
                dxr[i] = dxr[i] + g * wr[i];
                dwr[i] = dwr[i] + g * xr[i];
            }
        }
    }
}
