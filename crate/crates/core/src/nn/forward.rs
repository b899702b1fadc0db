//! Forward evaluation: walks the graph in order and records a tape of
//! node activations for the backward pass.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Array;

use super::kernels::{self, BnAux, ConvDims};
use super::params::ParameterSet;
use super::{LayerOp, NetworkSpec};

/// Batch-norm running statistics momentum: `new = 0.9*old + 0.1*batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// Recorded activations of one forward pass.
pub struct ForwardPass<T> {
    values: Vec<Array<T>>,
    bn_aux: Vec<Option<BnAux<T>>>,
    output: usize,
    batch: usize,
    /// Whether batch statistics were used (training path).
    pub train: bool,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn output(&self) -> &Array<T> {
        &self.values[self.output]
    }

    pub fn node(&self, idx: usize) -> &Array<T> {
        &self.values[idx]
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub(super) fn values(&self) -> &[Array<T>] {
        &self.values
    }

    pub(super) fn bn_aux(&self) -> &[Option<BnAux<T>>] {
        &self.bn_aux
    }

    /// Activation of a named tap.
    pub fn tap(&self, spec: &NetworkSpec, name: &str) -> Result<&Array<T>> {
        let idx = *spec
            .taps
            .get(name)
            .ok_or_else(|| Error::InvalidSpec(format!("no tap named `{name}`")))?;
        Ok(&self.values[idx])
    }
}

struct StatUpdate<T> {
    mean_name: String,
    var_name: String,
    mean: Vec<T>,
    var: Vec<T>,
}

/// Forward pass on the batch-statistics path; updates running statistics
/// of non-frozen batch-norm nodes.
pub fn forward_train<T: Scalar>(
    spec: &NetworkSpec,
    params: &mut ParameterSet<T>,
    input: &Array<T>,
) -> Result<ForwardPass<T>> {
    let (pass, updates) = run(spec, params, input, true)?;
    for u in updates {
        params.get_mut(&u.mean_name)?.values_mut().copy_from_slice(&u.mean);
        params.get_mut(&u.var_name)?.values_mut().copy_from_slice(&u.var);
    }
    Ok(pass)
}

/// Forward pass on the running-statistics path; never mutates parameters.
pub fn forward_eval<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    input: &Array<T>,
) -> Result<ForwardPass<T>> {
    let (pass, _) = run(spec, params, input, false)?;
    Ok(pass)
}

fn run<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    input: &Array<T>,
    batch_stats: bool,
) -> Result<(ForwardPass<T>, Vec<StatUpdate<T>>)> {
    let per_sample = spec.node_shapes()?;
    if input.shape().len() != spec.input_shape.len() + 1
        || input.shape()[1..] != spec.input_shape[..]
    {
        return Err(Error::ShapeMismatch {
            layer: 0,
            reason: format!(
                "input of shape {:?} does not match spec input {:?} with leading batch axis",
                input.shape(),
                spec.input_shape
            ),
        });
    }
    let batch = input.shape()[0];
    let batched = |idx: usize| -> Vec<usize> {
        let mut s = vec![batch];
        s.extend_from_slice(&per_sample[idx]);
        s
    };

    let mut values: Vec<Array<T>> = Vec::with_capacity(spec.nodes.len());
    let mut bn_aux: Vec<Option<BnAux<T>>> = Vec::with_capacity(spec.nodes.len());
    let mut updates = Vec::new();

    for (idx, node) in spec.nodes.iter().enumerate() {
        let mut aux = None;
        let value = match &node.op {
            LayerOp::Input => input.clone(),
            LayerOp::Conv3 { weight, bias, out_channels, kernel, stride, padding } => {
                let x = &values[node.inputs[0]];
                let in_shape = &per_sample[node.inputs[0]];
                let out_shape = &per_sample[idx];
                let dims = ConvDims {
                    batch,
                    in_ch: in_shape[0],
                    out_ch: *out_channels,
                    in_sp: [in_shape[1], in_shape[2], in_shape[3]],
                    out_sp: [out_shape[1], out_shape[2], out_shape[3]],
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                };
                let mut out = Array::zeros(&batched(idx));
                kernels::conv3_forward(
                    x.values(),
                    params.get(weight)?.values(),
                    params.get(bias)?.values(),
                    &dims,
                    out.values_mut(),
                );
                out
            }
            LayerOp::BatchNorm { prefix, frozen } => {
                let x = &values[node.inputs[0]];
                let s = &per_sample[idx];
                let (c, spatial) = (s[0], s[1] * s[2] * s[3]);
                let gamma = params.get(&format!("{prefix}.gamma"))?.values();
                let beta = params.get(&format!("{prefix}.beta"))?.values();
                let mean = params.get(&format!("{prefix}.mean"))?.values();
                let var = params.get(&format!("{prefix}.var"))?.values();
                let mut out = Array::zeros(&batched(idx));
                if batch_stats && !*frozen {
                    let (a, new_mean, new_var) = kernels::bn_forward_train(
                        x.values(),
                        gamma,
                        beta,
                        mean,
                        var,
                        batch,
                        c,
                        spatial,
                        BN_MOMENTUM,
                        out.values_mut(),
                    );
                    aux = Some(a);
                    updates.push(StatUpdate {
                        mean_name: format!("{prefix}.mean"),
                        var_name: format!("{prefix}.var"),
                        mean: new_mean,
                        var: new_var,
                    });
                } else {
                    aux = Some(kernels::bn_forward_eval(
                        x.values(),
                        gamma,
                        beta,
                        mean,
                        var,
                        batch,
                        c,
                        spatial,
                        out.values_mut(),
                    ));
                }
                out
            }
            LayerOp::Relu => {
                let x = &values[node.inputs[0]];
                let mut out = x.clone();
                out.values_mut().iter_mut().for_each(|v| {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                });
                out.clear_grad();
                out
            }
            LayerOp::Sigmoid => {
                let x = &values[node.inputs[0]];
                let vals: Vec<T> = x
                    .values()
                    .iter()
                    .map(|&v| T::one() / (T::one() + (-v).exp()))
                    .collect();
                Array::from_vec(x.shape(), vals)?
            }
            LayerOp::Linear { weight, bias, out_features } => {
                let x = &values[node.inputs[0]];
                let k = per_sample[node.inputs[0]][0];
                let mut out = Array::zeros(&[batch, *out_features]);
                kernels::linear_forward(
                    x.values(),
                    params.get(weight)?.values(),
                    params.get(bias)?.values(),
                    batch,
                    k,
                    *out_features,
                    out.values_mut(),
                );
                out
            }
            LayerOp::GlobalAvgPool => {
                let x = &values[node.inputs[0]];
                let s = &per_sample[node.inputs[0]];
                let (c, spatial) = (s[0], s[1] * s[2] * s[3]);
                let inv = T::of64(1.0 / spatial as f64);
                let mut out = Array::zeros(&[batch, c]);
                let xv = x.values();
                let ov = out.values_mut();
                for n in 0..batch {
                    for ch in 0..c {
                        let base = (n * c + ch) * spatial;
                        let mut acc = T::zero();
                        for v in &xv[base..base + spatial] {
                            acc += *v;
                        }
                        ov[n * c + ch] = acc * inv;
                    }
                }
                out
            }
            LayerOp::Flatten => {
                let x = values[node.inputs[0]].clone();
                x.reshape(&batched(idx))?
            }
            LayerOp::UpsampleNearest { factor } => {
                let x = &values[node.inputs[0]];
                let si = &per_sample[node.inputs[0]];
                let so = &per_sample[idx];
                let mut out = Array::zeros(&batched(idx));
                let xv = x.values();
                let ov = out.values_mut();
                let (c, id, ih, iw) = (si[0], si[1], si[2], si[3]);
                let (od, oh, ow) = (so[1], so[2], so[3]);
                for nc in 0..batch * c {
                    let ib = nc * id * ih * iw;
                    let ob = nc * od * oh * ow;
                    for oz in 0..od {
                        let iz = oz / factor[0];
                        for oy in 0..oh {
                            let iy = oy / factor[1];
                            let irow = ib + (iz * ih + iy) * iw;
                            let orow = ob + (oz * oh + oy) * ow;
                            for ox in 0..ow {
                                ov[orow + ox] = xv[irow + ox / factor[2]];
                            }
                        }
                    }
                }
                out
            }
            LayerOp::Add => {
                let a = &values[node.inputs[0]];
                let b = &values[node.inputs[1]];
                let vals: Vec<T> =
                    a.values().iter().zip(b.values()).map(|(x, y)| *x + *y).collect();
                Array::from_vec(a.shape(), vals)?
            }
            LayerOp::ConcatChannels => {
                let so = &per_sample[idx];
                let spatial = so[1] * so[2] * so[3];
                let mut out = Array::zeros(&batched(idx));
                let ov = out.values_mut();
                for n in 0..batch {
                    let mut co = 0usize;
                    for &i in &node.inputs {
                        let ci = per_sample[i][0];
                        let src = &values[i].values()[n * ci * spatial..(n + 1) * ci * spatial];
                        let dst_base = (n * so[0] + co) * spatial;
                        ov[dst_base..dst_base + ci * spatial].copy_from_slice(src);
                        co += ci;
                    }
                }
                out
            }
        };
        values.push(value);
        bn_aux.push(aux);
    }

    Ok((
        ForwardPass { values, bn_aux, output: spec.output, batch, train: batch_stats },
        updates,
    ))
}
