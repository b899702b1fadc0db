//! Reverse walk over a recorded forward pass: accumulates parameter
//! gradients into the [`ParameterSet`] and returns the input gradient.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Array;

use super::forward::ForwardPass;
use super::kernels::{self, ConvDims};
use super::params::ParameterSet;
use super::{LayerOp, NetworkSpec};

/// Propagates `out_grad` (gradient of a scalar loss w.r.t. the output
/// node) back through the pass. Parameter gradients accumulate into the
/// `grad` buffers of `params`; the gradient w.r.t. the network input is
/// returned.
pub fn backward<T: Scalar>(
    spec: &NetworkSpec,
    params: &mut ParameterSet<T>,
    pass: &ForwardPass<T>,
    out_grad: &Array<T>,
) -> Result<Array<T>> {
    let per_sample = spec.node_shapes()?;
    if pass.values().len() != spec.nodes.len() {
        return Err(Error::InvalidArgument(
            "forward pass does not belong to this spec".into(),
        ));
    }
    if out_grad.shape() != pass.output().shape() {
        return Err(Error::InvalidArgument(format!(
            "output gradient shape {:?} does not match output {:?}",
            out_grad.shape(),
            pass.output().shape()
        )));
    }
    let batch = pass.batch();

    let mut grads: Vec<Option<Vec<T>>> = vec![None; spec.nodes.len()];
    grads[spec.output] = Some(out_grad.values().to_vec());

    for idx in (0..spec.nodes.len()).rev() {
        let dy = match grads[idx].take() {
            Some(g) => g,
            None => continue,
        };
        let node = &spec.nodes[idx];
        let push = |grads: &mut Vec<Option<Vec<T>>>, node_idx: usize, add: &[T]| {
            let slot = grads[node_idx]
                .get_or_insert_with(|| vec![T::zero(); pass.node(node_idx).numel()]);
            for (a, b) in slot.iter_mut().zip(add) {
                *a += *b;
            }
        };
        match &node.op {
            LayerOp::Input => {
                // The walk ends here; keep the accumulated gradient so
                // the caller receives it.
                grads[idx] = Some(dy);
            }
            LayerOp::Conv3 { weight, bias, out_channels, kernel, stride, padding } => {
                let src = node.inputs[0];
                let in_shape = &per_sample[src];
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
                let mut dx = vec![T::zero(); pass.node(src).numel()];
                {
                    let w = params.get(weight)?.values().to_vec();
                    kernels::conv3_backward_input(&dy, &w, &dims, &mut dx);
                }
                let x = pass.node(src).values().to_vec();
                {
                    // Split borrows: take grads of weight and bias in turn.
                    let mut dw = vec![T::zero(); params.get(weight)?.numel()];
                    let mut db = vec![T::zero(); params.get(bias)?.numel()];
                    kernels::conv3_backward_params(&x, &dy, &dims, &mut dw, &mut db);
                    accumulate(params, weight, &dw)?;
                    accumulate(params, bias, &db)?;
                }
                push(&mut grads, src, &dx);
            }
            LayerOp::BatchNorm { prefix, .. } => {
                let src = node.inputs[0];
                let s = &per_sample[idx];
                let (c, spatial) = (s[0], s[1] * s[2] * s[3]);
                let aux = pass.bn_aux()[idx]
                    .as_ref()
                    .expect("batch norm nodes record aux context");
                let gamma = params.get(&format!("{prefix}.gamma"))?.values().to_vec();
                let mut dx = vec![T::zero(); pass.node(src).numel()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                kernels::bn_backward(
                    &dy, &gamma, aux, batch, c, spatial, &mut dx, &mut dgamma, &mut dbeta,
                );
                accumulate(params, &format!("{prefix}.gamma"), &dgamma)?;
                accumulate(params, &format!("{prefix}.beta"), &dbeta)?;
                push(&mut grads, src, &dx);
            }
            LayerOp::Relu => {
                let src = node.inputs[0];
                let y = pass.node(idx).values();
                let dx: Vec<T> = dy
                    .iter()
                    .zip(y)
                    .map(|(g, v)| if *v > T::zero() { *g } else { T::zero() })
                    .collect();
                push(&mut grads, src, &dx);
            }
            LayerOp::Sigmoid => {
                let src = node.inputs[0];
                let y = pass.node(idx).values();
                let dx: Vec<T> =
                    dy.iter().zip(y).map(|(g, v)| *g * *v * (T::one() - *v)).collect();
                push(&mut grads, src, &dx);
            }
            LayerOp::Linear { weight, bias, out_features } => {
                let src = node.inputs[0];
                let k = per_sample[src][0];
                let x = pass.node(src).values().to_vec();
                let w = params.get(weight)?.values().to_vec();
                let mut dx = vec![T::zero(); pass.node(src).numel()];
                let mut dw = vec![T::zero(); w.len()];
                let mut db = vec![T::zero(); *out_features];
                kernels::linear_backward(
                    &x, &w, &dy, batch, k, *out_features, &mut dx, &mut dw, &mut db,
                );
                accumulate(params, weight, &dw)?;
                accumulate(params, bias, &db)?;
                push(&mut grads, src, &dx);
            }
            LayerOp::GlobalAvgPool => {
                let src = node.inputs[0];
                let s = &per_sample[src];
                let (c, spatial) = (s[0], s[1] * s[2] * s[3]);
                let inv = T::of64(1.0 / spatial as f64);
                let mut dx = vec![T::zero(); pass.node(src).numel()];
                for n in 0..batch {
                    for ch in 0..c {
                        let g = dy[n * c + ch] * inv;
                        let base = (n * c + ch) * spatial;
                        dx[base..base + spatial].iter_mut().for_each(|v| *v = g);
                    }
                }
                push(&mut grads, src, &dx);
            }
            LayerOp::Flatten => {
                push(&mut grads, node.inputs[0], &dy);
            }
            LayerOp::UpsampleNearest { factor } => {
                let src = node.inputs[0];
                let si = &per_sample[src];
                let so = &per_sample[idx];
                let (c, id, ih, iw) = (si[0], si[1], si[2], si[3]);
                let (od, oh, ow) = (so[1], so[2], so[3]);
                let mut dx = vec![T::zero(); pass.node(src).numel()];
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
                                let i = irow + ox / factor[2];
                                dx[i] = dx[i] + dy[orow + ox];
                            }
                        }
                    }
                }
                push(&mut grads, src, &dx);
            }
            LayerOp::Add => {
                push(&mut grads, node.inputs[0], &dy);
                push(&mut grads, node.inputs[1], &dy);
            }
            LayerOp::ConcatChannels => {
                let so = &per_sample[idx];
                let spatial = so[1] * so[2] * so[3];
                let mut co = 0usize;
                for &i in &node.inputs {
                    let ci = per_sample[i][0];
                    let mut dxi = vec![T::zero(); pass.node(i).numel()];
                    for n in 0..batch {
                        let src_base = (n * so[0] + co) * spatial;
                        let dst_base = n * ci * spatial;
                        dxi[dst_base..dst_base + ci * spatial]
                            .copy_from_slice(&dy[src_base..src_base + ci * spatial]);
                    }
                    push(&mut grads, i, &dxi);
                    co += ci;
                }
            }
        }
    }

    let input_grad = grads[0]
        .take()
        .unwrap_or_else(|| vec![T::zero(); pass.node(0).numel()]);
    Array::from_vec(pass.node(0).shape(), input_grad)
}

fn accumulate<T: Scalar>(params: &mut ParameterSet<T>, name: &str, add: &[T]) -> Result<()> {
    let g = params.get_mut(name)?.grad_mut();
    for (a, b) in g.iter_mut().zip(add) {
        *a += *b;
    }
    Ok(())
}
