//! Reverse-mode automatic differentiation over dense arrays.
//!
//! A network is an ordered DAG of layer nodes ([`NetworkSpec`]); forward
//! evaluation records a tape of activations, backward walks the tape in
//! reverse and accumulates parameter gradients. Parameters live in a
//! [`ParameterSet`] keyed by name, so checkpoints, optimizers and weight
//! freezing all operate on plain name filters.

mod backward;
mod checkpoint;
mod forward;
mod kernels;
mod loss;
mod network;
mod optim;
mod params;
pub mod presets;

pub use backward::backward;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{forward_eval, forward_train, ForwardPass};
pub use loss::{class_probabilities, selected_squared_error, softmax_cross_entropy};
pub use network::Network;
pub use optim::{sgd_step, AdamState};
pub use params::ParameterSet;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One differentiable operation in the graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerOp {
    /// Graph input placeholder; exactly one, at node 0.
    Input,
    /// 3D convolution over `[n, c, d, h, w]`. Kernel, stride and padding
    /// are given as `[d, h, w]` triples.
    Conv3 {
        weight: String,
        bias: String,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    },
    /// Per-channel batch normalization. Parameters are stored under
    /// `{prefix}.gamma/.beta` with running statistics `{prefix}.mean/.var`.
    /// Frozen nodes always normalize with running statistics and never
    /// update them, regardless of the train/eval mode.
    BatchNorm { prefix: String, frozen: bool },
    Relu,
    Sigmoid,
    /// Fully connected layer over `[n, k]`.
    Linear { weight: String, bias: String, out_features: usize },
    /// Mean over all spatial positions: `[n, c, d, h, w] -> [n, c]`.
    GlobalAvgPool,
    /// `[n, ...] -> [n, prod(...)]`.
    Flatten,
    /// Nearest-neighbor upsampling by integer factors `[d, h, w]`.
    UpsampleNearest { factor: [usize; 3] },
    /// Elementwise sum of two inputs of identical shape.
    Add,
    /// Channel concatenation of inputs with identical spatial extents.
    ConcatChannels,
}

/// A node: an operation applied to earlier nodes' outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub op: LayerOp,
    pub inputs: Vec<usize>,
}

/// Ordered layer descriptors plus the per-sample input shape.
///
/// Node 0 is always [`LayerOp::Input`]; every other node consumes outputs
/// of strictly earlier nodes. `taps` names distinguished activations
/// (e.g. the embedding read by the detection agent).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub nodes: Vec<LayerNode>,
    pub output: usize,
    #[serde(default)]
    pub taps: BTreeMap<String, usize>,
}

impl NetworkSpec {
    /// Per-sample output shape of every node; rejects inconsistent graphs
    /// with the offending layer index.
    pub fn node_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            for &i in &node.inputs {
                if i >= idx {
                    return Err(Error::ShapeMismatch {
                        layer: idx,
                        reason: format!("input {i} is not an earlier node"),
                    });
                }
            }
            let fail = |reason: String| Error::ShapeMismatch { layer: idx, reason };
            let arity = |want: usize| -> Result<()> {
                if node.inputs.len() != want {
                    Err(Error::ShapeMismatch {
                        layer: idx,
                        reason: format!("expected {want} inputs, got {}", node.inputs.len()),
                    })
                } else {
                    Ok(())
                }
            };
            let shape = match &node.op {
                LayerOp::Input => {
                    if idx != 0 {
                        return Err(fail("input node must be node 0".into()));
                    }
                    self.input_shape.clone()
                }
                LayerOp::Conv3 { out_channels, kernel, stride, padding, .. } => {
                    arity(1)?;
                    let s = &shapes[node.inputs[0]];
                    if s.len() != 4 {
                        return Err(fail(format!("conv needs [c,d,h,w] input, got {s:?}")));
                    }
                    let mut out = vec![*out_channels, 0, 0, 0];
                    for a in 0..3 {
                        let padded = s[1 + a] + 2 * padding[a];
                        if padded < kernel[a] || stride[a] == 0 {
                            return Err(fail(format!(
                                "kernel {kernel:?} stride {stride:?} too large for {s:?}"
                            )));
                        }
                        out[1 + a] = (padded - kernel[a]) / stride[a] + 1;
                    }
                    out
                }
                LayerOp::BatchNorm { .. } => {
                    arity(1)?;
                    let s = shapes[node.inputs[0]].clone();
                    if s.len() != 4 {
                        return Err(fail(format!("batch norm needs [c,d,h,w] input, got {s:?}")));
                    }
                    s
                }
                LayerOp::Relu | LayerOp::Sigmoid => {
                    arity(1)?;
                    shapes[node.inputs[0]].clone()
                }
                LayerOp::Linear { out_features, .. } => {
                    arity(1)?;
                    let s = &shapes[node.inputs[0]];
                    if s.len() != 1 {
                        return Err(fail(format!("linear needs flat input, got {s:?}")));
                    }
                    vec![*out_features]
                }
                LayerOp::GlobalAvgPool => {
                    arity(1)?;
                    let s = &shapes[node.inputs[0]];
                    if s.len() != 4 {
                        return Err(fail(format!("pool needs [c,d,h,w] input, got {s:?}")));
                    }
                    vec![s[0]]
                }
                LayerOp::Flatten => {
                    arity(1)?;
                    vec![shapes[node.inputs[0]].iter().product()]
                }
                LayerOp::UpsampleNearest { factor } => {
                    arity(1)?;
                    let s = &shapes[node.inputs[0]];
                    if s.len() != 4 {
                        return Err(fail(format!("upsample needs [c,d,h,w] input, got {s:?}")));
                    }
                    vec![s[0], s[1] * factor[0], s[2] * factor[1], s[3] * factor[2]]
                }
                LayerOp::Add => {
                    arity(2)?;
                    let a = &shapes[node.inputs[0]];
                    let b = &shapes[node.inputs[1]];
                    if a != b {
                        return Err(fail(format!("add of {a:?} and {b:?}")));
                    }
                    a.clone()
                }
                LayerOp::ConcatChannels => {
                    if node.inputs.len() < 2 {
                        return Err(fail("concat needs at least two inputs".into()));
                    }
                    let first = &shapes[node.inputs[0]];
                    if first.len() != 4 {
                        return Err(fail(format!("concat needs [c,d,h,w] inputs, got {first:?}")));
                    }
                    let mut channels = 0;
                    for &i in &node.inputs {
                        let s = &shapes[i];
                        if s.len() != 4 || s[1..] != first[1..] {
                            return Err(fail(format!("concat of {first:?} and {s:?}")));
                        }
                        channels += s[0];
                    }
                    vec![channels, first[1], first[2], first[3]]
                }
            };
            shapes.push(shape);
        }
        if self.output >= self.nodes.len() {
            return Err(Error::InvalidSpec(format!("output node {} out of range", self.output)));
        }
        for (name, &node) in &self.taps {
            if node >= self.nodes.len() {
                return Err(Error::InvalidSpec(format!("tap `{name}` out of range")));
            }
        }
        Ok(shapes)
    }

    /// Shapes of all named parameters, derived from the graph. Duplicate
    /// parameter names are rejected.
    pub fn param_shapes(&self) -> Result<BTreeMap<String, Vec<usize>>> {
        let shapes = self.node_shapes()?;
        let mut out = BTreeMap::new();
        let mut insert = |name: &str, shape: Vec<usize>| -> Result<()> {
            if out.insert(name.to_string(), shape).is_some() {
                return Err(Error::InvalidSpec(format!("duplicate parameter `{name}`")));
            }
            Ok(())
        };
        for node in &self.nodes {
            match &node.op {
                LayerOp::Conv3 { weight, bias, out_channels, kernel, .. } => {
                    let in_ch = shapes[node.inputs[0]][0];
                    insert(weight, vec![*out_channels, in_ch, kernel[0], kernel[1], kernel[2]])?;
                    insert(bias, vec![*out_channels])?;
                }
                LayerOp::BatchNorm { prefix, .. } => {
                    let c = shapes[node.inputs[0]][0];
                    insert(&format!("{prefix}.gamma"), vec![c])?;
                    insert(&format!("{prefix}.beta"), vec![c])?;
                    insert(&format!("{prefix}.mean"), vec![c])?;
                    insert(&format!("{prefix}.var"), vec![c])?;
                }
                LayerOp::Linear { weight, bias, out_features } => {
                    let in_f = shapes[node.inputs[0]][0];
                    insert(weight, vec![*out_features, in_f])?;
                    insert(bias, vec![*out_features])?;
                }
                _ => {}
            }
        }
        Ok(out)
    }

    /// Per-sample shape of the output node.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.node_shapes()?[self.output].clone())
    }

    /// Per-sample shape of a named tap.
    pub fn tap_shape(&self, name: &str) -> Result<Vec<usize>> {
        let node = *self
            .taps
            .get(name)
            .ok_or_else(|| Error::InvalidSpec(format!("no tap named `{name}`")))?;
        Ok(self.node_shapes()?[node].clone())
    }
}

/// Incremental graph builder used by the architecture presets. Panics on
/// inconsistent construction; [`SpecBuilder::finish`] re-validates the
/// whole graph.
pub struct SpecBuilder {
    nodes: Vec<LayerNode>,
    shapes: Vec<Vec<usize>>,
    input_shape: Vec<usize>,
    taps: BTreeMap<String, usize>,
}

impl SpecBuilder {
    /// Creates a builder; returns it together with the input node id.
    pub fn new(input_shape: Vec<usize>) -> (Self, usize) {
        let b = SpecBuilder {
            nodes: vec![LayerNode { op: LayerOp::Input, inputs: vec![] }],
            shapes: vec![input_shape.clone()],
            input_shape,
            taps: BTreeMap::new(),
        };
        (b, 0)
    }

    fn push(&mut self, op: LayerOp, inputs: Vec<usize>) -> usize {
        self.nodes.push(LayerNode { op, inputs });
        let spec = NetworkSpec {
            input_shape: self.input_shape.clone(),
            nodes: self.nodes.clone(),
            output: self.nodes.len() - 1,
            taps: BTreeMap::new(),
        };
        let shapes = spec.node_shapes().expect("builder produced a consistent node");
        self.shapes = shapes;
        self.nodes.len() - 1
    }

    pub fn shape(&self, node: usize) -> &[usize] {
        &self.shapes[node]
    }

    pub fn conv(
        &mut self,
        from: usize,
        prefix: &str,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> usize {
        self.push(
            LayerOp::Conv3 {
                weight: format!("{prefix}.weight"),
                bias: format!("{prefix}.bias"),
                out_channels,
                kernel,
                stride,
                padding,
            },
            vec![from],
        )
    }

    /// 3x3x3 convolution with padding 1.
    pub fn conv3x3(&mut self, from: usize, prefix: &str, out_channels: usize, stride: [usize; 3]) -> usize {
        self.conv(from, prefix, out_channels, [3, 3, 3], stride, [1, 1, 1])
    }

    /// 1x1x1 convolution (no padding).
    pub fn conv1x1(&mut self, from: usize, prefix: &str, out_channels: usize, stride: [usize; 3]) -> usize {
        self.conv(from, prefix, out_channels, [1, 1, 1], stride, [0, 0, 0])
    }

    pub fn batch_norm(&mut self, from: usize, prefix: &str, frozen: bool) -> usize {
        self.push(LayerOp::BatchNorm { prefix: prefix.to_string(), frozen }, vec![from])
    }

    pub fn relu(&mut self, from: usize) -> usize {
        self.push(LayerOp::Relu, vec![from])
    }

    pub fn sigmoid(&mut self, from: usize) -> usize {
        self.push(LayerOp::Sigmoid, vec![from])
    }

    pub fn linear(&mut self, from: usize, prefix: &str, out_features: usize) -> usize {
        self.push(
            LayerOp::Linear {
                weight: format!("{prefix}.weight"),
                bias: format!("{prefix}.bias"),
                out_features,
            },
            vec![from],
        )
    }

    pub fn global_avg_pool(&mut self, from: usize) -> usize {
        self.push(LayerOp::GlobalAvgPool, vec![from])
    }

    pub fn flatten(&mut self, from: usize) -> usize {
        self.push(LayerOp::Flatten, vec![from])
    }

    pub fn upsample(&mut self, from: usize, factor: [usize; 3]) -> usize {
        self.push(LayerOp::UpsampleNearest { factor }, vec![from])
    }

    pub fn add(&mut self, a: usize, b: usize) -> usize {
        self.push(LayerOp::Add, vec![a, b])
    }

    pub fn concat(&mut self, inputs: &[usize]) -> usize {
        self.push(LayerOp::ConcatChannels, inputs.to_vec())
    }

    pub fn tap(&mut self, name: &str, node: usize) {
        self.taps.insert(name.to_string(), node);
    }

    pub fn finish(self, output: usize) -> NetworkSpec {
        let spec = NetworkSpec {
            input_shape: self.input_shape,
            nodes: self.nodes,
            output,
            taps: self.taps,
        };
        spec.node_shapes().expect("builder graphs are consistent");
        spec.param_shapes().expect("builder parameter names are unique");
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> NetworkSpec {
        let (mut b, x) = SpecBuilder::new(vec![1, 4, 4, 4]);
        let c = b.conv3x3(x, "stem", 2, [1, 1, 1]);
        let n = b.batch_norm(c, "stem.bn", false);
        let r = b.relu(n);
        let p = b.global_avg_pool(r);
        let f = b.linear(p, "fc", 3);
        b.tap("pooled", p);
        b.finish(f)
    }

    #[test]
    fn shape_inference_walks_the_graph() {
        let spec = tiny_spec();
        let shapes = spec.node_shapes().unwrap();
        assert_eq!(shapes[1], vec![2, 4, 4, 4]);
        assert_eq!(shapes[4], vec![2]);
        assert_eq!(spec.output_shape().unwrap(), vec![3]);
        assert_eq!(spec.tap_shape("pooled").unwrap(), vec![2]);
    }

    #[test]
    fn param_shapes_follow_the_spec() {
        let spec = tiny_spec();
        let p = spec.param_shapes().unwrap();
        assert_eq!(p["stem.weight"], vec![2, 1, 3, 3, 3]);
        assert_eq!(p["stem.bn.gamma"], vec![2]);
        assert_eq!(p["fc.weight"], vec![3, 2]);
    }

    #[test]
    fn inconsistent_graph_reports_layer_index() {
        let mut spec = tiny_spec();
        // Point the linear layer at the conv output (not flat).
        spec.nodes[5].inputs = vec![1];
        match spec.node_shapes() {
            Err(Error::ShapeMismatch { layer, .. }) => assert_eq!(layer, 5),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn spec_serialization_round_trips() {
        let spec = tiny_spec();
        let text = serde_json::to_string(&spec).unwrap();
        let back: NetworkSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
