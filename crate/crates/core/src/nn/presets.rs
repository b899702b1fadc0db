//! Architecture presets.
//!
//! Volumes enter networks as `[1, z, y, x]` (channel, depth, height,
//! width); all extent triples in the configs below are `(x, y, z)` like
//! the rest of the crate.

use serde::{Deserialize, Serialize};

use super::{NetworkSpec, SpecBuilder};

/// Residual patch encoder: five residual blocks, each preceded by a
/// (possibly strided) convolution, then two tail convolutions whose
/// flattened output is the embedding, then a fully connected classifier.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResNetEncoderConfig {
    /// Patch extents `(x, y, z)` the encoder consumes.
    pub input: [usize; 3],
    /// Channels of the five stages.
    pub channels: [usize; 5],
    /// Isotropic stride of each stage's pre-block convolution.
    pub strides: [usize; 5],
    /// Channels of the two tail convolutions.
    pub tail_channels: [usize; 2],
    pub classes: usize,
}

impl ResNetEncoderConfig {
    /// Embedding width implied by the configuration.
    pub fn embedding_dim(&self) -> usize {
        let spec = resnet_encoder(self);
        spec.tap_shape("embedding").expect("preset taps exist")[0]
    }
}

/// Paper-width encoder; its embedding is 2304-dimensional.
pub fn paper_patch_encoder() -> ResNetEncoderConfig {
    ResNetEncoderConfig {
        input: [100, 100, 50],
        channels: [16, 32, 64, 96, 128],
        strides: [2, 2, 2, 2, 2],
        tail_channels: [96, 72],
        classes: 2,
    }
}

pub fn resnet_encoder(cfg: &ResNetEncoderConfig) -> NetworkSpec {
    let (mut b, x) = SpecBuilder::new(vec![1, cfg.input[2], cfg.input[1], cfg.input[0]]);
    let mut cur = x;
    for (i, (&ch, &s)) in cfg.channels.iter().zip(&cfg.strides).enumerate() {
        let p = format!("stage{i}");
        cur = b.conv3x3(cur, &format!("{p}.pre"), ch, [s, s, s]);
        cur = b.batch_norm(cur, &format!("{p}.pre.bn"), false);
        cur = b.relu(cur);
        let skip = cur;
        let mut t = b.conv3x3(cur, &format!("{p}.res.conv1"), ch, [1, 1, 1]);
        t = b.batch_norm(t, &format!("{p}.res.bn1"), false);
        t = b.relu(t);
        t = b.conv3x3(t, &format!("{p}.res.conv2"), ch, [1, 1, 1]);
        t = b.batch_norm(t, &format!("{p}.res.bn2"), false);
        let sum = b.add(skip, t);
        cur = b.relu(sum);
    }
    for (i, &ch) in cfg.tail_channels.iter().enumerate() {
        cur = b.conv3x3(cur, &format!("tail{i}"), ch, [1, 1, 1]);
        cur = b.batch_norm(cur, &format!("tail{i}.bn"), false);
        cur = b.relu(cur);
    }
    let emb = b.flatten(cur);
    b.tap("embedding", emb);
    let out = b.linear(emb, "fc", cfg.classes);
    b.finish(out)
}

/// Densely connected classifier: a stem convolution, `blocks` dense
/// blocks of `layers_per_block` BN-ReLU-conv layers with channel
/// concatenation, compressing strided 1x1x1 transitions between blocks,
/// then BN-ReLU, global average pooling and a fully connected layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseNetConfig {
    /// Input extents `(x, y, z)`.
    pub input: [usize; 3],
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub growth: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub compression: f64,
    /// Stride of the transition after each block but the last.
    pub transition_strides: Vec<usize>,
    pub classes: usize,
}

struct Trunk {
    /// Output node of every dense block.
    block_out: Vec<usize>,
    /// Final BN-ReLU over the last block.
    top: usize,
}

fn build_dense_trunk(b: &mut SpecBuilder, from: usize, cfg: &DenseNetConfig, frozen: bool) -> Trunk {
    assert_eq!(
        cfg.transition_strides.len(),
        cfg.blocks - 1,
        "one transition between consecutive dense blocks"
    );
    let s = cfg.stem_stride;
    let mut cur = b.conv3x3(from, "stem", cfg.stem_channels, [s, s, s]);
    let mut channels = cfg.stem_channels;
    let mut block_out = Vec::with_capacity(cfg.blocks);
    for blk in 0..cfg.blocks {
        for layer in 0..cfg.layers_per_block {
            let p = format!("b{blk}.l{layer}");
            let mut t = b.batch_norm(cur, &format!("{p}.bn"), frozen);
            t = b.relu(t);
            t = b.conv3x3(t, &format!("{p}.conv"), cfg.growth, [1, 1, 1]);
            cur = b.concat(&[cur, t]);
            channels += cfg.growth;
        }
        block_out.push(cur);
        if blk + 1 < cfg.blocks {
            let p = format!("t{blk}");
            let compressed = ((channels as f64 * cfg.compression).floor() as usize).max(1);
            let ts = cfg.transition_strides[blk];
            let mut t = b.batch_norm(cur, &format!("{p}.bn"), frozen);
            t = b.relu(t);
            cur = b.conv1x1(t, &format!("{p}.conv"), compressed, [ts, ts, ts]);
            channels = compressed;
        }
    }
    let mut top = b.batch_norm(cur, "top.bn", frozen);
    top = b.relu(top);
    Trunk { block_out, top }
}

pub fn densenet_classifier(cfg: &DenseNetConfig) -> NetworkSpec {
    let (mut b, x) = SpecBuilder::new(vec![1, cfg.input[2], cfg.input[1], cfg.input[0]]);
    let trunk = build_dense_trunk(&mut b, x, cfg, false);
    b.tap("trunk", trunk.top);
    let pooled = b.global_avg_pool(trunk.top);
    let out = b.linear(pooled, "fc", cfg.classes);
    b.finish(out)
}

/// Decoder widths for the saliency model, one per upsampling block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub channels: Vec<usize>,
}

/// Saliency model: the classifier trunk (shared parameter names, frozen
/// batch-norm) plus a decoder of upsampling blocks with skip connections
/// from same-resolution encoder activations and a sigmoid mask head.
///
/// The trunk must reduce every axis by `2^blocks` overall so that
/// `blocks` doublings return exactly to the input extents; the last skip
/// concatenates the input volume itself.
pub fn saliency_model(cfg: &DenseNetConfig, dec: &DecoderConfig) -> NetworkSpec {
    let (mut b, x) = SpecBuilder::new(vec![1, cfg.input[2], cfg.input[1], cfg.input[0]]);
    let trunk = build_dense_trunk(&mut b, x, cfg, true);

    let mut cur = trunk.top;
    for (i, &ch) in dec.channels.iter().enumerate() {
        cur = b.upsample(cur, [2, 2, 2]);
        let target = b.shape(cur)[1..].to_vec();
        let skip = trunk
            .block_out
            .iter()
            .rev()
            .find(|&&n| b.shape(n)[1..] == target[..])
            .copied()
            .or_else(|| (b.shape(x)[1..] == target[..]).then_some(x));
        if let Some(s) = skip {
            cur = b.concat(&[cur, s]);
        }
        let p = format!("dec.b{i}");
        cur = b.conv3x3(cur, &format!("{p}.conv"), ch, [1, 1, 1]);
        cur = b.batch_norm(cur, &format!("{p}.bn"), false);
        cur = b.relu(cur);
    }
    assert_eq!(
        b.shape(cur)[1..].to_vec(),
        vec![cfg.input[2], cfg.input[1], cfg.input[0]],
        "decoder must return to the input extents"
    );
    let head = b.conv3x3(cur, "dec.mask", 1, [1, 1, 1]);
    let mask = b.sigmoid(head);
    b.tap("mask", mask);
    b.finish(mask)
}

/// Names owned by the saliency decoder (everything else in the saliency
/// model is the frozen encoder).
pub fn is_decoder_param(name: &str) -> bool {
    name.starts_with("dec.")
}

/// Q-network head over embeddings: two hidden layers of `hidden` units,
/// one output per action.
pub fn dqn_head(embed_dim: usize, hidden: usize, actions: usize) -> NetworkSpec {
    let (mut b, x) = SpecBuilder::new(vec![embed_dim]);
    let mut cur = b.linear(x, "fc1", hidden);
    cur = b.relu(cur);
    cur = b.linear(cur, "fc2", hidden);
    cur = b.relu(cur);
    let out = b.linear(cur, "out", actions);
    b.finish(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_encoder_embedding_is_2304() {
        assert_eq!(paper_patch_encoder().embedding_dim(), 2304);
    }

    #[test]
    fn densenet_compression_halves_channels() {
        let cfg = DenseNetConfig {
            input: [16, 16, 8],
            stem_channels: 4,
            stem_stride: 1,
            growth: 2,
            blocks: 2,
            layers_per_block: 2,
            compression: 0.5,
            transition_strides: vec![2],
            classes: 2,
        };
        let spec = densenet_classifier(&cfg);
        // Stem 4 + 2 layers of growth 2 = 8 channels entering the
        // transition, compressed to 4.
        assert_eq!(spec.param_shapes().unwrap()["t0.conv.weight"][0], 4);
        assert_eq!(spec.output_shape().unwrap(), vec![2]);
    }

    #[test]
    fn saliency_decoder_returns_to_input_extents() {
        let cfg = DenseNetConfig {
            input: [16, 16, 8],
            stem_channels: 3,
            stem_stride: 2,
            growth: 2,
            blocks: 3,
            layers_per_block: 1,
            compression: 0.5,
            transition_strides: vec![2, 2],
            classes: 2,
        };
        let dec = DecoderConfig { channels: vec![4, 4, 3] };
        let spec = saliency_model(&cfg, &dec);
        assert_eq!(spec.tap_shape("mask").unwrap(), vec![1, 8, 16, 16]);
    }

    #[test]
    fn dqn_head_outputs_one_value_per_action() {
        let spec = dqn_head(32, 16, 9);
        assert_eq!(spec.output_shape().unwrap(), vec![9]);
    }
}
