//! Dual-encoder segmentation model.
//!
//! Two structurally identical convolutional encoders produce causal and
//! bias feature maps at a reduced output stride; two 1x1-convolution heads
//! classify the channel-concatenated pair. Small by design: 3x3 kernels,
//! stride-2 downsampling stages, ReLU, no normalization unless asked for.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::labels::LabelBatch;
use crate::rng::{self, tag};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu,
    Tanh,
}

impl Nonlinearity {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Nonlinearity::Relu),
            "tanh" => Some(Nonlinearity::Tanh),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Nonlinearity::Relu => "relu",
            Nonlinearity::Tanh => "tanh",
        }
    }
}

/// Which features the causal head sees at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    /// Concatenated `[causal; bias]`, matching how the head is trained.
    Concat,
    /// Bias channels zeroed; analysis mode.
    CausalOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub feature_dim: usize,
    /// Output channels per conv stage; the last entry must equal
    /// `feature_dim`. The first `log2(output_stride)` stages use stride 2.
    pub widths: Vec<usize>,
    pub output_stride: usize,
    pub num_classes: usize,
    pub nonlinearity: Nonlinearity,
    pub group_norm: bool,
    pub seed: u64,
}

impl Default for ArchConfig {
    /// Desk-scale encoder.
    fn default() -> Self {
        ArchConfig {
            in_channels: 3,
            feature_dim: 12,
            widths: vec![16, 32, 12],
            output_stride: 4,
            num_classes: 4,
            nonlinearity: Nonlinearity::Relu,
            group_norm: false,
            seed: 0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::Contract("arch: feature_dim must be >= 2".into()));
        }
        if self.widths.is_empty() {
            return Err(Error::Contract("arch: widths must be non-empty".into()));
        }
        if *self.widths.last().unwrap() != self.feature_dim {
            return Err(Error::Contract(
                "arch: last width must equal feature_dim".into(),
            ));
        }
        if !self.output_stride.is_power_of_two() {
            return Err(Error::Contract("arch: output_stride must be a power of two".into()));
        }
        if self.widths.len() < self.stride2_stages() {
            return Err(Error::Contract(format!(
                "arch: {} stages cannot reach output stride {}",
                self.widths.len(),
                self.output_stride
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Contract("arch: num_classes must be >= 2".into()));
        }
        Ok(())
    }

    fn stride2_stages(&self) -> usize {
        self.output_stride.trailing_zeros() as usize
    }

    fn stage_stride(&self, stage: usize) -> usize {
        if stage < self.stride2_stages() {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    /// Group-norm affine parameters, present only when the arch asks for
    /// normalization (never on the final stage).
    pub gn: Option<(Tensor, Tensor)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub layers: Vec<ConvLayer>,
}

/// 1x1 convolution head mapping `2 * feature_dim` channels to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub enc_causal: Encoder,
    pub enc_bias: Encoder,
    pub head_causal: Head,
    pub head_bias: Head,
}

/// He-style initialization: weights ~ N(0, sqrt(2 / fan_in)), biases zero,
/// group-norm gamma one / beta zero. Deterministic in `arch.seed`.
pub fn init_params(arch: &ArchConfig) -> Result<ModelParams> {
    arch.validate()?;
    let mut ordinal = 0u64;
    let mut make_encoder = || -> Encoder {
        let mut layers = Vec::with_capacity(arch.widths.len());
        let mut cin = arch.in_channels;
        for (stage, &cout) in arch.widths.iter().enumerate() {
            let fan_in = cin * 9;
            let mut weight = Tensor::zeros(&[cout, cin, 3, 3]);
            weight.fill_normal(
                &mut rng::stream(arch.seed, &[tag::INIT, ordinal]),
                (2.0 / fan_in as f64).sqrt(),
            );
            ordinal += 1;
            let gn = (arch.group_norm && stage + 1 < arch.widths.len()).then(|| {
                (Tensor::full(&[cout], 1.0), Tensor::zeros(&[cout]))
            });
            layers.push(ConvLayer {
                weight,
                bias: Tensor::zeros(&[cout]),
                stride: arch.stage_stride(stage),
                gn,
            });
            cin = cout;
        }
        Encoder { layers }
    };
    let enc_causal = make_encoder();
    let enc_bias = make_encoder();
    let mut make_head = || -> Head {
        let fan_in = 2 * arch.feature_dim;
        let mut weight = Tensor::zeros(&[arch.num_classes, fan_in, 1, 1]);
        weight.fill_normal(
            &mut rng::stream(arch.seed, &[tag::INIT, ordinal]),
            (2.0 / fan_in as f64).sqrt(),
        );
        ordinal += 1;
        Head {
            weight,
            bias: Tensor::zeros(&[arch.num_classes]),
        }
    };
    let head_causal = make_head();
    let head_bias = make_head();
    Ok(ModelParams {
        arch: arch.clone(),
        enc_causal,
        enc_bias,
        head_causal,
        head_bias,
    })
}

impl ModelParams {
    /// Stable (name, tensor) listing used by the optimizer and checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, enc) in [("enc_causal", &self.enc_causal), ("enc_bias", &self.enc_bias)] {
            for (i, layer) in enc.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &layer.weight));
                out.push((format!("{prefix}.{i}.bias"), &layer.bias));
                if let Some((gamma, beta)) = &layer.gn {
                    out.push((format!("{prefix}.{i}.gn_gamma"), gamma));
                    out.push((format!("{prefix}.{i}.gn_beta"), beta));
                }
            }
        }
        for (prefix, head) in [("head_causal", &self.head_causal), ("head_bias", &self.head_bias)] {
            out.push((format!("{prefix}.weight"), &head.weight));
            out.push((format!("{prefix}.bias"), &head.bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (prefix, enc) in [
            ("enc_causal", &mut self.enc_causal),
            ("enc_bias", &mut self.enc_bias),
        ] {
            for (i, layer) in enc.layers.iter_mut().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &mut layer.weight));
                out.push((format!("{prefix}.{i}.bias"), &mut layer.bias));
                if let Some((gamma, beta)) = &mut layer.gn {
                    out.push((format!("{prefix}.{i}.gn_gamma"), gamma));
                    out.push((format!("{prefix}.{i}.gn_beta"), beta));
                }
            }
        }
        for (prefix, head) in [
            ("head_causal", &mut self.head_causal),
            ("head_bias", &mut self.head_bias),
        ] {
            out.push((format!("{prefix}.weight"), &mut head.weight));
            out.push((format!("{prefix}.bias"), &mut head.bias));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Copy the trained causal encoder into the bias encoder and perturb it
    /// with small Gaussian noise to break the symmetry.
    pub fn reinit_bias_encoder_from_causal(&mut self, sigma: f64, seed: u64) {
        self.enc_bias = self.enc_causal.clone();
        for (i, layer) in self.enc_bias.layers.iter_mut().enumerate() {
            let mut noise = Tensor::zeros(layer.weight.shape());
            noise.fill_normal(&mut rng::stream(seed, &[tag::PERTURB, i as u64]), sigma);
            layer.weight.add_scaled_in_place(&noise, 1.0);
        }
    }

    fn check_input(&self, images: &Tensor, context: &str) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.arch.in_channels {
            return Err(Error::Contract(format!(
                "{context}: expected [B, {}, H, W], got {:?}",
                self.arch.in_channels, s
            )));
        }
        if !s[2].is_multiple_of(self.arch.output_stride) || !s[3].is_multiple_of(self.arch.output_stride) {
            return Err(Error::Contract(format!(
                "{context}: {}x{} not divisible by output stride {}",
                s[2], s[3], self.arch.output_stride
            )));
        }
        Ok(())
    }
}

// ── Graph binding ──────────────────────────────────────────────────────────

/// (weight, bias, optional group-norm affine pair, stride) per layer.
type BoundLayer = (NodeId, NodeId, Option<(NodeId, NodeId)>, usize);

/// Tape leaves for one encoder's parameters.
pub struct BoundEncoder {
    layers: Vec<BoundLayer>,
    nonlinearity: Nonlinearity,
}

pub struct BoundHead {
    weight: NodeId,
    bias: NodeId,
}

/// All model parameters registered as tape leaves, with the (name, node)
/// pairs needed to pull gradients back out after `backward`.
pub struct BoundModel {
    pub enc_causal: BoundEncoder,
    pub enc_bias: BoundEncoder,
    pub head_causal: BoundHead,
    pub head_bias: BoundHead,
    pub param_nodes: Vec<(String, NodeId)>,
    arch: ArchConfig,
}

impl BoundModel {
    pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> BoundModel {
        let mut param_nodes = Vec::new();
        let mut bind_encoder = |tape: &mut Tape, prefix: &str, enc: &Encoder| -> BoundEncoder {
            let mut layers = Vec::with_capacity(enc.layers.len());
            for (i, layer) in enc.layers.iter().enumerate() {
                let w = tape.leaf(layer.weight.clone(), trainable);
                let b = tape.leaf(layer.bias.clone(), trainable);
                param_nodes.push((format!("{prefix}.{i}.weight"), w));
                param_nodes.push((format!("{prefix}.{i}.bias"), b));
                let gn = layer.gn.as_ref().map(|(gamma, beta)| {
                    let g = tape.leaf(gamma.clone(), trainable);
                    let be = tape.leaf(beta.clone(), trainable);
                    param_nodes.push((format!("{prefix}.{i}.gn_gamma"), g));
                    param_nodes.push((format!("{prefix}.{i}.gn_beta"), be));
                    (g, be)
                });
                layers.push((w, b, gn, layer.stride));
            }
            BoundEncoder {
                layers,
                nonlinearity: params.arch.nonlinearity,
            }
        };
        let enc_causal = bind_encoder(tape, "enc_causal", &params.enc_causal);
        let enc_bias = bind_encoder(tape, "enc_bias", &params.enc_bias);
        let mut bind_head = |tape: &mut Tape, prefix: &str, head: &Head| -> BoundHead {
            let w = tape.leaf(head.weight.clone(), trainable);
            let b = tape.leaf(head.bias.clone(), trainable);
            param_nodes.push((format!("{prefix}.weight"), w));
            param_nodes.push((format!("{prefix}.bias"), b));
            BoundHead { weight: w, bias: b }
        };
        let head_causal = bind_head(tape, "head_causal", &params.head_causal);
        let head_bias = bind_head(tape, "head_bias", &params.head_bias);
        BoundModel {
            enc_causal,
            enc_bias,
            head_causal,
            head_bias,
            param_nodes,
            arch: params.arch.clone(),
        }
    }

    fn run_encoder(&self, tape: &mut Tape, enc: &BoundEncoder, images: NodeId) -> Result<NodeId> {
        let mut x = images;
        let last = enc.layers.len() - 1;
        for (i, &(w, b, gn, stride)) in enc.layers.iter().enumerate() {
            x = tape.conv2d(x, w, b, stride, 1)?;
            if i < last {
                if let Some((gamma, beta)) = gn {
                    let groups = groups_for(tape.value(x).shape()[1]);
                    x = tape.group_norm(x, gamma, beta, groups)?;
                }
                x = match enc.nonlinearity {
                    Nonlinearity::Relu => tape.relu(x),
                    Nonlinearity::Tanh => tape.tanh(x),
                };
            }
        }
        Ok(x)
    }

    /// `[B, 3, H, W] -> [B, d, H/s, W/s]` through the causal encoder.
    pub fn encode_causal(&self, tape: &mut Tape, images: NodeId) -> Result<NodeId> {
        self.check_images(tape, images, "encode_causal")?;
        self.run_encoder(tape, &self.enc_causal, images)
    }

    /// Same contract through the bias encoder.
    pub fn encode_bias(&self, tape: &mut Tape, images: NodeId) -> Result<NodeId> {
        self.check_images(tape, images, "encode_bias")?;
        self.run_encoder(tape, &self.enc_bias, images)
    }

    /// Per-pixel class logits from a `[B, 2d, h, w]` feature tensor.
    pub fn classify_causal(&self, tape: &mut Tape, features: NodeId) -> Result<NodeId> {
        self.check_features(tape, features, "classify(causal)")?;
        tape.conv2d(features, self.head_causal.weight, self.head_causal.bias, 1, 0)
    }

    pub fn classify_bias(&self, tape: &mut Tape, features: NodeId) -> Result<NodeId> {
        self.check_features(tape, features, "classify(bias)")?;
        tape.conv2d(features, self.head_bias.weight, self.head_bias.bias, 1, 0)
    }

    fn check_images(&self, tape: &Tape, images: NodeId, context: &str) -> Result<()> {
        let s = tape.value(images).shape();
        if s.len() != 4 || s[1] != self.arch.in_channels {
            return Err(Error::Contract(format!(
                "{context}: expected [B, {}, H, W], got {s:?}",
                self.arch.in_channels
            )));
        }
        if !s[2].is_multiple_of(self.arch.output_stride) || !s[3].is_multiple_of(self.arch.output_stride) {
            return Err(Error::Contract(format!(
                "{context}: {}x{} not divisible by output stride {}",
                s[2], s[3], self.arch.output_stride
            )));
        }
        Ok(())
    }

    fn check_features(&self, tape: &Tape, features: NodeId, context: &str) -> Result<()> {
        let s = tape.value(features).shape();
        if s.len() != 4 || s[1] != 2 * self.arch.feature_dim {
            return Err(Error::Contract(format!(
                "{context}: expected channel dim {}, got {s:?}",
                2 * self.arch.feature_dim
            )));
        }
        Ok(())
    }
}

fn groups_for(channels: usize) -> usize {
    let mut g = channels.min(8);
    while !channels.is_multiple_of(g) {
        g -= 1;
    }
    g
}

/// Bilinear upsample of `[B, K, h, w]` logits to exactly `(height, width)`.
pub fn upsample_logits(tape: &mut Tape, logits: NodeId, height: usize, width: usize) -> Result<NodeId> {
    let s = tape.value(logits).shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Contract("upsample_logits: rank-4 input".into()));
    }
    let (h, w) = (s[2], s[3]);
    if !height.is_multiple_of(h) || !width.is_multiple_of(w) || height / h != width / w {
        return Err(Error::Contract(format!(
            "upsample_logits: cannot scale {h}x{w} to {height}x{width} by an integer factor"
        )));
    }
    tape.upsample_bilinear(logits, height / h)
}

// ── Forward-only inference ─────────────────────────────────────────────────

/// Causal feature map, no gradients.
pub fn encode_causal_eval(params: &ModelParams, images: &Tensor) -> Result<Tensor> {
    params.check_input(images, "encode_causal")?;
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let bound = BoundModel::bind(&mut tape, params, false);
    let f = bound.encode_causal(&mut tape, x)?;
    Ok(tape.value(f).clone())
}

/// Full-resolution class logits through the inference path.
pub fn infer_logits(params: &ModelParams, images: &Tensor, mode: InferenceMode) -> Result<Tensor> {
    params.check_input(images, "infer")?;
    let (h, w) = (images.shape()[2], images.shape()[3]);
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let bound = BoundModel::bind(&mut tape, params, false);
    let causal = bound.encode_causal(&mut tape, x)?;
    let bias = match mode {
        InferenceMode::Concat => bound.encode_bias(&mut tape, x)?,
        InferenceMode::CausalOnly => {
            let shape = tape.value(causal).shape().to_vec();
            tape.constant(Tensor::zeros(&shape))
        }
    };
    let features = tape.concat_channels(causal, bias)?;
    let logits = bound.classify_causal(&mut tape, features)?;
    let up = upsample_logits(&mut tape, logits, h, w)?;
    Ok(tape.value(up).clone())
}

/// Argmax prediction and per-pixel max softmax probability.
pub fn predict(
    params: &ModelParams,
    images: &Tensor,
    mode: InferenceMode,
) -> Result<(LabelBatch, Tensor)> {
    let logits = infer_logits(params, images, mode)?;
    Ok(argmax_with_confidence(&logits))
}

/// Per-pixel argmax over the class axis, plus the winning softmax
/// probability. Ties resolve to the lowest class index.
pub fn argmax_with_confidence(logits: &Tensor) -> (LabelBatch, Tensor) {
    let s = logits.shape();
    let (bsz, k, h, w) = (s[0], s[1], s[2], s[3]);
    let probs = crate::autodiff::kernels::softmax_channels(logits);
    let plane = h * w;
    let mut labels = vec![0u8; bsz * plane];
    let mut conf = Tensor::zeros(&[bsz, h, w]);
    for b in 0..bsz {
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..k {
                let v = probs.data()[(b * k + c) * plane + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            labels[b * plane + p] = best as u8;
            conf.data_mut()[b * plane + p] = best_v;
        }
    }
    (
        LabelBatch {
            batch: bsz,
            height: h,
            width: w,
            data: labels,
        },
        conf,
    )
}
