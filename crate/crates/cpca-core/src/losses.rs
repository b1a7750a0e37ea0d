//! Scalar training objectives.
//!
//! Everything differentiable is built on tape nodes; each objective also
//! has a pure-value twin used by tests and logging so the graph route can
//! be checked against a direct evaluation.

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;
use crate::labels::{LabelBatch, IGNORE};
use crate::proto::{PrototypeBank, SimMap};
use crate::tensor::Tensor;

/// All loss terms of one iteration plus the pixel counts behind each mean.
/// Terms disabled by ablation or warmup stay zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBundle {
    pub l_seg: f64,
    pub l_s: f64,
    pub l_t: f64,
    pub l_cc: f64,
    pub l_c1: f64,
    pub l_c2: f64,
    pub l_b1: f64,
    pub l_b2: f64,
    pub l_c: f64,
    pub l_b: f64,
    pub total: f64,
    pub n_seg: usize,
    pub n_s: usize,
    pub n_t: usize,
    pub n_c1: usize,
    pub n_c2: usize,
    pub n_b1: usize,
    pub n_b2: usize,
}

impl LossBundle {
    pub const CSV_HEADER: &'static str = "l_seg,l_s,l_t,l_cc,l_c1,l_c2,l_b1,l_b2,l_c,l_b,total,n_seg,n_s,n_t,n_c1,n_c2,n_b1,n_b2";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.l_seg,
            self.l_s,
            self.l_t,
            self.l_cc,
            self.l_c1,
            self.l_c2,
            self.l_b1,
            self.l_b2,
            self.l_c,
            self.l_b,
            self.total,
            self.n_seg,
            self.n_s,
            self.n_t,
            self.n_c1,
            self.n_c2,
            self.n_b1,
            self.n_b2
        )
    }
}

/// Mean cross entropy over non-ignored pixels; full- or feature-resolution
/// logits. Returns the scalar node and the pixel count.
pub fn ce_pixels(tape: &mut Tape, logits: NodeId, labels: &LabelBatch) -> Result<(NodeId, usize)> {
    tape.ce_pixels(logits, labels)
}

/// Symmetric cross entropy: `alpha * CE + beta * RCE` with the reverse term
/// clamping `log 0` to `log_floor`.
pub fn sce_pixels(
    tape: &mut Tape,
    logits: NodeId,
    labels: &LabelBatch,
    alpha: f64,
    beta: f64,
    log_floor: f64,
) -> Result<(NodeId, usize)> {
    tape.sce_pixels(logits, labels, alpha, beta, log_floor)
}

/// Graph-side prototype contrast terms. `kernel_nodes` are the constant
/// conv kernels holding the prototypes; the trainer asserts they never
/// acquire gradients (the bank is a buffer, not a parameter).
pub struct ContrastTerms {
    pub l_s: NodeId,
    pub l_t: NodeId,
    pub l_cc: NodeId,
    pub n_s: usize,
    pub n_t: usize,
    pub kernel_nodes: (NodeId, NodeId),
}

/// Prototype contrastive loss over causal features. The similarity softmax
/// is expressed as a 1x1 convolution against the (constant) prototype
/// kernel followed by pixel cross entropy, so gradients reach the encoder
/// but never the bank. The target side uses pseudo-labels; pass an
/// all-IGNORE batch for a source-only iteration.
pub fn contrast_loss(
    tape: &mut Tape,
    causal_source: NodeId,
    labels_source: &LabelBatch,
    causal_target: NodeId,
    pseudo_target: &LabelBatch,
    bank: &PrototypeBank,
    tau: f64,
) -> Result<ContrastTerms> {
    if !bank.all_valid() {
        return Err(crate::error::Error::IncompleteBank(bank.invalid_classes()));
    }
    let kernel = bank.as_similarity_kernel(tau);
    let zero_bias = Tensor::zeros(&[bank.num_classes()]);

    let ks = tape.constant(kernel.clone());
    let bs = tape.constant(zero_bias.clone());
    let scores_s = tape.conv2d(causal_source, ks, bs, 1, 0)?;
    let (l_s, n_s) = tape.ce_pixels(scores_s, labels_source)?;

    let kt = tape.constant(kernel);
    let bt = tape.constant(zero_bias);
    let scores_t = tape.conv2d(causal_target, kt, bt, 1, 0)?;
    let (l_t, n_t) = tape.ce_pixels(scores_t, pseudo_target)?;

    let l_cc = tape.add_scalars(&[(l_s, 1.0), (l_t, 1.0)]);
    Ok(ContrastTerms {
        l_s,
        l_t,
        l_cc,
        n_s,
        n_t,
        kernel_nodes: (ks, kt),
    })
}

/// Direct evaluation of the contrast terms from a similarity map: mean of
/// `-log S^y` over labeled pixels per domain. Used as the non-graph route.
pub fn contrast_loss_values(
    sim_source: &SimMap,
    labels_source: &LabelBatch,
    sim_target: &SimMap,
    pseudo_target: &LabelBatch,
) -> (f64, f64, f64) {
    let l_s = mean_neg_log_own_class(sim_source, labels_source);
    let l_t = mean_neg_log_own_class(sim_target, pseudo_target);
    (l_s, l_t, l_s + l_t)
}

fn mean_neg_log_own_class(sim: &SimMap, labels: &LabelBatch) -> f64 {
    let s = sim.probs.shape();
    let (bsz, k, h, w) = (s[0], s[1], s[2], s[3]);
    assert_eq!((labels.batch, labels.height, labels.width), (bsz, h, w));
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..bsz {
        for p in 0..plane {
            let y = labels.data[b * plane + p];
            if y == IGNORE {
                continue;
            }
            total -= sim.probs.data()[(b * k + y as usize) * plane + p]
                .max(f64::MIN_POSITIVE)
                .ln();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Causal-classifier losses: plain CE on the biased features and on the
/// counterfactual (bias-swapped) features, both against the true labels.
pub struct CausalClsTerms {
    pub l_c1: NodeId,
    pub l_c2: NodeId,
    pub l_c: NodeId,
    pub n_c1: usize,
    pub n_c2: usize,
}

pub fn causal_cls_loss(
    tape: &mut Tape,
    logits_biased: NodeId,
    logits_unbiased: NodeId,
    labels: &LabelBatch,
) -> Result<CausalClsTerms> {
    let (l_c1, n_c1) = tape.ce_pixels(logits_biased, labels)?;
    let (l_c2, n_c2) = tape.ce_pixels(logits_unbiased, labels)?;
    let l_c = tape.add_scalars(&[(l_c1, 1.0), (l_c2, 1.0)]);
    Ok(CausalClsTerms {
        l_c1,
        l_c2,
        l_c,
        n_c1,
        n_c2,
    })
}

/// Bias-classifier losses: symmetric cross entropy on the biased features
/// against the true labels, and on the counterfactual features against the
/// labels carried along the same batch permutation.
pub struct BiasClsTerms {
    pub l_b1: NodeId,
    pub l_b2: NodeId,
    pub l_b: NodeId,
    pub n_b1: usize,
    pub n_b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceParams {
    pub alpha: f64,
    pub beta: f64,
    pub log_floor: f64,
}

impl Default for SceParams {
    fn default() -> Self {
        SceParams {
            alpha: 1.0,
            beta: 1.0,
            log_floor: -4.0,
        }
    }
}

pub fn bias_cls_loss(
    tape: &mut Tape,
    logits_biased: NodeId,
    labels: &LabelBatch,
    logits_unbiased: NodeId,
    labels_swapped: &LabelBatch,
    sce: SceParams,
) -> Result<BiasClsTerms> {
    let (l_b1, n_b1) = tape.sce_pixels(logits_biased, labels, sce.alpha, sce.beta, sce.log_floor)?;
    let (l_b2, n_b2) = tape.sce_pixels(
        logits_unbiased,
        labels_swapped,
        sce.alpha,
        sce.beta,
        sce.log_floor,
    )?;
    let l_b = tape.add_scalars(&[(l_b1, 1.0), (l_b2, 1.0)]);
    Ok(BiasClsTerms {
        l_b1,
        l_b2,
        l_b,
        n_b1,
        n_b2,
    })
}

/// Scalar term nodes entering the total; absent terms contribute nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct TotalParts {
    pub l_cc: Option<NodeId>,
    pub l_c1: Option<NodeId>,
    pub l_c2: Option<NodeId>,
    pub l_b1: Option<NodeId>,
    pub l_b2: Option<NodeId>,
}

/// Warmup-gated total. Before `warmup_iters` only the contrast term and
/// the non-counterfactual classifier terms train the model; from the
/// boundary iteration on (inclusive) the counterfactual terms join.
pub fn total_loss(tape: &mut Tape, parts: TotalParts, iteration: usize, warmup_iters: usize) -> NodeId {
    let full = iteration >= warmup_iters;
    let mut terms: Vec<(NodeId, f64)> = Vec::new();
    for id in [parts.l_cc, parts.l_c1, parts.l_b1].into_iter().flatten() {
        terms.push((id, 1.0));
    }
    if full {
        for id in [parts.l_c2, parts.l_b2].into_iter().flatten() {
            terms.push((id, 1.0));
        }
    }
    tape.add_scalars(&terms)
}

/// Pure twin of [`total_loss`] on already-evaluated values.
pub fn total_loss_value(
    l_cc: f64,
    l_c1: f64,
    l_c2: f64,
    l_b1: f64,
    l_b2: f64,
    iteration: usize,
    warmup_iters: usize,
) -> f64 {
    if iteration >= warmup_iters {
        l_cc + l_c1 + l_c2 + l_b1 + l_b2
    } else {
        l_cc + l_c1 + l_b1
    }
}
