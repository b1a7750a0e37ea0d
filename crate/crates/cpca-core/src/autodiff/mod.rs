//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Nodes are appended in evaluation order, so node ids already form a
//! topological order and the backward pass is a single reverse sweep.
//! Values are computed eagerly at op construction; forward-only evaluation
//! is the same tape without a `backward` call.

pub mod kernels;

use crate::error::{Error, Result};
use crate::labels::{LabelBatch, IGNORE};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
    },
    Relu {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    Upsample {
        x: NodeId,
        factor: usize,
    },
    PermuteBatch {
        x: NodeId,
        perm: Vec<usize>,
    },
    CePixels {
        logits: NodeId,
        labels: LabelBatch,
    },
    ScePixels {
        logits: NodeId,
        labels: LabelBatch,
        alpha: f64,
        beta: f64,
        log_floor: f64,
    },
    /// Weighted sum of scalar nodes.
    AddScalars {
        parts: Vec<(NodeId, f64)>,
    },
}

#[derive(Debug, Clone)]
enum Cache {
    None,
    /// Softmax probabilities and non-ignored pixel count for CE/SCE.
    Probs { probs: Tensor, count: usize },
    /// Per-group mean and inverse std for group norm.
    Norm { means: Vec<f64>, invs: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    cache: Cache,
}

/// Gradients indexed by node id; `None` for nodes that do not require grad
/// or that the loss does not reach.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Non-ignored pixel count of a CE/SCE node.
    pub fn pixel_count(&self, id: NodeId) -> Option<usize> {
        match &self.nodes[id].cache {
            Cache::Probs { count, .. } => Some(*count),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, cache: Cache) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            cache,
        });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad, Cache::None)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Copy a node's value into a fresh gradient-free leaf.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id].value.clone();
        self.constant(v)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(Error::Contract(format!(
                "conv2d ranks: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        if xs[1] != ws[1] {
            return Err(Error::Contract(format!(
                "conv2d channels: input has {}, weight expects {}",
                xs[1], ws[1]
            )));
        }
        if ws[0] != bs[0] {
            return Err(Error::Contract(format!(
                "conv2d bias: weight outputs {}, bias has {}",
                ws[0], bs[0]
            )));
        }
        if kernels::conv_out_dim(xs[2], ws[2], stride, pad).is_none()
            || kernels::conv_out_dim(xs[3], ws[3], stride, pad).is_none()
        {
            return Err(Error::Contract(format!(
                "conv2d geometry: input {}x{} kernel {}x{} stride {stride} pad {pad}",
                xs[2], xs[3], ws[2], ws[3]
            )));
        }
        let value = kernels::conv2d(self.value(x), self.value(w), self.value(b), stride, pad);
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, value, rg, Cache::None))
    }

    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || !xs[1].is_multiple_of(groups) {
            return Err(Error::Contract(format!(
                "group_norm: shape {xs:?} with {groups} groups"
            )));
        }
        if self.value(gamma).shape() != [xs[1]] || self.value(beta).shape() != [xs[1]] {
            return Err(Error::Contract("group_norm: gamma/beta must be [C]".into()));
        }
        let (value, means, invs) = kernels::group_norm(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            groups,
            1e-5,
        );
        let rg =
            self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(
            Op::GroupNorm { x, gamma, beta, groups },
            value,
            rg,
            Cache::Norm { means, invs },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = kernels::relu(self.value(x));
        let rg = self.requires_grad(x);
        self.push(Op::Relu { x }, value, rg, Cache::None)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = kernels::tanh(self.value(x));
        let rg = self.requires_grad(x);
        self.push(Op::Tanh { x }, value, rg, Cache::None)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(Error::Contract(format!(
                "concat_channels: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let value = kernels::concat_channels(self.value(a), self.value(b));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::ConcatChannels { a, b }, value, rg, Cache::None))
    }

    pub fn upsample_bilinear(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if factor == 0 || self.value(x).shape().len() != 4 {
            return Err(Error::Contract("upsample: rank-4 input, factor >= 1".into()));
        }
        let value = kernels::upsample_bilinear(self.value(x), factor);
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Upsample { x, factor }, value, rg, Cache::None))
    }

    pub fn permute_batch(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let bsz = self.value(x).shape()[0];
        let mut seen = vec![false; bsz];
        if perm.len() != bsz || perm.iter().any(|&p| p >= bsz || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract(format!(
                "permute_batch: {perm:?} is not a bijection on 0..{bsz}"
            )));
        }
        let value = kernels::permute_batch(self.value(x), perm);
        let rg = self.requires_grad(x);
        Ok(self.push(
            Op::PermuteBatch { x, perm: perm.to_vec() },
            value,
            rg,
            Cache::None,
        ))
    }

    fn check_labels(&self, logits: NodeId, labels: &LabelBatch) -> Result<()> {
        let ls = self.value(logits).shape();
        if ls.len() != 4 {
            return Err(Error::Contract("pixel loss: logits must be rank 4".into()));
        }
        let (bsz, k, h, w) = (ls[0], ls[1], ls[2], ls[3]);
        if (labels.batch, labels.height, labels.width) != (bsz, h, w) {
            return Err(Error::Contract(format!(
                "pixel loss: logits {ls:?} vs labels [{}, {}, {}]",
                labels.batch, labels.height, labels.width
            )));
        }
        for &v in &labels.data {
            if v != IGNORE && (v as usize) >= k {
                return Err(Error::Contract(format!(
                    "pixel loss: label {v} out of range for {k} classes"
                )));
            }
        }
        Ok(())
    }

    /// Mean cross entropy over non-ignored pixels. Returns the scalar node
    /// and the pixel count that entered the mean.
    pub fn ce_pixels(&mut self, logits: NodeId, labels: &LabelBatch) -> Result<(NodeId, usize)> {
        self.check_labels(logits, labels)?;
        let (loss, count, probs) = kernels::ce_pixels_forward(self.value(logits), labels);
        let rg = self.requires_grad(logits);
        let id = self.push(
            Op::CePixels {
                logits,
                labels: labels.clone(),
            },
            Tensor::scalar(loss),
            rg,
            Cache::Probs { probs, count },
        );
        Ok((id, count))
    }

    /// Mean symmetric cross entropy over non-ignored pixels.
    pub fn sce_pixels(
        &mut self,
        logits: NodeId,
        labels: &LabelBatch,
        alpha: f64,
        beta: f64,
        log_floor: f64,
    ) -> Result<(NodeId, usize)> {
        self.check_labels(logits, labels)?;
        if alpha < 0.0 || beta < 0.0 || log_floor >= 0.0 {
            return Err(Error::Contract(
                "sce: alpha, beta must be >= 0 and log_floor < 0".into(),
            ));
        }
        let (loss, count, probs) =
            kernels::sce_pixels_forward(self.value(logits), labels, alpha, beta, log_floor);
        let rg = self.requires_grad(logits);
        let id = self.push(
            Op::ScePixels {
                logits,
                labels: labels.clone(),
                alpha,
                beta,
                log_floor,
            },
            Tensor::scalar(loss),
            rg,
            Cache::Probs { probs, count },
        );
        Ok((id, count))
    }

    /// Weighted sum of scalar nodes.
    pub fn add_scalars(&mut self, parts: &[(NodeId, f64)]) -> NodeId {
        let mut total = 0.0;
        let mut rg = false;
        for &(id, coeff) in parts {
            total += coeff * self.value(id).item();
            rg |= self.requires_grad(id);
        }
        self.push(
            Op::AddScalars {
                parts: parts.to_vec(),
            },
            Tensor::scalar(total),
            rg,
            Cache::None,
        )
    }

    /// Reverse sweep from a scalar root. Gradient accumulation visits nodes
    /// in strictly decreasing id order, so the result is deterministic.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward: root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::new(
            self.value(root).shape().to_vec(),
            vec![1.0],
        ));
        for id in (0..=root).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let dout = grads[id].take().unwrap();
            // Keep leaf grads around for the caller.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(dout);
                continue;
            }
            self.backprop_node(id, &dout, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        match &mut grads[id] {
            Some(existing) => existing.add_scaled_in_place(&g, 1.0),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, id: NodeId, dout: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => unreachable!(),
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    dout,
                    *stride,
                    *pad,
                );
                if self.requires_grad(*x) {
                    Self::accumulate(grads, *x, dx);
                }
                if self.requires_grad(*w) {
                    Self::accumulate(grads, *w, dw);
                }
                if self.requires_grad(*b) {
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups } => {
                let (means, invs) = match &self.nodes[id].cache {
                    Cache::Norm { means, invs } => (means, invs),
                    _ => unreachable!(),
                };
                let (dx, dgamma, dbeta) = kernels::group_norm_backward(
                    self.value(*x),
                    self.value(*gamma),
                    dout,
                    *groups,
                    means,
                    invs,
                );
                if self.requires_grad(*x) {
                    Self::accumulate(grads, *x, dx);
                }
                if self.requires_grad(*gamma) {
                    Self::accumulate(grads, *gamma, dgamma);
                }
                if self.requires_grad(*beta) {
                    Self::accumulate(grads, *beta, dbeta);
                }
            }
            Op::Relu { x } => {
                if self.requires_grad(*x) {
                    let dx = kernels::relu_backward(self.value(*x), dout);
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Tanh { x } => {
                if self.requires_grad(*x) {
                    let dx = kernels::tanh_backward(&self.nodes[id].value, dout);
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::ConcatChannels { a, b } => {
                let ca = self.value(*a).shape()[1];
                let cb = self.value(*b).shape()[1];
                let (da, db) = kernels::concat_channels_backward(dout, ca, cb);
                if self.requires_grad(*a) {
                    Self::accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::Upsample { x, factor } => {
                if self.requires_grad(*x) {
                    let dx = kernels::upsample_bilinear_backward(dout, *factor);
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::PermuteBatch { x, perm } => {
                if self.requires_grad(*x) {
                    // Gradient scatters back through the inverse permutation.
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let dx = kernels::permute_batch(dout, &inv);
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::CePixels { logits, labels } => {
                if self.requires_grad(*logits) {
                    let (probs, count) = match &self.nodes[id].cache {
                        Cache::Probs { probs, count } => (probs, *count),
                        _ => unreachable!(),
                    };
                    let dx = kernels::ce_pixels_backward(probs, labels, count, dout.item());
                    Self::accumulate(grads, *logits, dx);
                }
            }
            Op::ScePixels {
                logits,
                labels,
                alpha,
                beta,
                log_floor,
            } => {
                if self.requires_grad(*logits) {
                    let (probs, count) = match &self.nodes[id].cache {
                        Cache::Probs { probs, count } => (probs, *count),
                        _ => unreachable!(),
                    };
                    let dx = kernels::sce_pixels_backward(
                        probs,
                        labels,
                        count,
                        *alpha,
                        *beta,
                        *log_floor,
                        dout.item(),
                    );
                    Self::accumulate(grads, *logits, dx);
                }
            }
            Op::AddScalars { parts } => {
                for &(pid, coeff) in parts {
                    if self.requires_grad(pid) {
                        Self::accumulate(grads, pid, dout.scale(coeff));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        let mut rng = stream(seed, &[99]);
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    /// FD check for a scalar-valued graph builder over one input tensor.
    fn check_grad<F>(shape: &[usize], seed: u64, builder: F, tol: f64)
    where
        F: Fn(&mut Tape, Tensor) -> NodeId,
    {
        let x0 = rand_tensor(shape, seed);
        let mut tape = Tape::new();
        // builder creates the leaf itself from the tensor we hand it
        let loss = builder(&mut tape, x0.clone());
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(0).expect("leaf gradient").clone();

        let eps = 1e-6;
        let mut numeric = Tensor::zeros(shape);
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += eps;
            let mut tp = Tape::new();
            let lp = builder(&mut tp, xp);
            let fp = tp.value(lp).item();

            let mut xm = x0.clone();
            xm.data_mut()[i] -= eps;
            let mut tm = Tape::new();
            let lm = builder(&mut tm, xm);
            let fm = tm.value(lm).item();

            numeric.data_mut()[i] = (fp - fm) / (2.0 * eps);
        }
        for i in 0..x0.len() {
            let (a, n) = (analytic.data()[i], numeric.data()[i]);
            let denom = a.abs().max(n.abs()).max(1.0);
            assert!(
                (a - n).abs() / denom < tol,
                "grad mismatch at {i}: analytic {a}, numeric {n}"
            );
        }
    }

    /// Sum-of-values pseudo-loss: weight the elements so the gradient is
    /// informative (plain sum gives all-ones gradients).
    fn weighted_sum(tape: &mut Tape, x: NodeId) -> NodeId {
        let v = tape.value(x).clone();
        let mut w = Tensor::zeros(v.shape());
        for (i, q) in w.data_mut().iter_mut().enumerate() {
            *q = ((i % 7) as f64 - 3.0) * 0.25;
        }
        // express w.x as a 1x1 conv when rank-4, otherwise hand-roll via
        // AddScalars on CE trick; simplest is a dot through conv when possible
        let shape = v.shape().to_vec();
        assert_eq!(shape.len(), 4, "weighted_sum expects rank-4");
        let (b, c, h, wd) = (shape[0], shape[1], shape[2], shape[3]);
        // one output channel, kernel = full spatial extent, no padding
        let mut kernel = Tensor::zeros(&[1, c, h, wd]);
        kernel.data_mut().copy_from_slice(&w.data()[..c * h * wd]);
        let kw = tape.constant(kernel);
        let kb = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, kw, kb, 1, 0).unwrap();
        // y is [b,1,1,1]; batch-sum via CE would distort, use AddScalars on
        // per-item extraction: a second conv cannot reduce batch, so sum
        // manually by building scalar leaves is wrong (breaks the graph).
        // Instead require b == 1 in op-level checks.
        assert_eq!(b, 1, "op-level FD checks use batch 1");
        y
    }

    #[test]
    fn conv2d_gradients_match_fd() {
        // gradient w.r.t. input
        check_grad(&[1, 2, 6, 6], 11, |tape, x0| {
            let x = tape.leaf(x0, true);
            let w = tape.constant(rand_tensor(&[3, 2, 3, 3], 21));
            let b = tape.constant(rand_tensor(&[3], 22));
            let y = tape.conv2d(x, w, b, 2, 1).unwrap();
            weighted_sum(tape, y)
        }, 1e-6);
        // gradient w.r.t. weight
        check_grad(&[3, 2, 3, 3], 12, |tape, w0| {
            let w = tape.leaf(w0, true);
            let x = tape.constant(rand_tensor(&[1, 2, 6, 6], 23));
            let b = tape.constant(rand_tensor(&[3], 24));
            let y = tape.conv2d(x, w, b, 1, 1).unwrap();
            weighted_sum(tape, y)
        }, 1e-6);
        // gradient w.r.t. bias
        check_grad(&[3], 13, |tape, b0| {
            let b = tape.leaf(b0, true);
            let x = tape.constant(rand_tensor(&[1, 2, 6, 6], 25));
            let w = tape.constant(rand_tensor(&[3, 2, 3, 3], 26));
            let y = tape.conv2d(x, w, b, 2, 1).unwrap();
            weighted_sum(tape, y)
        }, 1e-6);
    }

    #[test]
    fn upsample_and_relu_gradients_match_fd() {
        check_grad(&[1, 2, 4, 4], 31, |tape, x0| {
            let x = tape.leaf(x0, true);
            let r = tape.relu(x);
            let u = tape.upsample_bilinear(r, 2).unwrap();
            weighted_sum(tape, u)
        }, 1e-5);
    }

    #[test]
    fn tanh_and_groupnorm_gradients_match_fd() {
        check_grad(&[1, 4, 3, 3], 41, |tape, x0| {
            let x = tape.leaf(x0, true);
            let gamma = tape.constant(rand_tensor(&[4], 42));
            let beta = tape.constant(rand_tensor(&[4], 43));
            let g = tape.group_norm(x, gamma, beta, 2).unwrap();
            let y = tape.tanh(g);
            weighted_sum(tape, y)
        }, 1e-5);
    }

    #[test]
    fn concat_permute_ce_gradients_match_fd() {
        let labels = LabelBatch {
            batch: 2,
            height: 2,
            width: 2,
            data: vec![0, 1, 2, IGNORE, 1, 1, 0, 2],
        };
        let check = |seed: u64| {
            let labels = labels.clone();
            let x0 = rand_tensor(&[2, 3, 2, 2], seed);
            let build = move |tape: &mut Tape, xv: Tensor| {
                let x = tape.leaf(xv, true);
                let other = tape.constant(rand_tensor(&[2, 3, 2, 2], 77));
                let cat = tape.concat_channels(x, other).unwrap();
                let perm = tape.permute_batch(cat, &[1, 0]).unwrap();
                // reduce 6 channels to 3 with a fixed 1x1 conv
                let w = tape.constant(rand_tensor(&[3, 6, 1, 1], 78));
                let b = tape.constant(Tensor::zeros(&[3]));
                let logits = tape.conv2d(perm, w, b, 1, 0).unwrap();
                let (ce, _) = tape.ce_pixels(logits, &labels).unwrap();
                let (sce, _) = tape.sce_pixels(logits, &labels, 1.0, 1.0, -4.0).unwrap();
                tape.add_scalars(&[(ce, 1.0), (sce, 0.5)])
            };
            let mut tape = Tape::new();
            let loss = build(&mut tape, x0.clone());
            let grads = tape.backward(loss).unwrap();
            let analytic = grads.get(0).unwrap().clone();
            let eps = 1e-6;
            for i in 0..x0.len() {
                let mut xp = x0.clone();
                xp.data_mut()[i] += eps;
                let mut tp = Tape::new();
                let fp = {
                    let l = build(&mut tp, xp);
                    tp.value(l).item()
                };
                let mut xm = x0.clone();
                xm.data_mut()[i] -= eps;
                let mut tm = Tape::new();
                let fm = {
                    let l = build(&mut tm, xm);
                    tm.value(l).item()
                };
                let n = (fp - fm) / (2.0 * eps);
                let a = analytic.data()[i];
                let denom = a.abs().max(n.abs()).max(1.0);
                assert!(
                    (a - n).abs() / denom < 1e-6,
                    "grad mismatch at {i}: analytic {a}, numeric {n}"
                );
            }
        };
        check(51);
        check(52);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut logits = Tensor::zeros(&[1, 3, 1, 1]);
        logits.data_mut().copy_from_slice(&[1000.0, 999.0, -1000.0]);
        let p = kernels::softmax_channels(&logits);
        assert!(p.all_finite());
        let s: f64 = p.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ce_on_all_ignored_pixels_is_zero_with_zero_grad() {
        let labels = LabelBatch::filled(1, 2, 2, IGNORE);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[1, 3, 2, 2], 9), true);
        let (loss, count) = tape.ce_pixels(x, &labels).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        assert_eq!(count, 0);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn label_out_of_range_is_a_contract_violation() {
        let labels = LabelBatch::filled(1, 2, 2, 3);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[1, 3, 2, 2], 9), true);
        assert!(tape.ce_pixels(x, &labels).is_err());
    }

    #[test]
    fn permute_requires_bijection() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[2, 1, 1, 1], 9), false);
        assert!(tape.permute_batch(x, &[0, 0]).is_err());
        assert!(tape.permute_batch(x, &[1, 0]).is_ok());
    }

    #[test]
    fn upsampled_interior_impulse_conserves_mass_times_factor_squared() {
        let mut x = Tensor::zeros(&[1, 1, 4, 4]);
        let idx = x.idx4(0, 0, 1, 1);
        x.data_mut()[idx] = 1.0;
        let y = kernels::upsample_bilinear(&x, 2);
        let total: f64 = y.data().iter().sum();
        assert_eq!(total, 4.0);
    }

    #[test]
    fn upsample_of_constant_is_constant_and_single_pixel_broadcasts() {
        let x = Tensor::full(&[1, 1, 3, 3], 2.5);
        let y = kernels::upsample_bilinear(&x, 4);
        assert!(y.data().iter().all(|&v| v == 2.5));
        let one = Tensor::full(&[1, 2, 1, 1], 7.0);
        let b = kernels::upsample_bilinear(&one, 4);
        assert_eq!(b.shape(), &[1, 2, 4, 4]);
        assert!(b.data().iter().all(|&v| v == 7.0));
    }
}
