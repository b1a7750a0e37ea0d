//! Class prototypes over causal features.
//!
//! One d-dimensional prototype per class, initialized as the mean source
//! feature under ground-truth labels, compared to pixels by temperature
//! softmax over prototype dot products, and updated by an exponential
//! moving average whose momentum follows a polynomial annealing schedule.
//! The bank is a buffer: it never enters a gradient tape as a trainable
//! leaf.

use crate::error::{Error, Result};
use crate::labels::{LabelBatch, IGNORE};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    /// `[K, d]` prototype vectors; rows for invalid classes are zero.
    pub prototypes: Tensor,
    /// Class seen at least once.
    pub valid: Vec<bool>,
    /// Update counter t, in `[0, total]`.
    pub iteration: usize,
    /// Schedule horizon T.
    pub total: usize,
    pub m0: f64,
    pub alpha: f64,
}

/// Per-pixel class-similarity probabilities, `[B, K, h, w]`, rows summing
/// to one.
#[derive(Debug, Clone)]
pub struct SimMap {
    pub probs: Tensor,
    pub tau: f64,
}

/// Per-class aggregated feature vectors (one EMA candidate per class).
#[derive(Debug, Clone)]
pub struct ClassAggregate {
    pub vectors: Tensor,
    pub valid: Vec<bool>,
}

/// How pixels are weighted inside a class when aggregating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationWeighting {
    /// Weight by (1 - similarity): low-confidence pixels dominate.
    Inverse,
    /// Weight by similarity.
    Direct,
}

impl AggregationWeighting {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "inverse" => Some(AggregationWeighting::Inverse),
            "direct" => Some(AggregationWeighting::Direct),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AggregationWeighting::Inverse => "inverse",
            AggregationWeighting::Direct => "direct",
        }
    }
}

/// Streaming accumulator for prototype initialization: a single pass over
/// `(features, labels)` batches computing per-class feature means.
pub struct ProtoAccumulator {
    sums: Tensor,
    counts: Vec<u64>,
    dim: usize,
}

impl ProtoAccumulator {
    pub fn new(num_classes: usize, dim: usize) -> Self {
        ProtoAccumulator {
            sums: Tensor::zeros(&[num_classes, dim]),
            counts: vec![0; num_classes],
            dim,
        }
    }

    /// Add one `[B, d, h, w]` feature batch with labels already at feature
    /// resolution.
    pub fn add(&mut self, features: &Tensor, labels: &LabelBatch) -> Result<()> {
        let s = features.shape();
        if s.len() != 4 || s[1] != self.dim {
            return Err(Error::Contract(format!(
                "prototype accumulate: expected [B, {}, h, w], got {s:?}",
                self.dim
            )));
        }
        let (bsz, d, h, w) = (s[0], s[1], s[2], s[3]);
        if (labels.batch, labels.height, labels.width) != (bsz, h, w) {
            return Err(Error::Contract(
                "prototype accumulate: labels must be at feature resolution".into(),
            ));
        }
        let plane = h * w;
        let k = self.counts.len();
        for b in 0..bsz {
            for p in 0..plane {
                let y = labels.data[b * plane + p];
                if y == IGNORE {
                    continue;
                }
                let y = y as usize;
                if y >= k {
                    return Err(Error::Contract(format!(
                        "prototype accumulate: label {y} out of range for {k} classes"
                    )));
                }
                for c in 0..d {
                    self.sums.data_mut()[y * d + c] += features.data()[(b * d + c) * plane + p];
                }
                self.counts[y] += 1;
            }
        }
        Ok(())
    }

    /// Finalize into a bank with the given schedule constants.
    pub fn finish(self, total: usize, m0: f64, alpha: f64) -> PrototypeBank {
        let k = self.counts.len();
        let d = self.dim;
        let mut prototypes = self.sums;
        let mut valid = vec![false; k];
        for cls in 0..k {
            if self.counts[cls] > 0 {
                valid[cls] = true;
                for c in 0..d {
                    prototypes.data_mut()[cls * d + c] /= self.counts[cls] as f64;
                }
            }
        }
        PrototypeBank {
            prototypes,
            valid,
            iteration: 0,
            total,
            m0,
            alpha,
        }
    }
}

impl PrototypeBank {
    pub fn num_classes(&self) -> usize {
        self.valid.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    pub fn invalid_classes(&self) -> Vec<usize> {
        self.valid
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (!v).then_some(i))
            .collect()
    }

    /// Prototypes as a `[K, d, 1, 1]` conv kernel scaled by `1 / tau`, so a
    /// 1x1 convolution over features yields the similarity logits.
    pub fn as_similarity_kernel(&self, tau: f64) -> Tensor {
        let (k, d) = (self.num_classes(), self.dim());
        let mut kern = Tensor::zeros(&[k, d, 1, 1]);
        for i in 0..k * d {
            kern.data_mut()[i] = self.prototypes.data()[i] / tau;
        }
        kern
    }
}

/// Temperature-softmax similarity of every pixel to every prototype.
pub fn similarity(features: &Tensor, bank: &PrototypeBank, tau: f64) -> Result<SimMap> {
    if tau <= 0.0 {
        return Err(Error::Contract("similarity: tau must be > 0".into()));
    }
    if !bank.all_valid() {
        return Err(Error::IncompleteBank(bank.invalid_classes()));
    }
    let s = features.shape();
    if s.len() != 4 || s[1] != bank.dim() {
        return Err(Error::Contract(format!(
            "similarity: expected [B, {}, h, w], got {s:?}",
            bank.dim()
        )));
    }
    let (bsz, d, h, w) = (s[0], s[1], s[2], s[3]);
    let k = bank.num_classes();
    let plane = h * w;
    let mut probs = Tensor::zeros(&[bsz, k, h, w]);
    let mut scores = vec![0.0f64; k];
    for b in 0..bsz {
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for (cls, score) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += bank.prototypes.data()[cls * d + c]
                        * features.data()[(b * d + c) * plane + p];
                }
                *score = dot / tau;
                max = max.max(*score);
            }
            let mut z = 0.0;
            for score in scores.iter_mut() {
                *score = (*score - max).exp();
                z += *score;
            }
            for (cls, score) in scores.iter().enumerate() {
                probs.data_mut()[(b * k + cls) * plane + p] = score / z;
            }
        }
    }
    Ok(SimMap { probs, tau })
}

/// One (features, similarities, labels) triple entering the class
/// aggregation; source batches carry ground truth, target batches carry
/// pseudo-labels.
pub struct AggregateInput<'a> {
    pub features: &'a Tensor,
    pub sims: &'a SimMap,
    pub labels: &'a LabelBatch,
}

/// Aggregate labeled pixels into per-class candidate vectors. With
/// [`AggregationWeighting::Inverse`], pixel i of class k contributes with
/// weight (1 - s_i) / sum_j (1 - s_j) where s_i is the pixel's similarity
/// to its own class; all-ones similarities fall back to the plain mean.
pub fn aggregate_class(
    inputs: &[AggregateInput<'_>],
    num_classes: usize,
    dim: usize,
    weighting: AggregationWeighting,
) -> Result<ClassAggregate> {
    // Per class: weighted feature sum, weight sum, plain sum, count.
    let mut weighted = Tensor::zeros(&[num_classes, dim]);
    let mut plain = Tensor::zeros(&[num_classes, dim]);
    let mut weight_sum = vec![0.0f64; num_classes];
    let mut count = vec![0u64; num_classes];

    for input in inputs {
        let s = input.features.shape();
        if s.len() != 4 || s[1] != dim {
            return Err(Error::Contract(format!(
                "aggregate: expected [B, {dim}, h, w], got {s:?}"
            )));
        }
        let (bsz, _, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        if (input.labels.batch, input.labels.height, input.labels.width) != (bsz, h, w) {
            return Err(Error::Contract("aggregate: labels at feature resolution".into()));
        }
        if input.sims.probs.shape() != [bsz, num_classes, h, w] {
            return Err(Error::Contract("aggregate: sim map shape mismatch".into()));
        }
        for b in 0..bsz {
            for p in 0..plane {
                let y = input.labels.data[b * plane + p];
                if y == IGNORE {
                    continue;
                }
                let y = y as usize;
                if y >= num_classes {
                    return Err(Error::Contract(format!(
                        "aggregate: label {y} out of range for {num_classes} classes"
                    )));
                }
                let sim = input.sims.probs.data()[(b * num_classes + y) * plane + p];
                let wgt = match weighting {
                    AggregationWeighting::Inverse => 1.0 - sim,
                    AggregationWeighting::Direct => sim,
                };
                for c in 0..dim {
                    let f = input.features.data()[(b * dim + c) * plane + p];
                    weighted.data_mut()[y * dim + c] += wgt * f;
                    plain.data_mut()[y * dim + c] += f;
                }
                weight_sum[y] += wgt;
                count[y] += 1;
            }
        }
    }

    let mut vectors = Tensor::zeros(&[num_classes, dim]);
    let mut valid = vec![false; num_classes];
    for cls in 0..num_classes {
        if count[cls] == 0 {
            continue;
        }
        valid[cls] = true;
        if weight_sum[cls] > 0.0 {
            for c in 0..dim {
                vectors.data_mut()[cls * dim + c] = weighted.data()[cls * dim + c] / weight_sum[cls];
            }
        } else {
            // All weights vanished (every similarity exactly 1): plain mean.
            for c in 0..dim {
                vectors.data_mut()[cls * dim + c] = plain.data()[cls * dim + c] / count[cls] as f64;
            }
        }
    }
    Ok(ClassAggregate { vectors, valid })
}

/// Momentum at iteration t of T under polynomial annealing:
/// `m_t = (1 - t/T)^alpha * (m0 - m0/100) + m0/100`.
pub fn momentum(t: usize, total: usize, m0: f64, alpha: f64) -> f64 {
    assert!(total > 0 && t <= total, "momentum: need 0 <= t <= T, T > 0");
    let frac = 1.0 - t as f64 / total as f64;
    frac.powf(alpha) * (m0 - m0 / 100.0) + m0 / 100.0
}

/// EMA step `p_k <- (1 - m) p_k + m C'_k` for classes the aggregate saw;
/// untouched classes keep their prototype. Increments the step counter.
pub fn update_prototypes(bank: &mut PrototypeBank, aggregate: &ClassAggregate, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Contract(format!("update: momentum {m} outside [0, 1]")));
    }
    let (k, d) = (bank.num_classes(), bank.dim());
    if aggregate.vectors.shape() != [k, d] {
        return Err(Error::Contract("update: aggregate shape mismatch".into()));
    }
    for cls in 0..k {
        if !aggregate.valid[cls] {
            continue;
        }
        for c in 0..d {
            let idx = cls * d + c;
            let p = bank.prototypes.data()[idx];
            bank.prototypes.data_mut()[idx] = (1.0 - m) * p + m * aggregate.vectors.data()[idx];
        }
        bank.valid[cls] = true;
    }
    bank.iteration += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// [B=1, d, h, w] feature tensor from per-pixel rows.
    fn feat(d: usize, pixels: &[Vec<f64>]) -> Tensor {
        let n = pixels.len();
        let mut t = Tensor::zeros(&[1, d, 1, n]);
        for (p, v) in pixels.iter().enumerate() {
            for c in 0..d {
                t.data_mut()[c * n + p] = v[c];
            }
        }
        t
    }

    fn labels(vals: &[u8]) -> LabelBatch {
        LabelBatch {
            batch: 1,
            height: 1,
            width: vals.len(),
            data: vals.to_vec(),
        }
    }

    fn bank2() -> PrototypeBank {
        PrototypeBank {
            prototypes: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]),
            valid: vec![true, true],
            iteration: 0,
            total: 100,
            m0: 0.9,
            alpha: 0.9,
        }
    }

    #[test]
    fn init_mean_of_two_pixels() {
        let mut acc = ProtoAccumulator::new(2, 2);
        acc.add(&feat(2, &[vec![1.0, 0.0], vec![3.0, 0.0]]), &labels(&[0, 0]))
            .unwrap();
        let bank = acc.finish(10, 0.9, 0.9);
        assert_eq!(bank.prototypes.data()[0], 2.0);
        assert_eq!(bank.prototypes.data()[1], 0.0);
        assert!(bank.valid[0]);
        assert!(!bank.valid[1]);
    }

    #[test]
    fn absent_class_stays_invalid_and_untouched() {
        let mut acc = ProtoAccumulator::new(4, 2);
        acc.add(&feat(2, &[vec![1.0, 1.0]]), &labels(&[1])).unwrap();
        let bank = acc.finish(10, 0.9, 0.9);
        assert!(!bank.valid[3]);
        assert_eq!(&bank.prototypes.data()[6..8], &[0.0, 0.0]);
    }

    #[test]
    fn streaming_mean_matches_two_pass_oracle() {
        let mut rng = crate::rng::stream(17, &[0]);
        use rand::Rng;
        let d = 5;
        let batches: Vec<(Tensor, LabelBatch)> = (0..4)
            .map(|_| {
                let pixels: Vec<Vec<f64>> = (0..13)
                    .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect();
                let lbl: Vec<u8> = (0..13).map(|_| rng.gen_range(0..3) as u8).collect();
                (feat(d, &pixels), labels(&lbl))
            })
            .collect();

        let mut acc = ProtoAccumulator::new(3, d);
        for (f, l) in &batches {
            acc.add(f, l).unwrap();
        }
        let bank = acc.finish(10, 0.9, 0.9);

        // two-pass oracle: count first, then sum/count
        for cls in 0..3u8 {
            let mut count = 0usize;
            for (_, l) in &batches {
                count += l.data.iter().filter(|&&v| v == cls).count();
            }
            let mut mean = vec![0.0; d];
            for (f, l) in &batches {
                let n = l.data.len();
                for (p, &v) in l.data.iter().enumerate() {
                    if v == cls {
                        for c in 0..d {
                            mean[c] += f.data()[c * n + p] / count as f64;
                        }
                    }
                }
            }
            for c in 0..d {
                let got = bank.prototypes.data()[cls as usize * d + c];
                assert!((got - mean[c]).abs() < 1e-10, "class {cls} dim {c}");
            }
        }
    }

    #[test]
    fn similarity_matches_hand_softmax() {
        let bank = bank2();
        let f = feat(2, &[vec![1.0, 0.0]]);
        let sim = similarity(&f, &bank, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((sim.probs.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((sim.probs.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn equal_dot_products_give_uniform_distribution() {
        let bank = bank2();
        let f = feat(2, &[vec![0.5, 0.5]]);
        let sim = similarity(&f, &bank, 0.3).unwrap();
        assert!((sim.probs.data()[0] - 0.5).abs() < 1e-12);
        assert!((sim.probs.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn growing_temperature_approaches_uniform() {
        let bank = bank2();
        let f = feat(2, &[vec![2.0, -1.0]]);
        let kl_to_uniform = |tau: f64| -> f64 {
            let sim = similarity(&f, &bank, tau).unwrap();
            sim.probs
                .data()
                .iter()
                .map(|&p| p * (p / 0.5).ln())
                .sum()
        };
        let (k1, k2, k3) = (kl_to_uniform(0.1), kl_to_uniform(1.0), kl_to_uniform(10.0));
        assert!(k1 > k2 && k2 > k3, "KL not decreasing: {k1} {k2} {k3}");
    }

    #[test]
    fn incomplete_bank_is_an_error() {
        let mut bank = bank2();
        bank.valid[1] = false;
        let f = feat(2, &[vec![1.0, 0.0]]);
        match similarity(&f, &bank, 1.0) {
            Err(Error::IncompleteBank(classes)) => assert_eq!(classes, vec![1]),
            other => panic!("expected IncompleteBank, got {other:?}"),
        }
    }

    /// Wrap per-pixel own-class similarities into a SimMap for aggregation
    /// tests (off-class entries don't matter for the aggregate).
    fn sims_for(own: &[f64], lbl: &LabelBatch, k: usize) -> SimMap {
        let n = own.len();
        let mut probs = Tensor::zeros(&[1, k, 1, n]);
        for (p, &s) in own.iter().enumerate() {
            let y = lbl.data[p] as usize;
            probs.data_mut()[y * n + p] = s;
        }
        SimMap { probs, tau: 0.1 }
    }

    #[test]
    fn aggregate_weights_low_similarity_pixels_more() {
        let f = feat(2, &[vec![1.0, 0.0], vec![3.0, 0.0]]);
        let l = labels(&[0, 0]);
        let sims = sims_for(&[0.2, 0.6], &l, 1);
        let agg = aggregate_class(
            &[AggregateInput {
                features: &f,
                sims: &sims,
                labels: &l,
            }],
            1,
            2,
            AggregationWeighting::Inverse,
        )
        .unwrap();
        // weights (0.8, 0.4)/1.2 -> (2/3, 1/3); mean = 5/3
        assert!((agg.vectors.data()[0] - 5.0 / 3.0).abs() < 1e-12);
        assert_eq!(agg.vectors.data()[1], 0.0);
    }

    #[test]
    fn single_pixel_aggregate_is_that_pixel() {
        let f = feat(2, &[vec![7.0, -2.0]]);
        let l = labels(&[0]);
        let sims = sims_for(&[0.93], &l, 1);
        let agg = aggregate_class(
            &[AggregateInput { features: &f, sims: &sims, labels: &l }],
            1,
            2,
            AggregationWeighting::Inverse,
        )
        .unwrap();
        assert!((agg.vectors.data()[0] - 7.0).abs() < 1e-12);
        assert!((agg.vectors.data()[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn equal_similarities_reduce_to_plain_mean() {
        let f = feat(1, &[vec![1.0], vec![2.0], vec![6.0]]);
        let l = labels(&[0, 0, 0]);
        let sims = sims_for(&[0.4, 0.4, 0.4], &l, 1);
        let agg = aggregate_class(
            &[AggregateInput { features: &f, sims: &sims, labels: &l }],
            1,
            1,
            AggregationWeighting::Inverse,
        )
        .unwrap();
        assert!((agg.vectors.data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn all_ones_similarity_falls_back_to_mean() {
        let f = feat(1, &[vec![2.0], vec![4.0]]);
        let l = labels(&[0, 0]);
        let sims = sims_for(&[1.0, 1.0], &l, 1);
        let agg = aggregate_class(
            &[AggregateInput { features: &f, sims: &sims, labels: &l }],
            1,
            1,
            AggregationWeighting::Inverse,
        )
        .unwrap();
        assert!(agg.valid[0]);
        assert!((agg.vectors.data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_class_is_flagged_invalid() {
        let f = feat(1, &[vec![2.0]]);
        let l = labels(&[0]);
        let sims = sims_for(&[0.5], &l, 3);
        let agg = aggregate_class(
            &[AggregateInput { features: &f, sims: &sims, labels: &l }],
            3,
            1,
            AggregationWeighting::Inverse,
        )
        .unwrap();
        assert_eq!(agg.valid, vec![true, false, false]);
    }

    #[test]
    fn momentum_endpoints_and_midpoint() {
        assert_eq!(momentum(0, 100, 0.9, 0.9), 0.9);
        assert!((momentum(100, 100, 0.9, 0.9) - 0.009).abs() < 1e-12);
        // t = T/2: 0.891 * 0.5^0.9 + 0.009
        let expect = 0.891 * 0.5f64.powf(0.9) + 0.009;
        assert!((momentum(50, 100, 0.9, 0.9) - expect).abs() < 1e-12);
        assert!((expect - 0.4865).abs() < 5e-5);
    }

    #[test]
    fn update_moves_toward_aggregate() {
        let mut bank = PrototypeBank {
            prototypes: Tensor::new(vec![1, 2], vec![2.0, 0.0]),
            valid: vec![true],
            iteration: 0,
            total: 10,
            m0: 0.9,
            alpha: 0.9,
        };
        let agg = ClassAggregate {
            vectors: Tensor::new(vec![1, 2], vec![5.0 / 3.0, 0.0]),
            valid: vec![true],
        };
        update_prototypes(&mut bank, &agg, 0.3).unwrap();
        assert!((bank.prototypes.data()[0] - 1.9).abs() < 1e-12);
        assert_eq!(bank.iteration, 1);

        // m = 0 keeps, m = 1 replaces
        let mut keep = bank.clone();
        update_prototypes(&mut keep, &agg, 0.0).unwrap();
        assert_eq!(keep.prototypes.data()[0], bank.prototypes.data()[0]);
        let mut replace = bank.clone();
        update_prototypes(&mut replace, &agg, 1.0).unwrap();
        assert_eq!(replace.prototypes.data()[0], 5.0 / 3.0);
    }

    #[test]
    fn invalid_aggregate_classes_leave_prototypes_untouched() {
        let mut bank = bank2();
        let agg = ClassAggregate {
            vectors: Tensor::new(vec![2, 2], vec![9.0, 9.0, 9.0, 9.0]),
            valid: vec![false, true],
        };
        update_prototypes(&mut bank, &agg, 0.5).unwrap();
        assert_eq!(&bank.prototypes.data()[..2], &[1.0, 0.0]);
        assert_eq!(&bank.prototypes.data()[2..], &[4.5, 5.0]);
    }

    proptest! {
        #[test]
        fn sim_rows_sum_to_one(
            seed in 0u64..1000,
            k in 2usize..6,
            d in 2usize..5,
            n in 1usize..20,
        ) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, &[1]);
            let mut protos = Tensor::zeros(&[k, d]);
            for v in protos.data_mut() { *v = rng.gen_range(-3.0..3.0); }
            let bank = PrototypeBank {
                prototypes: protos,
                valid: vec![true; k],
                iteration: 0,
                total: 10,
                m0: 0.9,
                alpha: 0.9,
            };
            let mut f = Tensor::zeros(&[1, d, 1, n]);
            for v in f.data_mut() { *v = rng.gen_range(-3.0..3.0); }
            let sim = similarity(&f, &bank, 0.1).unwrap();
            for p in 0..n {
                let total: f64 = (0..k).map(|c| sim.probs.data()[c * n + p]).sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
                for c in 0..k {
                    let v = sim.probs.data()[c * n + p];
                    prop_assert!(v > 0.0 && v < 1.0 + 1e-12);
                }
            }
        }

        #[test]
        fn momentum_is_strictly_decreasing(
            m0 in 0.05f64..1.0,
            alpha in 0.05f64..1.0,
        ) {
            let total = 500;
            let mut prev = momentum(0, total, m0, alpha);
            for t in 1..=total {
                let m = momentum(t, total, m0, alpha);
                prop_assert!(m < prev, "t={t}: {m} >= {prev}");
                prev = m;
            }
        }

        #[test]
        fn update_is_a_convex_combination(
            seed in 0u64..1000,
            m in 0.0f64..=1.0,
        ) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, &[2]);
            let d = 4;
            let mut bank = PrototypeBank {
                prototypes: Tensor::zeros(&[2, d]),
                valid: vec![true, true],
                iteration: 0,
                total: 10,
                m0: 0.9,
                alpha: 0.9,
            };
            for v in bank.prototypes.data_mut() { *v = rng.gen_range(-5.0..5.0); }
            let before = bank.prototypes.clone();
            let mut vectors = Tensor::zeros(&[2, d]);
            for v in vectors.data_mut() { *v = rng.gen_range(-5.0..5.0); }
            let agg = ClassAggregate { vectors: vectors.clone(), valid: vec![true, true] };
            update_prototypes(&mut bank, &agg, m).unwrap();
            for i in 0..2 * d {
                let (lo, hi) = {
                    let (a, b) = (before.data()[i], vectors.data()[i]);
                    (a.min(b), a.max(b))
                };
                let v = bank.prototypes.data()[i];
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn init_is_invariant_to_pixel_order_and_partitioning(seed in 0u64..500) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, &[3]);
            let d = 3;
            let n = 24;
            let pixels: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let lbl: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();

            // one batch, original order
            let mut acc1 = ProtoAccumulator::new(2, d);
            acc1.add(&feat(d, &pixels), &labels(&lbl)).unwrap();
            let bank1 = acc1.finish(10, 0.9, 0.9);

            // shuffled order, three uneven partitions
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let shuffled: Vec<Vec<f64>> = order.iter().map(|&i| pixels[i].clone()).collect();
            let shuffled_lbl: Vec<u8> = order.iter().map(|&i| lbl[i]).collect();
            let mut acc2 = ProtoAccumulator::new(2, d);
            for (lo, hi) in [(0, 5), (5, 16), (16, n)] {
                acc2.add(&feat(d, &shuffled[lo..hi]), &labels(&shuffled_lbl[lo..hi])).unwrap();
            }
            let bank2 = acc2.finish(10, 0.9, 0.9);

            for i in 0..2 * d {
                prop_assert!((bank1.prototypes.data()[i] - bank2.prototypes.data()[i]).abs() < 1e-10);
            }
        }
    }
}
