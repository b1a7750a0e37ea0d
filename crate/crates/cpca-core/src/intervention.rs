//! Counterfactual construction by bias-map swapping within a mini-batch.

use rand::Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;
use crate::labels::LabelBatch;
use crate::rng::{self, tag};

/// A bijection on batch indices with the seed it was drawn from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPermutation {
    pub perm: Vec<usize>,
    pub seed: u64,
}

impl BatchPermutation {
    pub fn identity(batch: usize) -> Self {
        BatchPermutation {
            perm: (0..batch).collect(),
            seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0usize; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        inv
    }
}

/// Uniform random permutation of `0..batch`, deterministic in the seed.
/// Fixed points are allowed; a batch of one is forced to the identity.
pub fn sample_permutation(batch: usize, seed: u64) -> BatchPermutation {
    assert!(batch >= 1);
    let mut perm: Vec<usize> = (0..batch).collect();
    let mut rng = rng::stream(seed, &[tag::PERM]);
    for i in (1..batch).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    BatchPermutation { perm, seed }
}

/// Permutation without fixed points for batches of two or more, drawn by
/// rejection; exposed for ablation studies.
pub fn sample_derangement(batch: usize, seed: u64) -> BatchPermutation {
    assert!(batch >= 1);
    if batch == 1 {
        return BatchPermutation::identity(1);
    }
    let mut rng = rng::stream(seed, &[tag::PERM]);
    loop {
        let mut perm: Vec<usize> = (0..batch).collect();
        for i in (1..batch).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return BatchPermutation { perm, seed };
        }
    }
}

/// The two classifier inputs built from causal and bias features plus the
/// labels carried along the bias permutation.
pub struct Counterfactual {
    /// `[causal ; bias]`, channel-concatenated.
    pub biased: NodeId,
    /// `[causal ; bias permuted along the batch]`.
    pub unbiased: NodeId,
    /// Labels reordered by the same permutation.
    pub labels_swapped: LabelBatch,
}

/// Assemble counterfactual features on the tape. The first `d` channels of
/// both outputs are the causal node unchanged; the bias half of `unbiased`
/// at index i is the bias map of index `perm[i]`, and `labels_swapped[i]`
/// is `labels[perm[i]]`. Inputs are never mutated — tape ops copy.
pub fn make_counterfactual(
    tape: &mut Tape,
    causal: NodeId,
    bias: NodeId,
    labels: &LabelBatch,
    permutation: &BatchPermutation,
) -> Result<Counterfactual> {
    let biased = tape.concat_channels(causal, bias)?;
    let permuted = tape.permute_batch(bias, &permutation.perm)?;
    let unbiased = tape.concat_channels(causal, permuted)?;
    Ok(Counterfactual {
        biased,
        unbiased,
        labels_swapped: labels.permute_batch(&permutation.perm),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::collections::BTreeSet;

    fn rand_features(b: usize, d: usize, seed: u64) -> Tensor {
        let mut t = Tensor::zeros(&[b, d, 2, 2]);
        t.fill_normal(&mut rng::stream(seed, &[0]), 1.0);
        t
    }

    fn batch_labels(b: usize) -> LabelBatch {
        let mut l = LabelBatch::filled(b, 2, 2, 0);
        for (i, v) in l.data.iter_mut().enumerate() {
            *v = (i % 3) as u8;
        }
        l
    }

    #[test]
    fn batch_of_one_is_the_identity() {
        let p = sample_permutation(1, 12345);
        assert_eq!(p.perm, vec![0]);
        assert!(p.is_identity());
    }

    #[test]
    fn both_two_element_permutations_appear_over_seeds() {
        let mut seen = BTreeSet::new();
        for seed in 0..100 {
            seen.insert(sample_permutation(2, seed).perm.clone());
        }
        assert!(seen.contains(&vec![0, 1]));
        assert!(seen.contains(&vec![1, 0]));
    }

    #[test]
    fn permutation_composed_with_inverse_is_identity() {
        let p = sample_permutation(7, 42);
        let inv = p.inverse();
        let mut composed: Vec<usize> = (0..7).collect();
        for i in 0..7 {
            composed[i] = inv[p.perm[i]];
        }
        assert_eq!(composed, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        for seed in 0..20 {
            let p = sample_derangement(4, seed);
            assert!(p.perm.iter().enumerate().all(|(i, &q)| i != q), "{:?}", p.perm);
        }
    }

    #[test]
    fn identity_permutation_makes_identical_outputs() {
        let mut tape = Tape::new();
        let c = tape.constant(rand_features(3, 2, 1));
        let b = tape.constant(rand_features(3, 2, 2));
        let labels = batch_labels(3);
        let cf = make_counterfactual(
            &mut tape,
            c,
            b,
            &labels,
            &BatchPermutation::identity(3),
        )
        .unwrap();
        assert_eq!(tape.value(cf.biased).clone(), tape.value(cf.unbiased).clone());
        assert_eq!(cf.labels_swapped, labels);
    }

    #[test]
    fn swap_carries_bias_maps_and_labels_together() {
        let mut tape = Tape::new();
        let c = tape.constant(rand_features(2, 2, 3));
        let bias = rand_features(2, 2, 4);
        let b = tape.constant(bias.clone());
        let labels = batch_labels(2);
        let swap = BatchPermutation {
            perm: vec![1, 0],
            seed: 0,
        };
        let cf = make_counterfactual(&mut tape, c, b, &labels, &swap).unwrap();
        let unbiased = tape.value(cf.unbiased);
        let item = 2 * 2 * 2; // d * h * w
        // sample 0's bias half equals input sample 1's bias map
        assert_eq!(
            &unbiased.data()[item..2 * item],
            &bias.data()[item..2 * item]
        );
        // and its swapped labels are sample 1's labels
        assert_eq!(
            &cf.labels_swapped.data[..4],
            &labels.data[4..8]
        );
    }

    #[test]
    fn causal_half_is_bit_identical_and_inputs_unchanged() {
        let causal = rand_features(3, 2, 5);
        let bias = rand_features(3, 2, 6);
        let mut tape = Tape::new();
        let c = tape.constant(causal.clone());
        let b = tape.constant(bias.clone());
        let labels = batch_labels(3);
        let perm = sample_permutation(3, 9);
        let cf = make_counterfactual(&mut tape, c, b, &labels, &perm).unwrap();
        let item = 2 * 2 * 2;
        for i in 0..3 {
            for half in [cf.biased, cf.unbiased] {
                let out = tape.value(half);
                assert_eq!(
                    &out.data()[i * 2 * item..i * 2 * item + item],
                    &causal.data()[i * item..(i + 1) * item]
                );
            }
        }
        // inputs untouched
        assert_eq!(tape.value(c).clone(), causal);
        assert_eq!(tape.value(b).clone(), bias);
    }

    #[test]
    fn bias_multiset_is_preserved_under_permutation() {
        for seed in 0..100 {
            let bias = rand_features(5, 2, seed + 100);
            let mut tape = Tape::new();
            let c = tape.constant(rand_features(5, 2, seed + 200));
            let b = tape.constant(bias.clone());
            let labels = batch_labels(5);
            let perm = sample_permutation(5, seed);
            let cf = make_counterfactual(&mut tape, c, b, &labels, &perm).unwrap();
            let item = 2 * 2 * 2;
            let extract = |t: &Tensor| -> BTreeSet<Vec<u64>> {
                (0..5)
                    .map(|i| {
                        t.data()[i * 2 * item + item..(i + 1) * 2 * item]
                            .iter()
                            .map(|v| v.to_bits())
                            .collect()
                    })
                    .collect()
            };
            let before = extract(tape.value(cf.biased));
            let after = extract(tape.value(cf.unbiased));
            assert_eq!(before, after, "seed {seed}");
        }
    }
}
