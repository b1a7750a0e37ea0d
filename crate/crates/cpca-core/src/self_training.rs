//! Confidence-ranked pseudo-labels for the target domain.
//!
//! Every target pixel is assigned its argmax class and ranked inside that
//! class by max softmax probability. A per-class threshold keeps the top
//! `ceil(count * eta)` pixels (ties included); everything else becomes
//! IGNORE, and the result is written out as an ordinary dataset.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};
use crate::model::{predict, InferenceMode, ModelParams};

/// Descending per-class confidence lists and their lengths.
#[derive(Debug, Clone)]
pub struct ConfidenceSets {
    pub confidences: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

/// Pseudo-label maps plus the bookkeeping that produced them.
#[derive(Debug, Clone)]
pub struct PseudoLabelSet {
    /// One map per dataset sample, in order; rejected pixels are IGNORE.
    pub maps: Vec<LabelMap>,
    pub sample_ids: Vec<String>,
    /// Predicted pixel count per class before thresholding.
    pub class_counts: Vec<usize>,
    /// Per-class confidence thresholds; +inf means the class emits nothing.
    pub thresholds: Vec<f64>,
    pub eta: f64,
}

/// Run inference on every image and bucket max-probabilities by predicted
/// class. Parallel over images; the merge is index-ordered, so the result
/// is independent of scheduling.
pub fn collect_confidences(
    params: &ModelParams,
    dataset: &Dataset,
    mode: InferenceMode,
) -> Result<ConfidenceSets> {
    if dataset.is_empty() {
        return Err(Error::Empty("confidence collection on empty dataset".into()));
    }
    let k = params.arch.num_classes;
    let per_image: Result<Vec<Vec<Vec<f64>>>> = dataset
        .samples
        .par_iter()
        .map(|sample| {
            let mut image = sample.image.clone();
            let shape = [1usize, 3, sample.height(), sample.width()];
            image = crate::tensor::Tensor::new(shape.to_vec(), image.into_data());
            let (pred, conf) = predict(params, &image, mode)?;
            let mut buckets = vec![Vec::new(); k];
            for (p, &cls) in pred.data.iter().enumerate() {
                buckets[cls as usize].push(conf.data()[p]);
            }
            Ok(buckets)
        })
        .collect();
    let per_image = per_image?;

    let mut confidences = vec![Vec::new(); k];
    for buckets in per_image {
        for (cls, mut vals) in buckets.into_iter().enumerate() {
            confidences[cls].append(&mut vals);
        }
    }
    for vals in &mut confidences {
        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    }
    let counts = confidences.iter().map(|v| v.len()).collect();
    Ok(ConfidenceSets {
        confidences,
        counts,
    })
}

/// Per-class threshold: the confidence at 1-based rank `ceil(count * eta)`
/// of the descending list; +inf for classes that were never predicted.
pub fn compute_thresholds(sets: &ConfidenceSets, eta: f64) -> Result<Vec<f64>> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::Contract(format!("eta {eta} outside (0, 1]")));
    }
    Ok(sets
        .confidences
        .iter()
        .map(|delta| {
            if delta.is_empty() {
                f64::INFINITY
            } else {
                let rank = ((delta.len() as f64 * eta).ceil() as usize).clamp(1, delta.len());
                delta[rank - 1]
            }
        })
        .collect())
}

/// Re-run inference and keep a pixel's predicted class only when its
/// confidence reaches the class threshold.
pub fn emit_pseudolabels(
    params: &ModelParams,
    dataset: &Dataset,
    sets: &ConfidenceSets,
    thresholds: &[f64],
    eta: f64,
    mode: InferenceMode,
) -> Result<PseudoLabelSet> {
    let maps: Result<Vec<LabelMap>> = dataset
        .samples
        .par_iter()
        .map(|sample| {
            let shape = [1usize, 3, sample.height(), sample.width()];
            let image =
                crate::tensor::Tensor::new(shape.to_vec(), sample.image.clone().into_data());
            let (pred, conf) = predict(params, &image, mode)?;
            let mut data = pred.data;
            for (p, v) in data.iter_mut().enumerate() {
                if conf.data()[p] < thresholds[*v as usize] {
                    *v = IGNORE;
                }
            }
            Ok(LabelMap::new(sample.height(), sample.width(), data))
        })
        .collect();
    Ok(PseudoLabelSet {
        maps: maps?,
        sample_ids: dataset.samples.iter().map(|s| s.id.clone()).collect(),
        class_counts: sets.counts.clone(),
        thresholds: thresholds.to_vec(),
        eta,
    })
}

/// Full pipeline: collect, threshold, emit.
pub fn generate_pseudolabels(
    params: &ModelParams,
    dataset: &Dataset,
    eta: f64,
    mode: InferenceMode,
) -> Result<PseudoLabelSet> {
    let sets = collect_confidences(params, dataset, mode)?;
    let thresholds = compute_thresholds(&sets, eta)?;
    emit_pseudolabels(params, dataset, &sets, &thresholds, eta, mode)
}

impl PseudoLabelSet {
    /// Retained (non-IGNORE) pixels per class.
    pub fn retained_per_class(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; num_classes];
        for map in &self.maps {
            for &v in &map.data {
                if v != IGNORE {
                    counts[v as usize] += 1;
                }
            }
        }
        counts
    }

    pub fn total_retained(&self) -> usize {
        self.maps
            .iter()
            .map(|m| m.data.iter().filter(|&&v| v != IGNORE).count())
            .sum()
    }
}

/// Same images, pseudo-labels instead of ground truth. Saving the result
/// with [`crate::data::save_dataset`] gives a tree the trainer consumes
/// like any other dataset.
pub fn apply_to_dataset(dataset: &Dataset, set: &PseudoLabelSet) -> Dataset {
    assert_eq!(dataset.len(), set.maps.len());
    let mut out = dataset.clone();
    for (sample, map) in out.samples.iter_mut().zip(&set.maps) {
        sample.labels = map.clone();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};
    use crate::model::{init_params, ArchConfig};

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        let cfg = SynthConfig {
            n_source: 0,
            n_target: n,
            height: 32,
            width: 32,
            ..SynthConfig::default()
        };
        gen_synthetic(&cfg, seed).unwrap().1
    }

    fn tiny_params(seed: u64) -> ModelParams {
        init_params(&ArchConfig {
            feature_dim: 4,
            widths: vec![4, 4],
            num_classes: 4,
            seed,
            ..ArchConfig::default()
        })
        .unwrap()
    }

    /// Head rigged to always predict one class.
    fn constant_class_params(class: usize) -> ModelParams {
        let mut p = tiny_params(0);
        for (_, t) in p.named_tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        p.head_causal.bias.data_mut()[class] = 5.0;
        p
    }

    #[test]
    fn constant_predictor_puts_every_pixel_in_one_class() {
        let ds = tiny_dataset(2, 1);
        let params = constant_class_params(2);
        let sets = collect_confidences(&params, &ds, InferenceMode::Concat).unwrap();
        let total: usize = sets.counts.iter().sum();
        assert_eq!(total, 2 * 32 * 32);
        assert_eq!(sets.counts[2], total);
        assert_eq!(sets.counts[0] + sets.counts[1] + sets.counts[3], 0);
    }

    #[test]
    fn counts_partition_all_pixels_and_lists_are_sorted() {
        let ds = tiny_dataset(3, 2);
        let params = tiny_params(3);
        let sets = collect_confidences(&params, &ds, InferenceMode::Concat).unwrap();
        assert_eq!(sets.counts.iter().sum::<usize>(), 3 * 32 * 32);
        for delta in &sets.confidences {
            for pair in delta.windows(2) {
                assert!(pair[0] >= pair[1]);
            }
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let ds = Dataset {
            num_classes: 4,
            class_names: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            samples: vec![],
            seed: None,
        };
        assert!(matches!(
            collect_confidences(&tiny_params(1), &ds, InferenceMode::Concat),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn threshold_is_the_rank_statistic() {
        let sets = ConfidenceSets {
            confidences: vec![vec![0.9, 0.8, 0.7, 0.6]],
            counts: vec![4],
        };
        let sigma = compute_thresholds(&sets, 0.5).unwrap();
        assert_eq!(sigma[0], 0.8);
        let retained = sets.confidences[0].iter().filter(|&&c| c >= sigma[0]).count();
        assert_eq!(retained, 2);
    }

    #[test]
    fn eta_one_keeps_the_minimum_and_everything() {
        let sets = ConfidenceSets {
            confidences: vec![vec![0.9, 0.5, 0.1]],
            counts: vec![3],
        };
        let sigma = compute_thresholds(&sets, 1.0).unwrap();
        assert_eq!(sigma[0], 0.1);
    }

    #[test]
    fn empty_class_gets_infinite_threshold() {
        let sets = ConfidenceSets {
            confidences: vec![vec![], vec![0.4]],
            counts: vec![0, 1],
        };
        let sigma = compute_thresholds(&sets, 0.5).unwrap();
        assert!(sigma[0].is_infinite());
        assert_eq!(sigma[1], 0.4);
    }

    #[test]
    fn bad_eta_is_rejected() {
        let sets = ConfidenceSets {
            confidences: vec![vec![0.5]],
            counts: vec![1],
        };
        assert!(compute_thresholds(&sets, 0.0).is_err());
        assert!(compute_thresholds(&sets, 1.5).is_err());
    }

    #[test]
    fn eta_one_rejects_no_pixels() {
        let ds = tiny_dataset(2, 4);
        let params = tiny_params(5);
        let set = generate_pseudolabels(&params, &ds, 1.0, InferenceMode::Concat).unwrap();
        assert_eq!(set.total_retained(), 2 * 32 * 32);
    }

    #[test]
    fn retention_meets_the_rank_bound_and_respects_thresholds() {
        let ds = tiny_dataset(3, 6);
        let params = tiny_params(7);
        for eta in [0.1, 0.5, 1.0] {
            let sets = collect_confidences(&params, &ds, InferenceMode::Concat).unwrap();
            let sigma = compute_thresholds(&sets, eta).unwrap();
            let set =
                emit_pseudolabels(&params, &ds, &sets, &sigma, eta, InferenceMode::Concat).unwrap();
            let retained = set.retained_per_class(4);
            for cls in 0..4 {
                if sets.counts[cls] == 0 {
                    assert_eq!(retained[cls], 0);
                    continue;
                }
                let want = (sets.counts[cls] as f64 * eta).ceil() as usize;
                assert!(
                    retained[cls] >= want,
                    "eta {eta} class {cls}: retained {} < {want}",
                    retained[cls]
                );
                // exact bound modulo ties at the threshold
                let ties_ok = sets.confidences[cls]
                    .iter()
                    .filter(|&&c| c >= sigma[cls])
                    .count();
                assert_eq!(retained[cls], ties_ok);
            }
        }
    }

    #[test]
    fn retention_is_monotone_in_eta() {
        let ds = tiny_dataset(2, 8);
        let params = tiny_params(9);
        let lo = generate_pseudolabels(&params, &ds, 0.3, InferenceMode::Concat).unwrap();
        let hi = generate_pseudolabels(&params, &ds, 0.8, InferenceMode::Concat).unwrap();
        for (a, b) in lo.maps.iter().zip(&hi.maps) {
            for (x, y) in a.data.iter().zip(&b.data) {
                if *x != IGNORE {
                    assert_eq!(x, y, "pixel retained at eta 0.3 but not 0.8");
                }
            }
        }
    }

    #[test]
    fn pseudolabels_are_deterministic_and_in_range() {
        let ds = tiny_dataset(2, 10);
        let params = tiny_params(11);
        let a = generate_pseudolabels(&params, &ds, 0.5, InferenceMode::Concat).unwrap();
        let b = generate_pseudolabels(&params, &ds, 0.5, InferenceMode::Concat).unwrap();
        assert_eq!(a.maps, b.maps);
        for map in &a.maps {
            for &v in &map.data {
                assert!(v == IGNORE || v < 4);
            }
        }
    }
}
