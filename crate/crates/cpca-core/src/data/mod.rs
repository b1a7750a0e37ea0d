//! Datasets: synthetic generation, on-disk manifests, palette ingestion
//! and deterministic batching.

mod batch;
mod manifest;
mod palette;
mod png_io;
mod synth;

pub use batch::{make_batches, BatchPlan};
pub use manifest::{load_manifest, save_dataset, write_atomic, MANIFEST_NAME};
pub use palette::{labels_to_rgb, rgb_to_labels, Palette};
pub use png_io::{read_gray8, read_rgb8, write_gray8, write_rgb8};
pub use synth::{gen_synthetic, StyleShift, SynthConfig};

use crate::error::{Error, Result};
use crate::labels::{LabelBatch, LabelMap};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Option<Domain> {
        match s {
            "source" => Some(Domain::Source),
            "target" => Some(Domain::Target),
            _ => None,
        }
    }
}

/// One image with its label map. Images are `[3, H, W]` floats in `[0, 1]`
/// on the 8-bit grid; labels are `[H, W]` class indices plus IGNORE.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub labels: LabelMap,
    pub domain: Domain,
    pub id: String,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// An immutable, fully materialized dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Check image/label invariants against a model output stride.
    pub fn validate(&self, output_stride: usize) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Contract("dataset: num_classes must be >= 2".into()));
        }
        for s in &self.samples {
            let (h, w) = (s.height(), s.width());
            if h < 32 || w < 32 || h % output_stride != 0 || w % output_stride != 0 {
                return Err(Error::Contract(format!(
                    "sample {}: size {h}x{w} must be >= 32 and divisible by stride {output_stride}",
                    s.id
                )));
            }
            if (s.labels.height, s.labels.width) != (h, w) {
                return Err(Error::Contract(format!(
                    "sample {}: label size does not match image",
                    s.id
                )));
            }
            s.labels.validate(self.num_classes)?;
        }
        Ok(())
    }

    /// Stack the given sample indices into a `[B, 3, H, W]` image tensor and
    /// a `[B, H, W]` label batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, LabelBatch) {
        assert!(!indices.is_empty());
        let first = &self.samples[indices[0]];
        let (h, w) = (first.height(), first.width());
        let item = 3 * h * w;
        let mut images = Tensor::zeros(&[indices.len(), 3, h, w]);
        let mut maps: Vec<&LabelMap> = Vec::with_capacity(indices.len());
        for (slot, &i) in indices.iter().enumerate() {
            let s = &self.samples[i];
            assert_eq!((s.height(), s.width()), (h, w), "mixed sizes in batch");
            images.data_mut()[slot * item..(slot + 1) * item].copy_from_slice(s.image.data());
            maps.push(&s.labels);
        }
        (images, LabelBatch::from_maps(&maps))
    }
}
