//! Integer label maps with an ignore index.

use crate::error::{Error, Result};

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// Per-image label map, `[H, W]`, values in `{0..K-1}` plus [`IGNORE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(height * width, data.len());
        LabelMap { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Count of pixels per class index (ignoring [`IGNORE`]).
    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0usize; num_classes];
        for &v in &self.data {
            if v != IGNORE {
                h[v as usize] += 1;
            }
        }
        h
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for &v in &self.data {
            if v != IGNORE && (v as usize) >= num_classes {
                return Err(Error::Contract(format!(
                    "label {v} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(())
    }
}

/// Stacked label maps, `[B, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelBatch {
    pub fn from_maps(maps: &[&LabelMap]) -> Self {
        assert!(!maps.is_empty());
        let (h, w) = (maps[0].height, maps[0].width);
        let mut data = Vec::with_capacity(maps.len() * h * w);
        for m in maps {
            assert_eq!((m.height, m.width), (h, w), "inconsistent label map sizes");
            data.extend_from_slice(&m.data);
        }
        LabelBatch {
            batch: maps.len(),
            height: h,
            width: w,
            data,
        }
    }

    pub fn filled(batch: usize, height: usize, width: usize, value: u8) -> Self {
        LabelBatch {
            batch,
            height,
            width,
            data: vec![value; batch * height * width],
        }
    }

    #[inline]
    pub fn at(&self, b: usize, y: usize, x: usize) -> u8 {
        self.data[(b * self.height + y) * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for &v in &self.data {
            if v != IGNORE && (v as usize) >= num_classes {
                return Err(Error::Contract(format!(
                    "label {v} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(())
    }

    /// Reorder images along the batch axis: `out[i] = self[perm[i]]`.
    pub fn permute_batch(&self, perm: &[usize]) -> LabelBatch {
        assert_eq!(perm.len(), self.batch);
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(self.data.len());
        for &src in perm {
            data.extend_from_slice(&self.data[src * plane..(src + 1) * plane]);
        }
        LabelBatch {
            batch: self.batch,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Nearest-neighbor downsample by an integer factor, sampling each
    /// output cell at the center of its input block (offset `factor / 2`).
    pub fn downsample_nearest(&self, factor: usize) -> LabelBatch {
        assert!(factor >= 1);
        assert_eq!(self.height % factor, 0);
        assert_eq!(self.width % factor, 0);
        let (oh, ow) = (self.height / factor, self.width / factor);
        let off = factor / 2;
        let mut data = Vec::with_capacity(self.batch * oh * ow);
        for b in 0..self.batch {
            for y in 0..oh {
                for x in 0..ow {
                    data.push(self.at(b, y * factor + off, x * factor + off));
                }
            }
        }
        LabelBatch {
            batch: self.batch,
            height: oh,
            width: ow,
            data,
        }
    }
}
