//! Deterministic epoch-seeded batching.

use crate::rng::{self, tag};
use rand::Rng;

/// Batch schedule over a dataset of `len` samples. Each epoch is a seeded
/// permutation (or the identity when `shuffle` is off) cut into consecutive
/// batches; the final partial batch is kept. Everything is a pure function
/// of `(seed, epoch)`, so iteration `t` can be replayed after a resume.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    len: usize,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
}

impl BatchPlan {
    pub fn new(len: usize, batch_size: usize, seed: u64, shuffle: bool) -> Self {
        assert!(len > 0, "empty dataset");
        assert!(batch_size >= 1, "batch_size must be >= 1");
        BatchPlan {
            len,
            batch_size,
            seed,
            shuffle,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    /// Sample order for one epoch.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len).collect();
        if self.shuffle {
            let mut rng = rng::stream(self.seed, &[tag::BATCH, epoch]);
            // Fisher-Yates
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
        }
        order
    }

    /// Sample indices for global iteration `t` (epochs advance implicitly).
    pub fn batch(&self, t: u64) -> Vec<usize> {
        let bpe = self.batches_per_epoch() as u64;
        let epoch = t / bpe;
        let slot = (t % bpe) as usize;
        let order = self.epoch_order(epoch);
        let start = slot * self.batch_size;
        let end = (start + self.batch_size).min(self.len);
        order[start..end].to_vec()
    }
}

/// All batches of one epoch, in order.
pub fn make_batches(len: usize, batch_size: usize, seed: u64, shuffle: bool, epoch: u64) -> Vec<Vec<usize>> {
    let plan = BatchPlan::new(len, batch_size, seed, shuffle);
    let order = plan.epoch_order(epoch);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}
