//! Deterministic epoch ordering and batch iteration.

use super::{PackedDataset, SampleRecord};
use crate::error::Result;
use crate::rng::derive_rng;
use rand::Rng;

/// Record indices for one epoch: a Fisher-Yates shuffle seeded by
/// (seed, epoch), independent of any other random stream.
#[must_use]
pub fn epoch_indices(count: usize, seed: u64, epoch: u64) -> Vec<u32> {
    let mut order: Vec<u32> = (0..count as u32).collect();
    let mut rng = derive_rng(seed, "epoch-shuffle", &[epoch]);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Batches of records in a fixed order.
pub struct BatchIter<'a> {
    dataset: &'a PackedDataset,
    order: Vec<u32>,
    batch_size: usize,
    drop_last: bool,
    pos: usize,
}

impl<'a> BatchIter<'a> {
    /// `order` indexes into `dataset`; out-of-range entries surface as
    /// errors during iteration.
    #[must_use]
    pub fn new(
        dataset: &'a PackedDataset,
        order: Vec<u32>,
        batch_size: usize,
        drop_last: bool,
    ) -> Self {
        BatchIter {
            dataset,
            order,
            batch_size: batch_size.max(1),
            drop_last,
            pos: 0,
        }
    }

    /// Sequential full-coverage iteration (evaluation order).
    #[must_use]
    pub fn sequential(dataset: &'a PackedDataset, batch_size: usize) -> Self {
        let order = (0..dataset.count() as u32).collect();
        Self::new(dataset, order, batch_size, false)
    }

    /// Number of batches this iterator will yield.
    #[must_use]
    pub fn num_batches(&self) -> usize {
        if self.drop_last {
            self.order.len() / self.batch_size
        } else {
            self.order.len().div_ceil(self.batch_size)
        }
    }
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Result<Vec<SampleRecord>>;

    fn next(&mut self) -> Option<Self::Item> {
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            return None;
        }
        let take = remaining.min(self.batch_size);
        let mut batch = Vec::with_capacity(take);
        for k in 0..take {
            let ix = self.order[self.pos + k] as usize;
            match self.dataset.read_record(ix) {
                Ok(rec) => batch.push(rec),
                Err(e) => {
                    self.pos = self.order.len();
                    return Some(Err(e));
                }
            }
        }
        self.pos += take;
        Some(Ok(batch))
    }
}
