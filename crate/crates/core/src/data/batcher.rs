use rand::seq::SliceRandom;

use super::Dataset;
use crate::dab::DatasetId;
use crate::error::{Error, Result};
use crate::rng::{rng, SplitMix64};
use crate::tensor::{Labels, Tensor};

/// A batch drawn from a single dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, 3, H, W]`, values in `[0, 1]`.
    pub images: Tensor,
    /// `[B, H, W]`.
    pub labels: Labels,
    pub dataset: DatasetId,
    /// Dataset indices of the samples, in batch order.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_indices(ds: &Dataset, indices: &[usize], dataset: DatasetId) -> Batch {
        let (h, w) = (ds.height, ds.width);
        let mut images = Vec::with_capacity(indices.len() * 3 * h * w);
        let mut labels = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            let s = &ds.samples[i];
            images.extend(s.image.iter().map(|&v| v as f64));
            labels.extend_from_slice(&s.labels);
        }
        Batch {
            images: Tensor::new(vec![indices.len(), 3, h, w], images).expect("sample sizes validated"),
            labels: Labels::new([indices.len(), h, w], labels).expect("sample sizes validated"),
            dataset,
            indices: indices.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Endless batch stream over one dataset. Each epoch visits every sample
/// exactly once in an order drawn by a Fisher-Yates shuffle from a
/// SplitMix64 stream seeded with `seed`; the last batch of an epoch may be
/// short.
#[derive(Debug, Clone)]
pub struct Batcher<'a> {
    data: &'a Dataset,
    id: DatasetId,
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    rng: SplitMix64,
}

impl<'a> Batcher<'a> {
    pub fn new(data: &'a Dataset, id: DatasetId, batch_size: usize, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config(format!("dataset {} is empty", data.name)));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let order = (0..data.len()).collect();
        Ok(Self { data, id, batch_size, order, pos: data.len(), epoch: 0, rng: rng(seed) })
    }

    /// Completed epochs (the current one included once it has started).
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn id(&self) -> DatasetId {
        self.id
    }

    pub fn dataset(&self) -> &Dataset {
        self.data
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

impl Iterator for Batcher<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let idx = self.next_indices();
        Some(Batch::from_indices(self.data, &idx, self.id))
    }
}
