use crate::dab::DatasetId;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::segnet::SegModel;
use crate::tensor::kernels::channel_moments;
use crate::tensor::Tensor;

use super::EVAL_BATCH;

/// Per-channel count, mean and sum of squared deviations; merged with the
/// pairwise update of Chan et al.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMoments {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl ChannelMoments {
    pub fn empty(channels: usize) -> Self {
        Self { count: 0, mean: vec![0.0; channels], m2: vec![0.0; channels] }
    }

    /// Moments of a `[B, C, H, W]` tensor, accumulated in the same order as
    /// train-mode batch statistics.
    pub fn from_activations(t: &Tensor) -> Result<Self> {
        let dims = t.dims4()?;
        let (mean, m2) = channel_moments(dims, t.data());
        Ok(Self { count: (dims[0] * dims[2] * dims[3]) as u64, mean, m2 })
    }

    pub fn merge(&mut self, other: &ChannelMoments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for ch in 0..self.mean.len() {
            let delta = other.mean[ch] - self.mean[ch];
            self.mean[ch] += delta * nb / n;
            self.m2[ch] += other.m2[ch] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    /// Biased variance.
    pub fn variance(&self) -> Vec<f64> {
        self.m2.iter().map(|m2| m2 / self.count as f64).collect()
    }
}

/// Replaces the running statistics of bank `id` with exact population
/// statistics over `dataset`, one block at a time from input to output so
/// each block sees inputs normalized by already recalibrated predecessors.
/// Learnable parameters are untouched.
pub fn precise_bn(model: &SegModel, dataset: &Dataset, id: DatasetId) -> Result<SegModel> {
    if dataset.is_empty() {
        return Err(Error::Config(format!("dataset {} is empty", dataset.name)));
    }
    let batches: Vec<Tensor> = (0..dataset.len())
        .step_by(EVAL_BATCH)
        .map(|s| {
            let idx: Vec<usize> = (s..(s + EVAL_BATCH).min(dataset.len())).collect();
            Batch::from_indices(dataset, &idx, id).images
        })
        .collect();
    let mut out = model.clone();
    for layer in 0..out.num_blocks() {
        let snapshot = &out;
        let parts = snapshot.exec().map(batches.len(), |i| {
            ChannelMoments::from_activations(&snapshot.probe_pre_norm(&batches[i], id, layer)?)
        });
        let mut total: Option<ChannelMoments> = None;
        for p in parts {
            let p = p?;
            total.get_or_insert_with(|| ChannelMoments::empty(p.mean.len())).merge(&p);
        }
        let total = total.expect("dataset is non-empty");
        let block = out.blocks_mut().nth(layer).expect("layer in range");
        block.bn_for_mut(id)?.set_running(&total.mean, &total.variance())?;
    }
    Ok(out)
}
