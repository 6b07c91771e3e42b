use serde::{Deserialize, Serialize};

use crate::dab::DatasetId;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::segnet::SegModel;

use super::precise::ChannelMoments;
use super::EVAL_BATCH;

/// Which batch-norm bank serves data from a dataset the model never saw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "id")]
pub enum BankChoice {
    /// The bank whose first-block statistics are closest to the data's.
    Nearest,
    /// A fixed dataset id.
    Fixed(usize),
}

/// Divergence between the first-block pre-normalization statistics of
/// `dataset` (through the convolution of each candidate id) and each
/// candidate bank's running statistics: the channel-averaged 2-Wasserstein
/// distance between per-channel Gaussians.
pub fn bank_divergences(model: &SegModel, dataset: &Dataset, candidates: &[DatasetId]) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Config(format!("dataset {} is empty", dataset.name)));
    }
    let mut out = Vec::new();
    for &id in candidates {
        let mut m = ChannelMoments::empty(0);
        for s in (0..dataset.len()).step_by(EVAL_BATCH) {
            let idx: Vec<usize> = (s..(s + EVAL_BATCH).min(dataset.len())).collect();
            let images = Batch::from_indices(dataset, &idx, id).images;
            m.merge(&ChannelMoments::from_activations(&model.probe_pre_norm(&images, id, 0)?)?);
        }
        let bank = model.blocks().next().expect("at least one block").bn_for(id)?;
        let var = m.variance();
        let c = m.mean.len();
        let d = (0..c)
            .map(|ch| {
                let dm = m.mean[ch] - bank.running_mean.data()[ch];
                let ds = var[ch].sqrt() - bank.running_var.data()[ch].sqrt();
                (dm * dm + ds * ds).sqrt()
            })
            .sum::<f64>()
            / c as f64;
        out.push(d);
    }
    Ok(out)
}

/// Resolves `choice` among ids whose head predicts `dataset`'s label space.
pub fn select_bank(model: &SegModel, dataset: &Dataset, choice: BankChoice) -> Result<DatasetId> {
    let compatible: Vec<DatasetId> = (0..model.num_datasets())
        .map(DatasetId)
        .filter(|&id| model.class_count(id).is_ok_and(|c| c == dataset.num_classes()))
        .collect();
    match choice {
        BankChoice::Fixed(i) => {
            if compatible.contains(&DatasetId(i)) {
                Ok(DatasetId(i))
            } else {
                Err(Error::Config(format!("head {i} does not match the label space of {}", dataset.name)))
            }
        }
        BankChoice::Nearest => {
            if compatible.is_empty() {
                return Err(Error::Config(format!("no head matches the label space of {}", dataset.name)));
            }
            let d = bank_divergences(model, dataset, &compatible)?;
            let best = (0..d.len()).min_by(|&a, &b| d[a].total_cmp(&d[b])).expect("non-empty");
            Ok(compatible[best])
        }
    }
}
