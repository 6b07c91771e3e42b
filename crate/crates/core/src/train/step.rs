use super::{OptimizerState, TrainConfig};
use crate::dab::DatasetId;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::segnet::SegModel;
use crate::tensor::{Tape, IGNORE_INDEX};

fn check_finite(losses: &[f64]) -> Result<()> {
    match losses.iter().position(|l| !l.is_finite()) {
        Some(i) => Err(Error::Numerical(format!("loss {} for batch {i} is not finite", losses[i]))),
        None => Ok(()),
    }
}

/// Train-mode forwards of `batches` (in the given order) on one tape,
/// `sum_i weights[i] * loss_i`, and one backward pass. Gradients are added to
/// the parameter store; running statistics of each batch's bank are updated.
fn forward_backward(model: &mut SegModel, batches: &[&Batch], weights: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::with_exec(model.exec());
    let mut total = None;
    let mut losses = Vec::with_capacity(batches.len());
    for (batch, &w) in batches.iter().zip(weights) {
        let x = tape.constant(batch.images.clone());
        let logits = model.forward_train(&mut tape, x, batch.dataset)?;
        let l = tape.cross_entropy(logits, &batch.labels, IGNORE_INDEX)?;
        losses.push(tape.value(l).item()?);
        let wl = tape.scale(l, w);
        total = Some(match total {
            None => wl,
            Some(t) => tape.add(t, wl)?,
        });
    }
    check_finite(&losses)?;
    let total = total.ok_or_else(|| Error::Alternation("no batches".into()))?;
    tape.backward(total, model.store_mut())?;
    Ok(losses)
}

fn ordered<'a>(model: &SegModel, batches: &'a [Batch]) -> Result<Vec<&'a Batch>> {
    let n = model.num_datasets();
    let mut seen = vec![false; n];
    for b in batches {
        match seen.get_mut(b.dataset.0) {
            None => return Err(Error::Alternation(format!("batch for unknown dataset {}", b.dataset.0))),
            Some(true) => return Err(Error::Alternation(format!("two batches for dataset {}", b.dataset.0))),
            Some(s) => *s = true,
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Alternation(format!("no batch for dataset {missing}")));
    }
    let mut out: Vec<&Batch> = batches.iter().collect();
    out.sort_by_key(|b| b.dataset);
    Ok(out)
}

/// The gradient half of a DAT iteration: one train forward per dataset in
/// ascending id order, then a single backward pass of the weighted loss sum.
/// Leaves the gradients in the store and returns the unweighted losses in id
/// order.
pub fn dat_backward(model: &mut SegModel, batches: &[Batch], weights: &[f64]) -> Result<Vec<f64>> {
    let batches = ordered(model, batches)?;
    if weights.len() != batches.len() {
        return Err(Error::Config(format!("{} loss weight(s) for {} dataset(s)", weights.len(), batches.len())));
    }
    forward_backward(model, &batches, weights)
}

/// One DAT iteration with exactly one batch per dataset and a single
/// optimizer step at learning rate `lr`.
pub fn dat_step(
    model: &mut SegModel,
    batches: &[Batch],
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<Vec<f64>> {
    let ids: Vec<DatasetId> = (0..model.num_datasets()).map(DatasetId).collect();
    let losses = dat_backward(model, batches, &cfg.weights(ids.len()))?;
    apply(model, &ids, cfg, opt, lr)?;
    Ok(losses)
}

/// Forward, backward and optimizer step on a single dataset's batch.
pub fn non_dat_step(
    model: &mut SegModel,
    batch: &Batch,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<f64> {
    let id = batch.dataset;
    if id.0 >= model.num_datasets() {
        return Err(Error::Alternation(format!("batch for unknown dataset {}", id.0)));
    }
    let w = cfg.weights(model.num_datasets())[id.0];
    let loss = forward_backward(model, &[batch], &[w])?[0];
    apply(model, &[id], cfg, opt, lr)?;
    Ok(loss)
}

fn apply(model: &mut SegModel, ids: &[DatasetId], cfg: &TrainConfig, opt: &mut OptimizerState, lr: f64) -> Result<()> {
    let active = model.params_for_all(ids)?;
    super::sgd_step(model.store_mut(), &active, opt, lr, cfg.momentum, cfg.weight_decay)?;
    model.store_mut().clear_grads();
    Ok(())
}
