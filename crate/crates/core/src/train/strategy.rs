use super::{dat_step, non_dat_step, poly_lr, Monitor, OptimizerState, TrainConfig};
use crate::dab::DatasetId;
use crate::data::{Batcher, Dataset};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::segnet::{build_model, SegModel, SharingConfig};

const BATCHER_SALT: u64 = 0xBA7C;
const HEAD_SALT: u64 = 0x4EAD;

fn check_label_space(model: &SegModel, id: DatasetId, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    let expected = model.class_count(id)?;
    if ds.num_classes() != expected {
        return Err(Error::Config(format!(
            "dataset {} has {} classes but head {} predicts {expected}",
            ds.name,
            ds.num_classes(),
            id.0
        )));
    }
    Ok(())
}

/// Runs `cfg.max_iter` iterations over `datasets`. With DAT enabled and every
/// dataset of the model present, an iteration is one `dat_step`; otherwise it
/// is one `non_dat_step` per dataset in ascending id order.
fn run(
    model: &mut SegModel,
    datasets: &[(DatasetId, &Dataset)],
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    mon: &mut Monitor,
) -> Result<()> {
    let mut batchers = Vec::new();
    for &(id, ds) in datasets {
        check_label_space(model, id, ds)?;
        batchers.push(Batcher::new(ds, id, cfg.batch_size, derive_seed(cfg.seed, BATCHER_SALT + id.0 as u64))?);
    }
    batchers.sort_by_key(|b| b.id());
    let n = model.num_datasets();
    let alternate = cfg.dat_enabled && batchers.len() == n;
    for iter in 0..cfg.max_iter {
        let lr = poly_lr(cfg, iter)?;
        let mut losses = vec![None; n];
        if alternate {
            let batches: Vec<_> = batchers.iter_mut().map(|b| b.next().expect("endless")).collect();
            for (id, l) in dat_step(model, &batches, cfg, opt, lr)?.into_iter().enumerate() {
                losses[id] = Some(l);
            }
        } else {
            for b in &mut batchers {
                let batch = b.next().expect("endless");
                losses[batch.dataset.0] = Some(non_dat_step(model, &batch, cfg, opt, lr)?);
            }
        }
        mon.record(lr, losses, model)?;
    }
    Ok(())
}

/// Joint training of one model on all `datasets`, dataset `i` using id `i`.
/// Architecture and sharing come from `cfg`.
pub fn train_multi(datasets: &[&Dataset], cfg: &TrainConfig, mon: &mut Monitor) -> Result<SegModel> {
    cfg.validate(datasets.len())?;
    let classes: Vec<usize> = datasets.iter().map(|d| d.num_classes()).collect();
    let mut model = build_model(datasets.len(), &classes, &cfg.widths, cfg.sharing, cfg.seed)?;
    let mut opt = OptimizerState::new(model.store());
    let pairs: Vec<_> = datasets.iter().enumerate().map(|(i, &d)| (DatasetId(i), d)).collect();
    run(&mut model, &pairs, cfg, &mut opt, mon)?;
    Ok(model)
}

/// Single-dataset baseline.
pub fn train_single(dataset: &Dataset, cfg: &TrainConfig, mon: &mut Monitor) -> Result<SegModel> {
    train_multi(&[dataset], cfg, mon)
}

/// Continues training a single-dataset model on `target` after replacing
/// its head with a fresh one sized for the target label space. All
/// parameters train; `cfg` is used unchanged. `cfg.max_iter == 0` returns
/// right after the head swap.
pub fn finetune(pretrained: &SegModel, target: &Dataset, cfg: &TrainConfig, mon: &mut Monitor) -> Result<SegModel> {
    cfg.check(1)?;
    if pretrained.num_datasets() != 1 {
        return Err(Error::Architecture(format!(
            "finetuning expects a single-dataset model, got {} heads",
            pretrained.num_datasets()
        )));
    }
    if pretrained.manifest().widths != cfg.widths {
        return Err(Error::Architecture(format!(
            "pretrained widths {:?} differ from configured {:?}",
            pretrained.manifest().widths,
            cfg.widths
        )));
    }
    let mut model = pretrained.clone();
    model.replace_head(DatasetId(0), target.num_classes(), derive_seed(cfg.seed, HEAD_SALT))?;
    if cfg.max_iter > 0 {
        let mut opt = OptimizerState::new(model.store());
        run(&mut model, &[(DatasetId(0), target)], cfg, &mut opt, mon)?;
    }
    Ok(model)
}

/// Trains a single-head model on `target` concatenated with a source subset
/// already remapped into the target label space.
pub fn train_label_remap(
    target: &Dataset,
    remapped_source: &Dataset,
    cfg: &TrainConfig,
    mon: &mut Monitor,
) -> Result<SegModel> {
    let joint = target.concat(remapped_source, &target.name)?;
    train_single(&joint, cfg, mon)
}

/// Both models of a two-stage run.
#[derive(Debug, Clone)]
pub struct TwoStage {
    /// After stage 1 (source only).
    pub stage_one: SegModel,
    /// After stage 2 (target, with a reinitialized target bank).
    pub model: SegModel,
}

/// Two-stage adaptation baseline on a two-dataset model with shared
/// convolutions and per-dataset batch norm: train on `source` (id 0), then
/// reinitialize bank 1 and train on `target` (id 1). Each stage runs
/// `cfg.max_iter` iterations with a fresh optimizer; `cfg.sharing` is not
/// consulted.
pub fn da_two_stage(
    source: &Dataset,
    target: &Dataset,
    cfg: &TrainConfig,
    freeze_conv: bool,
    mon: &mut Monitor,
) -> Result<TwoStage> {
    cfg.validate(2)?;
    let classes = [source.num_classes(), target.num_classes()];
    let mut model = build_model(2, &classes, &cfg.widths, SharingConfig::CDCL, cfg.seed)?;
    let mut opt = OptimizerState::new(model.store());
    run(&mut model, &[(DatasetId(0), source)], cfg, &mut opt, mon)?;
    let adapted = da_stage_two(&model, target, cfg, freeze_conv, mon)?;
    Ok(TwoStage { stage_one: model, model: adapted })
}

/// Stage 2 of [`da_two_stage`] applied to an existing stage-1 model.
pub fn da_stage_two(
    stage_one: &SegModel,
    target: &Dataset,
    cfg: &TrainConfig,
    freeze_conv: bool,
    mon: &mut Monitor,
) -> Result<SegModel> {
    cfg.validate(2)?;
    if stage_one.num_datasets() != 2 || stage_one.sharing().bn_shared {
        return Err(Error::Architecture("two-stage adaptation needs two unshared batch-norm banks".into()));
    }
    let target_id = DatasetId(1);
    let mut model = stage_one.clone();
    model.reset_bank(target_id)?;
    let mut opt = OptimizerState::new(model.store());
    if freeze_conv {
        opt.freeze(&model.conv_params());
    }
    run(&mut model, &[(target_id, target)], cfg, &mut opt, mon)?;
    Ok(model)
}
