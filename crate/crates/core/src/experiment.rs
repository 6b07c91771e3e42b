//! The Conv/BN sharing by DAT ablation grid.

use serde::{Deserialize, Serialize};

use crate::dab::DatasetId;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::segnet::{SegModel, SharingConfig};
use crate::train::{train_multi, Monitor, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sharing: SharingConfig,
    pub dat: bool,
}

impl AblationRow {
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig { sharing: self.sharing, dat_enabled: self.dat, ..base.clone() }
    }

    pub fn label(&self) -> String {
        let s = |shared: bool| if shared { "shared" } else { "not shared" };
        format!(
            "conv {} / bn {} / {}",
            s(self.sharing.conv_shared),
            s(self.sharing.bn_shared),
            if self.dat { "DAT" } else { "no DAT" }
        )
    }
}

const fn row(conv_shared: bool, bn_shared: bool, dat: bool) -> AblationRow {
    AblationRow { sharing: SharingConfig { conv_shared, bn_shared }, dat }
}

/// The four sharing configurations trained without alternation, then the
/// shared-conv / per-dataset-BN configuration with it.
pub const ABLATION_GRID: [AblationRow; 5] = [
    row(false, false, false),
    row(false, true, false),
    row(true, true, false),
    row(true, false, false),
    row(true, false, true),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub label: String,
    /// Validation mIoU per dataset.
    pub miou: Vec<f64>,
    pub mean_miou: f64,
}

/// Validation mIoU of `model` on `vals[i]` with id `i`.
pub fn val_miou(model: &SegModel, vals: &[&Dataset]) -> Result<Vec<f64>> {
    vals.iter().enumerate().map(|(i, v)| Ok(evaluate(model, v, DatasetId(i))?.miou)).collect()
}

/// Trains one joint model per grid row on `trains` and evaluates it on
/// `vals`. `on_row` sees each trained model.
pub fn run_ablation(
    trains: &[&Dataset],
    vals: &[&Dataset],
    base: &TrainConfig,
    mut on_row: impl FnMut(&AblationResult, &SegModel),
) -> Result<Vec<AblationResult>> {
    if trains.len() != vals.len() || trains.len() < 2 {
        return Err(Error::Config(format!(
            "ablation needs at least two train/val pairs, got {} train and {} val",
            trains.len(),
            vals.len()
        )));
    }
    let mut out = Vec::new();
    for row in ABLATION_GRID {
        let model = train_multi(trains, &row.config(base), &mut Monitor::silent())?;
        let miou = val_miou(&model, vals)?;
        let mean_miou = miou.iter().sum::<f64>() / miou.len() as f64;
        let result = AblationResult { row, label: row.label(), miou, mean_miou };
        on_row(&result, &model);
        out.push(result);
    }
    Ok(out)
}
