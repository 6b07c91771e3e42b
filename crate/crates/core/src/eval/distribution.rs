use std::io::Write;

use serde::Serialize;

use crate::dab::DatasetId;
use crate::error::{Error, Result};
use crate::segnet::SegModel;

/// Histogram resolution.
pub const BINS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroupKind {
    ConvWeight,
    BnRunningMean,
    BnRunningVar,
}

impl ParamGroupKind {
    pub const ALL: [ParamGroupKind; 3] = [Self::ConvWeight, Self::BnRunningMean, Self::BnRunningVar];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ConvWeight => "conv_weight",
            Self::BnRunningMean => "bn_running_mean",
            Self::BnRunningVar => "bn_running_var",
        }
    }
}

/// A model seen through one dataset id (its convolutions and bank).
#[derive(Debug, Clone, Copy)]
pub struct ReportInput<'a> {
    pub label: &'a str,
    pub model: &'a SegModel,
    pub id: DatasetId,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairDivergence {
    pub a: usize,
    pub b: usize,
    pub w1: f64,
}

/// Histograms of one parameter group of one layer, one per input, over a
/// shared range.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupHistogram {
    pub layer: String,
    pub group: ParamGroupKind,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<Vec<u64>>,
    pub divergences: Vec<PairDivergence>,
}

impl GroupHistogram {
    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / BINS as f64
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=BINS).map(|k| self.lo + k as f64 * self.bin_width()).collect()
    }

    /// Mean pairwise divergence (0 with fewer than two inputs).
    pub fn mean_divergence(&self) -> f64 {
        if self.divergences.is_empty() {
            return 0.0;
        }
        self.divergences.iter().map(|d| d.w1).sum::<f64>() / self.divergences.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionReport {
    pub inputs: Vec<String>,
    pub groups: Vec<GroupHistogram>,
}

impl DistributionReport {
    pub fn group(&self, layer: &str, kind: ParamGroupKind) -> Option<&GroupHistogram> {
        self.groups.iter().find(|g| g.layer == layer && g.group == kind)
    }

    pub fn layers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for g in &self.groups {
            if !out.contains(&g.layer) {
                out.push(g.layer.clone());
            }
        }
        out
    }

    /// Long-format CSV: one `count` row per input and bin, one `divergence`
    /// row per input pair.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Format(format!("distribution report: {e}"));
        w.write_record(["layer", "group", "record", "a", "b", "bin", "lo", "hi", "value"]).map_err(err)?;
        for g in &self.groups {
            let edges = g.edges();
            for (i, counts) in g.counts.iter().enumerate() {
                for (k, c) in counts.iter().enumerate() {
                    w.write_record([
                        g.layer.as_str(),
                        g.group.as_str(),
                        "count",
                        &self.inputs[i],
                        "",
                        &k.to_string(),
                        &edges[k].to_string(),
                        &edges[k + 1].to_string(),
                        &c.to_string(),
                    ])
                    .map_err(err)?;
                }
            }
            for d in &g.divergences {
                w.write_record([
                    g.layer.as_str(),
                    g.group.as_str(),
                    "divergence",
                    &self.inputs[d.a],
                    &self.inputs[d.b],
                    "",
                    "",
                    "",
                    &d.w1.to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// 1-Wasserstein distance between two histograms on the same bins of width
/// `bin_width`, each normalized to unit mass.
pub fn wasserstein1(a: &[u64], b: &[u64], bin_width: f64) -> f64 {
    let (ta, tb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let (mut ca, mut cb, mut dist) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ca += *x as f64 / ta;
        cb += *y as f64 / tb;
        dist += (ca - cb).abs();
    }
    dist * bin_width
}

fn group_values(input: &ReportInput, block: usize, kind: ParamGroupKind) -> Result<Vec<f64>> {
    let b = input.model.blocks().nth(block).expect("block index checked");
    Ok(match kind {
        ParamGroupKind::ConvWeight => input.model.store().get(b.conv_for(input.id)?).data().to_vec(),
        ParamGroupKind::BnRunningMean => b.bn_for(input.id)?.running_mean.data().to_vec(),
        ParamGroupKind::BnRunningVar => b.bn_for(input.id)?.running_var.data().to_vec(),
    })
}

fn histogram(values: &[f64], lo: f64, hi: f64) -> Vec<u64> {
    let mut counts = vec![0u64; BINS];
    let scale = BINS as f64 / (hi - lo);
    for &v in values {
        let k = (((v - lo) * scale).floor().max(0.0) as usize).min(BINS - 1);
        counts[k] += 1;
    }
    counts
}

/// Histograms every parameter group of the selected layers (all when
/// `layers` is `None`) for each input, with pairwise 1-Wasserstein
/// divergences.
pub fn distribution_report(inputs: &[ReportInput], layers: Option<&[String]>) -> Result<DistributionReport> {
    let first = inputs.first().ok_or_else(|| Error::Comparison("nothing to compare".into()))?;
    let names = first.model.block_names();
    for inp in &inputs[1..] {
        if inp.model.block_names() != names || inp.model.manifest().widths != first.model.manifest().widths {
            return Err(Error::Comparison(format!(
                "{} and {} have different architectures",
                first.label, inp.label
            )));
        }
    }
    if let Some(sel) = layers {
        if let Some(bad) = sel.iter().find(|l| !names.contains(l)) {
            return Err(Error::Config(format!("unknown layer {bad:?}; layers are {names:?}")));
        }
    }
    let mut groups = Vec::new();
    for (block, name) in names.iter().enumerate() {
        if layers.is_some_and(|sel| !sel.contains(name)) {
            continue;
        }
        for kind in ParamGroupKind::ALL {
            let values = inputs.iter().map(|i| group_values(i, block, kind)).collect::<Result<Vec<_>>>()?;
            let all = values.iter().flatten();
            let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            // also catches NaN
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(hi - lo > 1e-12) {
                (lo, hi) = (lo - 0.5, hi + 0.5);
            }
            let counts: Vec<Vec<u64>> = values.iter().map(|v| histogram(v, lo, hi)).collect();
            let width = (hi - lo) / BINS as f64;
            let mut divergences = Vec::new();
            for a in 0..counts.len() {
                for b in a + 1..counts.len() {
                    divergences.push(PairDivergence { a, b, w1: wasserstein1(&counts[a], &counts[b], width) });
                }
            }
            groups.push(GroupHistogram { layer: name.clone(), group: kind, lo, hi, counts, divergences });
        }
    }
    Ok(DistributionReport { inputs: inputs.iter().map(|i| i.label.to_string()).collect(), groups })
}
