use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::IGNORE_INDEX;

/// Samples keeping less than this fraction of labeled pixels are dropped.
pub const DEFAULT_MIN_VALID_FRACTION: f64 = 0.05;

/// Total map from a source label space into a target label space; `None`
/// sends a class to the ignore label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelMap {
    pub source: String,
    pub target: String,
    pub target_classes: Vec<String>,
    pub mapping: Vec<Option<usize>>,
}

impl LabelMap {
    pub fn identity(ds: &Dataset) -> Self {
        Self {
            source: ds.name.clone(),
            target: ds.name.clone(),
            target_classes: ds.class_names.clone(),
            mapping: (0..ds.num_classes()).map(Some).collect(),
        }
    }

    /// Builds a map from class-name pairs. Source classes not listed map to
    /// the ignore label.
    pub fn from_names(
        source: &str,
        source_classes: &[String],
        target: &str,
        target_classes: &[String],
        pairs: &[(String, Option<String>)],
    ) -> Result<Self> {
        let mut mapping = vec![None; source_classes.len()];
        for (from, to) in pairs {
            let i = source_classes
                .iter()
                .position(|c| c == from)
                .ok_or_else(|| Error::Mapping(format!("unknown source class {from:?}")))?;
            mapping[i] = match to {
                Some(to) => Some(
                    target_classes
                        .iter()
                        .position(|c| c == to)
                        .ok_or_else(|| Error::Mapping(format!("unknown target class {to:?}")))?,
                ),
                None => None,
            };
        }
        let map = Self {
            source: source.to_string(),
            target: target.to_string(),
            target_classes: target_classes.to_vec(),
            mapping,
        };
        map.validate(source_classes.len())?;
        Ok(map)
    }

    pub fn validate(&self, source_classes: usize) -> Result<()> {
        if self.mapping.len() != source_classes {
            return Err(Error::Mapping(format!(
                "map covers {} classes, source has {source_classes}",
                self.mapping.len()
            )));
        }
        if let Some(t) = self.mapping.iter().flatten().find(|&&t| t >= self.target_classes.len()) {
            return Err(Error::Mapping(format!("target class {t} out of range")));
        }
        Ok(())
    }

    pub fn apply(&self, label: u8) -> Result<u8> {
        if label == IGNORE_INDEX {
            return Ok(IGNORE_INDEX);
        }
        match self.mapping.get(label as usize) {
            Some(Some(t)) => Ok(*t as u8),
            Some(None) => Ok(IGNORE_INDEX),
            None => Err(Error::Mapping(format!("source class {label} has no entry"))),
        }
    }
}

/// Relabels `src` through `map` and keeps the samples with at least
/// `min_valid_fraction` non-ignored pixels. The result carries the target
/// label space; images and pixel positions are unchanged.
pub fn remap_dataset(src: &Dataset, map: &LabelMap, min_valid_fraction: f64) -> Result<Dataset> {
    map.validate(src.num_classes())?;
    let mut samples = Vec::new();
    for s in &src.samples {
        let labels = s.labels.iter().map(|&l| map.apply(l)).collect::<Result<Vec<u8>>>()?;
        let valid = labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
        if (valid as f64) >= min_valid_fraction * labels.len() as f64 {
            samples.push(super::Sample { image: s.image.clone(), labels });
        }
    }
    Ok(Dataset {
        name: format!("{}->{}", src.name, map.target),
        class_names: map.target_classes.clone(),
        samples,
        ..src.clone()
    })
}
