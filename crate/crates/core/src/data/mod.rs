//! Synthetic multi-dataset generation, the on-disk raster format, label
//! remapping and batching.

mod batcher;
pub mod benchmark;
mod remap;
mod synth;

pub use batcher::{Batch, Batcher};
pub use remap::{remap_dataset, LabelMap, DEFAULT_MIN_VALID_FRACTION};
pub use synth::{generate, generate_to_dir, generate_with, render_unshifted, BackgroundStyle, DatasetSpec, ObjectStyle, Shape, Shift};

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::IGNORE_INDEX;

const SAMPLE_MAGIC: &[u8; 4] = b"CDS1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// One image (`[3, H, W]`, values in `[0, 1]`) and its label map (`[H, W]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
}

/// An in-memory dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub class_names: Vec<String>,
    pub shift: Shift,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub class_names: Vec<String>,
    pub shift: Shift,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Every label is a valid class index or `IGNORE_INDEX`.
    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        for (i, s) in self.samples.iter().enumerate() {
            if s.image.len() != 3 * self.pixels() || s.labels.len() != self.pixels() {
                return Err(Error::Dimension(format!("sample {i} does not match {}x{}", self.height, self.width)));
            }
            if let Some(&label) = s.labels.iter().find(|&&l| l != IGNORE_INDEX && l as usize >= c) {
                return Err(Error::LabelRange { label, classes: c });
            }
        }
        Ok(())
    }

    /// Samples of `self` followed by those of `other`; label spaces and
    /// image sizes must agree.
    pub fn concat(&self, other: &Dataset, name: &str) -> Result<Dataset> {
        if self.class_names != other.class_names {
            return Err(Error::Config(format!(
                "label spaces differ: {:?} vs {:?}",
                self.class_names, other.class_names
            )));
        }
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Config("image sizes differ".into()));
        }
        let mut out = self.clone();
        out.name = name.to_string();
        out.samples.extend(other.samples.iter().cloned());
        Ok(out)
    }

    pub fn sample_file_name(index: usize) -> String {
        format!("sample_{index:05}.cds")
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            name: self.name.clone(),
            class_names: self.class_names.clone(),
            shift: self.shift,
            seed: self.seed,
            height: self.height,
            width: self.width,
            samples: (0..self.len()).map(Self::sample_file_name).collect(),
        }
    }

    /// Writes `manifest.json` and one `.cds` file per sample into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, s) in self.samples.iter().enumerate() {
            let mut f = fs::File::create(dir.join(Self::sample_file_name(i)))?;
            f.write_all(&encode_sample(self.height, self.width, s))?;
        }
        let mut manifest = serde_json::to_vec_pretty(&self.manifest())?;
        manifest.push(b'\n');
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        Ok(())
    }

    pub fn read_from_dir(dir: &Path) -> Result<Dataset> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for name in &manifest.samples {
            let (h, w, s) = decode_sample(&fs::read(dir.join(name))?)?;
            if (h, w) != (manifest.height, manifest.width) {
                return Err(Error::Format(format!("{name} is {h}x{w}, manifest says {}x{}", manifest.height, manifest.width)));
            }
            samples.push(s);
        }
        let ds = Dataset {
            name: manifest.name,
            class_names: manifest.class_names,
            shift: manifest.shift,
            seed: manifest.seed,
            height: manifest.height,
            width: manifest.width,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// `"CDS1"`, u32 H, u32 W, `3*H*W` f32 image values, `H*W` u8 labels; all
/// little-endian.
pub fn encode_sample(height: usize, width: usize, s: &Sample) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + s.image.len() * 4 + s.labels.len());
    buf.extend_from_slice(SAMPLE_MAGIC);
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    for v in &s.image {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&s.labels);
    buf
}

pub fn decode_sample(buf: &[u8]) -> Result<(usize, usize, Sample)> {
    if buf.len() < 12 || &buf[..4] != SAMPLE_MAGIC {
        return Err(Error::Format("not a CDS1 sample".into()));
    }
    let h = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
    let n = h * w;
    if buf.len() != 12 + 3 * n * 4 + n {
        return Err(Error::Format(format!("sample of {h}x{w} has {} bytes", buf.len())));
    }
    let image = buf[12..12 + 12 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let labels = buf[12 + 12 * n..].to_vec();
    Ok((h, w, Sample { image, labels }))
}
