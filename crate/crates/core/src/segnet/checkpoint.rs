//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "CDCL"                      magic
//! u32                         format version
//! u64, bytes                  manifest as UTF-8 JSON
//! repeated until EOF:
//!   u64, bytes                tensor name (UTF-8)
//!   u64                       rank
//!   u64 x rank                dims
//!   f64 x prod(dims)          values
//! ```
//!
//! Learnable parameters are stored under their parameter names, running
//! statistics as `<bank>.running_mean` and `<bank>.running_var`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{build_model, ModelManifest, SegModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CDCL";

fn bank_prefix(gamma_name: &str) -> &str {
    gamma_name.strip_suffix(".gamma").unwrap_or(gamma_name)
}

fn named_tensors(model: &SegModel) -> Vec<(String, &Tensor)> {
    let store = model.store();
    let mut out: Vec<(String, &Tensor)> = store.ids().map(|id| (store.name(id).to_string(), store.get(id))).collect();
    for block in model.blocks() {
        for bn in block.bank() {
            let prefix = bank_prefix(store.name(bn.gamma));
            out.push((format!("{prefix}.running_mean"), &bn.running_mean));
            out.push((format!("{prefix}.running_var"), &bn.running_var));
        }
    }
    out
}

pub fn checkpoint_to_bytes(model: &SegModel) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let manifest = serde_json::to_vec(model.manifest())?;
    buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest);
    for (name, t) in named_tensors(model) {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} does not fit in memory")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<SegModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = r.len()?;
    let manifest: ModelManifest = serde_json::from_slice(r.take(n)?)?;
    let mut tensors = HashMap::new();
    while !r.done() {
        let n = r.len()?;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.len()?;
        let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count.ok_or_else(|| Error::Format("tensor too large".into()))?;
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if tensors.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }

    let mut model = build_model(
        manifest.num_datasets,
        &manifest.class_counts,
        &manifest.widths,
        manifest.sharing,
        0,
    )?;
    let mut fill = |name: &str, dst: &mut Tensor| -> Result<()> {
        let t = tensors.remove(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if t.shape() != dst.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, manifest implies {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(t.data());
        Ok(())
    };
    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        let name = model.store().name(id).to_string();
        fill(&name, model.store_mut().get_mut(id))?;
    }
    let names: Vec<Vec<String>> = model
        .blocks()
        .map(|b| b.bank().iter().map(|bn| bank_prefix(model.store().name(bn.gamma)).to_string()).collect())
        .collect();
    for (block, prefixes) in model.blocks_mut().zip(&names) {
        for (bn, prefix) in block.bank_mut().iter_mut().zip(prefixes) {
            fill(&format!("{prefix}.running_mean"), &mut bn.running_mean)?;
            fill(&format!("{prefix}.running_var"), &mut bn.running_var)?;
            if bn.running_var.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::CorruptedState(format!("{prefix} has an invalid running variance")));
            }
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &SegModel, path: &Path) -> Result<()> {
    let bytes = checkpoint_to_bytes(model)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SegModel> {
    checkpoint_from_bytes(&fs::read(path)?)
}
