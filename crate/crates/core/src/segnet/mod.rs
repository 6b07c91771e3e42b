//! Encoder-decoder segmentation network built from dataset-aware blocks,
//! with one classifier head per dataset.
//!
//! Layout for widths `[w0, .., wk]` (every convolution 3x3, padding 1):
//!
//! ```text
//! encoder  stage i : DAB(c_in -> w_i)      then 2x2 max pool
//! decoder  stage i : DAB(w_i -> w_{i-1})   then 2x nearest upsample   (i = k .. 1)
//!          last    : DAB(w_0 -> w_0)       then 2x nearest upsample
//! head[d]          : 1x1 conv w_0 -> C_d (+ bias)
//! ```
//!
//! Decoder blocks run before their upsampling, so every block works at the
//! resolution of its mirrored encoder stage. Input height and width must be
//! divisible by `2^(k+1)`.

mod checkpoint;

pub use checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::dab::{kaiming_conv, DatasetAwareBlock, DatasetId, Mode};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{derive_seed, rng};
use crate::tensor::{BatchStats, ParamId, ParamRole, ParamStore, Tape, Tensor, Var};

pub const IN_CHANNELS: usize = 3;
pub const KERNEL: usize = 3;
pub const DEFAULT_WIDTHS: [usize; 3] = [16, 32, 64];

/// Which parts of a block are shared across datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharingConfig {
    pub conv_shared: bool,
    pub bn_shared: bool,
}

impl SharingConfig {
    /// Shared convolutions, per-dataset batch norm.
    pub const CDCL: Self = Self { conv_shared: true, bn_shared: false };
}

impl Default for SharingConfig {
    fn default() -> Self {
        Self::CDCL
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub num_datasets: usize,
    pub class_counts: Vec<usize>,
    pub widths: Vec<usize>,
    pub sharing: SharingConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    manifest: ModelManifest,
    store: ParamStore,
    encoder: Vec<DatasetAwareBlock>,
    decoder: Vec<DatasetAwareBlock>,
    heads: Vec<Head>,
    exec: Exec,
}

fn new_head(store: &mut ParamStore, seed: u64, d: usize, features: usize, classes: usize) -> Head {
    let mut r = rng(seed);
    let weight = store.add(format!("head{d}.weight"), ParamRole::HeadWeight, kaiming_conv(&mut r, classes, features, 1));
    let bias = store.add(format!("head{d}.bias"), ParamRole::HeadBias, Tensor::zeros(&[classes]));
    Head { weight, bias }
}

/// Builds a model with deterministic initialization from `seed`.
pub fn build_model(
    num_datasets: usize,
    class_counts: &[usize],
    widths: &[usize],
    sharing: SharingConfig,
    seed: u64,
) -> Result<SegModel> {
    if num_datasets == 0 || class_counts.len() != num_datasets {
        return Err(Error::Config(format!(
            "{num_datasets} dataset(s) but {} class count(s)",
            class_counts.len()
        )));
    }
    if widths.is_empty() || widths.contains(&0) {
        return Err(Error::Config(format!("widths must be non-empty and positive, got {widths:?}")));
    }
    if let Some(&c) = class_counts.iter().find(|&&c| !(2..=255).contains(&c)) {
        return Err(Error::Config(format!("class count {c} outside 2..=255")));
    }
    let manifest = ModelManifest {
        num_datasets,
        class_counts: class_counts.to_vec(),
        widths: widths.to_vec(),
        sharing,
    };
    let mut store = ParamStore::new();
    let mut r = rng(derive_seed(seed, 0));
    let block = |store: &mut ParamStore, r: &mut _, name: String, cin, cout| {
        DatasetAwareBlock::with_sharing(
            store,
            r,
            &name,
            cin,
            cout,
            KERNEL,
            num_datasets,
            sharing.conv_shared,
            sharing.bn_shared,
        )
    };
    let mut encoder = Vec::new();
    let mut cin = IN_CHANNELS;
    for (i, &w) in widths.iter().enumerate() {
        encoder.push(block(&mut store, &mut r, format!("enc{i}"), cin, w));
        cin = w;
    }
    let mut decoder = Vec::new();
    for i in (0..widths.len()).rev() {
        let cout = if i == 0 { widths[0] } else { widths[i - 1] };
        decoder.push(block(&mut store, &mut r, format!("dec{}", decoder.len()), cin, cout));
        cin = cout;
    }
    let heads = class_counts
        .iter()
        .enumerate()
        .map(|(d, &c)| new_head(&mut store, derive_seed(seed, 1 + d as u64), d, widths[0], c))
        .collect();
    Ok(SegModel { manifest, store, encoder, decoder, heads, exec: Exec::default() })
}

impl SegModel {
    pub fn manifest(&self) -> &ModelManifest {
        &self.manifest
    }

    pub fn num_datasets(&self) -> usize {
        self.manifest.num_datasets
    }

    pub fn class_count(&self, id: DatasetId) -> Result<usize> {
        self.check(id)?;
        Ok(self.manifest.class_counts[id.0])
    }

    pub fn sharing(&self) -> SharingConfig {
        self.manifest.sharing
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn set_exec(&mut self, exec: Exec) {
        self.exec = exec;
    }

    /// Input spatial sizes must be multiples of this.
    pub fn downsampling(&self) -> usize {
        1 << self.manifest.widths.len()
    }

    /// All blocks in forward order: encoder then decoder.
    pub fn blocks(&self) -> impl Iterator<Item = &DatasetAwareBlock> {
        self.encoder.iter().chain(&self.decoder)
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut DatasetAwareBlock> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut())
    }

    pub fn num_blocks(&self) -> usize {
        self.encoder.len() + self.decoder.len()
    }

    pub fn block_names(&self) -> Vec<String> {
        (0..self.encoder.len())
            .map(|i| format!("enc{i}"))
            .chain((0..self.decoder.len()).map(|i| format!("dec{i}")))
            .collect()
    }

    pub fn head(&self, id: DatasetId) -> Result<Head> {
        self.check(id)?;
        Ok(self.heads[id.0])
    }

    fn check(&self, id: DatasetId) -> Result<()> {
        if id.0 >= self.manifest.num_datasets {
            return Err(Error::Switch { id: id.0, banks: self.manifest.num_datasets });
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let f = self.downsampling();
        match shape {
            [_, IN_CHANNELS, h, w] if h % f == 0 && w % f == 0 => Ok(()),
            [_, IN_CHANNELS, h, w] => Err(Error::Dimension(format!(
                "input {h}x{w} is not divisible by the downsampling factor {f}"
            ))),
            _ => Err(Error::Dimension(format!("expected [B, {IN_CHANNELS}, H, W] images, got {shape:?}"))),
        }
    }

    /// Parameters a forward with `id` reads.
    pub fn params_for(&self, id: DatasetId) -> Result<Vec<ParamId>> {
        let head = self.head(id)?;
        let mut out = Vec::new();
        for b in self.blocks() {
            out.extend(b.params_for(id)?);
        }
        out.extend([head.weight, head.bias]);
        Ok(out)
    }

    /// Union of `params_for` over several ids, in store order, deduplicated.
    pub fn params_for_all(&self, ids: &[DatasetId]) -> Result<Vec<ParamId>> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend(self.params_for(id)?);
        }
        out.sort();
        out.dedup();
        Ok(out)
    }

    /// Convolution weights of every block (not heads).
    pub fn conv_params(&self) -> Vec<ParamId> {
        self.blocks().flat_map(|b| b.convs().to_vec()).collect()
    }

    fn run(
        &self,
        tape: &mut Tape,
        images: Var,
        id: DatasetId,
        mode: Mode,
        stop_at: Option<usize>,
    ) -> Result<(Var, Vec<BatchStats>)> {
        self.check(id)?;
        self.check_input(tape.shape(images))?;
        let mut x = images;
        let mut stats = Vec::new();
        for (stage, block) in self.blocks().enumerate() {
            if stop_at == Some(stage) {
                return Ok((block.conv(tape, &self.store, x, id)?, stats));
            }
            let (y, s) = block.forward(tape, &self.store, x, id, mode)?;
            stats.extend(s);
            x = if stage < self.encoder.len() { tape.maxpool2d(y, 2, 2)? } else { tape.upsample_nearest(y, 2)? };
        }
        let head = self.heads[id.0];
        let w = tape.param(&self.store, head.weight);
        let b = tape.param(&self.store, head.bias);
        Ok((tape.conv2d(x, w, Some(b), 1, 0)?, stats))
    }

    /// Forward pass that records on `tape`. Train mode returns the batch
    /// statistics of every block in forward order; the caller decides
    /// whether to fold them into the running averages.
    pub fn forward(&self, tape: &mut Tape, images: Var, id: DatasetId, mode: Mode) -> Result<(Var, Vec<BatchStats>)> {
        self.run(tape, images, id, mode, None)
    }

    /// Train-mode forward that updates the running statistics of bank `id`.
    pub fn forward_train(&mut self, tape: &mut Tape, images: Var, id: DatasetId) -> Result<Var> {
        let (logits, stats) = self.forward(tape, images, id, Mode::Train)?;
        self.apply_stats(id, &stats)?;
        Ok(logits)
    }

    pub fn apply_stats(&mut self, id: DatasetId, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.num_blocks() {
            return Err(Error::Contract(format!("{} statistics for {} blocks", stats.len(), self.num_blocks())));
        }
        for (block, s) in self.blocks_mut().zip(stats) {
            block.bn_for_mut(id)?.ema_update(s);
        }
        Ok(())
    }

    pub fn forward_eval(&self, tape: &mut Tape, images: Var, id: DatasetId) -> Result<Var> {
        Ok(self.forward(tape, images, id, Mode::Eval)?.0)
    }

    /// Eval-mode logits for a batch of images, on a private tape.
    pub fn predict(&self, images: &Tensor, id: DatasetId) -> Result<Tensor> {
        let mut tape = Tape::with_exec(self.exec);
        let x = tape.constant(images.clone());
        let y = self.forward_eval(&mut tape, x, id)?;
        Ok(tape.value(y).clone())
    }

    /// Eval-mode pre-normalization activations of block `layer`.
    pub fn probe_pre_norm(&self, images: &Tensor, id: DatasetId, layer: usize) -> Result<Tensor> {
        if layer >= self.num_blocks() {
            return Err(Error::Config(format!("layer {layer} out of {} blocks", self.num_blocks())));
        }
        let mut tape = Tape::with_exec(self.exec);
        let x = tape.constant(images.clone());
        let (y, _) = self.run(&mut tape, x, id, Mode::Eval, Some(layer))?;
        Ok(tape.value(y).clone())
    }

    /// Reinitializes the batch-norm state selected by `id` in every block
    /// (gamma 1, beta 0, running mean 0, running variance 1).
    pub fn reset_bank(&mut self, id: DatasetId) -> Result<()> {
        self.check(id)?;
        for block in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            block.bn_for_mut(id)?.reset(&mut self.store);
        }
        Ok(())
    }

    /// Replaces head `id` with a freshly initialized one for `classes` classes.
    pub fn replace_head(&mut self, id: DatasetId, classes: usize, seed: u64) -> Result<()> {
        self.check(id)?;
        if !(2..=255).contains(&classes) {
            return Err(Error::Config(format!("class count {classes} outside 2..=255")));
        }
        let mut scratch = ParamStore::new();
        let fresh = new_head(&mut scratch, seed, id.0, self.manifest.widths[0], classes);
        let head = self.heads[id.0];
        *self.store.get_mut(head.weight) = scratch.get(fresh.weight).clone();
        *self.store.get_mut(head.bias) = scratch.get(fresh.bias).clone();
        self.manifest.class_counts[id.0] = classes;
        Ok(())
    }

    /// FLOPs of one eval forward with dataset `id` over `input_shape`
    /// (`[B, 3, H, W]`): two per multiply-accumulate of every convolution and
    /// the head, two per batch-normalized element, one per activation.
    /// Pooling and upsampling are not counted.
    pub fn count_flops(&self, id: DatasetId, input_shape: [usize; 4]) -> Result<u64> {
        self.check(id)?;
        self.check_input(&input_shape)?;
        let [b, _, mut h, mut w] = input_shape;
        let mut total = 0;
        for (stage, block) in self.blocks().enumerate() {
            total += block.flops(b, h, w);
            if stage < self.encoder.len() {
                (h, w) = (h / 2, w / 2);
            } else {
                (h, w) = (h * 2, w * 2);
            }
        }
        let head_macs = (b * h * w * self.manifest.widths[0] * self.manifest.class_counts[id.0]) as u64;
        Ok(total + 2 * head_macs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(seed: u64, shape: [usize; 4]) -> Tensor {
        use rand::Rng;
        let mut r = rng(seed);
        Tensor::new(shape.to_vec(), (0..shape.iter().product()).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn build_errors() {
        assert!(matches!(build_model(1, &[3], &[], SharingConfig::CDCL, 0), Err(Error::Config(_))));
        assert!(matches!(build_model(2, &[3], &[4], SharingConfig::CDCL, 0), Err(Error::Config(_))));
    }

    #[test]
    fn degenerate_n_layout_ignores_sharing_flags() {
        let layouts: Vec<Vec<(String, Vec<usize>)>> = [(true, true), (true, false), (false, true), (false, false)]
            .into_iter()
            .map(|(c, b)| {
                let m = build_model(1, &[4], &[4, 8], SharingConfig { conv_shared: c, bn_shared: b }, 1).unwrap();
                m.store().ids().map(|id| (m.store().get(id).shape().to_vec(), id)).map(|(s, id)| {
                    (m.store().name(id).trim_end_matches(char::is_numeric).to_string(), s)
                }).collect()
            })
            .collect();
        assert!(layouts.iter().all(|l| l.len() == layouts[0].len()));
        for l in &layouts {
            let shapes: Vec<_> = l.iter().map(|(_, s)| s.clone()).collect();
            let first: Vec<_> = layouts[0].iter().map(|(_, s)| s.clone()).collect();
            assert_eq!(shapes, first);
        }
    }

    #[test]
    fn shared_conv_count_is_independent_of_n() {
        let one = build_model(1, &[4], &[4, 8], SharingConfig::CDCL, 0).unwrap();
        let three = build_model(3, &[4, 4, 3], &[4, 8], SharingConfig::CDCL, 0).unwrap();
        let count = |m: &SegModel| m.conv_params().iter().map(|&p| m.store().get(p).numel()).sum::<usize>();
        assert_eq!(count(&one), count(&three));
        let unshared = build_model(3, &[4, 4, 3], &[4, 8], SharingConfig { conv_shared: false, bn_shared: false }, 0).unwrap();
        assert_eq!(count(&unshared), 3 * count(&one));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(2, &[4, 3], &[4, 8], SharingConfig::CDCL, 42).unwrap();
        let b = build_model(2, &[4, 3], &[4, 8], SharingConfig::CDCL, 42).unwrap();
        assert_eq!(a, b);
        let c = build_model(2, &[4, 3], &[4, 8], SharingConfig::CDCL, 43).unwrap();
        assert_ne!(a.store(), c.store());
    }

    #[test]
    fn output_shape_and_eval_purity() {
        let m = build_model(2, &[4, 3], &[4, 8], SharingConfig::CDCL, 0).unwrap();
        let x = images(1, [2, 3, 8, 8]);
        for (id, c) in [(0, 4), (1, 3)] {
            let y = m.predict(&x, DatasetId(id)).unwrap();
            assert_eq!(y.shape(), &[2, c, 8, 8]);
            assert_eq!(y, m.predict(&x, DatasetId(id)).unwrap());
        }
        assert!(matches!(m.predict(&images(1, [1, 3, 6, 8]), DatasetId(0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn copied_banks_and_heads_give_identical_logits() {
        let mut m = build_model(2, &[4, 4], &[4, 8], SharingConfig::CDCL, 5).unwrap();
        // perturb bank 0 so the copy is non-trivial, then copy it into bank 1
        for block in m.blocks_mut() {
            let c = block.out_channels();
            block.bank_mut()[0].set_running(&vec![0.3; c], &vec![2.0; c]).unwrap();
            let b0 = block.bank()[0].clone();
            let b1 = &mut block.bank_mut()[1];
            b1.running_mean = b0.running_mean.clone();
            b1.running_var = b0.running_var.clone();
        }
        let pairs: Vec<(ParamId, ParamId)> = m
            .blocks()
            .flat_map(|b| [(b.bank()[0].gamma, b.bank()[1].gamma), (b.bank()[0].beta, b.bank()[1].beta)])
            .chain([(m.heads[0].weight, m.heads[1].weight), (m.heads[0].bias, m.heads[1].bias)])
            .collect();
        for (src, dst) in pairs {
            let t = m.store().get(src).clone();
            *m.store_mut().get_mut(dst) = t;
        }
        let x = images(2, [2, 3, 8, 8]);
        assert_eq!(m.predict(&x, DatasetId(0)).unwrap(), m.predict(&x, DatasetId(1)).unwrap());
    }

    #[test]
    fn replacing_a_head_leaves_other_ids_untouched() {
        let mut m = build_model(3, &[4, 4, 3], &[4, 8], SharingConfig::CDCL, 5).unwrap();
        let x = images(2, [1, 3, 8, 8]);
        let before: Vec<Tensor> = (0..3).map(|d| m.predict(&x, DatasetId(d)).unwrap()).collect();
        m.replace_head(DatasetId(1), 6, 99).unwrap();
        assert_eq!(m.predict(&x, DatasetId(0)).unwrap(), before[0]);
        assert_eq!(m.predict(&x, DatasetId(2)).unwrap(), before[2]);
        assert_eq!(m.predict(&x, DatasetId(1)).unwrap().shape(), &[1, 6, 8, 8]);
    }

    #[test]
    fn flops_single_conv_reference() {
        // one 3x3 conv, 2 -> 4 channels on 8x8 with padding 1
        let mut store = ParamStore::new();
        let block = DatasetAwareBlock::new(&mut store, &mut rng(0), "b", 2, 4, 3, 1);
        let elems = 4 * 64;
        assert_eq!(block.flops(1, 8, 8), 9216 + 2 * elems + elems);
    }

    #[test]
    fn flops_equal_across_n_and_scale_with_area() {
        let base = build_model(1, &[4], &[4, 8, 8], SharingConfig::CDCL, 0).unwrap();
        let cdcl = build_model(3, &[4, 4, 3], &[4, 8, 8], SharingConfig::CDCL, 0).unwrap();
        for id in 0..2 {
            assert_eq!(
                cdcl.count_flops(DatasetId(id), [1, 3, 32, 32]).unwrap(),
                base.count_flops(DatasetId(0), [1, 3, 32, 32]).unwrap()
            );
        }
        let small = base.count_flops(DatasetId(0), [1, 3, 16, 16]).unwrap();
        let large = base.count_flops(DatasetId(0), [1, 3, 32, 32]).unwrap();
        assert_eq!(large, 4 * small);
    }
}
