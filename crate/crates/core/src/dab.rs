//! Dataset-aware blocks: a convolution shared by every dataset, one batch
//! norm state per dataset, and a ReLU. The dataset id passed to each forward
//! is the switch that picks which batch-norm state is used.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{BatchStats, ParamId, ParamRole, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running-statistics average.
pub const DEFAULT_EMA_MOMENTUM: f64 = 0.1;

/// Index of a dataset; selects the batch-norm state and classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DatasetId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and fold them into the running average.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

/// One dataset's normalization state.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub ema_momentum: f64,
    pub eps: f64,
}

impl BnParams {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), ParamRole::BnGamma, Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{prefix}.beta"), ParamRole::BnBeta, Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            ema_momentum: DEFAULT_EMA_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.numel()
    }

    /// `running <- (1 - m) * running + m * batch` for mean and variance.
    pub fn ema_update(&mut self, stats: &BatchStats) {
        let m = self.ema_momentum;
        let blend = |run: &mut Tensor, batch: &[f64]| {
            for (r, b) in run.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - m) * *r + m * b;
            }
        };
        blend(&mut self.running_mean, &stats.mean);
        blend(&mut self.running_var, &stats.var);
    }

    /// Restores a freshly initialized state: gamma 1, beta 0, mean 0, var 1.
    pub fn reset(&mut self, store: &mut ParamStore) {
        store.get_mut(self.gamma).data_mut().iter_mut().for_each(|v| *v = 1.0);
        store.get_mut(self.beta).data_mut().iter_mut().for_each(|v| *v = 0.0);
        self.running_mean.data_mut().iter_mut().for_each(|v| *v = 0.0);
        self.running_var.data_mut().iter_mut().for_each(|v| *v = 1.0);
    }

    pub fn set_running(&mut self, mean: &[f64], var: &[f64]) -> Result<()> {
        if mean.len() != self.channels() || var.len() != self.channels() {
            return Err(Error::Dimension("running statistics length mismatch".into()));
        }
        if var.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::CorruptedState("running variance must be finite and non-negative".into()));
        }
        self.running_mean.data_mut().copy_from_slice(mean);
        self.running_var.data_mut().copy_from_slice(var);
        Ok(())
    }
}

/// Kaiming-normal filter bank: std = sqrt(2 / fan_in).
pub fn kaiming_conv(rng: &mut SplitMix64, cout: usize, cin: usize, k: usize) -> Tensor {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    let data = (0..cout * cin * k * k)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(vec![cout, cin, k, k], data).expect("shape matches data")
}

/// Convolution -> dataset-selected batch norm -> ReLU.
///
/// With a shared convolution the block holds exactly one filter bank for
/// any number of datasets. The ablation layouts (per-dataset filters, one
/// shared batch norm) are expressed as banks of length `num_datasets` or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetAwareBlock {
    convs: Vec<ParamId>,
    bank: Vec<BnParams>,
    num_datasets: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
}

impl DatasetAwareBlock {
    /// Block with one shared convolution and `num_datasets` batch-norm states.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SplitMix64,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        num_datasets: usize,
    ) -> Self {
        Self::with_sharing(store, rng, prefix, cin, cout, kernel, num_datasets, true, false)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_sharing(
        store: &mut ParamStore,
        rng: &mut SplitMix64,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        num_datasets: usize,
        conv_shared: bool,
        bn_shared: bool,
    ) -> Self {
        assert!(num_datasets >= 1);
        let conv_copies = if conv_shared { 1 } else { num_datasets };
        let bn_copies = if bn_shared { 1 } else { num_datasets };
        let convs = (0..conv_copies)
            .map(|d| {
                let name = if conv_shared { format!("{prefix}.conv") } else { format!("{prefix}.conv{d}") };
                store.add(name, ParamRole::ConvWeight, kaiming_conv(rng, cout, cin, kernel))
            })
            .collect();
        let bank = (0..bn_copies)
            .map(|d| {
                let name = if bn_shared { format!("{prefix}.bn") } else { format!("{prefix}.bn{d}") };
                BnParams::new(store, &name, cout)
            })
            .collect();
        Self { convs, bank, num_datasets, cin, cout, kernel }
    }

    pub fn num_datasets(&self) -> usize {
        self.num_datasets
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn convs(&self) -> &[ParamId] {
        &self.convs
    }

    pub fn bank(&self) -> &[BnParams] {
        &self.bank
    }

    pub fn bank_mut(&mut self) -> &mut [BnParams] {
        &mut self.bank
    }

    fn check(&self, id: DatasetId) -> Result<()> {
        if id.0 >= self.num_datasets {
            return Err(Error::Switch { id: id.0, banks: self.num_datasets });
        }
        Ok(())
    }

    pub fn conv_for(&self, id: DatasetId) -> Result<ParamId> {
        self.check(id)?;
        Ok(self.convs[if self.convs.len() == 1 { 0 } else { id.0 }])
    }

    pub fn bn_slot(&self, id: DatasetId) -> Result<usize> {
        self.check(id)?;
        Ok(if self.bank.len() == 1 { 0 } else { id.0 })
    }

    pub fn bn_for(&self, id: DatasetId) -> Result<&BnParams> {
        Ok(&self.bank[self.bn_slot(id)?])
    }

    pub fn bn_for_mut(&mut self, id: DatasetId) -> Result<&mut BnParams> {
        let slot = self.bn_slot(id)?;
        Ok(&mut self.bank[slot])
    }

    /// Parameters touched by a forward with `id`.
    pub fn params_for(&self, id: DatasetId) -> Result<Vec<ParamId>> {
        let bn = self.bn_for(id)?;
        Ok(vec![self.conv_for(id)?, bn.gamma, bn.beta])
    }

    /// Every learnable parameter of the block.
    pub fn all_params(&self) -> Vec<ParamId> {
        let mut out = self.convs.clone();
        out.extend(self.bank.iter().flat_map(|b| [b.gamma, b.beta]));
        out
    }

    /// The convolution alone (pre-normalization activations).
    pub fn conv(&self, tape: &mut Tape, store: &ParamStore, x: Var, id: DatasetId) -> Result<Var> {
        let w = tape.param(store, self.conv_for(id)?);
        tape.conv2d(x, w, None, 1, self.kernel / 2)
    }

    /// Full block forward. In train mode the returned statistics are the
    /// batch statistics the caller must fold into `bn_for(id)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        id: DatasetId,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let pre = self.conv(tape, store, x, id)?;
        let bn = self.bn_for(id)?;
        let gamma = tape.param(store, bn.gamma);
        let beta = tape.param(store, bn.beta);
        let (normed, stats) = match mode {
            Mode::Train => {
                let (y, s) = tape.batchnorm_train(pre, gamma, beta, bn.eps)?;
                (y, Some(s))
            }
            Mode::Eval => {
                let y = tape.batchnorm_eval(
                    pre,
                    gamma,
                    beta,
                    bn.running_mean.data(),
                    bn.running_var.data(),
                    bn.eps,
                )?;
                (y, None)
            }
        };
        Ok((tape.relu(normed), stats))
    }

    /// Train-mode forward that also updates the running statistics of the
    /// selected bank (and only that bank).
    pub fn forward_train(&mut self, tape: &mut Tape, store: &ParamStore, x: Var, id: DatasetId) -> Result<Var> {
        let (y, stats) = self.forward(tape, store, x, id, Mode::Train)?;
        self.bn_for_mut(id)?.ema_update(&stats.expect("train mode yields statistics"));
        Ok(y)
    }

    pub fn forward_eval(&self, tape: &mut Tape, store: &ParamStore, x: Var, id: DatasetId) -> Result<Var> {
        Ok(self.forward(tape, store, x, id, Mode::Eval)?.0)
    }

    /// Learnable parameter count.
    pub fn param_count(&self) -> usize {
        self.convs.len() * self.cout * self.cin * self.kernel * self.kernel + self.bank.len() * 2 * self.cout
    }

    /// FLOPs of one forward over `batch` images of `h x w`: two per
    /// multiply-accumulate, two per normalized element, one per activation.
    pub fn flops(&self, batch: usize, h: usize, w: usize) -> u64 {
        let elems = (batch * self.cout * h * w) as u64;
        let macs = elems * (self.cin * self.kernel * self.kernel) as u64;
        2 * macs + 2 * elems + elems
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    fn input(tape: &mut Tape, seed: u64, shape: [usize; 4]) -> Var {
        let mut r = rng(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
        tape.constant(Tensor::new(shape.to_vec(), data).unwrap())
    }

    #[test]
    fn ema_formula() {
        let mut store = ParamStore::new();
        let mut bn = BnParams::new(&mut store, "bn", 1);
        bn.ema_update(&BatchStats { mean: vec![1.0], var: vec![1.0] });
        assert!((bn.running_mean.data()[0] - 0.1).abs() < 1e-15);
        assert_eq!(bn.running_var.data()[0], 1.0);
    }

    #[test]
    fn ema_fixed_point_and_geometric_convergence() {
        let mut store = ParamStore::new();
        let mut bn = BnParams::new(&mut store, "bn", 2);
        let fixed = BatchStats { mean: vec![0.0, 0.0], var: vec![1.0, 1.0] };
        bn.ema_update(&fixed);
        assert_eq!(bn.running_mean.data(), &[0.0, 0.0]);
        assert_eq!(bn.running_var.data(), &[1.0, 1.0]);

        let s = BatchStats { mean: vec![2.0, -3.0], var: vec![4.0, 0.5] };
        for t in 1..=50 {
            bn.ema_update(&s);
            let decay = 0.9f64.powi(t);
            for c in 0..2 {
                let want_mean = s.mean[c] * (1.0 - decay);
                let want_var = s.var[c] + (1.0 - s.var[c]) * decay;
                assert!((bn.running_mean.data()[c] - want_mean).abs() < 1e-12);
                assert!((bn.running_var.data()[c] - want_var).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn train_forward_updates_only_selected_bank() {
        let mut store = ParamStore::new();
        let mut r = rng(3);
        let mut block = DatasetAwareBlock::new(&mut store, &mut r, "b", 2, 3, 3, 2);
        let before = block.bank()[1].clone();
        let mut tape = Tape::new();
        let x = input(&mut tape, 1, [2, 2, 4, 4]);
        block.forward_train(&mut tape, &store, x, DatasetId(0)).unwrap();
        assert_eq!(block.bank()[1], before);
        assert_ne!(block.bank()[0].running_mean, before.running_mean);
    }

    #[test]
    fn out_of_range_id_is_a_switch_error() {
        let mut store = ParamStore::new();
        let mut r = rng(3);
        let block = DatasetAwareBlock::new(&mut store, &mut r, "b", 1, 1, 3, 2);
        let mut tape = Tape::new();
        let x = input(&mut tape, 1, [1, 1, 4, 4]);
        assert!(matches!(
            block.forward_eval(&mut tape, &store, x, DatasetId(2)),
            Err(Error::Switch { id: 2, banks: 2 })
        ));
    }

    #[test]
    fn single_bank_matches_plain_conv_bn_relu() {
        let mut store = ParamStore::new();
        let mut r = rng(9);
        let mut block = DatasetAwareBlock::new(&mut store, &mut r, "b", 2, 3, 3, 1);
        let mut tape = Tape::new();
        let x = input(&mut tape, 2, [2, 2, 4, 4]);
        let y = block.forward_train(&mut tape, &store, x, DatasetId(0)).unwrap();

        let w = tape.param(&store, block.convs()[0]);
        let g = tape.param(&store, block.bank()[0].gamma);
        let b = tape.param(&store, block.bank()[0].beta);
        let c = tape.conv2d(x, w, None, 1, 1).unwrap();
        let (n, _) = tape.batchnorm_train(c, g, b, DEFAULT_EPS).unwrap();
        let plain = tape.relu(n);
        assert_eq!(tape.value(y), tape.value(plain));
    }

    #[test]
    fn eval_output_depends_on_selected_statistics() {
        // A 1x1 identity filter makes the block output relu((x - mean) / sqrt(var + eps)).
        let mut store = ParamStore::new();
        let mut r = rng(0);
        let mut block = DatasetAwareBlock::new(&mut store, &mut r, "b", 1, 1, 1, 2);
        store.get_mut(block.convs()[0]).data_mut()[0] = 1.0;
        block.bank_mut()[1].set_running(&[1.0], &[1.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 1, 3], vec![0.5, 2.0, 3.0]).unwrap());
        let y0 = block.forward_eval(&mut tape, &store, x, DatasetId(0)).unwrap();
        let y1 = block.forward_eval(&mut tape, &store, x, DatasetId(1)).unwrap();
        let k = 1.0 / (1.0 + DEFAULT_EPS).sqrt();
        let want0 = [0.5 * k, 2.0 * k, 3.0 * k];
        let want1 = [0.0, 1.0 * k, 2.0 * k];
        for i in 0..3 {
            assert!((tape.value(y0).data()[i] - want0[i]).abs() < 1e-14);
            assert!((tape.value(y1).data()[i] - want1[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn parameter_accounting() {
        for n in 1..=4 {
            let mut store = ParamStore::new();
            let mut r = rng(0);
            let block = DatasetAwareBlock::new(&mut store, &mut r, "b", 4, 8, 3, n);
            assert_eq!(block.convs().len(), 1);
            assert_eq!(block.bank().len(), n);
            assert_eq!(block.param_count(), 8 * 4 * 9 + n * 2 * 8);
            assert_eq!(store.numel(), block.param_count());
            assert_eq!(block.flops(1, 8, 8), block.flops(1, 8, 8));
        }
    }
}
