use super::kernels::{self, ConvGeom};
use super::{Labels, ParamId, ParamStore, Tensor, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-channel statistics measured by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divide-by-n) variance.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom, cols: Vec<f64> },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    Relu(Var),
    MaxPool { input: Var, argmax: Vec<usize> },
    Upsample { input: Var, factor: usize },
    CrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<u8>, count: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Linear record of executed operations. Nodes are appended in execution
/// order, so the record is topologically sorted and `backward` simply walks
/// it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self { nodes: Vec::new(), exec }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let mut value = value;
        value.requires_grad = false;
        value.grad = None;
        self.push(value, Op::Leaf(None))
    }

    /// Records a snapshot of a learnable parameter; `backward` routes its
    /// gradient back into `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let value = Tensor::from_parts(p.shape().to_vec(), p.data().to_vec());
        self.push(value, Op::Leaf(Some(id)))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let geom = ConvGeom::new(x.dims4()?, w.dims4()?, stride, padding)?;
        let b = match bias {
            Some(b) => {
                let t = self.value(b);
                if t.numel() != geom.cout {
                    return Err(Error::Dimension(format!(
                        "bias has {} entries for {} output channels",
                        t.numel(),
                        geom.cout
                    )));
                }
                Some(t.data())
            }
            None => None,
        };
        let (out, cols) = kernels::conv2d_forward(&geom, x.data(), w.data(), b, self.exec);
        let shape = vec![geom.batch, geom.cout, geom.out_height, geom.out_width];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { input, weight, bias, geom, cols }))
    }

    fn check_channel_params(&self, c: usize, params: &[Var]) -> Result<()> {
        for &p in params {
            if self.value(p).numel() != c {
                return Err(Error::Dimension(format!(
                    "per-channel parameter has {} entries for {c} channels",
                    self.value(p).numel()
                )));
            }
        }
        Ok(())
    }

    /// Batch normalization with statistics of the current batch.
    pub fn batchnorm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let x = self.value(input);
        let [b, c, h, w] = x.dims4()?;
        self.check_channel_params(c, &[gamma, beta])?;
        let m = b * h * w;
        if m < 2 {
            return Err(Error::DegenerateBatch(format!(
                "{m} value(s) per channel; batch statistics need at least 2"
            )));
        }
        let (mean, m2) = kernels::channel_moments([b, c, h, w], x.data());
        let var = m2.iter().map(|s| s / m as f64).collect();
        let stats = BatchStats { mean, var };
        let out = self.normalize(input, gamma, beta, &stats.mean, &stats.var, eps, true);
        Ok((out, stats))
    }

    /// Batch normalization with stored running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let [_, c, _, _] = self.value(input).dims4()?;
        self.check_channel_params(c, &[gamma, beta])?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Dimension(format!("running statistics do not have {c} channels")));
        }
        if running_mean.iter().chain(running_var).any(|v| !v.is_finite()) {
            return Err(Error::CorruptedState("non-finite running statistics".into()));
        }
        if running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::CorruptedState("negative running variance".into()));
        }
        Ok(self.normalize(input, gamma, beta, running_mean, running_var, eps, false))
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch: bool,
    ) -> Var {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let (c, hw) = (shape[1], shape[2] * shape[3]);
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.numel()];
        let mut out = vec![0.0; x.numel()];
        let planes = x.data().chunks(hw).zip(xhat.chunks_mut(hw)).zip(out.chunks_mut(hw));
        for (i, ((src, xh), dst)) in planes.enumerate() {
            let ch = i % c;
            let (mu, s, gc, bc) = (mean[ch], inv_std[ch], g[ch], be[ch]);
            for ((&v, h), o) in src.iter().zip(xh).zip(dst) {
                *h = (v - mu) * s;
                *o = gc * *h + bc;
            }
        }
        let value = Tensor::from_parts(shape, out);
        self.push(value, Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(value, Op::Relu(input))
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let x = self.value(input);
        let (out, argmax, dims) = kernels::maxpool2d_forward(x.dims4()?, x.data(), k, stride)?;
        Ok(self.push(Tensor::from_parts(dims.to_vec(), out), Op::MaxPool { input, argmax }))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Config("upsampling factor must be positive".into()));
        }
        let x = self.value(input);
        let (out, dims) = kernels::upsample_nearest_forward(x.dims4()?, x.data(), factor);
        Ok(self.push(Tensor::from_parts(dims.to_vec(), out), Op::Upsample { input, factor }))
    }

    /// Mean per-pixel cross-entropy over pixels whose label is not
    /// `ignore_index`. Zero when every pixel is ignored.
    pub fn cross_entropy(&mut self, logits: Var, labels: &Labels, ignore_index: u8) -> Result<Var> {
        let x = self.value(logits);
        let [b, c, h, w] = x.dims4()?;
        if labels.shape() != [b, h, w] {
            return Err(Error::Dimension(format!(
                "labels {:?} do not match logits {:?}",
                labels.shape(),
                x.shape()
            )));
        }
        if let Some(&label) =
            labels.data().iter().find(|&&l| l != ignore_index && l as usize >= c)
        {
            return Err(Error::LabelRange { label, classes: c });
        }
        let hw = h * w;
        let xs = x.data();
        let mut probs = vec![0.0; xs.len()];
        let mut total = 0.0;
        let mut count = 0;
        let mut max = vec![0.0; hw];
        let mut z = vec![0.0; hw];
        for n in 0..b {
            let planes = &xs[n * c * hw..(n + 1) * c * hw];
            let out = &mut probs[n * c * hw..(n + 1) * c * hw];
            max.copy_from_slice(&planes[..hw]);
            for plane in planes.chunks(hw).skip(1) {
                max.iter_mut().zip(plane).for_each(|(m, &v)| *m = m.max(v));
            }
            z.fill(0.0);
            for (plane, e) in planes.chunks(hw).zip(out.chunks_mut(hw)) {
                for (((e, &v), &m), z) in e.iter_mut().zip(plane).zip(&max).zip(z.iter_mut()) {
                    *e = (v - m).exp();
                    *z += *e;
                }
            }
            for e in out.chunks_mut(hw) {
                e.iter_mut().zip(&z).for_each(|(e, z)| *e /= z);
            }
            for (p, &label) in labels.data()[n * hw..(n + 1) * hw].iter().enumerate() {
                if label == ignore_index {
                    continue;
                }
                total += z[p].ln() + max[p] - planes[label as usize * hw + p];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let labels = labels.data().iter().map(|&l| if l == ignore_index { IGNORE_INDEX } else { l }).collect();
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, probs, labels, count }))
    }

    fn check_same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).data().iter().map(|x| x * s).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        self.push(value, Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Back-propagates from the scalar `loss` and adds the gradient of every
    /// parameter leaf on the tape into `store`. Leaves the loss does not
    /// reach receive an explicit zero gradient. Repeated calls accumulate.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Leaf(param) = node.op {
                if let Some(id) = param {
                    match grads[idx].take() {
                        Some(g) => store.get_mut(id).accumulate_grad(&g),
                        None => store.get_mut(id).accumulate_grad(&vec![0.0; node.value.numel()]),
                    }
                }
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, g: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        };
        match &node.op {
            Op::Leaf(_) => unreachable!(),
            Op::Conv2d { input, weight, bias, geom, cols } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    cols,
                    self.value(*weight).data(),
                    dy,
                    !matches!(self.nodes[input.0].op, Op::Leaf(None)),
                    self.exec,
                );
                if let Some(dx) = dx {
                    acc(*input, dx);
                }
                acc(*weight, dw);
                if let Some(b) = bias {
                    acc(*b, db);
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch } => {
                let shape = node.value.shape();
                let (c, hw) = (shape[1], shape[2] * shape[3]);
                let m = (shape[0] * hw) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut prod = vec![0.0; hw];
                for (i, (gy, xh)) in dy.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                    let ch = i % c;
                    dbeta[ch] += kernels::lane_sum([gy]);
                    prod.iter_mut().zip(gy.iter().zip(xh)).for_each(|(p, (a, b))| *p = a * b);
                    dgamma[ch] += kernels::lane_sum([prod.as_slice()]);
                }
                let g = self.value(*gamma).data();
                let mut dx = vec![0.0; dy.len()];
                for (i, ((gy, xh), d)) in dy.chunks(hw).zip(xhat.chunks(hw)).zip(dx.chunks_mut(hw)).enumerate() {
                    let ch = i % c;
                    let k = g[ch] * inv_std[ch];
                    if *batch {
                        let (mb, mg) = (dbeta[ch] / m, dgamma[ch] / m);
                        for ((d, a), b) in d.iter_mut().zip(gy).zip(xh) {
                            *d = k * (a - mb - b * mg);
                        }
                    } else {
                        d.iter_mut().zip(gy).for_each(|(d, a)| *d = k * a);
                    }
                }
                acc(*input, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                acc(*input, dy.iter().zip(x).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (g, &i) in dy.iter().zip(argmax) {
                    dx[i] += g;
                }
                acc(*input, dx);
            }
            Op::Upsample { input, factor } => {
                let dims = self.value(*input).dims4().expect("rank checked in forward");
                acc(*input, kernels::upsample_nearest_backward(dims, dy, *factor));
            }
            Op::CrossEntropy { logits, probs, labels, count } => {
                let mut dx = vec![0.0; probs.len()];
                if *count > 0 {
                    let shape = self.shape(*logits);
                    let (c, hw) = (shape[1], shape[2] * shape[3]);
                    let s = dy[0] / *count as f64;
                    for (i, &label) in labels.iter().enumerate() {
                        if label == IGNORE_INDEX {
                            continue;
                        }
                        let (n, p) = (i / hw, i % hw);
                        for k in 0..c {
                            let at = (n * c + k) * hw + p;
                            let target = if k == label as usize { 1.0 } else { 0.0 };
                            dx[at] = s * (probs[at] - target);
                        }
                    }
                }
                acc(*logits, dx);
            }
            Op::Add(a, b) => {
                acc(*a, dy.to_vec());
                acc(*b, dy.to_vec());
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, dy.iter().zip(xb).map(|(g, v)| g * v).collect());
                acc(*b, dy.iter().zip(xa).map(|(g, v)| g * v).collect());
            }
            Op::Scale(a, s) => acc(*a, dy.iter().map(|g| g * s).collect()),
            Op::Sum(a) => acc(*a, vec![dy[0]; self.value(*a).numel()]),
        }
    }
}
