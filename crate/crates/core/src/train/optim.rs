use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamRole, ParamStore};

/// Whether weight decay applies to parameters of `role`: convolution and
/// head filters only, never normalization affine parameters or biases.
pub fn decays(role: ParamRole) -> bool {
    matches!(role, ParamRole::ConvWeight | ParamRole::HeadWeight)
}

/// SGD momentum buffers, one per parameter of the store they were built
/// for, plus a count of applied steps and the set of frozen parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Vec<f64>>,
    frozen: Vec<bool>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            velocity: store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect(),
            frozen: vec![false; store.len()],
            steps: 0,
        }
    }

    pub fn velocity(&self, id: ParamId) -> &[f64] {
        &self.velocity[id.index()]
    }

    /// Optimizer steps applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn freeze(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.frozen[id.index()] = true;
        }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.index()]
    }
}

/// One SGD step over `params`:
/// `v = momentum * v + grad + wd * param; param -= lr * v`, with `wd`
/// replaced by 0 where [`decays`] is false. Frozen parameters are skipped.
/// Gradients of `params` are cleared afterwards.
pub fn sgd_step(
    store: &mut ParamStore,
    params: &[ParamId],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if state.velocity.len() != store.len() {
        return Err(Error::Contract("optimizer state belongs to a different parameter store".into()));
    }
    if let Some(&id) = params.iter().find(|&&id| store.get(id).grad().is_none()) {
        return Err(Error::Contract(format!("parameter {} has no gradient", store.name(id))));
    }
    for &id in params {
        if state.is_frozen(id) {
            continue;
        }
        let wd = if decays(store.role(id)) { weight_decay } else { 0.0 };
        let v = &mut state.velocity[id.index()];
        let t = store.get_mut(id);
        let grad = t.grad().expect("checked above").to_vec();
        for ((p, v), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
            *v = momentum * *v + g + wd * *p;
            *p -= lr * *v;
        }
    }
    for &id in params {
        store.get_mut(id).clear_grad();
    }
    state.steps += 1;
    Ok(())
}

/// One line of the parameter-group audit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamGroup {
    pub name: String,
    pub role: ParamRole,
    pub numel: usize,
    pub weight_decay: bool,
}

pub fn param_groups(store: &ParamStore) -> Vec<ParamGroup> {
    store
        .ids()
        .map(|id| ParamGroup {
            name: store.name(id).to_string(),
            role: store.role(id),
            numel: store.get(id).numel(),
            weight_decay: decays(store.role(id)),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(value: f64, role: ParamRole) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", role, Tensor::full(&[2], value));
        (s, id)
    }

    #[test]
    fn plain_sgd_and_fixed_point() {
        let (mut s, id) = one_param(1.0, ParamRole::ConvWeight);
        let mut st = OptimizerState::new(&s);
        s.get_mut(id).accumulate_grad(&[0.5, -1.0]);
        sgd_step(&mut s, &[id], &mut st, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(s.get(id).data(), &[0.95, 1.1]);
        assert!(s.get(id).grad().is_none());
        s.get_mut(id).accumulate_grad(&[0.0, 0.0]);
        let mut fresh = OptimizerState::new(&s);
        let before = s.get(id).data().to_vec();
        sgd_step(&mut s, &[id], &mut fresh, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(s.get(id).data(), &before[..]);
    }

    #[test]
    fn two_momentum_steps_unroll() {
        let (lr, m, g) = (0.1, 0.9, 0.25);
        let (mut s, id) = one_param(0.0, ParamRole::BnGamma);
        let mut st = OptimizerState::new(&s);
        for _ in 0..2 {
            s.get_mut(id).accumulate_grad(&[g, g]);
            sgd_step(&mut s, &[id], &mut st, lr, m, 0.5).unwrap();
        }
        // gamma is not decayed, so wd = 0.5 has no effect
        let expect = -lr * g * (2.0 + m);
        assert!((s.get(id).data()[0] - expect).abs() < 1e-15);
        assert_eq!(st.steps(), 2);
    }

    #[test]
    fn decay_only_on_filters() {
        for (role, moved) in [
            (ParamRole::ConvWeight, true),
            (ParamRole::HeadWeight, true),
            (ParamRole::BnGamma, false),
            (ParamRole::BnBeta, false),
            (ParamRole::HeadBias, false),
        ] {
            let (mut s, id) = one_param(2.0, role);
            let mut st = OptimizerState::new(&s);
            s.get_mut(id).accumulate_grad(&[0.0, 0.0]);
            sgd_step(&mut s, &[id], &mut st, 1.0, 0.0, 0.1).unwrap();
            assert_eq!(s.get(id).data()[0] != 2.0, moved, "{role:?}");
        }
    }

    #[test]
    fn missing_gradient_and_frozen() {
        let (mut s, id) = one_param(1.0, ParamRole::ConvWeight);
        let mut st = OptimizerState::new(&s);
        assert!(matches!(sgd_step(&mut s, &[id], &mut st, 0.1, 0.9, 0.0), Err(Error::Contract(_))));
        st.freeze(&[id]);
        s.get_mut(id).accumulate_grad(&[1.0, 1.0]);
        sgd_step(&mut s, &[id], &mut st, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(s.get(id).data(), &[1.0, 1.0]);
    }
}
