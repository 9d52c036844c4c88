//! Adam with bias correction and per-group learning rates.

use super::tape::GradStore;
use super::tensor::{Real, Tensor};
use super::{LrGroup, ParamStore};
use crate::{Error, Result};

/// Per-parameter first/second moment arrays plus step counters. Counters are
/// kept per entry so grid upsampling can restart moments for resized planes
/// while MLP entries keep their history.
#[derive(Debug, Clone)]
pub struct AdamState<R> {
    m: Vec<Tensor<R>>,
    v: Vec<Tensor<R>>,
    step: Vec<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    global_step: u64,
}

impl<R: Real> AdamState<R> {
    pub fn new(store: &ParamStore<R>, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect(),
            v: store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect(),
            step: vec![0; store.len()],
            beta1,
            beta2,
            eps,
            global_step: 0,
        }
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    /// Reset one entry's moments after its parameter was resized.
    pub fn reset_entry(&mut self, idx: usize, shape: &[usize]) {
        self.m[idx] = Tensor::zeros(shape);
        self.v[idx] = Tensor::zeros(shape);
        self.step[idx] = 0;
    }
}

/// One Adam step over every entry, with the learning rate chosen per group.
/// Entries whose gradient is identically absent are still stepped with zero
/// gradient (decaying moments), matching the single-optimizer reading of the
/// joint objective. Passing `lr = 0` for a group freezes it exactly.
pub fn adam_update<R: Real>(
    store: &mut ParamStore<R>,
    grads: &GradStore<R>,
    state: &mut AdamState<R>,
    lr_of: impl Fn(LrGroup) -> f64,
) -> Result<()> {
    if grads.grads().len() != store.len() {
        return Err(Error::Shape(format!(
            "gradient count {} vs {} parameters",
            grads.grads().len(),
            store.len()
        )));
    }
    state.global_step += 1;
    for idx in 0..store.len() {
        let group = store.entry(idx).group;
        let lr = lr_of(group);
        if lr == 0.0 {
            continue;
        }
        let g = grads.grad(idx);
        if g.shape() != store.entry(idx).value.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} vs parameter `{}` shape {:?}",
                g.shape(),
                store.entry(idx).name,
                store.entry(idx).value.shape()
            )));
        }
        state.step[idx] += 1;
        let t = state.step[idx];
        let b1 = R::from_f64(state.beta1);
        let b2 = R::from_f64(state.beta2);
        let one = R::one();
        let bc1 = R::from_f64(1.0 - state.beta1.powi(t as i32));
        let bc2 = R::from_f64(1.0 - state.beta2.powi(t as i32));
        let lr = R::from_f64(lr);
        let eps = R::from_f64(state.eps);
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let p = store.value_mut(idx).data_mut();
        let gd = g.data();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * gd[i];
            v[i] = b2 * v[i] + (one - b2) * gd[i] * gd[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Exponential decay to one tenth of `lr0` at the final iteration:
/// `lr0 * 0.1^(iter/total)`.
pub fn lr_schedule(iter: u64, total_iters: u64, lr0: f64) -> Result<f64> {
    if total_iters == 0 {
        return Err(Error::Config("lr_schedule: total_iters must be > 0".into()));
    }
    Ok(lr0 * 0.1f64.powf(iter as f64 / total_iters as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gradient_of, Graph};

    fn store_with(p: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::new(vec![1, p.len()], p.to_vec()), LrGroup::FieldMlp)
            .unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut store = store_with(&[1.5, -2.0]);
        let mut state = AdamState::new(&store, 0.9, 0.99, 1e-8);
        let grads = {
            let mut g = Graph::new(&store);
            let c = g.constant(Tensor::scalar(0.0));
            // Loss that never touches `p`: gradient is exactly zero.
            let loss = g.mean_all(c);
            gradient_of(&g, loss).unwrap()
        };
        adam_update(&mut store, &grads, &mut state, |_| 0.1).unwrap();
        assert_eq!(store.get("p").unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // g=1, lr=0.1, beta1=0.9, beta2=0.99, eps=1e-8:
        // m_hat = v_hat = 1, so dp = -0.1/(1+1e-8).
        let mut store = store_with(&[0.0]);
        let mut state = AdamState::new(&store, 0.9, 0.99, 1e-8);
        let grads = {
            let mut g = Graph::new(&store);
            let p = g.param("p");
            let loss = g.sum_all(p);
            gradient_of(&g, loss).unwrap()
        };
        adam_update(&mut store, &grads, &mut state, |_| 0.1).unwrap();
        let p = store.get("p").unwrap().data()[0];
        assert!((p + 0.1).abs() < 1e-6, "got {p}");
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let mut store = store_with(&[1.0]);
        let mut state = AdamState::new(&store, 0.9, 0.99, 1e-8);
        let mut last = 1.0;
        for _ in 0..50 {
            let grads = {
                let mut g = Graph::new(&store);
                let p = g.param("p");
                let loss = g.sum_all(p);
                gradient_of(&g, loss).unwrap()
            };
            adam_update(&mut store, &grads, &mut state, |_| 0.01).unwrap();
            let p = store.get("p").unwrap().data()[0];
            assert!(p < last, "not monotone at {p} vs {last}");
            last = p;
        }
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(lr_schedule(0, 100, 0.02).unwrap(), 0.02);
        let end = lr_schedule(100, 100, 0.02).unwrap();
        assert!((end - 0.002).abs() < 1e-12);
        let mid = lr_schedule(50, 100, 0.02).unwrap();
        assert!((mid - 0.02 * 10f64.powf(-0.5)).abs() < 1e-12);
        assert!((mid - 0.006324555320336759).abs() < 1e-12);
        assert!(lr_schedule(1, 0, 0.02).is_err());
    }
}
