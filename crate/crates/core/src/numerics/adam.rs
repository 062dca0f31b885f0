use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Bias-corrected Adam update of every parameter from its accumulated
/// gradient.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer state tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in store
        .params_mut()
        .iter_mut()
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        if m.len() != p.grad.len() {
            return Err(Error::shape("adam_step", &[m.len()], &[p.grad.len()]));
        }
        let data = p.value.data_mut();
        for i in 0..data.len() {
            let g = p.grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            data[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("x", Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = scalar_store(1.5);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(s.value(s.id("x").unwrap()).item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g² after one step, so the update is lr·g/(|g| + eps).
        let mut s = scalar_store(0.0);
        s.params_mut()[0].grad[0] = 1.0;
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        adam_step(&mut s, &mut st, &cfg).unwrap();
        let x = s.value(s.id("x").unwrap()).item();
        assert!((x + 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{x}");
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = ParamStore::new();
        let id = s
            .register("w", Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig {
            lr: 0.05,
            ..Default::default()
        };
        let mut last = f64::INFINITY;
        for step in 0..2000 {
            s.zero_grads();
            let mut g = Graph::new();
            let w = g.param(&s, id);
            let sq = g.mul(w, w).unwrap();
            let loss = g.sum(sq);
            last = g.value(loss).item();
            if last < 1e-6 {
                assert!(step < 2000);
                break;
            }
            g.backward_params(loss, &mut s).unwrap();
            adam_step(&mut s, &mut st, &cfg).unwrap();
        }
        assert!(last < 1e-6, "loss stalled at {last}");
    }
}
