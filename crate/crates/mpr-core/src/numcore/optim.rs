//! Adam with decoupled weight decay.

use crate::error::{CoreError, CoreResult};
use crate::numcore::nn::ParamStore;

pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter optimizer state: first/second moment buffers shape-match
/// their parameters; `step_count` increments by one per apply.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// AdamW over a [`ParamStore`]. Update rule per parameter p with gradient g:
///
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
///   p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p
///
/// where the decay term uses the pre-step parameter value.
pub struct AdamW {
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let m = store.tensors().map(|t| vec![0.0; t.numel()]).collect();
        let v = store.tensors().map(|t| vec![0.0; t.numel()]).collect();
        AdamW {
            state: OptimizerState {
                step_count: 0,
                m,
                v,
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: ADAM_EPS,
                weight_decay,
            },
        }
    }

    /// Apply one step. `grads[i]` matches parameter `i` of the store;
    /// `None` entries are treated as zero gradient (decay still applies).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> CoreResult<()> {
        if grads.len() != store.len() {
            return Err(CoreError::config(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(CoreError::numeric("adamw", "non-finite gradient"));
            }
        }
        let s = &mut self.state;
        s.step_count += 1;
        let bc1 = 1.0 - s.beta1.powi(s.step_count as i32);
        let bc2 = 1.0 - s.beta2.powi(s.step_count as i32);
        for (i, tensor) in store.tensors_mut().enumerate() {
            let zero;
            let g: &[f64] = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = vec![0.0; tensor.numel()];
                    &zero
                }
            };
            let m = &mut s.m[i];
            let v = &mut s.v[i];
            for j in 0..tensor.numel() {
                m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * g[j];
                v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let p = tensor.data[j];
                tensor.data[j] = p - s.lr * m_hat / (v_hat.sqrt() + s.eps) - s.lr * s.weight_decay * p;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    fn store_with(p: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::new(vec![1], vec![p]).unwrap().with_grad());
        s
    }

    #[test]
    fn first_step_matches_bias_corrected_formula() {
        let mut store = store_with(0.0);
        let mut opt = AdamW::new(&store, 1e-3, 0.0);
        opt.step(&mut store, &[Some(vec![1.0])]).unwrap();
        // m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
        let expected = -1e-3 / (1.0 + ADAM_EPS);
        assert!((store.get("p").unwrap().data[0] - expected).abs() < 1e-15);
        assert_eq!(opt.state.step_count, 1);
    }

    #[test]
    fn zero_grad_zero_decay_leaves_param() {
        let mut store = store_with(0.7);
        let mut opt = AdamW::new(&store, 1e-3, 0.0);
        opt.step(&mut store, &[Some(vec![0.0])]).unwrap();
        assert_eq!(store.get("p").unwrap().data[0], 0.7);
    }

    #[test]
    fn decoupled_decay_term() {
        // wd=0.01, g=0, lr=1e-3, p=1 -> p' = 1 - 1e-5
        let mut store = store_with(1.0);
        let mut opt = AdamW::new(&store, 1e-3, 0.01);
        opt.step(&mut store, &[Some(vec![0.0])]).unwrap();
        assert!((store.get("p").unwrap().data[0] - (1.0 - 1e-5)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_grad_is_numeric_error() {
        let mut store = store_with(1.0);
        let mut opt = AdamW::new(&store, 1e-3, 0.0);
        let err = opt.step(&mut store, &[Some(vec![f64::NAN])]);
        assert!(matches!(err, Err(CoreError::Numeric { .. })));
        // Param untouched on error.
        assert_eq!(store.get("p").unwrap().data[0], 1.0);
    }
}
