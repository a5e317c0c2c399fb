use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-5, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.0 }
    }
}

/// Moment buffers for Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub config: AdamWConfig,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step_count: u64,
}

impl AdamWState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { config, first_moment: zeros(), second_moment: zeros(), step_count: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update of every parameter from its stored gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), NumericsError> {
        if store.len() != self.first_moment.len() {
            return Err(NumericsError::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first_moment.len(),
                store.len()
            )));
        }
        if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
            return Err(NumericsError::Contract(format!("parameter `{}` has no gradient", p.name)));
        }
        let c = self.config;
        let t = self.step_count + 1;
        let bc1 = 1.0 - c.beta1.powf(t as f64);
        let bc2 = 1.0 - c.beta2.powf(t as f64);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first_moment).zip(&mut self.second_moment) {
            let grad = p.grad.as_ref().expect("checked above");
            let w = p.value.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..w.len() {
                let g = grad.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= c.learning_rate * (m_hat / (v_hat.sqrt() + c.epsilon) + c.weight_decay * w[i]);
            }
        }
        self.step_count = t;
        Ok(())
    }
}

/// Convenience wrapper matching the free-function form.
pub fn adamw_step(store: &mut ParamStore, state: &mut AdamWState) -> Result<(), NumericsError> {
    state.step(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(w)).unwrap();
        s
    }

    #[test]
    fn zero_grad_no_decay_is_a_fixed_point() {
        let mut s = scalar_store(1.25);
        s.zero_grads();
        let mut st = AdamWState::new(&s, AdamWConfig { learning_rate: 0.1, ..Default::default() });
        st.step(&mut s).unwrap();
        assert_eq!(s.by_name("w").unwrap().value.item(), 1.25);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias-corrected m̂ = g, v̂ = g², so |Δw| = η·|g|/(|g| + ε)
        let lr = 1e-3;
        let g = 0.37;
        let mut s = scalar_store(0.0);
        s.zero_grads();
        s.by_name_mut("w").unwrap().grad = Some(Tensor::scalar(g));
        let mut st = AdamWState::new(&s, AdamWConfig { learning_rate: lr, ..Default::default() });
        st.step(&mut s).unwrap();
        let w = s.by_name("w").unwrap().value.item();
        let oracle = lr * g / (g + 1e-8);
        assert!((w.abs() - oracle).abs() < 1e-15);
        assert!((w.abs() - lr).abs() <= 1e-9);
    }

    #[test]
    fn missing_grad_is_a_contract_error() {
        let mut s = scalar_store(0.0);
        let mut st = AdamWState::new(&s, AdamWConfig::default());
        assert!(matches!(st.step(&mut s), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn decoupled_decay_shrinks_weights_without_gradient() {
        let mut s = scalar_store(2.0);
        s.zero_grads();
        let cfg = AdamWConfig { learning_rate: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut st = AdamWState::new(&s, cfg);
        st.step(&mut s).unwrap();
        assert!((s.by_name("w").unwrap().value.item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    /// Plain scalar Adam, written independently of the tensor implementation.
    fn scalar_adam(w0: f64, lr: f64, steps: u32, grad: impl Fn(f64) -> f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8);
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        let mut path = Vec::new();
        for t in 1..=steps {
            let g = grad(w);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let (mh, vh) = (m / (1.0 - b1.powi(t as i32)), v / (1.0 - b2.powi(t as i32)));
            w -= lr * mh / (vh.sqrt() + eps);
            path.push(w);
        }
        path
    }

    #[test]
    fn quadratic_converges_like_the_scalar_reference() {
        let reference = scalar_adam(0.0, 0.1, 1000, |w| 2.0 * (w - 3.0));
        let mut s = scalar_store(0.0);
        let mut st = AdamWState::new(&s, AdamWConfig { learning_rate: 0.1, ..Default::default() });
        for expected in &reference {
            let w = s.by_name("w").unwrap().value.item();
            s.by_name_mut("w").unwrap().grad = Some(Tensor::scalar(2.0 * (w - 3.0)));
            st.step(&mut s).unwrap();
            assert!((s.by_name("w").unwrap().value.item() - expected).abs() <= 1e-12);
        }
        assert!((s.by_name("w").unwrap().value.item() - 3.0).abs() <= 1e-2);
    }
}
