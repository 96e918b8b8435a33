use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates mirroring a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected Adam update from the gradients stored in `params`.
    ///
    /// Non-finite gradients leave both the parameters and the state untouched
    /// and return [`Error::Numeric`].
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::dim("adam state entries", params.len(), self.m.len()));
        }
        for ((name, p), m) in params.iter().zip(&self.m) {
            if m.len() != p.len() {
                return Err(Error::dim(format!("adam state for {name}"), p.len(), m.len()));
            }
            if p.trainable && p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in {name}")));
            }
        }

        self.t += 1;
        let AdamConfig { lr, beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in params.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            for i in 0..p.values.len() {
                let g = p.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p.values[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        if !params.all_finite() {
            return Err(Error::Numeric("parameter became non-finite after update".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_store(p: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", &[1], vec![p]).unwrap();
        let id = s.id("p").unwrap();
        s.get_mut(id).grad[0] = g;
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = ParamStore::new();
        s.insert("w", &[2, 2], vec![0.1, -0.2, 0.3, 4.0]).unwrap();
        let before = s.clone();
        let mut st = AdamState::new(&s, AdamConfig::default());
        st.step(&mut s).unwrap();
        assert_eq!(st.t, 1);
        assert_eq!(s.by_name("w").unwrap().values, before.by_name("w").unwrap().values);
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = scalar_store(1.0, 2.0);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut st = AdamState::new(&s, cfg);
        st.step(&mut s).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε).
        let expect = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        let got = s.by_name("p").unwrap().values[0];
        assert!((got - expect).abs() < 1e-15);
        assert!((got - 0.9).abs() < 1e-8);
        assert!(st.v[0][0] >= 0.0);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut s = scalar_store(1.0, f64::NAN);
        let mut st = AdamState::new(&s, AdamConfig::default());
        assert!(matches!(st.step(&mut s), Err(Error::Numeric(_))));
        assert_eq!(st.t, 0);
        assert_eq!(s.by_name("p").unwrap().values[0], 1.0);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut s = scalar_store(1.0, 5.0);
        let id = s.id("p").unwrap();
        s.set_trainable(id, false);
        let mut st = AdamState::new(&s, AdamConfig::default());
        st.step(&mut s).unwrap();
        assert_eq!(s.values(id), &[1.0]);
    }

    proptest! {
        #[test]
        fn zero_learning_rate_is_identity(
            vals in prop::collection::vec(-10.0f64..10.0, 1..6),
            grads in prop::collection::vec(-1e3f64..1e3, 6),
            steps in 1usize..4,
        ) {
            let mut s = ParamStore::new();
            s.insert("x", &[vals.len()], vals.clone()).unwrap();
            let id = s.id("x").unwrap();
            let mut st = AdamState::new(&s, AdamConfig { lr: 0.0, ..AdamConfig::default() });
            for _ in 0..steps {
                let n = vals.len();
                s.get_mut(id).grad.copy_from_slice(&grads[..n]);
                st.step(&mut s).unwrap();
            }
            prop_assert_eq!(s.values(id), &vals[..]);
            prop_assert_eq!(st.t, steps as u64);
        }
    }
}
