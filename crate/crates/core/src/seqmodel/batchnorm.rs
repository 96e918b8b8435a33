//! Batch normalization over the rows of a B × F matrix.
//!
//! Training normalizes with the biased batch variance and folds the batch
//! moments into running estimates:
//! running ← momentum·running + (1 − momentum)·batch.
//! At inference the current batch's own statistics are used when
//! `use_batch_stats_at_inference` is set, otherwise the running estimates.

use super::Mode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub epsilon: f64,
    pub use_batch_stats_at_inference: bool,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            epsilon: 1e-5,
            use_batch_stats_at_inference: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub rows: usize,
    pub cols: usize,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

fn check(x: &[f64], rows: usize, cols: usize, gamma: &[f64], beta: &[f64]) -> Result<()> {
    if x.len() != rows * cols {
        return Err(Error::dim("batch-norm input", rows * cols, x.len()));
    }
    if gamma.len() != cols || beta.len() != cols {
        return Err(Error::dim("batch-norm scale/shift", cols, gamma.len().min(beta.len())));
    }
    if rows == 0 {
        return Err(Error::dim("batch-norm rows", 1, 0));
    }
    Ok(())
}

fn moments(x: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows as f64;
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for (m, v) in mean.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for ((s, v), m) in var.iter_mut().zip(&x[r * cols..(r + 1) * cols]).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

fn normalize(
    x: &[f64],
    rows: usize,
    cols: usize,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; rows * cols];
    let mut y = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let k = r * cols + c;
            xhat[k] = (x[k] - mean[c]) * inv_std[c];
            y[k] = gamma[c] * xhat[k] + beta[c];
        }
    }
    (y, xhat, inv_std)
}

/// Train-mode forward. Returns (output, cache, batch mean, batch variance).
pub fn batch_norm_train(
    x: &[f64],
    rows: usize,
    cols: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, BatchNormCache, Vec<f64>, Vec<f64>)> {
    check(x, rows, cols, gamma, beta)?;
    if rows < 2 {
        return Err(Error::DegenerateBatch(rows));
    }
    let (mean, var) = moments(x, rows, cols);
    let (y, xhat, inv_std) = normalize(x, rows, cols, &mean, &var, gamma, beta, eps);
    Ok((y, BatchNormCache { rows, cols, xhat, inv_std }, mean, var))
}

#[allow(clippy::too_many_arguments)]
pub fn batch_norm_eval(
    x: &[f64],
    rows: usize,
    cols: usize,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    config: &BatchNormConfig,
) -> Result<Vec<f64>> {
    check(x, rows, cols, gamma, beta)?;
    if config.use_batch_stats_at_inference {
        let (mean, var) = moments(x, rows, cols);
        Ok(normalize(x, rows, cols, &mean, &var, gamma, beta, config.epsilon).0)
    } else {
        if running_mean.len() != cols || running_var.len() != cols {
            return Err(Error::dim("batch-norm running statistics", cols, running_mean.len()));
        }
        Ok(normalize(x, rows, cols, running_mean, running_var, gamma, beta, config.epsilon).0)
    }
}

pub fn update_running_stats(
    running_mean: &mut [f64],
    running_var: &mut [f64],
    mean: &[f64],
    var: &[f64],
    momentum: f64,
) {
    for (r, m) in running_mean.iter_mut().zip(mean) {
        *r = momentum * *r + (1.0 - momentum) * m;
    }
    for (r, v) in running_var.iter_mut().zip(var) {
        *r = momentum * *r + (1.0 - momentum) * v;
    }
}

/// Returns ∂L/∂x and accumulates ∂L/∂γ, ∂L/∂β for a train-mode forward.
pub fn batch_norm_backward(
    dy: &[f64],
    cache: &BatchNormCache,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let (rows, cols) = (cache.rows, cache.cols);
    let n = rows as f64;
    let mut sum_dxhat = vec![0.0; cols];
    let mut sum_dxhat_xhat = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            let k = r * cols + c;
            dgamma[c] += dy[k] * cache.xhat[k];
            dbeta[c] += dy[k];
            let dxh = dy[k] * gamma[c];
            sum_dxhat[c] += dxh;
            sum_dxhat_xhat[c] += dxh * cache.xhat[k];
        }
    }
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let k = r * cols + c;
            let dxh = dy[k] * gamma[c];
            dx[k] = cache.inv_std[c] / n * (n * dxh - sum_dxhat[c] - cache.xhat[k] * sum_dxhat_xhat[c]);
        }
    }
    dx
}

/// Self-contained batch-norm layer (scale, shift and running moments).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub config: BatchNormConfig,
}

impl BatchNormState {
    pub fn new(features: usize, config: BatchNormConfig) -> Self {
        Self {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            config,
        }
    }

    pub fn apply(&mut self, x: &[f64], rows: usize, mode: Mode) -> Result<Vec<f64>> {
        let cols = self.gamma.len();
        match mode {
            Mode::Train => {
                let (y, _, mean, var) = batch_norm_train(x, rows, cols, &self.gamma, &self.beta, self.config.epsilon)?;
                update_running_stats(&mut self.running_mean, &mut self.running_var, &mean, &var, self.config.momentum);
                Ok(y)
            }
            Mode::Eval => batch_norm_eval(
                x,
                rows,
                cols,
                &self.gamma,
                &self.beta,
                &self.running_mean,
                &self.running_var,
                &self.config,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, ParamStore, DEFAULT_EPS};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    #[test]
    fn standardized_input_passes_through() {
        // Columns with mean 0 and biased variance 1.
        let x = [1.0, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0, -1.0];
        let mut bn = BatchNormState::new(2, BatchNormConfig::default());
        let y = bn.apply(&x, 4, Mode::Train).unwrap();
        // ε keeps the output a factor 1/√(1+ε) short of the input.
        let shrink = 1.0 - 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in x.iter().zip(&y) {
            assert!(((a - b).abs() - shrink).abs() < 1e-15);
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_column_collapses_to_beta() {
        let x = [2.0, 0.1, 2.0, 0.7, 2.0, -0.4];
        let mut bn = BatchNormState::new(2, BatchNormConfig::default());
        bn.beta = vec![0.3, 0.0];
        let y = bn.apply(&x, 3, Mode::Train).unwrap();
        for r in 0..3 {
            assert!((y[r * 2] - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn running_stats_follow_closed_form_ema() {
        let b1 = [1.0, 3.0, 5.0];
        let b2 = [-2.0, 0.0, 8.0];
        let mut bn = BatchNormState::new(1, BatchNormConfig::default());
        bn.apply(&b1, 3, Mode::Train).unwrap();
        bn.apply(&b2, 3, Mode::Train).unwrap();
        // Batch means 3 and 2; biased variances 8/3 and 56/3.
        let mean = 0.9 * (0.9 * 0.0 + 0.1 * 3.0) + 0.1 * 2.0;
        let var = 0.9 * (0.9 * 1.0 + 0.1 * (8.0 / 3.0)) + 0.1 * (56.0 / 3.0);
        assert!((bn.running_mean[0] - mean).abs() < 1e-12);
        assert!((bn.running_var[0] - var).abs() < 1e-12);
    }

    #[test]
    fn degenerate_train_batch_is_rejected() {
        let mut bn = BatchNormState::new(2, BatchNormConfig::default());
        assert!(matches!(bn.apply(&[1.0, 2.0], 1, Mode::Train), Err(Error::DegenerateBatch(1))));
        assert!(bn.apply(&[1.0, 2.0], 1, Mode::Eval).is_ok());
    }

    #[test]
    fn eval_modes_use_declared_statistics() {
        let mut bn = BatchNormState::new(1, BatchNormConfig { use_batch_stats_at_inference: false, ..Default::default() });
        bn.running_mean = vec![10.0];
        bn.running_var = vec![4.0];
        let y = bn.apply(&[12.0, 8.0], 2, Mode::Eval).unwrap();
        let s = (4.0f64 + 1e-5).sqrt();
        assert_eq!(y, [2.0 / s, -2.0 / s]);
        bn.config.use_batch_stats_at_inference = true;
        let y = bn.apply(&[12.0, 8.0], 2, Mode::Eval).unwrap();
        let s = (4.0f64 + 1e-5).sqrt();
        assert_eq!(y, [2.0 / s, -2.0 / s]);
        let y = bn.apply(&[12.0, 10.0], 2, Mode::Eval).unwrap();
        assert!((y[0] - 1.0 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn backward_passes_gradient_check() {
        let (rows, cols) = (5, 3);
        let mut rng = SplitMix64::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.insert("x", &[rows, cols], (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        s.insert("gamma", &[cols], vec![1.3, 0.7, -0.4]).unwrap();
        s.insert("beta", &[cols], vec![0.1, -0.2, 0.5]).unwrap();
        let probe: Vec<f64> = (0..rows * cols).map(|k| ((k * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let [xi, gi, bi] = ["x", "gamma", "beta"].map(|n| s.id(n).unwrap());
        let loss = |ps: &ParamStore| -> crate::Result<f64> {
            let (y, ..) = batch_norm_train(ps.values(xi), rows, cols, ps.values(gi), ps.values(bi), 1e-5)?;
            Ok(y.iter().zip(&probe).map(|(a, b)| a * b * a).sum())
        };
        let (y, cache, ..) = batch_norm_train(s.values(xi), rows, cols, s.values(gi), s.values(bi), 1e-5).unwrap();
        let dy: Vec<f64> = y.iter().zip(&probe).map(|(a, b)| 2.0 * a * b).collect();
        let mut g = s.zero_gradients();
        let mut dgamma = vec![0.0; cols];
        let mut dbeta = vec![0.0; cols];
        let dx = batch_norm_backward(&dy, &cache, s.values(gi), &mut dgamma, &mut dbeta);
        g.get_mut(xi).copy_from_slice(&dx);
        g.get_mut(gi).copy_from_slice(&dgamma);
        g.get_mut(bi).copy_from_slice(&dbeta);
        s.set_grads(&g).unwrap();
        let err = grad_check(loss, &s, DEFAULT_EPS).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn train_output_has_target_moments(
            seed in any::<u64>(),
            rows in 16usize..64,
            gamma in prop::collection::vec(0.5f64..1.5, 3),
            beta in prop::collection::vec(-2.0f64..2.0, 3),
        ) {
            let mut rng = SplitMix64::seed_from_u64(seed);
            let cols = 3;
            let x: Vec<f64> = (0..rows * cols).map(|k| {
                let scale = 20.0 + 10.0 * (k % cols) as f64;
                rng.random_range(-scale..scale) * 2.0 + 3.0
            }).collect();
            let (y, ..) = batch_norm_train(&x, rows, cols, &gamma, &beta, 1e-5).unwrap();
            let (mean, var) = moments(&y, rows, cols);
            for c in 0..cols {
                prop_assert!((mean[c] - beta[c]).abs() < 1e-9);
                prop_assert!((var[c] - gamma[c] * gamma[c]).abs() < 1e-6);
            }
        }
    }
}
