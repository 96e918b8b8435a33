use super::params::Param;
use crate::error::{Error, Result};

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// ln σ(z).
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::dim("softmax input", 1, 0));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite softmax input".into()));
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    Ok(out)
}

/// out += W·x for a row-major `rows × cols` matrix.
#[inline]
pub fn matvec_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        let row = &w[r * cols..(r + 1) * cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// out += Wᵀ·dy.
#[inline]
pub fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, dy: &[f64], out: &mut [f64]) {
    for (r, &d) in dy.iter().enumerate().take(rows) {
        if d == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * d;
        }
    }
}

/// dW += dy·xᵀ.
#[inline]
pub fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &mut dw[r * cols..(r + 1) * cols];
        for (g, xi) in row.iter_mut().zip(x) {
            *g += d * xi;
        }
    }
}

fn check_dense(x: &[f64], w: &Param, b: &Param) -> Result<(usize, usize)> {
    if w.shape.len() != 2 {
        return Err(Error::dim("dense weight rank", 2, w.shape.len()));
    }
    let (rows, cols) = (w.shape[0], w.shape[1]);
    if x.len() != cols {
        return Err(Error::dim("dense input", cols, x.len()));
    }
    if b.len() != rows {
        return Err(Error::dim("dense bias", rows, b.len()));
    }
    Ok((rows, cols))
}

/// y = W·x + b.
pub fn dense_forward(x: &[f64], w: &Param, b: &Param) -> Result<Vec<f64>> {
    let (rows, cols) = check_dense(x, w, b)?;
    let mut y = b.values.clone();
    matvec_acc(&w.values, rows, cols, x, &mut y);
    Ok(y)
}

/// Accumulates ∂L/∂W and ∂L/∂b and returns ∂L/∂x.
pub fn dense_backward(
    x: &[f64],
    w: &Param,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Result<Vec<f64>> {
    if w.shape.len() != 2 {
        return Err(Error::dim("dense weight rank", 2, w.shape.len()));
    }
    let (rows, cols) = (w.shape[0], w.shape[1]);
    if dy.len() != rows || db.len() != rows {
        return Err(Error::dim("dense output gradient", rows, dy.len()));
    }
    if x.len() != cols || dw.len() != rows * cols {
        return Err(Error::dim("dense input", cols, x.len()));
    }
    outer_acc(dw, dy, x);
    for (g, d) in db.iter_mut().zip(dy) {
        *g += d;
    }
    let mut dx = vec![0.0; cols];
    matvec_t_acc(&w.values, rows, cols, dy, &mut dx);
    Ok(dx)
}

/// Multi-label sigmoid cross-entropy −Σ[t·ln σ(z) + (1−t)·ln(1−σ(z))],
/// evaluated as Σ softplus(z) − t·z. Returns the loss and σ(z) − t.
pub fn sigmoid_xent_loss(logits: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() {
        return Err(Error::dim("cross-entropy targets", logits.len(), targets.len()));
    }
    if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Domain(format!("target {t} outside [0, 1]")));
    }
    let loss = logits.iter().zip(targets).map(|(z, t)| softplus(*z) - t * z).sum();
    let grad = logits.iter().zip(targets).map(|(z, t)| sigmoid(*z) - t).collect();
    Ok((loss, grad))
}
