//! GRU and LSTM cell steps.
//!
//! Gate pre-activations are stacked: a GRU's W is [3H × D] with row blocks
//! (update z, reset r, candidate), an LSTM's is [4H × D] with blocks
//! (input i, forget f, candidate g, output o). U and b follow the same
//! layout.
//!
//! GRU: h = (1 − z)∘h_prev + z∘tanh(W_h x + U_h (r∘h_prev) + b_h).
//! LSTM: c = f∘c_prev + i∘g, h = o∘tanh(c), no peepholes.

use crate::error::{Error, Result};
use crate::numerics::{matvec_acc, matvec_t_acc, outer_acc, sigmoid};

#[derive(Debug, Clone, Copy)]
pub struct CellWeights<'a> {
    pub w: &'a [f64],
    pub u: &'a [f64],
    pub b: &'a [f64],
    pub input_dim: usize,
    pub hidden: usize,
}

impl CellWeights<'_> {
    pub fn check(&self, gates: usize) -> Result<()> {
        let (d, h) = (self.input_dim, self.hidden);
        if self.w.len() != gates * h * d {
            return Err(Error::dim("cell input weights", gates * h * d, self.w.len()));
        }
        if self.u.len() != gates * h * h {
            return Err(Error::dim("cell recurrent weights", gates * h * h, self.u.len()));
        }
        if self.b.len() != gates * h {
            return Err(Error::dim("cell bias", gates * h, self.b.len()));
        }
        Ok(())
    }
}

pub struct CellGrads<'a> {
    pub w: &'a mut [f64],
    pub u: &'a mut [f64],
    pub b: &'a mut [f64],
}

#[derive(Debug, Clone)]
pub struct GruCache {
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub cand: Vec<f64>,
    pub h_prev: Vec<f64>,
}

pub fn gru_forward(cw: &CellWeights, x: &[f64], h_prev: &[f64]) -> (Vec<f64>, GruCache) {
    let (d, h) = (cw.input_dim, cw.hidden);
    let mut a = cw.b.to_vec();
    matvec_acc(cw.w, 3 * h, d, x, &mut a);
    matvec_acc(&cw.u[..2 * h * h], 2 * h, h, h_prev, &mut a[..2 * h]);
    let z: Vec<f64> = a[..h].iter().map(|v| sigmoid(*v)).collect();
    let r: Vec<f64> = a[h..2 * h].iter().map(|v| sigmoid(*v)).collect();
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(r, h)| r * h).collect();
    let mut ah = a[2 * h..].to_vec();
    matvec_acc(&cw.u[2 * h * h..], h, h, &rh, &mut ah);
    let cand: Vec<f64> = ah.iter().map(|v| v.tanh()).collect();
    let out = (0..h).map(|j| (1.0 - z[j]) * h_prev[j] + z[j] * cand[j]).collect();
    (
        out,
        GruCache {
            z,
            r,
            cand,
            h_prev: h_prev.to_vec(),
        },
    )
}

/// Backpropagates `dh` through one GRU step. Accumulates weight gradients,
/// adds ∂L/∂x into `dx` and returns ∂L/∂h_prev.
pub fn gru_backward(
    cw: &CellWeights,
    x: &[f64],
    cache: &GruCache,
    dh: &[f64],
    grads: &mut CellGrads,
    dx: &mut [f64],
) -> Vec<f64> {
    let (d, h) = (cw.input_dim, cw.hidden);
    let GruCache { z, r, cand, h_prev } = cache;
    let mut da = vec![0.0; 3 * h];
    let mut dh_prev = vec![0.0; h];
    for j in 0..h {
        let dz = dh[j] * (cand[j] - h_prev[j]);
        dh_prev[j] = dh[j] * (1.0 - z[j]);
        da[j] = dz * z[j] * (1.0 - z[j]);
        da[2 * h + j] = dh[j] * z[j] * (1.0 - cand[j] * cand[j]);
    }
    let u_cand = &cw.u[2 * h * h..];
    let mut drh = vec![0.0; h];
    matvec_t_acc(u_cand, h, h, &da[2 * h..], &mut drh);
    for j in 0..h {
        let dr = drh[j] * h_prev[j];
        dh_prev[j] += drh[j] * r[j];
        da[h + j] = dr * r[j] * (1.0 - r[j]);
    }
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(r, h)| r * h).collect();

    outer_acc(grads.w, &da, x);
    for (g, v) in grads.b.iter_mut().zip(&da) {
        *g += v;
    }
    outer_acc(&mut grads.u[..2 * h * h], &da[..2 * h], h_prev);
    outer_acc(&mut grads.u[2 * h * h..], &da[2 * h..], &rh);
    matvec_t_acc(cw.w, 3 * h, d, &da, dx);
    matvec_t_acc(&cw.u[..2 * h * h], 2 * h, h, &da[..2 * h], &mut dh_prev);
    dh_prev
}

pub fn gru_cell_step(x: &[f64], h_prev: &[f64], cw: &CellWeights) -> Result<Vec<f64>> {
    cw.check(3)?;
    if x.len() != cw.input_dim {
        return Err(Error::dim("gru input", cw.input_dim, x.len()));
    }
    if h_prev.len() != cw.hidden {
        return Err(Error::dim("gru state", cw.hidden, h_prev.len()));
    }
    Ok(gru_forward(cw, x, h_prev).0)
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
}

pub fn lstm_forward(
    cw: &CellWeights,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> (Vec<f64>, Vec<f64>, LstmCache) {
    let (d, h) = (cw.input_dim, cw.hidden);
    let mut a = cw.b.to_vec();
    matvec_acc(cw.w, 4 * h, d, x, &mut a);
    matvec_acc(cw.u, 4 * h, h, h_prev, &mut a);
    let i: Vec<f64> = a[..h].iter().map(|v| sigmoid(*v)).collect();
    let f: Vec<f64> = a[h..2 * h].iter().map(|v| sigmoid(*v)).collect();
    let g: Vec<f64> = a[2 * h..3 * h].iter().map(|v| v.tanh()).collect();
    let o: Vec<f64> = a[3 * h..].iter().map(|v| sigmoid(*v)).collect();
    let c: Vec<f64> = (0..h).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
    let hn: Vec<f64> = (0..h).map(|j| o[j] * c[j].tanh()).collect();
    let cache = LstmCache {
        i,
        f,
        g,
        o,
        c: c.clone(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
    };
    (hn, c, cache)
}

/// Backpropagates (`dh`, `dc`) through one LSTM step; returns
/// (∂L/∂h_prev, ∂L/∂c_prev) and adds ∂L/∂x into `dx`.
pub fn lstm_backward(
    cw: &CellWeights,
    x: &[f64],
    cache: &LstmCache,
    dh: &[f64],
    dc: &[f64],
    grads: &mut CellGrads,
    dx: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let (d, h) = (cw.input_dim, cw.hidden);
    let LstmCache { i, f, g, o, c, h_prev, c_prev } = cache;
    let mut da = vec![0.0; 4 * h];
    let mut dc_prev = vec![0.0; h];
    for j in 0..h {
        let tc = c[j].tanh();
        let dcj = dc[j] + dh[j] * o[j] * (1.0 - tc * tc);
        da[j] = dcj * g[j] * i[j] * (1.0 - i[j]);
        da[h + j] = dcj * c_prev[j] * f[j] * (1.0 - f[j]);
        da[2 * h + j] = dcj * i[j] * (1.0 - g[j] * g[j]);
        da[3 * h + j] = dh[j] * tc * o[j] * (1.0 - o[j]);
        dc_prev[j] = dcj * f[j];
    }
    outer_acc(grads.w, &da, x);
    outer_acc(grads.u, &da, h_prev);
    for (gb, v) in grads.b.iter_mut().zip(&da) {
        *gb += v;
    }
    matvec_t_acc(cw.w, 4 * h, d, &da, dx);
    let mut dh_prev = vec![0.0; h];
    matvec_t_acc(cw.u, 4 * h, h, &da, &mut dh_prev);
    (dh_prev, dc_prev)
}

pub fn lstm_cell_step(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    cw: &CellWeights,
) -> Result<(Vec<f64>, Vec<f64>)> {
    cw.check(4)?;
    if x.len() != cw.input_dim {
        return Err(Error::dim("lstm input", cw.input_dim, x.len()));
    }
    if h_prev.len() != cw.hidden || c_prev.len() != cw.hidden {
        return Err(Error::dim("lstm state", cw.hidden, h_prev.len().min(c_prev.len())));
    }
    let (h, c, _) = lstm_forward(cw, x, h_prev, c_prev);
    Ok((h, c))
}
