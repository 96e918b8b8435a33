//! Mixture of logistic-regression experts, one softmax gate per output
//! dimension. Row `d·E + i` of each weight matrix belongs to expert `i` of
//! output `d`.

use crate::error::{Error, Result};
use crate::numerics::{log_sigmoid, logsumexp, matvec_acc, matvec_t_acc, outer_acc, sigmoid};

pub const OUTPUTS: usize = 2;

#[derive(Debug, Clone, Copy)]
pub struct MoeParams<'a> {
    pub expert_w: &'a [f64],
    pub expert_b: &'a [f64],
    pub gate_w: &'a [f64],
    pub gate_b: &'a [f64],
    pub experts: usize,
    pub dim: usize,
}

impl MoeParams<'_> {
    fn check(&self) -> Result<()> {
        let rows = OUTPUTS * self.experts;
        if self.experts == 0 {
            return Err(Error::Config("mixture of experts needs at least one expert".into()));
        }
        for (what, len, want) in [
            ("expert weights", self.expert_w.len(), rows * self.dim),
            ("gate weights", self.gate_w.len(), rows * self.dim),
            ("expert bias", self.expert_b.len(), rows),
            ("gate bias", self.gate_b.len(), rows),
        ] {
            if len != want {
                return Err(Error::dim(what, want, len));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MoeOutput {
    pub p: [f64; OUTPUTS],
    pub log_p: [f64; OUTPUTS],
    pub log_1mp: [f64; OUTPUTS],
    /// Softmax gate weights, row layout as the parameters.
    pub gates: Vec<f64>,
    /// Expert logits.
    pub logits: Vec<f64>,
}

pub fn moe_forward(v: &[f64], mp: &MoeParams) -> Result<MoeOutput> {
    mp.check()?;
    if v.len() != mp.dim {
        return Err(Error::dim("mixture-of-experts input", mp.dim, v.len()));
    }
    let e = mp.experts;
    let rows = OUTPUTS * e;
    let mut logits = mp.expert_b.to_vec();
    matvec_acc(mp.expert_w, rows, mp.dim, v, &mut logits);
    let mut q = mp.gate_b.to_vec();
    matvec_acc(mp.gate_w, rows, mp.dim, v, &mut q);
    if q.iter().chain(&logits).any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite mixture-of-experts activation".into()));
    }

    let mut gates = vec![0.0; rows];
    let mut p = [0.0; OUTPUTS];
    let mut log_p = [0.0; OUTPUTS];
    let mut log_1mp = [0.0; OUTPUTS];
    for d in 0..OUTPUTS {
        let qd = &q[d * e..(d + 1) * e];
        let lse = logsumexp(qd);
        let log_g: Vec<f64> = qd.iter().map(|x| x - lse).collect();
        let g: Vec<f64> = {
            let m = qd.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = qd.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = ex.iter().sum();
            ex.iter().map(|x| x / s).collect()
        };
        let ld = &logits[d * e..(d + 1) * e];
        p[d] = g.iter().zip(ld).map(|(g, z)| g * sigmoid(*z)).sum();
        let a: Vec<f64> = log_g.iter().zip(ld).map(|(lg, z)| lg + log_sigmoid(*z)).collect();
        let b: Vec<f64> = log_g.iter().zip(ld).map(|(lg, z)| lg + log_sigmoid(-z)).collect();
        log_p[d] = logsumexp(&a);
        log_1mp[d] = logsumexp(&b);
        gates[d * e..(d + 1) * e].copy_from_slice(&g);
    }
    Ok(MoeOutput {
        p,
        log_p,
        log_1mp,
        gates,
        logits,
    })
}

pub struct MoeGrads<'a> {
    pub expert_w: &'a mut [f64],
    pub expert_b: &'a mut [f64],
    pub gate_w: &'a mut [f64],
    pub gate_b: &'a mut [f64],
}

/// Given ∂L/∂p, accumulates parameter gradients and returns ∂L/∂v.
pub fn moe_backward(v: &[f64], mp: &MoeParams, out: &MoeOutput, dp: &[f64; OUTPUTS], grads: &mut MoeGrads) -> Vec<f64> {
    let e = mp.experts;
    let rows = OUTPUTS * e;
    let mut de = vec![0.0; rows];
    let mut dq = vec![0.0; rows];
    for d in 0..OUTPUTS {
        for i in 0..e {
            let k = d * e + i;
            let s = sigmoid(out.logits[k]);
            let g = out.gates[k];
            de[k] = dp[d] * g * s * (1.0 - s);
            dq[k] = dp[d] * g * (s - out.p[d]);
        }
    }
    outer_acc(grads.expert_w, &de, v);
    outer_acc(grads.gate_w, &dq, v);
    for k in 0..rows {
        grads.expert_b[k] += de[k];
        grads.gate_b[k] += dq[k];
    }
    let mut dv = vec![0.0; mp.dim];
    matvec_t_acc(mp.expert_w, rows, mp.dim, &de, &mut dv);
    matvec_t_acc(mp.gate_w, rows, mp.dim, &dq, &mut dv);
    dv
}
