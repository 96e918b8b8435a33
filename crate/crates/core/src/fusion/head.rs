use rand::Rng;

use super::gate::{gate_backward, gate_forward};
use super::moe::{moe_backward, moe_forward, MoeGrads, MoeOutput, MoeParams, OUTPUTS};
use super::{Cg2Position, EmotionPrediction, FusionConfig};
use crate::error::{Error, Result};
use crate::numerics::{log_sigmoid, logsumexp, Gradients, ParamId, ParamStore};
use crate::parallel::Execution;
use crate::rng::{stream_rng, Stream};
use crate::seqmodel::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, dropout_mask, BatchNormCache, Mode,
};

pub const GRAD_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct HeadIds {
    bn: Option<BnIds>,
    cg1_w: ParamId,
    cg1_b: ParamId,
    expert_w: ParamId,
    expert_b: ParamId,
    gate_w: ParamId,
    gate_b: ParamId,
    cg2_w: ParamId,
    cg2_b: ParamId,
}

/// Per-sample activations of the head after batch norm and dropout.
#[derive(Debug, Clone)]
pub struct HeadCache {
    x: Vec<f64>,
    s1: Vec<f64>,
    y1: Vec<f64>,
    s2_in: Option<Vec<f64>>,
    v: Vec<f64>,
    moe: MoeOutput,
    s2_out: Option<[f64; OUTPUTS]>,
    /// Final probabilities p′ and their stable logs.
    pub p: [f64; OUTPUTS],
    pub log_p: [f64; OUTPUTS],
    pub log_1mp: [f64; OUTPUTS],
}

/// Binary cross-entropy −[t·ln p + (1−t)·ln(1−p)] from precomputed logs.
pub fn bernoulli_xent(log_p: f64, log_1mp: f64, t: f64) -> f64 {
    let a = if t > 0.0 { t * log_p } else { 0.0 };
    let b = if t < 1.0 { (1.0 - t) * log_1mp } else { 0.0 };
    -(a + b)
}

fn logaddexp(a: f64, b: f64) -> f64 {
    logsumexp(&[a, b])
}

pub struct FusionHead {
    pub config: FusionConfig,
    ids: HeadIds,
}

/// Result of a batched head forward pass.
pub struct HeadBatch {
    pub rows: usize,
    pub caches: Vec<HeadCache>,
    bn: Option<BatchNormCache>,
    /// Batch moments from a train-mode pass, for the running estimates.
    pub bn_moments: Option<(Vec<f64>, Vec<f64>)>,
    masks: Option<Vec<Vec<f64>>>,
}

impl FusionHead {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, config: &FusionConfig, rng: &mut R) -> Result<()> {
        config.validate()?;
        let f = config.fused_dim();
        let rows = OUTPUTS * config.num_experts;
        if config.enable_batchnorm {
            store.insert("head.bn.gamma", &[f], vec![1.0; f])?;
            store.insert_zeros("head.bn.beta", &[f])?;
            store.insert_zeros("head.bn.running_mean", &[f])?;
            store.insert("head.bn.running_var", &[f], vec![1.0; f])?;
        }
        store.insert_glorot("head.cg1.w", f, f, &mut *rng)?;
        store.insert_zeros("head.cg1.b", &[f])?;
        store.insert_glorot("head.moe.expert.w", rows, f, &mut *rng)?;
        store.insert_zeros("head.moe.expert.b", &[rows])?;
        store.insert_glorot("head.moe.gate.w", rows, f, &mut *rng)?;
        store.insert_zeros("head.moe.gate.b", &[rows])?;
        let g2 = match config.cg2_position {
            Cg2Position::MoeInput => f,
            Cg2Position::MoeOutput => OUTPUTS,
        };
        store.insert_glorot("head.cg2.w", g2, g2, &mut *rng)?;
        store.insert_zeros("head.cg2.b", &[g2])?;
        Self::mark_buffers(store);
        Ok(())
    }

    /// Running statistics are state, not weights.
    pub fn mark_buffers(store: &mut ParamStore) {
        for name in ["head.bn.running_mean", "head.bn.running_var"] {
            if let Some(id) = store.id(name) {
                store.set_trainable(id, false);
            }
        }
    }

    pub fn bind(store: &ParamStore, config: FusionConfig) -> Result<Self> {
        config.validate()?;
        let f = config.fused_dim();
        let rows = OUTPUTS * config.num_experts;
        let g2 = match config.cg2_position {
            Cg2Position::MoeInput => f,
            Cg2Position::MoeOutput => OUTPUTS,
        };
        let want = |name: &str, len: usize| -> Result<ParamId> {
            let id = store.require(name)?;
            let got = store.get(id).len();
            if got != len {
                return Err(Error::dim(format!("parameter {name}"), len, got));
            }
            Ok(id)
        };
        let bn = if config.enable_batchnorm {
            Some(BnIds {
                gamma: want("head.bn.gamma", f)?,
                beta: want("head.bn.beta", f)?,
                mean: want("head.bn.running_mean", f)?,
                var: want("head.bn.running_var", f)?,
            })
        } else {
            None
        };
        let ids = HeadIds {
            bn,
            cg1_w: want("head.cg1.w", f * f)?,
            cg1_b: want("head.cg1.b", f)?,
            expert_w: want("head.moe.expert.w", rows * f)?,
            expert_b: want("head.moe.expert.b", rows)?,
            gate_w: want("head.moe.gate.w", rows * f)?,
            gate_b: want("head.moe.gate.b", rows)?,
            cg2_w: want("head.cg2.w", g2 * g2)?,
            cg2_b: want("head.cg2.b", g2)?,
        };
        Ok(Self { config, ids })
    }

    pub fn running_stat_ids(&self) -> Option<(ParamId, ParamId)> {
        self.ids.bn.map(|b| (b.mean, b.var))
    }

    fn moe_params<'a>(&self, store: &'a ParamStore) -> MoeParams<'a> {
        MoeParams {
            expert_w: store.values(self.ids.expert_w),
            expert_b: store.values(self.ids.expert_b),
            gate_w: store.values(self.ids.gate_w),
            gate_b: store.values(self.ids.gate_b),
            experts: self.config.num_experts,
            dim: self.config.fused_dim(),
        }
    }

    /// CG1 → MoE → CG2 for one already-normalized input row.
    pub fn core_forward(&self, store: &ParamStore, x: &[f64]) -> Result<HeadCache> {
        let f = self.config.fused_dim();
        if x.len() != f {
            return Err(Error::dim("fusion input", f, x.len()));
        }
        let (y1, s1) = gate_forward(x, store.values(self.ids.cg1_w), store.values(self.ids.cg1_b));
        let (v, s2_in) = match self.config.cg2_position {
            Cg2Position::MoeInput => {
                let (v, s) = gate_forward(&y1, store.values(self.ids.cg2_w), store.values(self.ids.cg2_b));
                (v, Some(s))
            }
            Cg2Position::MoeOutput => (y1.clone(), None),
        };
        let moe = moe_forward(&v, &self.moe_params(store))?;
        let (p, log_p, log_1mp, s2_out) = match self.config.cg2_position {
            Cg2Position::MoeInput => (moe.p, moe.log_p, moe.log_1mp, None),
            Cg2Position::MoeOutput => {
                let w = store.values(self.ids.cg2_w);
                let b = store.values(self.ids.cg2_b);
                let mut p = [0.0; OUTPUTS];
                let mut lp = [0.0; OUTPUTS];
                let mut l1 = [0.0; OUTPUTS];
                let mut s = [0.0; OUTPUTS];
                for d in 0..OUTPUTS {
                    let a = b[d] + (0..OUTPUTS).map(|j| w[d * OUTPUTS + j] * moe.p[j]).sum::<f64>();
                    let (ls, lns) = (log_sigmoid(a), log_sigmoid(-a));
                    s[d] = ls.exp();
                    p[d] = s[d] * moe.p[d];
                    lp[d] = ls + moe.log_p[d];
                    l1[d] = logaddexp(lns, ls + moe.log_1mp[d]);
                }
                (p, lp, l1, Some(s))
            }
        };
        if p.iter().chain(&log_p).chain(&log_1mp).any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN in fusion head output".into()));
        }
        Ok(HeadCache {
            x: x.to_vec(),
            s1,
            y1,
            s2_in,
            v,
            moe,
            s2_out,
            p,
            log_p,
            log_1mp,
        })
    }

    /// Accumulates head gradients from ∂L/∂p′ and returns ∂L/∂x.
    pub fn core_backward(&self, store: &ParamStore, cache: &HeadCache, dp_final: &[f64; OUTPUTS], grads: &mut Gradients) -> Vec<f64> {
        let ids = self.ids;
        let mut dp = *dp_final;
        if let Some(s) = cache.s2_out {
            let w = store.values(ids.cg2_w);
            let [gw, gb] = grads.many_mut([ids.cg2_w, ids.cg2_b]);
            let mut da = [0.0; OUTPUTS];
            for d in 0..OUTPUTS {
                da[d] = dp_final[d] * cache.moe.p[d] * s[d] * (1.0 - s[d]);
                dp[d] = dp_final[d] * s[d];
            }
            for d in 0..OUTPUTS {
                gb[d] += da[d];
                for j in 0..OUTPUTS {
                    gw[d * OUTPUTS + j] += da[d] * cache.moe.p[j];
                    dp[j] += w[d * OUTPUTS + j] * da[d];
                }
            }
        }
        let dv = {
            let [ew, eb, gw, gb] = grads.many_mut([ids.expert_w, ids.expert_b, ids.gate_w, ids.gate_b]);
            let mut mg = MoeGrads {
                expert_w: ew,
                expert_b: eb,
                gate_w: gw,
                gate_b: gb,
            };
            moe_backward(&cache.v, &self.moe_params(store), &cache.moe, &dp, &mut mg)
        };
        let dy1 = match &cache.s2_in {
            Some(s) => {
                let [gw, gb] = grads.many_mut([ids.cg2_w, ids.cg2_b]);
                gate_backward(&cache.y1, store.values(ids.cg2_w), s, &dv, gw, gb)
            }
            None => dv,
        };
        let [gw, gb] = grads.many_mut([ids.cg1_w, ids.cg1_b]);
        gate_backward(&cache.x, store.values(ids.cg1_w), &cache.s1, &dy1, gw, gb)
    }

    /// Cross-entropy against [0, 1] targets and its gradient in p′.
    pub fn sample_loss(cache: &HeadCache, target01: &[f64; OUTPUTS]) -> (f64, [f64; OUTPUTS]) {
        let mut loss = 0.0;
        let mut grad = [0.0; OUTPUTS];
        for d in 0..OUTPUTS {
            let t = target01[d];
            loss += bernoulli_xent(cache.log_p[d], cache.log_1mp[d], t);
            grad[d] = -t / cache.log_p[d].exp() + (1.0 - t) / cache.log_1mp[d].exp();
        }
        (loss, grad)
    }

    pub fn prediction(&self, cache: &HeadCache) -> EmotionPrediction {
        EmotionPrediction {
            valence: self.config.from_unit(cache.p[0]),
            arousal: self.config.from_unit(cache.p[1]),
        }
    }

    fn dropout_on(&self, mode: Mode) -> bool {
        mode == Mode::Train && self.config.enable_dropout && self.config.dropout_rate > 0.0
    }

    /// Batch norm (if enabled), dropout (train mode) and the per-row head
    /// pass over a B × F matrix of concatenated states. `seeds[i]` drives
    /// row i's dropout mask.
    pub fn forward_batch(
        &self,
        store: &ParamStore,
        states: &[f64],
        rows: usize,
        mode: Mode,
        seeds: &[u64],
        exec: Execution,
    ) -> Result<HeadBatch> {
        let f = self.config.fused_dim();
        if states.len() != rows * f {
            return Err(Error::dim("fusion state batch", rows * f, states.len()));
        }
        let (mut x, bn, bn_moments) = match self.ids.bn {
            None => (states.to_vec(), None, None),
            Some(b) => match mode {
                Mode::Train => {
                    let (y, cache, m, v) = batch_norm_train(
                        states,
                        rows,
                        f,
                        store.values(b.gamma),
                        store.values(b.beta),
                        self.config.batchnorm.epsilon,
                    )?;
                    (y, Some(cache), Some((m, v)))
                }
                Mode::Eval => (
                    batch_norm_eval(
                        states,
                        rows,
                        f,
                        store.values(b.gamma),
                        store.values(b.beta),
                        store.values(b.mean),
                        store.values(b.var),
                        &self.config.batchnorm,
                    )?,
                    None,
                    None,
                ),
            },
        };
        let masks = if self.dropout_on(mode) {
            if seeds.len() != rows {
                return Err(Error::dim("dropout seeds", rows, seeds.len()));
            }
            let masks: Vec<Vec<f64>> = seeds
                .iter()
                .map(|s| dropout_mask(f, self.config.dropout_rate, &mut stream_rng(*s, Stream::FusionDropout, &[])))
                .collect();
            for (r, m) in masks.iter().enumerate() {
                x[r * f..(r + 1) * f].iter_mut().zip(m).for_each(|(v, k)| *v *= k);
            }
            Some(masks)
        } else {
            None
        };
        let idx: Vec<usize> = (0..rows).collect();
        let caches = exec
            .map(&idx, |&r| self.core_forward(store, &x[r * f..(r + 1) * f]))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(HeadBatch {
            rows,
            caches,
            bn,
            bn_moments,
            masks,
        })
    }

    /// Backpropagates per-row ∂L/∂p′ through the head, batch norm and
    /// dropout. Returns head gradients and ∂L/∂states (B × F).
    pub fn backward_batch(
        &self,
        store: &ParamStore,
        batch: &HeadBatch,
        dp: &[[f64; OUTPUTS]],
        exec: Execution,
    ) -> (Gradients, Vec<f64>) {
        let f = self.config.fused_dim();
        let chunks = exec.map_chunks(&batch.caches, GRAD_CHUNK, |start, caches| {
            let mut g = store.zero_gradients();
            let mut dx = Vec::with_capacity(caches.len() * f);
            for (i, c) in caches.iter().enumerate() {
                dx.extend(self.core_backward(store, c, &dp[start + i], &mut g));
            }
            (g, dx)
        });
        let mut grads = store.zero_gradients();
        let mut dx = Vec::with_capacity(batch.rows * f);
        for (g, d) in chunks {
            grads.add_assign(&g);
            dx.extend(d);
        }
        if let Some(masks) = &batch.masks {
            for (r, m) in masks.iter().enumerate() {
                dx[r * f..(r + 1) * f].iter_mut().zip(m).for_each(|(v, k)| *v *= k);
            }
        }
        if let (Some(cache), Some(b)) = (&batch.bn, self.ids.bn) {
            let gamma = store.values(b.gamma).to_vec();
            let [dg, db] = grads.many_mut([b.gamma, b.beta]);
            dx = batch_norm_backward(&dx, cache, &gamma, dg, db);
        }
        (grads, dx)
    }
}

/// Single-sample head pass over per-modality final states. In eval mode
/// with batch statistics a lone row normalizes to β.
pub fn fusion_head_forward(
    head: &FusionHead,
    store: &ParamStore,
    states: &[&[f64]],
    mode: Mode,
    seed: u64,
) -> Result<(EmotionPrediction, [f64; OUTPUTS])> {
    let dims = &head.config.modality_dims;
    if states.len() != dims.len() {
        return Err(Error::Config(format!(
            "fusion head expects {} modalities, got {}",
            dims.len(),
            states.len()
        )));
    }
    for ((name, d), s) in dims.iter().zip(states) {
        if s.len() != *d {
            return Err(Error::Config(format!(
                "modality {name}: state width {} does not match configured {d}",
                s.len()
            )));
        }
    }
    let x: Vec<f64> = states.concat();
    let batch = head.forward_batch(store, &x, 1, mode, &[seed], Execution::Sequential)?;
    let cache = &batch.caches[0];
    Ok((head.prediction(cache), cache.p))
}
