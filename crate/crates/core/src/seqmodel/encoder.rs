use rand::Rng;

use super::cell::{
    gru_backward, gru_forward, lstm_backward, lstm_forward, CellGrads, CellWeights, GruCache, LstmCache,
};
use super::dropout::dropout_mask;
use super::{CellKind, Mode, Sequence};
use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamId, ParamStore};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub cell: CellKind,
    /// Units per layer; the number of entries is the layer count.
    pub hidden_units: Vec<usize>,
    pub sequence_length: usize,
    pub dropout_rate: f64,
    pub input_dim: usize,
}

impl EncoderConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            cell: CellKind::Gru,
            hidden_units: vec![128],
            sequence_length: 60,
            dropout_rate: 0.0,
            input_dim,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_units.len()
    }

    pub fn output_dim(&self) -> usize {
        self.hidden_units.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequence_length == 0 {
            return Err(Error::Config("sequence_length must be at least 1".into()));
        }
        if self.hidden_units.is_empty() || self.hidden_units.contains(&0) {
            return Err(Error::Config("every layer needs at least one hidden unit".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("encoder input dimension must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    w: ParamId,
    u: ParamId,
    b: ParamId,
    input_dim: usize,
    hidden: usize,
}

/// A stack of recurrent layers bound to entries `<prefix>.l<k>.{w,u,b}` of a
/// [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    layers: Vec<LayerIds>,
}

enum StepCache {
    Gru(GruCache),
    Lstm(LstmCache),
}

struct LayerCache {
    inputs: Vec<Vec<f64>>,
    masks: Option<Vec<Vec<f64>>>,
    steps: Vec<StepCache>,
}

/// Activations retained by [`Encoder::forward_cached`] for backpropagation.
pub struct EncoderCache {
    layers: Vec<LayerCache>,
}

fn layer_name(prefix: &str, k: usize, part: &str) -> String {
    format!("{prefix}.l{k}.{part}")
}

impl Encoder {
    /// Adds freshly initialized weights for `config` under `prefix`.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Result<()> {
        config.validate()?;
        let g = config.cell.gates();
        let mut input = config.input_dim;
        for (k, &h) in config.hidden_units.iter().enumerate() {
            store.insert_glorot(layer_name(prefix, k, "w"), g * h, input, &mut *rng)?;
            store.insert_glorot(layer_name(prefix, k, "u"), g * h, h, &mut *rng)?;
            let mut b = vec![0.0; g * h];
            if config.cell == CellKind::Lstm {
                b[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
            }
            store.insert(layer_name(prefix, k, "b"), &[g * h], b)?;
            input = h;
        }
        Ok(())
    }

    pub fn bind(store: &ParamStore, prefix: &str, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let g = config.cell.gates();
        let mut layers = Vec::with_capacity(config.num_layers());
        let mut input = config.input_dim;
        for (k, &h) in config.hidden_units.iter().enumerate() {
            let ids = LayerIds {
                w: store.require(&layer_name(prefix, k, "w"))?,
                u: store.require(&layer_name(prefix, k, "u"))?,
                b: store.require(&layer_name(prefix, k, "b"))?,
                input_dim: input,
                hidden: h,
            };
            let cw = CellWeights {
                w: store.values(ids.w),
                u: store.values(ids.u),
                b: store.values(ids.b),
                input_dim: input,
                hidden: h,
            };
            cw.check(g)?;
            layers.push(ids);
            input = h;
        }
        Ok(Self { config, layers })
    }

    fn weights<'a>(&self, store: &'a ParamStore, k: usize) -> CellWeights<'a> {
        let l = self.layers[k];
        CellWeights {
            w: store.values(l.w),
            u: store.values(l.u),
            b: store.values(l.b),
            input_dim: l.input_dim,
            hidden: l.hidden,
        }
    }

    fn check_seq<S: Sequence + ?Sized>(&self, seq: &S) -> Result<()> {
        if seq.steps() != self.config.sequence_length {
            return Err(Error::dim("sequence length", self.config.sequence_length, seq.steps()));
        }
        if seq.dim() != self.config.input_dim {
            return Err(Error::dim("sequence feature dimension", self.config.input_dim, seq.dim()));
        }
        Ok(())
    }

    fn dropout_active(&self, mode: Mode) -> bool {
        mode == Mode::Train && self.config.dropout_rate > 0.0
    }

    /// Final hidden state of the top layer. Dropout masks are drawn from
    /// `rng` layer by layer, step by step, only in train mode.
    pub fn forward<S: Sequence + ?Sized, R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        seq: &S,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        self.run(store, seq, mode, rng, false).map(|(h, _)| h)
    }

    pub fn forward_cached<S: Sequence + ?Sized, R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        seq: &S,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Vec<f64>, EncoderCache)> {
        let (h, cache) = self.run(store, seq, mode, rng, true)?;
        Ok((h, cache.expect("cache requested")))
    }

    fn run<S: Sequence + ?Sized, R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        seq: &S,
        mode: Mode,
        rng: &mut R,
        keep: bool,
    ) -> Result<(Vec<f64>, Option<EncoderCache>)> {
        self.check_seq(seq)?;
        let steps = seq.steps();
        let drop = self.dropout_active(mode);
        let rate = self.config.dropout_rate;
        let mut below: Option<Vec<Vec<f64>>> = None;
        let mut caches = Vec::new();
        let mut last = Vec::new();

        for k in 0..self.layers.len() {
            let cw = self.weights(store, k);
            let h_dim = cw.hidden;
            let mut h = vec![0.0; h_dim];
            let mut c = vec![0.0; h_dim];
            let mut outputs = Vec::with_capacity(if k + 1 < self.layers.len() { steps } else { 0 });
            let mut inputs = Vec::new();
            let mut masks = Vec::new();
            let mut step_caches = Vec::new();
            for t in 0..steps {
                let raw: &[f64] = match &below {
                    None => seq.row(t),
                    Some(rows) => &rows[t],
                };
                let x: Vec<f64> = if drop {
                    let m = dropout_mask(raw.len(), rate, rng);
                    let x = raw.iter().zip(&m).map(|(a, b)| a * b).collect();
                    if keep {
                        masks.push(m);
                    }
                    x
                } else {
                    raw.to_vec()
                };
                match self.config.cell {
                    CellKind::Gru => {
                        let (hn, cache) = gru_forward(&cw, &x, &h);
                        h = hn;
                        if keep {
                            step_caches.push(StepCache::Gru(cache));
                        }
                    }
                    CellKind::Lstm => {
                        let (hn, cn, cache) = lstm_forward(&cw, &x, &h, &c);
                        h = hn;
                        c = cn;
                        if keep {
                            step_caches.push(StepCache::Lstm(cache));
                        }
                    }
                }
                if keep {
                    inputs.push(x);
                }
                if k + 1 < self.layers.len() {
                    outputs.push(h.clone());
                }
            }
            if keep {
                caches.push(LayerCache {
                    inputs,
                    masks: drop.then_some(masks),
                    steps: step_caches,
                });
            }
            below = Some(outputs);
            last = h;
        }
        Ok((last, keep.then_some(EncoderCache { layers: caches })))
    }

    /// Backpropagation through time from ∂L/∂h at the last step of the top
    /// layer; weight gradients are added into `grads`.
    pub fn backward(&self, store: &ParamStore, cache: &EncoderCache, dh_top: &[f64], grads: &mut Gradients) {
        let n_layers = self.layers.len();
        let steps = cache.layers[0].steps.len();
        let mut dh_seq: Vec<Vec<f64>> = Vec::new();
        for k in (0..n_layers).rev() {
            let ids = self.layers[k];
            let cw = self.weights(store, k);
            let lc = &cache.layers[k];
            let [gw, gu, gb] = grads.many_mut([ids.w, ids.u, ids.b]);
            let mut cg = CellGrads { w: gw, u: gu, b: gb };

            let mut dh = if k == n_layers - 1 { dh_top.to_vec() } else { vec![0.0; cw.hidden] };
            let mut dc = vec![0.0; cw.hidden];
            let mut dx_seq = vec![Vec::new(); if k > 0 { steps } else { 0 }];
            let mut dx = vec![0.0; cw.input_dim];
            for t in (0..steps).rev() {
                if k + 1 < n_layers {
                    for (a, b) in dh.iter_mut().zip(&dh_seq[t]) {
                        *a += b;
                    }
                }
                dx.iter_mut().for_each(|v| *v = 0.0);
                match &lc.steps[t] {
                    StepCache::Gru(sc) => {
                        dh = gru_backward(&cw, &lc.inputs[t], sc, &dh, &mut cg, &mut dx);
                    }
                    StepCache::Lstm(sc) => {
                        let (a, b) = lstm_backward(&cw, &lc.inputs[t], sc, &dh, &dc, &mut cg, &mut dx);
                        dh = a;
                        dc = b;
                    }
                }
                if k > 0 {
                    let mut d = dx.clone();
                    if let Some(masks) = &lc.masks {
                        d.iter_mut().zip(&masks[t]).for_each(|(v, m)| *v *= m);
                    }
                    dx_seq[t] = d;
                }
            }
            dh_seq = dx_seq;
        }
    }
}

/// Encodes one window with dropout masks drawn from a stream seeded by `seed`.
pub fn encode_sequence<S: Sequence + ?Sized>(
    seq: &S,
    encoder: &Encoder,
    store: &ParamStore,
    mode: Mode,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = stream_rng(seed, Stream::EncoderDropout, &[]);
    encoder.forward(store, seq, mode, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check_report, DEFAULT_EPS};
    use crate::seqmodel::{gru_cell_step, lstm_cell_step, SeqMatrix};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn build(cell: CellKind, units: Vec<usize>, t: usize, d: usize, seed: u64) -> (ParamStore, Encoder) {
        let cfg = EncoderConfig {
            cell,
            hidden_units: units,
            sequence_length: t,
            dropout_rate: 0.0,
            input_dim: d,
        };
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::seed_from_u64(seed);
        Encoder::register(&mut store, "enc", &cfg, &mut rng).unwrap();
        let enc = Encoder::bind(&store, "enc", cfg).unwrap();
        (store, enc)
    }

    fn random_seq(t: usize, d: usize, seed: u64) -> SeqMatrix {
        let mut rng = SplitMix64::seed_from_u64(seed);
        SeqMatrix::new(t, d, (0..t * d).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    fn cell<'a>(store: &'a ParamStore, k: usize, d: usize, h: usize) -> CellWeights<'a> {
        CellWeights {
            w: store.by_name(&format!("enc.l{k}.w")).unwrap().values.as_slice(),
            u: store.by_name(&format!("enc.l{k}.u")).unwrap().values.as_slice(),
            b: store.by_name(&format!("enc.l{k}.b")).unwrap().values.as_slice(),
            input_dim: d,
            hidden: h,
        }
    }

    #[test]
    fn single_step_unroll_equals_cell_step() {
        let (store, enc) = build(CellKind::Gru, vec![4], 1, 3, 1);
        let seq = random_seq(1, 3, 2);
        let h = encode_sequence(&seq, &enc, &store, Mode::Eval, 0).unwrap();
        assert_eq!(h, gru_cell_step(seq.row(0), &[0.0; 4], &cell(&store, 0, 3, 4)).unwrap());
    }

    #[test]
    fn unroll_matches_explicit_steps() {
        for kind in [CellKind::Gru, CellKind::Lstm] {
            let (store, enc) = build(kind, vec![4, 3], 3, 2, 7);
            let seq = random_seq(3, 2, 8);
            let got = encode_sequence(&seq, &enc, &store, Mode::Eval, 0).unwrap();
            let (c0, c1) = (cell(&store, 0, 2, 4), cell(&store, 1, 4, 3));
            let (mut h0, mut s0, mut h1, mut s1) = (vec![0.0; 4], vec![0.0; 4], vec![0.0; 3], vec![0.0; 3]);
            for t in 0..3 {
                match kind {
                    CellKind::Gru => {
                        h0 = gru_cell_step(seq.row(t), &h0, &c0).unwrap();
                        h1 = gru_cell_step(&h0, &h1, &c1).unwrap();
                    }
                    CellKind::Lstm => {
                        (h0, s0) = lstm_cell_step(seq.row(t), &h0, &s0, &c0).unwrap();
                        (h1, s1) = lstm_cell_step(&h0, &h1, &s1, &c1).unwrap();
                    }
                }
            }
            for (a, b) in got.iter().zip(&h1) {
                assert!((a - b).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn wrong_length_is_a_dimension_error() {
        let (store, enc) = build(CellKind::Gru, vec![2], 5, 3, 1);
        let seq = random_seq(4, 3, 2);
        assert!(matches!(
            encode_sequence(&seq, &enc, &store, Mode::Eval, 0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn dropout_is_inert_in_eval_and_seeded_in_train() {
        let (store, mut enc) = build(CellKind::Gru, vec![5, 4], 6, 3, 3);
        enc.config.dropout_rate = 0.5;
        let seq = random_seq(6, 3, 4);
        let a = encode_sequence(&seq, &enc, &store, Mode::Eval, 1).unwrap();
        let b = encode_sequence(&seq, &enc, &store, Mode::Eval, 2).unwrap();
        assert_eq!(a, b);
        let t1 = encode_sequence(&seq, &enc, &store, Mode::Train, 9).unwrap();
        let t2 = encode_sequence(&seq, &enc, &store, Mode::Train, 9).unwrap();
        let t3 = encode_sequence(&seq, &enc, &store, Mode::Train, 10).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, t3);
        assert_ne!(t1, a);
    }

    #[test]
    fn lstm_forget_bias_starts_at_one() {
        let (store, _) = build(CellKind::Lstm, vec![3], 2, 2, 1);
        let b = &store.by_name("enc.l0.b").unwrap().values;
        assert_eq!(&b[3..6], &[1.0, 1.0, 1.0]);
        assert!(b[..3].iter().chain(&b[6..]).all(|v| *v == 0.0));
    }

    fn encoder_grad_check(kind: CellKind, dropout: f64) -> f64 {
        let (mut store, mut enc) = build(kind, vec![3, 3], 5, 4, 21);
        enc.config.dropout_rate = dropout;
        let seq = random_seq(5, 4, 22);
        let probe = [0.9, -0.4, 0.6];
        // Train mode with a fixed seed keeps dropout masks identical across
        // evaluations.
        let mode = if dropout > 0.0 { Mode::Train } else { Mode::Eval };
        let loss = |ps: &ParamStore| -> crate::Result<f64> {
            let h = encode_sequence(&seq, &enc, ps, mode, 5)?;
            Ok(h.iter().zip(&probe).map(|(a, b)| a * b).sum())
        };
        let mut rng = stream_rng(5, Stream::EncoderDropout, &[]);
        let (_, cache) = enc.forward_cached(&store, &seq, mode, &mut rng).unwrap();
        let mut g = store.zero_gradients();
        enc.backward(&store, &cache, &probe, &mut g);
        store.set_grads(&g).unwrap();
        let r = grad_check_report(loss, &store, DEFAULT_EPS).unwrap();
        assert_eq!(r.checked, store.num_scalars());
        r.max_relative_error
    }

    #[test]
    fn two_layer_encoders_pass_gradient_check() {
        for kind in [CellKind::Gru, CellKind::Lstm] {
            let err = encoder_grad_check(kind, 0.0);
            assert!(err < 1e-4, "{kind}: {err}");
        }
    }

    #[test]
    fn gradient_check_with_fixed_dropout_masks() {
        let err = encoder_grad_check(CellKind::Gru, 0.3);
        assert!(err < 1e-4, "{err}");
    }

    fn scaled_gru_output(seed: u64, weight_scale: f64, input_scale: f64) -> Vec<f64> {
        let (mut store, enc) = build(CellKind::Gru, vec![4, 3], 8, 3, seed);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.values_mut(id).iter_mut().for_each(|v| *v *= weight_scale);
        }
        let mut rng = SplitMix64::seed_from_u64(seed ^ 1);
        let seq = SeqMatrix::new(8, 3, (0..24).map(|_| rng.random_range(-input_scale..input_scale)).collect()).unwrap();
        encode_sequence(&seq, &enc, &store, Mode::Eval, 0).unwrap()
    }

    proptest! {
        #[test]
        fn gru_state_stays_in_open_unit_interval(seed in any::<u64>(), scale in 0.1f64..1.5) {
            let h = scaled_gru_output(seed, scale, 2.0);
            prop_assert!(h.iter().all(|v| v.abs() < 1.0));
        }

        // Far into saturation tanh rounds to exactly ±1 in f64.
        #[test]
        fn gru_state_bounded_under_saturation(seed in any::<u64>(), scale in 1.0f64..20.0) {
            let h = scaled_gru_output(seed, scale, 50.0);
            prop_assert!(h.iter().all(|v| v.abs() <= 1.0 && v.is_finite()));
        }
    }
}
