//! Full network: one recurrent encoder per modality feeding the fusion head.

mod train;

pub use train::{train, EpochLog, TrainConfig};

use std::path::Path;

use crate::dataio::{batch_ranges, window_sequences, EmotionTrack, Movie, Purpose, Sample, TrackSet, Window};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionHead, GRAD_CHUNK};
use crate::numerics::{checkpoint, Gradients, LossValue, ParamStore};
use crate::parallel::Execution;
use crate::rng::{stream_rng, Stream};
use crate::seqmodel::{update_running_stats, Encoder, EncoderCache, EncoderConfig, Mode};

/// Architecture: encoders in modality order plus the fusion head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub modalities: Vec<(String, EncoderConfig)>,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    /// Fills the head's modality widths from the encoders.
    pub fn new(modalities: Vec<(String, EncoderConfig)>, mut fusion: FusionConfig) -> Result<Self> {
        fusion.modality_dims = modalities
            .iter()
            .map(|(name, e)| (name.clone(), e.output_dim()))
            .collect();
        let config = Self { modalities, fusion };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        for (name, enc) in &self.modalities {
            enc.validate()
                .map_err(|e| Error::Config(format!("modality {name}: {e}")))?;
        }
        let widths: Vec<(String, usize)> = self
            .modalities
            .iter()
            .map(|(n, e)| (n.clone(), e.output_dim()))
            .collect();
        if widths != self.fusion.modality_dims {
            return Err(Error::Config("fusion modality widths do not match the encoders".into()));
        }
        self.fusion.validate()
    }
}

/// Loss, gradients and batch-norm moments of one training batch.
pub struct BatchGradients {
    pub loss: LossValue,
    pub grads: Gradients,
    pub bn_moments: Option<(Vec<f64>, Vec<f64>)>,
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    encoders: Vec<Encoder>,
    head: FusionHead,
}

fn encoder_prefix(name: &str) -> String {
    format!("enc.{name}")
}

impl Model {
    /// Glorot-initialized weights drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, Stream::Init, &[]);
        for (name, enc) in &config.modalities {
            Encoder::register(&mut store, &encoder_prefix(name), enc, &mut rng)?;
        }
        FusionHead::register(&mut store, &config.fusion, &mut rng)?;
        Self::bind(config, store)
    }

    fn bind(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let encoders = config
            .modalities
            .iter()
            .map(|(name, enc)| Encoder::bind(&store, &encoder_prefix(name), enc.clone()))
            .collect::<Result<Vec<_>>>()?;
        let head = FusionHead::bind(&store, config.fusion.clone())?;
        Ok(Self {
            config,
            store,
            encoders,
            head,
        })
    }

    /// Model with weights taken from `params`, which must hold exactly the
    /// entries `config` implies.
    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        model.store.load_values_from(params)?;
        Ok(model)
    }

    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        Self::from_params(config, &checkpoint::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    /// Chooses batch or running statistics for eval-mode batch norm.
    pub fn set_batch_stats_at_inference(&mut self, on: bool) {
        self.config.fusion.batchnorm.use_batch_stats_at_inference = on;
        self.head.config.batchnorm.use_batch_stats_at_inference = on;
    }

    pub fn head(&self) -> &FusionHead {
        &self.head
    }

    pub fn encoders(&self) -> &[Encoder] {
        &self.encoders
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        if sample.windows.len() != self.encoders.len() {
            return Err(Error::Config(format!(
                "model has {} modalities, sample has {}",
                self.encoders.len(),
                sample.windows.len()
            )));
        }
        Ok(())
    }

    /// Window of modality `m` resized to that encoder's sequence length.
    fn window<'a>(&self, sample: &Sample<'a>, m: usize) -> Window<'a> {
        Window {
            steps: self.encoders[m].config.sequence_length,
            ..sample.windows[m]
        }
    }

    /// Concatenated final states of all encoders.
    pub fn encode(&self, store: &ParamStore, sample: &Sample, mode: Mode, seed: u64) -> Result<Vec<f64>> {
        self.check_sample(sample)?;
        let mut out = Vec::with_capacity(self.config.fusion.fused_dim());
        for (m, enc) in self.encoders.iter().enumerate() {
            let mut rng = stream_rng(seed, Stream::EncoderDropout, &[m as u64]);
            out.extend(enc.forward(store, &self.window(sample, m), mode, &mut rng)?);
        }
        Ok(out)
    }

    fn encode_cached(&self, store: &ParamStore, sample: &Sample, seed: u64) -> Result<Vec<EncoderCache>> {
        self.encoders
            .iter()
            .enumerate()
            .map(|(m, enc)| {
                let mut rng = stream_rng(seed, Stream::EncoderDropout, &[m as u64]);
                enc.forward_cached(store, &self.window(sample, m), Mode::Train, &mut rng)
                    .map(|(_, c)| c)
            })
            .collect()
    }

    fn encode_batch(&self, store: &ParamStore, samples: &[Sample], mode: Mode, seeds: &[u64], exec: Execution) -> Result<Vec<f64>> {
        let idx: Vec<usize> = (0..samples.len()).collect();
        let rows = exec
            .map(&idx, |&i| self.encode(store, &samples[i], mode, seeds.get(i).copied().unwrap_or(0)))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(rows.concat())
    }

    fn targets01(&self, samples: &[Sample]) -> Result<Vec<[f64; 2]>> {
        samples
            .iter()
            .map(|s| {
                let t = s.target.ok_or_else(|| {
                    Error::Data(format!("sample {}@{} has no target", s.movie_id, s.t))
                })?;
                Ok([self.config.fusion.to_unit(t[0])?, self.config.fusion.to_unit(t[1])?])
            })
            .collect()
    }

    /// Mean cross-entropy over the batch plus the L2 penalty, evaluated
    /// with `store` in train mode (same dropout masks as [`Self::gradients`]).
    pub fn loss(&self, store: &ParamStore, samples: &[Sample], seeds: &[u64]) -> Result<LossValue> {
        let targets = self.targets01(samples)?;
        let states = self.encode_batch(store, samples, Mode::Train, seeds, Execution::Sequential)?;
        let batch = self
            .head
            .forward_batch(store, &states, samples.len(), Mode::Train, seeds, Execution::Sequential)?;
        let xent: f64 = batch
            .caches
            .iter()
            .zip(&targets)
            .map(|(c, t)| FusionHead::sample_loss(c, t).0)
            .sum();
        Ok(LossValue {
            loss: xent / samples.len() as f64,
            l2_penalty: store.l2_penalty(),
            lambda_l2: self.config.fusion.l2_lambda,
        })
    }

    /// Loss and gradients of one batch. Encoder activations are recomputed
    /// chunk by chunk during the backward pass rather than kept for the
    /// whole batch; chunk gradients are summed in index order.
    pub fn gradients(&self, samples: &[Sample], seeds: &[u64], exec: Execution) -> Result<BatchGradients> {
        let n = samples.len();
        if n == 0 || seeds.len() != n {
            return Err(Error::Contract("batch needs one seed per sample".into()));
        }
        let store = &self.store;
        let targets = self.targets01(samples)?;
        let states = self.encode_batch(store, samples, Mode::Train, seeds, exec)?;
        let batch = self.head.forward_batch(store, &states, n, Mode::Train, seeds, exec)?;
        let scale = 1.0 / n as f64;
        let mut xent = 0.0;
        let mut dp = Vec::with_capacity(n);
        for (c, t) in batch.caches.iter().zip(&targets) {
            let (l, g) = FusionHead::sample_loss(c, t);
            xent += l;
            dp.push([g[0] * scale, g[1] * scale]);
        }
        let (mut grads, dx) = self.head.backward_batch(store, &batch, &dp, exec);
        let f = self.config.fusion.fused_dim();
        let idx: Vec<usize> = (0..n).collect();
        let chunks = exec.map_chunks(&idx, GRAD_CHUNK, |_, chunk| -> Result<Gradients> {
            let mut g = store.zero_gradients();
            for &i in chunk {
                let caches = self.encode_cached(store, &samples[i], seeds[i])?;
                let mut off = i * f;
                for (enc, cache) in self.encoders.iter().zip(&caches) {
                    let h = enc.config.output_dim();
                    enc.backward(store, cache, &dx[off..off + h], &mut g);
                    off += h;
                }
            }
            Ok(g)
        });
        for g in chunks {
            grads.add_assign(&g?);
        }
        let lambda = self.config.fusion.l2_lambda;
        store.add_l2_grad(lambda, &mut grads);
        let loss = LossValue {
            loss: xent * scale,
            l2_penalty: store.l2_penalty(),
            lambda_l2: lambda,
        };
        if !loss.total().is_finite() || !grads.all_finite() {
            return Err(Error::Numeric("non-finite loss or gradient".into()));
        }
        Ok(BatchGradients {
            loss,
            grads,
            bn_moments: batch.bn_moments,
        })
    }

    /// Folds train-mode batch moments into the running estimates.
    pub fn update_batchnorm(&mut self, moments: &(Vec<f64>, Vec<f64>)) {
        if let Some((mean_id, var_id)) = self.head.running_stat_ids() {
            let momentum = self.config.fusion.batchnorm.momentum;
            let mut mean = self.store.values(mean_id).to_vec();
            let mut var = self.store.values(var_id).to_vec();
            update_running_stats(&mut mean, &mut var, &moments.0, &moments.1, momentum);
            self.store.values_mut(mean_id).copy_from_slice(&mean);
            self.store.values_mut(var_id).copy_from_slice(&var);
        }
    }

    /// Replaces the batch-norm running statistics with the exact population
    /// mean and biased variance of the fused states over `samples`, weights
    /// held fixed. Chunks are merged in index order, so the result does not
    /// depend on `exec`.
    pub fn recalibrate_batchnorm(
        &mut self,
        samples: &[Sample],
        batch_size: usize,
        exec: Execution,
    ) -> Result<()> {
        let Some((mean_id, var_id)) = self.head.running_stat_ids() else {
            return Ok(());
        };
        if samples.is_empty() {
            return Err(Error::Data("batch-norm recalibration needs at least one sample".into()));
        }
        let f = self.config.fusion.fused_dim();
        let mut count = 0.0;
        let mut mean = vec![0.0; f];
        let mut m2 = vec![0.0; f];
        for range in batch_ranges(samples.len(), batch_size.max(1)) {
            let batch = &samples[range];
            let states = self.encode_batch(&self.store, batch, Mode::Eval, &[], exec)?;
            let n = batch.len() as f64;
            for j in 0..f {
                let col = states.iter().skip(j).step_by(f);
                let bm = col.clone().sum::<f64>() / n;
                let bm2: f64 = col.map(|v| (v - bm) * (v - bm)).sum();
                let total = count + n;
                let delta = bm - mean[j];
                mean[j] += delta * n / total;
                m2[j] += bm2 + delta * delta * count * n / total;
            }
            count += n;
        }
        let var: Vec<f64> = m2.iter().map(|v| v / count).collect();
        self.store.values_mut(mean_id).copy_from_slice(&mean);
        self.store.values_mut(var_id).copy_from_slice(&var);
        Ok(())
    }

    /// Eval-mode predictions in annotation units, in batches of
    /// `batch_size` (batch-norm statistics depend on the batching).
    pub fn predict(&self, samples: &[Sample], batch_size: usize, exec: Execution) -> Result<Vec<[f64; 2]>> {
        let mut out = Vec::with_capacity(samples.len());
        for range in batch_ranges(samples.len(), batch_size) {
            let part = &samples[range];
            let states = self.encode_batch(&self.store, part, Mode::Eval, &[], exec)?;
            let batch = self
                .head
                .forward_batch(&self.store, &states, part.len(), Mode::Eval, &[], exec)?;
            out.extend(batch.caches.iter().map(|c| {
                let p = self.head.prediction(c);
                [p.valence, p.arousal]
            }));
        }
        Ok(out)
    }

    /// Predicts every second of every movie. Samples of all movies are
    /// batched together in the given order.
    pub fn predict_movies(&self, movies: &[Movie], batch_size: usize, exec: Execution) -> Result<TrackSet> {
        let steps = self.max_sequence_length();
        let mut samples = Vec::new();
        for movie in movies {
            samples.extend(window_sequences(&movie.feature_refs(), None, steps, Purpose::Infer)?);
        }
        let preds = self.predict(&samples, batch_size, exec)?;
        let mut set = TrackSet::new();
        for (s, p) in samples.iter().zip(preds) {
            set.entry(s.movie_id.to_string())
                .or_insert_with(|| EmotionTrack::new(s.movie_id))
                .push(p[0], p[1]);
        }
        Ok(set)
    }

    pub fn max_sequence_length(&self) -> usize {
        self.encoders
            .iter()
            .map(|e| e.config.sequence_length)
            .max()
            .unwrap_or(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::FeatureTrack;
    use crate::fusion::bernoulli_xent;
    use crate::numerics::{grad_check_report, DEFAULT_EPS};
    use crate::seqmodel::CellKind;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn movie(id: &str, len: usize, dims: &[usize], seed: u64) -> Movie {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let features = dims
            .iter()
            .enumerate()
            .map(|(m, &d)| FeatureTrack {
                movie_id: id.into(),
                modality: format!("m{m}"),
                dim: d,
                data: (0..len * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        let mut a = EmotionTrack::new(id);
        for _ in 0..len {
            a.push(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9));
        }
        Movie {
            id: id.into(),
            features,
            annotations: Some(a),
        }
    }

    fn config(cell: CellKind, t: usize, d: usize, h: usize) -> ModelConfig {
        let enc = |_| EncoderConfig {
            cell,
            hidden_units: vec![h],
            sequence_length: t,
            dropout_rate: 0.0,
            input_dim: d,
        };
        ModelConfig::new(vec![("a".into(), enc(0)), ("b".into(), enc(1))], FusionConfig::new(vec![])).unwrap()
    }

    fn grad_check_model(mut cfg: ModelConfig, samples_n: usize) -> f64 {
        cfg.fusion.l2_lambda = 1e-3;
        let t = cfg.modalities[0].1.sequence_length;
        let d = cfg.modalities[0].1.input_dim;
        let mut model = Model::init(cfg, 5).unwrap();
        let mv = movie("x", 12, &[d, d], 6);
        let samples = window_sequences(&mv.feature_refs(), mv.annotations.as_ref(), t, Purpose::Train).unwrap();
        let samples = &samples[samples.len() - samples_n..];
        let seeds: Vec<u64> = (0..samples_n as u64).map(|i| 100 + i).collect();
        let bg = model.gradients(samples, &seeds, Execution::Sequential).unwrap();
        let direct = model.loss(&model.store, samples, &seeds).unwrap();
        assert!((bg.loss.total() - direct.total()).abs() < 1e-12);
        model.store.set_grads(&bg.grads).unwrap();
        let r = grad_check_report(|ps| Ok(model.loss(ps, samples, &seeds)?.total()), &model.store, DEFAULT_EPS).unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
        r.max_relative_error
    }

    #[test]
    fn end_to_end_gradient_check() {
        grad_check_model(config(CellKind::Gru, 4, 4, 3), 3);
        grad_check_model(config(CellKind::Lstm, 5, 3, 3), 2);
    }

    #[test]
    fn gradient_check_with_regularizers() {
        let mut cfg = config(CellKind::Gru, 5, 4, 3);
        cfg.fusion.enable_batchnorm = true;
        cfg.fusion.enable_dropout = true;
        for (_, e) in &mut cfg.modalities {
            e.dropout_rate = 0.2;
        }
        grad_check_model(cfg, 4);
    }

    #[test]
    fn loss_matches_independent_summation() {
        let mut cfg = config(CellKind::Gru, 3, 2, 3);
        cfg.fusion.l2_lambda = 0.01;
        let model = Model::init(cfg, 1).unwrap();
        let mv = movie("x", 6, &[2, 2], 2);
        let samples = window_sequences(&mv.feature_refs(), mv.annotations.as_ref(), 3, Purpose::Train).unwrap();
        let seeds = vec![0; samples.len()];
        let got = model.loss(&model.store, &samples, &seeds).unwrap();
        let mut sum = 0.0;
        for s in &samples {
            let mut x = Vec::new();
            for (m, enc) in model.encoders().iter().enumerate() {
                let w = Window { steps: 3, ..s.windows[m] };
                x.extend(enc.forward(&model.store, &w, Mode::Eval, &mut SplitMix64::seed_from_u64(0)).unwrap());
            }
            let c = model.head().core_forward(&model.store, &x).unwrap();
            let t = s.target.unwrap();
            for d in 0..2 {
                let p = c.p[d];
                sum += bernoulli_xent(p.ln(), (1.0 - p).ln(), (t[d] + 1.0) / 2.0);
            }
        }
        let mut l2 = 0.0;
        for (name, p) in model.store.iter() {
            if name.ends_with(".w") || name.ends_with(".u") {
                l2 += p.values.iter().map(|v| v * v).sum::<f64>();
            }
        }
        assert!((got.loss - sum / samples.len() as f64).abs() < 1e-12);
        assert!((got.l2_penalty - l2).abs() < 1e-12);
        assert!((got.total() - (sum / samples.len() as f64 + 0.01 * l2)).abs() < 1e-12);
    }

    #[test]
    fn parallel_gradients_are_bitwise_sequential() {
        let mut cfg = config(CellKind::Gru, 4, 3, 4);
        cfg.fusion.enable_batchnorm = true;
        cfg.fusion.enable_dropout = true;
        let model = Model::init(cfg, 3).unwrap();
        let mv = movie("x", 90, &[3, 3], 4);
        let samples = window_sequences(&mv.feature_refs(), mv.annotations.as_ref(), 4, Purpose::Train).unwrap();
        let seeds: Vec<u64> = (0..samples.len() as u64).collect();
        let a = model.gradients(&samples, &seeds, Execution::Sequential).unwrap();
        let b = model.gradients(&samples, &seeds, Execution::Parallel).unwrap();
        assert_eq!(a.loss, b.loss);
        for id in model.store.ids() {
            assert_eq!(a.grads.get(id), b.grads.get(id));
        }
    }

    #[test]
    fn recalibration_gives_population_moments() {
        let mut cfg = config(CellKind::Gru, 4, 3, 4);
        cfg.fusion.enable_batchnorm = true;
        let mut model = Model::init(cfg, 5).unwrap();
        let mv = movie("x", 61, &[3, 3], 6);
        let samples = window_sequences(&mv.feature_refs(), None, 4, Purpose::Infer).unwrap();
        let states = model.encode_batch(&model.store, &samples, Mode::Eval, &[], Execution::Sequential).unwrap();
        let f = model.config.fusion.fused_dim();
        let n = samples.len() as f64;
        let (mean_id, var_id) = model.head.running_stat_ids().unwrap();
        model.recalibrate_batchnorm(&samples, 7, Execution::Parallel).unwrap();
        let mean = model.store.values(mean_id).to_vec();
        let var = model.store.values(var_id).to_vec();
        for j in 0..f {
            let m = states.iter().skip(j).step_by(f).sum::<f64>() / n;
            let v = states.iter().skip(j).step_by(f).map(|x| (x - m).powi(2)).sum::<f64>() / n;
            assert!((mean[j] - m).abs() < 1e-12 && (var[j] - v).abs() < 1e-12);
        }
        model.recalibrate_batchnorm(&samples, 7, Execution::Sequential).unwrap();
        assert_eq!(model.store.values(mean_id), &mean[..]);
        assert_eq!(model.store.values(var_id), &var[..]);
    }

    #[test]
    fn checkpoint_round_trip_predicts_identically() {
        let mut cfg = config(CellKind::Gru, 4, 3, 4);
        cfg.fusion.enable_batchnorm = true;
        let model = Model::init(cfg.clone(), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.txt");
        model.save(&path).unwrap();
        let back = Model::load(cfg.clone(), &path).unwrap();
        let mv = movie("x", 20, &[3, 3], 9);
        let a = model.predict_movies(std::slice::from_ref(&mv), 8, Execution::Sequential).unwrap();
        let b = back.predict_movies(std::slice::from_ref(&mv), 8, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a["x"].len(), 20);
        let mut other = cfg;
        other.modalities[0].1.hidden_units = vec![5];
        let other = ModelConfig::new(other.modalities, other.fusion).unwrap();
        assert!(matches!(Model::load(other, &path), Err(Error::Config(_))));
    }

    #[test]
    fn out_of_range_target_is_data_error() {
        let model = Model::init(config(CellKind::Gru, 2, 2, 2), 0).unwrap();
        let mut mv = movie("x", 3, &[2, 2], 0);
        mv.annotations.as_mut().unwrap().valence[1] = 1.5;
        let samples = window_sequences(&mv.feature_refs(), mv.annotations.as_ref(), 2, Purpose::Train).unwrap();
        assert!(matches!(model.gradients(&samples, &[0, 1, 2], Execution::Sequential), Err(Error::Data(_))));
    }
}
