use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;

use super::manifest::DatasetManifest;
use super::tracks::{write_features, write_track, EmotionTrack, FeatureTrack};
use super::FloatFormat;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Shape of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub movies: usize,
    pub length: usize,
    pub modalities: Vec<(String, usize)>,
    /// Standard deviation of the additive feature noise.
    pub noise: f64,
    pub validation: usize,
    pub annotation_range: (f64, f64),
    /// Lag, in seconds, of the delayed latent copy fed to the features.
    pub lag: usize,
}

impl SynthSpec {
    pub fn new(movies: usize, length: usize, modalities: Vec<(String, usize)>) -> Self {
        Self {
            movies,
            length,
            modalities,
            noise: 0.05,
            validation: 0,
            annotation_range: (-1.0, 1.0),
            lag: 5,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.movies == 0 || self.length == 0 {
            return Err(Error::Config("synthetic dataset needs at least one movie and one second".into()));
        }
        if self.modalities.is_empty() || self.modalities.iter().any(|m| m.1 == 0) {
            return Err(Error::Config("every modality needs dimension ≥ 1".into()));
        }
        if self.validation >= self.movies {
            return Err(Error::Config(format!(
                "{} validation movies leave none of {} for training",
                self.validation, self.movies
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be a finite value ≥ 0", self.noise)));
        }
        let (lo, hi) = self.annotation_range;
        if !(lo < hi) {
            return Err(Error::Config("annotation range needs lo < hi".into()));
        }
        Ok(())
    }
}

/// Latent (valence, arousal) trajectory: three slow sinusoids per
/// dimension around a random offset, clipped to the range.
fn latent_track<R: Rng + ?Sized>(id: &str, length: usize, (lo, hi): (f64, f64), rng: &mut R) -> EmotionTrack {
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let mut dims = [Vec::with_capacity(length), Vec::with_capacity(length)];
    for dim in &mut dims {
        let offset = rng.random_range(-0.3..0.3);
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.2..0.5),
                    rng.random_range(0.004..0.04),
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        for t in 0..length {
            let s: f64 = offset
                + waves
                    .iter()
                    .map(|(amp, freq, phase)| amp * (2.0 * PI * freq * t as f64 + phase).sin())
                    .sum::<f64>();
            dim.push((mid + half * s).clamp(lo, hi));
        }
    }
    let [valence, arousal] = dims;
    EmotionTrack {
        movie_id: id.to_string(),
        valence,
        arousal,
    }
}

/// Writes `manifest.txt`, `features/<modality>/<movie>.csv` and
/// `annotations/<movie>.csv` under `out`. Identical inputs give
/// byte-identical files.
pub fn synth_generate(spec: &SynthSpec, out: &Path, seed: u64) -> Result<DatasetManifest> {
    spec.validate()?;
    let ids: Vec<String> = (0..spec.movies).map(|i| format!("m{i:03}")).collect();
    // Per-modality lift of [z(t); z(t − lag)] to D features.
    let lifts: Vec<(Vec<f64>, Vec<f64>)> = spec
        .modalities
        .iter()
        .enumerate()
        .map(|(m, (_, d))| {
            let mut rng = stream_rng(seed, Stream::Synth, &[0, m as u64]);
            let w: Vec<f64> = (0..d * 4).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect();
            let b: Vec<f64> = (0..*d).map(|_| rng.random_range(-0.5..0.5)).collect();
            (w, b)
        })
        .collect();
    for (i, id) in ids.iter().enumerate() {
        let mut rng = stream_rng(seed, Stream::Synth, &[1, i as u64]);
        let latent = latent_track(id, spec.length, spec.annotation_range, &mut rng);
        for (m, (name, d)) in spec.modalities.iter().enumerate() {
            let (w, b) = &lifts[m];
            let mut noise_rng = stream_rng(seed, Stream::Synth, &[2, i as u64, m as u64]);
            let mut data = Vec::with_capacity(spec.length * d);
            for t in 0..spec.length {
                let lagged = t.saturating_sub(spec.lag);
                let z = [latent.valence[t], latent.arousal[t], latent.valence[lagged], latent.arousal[lagged]];
                for k in 0..*d {
                    let clean = b[k] + (0..4).map(|j| w[k * 4 + j] * z[j]).sum::<f64>();
                    let eps: f64 = noise_rng.sample(StandardNormal);
                    data.push(clean + spec.noise * eps);
                }
            }
            let track = FeatureTrack {
                movie_id: id.clone(),
                modality: name.clone(),
                dim: *d,
                data,
            };
            write_features(
                &out.join("features").join(name).join(format!("{id}.csv")),
                &track,
                FloatFormat::Decimal,
            )?;
        }
        write_track(&out.join("annotations").join(format!("{id}.csv")), &latent, FloatFormat::Decimal)?;
    }
    let mut shuffled = ids.clone();
    shuffled.shuffle(&mut stream_rng(seed, Stream::Synth, &[3]));
    let mut validation: Vec<String> = shuffled[..spec.validation].to_vec();
    validation.sort();
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        modalities: spec.modalities.clone(),
        movies: ids.iter().map(|id| (id.clone(), spec.length)).collect(),
        annotation_range: spec.annotation_range,
        validation: Some(validation),
        train_fraction: 1.0,
    };
    manifest.save(&out.join("manifest.txt"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{load_features, load_track};
    use nalgebra::{DMatrix, DVector};
    use std::fs;

    fn spec(noise: f64) -> SynthSpec {
        let mut s = SynthSpec::new(3, 120, vec![("image".into(), 8), ("audio".into(), 5)]);
        s.noise = noise;
        s.validation = 1;
        s
    }

    fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(p) = stack.pop() {
            for e in fs::read_dir(&p).unwrap() {
                let path = e.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(dir).unwrap().display().to_string();
                    out.push((rel, fs::read(&path).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_generate(&spec(0.05), a.path(), 42).unwrap();
        synth_generate(&spec(0.05), b.path(), 42).unwrap();
        let (fa, fb) = (read_all(a.path()), read_all(b.path()));
        assert_eq!(fa.len(), 1 + 3 * 3);
        assert_eq!(fa, fb);
        let c = tempfile::tempdir().unwrap();
        synth_generate(&spec(0.05), c.path(), 43).unwrap();
        assert_ne!(read_all(c.path()), fa);
    }

    #[test]
    fn annotations_inside_range() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(0.1);
        s.annotation_range = (0.0, 5.0);
        let m = synth_generate(&s, dir.path(), 7).unwrap();
        for id in m.movie_ids() {
            let t = load_track(&m.annotation_path(&id)).unwrap();
            assert_eq!(t.len(), 120);
            t.check_range(0.0, 5.0).unwrap();
        }
        let reread = DatasetManifest::load(&dir.path().join("manifest.txt")).unwrap();
        assert_eq!(reread, m);
    }

    #[test]
    fn noiseless_features_linearly_recover_latent() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_generate(&spec(0.0), dir.path(), 3).unwrap();
        let id = &m.movies[0].0;
        let f = load_features(&m.feature_path("image", id)).unwrap();
        let a = load_track(&m.annotation_path(id)).unwrap();
        let n = f.len();
        let x = DMatrix::from_fn(n, f.dim + 1, |r, c| if c == f.dim { 1.0 } else { f.row(r)[c] });
        let svd = x.clone().svd(true, true);
        for y in [&a.valence, &a.arousal] {
            let y = DVector::from_column_slice(y);
            let beta = svd.solve(&y, 1e-12).unwrap();
            let resid = &y - &x * beta;
            let mean = y.mean();
            let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
            let r2 = 1.0 - resid.norm_squared() / tss;
            assert!(r2 > 0.99, "R² = {r2}");
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(0.0);
        s.validation = 3;
        assert!(matches!(synth_generate(&s, dir.path(), 0), Err(Error::Config(_))));
        let mut s = spec(0.0);
        s.modalities[0].1 = 0;
        assert!(synth_generate(&s, dir.path(), 0).is_err());
    }
}
