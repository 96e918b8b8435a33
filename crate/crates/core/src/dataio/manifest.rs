use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::tracks::{load_features, load_track, EmotionTrack, FeatureTrack};
use super::{read_text, write_text};
use crate::error::{Error, Result};
use crate::parallel::Execution;
use crate::rng::{stream_rng, Stream};

/// Validation movies drawn when the manifest names none.
pub const DEFAULT_VALIDATION: usize = 13;

/// Dataset description read from a `key = value` file. Feature and
/// annotation files live next to it under `features/<modality>/` and
/// `annotations/`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub modalities: Vec<(String, usize)>,
    pub movies: Vec<(String, usize)>,
    pub annotation_range: (f64, f64),
    /// `None` draws [`DEFAULT_VALIDATION`] movies by seeded shuffle; an
    /// empty list means no validation split.
    pub validation: Option<Vec<String>>,
    pub train_fraction: f64,
}

fn config_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}:{line}: {msg}", path.display()))
}

fn parse_pairs(value: &str, path: &Path, line: usize, what: &str) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, n) = item
            .split_once(':')
            .ok_or_else(|| config_err(path, line, format!("{what} entry {item:?} must be name:count")))?;
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| config_err(path, line, format!("{what} entry {item:?} has a bad count")))?;
        let name = name.trim();
        if name.is_empty() || n == 0 {
            return Err(config_err(path, line, format!("{what} entry {item:?} needs a name and a count ≥ 1")));
        }
        out.push((name.to_string(), n));
    }
    Ok(out)
}

impl DatasetManifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut modalities = None;
        let mut movies = None;
        let mut range = (-1.0, 1.0);
        let mut validation = None;
        let mut train_fraction = 1.0;
        let mut seen = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| config_err(path, line, "expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(config_err(path, line, format!("duplicate key {key}")));
            }
            match key {
                "modalities" => modalities = Some(parse_pairs(value, path, line, "modality")?),
                "movies" => movies = Some(parse_pairs(value, path, line, "movie")?),
                "annotation_range" => {
                    let parts: Vec<f64> = value
                        .split(',')
                        .map(|s| s.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| config_err(path, line, "annotation_range must be lo, hi"))?;
                    match parts[..] {
                        [lo, hi] if lo.is_finite() && hi.is_finite() && lo < hi => range = (lo, hi),
                        _ => return Err(config_err(path, line, "annotation_range must be lo, hi with lo < hi")),
                    }
                }
                "validation" => {
                    validation = Some(
                        value
                            .split(',')
                            .map(str::trim)
                            .filter(|s| !s.is_empty())
                            .map(String::from)
                            .collect(),
                    )
                }
                "train_fraction" => {
                    train_fraction = value
                        .parse::<f64>()
                        .ok()
                        .filter(|f| *f > 0.0 && *f <= 1.0)
                        .ok_or_else(|| config_err(path, line, "train_fraction must be in (0, 1]"))?;
                }
                other => return Err(config_err(path, line, format!("unknown key {other}"))),
            }
        }
        let missing = |k: &str| Error::Config(format!("{}: missing required key {k}", path.display()));
        let manifest = Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            modalities: modalities.ok_or_else(|| missing("modalities"))?,
            movies: movies.ok_or_else(|| missing("movies"))?,
            annotation_range: range,
            validation,
            train_fraction,
        };
        manifest.validate(path)?;
        Ok(manifest)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let bad = |m: String| Error::Config(format!("{}: {m}", path.display()));
        if self.modalities.is_empty() {
            return Err(bad("at least one modality is required".into()));
        }
        if self.movies.is_empty() {
            return Err(bad("at least one movie is required".into()));
        }
        let unique = |v: &[(String, usize)]| v.iter().map(|p| &p.0).collect::<BTreeSet<_>>().len() == v.len();
        if !unique(&self.modalities) || !unique(&self.movies) {
            return Err(bad("modality and movie names must be unique".into()));
        }
        if let Some(val) = &self.validation {
            let known: BTreeSet<&str> = self.movies.iter().map(|m| m.0.as_str()).collect();
            if let Some(v) = val.iter().find(|v| !known.contains(v.as_str())) {
                return Err(bad(format!("validation movie {v} is not in the movie list")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }

    pub fn to_text(&self) -> String {
        let pairs = |v: &[(String, usize)]| v.iter().map(|(n, d)| format!("{n}:{d}")).collect::<Vec<_>>().join(", ");
        let mut out = String::new();
        let _ = writeln!(out, "modalities = {}", pairs(&self.modalities));
        let _ = writeln!(out, "movies = {}", pairs(&self.movies));
        let _ = writeln!(out, "annotation_range = {}, {}", self.annotation_range.0, self.annotation_range.1);
        if let Some(v) = &self.validation {
            let _ = writeln!(out, "validation = {}", v.join(", "));
        }
        let _ = writeln!(out, "train_fraction = {}", self.train_fraction);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }

    pub fn movie_ids(&self) -> Vec<String> {
        self.movies.iter().map(|m| m.0.clone()).collect()
    }

    pub fn feature_path(&self, modality: &str, movie: &str) -> PathBuf {
        self.root.join("features").join(modality).join(format!("{movie}.csv"))
    }

    pub fn annotation_path(&self, movie: &str) -> PathBuf {
        self.root.join("annotations").join(format!("{movie}.csv"))
    }
}

/// Movie-level partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// Splits by movie id. A fractional `train_fraction` keeps
/// `round(fraction · n)` training movies (at least one), chosen by a
/// shuffle seeded from `seed`.
pub fn split_dataset(manifest: &DatasetManifest, seed: u64) -> Result<DatasetSplit> {
    let ids = manifest.movie_ids();
    let validation: Vec<String> = match &manifest.validation {
        Some(v) => v.clone(),
        None => {
            if ids.len() <= DEFAULT_VALIDATION {
                return Err(Error::Config(format!(
                    "{} movies cannot supply the default {DEFAULT_VALIDATION} validation movies plus training data; \
                     list them with `validation =`",
                    ids.len()
                )));
            }
            let mut shuffled = ids.clone();
            shuffled.shuffle(&mut stream_rng(seed, Stream::Split, &[0]));
            let mut v = shuffled[..DEFAULT_VALIDATION].to_vec();
            v.sort_by_key(|id| ids.iter().position(|x| x == id));
            v
        }
    };
    let held: BTreeSet<&str> = validation.iter().map(String::as_str).collect();
    let mut train: Vec<String> = ids.iter().filter(|id| !held.contains(id.as_str())).cloned().collect();
    if train.is_empty() {
        return Err(Error::Config("no movies left for training after the validation split".into()));
    }
    if manifest.train_fraction < 1.0 {
        let keep = ((manifest.train_fraction * train.len() as f64).round() as usize).max(1);
        let mut shuffled = train.clone();
        shuffled.shuffle(&mut stream_rng(seed, Stream::Split, &[1]));
        let kept: BTreeSet<String> = shuffled.into_iter().take(keep).collect();
        train.retain(|id| kept.contains(id));
    }
    Ok(DatasetSplit { train, validation })
}

/// Features (in manifest modality order) and optional annotations of one movie.
#[derive(Debug, Clone)]
pub struct Movie {
    pub id: String,
    pub features: Vec<FeatureTrack>,
    pub annotations: Option<EmotionTrack>,
}

impl Movie {
    pub fn len(&self) -> usize {
        self.features.first().map_or(0, FeatureTrack::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_refs(&self) -> Vec<&FeatureTrack> {
        self.features.iter().collect()
    }
}

fn load_movie(manifest: &DatasetManifest, id: &str, with_annotations: bool) -> Result<Movie> {
    let expected_len = manifest
        .movies
        .iter()
        .find(|m| m.0 == id)
        .map(|m| m.1)
        .ok_or_else(|| Error::Config(format!("movie {id} is not in the manifest")))?;
    let mut features = Vec::with_capacity(manifest.modalities.len());
    for (modality, dim) in &manifest.modalities {
        let path = manifest.feature_path(modality, id);
        let mut track = load_features(&path)?;
        track.modality = modality.clone();
        if track.dim != *dim {
            return Err(Error::Data(format!("{}: {} features, manifest says {dim}", path.display(), track.dim)));
        }
        if track.len() != expected_len || track.movie_id != id {
            return Err(Error::Data(format!(
                "{}: movie {} with {} seconds, manifest says {id} with {expected_len}",
                path.display(),
                track.movie_id,
                track.len()
            )));
        }
        features.push(track);
    }
    let annotations = if with_annotations {
        let path = manifest.annotation_path(id);
        let track = load_track(&path)?;
        if track.len() != expected_len || track.movie_id != id {
            return Err(Error::Data(format!(
                "{}: movie {} with {} seconds, manifest says {id} with {expected_len}",
                path.display(),
                track.movie_id,
                track.len()
            )));
        }
        let (lo, hi) = manifest.annotation_range;
        track.check_range(lo, hi)?;
        Some(track)
    } else {
        None
    };
    Ok(Movie {
        id: id.to_string(),
        features,
        annotations,
    })
}

/// Loads the listed movies, one task per movie.
pub fn load_movies(manifest: &DatasetManifest, ids: &[String], with_annotations: bool, exec: Execution) -> Result<Vec<Movie>> {
    exec.map(ids, |id| load_movie(manifest, id, with_annotations))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize, validation: Option<Vec<String>>, fraction: f64) -> DatasetManifest {
        DatasetManifest {
            root: PathBuf::new(),
            modalities: vec![("a".into(), 2)],
            movies: (0..n).map(|i| (format!("m{i:02}"), 10)).collect(),
            annotation_range: (-1.0, 1.0),
            validation,
            train_fraction: fraction,
        }
    }

    #[test]
    fn parse_round_trip() {
        let text = "# toy\nmodalities = image:8, audio:4\nmovies = a:10,b:12 # two\nannotation_range = -2, 2\nvalidation = b\ntrain_fraction = 0.5\n";
        let m = DatasetManifest::parse(text, Path::new("/d/manifest.txt")).unwrap();
        assert_eq!(m.root, PathBuf::from("/d"));
        assert_eq!(m.modalities, vec![("image".into(), 8), ("audio".into(), 4)]);
        assert_eq!(m.movies[1], ("b".into(), 12));
        assert_eq!(m.annotation_range, (-2.0, 2.0));
        assert_eq!(m.validation, Some(vec!["b".into()]));
        let again = DatasetManifest::parse(&m.to_text(), Path::new("/d/manifest.txt")).unwrap();
        assert_eq!(again, m);
        assert_eq!(m.feature_path("audio", "a"), PathBuf::from("/d/features/audio/a.csv"));
    }

    #[test]
    fn parse_errors() {
        let p = Path::new("m.txt");
        for text in [
            "movies = a:1\n",
            "modalities = x:1\n",
            "modalities = x:1\nmovies = a:1\nbogus = 3\n",
            "modalities = x:0\nmovies = a:1\n",
            "modalities = x:1\nmovies = a:1\nvalidation = b\n",
            "modalities = x:1\nmovies = a:1\ntrain_fraction = 0\n",
            "modalities = x:1\nmovies = a:1\nannotation_range = 1, -1\n",
            "modalities = x:1\nmovies = a:1, a:2\n",
        ] {
            assert!(matches!(DatasetManifest::parse(text, p), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn explicit_validation_split() {
        let m = manifest(30, Some((0..13).map(|i| format!("m{i:02}")).collect()), 1.0);
        let s = split_dataset(&m, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len()), (17, 13));
        assert!(s.train.iter().all(|t| !s.validation.contains(t)));
    }

    #[test]
    fn default_validation_is_seeded() {
        let m = manifest(30, None, 1.0);
        let a = split_dataset(&m, 5).unwrap();
        assert_eq!(a.validation.len(), DEFAULT_VALIDATION);
        assert_eq!(a, split_dataset(&m, 5).unwrap());
        assert_ne!(a, split_dataset(&m, 6).unwrap());
        assert!(matches!(split_dataset(&manifest(13, None, 1.0), 0), Err(Error::Config(_))));
    }

    #[test]
    fn train_fraction_drops_whole_movies() {
        let m = manifest(12, Some(vec!["m00".into(), "m01".into()]), 0.7);
        let a = split_dataset(&m, 9).unwrap();
        assert_eq!(a.train.len(), 7);
        assert_eq!(a, split_dataset(&m, 9).unwrap());
        let none = manifest(3, Some(vec![]), 1.0);
        assert_eq!(split_dataset(&none, 0).unwrap().train.len(), 3);
    }
}
