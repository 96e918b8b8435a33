use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{parse_float, read_text, write_text, FloatFormat};
use crate::error::{Error, Result};

/// Per-second feature rows of one movie for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    pub movie_id: String,
    pub modality: String,
    pub dim: usize,
    /// Row-major `len × dim`.
    pub data: Vec<f64>,
}

impl FeatureTrack {
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn from_csv(text: &str, modality: &str, origin: &Path) -> Result<Self> {
        let mut rows = CsvRows::new(text, origin)?;
        let header = rows.header.clone();
        let dim = header.len().saturating_sub(2);
        let expected: Vec<String> = ["movie_id".to_string(), "t".to_string()]
            .into_iter()
            .chain((0..dim).map(|k| format!("f{k}")))
            .collect();
        if dim == 0 || header != expected {
            return Err(rows.error(1, "header must be movie_id,t,f0,...,f{D-1}".into()));
        }
        let mut data = Vec::new();
        while let Some((line, fields)) = rows.next_row(dim + 2)? {
            for f in &fields[2..] {
                data.push(parse_float(f, origin, line)?);
            }
        }
        Ok(Self {
            movie_id: rows.movie_id_or_stem(),
            modality: modality.to_string(),
            dim,
            data,
        })
    }

    pub fn to_csv(&self, format: FloatFormat) -> String {
        let mut out = String::from("movie_id,t");
        for k in 0..self.dim {
            let _ = write!(out, ",f{k}");
        }
        out.push('\n');
        for t in 0..self.len() {
            let _ = write!(out, "{},{t}", self.movie_id);
            for v in self.row(t) {
                out.push(',');
                out.push_str(&format.write(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// Loads `<dir>/<modality>/<movie>.csv`; the modality is the parent
/// directory's name.
pub fn load_features(path: &Path) -> Result<FeatureTrack> {
    let modality = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureTrack::from_csv(&read_text(path)?, &modality, path)
}

pub fn write_features(path: &Path, track: &FeatureTrack, format: FloatFormat) -> Result<()> {
    write_text(path, &track.to_csv(format))
}

/// Per-second (valence, arousal) values of one movie.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmotionTrack {
    pub movie_id: String,
    pub valence: Vec<f64>,
    pub arousal: Vec<f64>,
}

pub type AnnotationTrack = EmotionTrack;
pub type PredictionTrack = EmotionTrack;

/// Tracks keyed (and therefore ordered) by movie id.
pub type TrackSet = BTreeMap<String, EmotionTrack>;

const TRACK_HEADER: [&str; 4] = ["movie_id", "t", "valence", "arousal"];

impl EmotionTrack {
    pub fn new(movie_id: impl Into<String>) -> Self {
        Self {
            movie_id: movie_id.into(),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.valence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valence.is_empty()
    }

    pub fn push(&mut self, valence: f64, arousal: f64) {
        self.valence.push(valence);
        self.arousal.push(arousal);
    }

    pub fn dims(&self) -> [&[f64]; 2] {
        [&self.valence, &self.arousal]
    }

    /// Data error unless every value lies in `[lo, hi]`.
    pub fn check_range(&self, lo: f64, hi: f64) -> Result<()> {
        for (name, vals) in [("valence", &self.valence), ("arousal", &self.arousal)] {
            if let Some((t, v)) = vals.iter().enumerate().find(|(_, v)| !(**v >= lo && **v <= hi)) {
                return Err(Error::Data(format!(
                    "movie {}: {name} {v} at t={t} outside annotation range [{lo}, {hi}]",
                    self.movie_id
                )));
            }
        }
        Ok(())
    }

    pub fn from_csv(text: &str, origin: &Path) -> Result<Self> {
        let mut rows = CsvRows::new(text, origin)?;
        if rows.header != TRACK_HEADER {
            return Err(rows.error(1, format!("header must be {}", TRACK_HEADER.join(","))));
        }
        let mut track = EmotionTrack::default();
        while let Some((line, fields)) = rows.next_row(4)? {
            track.push(parse_float(&fields[2], origin, line)?, parse_float(&fields[3], origin, line)?);
        }
        track.movie_id = rows.movie_id_or_stem();
        Ok(track)
    }

    pub fn to_csv(&self, format: FloatFormat) -> String {
        let mut out = TRACK_HEADER.join(",");
        out.push('\n');
        for t in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{t},{},{}",
                self.movie_id,
                format.write(self.valence[t]),
                format.write(self.arousal[t])
            );
        }
        out
    }
}

pub fn load_track(path: &Path) -> Result<EmotionTrack> {
    EmotionTrack::from_csv(&read_text(path)?, path)
}

pub fn write_track(path: &Path, track: &EmotionTrack, format: FloatFormat) -> Result<()> {
    write_text(path, &track.to_csv(format))
}

/// Loads every `*.csv` track in a directory.
pub fn load_track_dir(dir: &Path) -> Result<TrackSet> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "csv") {
            paths.push(p);
        }
    }
    paths.sort();
    let mut set = TrackSet::new();
    for p in paths {
        let track = load_track(&p)?;
        if set.contains_key(&track.movie_id) {
            return Err(Error::Data(format!("{}: duplicate movie {}", p.display(), track.movie_id)));
        }
        set.insert(track.movie_id.clone(), track);
    }
    Ok(set)
}

/// Writes one `<movie_id>.csv` per track.
pub fn write_track_dir(dir: &Path, tracks: &TrackSet, format: FloatFormat) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (id, track) in tracks {
        write_track(&dir.join(format!("{id}.csv")), track, format)?;
    }
    Ok(())
}

/// Line reader enforcing field counts, a single movie id and consecutive
/// seconds from zero.
struct CsvRows<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    origin: &'a Path,
    header: Vec<String>,
    movie_id: Option<String>,
    next_t: usize,
}

impl<'a> CsvRows<'a> {
    fn new(text: &'a str, origin: &'a Path) -> Result<Self> {
        let text = text.strip_prefix('\u{feff}').unwrap_or(text);
        let mut lines = text.lines().enumerate();
        let header = loop {
            match lines.next() {
                Some((_, l)) if l.trim().is_empty() => continue,
                Some((_, l)) => break l.split(',').map(|s| s.trim().to_string()).collect(),
                None => {
                    return Err(Error::Parse {
                        path: origin.to_path_buf(),
                        line: 1,
                        message: "missing header".into(),
                    })
                }
            }
        };
        Ok(Self {
            lines,
            origin,
            header,
            movie_id: None,
            next_t: 0,
        })
    }

    fn error(&self, line: usize, message: String) -> Error {
        Error::Parse {
            path: self.origin.to_path_buf(),
            line,
            message,
        }
    }

    fn next_row(&mut self, width: usize) -> Result<Option<(usize, Vec<String>)>> {
        loop {
            let Some((idx, raw)) = self.lines.next() else {
                return Ok(None);
            };
            let line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<String> = raw.split(',').map(|s| s.trim().to_string()).collect();
            if fields.len() != width {
                return Err(self.error(line, format!("expected {width} fields, got {}", fields.len())));
            }
            match &self.movie_id {
                None => self.movie_id = Some(fields[0].clone()),
                Some(id) if *id != fields[0] => {
                    return Err(self.error(line, format!("movie id {:?} differs from {id:?}", fields[0])));
                }
                Some(_) => {}
            }
            let t: usize = fields[1]
                .parse()
                .map_err(|_| self.error(line, format!("invalid second {:?}", fields[1])))?;
            if t != self.next_t {
                return Err(Error::Gap {
                    path: self.origin.to_path_buf(),
                    line,
                    expected: self.next_t,
                });
            }
            self.next_t += 1;
            return Ok(Some((line, fields)));
        }
    }

    fn movie_id_or_stem(&self) -> String {
        self.movie_id.clone().unwrap_or_else(|| {
            self.origin
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
    }
}
