use std::ops::Range;

use super::tracks::{EmotionTrack, FeatureTrack};
use crate::error::{Error, Result};
use crate::seqmodel::Sequence;

pub const DEFAULT_BATCH_SIZE: usize = 512;

/// The `steps` seconds ending at `end`, with seconds before zero replaced
/// by row 0.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub track: &'a FeatureTrack,
    pub end: usize,
    pub steps: usize,
}

impl Window<'_> {
    /// Track row index backing window step `k`.
    pub fn source_row(&self, k: usize) -> usize {
        (self.end + 1 + k).saturating_sub(self.steps)
    }
}

impl Sequence for Window<'_> {
    fn steps(&self) -> usize {
        self.steps
    }

    fn dim(&self) -> usize {
        self.track.dim
    }

    fn row(&self, k: usize) -> &[f64] {
        self.track.row(self.source_row(k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Train,
    Infer,
}

/// One sequence-to-one example: a window per modality ending at second `t`.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub movie_id: &'a str,
    pub t: usize,
    pub windows: Vec<Window<'a>>,
    /// (valence, arousal) at `t` for training samples.
    pub target: Option<[f64; 2]>,
}

/// One window per second of a movie.
pub fn window_sequences<'a>(
    tracks: &[&'a FeatureTrack],
    annotations: Option<&'a EmotionTrack>,
    steps: usize,
    purpose: Purpose,
) -> Result<Vec<Sample<'a>>> {
    if steps == 0 {
        return Err(Error::Domain("sequence length must be at least 1".into()));
    }
    let first = tracks
        .first()
        .ok_or_else(|| Error::Config("at least one modality is required".into()))?;
    let len = first.len();
    if len == 0 {
        return Err(Error::EmptyMovie(first.movie_id.clone()));
    }
    for t in tracks {
        if t.len() != len || t.movie_id != first.movie_id {
            return Err(Error::Data(format!(
                "modality {} of movie {} has {} seconds, expected {len} for movie {}",
                t.modality,
                t.movie_id,
                t.len(),
                first.movie_id
            )));
        }
    }
    let annotations = match (purpose, annotations) {
        (Purpose::Train, None) => {
            return Err(Error::Data(format!("movie {} has no annotations to train on", first.movie_id)));
        }
        (Purpose::Train, Some(a)) => {
            if a.len() != len {
                return Err(Error::Data(format!(
                    "movie {}: {} annotated seconds but {len} feature seconds",
                    first.movie_id,
                    a.len()
                )));
            }
            Some(a)
        }
        (Purpose::Infer, _) => None,
    };
    Ok((0..len)
        .map(|t| Sample {
            movie_id: &first.movie_id,
            t,
            windows: tracks.iter().map(|track| Window { track, end: t, steps }).collect(),
            target: annotations.map(|a| [a.valence[t], a.arousal[t]]),
        })
        .collect())
}

/// Consecutive index ranges of at most `batch_size`; the last may be short.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<Range<usize>> {
    let size = batch_size.max(1);
    (0..n.div_ceil(size)).map(|k| k * size..((k + 1) * size).min(n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(id: &str, len: usize, dim: usize) -> FeatureTrack {
        FeatureTrack {
            movie_id: id.into(),
            modality: "m".into(),
            dim,
            data: (0..len * dim).map(|i| i as f64).collect(),
        }
    }

    #[test]
    fn single_step_windows_have_no_padding() {
        let f = track("a", 7, 2);
        let s = window_sequences(&[&f], None, 1, Purpose::Infer).unwrap();
        assert_eq!(s.len(), 7);
        for (t, sample) in s.iter().enumerate() {
            assert_eq!(sample.windows[0].row(0), f.row(t));
            assert!(sample.target.is_none());
        }
    }

    #[test]
    fn first_window_repeats_row_zero() {
        let f = track("a", 20, 3);
        let s = window_sequences(&[&f], None, 10, Purpose::Infer).unwrap();
        let w = &s[0].windows[0];
        assert_eq!(w.steps(), 10);
        assert!((0..10).all(|k| w.row(k) == f.row(0)));
    }

    #[test]
    fn last_window_index_arithmetic() {
        let f = track("a", 100, 1);
        let s = window_sequences(&[&f], None, 60, Purpose::Infer).unwrap();
        assert_eq!(s.len(), 100);
        let w = &s[99].windows[0];
        let rows: Vec<f64> = (0..60).map(|k| w.row(k)[0]).collect();
        assert_eq!(rows, (40..100).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn train_samples_carry_targets() {
        let f = track("a", 3, 1);
        let mut a = EmotionTrack::new("a");
        for t in 0..3 {
            a.push(t as f64 / 10.0, -(t as f64) / 10.0);
        }
        let s = window_sequences(&[&f, &f], Some(&a), 2, Purpose::Train).unwrap();
        assert_eq!(s[2].target, Some([0.2, -0.2]));
        assert_eq!(s[2].windows.len(), 2);
        assert!(window_sequences(&[&f], None, 2, Purpose::Train).is_err());
    }

    #[test]
    fn errors() {
        let empty = track("e", 0, 2);
        assert!(matches!(window_sequences(&[&empty], None, 3, Purpose::Infer), Err(Error::EmptyMovie(_))));
        let a = track("a", 5, 2);
        let b = track("a", 6, 2);
        assert!(matches!(window_sequences(&[&a, &b], None, 3, Purpose::Infer), Err(Error::Data(_))));
        assert!(window_sequences(&[&a], None, 0, Purpose::Infer).is_err());
    }

    #[test]
    fn batches_cover_everything() {
        assert_eq!(batch_ranges(0, 512).len(), 0);
        assert_eq!(batch_ranges(1024, 512), vec![0..512, 512..1024]);
        assert_eq!(batch_ranges(1025, 512).last(), Some(&(1024..1025)));
    }
}
