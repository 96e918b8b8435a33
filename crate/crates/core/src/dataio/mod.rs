//! Feature/annotation files, sequence windows, dataset splits and the
//! synthetic dataset generator.

mod manifest;
mod synth;
mod tracks;
mod window;

pub use manifest::{load_movies, split_dataset, DatasetManifest, DatasetSplit, Movie, DEFAULT_VALIDATION};
pub use synth::{synth_generate, SynthSpec};
pub use tracks::{
    load_features, load_track, load_track_dir, write_features, write_track, write_track_dir, AnnotationTrack,
    EmotionTrack, FeatureTrack, PredictionTrack, TrackSet,
};
pub use window::{batch_ranges, window_sequences, Purpose, Sample, Window, DEFAULT_BATCH_SIZE};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::hexfloat::{format_hex, parse_hex};

/// Float spelling for written CSV files. Readers accept both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FloatFormat {
    /// Shortest decimal that round-trips.
    #[default]
    Decimal,
    /// C99 hexadecimal, bit-exact by construction.
    Hex,
}

impl FloatFormat {
    pub(crate) fn write(self, x: f64) -> String {
        match self {
            FloatFormat::Decimal => x.to_string(),
            FloatFormat::Hex => format_hex(x),
        }
    }
}

pub(crate) fn parse_float(field: &str, path: &Path, line: usize) -> Result<f64> {
    let s = field.trim();
    let parsed = if s.contains("0x") || s.contains("0X") {
        parse_hex(s).ok()
    } else {
        s.parse::<f64>().ok()
    };
    let v = parsed.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("invalid number {s:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Data(format!("{}:{line}: non-finite value {s:?}", path.display())));
    }
    Ok(v)
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
