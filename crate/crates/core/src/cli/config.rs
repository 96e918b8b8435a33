use std::collections::btree_map::{self, BTreeMap};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataio::{read_text, DatasetManifest, DEFAULT_BATCH_SIZE};
use crate::error::{Error, Result};
use crate::evalmetrics::Aggregation;
use crate::fusion::{Cg2Position, FusionConfig};
use crate::model::{ModelConfig, TrainConfig};
use crate::numerics::AdamConfig;
use crate::seqmodel::{CellKind, EncoderConfig};
use crate::smoothing::{SmootherKind, SmootherSpec};

/// Sequence lengths explored in the reference setup.
pub const USUAL_SEQUENCE_LENGTHS: [usize; 3] = [10, 30, 60];

/// Epoch count used by the preset profiles when `epochs` is absent.
pub const PRESET_EPOCHS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    /// No dropout, no batch normalization.
    Run1,
    /// Dropout and batch normalization, 70% of the training movies.
    Run2,
    /// Dropout and batch normalization.
    Run3,
    /// Run 3 with seed + 1 and 1.5× the epochs.
    Run4,
    #[default]
    Custom,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "run1" => Ok(Profile::Run1),
            "run2" => Ok(Profile::Run2),
            "run3" => Ok(Profile::Run3),
            "run4" => Ok(Profile::Run4),
            "custom" => Ok(Profile::Custom),
            _ => Err(Error::Config(format!(
                "profile {s:?} invalid (expected run1, run2, run3, run4 or custom)"
            ))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Run1 => "run1",
            Profile::Run2 => "run2",
            Profile::Run3 => "run3",
            Profile::Run4 => "run4",
            Profile::Custom => "custom",
        })
    }
}

/// Encoder settings for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSettings {
    pub cell: CellKind,
    pub hidden_units: Vec<usize>,
    pub sequence_length: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self {
            cell: CellKind::Gru,
            hidden_units: vec![128],
            sequence_length: 60,
            dropout_rate: 0.0,
        }
    }
}

/// Fully resolved run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub profile: Profile,
    pub out: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub encoder: EncoderSettings,
    pub modality_encoders: BTreeMap<String, EncoderSettings>,
    /// Modality widths and output range are filled from the manifest.
    pub fusion: FusionConfig,
    pub train_fraction: Option<f64>,
    pub smoother: SmootherSpec,
    pub aggregation: Aggregation,
    pub early_stopping_patience: Option<usize>,
    pub warnings: Vec<String>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

const GLOBAL_KEYS: &[&str] = &[
    "manifest",
    "profile",
    "out",
    "epochs",
    "batch_size",
    "seed",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
    "num_experts",
    "l2_lambda",
    "enable_dropout",
    "dropout_rate",
    "enable_batchnorm",
    "bn_momentum",
    "bn_epsilon",
    "bn_batch_stats_at_inference",
    "cg2_position",
    "train_fraction",
    "smoother",
    "butter_order",
    "butter_wn",
    "ma_weights",
    "aggregation",
    "early_stopping_patience",
];

const ENCODER_KEYS: &[&str] = &["cell", "hidden_units", "num_layers", "sequence_length", "encoder_dropout_rate"];

struct Entry {
    line: usize,
    value: String,
}

struct Raw<'a> {
    path: &'a Path,
    entries: BTreeMap<String, Entry>,
}

impl Raw<'_> {
    fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.get(key)
    }

    fn err(&self, key: &str, msg: impl fmt::Display) -> Error {
        match self.get(key) {
            Some(e) => Error::Config(format!("{}:{}: {key}: {msg}", self.path.display(), e.line)),
            None => Error::Config(format!("{}: {key}: {msg}", self.path.display())),
        }
    }

    fn parse<T: FromStr>(&self, key: &str, expect: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse::<T>()
                .map(Some)
                .map_err(|_| self.err(key, format!("invalid value {:?}, expected {expect}", e.value))),
        }
    }

    fn ranged<T>(&self, key: &str, expect: &str, ok: impl Fn(&T) -> bool) -> Result<Option<T>>
    where
        T: FromStr,
    {
        match self.parse::<T>(key, expect)? {
            Some(v) if !ok(&v) => Err(self.err(key, format!("{:?} out of range, expected {expect}", self.get(key).unwrap().value))),
            other => Ok(other),
        }
    }

    fn flag(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key).map(|e| e.value.to_ascii_lowercase()) {
            None => Ok(None),
            Some(v) if v == "true" || v == "yes" || v == "1" => Ok(Some(true)),
            Some(v) if v == "false" || v == "no" || v == "0" => Ok(Some(false)),
            Some(v) => Err(self.err(key, format!("invalid value {v:?}, expected true or false"))),
        }
    }

    fn list<T: FromStr>(&self, key: &str, expect: &str) -> Result<Option<Vec<T>>> {
        match self.get(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .split(',')
                .map(|s| s.trim().parse::<T>())
                .collect::<std::result::Result<Vec<T>, _>>()
                .map(Some)
                .map_err(|_| self.err(key, format!("invalid list {:?}, expected {expect}", e.value))),
        }
    }

    fn encoder(&self, prefix: &str, base: &EncoderSettings) -> Result<EncoderSettings> {
        let k = |s: &str| format!("{prefix}{s}");
        let mut out = base.clone();
        if let Some(e) = self.get(&k("cell")) {
            out.cell = e.value.parse().map_err(|err| self.err(&k("cell"), err))?;
        }
        let units: Option<Vec<usize>> = self.list(&k("hidden_units"), "comma-separated unit counts ≥ 1")?;
        if units.as_ref().is_some_and(|u| u.contains(&0)) {
            return Err(self.err(&k("hidden_units"), "unit counts must be ≥ 1"));
        }
        let layers: Option<usize> = self.ranged(&k("num_layers"), "an integer ≥ 1", |n| *n >= 1)?;
        match (units, layers) {
            (Some(u), Some(n)) if u.len() == 1 => out.hidden_units = vec![u[0]; n],
            (Some(u), Some(n)) if u.len() != n => {
                return Err(self.err(&k("num_layers"), format!("{n} layers but {} hidden_units entries", u.len())));
            }
            (Some(u), _) => out.hidden_units = u,
            (None, Some(n)) => out.hidden_units = vec![out.hidden_units[0]; n],
            (None, None) => {}
        }
        if let Some(t) = self.ranged(&k("sequence_length"), "an integer ≥ 1", |t: &usize| *t >= 1)? {
            out.sequence_length = t;
        }
        if let Some(r) = self.ranged(&k("encoder_dropout_rate"), "a rate in [0, 1)", |r: &f64| (0.0..1.0).contains(r))? {
            out.dropout_rate = r;
        }
        Ok(out)
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn read_entries<'a>(text: &str, path: &'a Path) -> Result<Raw<'a>> {
    let mut entries = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{line}: expected key = value", path.display())))?;
        let key = key.trim().to_string();
        let known = GLOBAL_KEYS.contains(&key.as_str())
            || ENCODER_KEYS.contains(&key.as_str())
            || key
                .strip_prefix("modality.")
                .and_then(|r| r.split_once('.'))
                .is_some_and(|(name, k)| !name.is_empty() && ENCODER_KEYS.contains(&k));
        if !known {
            return Err(Error::Config(format!("{}:{line}: unknown key {key}", path.display())));
        }
        let entry = Entry {
            line,
            value: value.trim().to_string(),
        };
        if entries.insert(key.clone(), entry).is_some() {
            return Err(Error::Config(format!("{}:{line}: duplicate key {key}", path.display())));
        }
    }
    Ok(Raw { path, entries })
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path, overrides: &Overrides) -> Result<Self> {
        let raw = read_entries(text, path)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = raw
            .get("manifest")
            .map(|e| absolute(&base_dir.join(&e.value)))
            .ok_or_else(|| raw.err("manifest", "missing required key"))?;
        let profile = match overrides.profile {
            Some(p) => p,
            None => raw.parse::<Profile>("profile", "run1, run2, run3, run4 or custom")?.unwrap_or_default(),
        };
        let out = overrides
            .out
            .clone()
            .or_else(|| raw.get("out").map(|e| absolute(&base_dir.join(&e.value))));

        let epochs = match raw.ranged::<usize>("epochs", "an integer ≥ 1", |e| *e >= 1)? {
            Some(e) => e,
            None if profile == Profile::Custom => return Err(raw.err("epochs", "missing required key")),
            None => PRESET_EPOCHS,
        };
        let batch_size = raw
            .ranged::<usize>("batch_size", "an integer ≥ 1", |b| *b >= 1)?
            .unwrap_or(DEFAULT_BATCH_SIZE);
        let seed = match overrides.seed {
            Some(s) => s,
            None => raw.parse::<u64>("seed", "an unsigned integer")?.unwrap_or(0),
        };

        let mut adam = AdamConfig::default();
        if let Some(v) = raw.ranged("learning_rate", "a value > 0", |v: &f64| *v > 0.0 && v.is_finite())? {
            adam.lr = v;
        }
        if let Some(v) = raw.ranged("adam_beta1", "a value in [0, 1)", |v: &f64| (0.0..1.0).contains(v))? {
            adam.beta1 = v;
        }
        if let Some(v) = raw.ranged("adam_beta2", "a value in [0, 1)", |v: &f64| (0.0..1.0).contains(v))? {
            adam.beta2 = v;
        }
        if let Some(v) = raw.ranged("adam_epsilon", "a value > 0", |v: &f64| *v > 0.0 && v.is_finite())? {
            adam.epsilon = v;
        }

        let encoder = raw.encoder("", &EncoderSettings::default())?;
        let mut modality_encoders = BTreeMap::new();
        let names: Vec<String> = raw
            .entries
            .keys()
            .filter_map(|k| k.strip_prefix("modality.").and_then(|r| r.split_once('.')).map(|(n, _)| n.to_string()))
            .collect();
        for name in names {
            if let btree_map::Entry::Vacant(slot) = modality_encoders.entry(name) {
                let settings = raw.encoder(&format!("modality.{}.", slot.key()), &encoder)?;
                slot.insert(settings);
            }
        }

        let mut fusion = FusionConfig::new(Vec::new());
        if let Some(e) = raw.ranged("num_experts", "an integer ≥ 1", |e: &usize| *e >= 1)? {
            fusion.num_experts = e;
        }
        if let Some(v) = raw.ranged("l2_lambda", "a value ≥ 0", |v: &f64| *v >= 0.0 && v.is_finite())? {
            fusion.l2_lambda = v;
        }
        if let Some(v) = raw.ranged("dropout_rate", "a rate in [0, 1)", |v: &f64| (0.0..1.0).contains(v))? {
            fusion.dropout_rate = v;
        }
        if let Some(v) = raw.ranged("bn_momentum", "a value in [0, 1)", |v: &f64| (0.0..1.0).contains(v))? {
            fusion.batchnorm.momentum = v;
        }
        if let Some(v) = raw.ranged("bn_epsilon", "a value > 0", |v: &f64| *v > 0.0 && v.is_finite())? {
            fusion.batchnorm.epsilon = v;
        }
        if let Some(v) = raw.flag("bn_batch_stats_at_inference")? {
            fusion.batchnorm.use_batch_stats_at_inference = v;
        }
        if let Some(e) = raw.get("cg2_position") {
            fusion.cg2_position = e.value.parse::<Cg2Position>().map_err(|err| raw.err("cg2_position", err))?;
        }
        let file_dropout = raw.flag("enable_dropout")?;
        let file_batchnorm = raw.flag("enable_batchnorm")?;
        let file_fraction = raw.ranged("train_fraction", "a value in (0, 1]", |v: &f64| *v > 0.0 && *v <= 1.0)?;

        // Profile presets; conflicting explicit values are rejected.
        let (preset_reg, preset_fraction) = match profile {
            Profile::Run1 => (Some(false), None),
            Profile::Run2 => (Some(true), Some(0.7)),
            Profile::Run3 | Profile::Run4 => (Some(true), None),
            Profile::Custom => (None, None),
        };
        let pick = |key: &str, file: Option<bool>| -> Result<bool> {
            match (preset_reg, file) {
                (Some(p), Some(f)) if p != f => Err(raw.err(key, format!("conflicts with profile {profile} ({key} = {p})"))),
                (Some(p), _) => Ok(p),
                (None, f) => Ok(f.unwrap_or(false)),
            }
        };
        fusion.enable_dropout = pick("enable_dropout", file_dropout)?;
        fusion.enable_batchnorm = pick("enable_batchnorm", file_batchnorm)?;
        let train_fraction = match (preset_fraction, file_fraction) {
            (Some(p), Some(f)) if p != f => {
                return Err(raw.err("train_fraction", format!("conflicts with profile {profile} (train_fraction = {p})")));
            }
            (Some(p), _) => Some(p),
            (None, f) => f,
        };
        let (seed, epochs) = if profile == Profile::Run4 {
            (seed.wrapping_add(1), epochs + epochs / 2)
        } else {
            (seed, epochs)
        };

        let kind = match raw.get("smoother") {
            Some(e) => e.value.parse::<SmootherKind>().map_err(|err| raw.err("smoother", err))?,
            None => SmootherKind::Butterworth,
        };
        let order = raw.ranged("butter_order", "an integer in 1..=8", |o: &usize| (1..=8).contains(o))?.unwrap_or(2);
        let wn = raw.ranged("butter_wn", "a value in (0, 1)", |w: &f64| *w > 0.0 && *w < 1.0)?.unwrap_or(0.05);
        let weights: Option<Vec<f64>> = raw.list("ma_weights", "comma-separated positive weights")?;
        let smoother = match kind {
            SmootherKind::Butterworth => SmootherSpec::Butterworth { order, wn },
            SmootherKind::MovingAverage => SmootherSpec::MovingAverage(weights.unwrap_or_else(|| vec![1.0; 5]))
                .validated()
                .map_err(|err| raw.err("ma_weights", err))?,
            SmootherKind::None => SmootherSpec::None,
        };
        let aggregation = match raw.get("aggregation") {
            Some(e) => e.value.parse().map_err(|err| raw.err("aggregation", err))?,
            None => Aggregation::default(),
        };
        let early_stopping_patience = match raw.get("early_stopping_patience").map(|e| e.value.as_str()) {
            None | Some("none") | Some("0") => None,
            Some(_) => raw.ranged("early_stopping_patience", "an integer ≥ 1 or none", |p: &usize| *p >= 1)?,
        };

        let mut warnings = Vec::new();
        for (name, s) in std::iter::once(("(default)", &encoder)).chain(modality_encoders.iter().map(|(n, s)| (n.as_str(), s))) {
            if !USUAL_SEQUENCE_LENGTHS.contains(&s.sequence_length) {
                warnings.push(format!(
                    "modality {name}: sequence_length {} is outside the usual grid {USUAL_SEQUENCE_LENGTHS:?}",
                    s.sequence_length
                ));
            }
        }
        Ok(Self {
            manifest,
            profile,
            out,
            epochs,
            batch_size,
            seed,
            adam,
            encoder,
            modality_encoders,
            fusion,
            train_fraction,
            smoother,
            aggregation,
            early_stopping_patience,
            warnings,
        })
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        Self::parse(&read_text(path)?, path, overrides)
    }

    fn settings_for(&self, modality: &str) -> &EncoderSettings {
        self.modality_encoders.get(modality).unwrap_or(&self.encoder)
    }

    /// Architecture for the manifest's modalities and annotation range.
    /// Encoder dropout is off whenever dropout is disabled.
    pub fn model_config(&self, manifest: &DatasetManifest) -> Result<ModelConfig> {
        if let Some(name) = self
            .modality_encoders
            .keys()
            .find(|n| !manifest.modalities.iter().any(|(m, _)| m == *n))
        {
            return Err(Error::Config(format!("settings given for modality {name}, which the manifest lacks")));
        }
        let modalities = manifest
            .modalities
            .iter()
            .map(|(name, dim)| {
                let s = self.settings_for(name);
                let enc = EncoderConfig {
                    cell: s.cell,
                    hidden_units: s.hidden_units.clone(),
                    sequence_length: s.sequence_length,
                    dropout_rate: if self.fusion.enable_dropout { s.dropout_rate } else { 0.0 },
                    input_dim: *dim,
                };
                (name.clone(), enc)
            })
            .collect();
        let mut fusion = self.fusion.clone();
        fusion.output_range = manifest.annotation_range;
        ModelConfig::new(modalities, fusion)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            adam: self.adam,
            early_stopping_patience: self.early_stopping_patience,
            aggregation: self.aggregation,
            exec: Default::default(),
        }
    }

    /// Every setting spelled out, as a `profile = custom` file that parses
    /// back to the same configuration.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# resolved from profile {}", self.profile);
        for w in &self.warnings {
            let _ = writeln!(out, "# warning: {w}");
        }
        let kv = |out: &mut String, k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv(&mut out, "manifest", &self.manifest.display());
        kv(&mut out, "profile", &"custom");
        if let Some(o) = &self.out {
            kv(&mut out, "out", &o.display());
        }
        kv(&mut out, "epochs", &self.epochs);
        kv(&mut out, "batch_size", &self.batch_size);
        kv(&mut out, "seed", &self.seed);
        kv(&mut out, "learning_rate", &self.adam.lr);
        kv(&mut out, "adam_beta1", &self.adam.beta1);
        kv(&mut out, "adam_beta2", &self.adam.beta2);
        kv(&mut out, "adam_epsilon", &self.adam.epsilon);
        let enc = |out: &mut String, prefix: &str, s: &EncoderSettings| {
            let units: Vec<String> = s.hidden_units.iter().map(ToString::to_string).collect();
            let _ = writeln!(out, "{prefix}cell = {}", s.cell);
            let _ = writeln!(out, "{prefix}hidden_units = {}", units.join(", "));
            let _ = writeln!(out, "{prefix}sequence_length = {}", s.sequence_length);
            let _ = writeln!(out, "{prefix}encoder_dropout_rate = {}", s.dropout_rate);
        };
        enc(&mut out, "", &self.encoder);
        for (name, s) in &self.modality_encoders {
            enc(&mut out, &format!("modality.{name}."), s);
        }
        let f = &self.fusion;
        kv(&mut out, "num_experts", &f.num_experts);
        kv(&mut out, "l2_lambda", &f.l2_lambda);
        kv(&mut out, "enable_dropout", &f.enable_dropout);
        kv(&mut out, "dropout_rate", &f.dropout_rate);
        kv(&mut out, "enable_batchnorm", &f.enable_batchnorm);
        kv(&mut out, "bn_momentum", &f.batchnorm.momentum);
        kv(&mut out, "bn_epsilon", &f.batchnorm.epsilon);
        kv(&mut out, "bn_batch_stats_at_inference", &f.batchnorm.use_batch_stats_at_inference);
        kv(&mut out, "cg2_position", &f.cg2_position);
        if let Some(tf) = self.train_fraction {
            kv(&mut out, "train_fraction", &tf);
        }
        kv(&mut out, "smoother", &self.smoother);
        match &self.smoother {
            SmootherSpec::Butterworth { order, wn } => {
                kv(&mut out, "butter_order", order);
                kv(&mut out, "butter_wn", wn);
            }
            SmootherSpec::MovingAverage(w) => {
                let w: Vec<String> = w.iter().map(ToString::to_string).collect();
                kv(&mut out, "ma_weights", &w.join(", "));
            }
            SmootherSpec::None => {}
        }
        kv(&mut out, "aggregation", &self.aggregation);
        match self.early_stopping_patience {
            Some(p) => kv(&mut out, "early_stopping_patience", &p),
            None => kv(&mut out, "early_stopping_patience", &"none"),
        }
        out
    }
}

/// Reads and resolves a run configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path, &Overrides::default())
}
