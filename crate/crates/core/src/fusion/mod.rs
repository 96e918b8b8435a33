//! Late fusion head: concatenated per-modality states pass through optional
//! batch norm and dropout, a context gate, a mixture of logistic-regression
//! experts and a second context gate, then map affinely onto the annotation
//! range.

mod gate;
mod head;
mod moe;

pub use gate::{context_gate, gate_backward, gate_forward};
pub use head::{bernoulli_xent, fusion_head_forward, FusionHead, HeadBatch, HeadCache, GRAD_CHUNK};
pub use moe::{moe_backward, moe_forward, MoeGrads, MoeOutput, MoeParams};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::seqmodel::BatchNormConfig;

/// Where the second context gate sits relative to the mixture of experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Cg2Position {
    /// Gates the fused vector before it enters the experts (F × F weights).
    MoeInput,
    /// Gates the two output probabilities (2 × 2 weights).
    #[default]
    MoeOutput,
}

impl fmt::Display for Cg2Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cg2Position::MoeInput => "moe_input",
            Cg2Position::MoeOutput => "moe_output",
        })
    }
}

impl FromStr for Cg2Position {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moe_input" => Ok(Cg2Position::MoeInput),
            "moe_output" => Ok(Cg2Position::MoeOutput),
            _ => Err(Error::Config(format!(
                "cg2_position {s:?} invalid (expected moe_input or moe_output)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub num_experts: usize,
    /// (modality name, final hidden-state width) in concatenation order.
    pub modality_dims: Vec<(String, usize)>,
    pub l2_lambda: f64,
    pub enable_dropout: bool,
    pub dropout_rate: f64,
    pub enable_batchnorm: bool,
    pub batchnorm: BatchNormConfig,
    pub output_range: (f64, f64),
    pub cg2_position: Cg2Position,
}

impl FusionConfig {
    pub fn new(modality_dims: Vec<(String, usize)>) -> Self {
        Self {
            num_experts: 2,
            modality_dims,
            l2_lambda: 1e-5,
            enable_dropout: false,
            dropout_rate: 0.3,
            enable_batchnorm: false,
            batchnorm: BatchNormConfig::default(),
            output_range: (-1.0, 1.0),
            cg2_position: Cg2Position::MoeOutput,
        }
    }

    pub fn fused_dim(&self) -> usize {
        self.modality_dims.iter().map(|(_, d)| d).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::Config("num_experts must be at least 1".into()));
        }
        if self.modality_dims.is_empty() || self.modality_dims.iter().any(|(_, d)| *d == 0) {
            return Err(Error::Config("fusion needs at least one modality with a non-empty state".into()));
        }
        let (lo, hi) = self.output_range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("output range ({lo}, {hi}) must satisfy lo < hi")));
        }
        if !(self.l2_lambda >= 0.0) {
            return Err(Error::Config(format!("l2_lambda {} must be ≥ 0", self.l2_lambda)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Annotation value → [0, 1] Bernoulli target.
    pub fn to_unit(&self, v: f64) -> Result<f64> {
        let (lo, hi) = self.output_range;
        if !(lo..=hi).contains(&v) {
            return Err(Error::Data(format!("target {v} outside annotation range [{lo}, {hi}]")));
        }
        Ok((v - lo) / (hi - lo))
    }

    pub fn from_unit(&self, p: f64) -> f64 {
        let (lo, hi) = self.output_range;
        lo + (hi - lo) * p
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmotionPrediction {
    pub valence: f64,
    pub arousal: f64,
}
