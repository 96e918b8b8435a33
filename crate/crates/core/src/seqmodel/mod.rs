//! Sequence-to-one recurrent encoders plus the batch-norm and dropout
//! regularizers shared with the fusion head.

mod batchnorm;
mod cell;
mod dropout;
mod encoder;

pub use batchnorm::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, update_running_stats, BatchNormCache,
    BatchNormConfig, BatchNormState,
};
pub use cell::{
    gru_backward, gru_cell_step, gru_forward, lstm_backward, lstm_cell_step, lstm_forward, CellGrads,
    CellWeights, GruCache, LstmCache,
};
pub use dropout::{dropout_apply, dropout_mask};
pub use encoder::{encode_sequence, Encoder, EncoderCache, EncoderConfig};

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CellKind {
    #[default]
    Gru,
    Lstm,
}

impl CellKind {
    /// Number of stacked gate blocks in the weight matrices.
    pub fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        })
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            _ => Err(Error::Config(format!("unknown cell kind {s:?} (expected gru or lstm)"))),
        }
    }
}

/// A T × D input window, read one second at a time.
pub trait Sequence {
    fn steps(&self) -> usize;
    fn dim(&self) -> usize;
    fn row(&self, t: usize) -> &[f64];
}

/// Owned row-major T × D matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqMatrix {
    pub steps: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SeqMatrix {
    pub fn new(steps: usize, dim: usize, data: Vec<f64>) -> crate::Result<Self> {
        if data.len() != steps * dim {
            return Err(Error::dim("sequence matrix", steps * dim, data.len()));
        }
        Ok(Self { steps, dim, data })
    }
}

impl Sequence for SeqMatrix {
    fn steps(&self) -> usize {
        self.steps
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}
