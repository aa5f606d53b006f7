//! Dense networks sized for the control and price approximators, a
//! matrix-valued recording tape for reverse-mode gradients, and Adam.

mod adam;
mod net;
mod tape;

pub use adam::{AdamConfig, AdamState, Direction};
pub use net::{mlp_forward, rnn_cell_forward};
pub use tape::{Gradients, Node, ParamRef, Tape};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the recurrent hidden state.
pub const HIDDEN_WIDTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Control MLP on `(t, X, ϖ)`.
    MlpControl,
    /// Price MLP on `(t, Q)`.
    MlpPrice,
    /// Control MLP on `(t, X, ϖ, a)` with a supply-driven hidden block.
    RnnControl,
    /// Price MLP on `(t, a)` with a supply-driven hidden block.
    RnnPrice,
}

impl Arch {
    pub fn neurons(&self) -> usize {
        match self {
            Arch::MlpControl | Arch::RnnControl => 64,
            Arch::MlpPrice | Arch::RnnPrice => 32,
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            Arch::MlpControl => 3,
            Arch::RnnControl => 4,
            Arch::MlpPrice | Arch::RnnPrice => 2,
        }
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self, Arch::RnnControl | Arch::RnnPrice)
    }

    /// `(rows, cols)` of every tensor: three dense layers as (W, b) pairs,
    /// followed by `(W_h1, b_h1, W_h2, b_h2)` for recurrent architectures.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let n = self.neurons();
        let mut shapes = vec![
            (n, self.input_width()),
            (n, 1),
            (n, n),
            (n, 1),
            (1, n),
            (1, 1),
        ];
        if self.is_recurrent() {
            shapes.extend([
                (HIDDEN_WIDTH, HIDDEN_WIDTH + 1),
                (HIDDEN_WIDTH, 1),
                (1, HIDDEN_WIDTH),
                (1, 1),
            ]);
        }
        shapes
    }
}

/// Index of the weight matrix of dense layer `j` (0-based) in [`ParamSet::tensors`].
pub const fn layer_weight(j: usize) -> usize {
    2 * j
}

pub const fn layer_bias(j: usize) -> usize {
    2 * j + 1
}

pub const HIDDEN_W1: usize = 6;
pub const HIDDEN_B1: usize = 7;
pub const HIDDEN_W2: usize = 8;
pub const HIDDEN_B2: usize = 9;

/// All weights of one network. Biases are stored as `n × 1` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub arch: Arch,
    pub seed: u64,
    pub tensors: Vec<DMatrix<f64>>,
}

/// Glorot-uniform weights, zero biases; deterministic in `seed`.
pub fn init_params(arch: Arch, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = arch
        .shapes()
        .into_iter()
        .map(|(rows, cols)| {
            if cols == 1 {
                DMatrix::zeros(rows, 1)
            } else {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..=limit))
            }
        })
        .collect();
    ParamSet { arch, seed, tensors }
}

impl ParamSet {
    pub fn zeros(arch: Arch) -> Self {
        let tensors = arch
            .shapes()
            .into_iter()
            .map(|(r, c)| DMatrix::zeros(r, c))
            .collect();
        Self {
            arch,
            seed: 0,
            tensors,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let expected = self.arch.shapes();
        let got: Vec<_> = self.tensors.iter().map(|t| t.shape()).collect();
        if expected != got {
            return Err(Error::ShapeMismatch {
                context: "parameter set",
                expected: format!("{expected:?}"),
                got: format!("{got:?}"),
            });
        }
        Ok(())
    }

    /// Flat read access over all scalars in tensor order, each tensor row-major.
    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for t in &self.tensors {
            if idx < t.len() {
                let (r, c) = (idx / t.ncols(), idx % t.ncols());
                return t[(r, c)];
            }
            idx -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn set_flat(&mut self, mut idx: usize, value: f64) {
        for t in &mut self.tensors {
            if idx < t.len() {
                let (r, c) = (idx / t.ncols(), idx % t.ncols());
                t[(r, c)] = value;
                return;
            }
            idx -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            arch: self.arch,
            seed: self.seed,
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorRecord {
                    rows: t.nrows(),
                    cols: t.ncols(),
                    data: t.transpose().as_slice().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let tensors = ck
            .tensors
            .iter()
            .map(|rec| {
                if rec.data.len() != rec.rows * rec.cols {
                    return Err(Error::ShapeMismatch {
                        context: "checkpoint tensor",
                        expected: format!("{} values", rec.rows * rec.cols),
                        got: format!("{} values", rec.data.len()),
                    });
                }
                Ok(DMatrix::from_row_slice(rec.rows, rec.cols, &rec.data))
            })
            .collect::<Result<Vec<_>>>()?;
        let params = Self {
            arch: ck.arch,
            seed: ck.seed,
            tensors,
        };
        params.check_shapes()?;
        Ok(params)
    }
}

/// Serialized parameters: tensors in layer order then hidden block, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: Arch,
    pub seed: u64,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}
