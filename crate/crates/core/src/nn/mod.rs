//! The classifier: two 1-D convolution + max-pool extraction units, a
//! sigmoid hidden layer and a single sigmoid output, with exact reverse-mode
//! gradients and Adam.
//!
//! Shape algebra for input width `W` (kernel 12, pool 12, valid padding):
//! each extraction unit maps a length `L` to `floor((L - 11) / 12)`. At
//! `W = 16384` the chain is `64x16373 -> 64x1364 -> 128x1353 -> 128x112 ->
//! 14336 -> 64 -> 1`.

mod adam;
mod checkpoint;
mod layers;
mod loss;
mod network;
mod tensor;

pub use adam::{Adam, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint};
pub use layers::{Conv1d, Dense, MaxPool1d, PoolOutput};
pub use loss::{bce_logit_grad, bce_loss, sigmoid, BCE_EPSILON};
pub use network::{init_params, ForwardTrace, Gradients, Network, PARAM_NAMES};
pub use tensor::Tensor;

use thiserror::Error;

pub const KERNEL_SIZE: usize = 12;
pub const POOL_SIZE: usize = 12;
pub const FILTERS: [usize; 2] = [64, 128];
pub const HIDDEN_UNITS: usize = 64;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{stage}: input length {length} is shorter than the required {needed}")]
    InputTooShort { stage: &'static str, length: usize, needed: usize },
    #[error("shape mismatch: expected {expected:?}, got {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("non-finite network input")]
    NonFiniteInput,
    #[error("non-finite network output")]
    NonFiniteOutput,
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// How a max-pool layer treats a trailing partial window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolPadding {
    /// Drop the remainder; `floor(L / pool)` outputs, `L >= pool` required.
    #[default]
    Valid,
    /// Keep the partial last window; `ceil(L / pool)` outputs.
    Same,
}

impl PoolPadding {
    pub fn output_len(self, length: usize, pool: usize) -> Option<usize> {
        match self {
            PoolPadding::Valid if length >= pool => Some(length / pool),
            PoolPadding::Same if length >= 1 => Some(length.div_ceil(pool)),
            _ => None,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            PoolPadding::Valid => 0,
            PoolPadding::Same => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(PoolPadding::Valid),
            1 => Some(PoolPadding::Same),
            _ => None,
        }
    }
}

/// Hyper-parameters fixing every tensor shape of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input_width: usize,
    pub kernel_size: usize,
    pub pool_size: usize,
    pub filters: [usize; 2],
    pub hidden: usize,
    pub pool_padding: PoolPadding,
}

/// Lengths along the sequence axis after each stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageLengths {
    pub conv1: usize,
    pub pool1: usize,
    pub conv2: usize,
    pub pool2: usize,
}

impl Architecture {
    /// The published configuration at the given input width.
    pub fn new(input_width: usize) -> Result<Self> {
        Self::with_padding(input_width, PoolPadding::Valid)
    }

    pub fn with_padding(input_width: usize, pool_padding: PoolPadding) -> Result<Self> {
        let arch = Architecture {
            input_width,
            kernel_size: KERNEL_SIZE,
            pool_size: POOL_SIZE,
            filters: FILTERS,
            hidden: HIDDEN_UNITS,
            pool_padding,
        };
        arch.stage_lengths()?;
        Ok(arch)
    }

    /// A non-standard configuration, mostly for small gradient checks.
    pub fn custom(
        input_width: usize,
        kernel_size: usize,
        pool_size: usize,
        filters: [usize; 2],
        hidden: usize,
    ) -> Result<Self> {
        if kernel_size == 0 || pool_size == 0 || filters.contains(&0) || hidden == 0 {
            return Err(NnError::InvalidArchitecture("all sizes must be positive".into()));
        }
        let arch = Architecture {
            input_width,
            kernel_size,
            pool_size,
            filters,
            hidden,
            pool_padding: PoolPadding::Valid,
        };
        arch.stage_lengths()?;
        Ok(arch)
    }

    pub fn stage_lengths(&self) -> Result<StageLengths> {
        let conv = |stage, length: usize| {
            if length < self.kernel_size {
                Err(NnError::InputTooShort { stage, length, needed: self.kernel_size })
            } else {
                Ok(length - self.kernel_size + 1)
            }
        };
        let pool = |stage, length: usize| {
            self.pool_padding.output_len(length, self.pool_size).ok_or(NnError::InputTooShort {
                stage,
                length,
                needed: match self.pool_padding {
                    PoolPadding::Valid => self.pool_size,
                    PoolPadding::Same => 1,
                },
            })
        };
        let conv1 = conv("conv1", self.input_width)?;
        let pool1 = pool("pool1", conv1)?;
        let conv2 = conv("conv2", pool1)?;
        let pool2 = pool("pool2", conv2)?;
        Ok(StageLengths { conv1, pool1, conv2, pool2 })
    }

    /// Number of features entering the first dense layer.
    pub fn flat_features(&self) -> Result<usize> {
        Ok(self.stage_lengths()?.pool2 * self.filters[1])
    }

    /// Activation shapes in forward order: conv1, pool1, conv2, pool2,
    /// flatten, hidden, output.
    pub fn shape_trace(&self) -> Result<Vec<Vec<usize>>> {
        let s = self.stage_lengths()?;
        let [f1, f2] = self.filters;
        Ok(vec![
            vec![f1, s.conv1],
            vec![f1, s.pool1],
            vec![f2, s.conv2],
            vec![f2, s.pool2],
            vec![f2 * s.pool2],
            vec![self.hidden],
            vec![1],
        ])
    }

    /// Smallest input width accepted with this kernel/pool configuration.
    pub fn min_input_width(&self) -> usize {
        (1..)
            .find(|&w| Architecture { input_width: w, ..*self }.stage_lengths().is_ok())
            .expect("some width always fits")
    }
}
