use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::{NnError, PoolPadding, Result, Tensor};

/// 1-D convolution (valid cross-correlation, stride 1) followed by ReLU.
///
/// Weights are laid out `[out_channels, in_channels, kernel_size]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Output of [`Conv1d::forward`]. `cols` is the unfolded input kept for the
/// weight gradient: row `t` holds `input[c][t + k]` at `c * kernel + k`.
pub struct ConvForward {
    pub output: Tensor,
    pub cols: Vec<f64>,
}

impl Conv1d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        Conv1d {
            in_channels,
            out_channels,
            kernel_size,
            weight: Tensor::zeros(vec![out_channels, in_channels, kernel_size]),
            bias: Tensor::zeros(vec![out_channels]),
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<usize> {
        let shape = input.shape();
        if shape.len() != 2 || shape[0] != self.in_channels {
            return Err(NnError::ShapeMismatch {
                expected: vec![self.in_channels, 0],
                found: shape.to_vec(),
            });
        }
        if shape[1] < self.kernel_size {
            return Err(NnError::InputTooShort {
                stage: "conv1d",
                length: shape[1],
                needed: self.kernel_size,
            });
        }
        Ok(shape[1] - self.kernel_size + 1)
    }

    /// Unfold `input` (channels x length) into `out_len` rows of
    /// `channels * kernel` values.
    fn unfold(&self, input: &Tensor, out_len: usize) -> Vec<f64> {
        let (k, len) = (self.kernel_size, input.shape()[1]);
        let width = self.in_channels * k;
        let data = input.data();
        let mut cols = vec![0.0; out_len * width];
        for (t, row) in cols.chunks_exact_mut(width).enumerate() {
            for c in 0..self.in_channels {
                row[c * k..(c + 1) * k].copy_from_slice(&data[c * len + t..c * len + t + k]);
            }
        }
        cols
    }

    pub fn forward(&self, input: &Tensor) -> Result<ConvForward> {
        let out_len = self.check_input(input)?;
        let width = self.in_channels * self.kernel_size;
        let cols = self.unfold(input, out_len);
        let mut out = vec![0.0; self.out_channels * out_len];
        {
            let w = ArrayView2::from_shape((self.out_channels, width), self.weight.data()).unwrap();
            let x = ArrayView2::from_shape((out_len, width), &cols).unwrap();
            let mut y = ArrayViewMut2::from_shape((self.out_channels, out_len), &mut out).unwrap();
            general_mat_mul(1.0, &w, &x.t(), 0.0, &mut y);
        }
        for (row, &b) in out.chunks_exact_mut(out_len).zip(self.bias.data()) {
            for v in row {
                *v = (*v + b).max(0.0);
            }
        }
        Ok(ConvForward { output: Tensor::from_vec(vec![self.out_channels, out_len], out), cols })
    }

    /// Accumulate gradients for one upstream gradient entry `g` at output
    /// position `(o, t)`. `dx` is the input gradient (channels x `in_len`),
    /// skipped when `None`.
    #[inline]
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward_at(
        &self,
        o: usize,
        t: usize,
        g: f64,
        cols: &[f64],
        in_len: usize,
        dweight: &mut [f64],
        dbias: &mut [f64],
        dx: Option<&mut [f64]>,
    ) {
        let k = self.kernel_size;
        let width = self.in_channels * k;
        dbias[o] += g;
        let row = &cols[t * width..(t + 1) * width];
        for (dw, x) in dweight[o * width..(o + 1) * width].iter_mut().zip(row) {
            *dw += g * x;
        }
        if let Some(dx) = dx {
            let w = &self.weight.data()[o * width..(o + 1) * width];
            for c in 0..self.in_channels {
                let target = &mut dx[c * in_len + t..c * in_len + t + k];
                for (d, wv) in target.iter_mut().zip(&w[c * k..(c + 1) * k]) {
                    *d += g * wv;
                }
            }
        }
    }
}

/// Non-overlapping max pooling (stride == window).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool1d {
    pub size: usize,
    pub padding: PoolPadding,
}

/// Pooled values plus, for each output, the index of the winning input
/// position within its channel row. Ties go to the lowest index.
pub struct PoolOutput {
    pub output: Tensor,
    pub argmax: Vec<u32>,
}

impl MaxPool1d {
    pub fn new(size: usize) -> Self {
        MaxPool1d { size, padding: PoolPadding::Valid }
    }

    pub fn forward(&self, input: &Tensor) -> Result<PoolOutput> {
        let shape = input.shape();
        if shape.len() != 2 {
            return Err(NnError::ShapeMismatch { expected: vec![0, 0], found: shape.to_vec() });
        }
        let (channels, len) = (shape[0], shape[1]);
        let out_len = self.padding.output_len(len, self.size).ok_or(NnError::InputTooShort {
            stage: "maxpool1d",
            length: len,
            needed: self.size,
        })?;
        let mut out = Vec::with_capacity(channels * out_len);
        let mut argmax = Vec::with_capacity(channels * out_len);
        for row in input.data().chunks_exact(len) {
            for j in 0..out_len {
                let start = j * self.size;
                let end = (start + self.size).min(len);
                let mut best = start;
                for i in start + 1..end {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                out.push(row[best]);
                argmax.push(best as u32);
            }
        }
        Ok(PoolOutput { output: Tensor::from_vec(vec![channels, out_len], out), argmax })
    }
}

/// Fully connected layer with sigmoid activation. Weights are
/// `[out_features, in_features]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Dense {
            in_features,
            out_features,
            weight: Tensor::zeros(vec![out_features, in_features]),
            bias: Tensor::zeros(vec![out_features]),
        }
    }

    /// Pre-activations `W x + b`.
    pub fn linear(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_features {
            return Err(NnError::ShapeMismatch {
                expected: vec![self.in_features],
                found: vec![x.len()],
            });
        }
        Ok(self
            .weight
            .data()
            .chunks_exact(self.in_features)
            .zip(self.bias.data())
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.linear(x)?.into_iter().map(super::sigmoid).collect())
    }
}
