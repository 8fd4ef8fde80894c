use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Conv1d, Dense, MaxPool1d, PoolOutput};
use super::loss::{bce_logit_grad, bce_loss};
use super::{Architecture, NnError, Result, Tensor};

/// Parameter tensors in their fixed order (checkpoints, optimizer state,
/// gradients).
pub const PARAM_NAMES: [&str; 8] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "dense1.weight",
    "dense1.bias",
    "dense2.weight",
    "dense2.bias",
];

/// All learnable parameters of the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub dense1: Dense,
    pub dense2: Dense,
    pub seed: u64,
}

/// Gradients with the same layout as [`Network::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            tensors: net.params().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale(factor));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Every intermediate activation of one forward pass.
pub struct ForwardTrace {
    pub conv1: Tensor,
    pub cols1: Vec<f64>,
    pub pool1: PoolOutput,
    pub conv2: Tensor,
    pub cols2: Vec<f64>,
    pub pool2: PoolOutput,
    pub hidden: Vec<f64>,
    pub output: f64,
}

impl ForwardTrace {
    /// Shapes in forward order: conv1, pool1, conv2, pool2, flatten, hidden,
    /// output.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        vec![
            self.conv1.shape().to_vec(),
            self.pool1.output.shape().to_vec(),
            self.conv2.shape().to_vec(),
            self.pool2.output.shape().to_vec(),
            vec![self.pool2.output.len()],
            vec![self.hidden.len()],
            vec![1],
        ]
    }
}

fn glorot(rng: &mut ChaCha8Rng, tensor: &mut Tensor, fan_in: usize, fan_out: usize) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    tensor.data_mut().iter_mut().for_each(|w| *w = rng.random_range(-limit..limit));
}

/// Glorot-uniform weights and zero biases, deterministic in `seed`.
pub fn init_params(seed: u64, arch: Architecture) -> Result<Network> {
    let mut net = Network::zeros(arch)?;
    net.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = arch.kernel_size;
    let [f1, f2] = arch.filters;
    glorot(&mut rng, &mut net.conv1.weight, k, f1 * k);
    glorot(&mut rng, &mut net.conv2.weight, f1 * k, f2 * k);
    let flat = net.dense1.in_features;
    glorot(&mut rng, &mut net.dense1.weight, flat, arch.hidden);
    glorot(&mut rng, &mut net.dense2.weight, arch.hidden, 1);
    Ok(net)
}

impl Network {
    /// All-zero parameters for `arch`.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        let flat = arch.flat_features()?;
        let [f1, f2] = arch.filters;
        Ok(Network {
            arch,
            conv1: Conv1d::zeros(1, f1, arch.kernel_size),
            conv2: Conv1d::zeros(f1, f2, arch.kernel_size),
            dense1: Dense::zeros(flat, arch.hidden),
            dense2: Dense::zeros(arch.hidden, 1),
            seed: 0,
        })
    }

    pub fn params(&self) -> [&Tensor; 8] {
        [
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.dense1.weight,
            &self.dense1.bias,
            &self.dense2.weight,
            &self.dense2.bias,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.dense1.weight,
            &mut self.dense1.bias,
            &mut self.dense2.weight,
            &mut self.dense2.bias,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn pool(&self) -> MaxPool1d {
        MaxPool1d { size: self.arch.pool_size, padding: self.arch.pool_padding }
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let w = self.arch.input_width;
        let ok = match image.shape() {
            [n] => *n == w,
            [1, n] => *n == w,
            _ => false,
        };
        if !ok {
            return Err(NnError::ShapeMismatch { expected: vec![w], found: image.shape().to_vec() });
        }
        if !image.is_finite() {
            return Err(NnError::NonFiniteInput);
        }
        Ok(())
    }

    /// Run the full network, keeping every activation.
    pub fn forward_trace(&self, image: &Tensor) -> Result<ForwardTrace> {
        self.check_image(image)?;
        let input = Tensor::from_vec(vec![1, self.arch.input_width], image.data().to_vec());
        let pool = self.pool();
        let c1 = self.conv1.forward(&input)?;
        let p1 = pool.forward(&c1.output)?;
        let c2 = self.conv2.forward(&p1.output)?;
        let p2 = pool.forward(&c2.output)?;
        let hidden = self.dense1.forward(p2.output.data())?;
        let output = self.dense2.forward(&hidden)?[0];
        if !output.is_finite() {
            return Err(NnError::NonFiniteOutput);
        }
        Ok(ForwardTrace {
            conv1: c1.output,
            cols1: c1.cols,
            pool1: p1,
            conv2: c2.output,
            cols2: c2.cols,
            pool2: p2,
            hidden,
            output,
        })
    }

    /// Malware probability for one normalised image.
    pub fn forward(&self, image: &Tensor) -> Result<f64> {
        Ok(self.forward_trace(image)?.output)
    }

    /// Loss and exact gradients for one labelled image.
    pub fn loss_and_gradients(&self, image: &Tensor, label: f64) -> Result<(f64, Gradients)> {
        let trace = self.forward_trace(image)?;
        let grads = self.backward(&trace, label)?;
        Ok((bce_loss(trace.output, label), grads))
    }

    /// Reverse-mode gradients of the binary cross-entropy loss.
    ///
    /// Max-pool gradients flow only to the recorded argmax. ReLU gates are
    /// closed where the post-activation is exactly 0, so a zero pre-activation
    /// passes no gradient.
    pub fn backward(&self, trace: &ForwardTrace, label: f64) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        let [dconv1_w, dconv1_b, dconv2_w, dconv2_b, ddense1_w, ddense1_b, ddense2_w, ddense2_b] =
            &mut grads.tensors[..]
        else {
            unreachable!("gradients always hold eight tensors")
        };

        // Output unit.
        let dz_out = bce_logit_grad(trace.output, label);
        ddense2_b.data_mut()[0] = dz_out;
        let hidden = &trace.hidden;
        let mut dz_hidden = vec![0.0; hidden.len()];
        for (h, (&a, &w)) in hidden.iter().zip(self.dense2.weight.data()).enumerate() {
            ddense2_w.data_mut()[h] = dz_out * a;
            dz_hidden[h] = w * dz_out * a * (1.0 - a);
        }

        // Hidden layer.
        let flat = trace.pool2.output.data();
        let n_flat = flat.len();
        let mut dflat = vec![0.0; n_flat];
        for (h, &dz) in dz_hidden.iter().enumerate() {
            ddense1_b.data_mut()[h] = dz;
            if dz == 0.0 {
                continue;
            }
            let w_row = &self.dense1.weight.data()[h * n_flat..(h + 1) * n_flat];
            let dw_row = &mut ddense1_w.data_mut()[h * n_flat..(h + 1) * n_flat];
            for ((dw, df), (&x, &w)) in dw_row.iter_mut().zip(dflat.iter_mut()).zip(flat.iter().zip(w_row)) {
                *dw = dz * x;
                *df += w * dz;
            }
        }

        // Second extraction unit: route through pool2, then conv2.
        let pool1 = trace.pool1.output.data();
        let (p1_channels, p1_len) = (trace.pool1.output.shape()[0], trace.pool1.output.shape()[1]);
        let p2_len = trace.pool2.output.shape()[1];
        let mut dpool1 = vec![0.0; p1_channels * p1_len];
        for (i, (&g, &value)) in dflat.iter().zip(flat).enumerate() {
            if g == 0.0 || value <= 0.0 {
                continue;
            }
            let o = i / p2_len;
            let t = trace.pool2.argmax[i] as usize;
            self.conv2.backward_at(
                o,
                t,
                g,
                &trace.cols2,
                p1_len,
                dconv2_w.data_mut(),
                dconv2_b.data_mut(),
                Some(&mut dpool1),
            );
        }

        // First extraction unit: route through pool1, then conv1.
        let p1_out_len = p1_len;
        let input_len = self.arch.input_width;
        for (i, (&g, &value)) in dpool1.iter().zip(pool1).enumerate() {
            if g == 0.0 || value <= 0.0 {
                continue;
            }
            let o = i / p1_out_len;
            let t = trace.pool1.argmax[i] as usize;
            self.conv1.backward_at(
                o,
                t,
                g,
                &trace.cols1,
                input_len,
                dconv1_w.data_mut(),
                dconv1_b.data_mut(),
                None,
            );
        }

        if !grads.is_finite() {
            return Err(NnError::NonFiniteGradient);
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_net() -> Network {
        init_params(3, Architecture::new(16384).unwrap()).unwrap()
    }

    #[test]
    fn zero_network_outputs_half() {
        let net = Network::zeros(Architecture::new(16384).unwrap()).unwrap();
        let p = net.forward(&Tensor::zeros(vec![16384])).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn zero_network_gradients() {
        let net = Network::zeros(Architecture::new(1024).unwrap()).unwrap();
        for label in [0.0, 1.0] {
            let (loss, grads) = net.loss_and_gradients(&Tensor::zeros(vec![1024]), label).unwrap();
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
            let dz = 0.5 - label;
            assert_eq!(grads.tensors[7].data(), &[dz]);
            // hidden units sit at sigmoid(0) = 0.5
            assert!(grads.tensors[6].data().iter().all(|&g| g == dz * 0.5));
            for t in &grads.tensors[..6] {
                assert!(t.data().iter().all(|&g| g == 0.0));
            }
        }
    }

    #[test]
    fn forward_shapes_match_architecture() {
        let net = paper_net();
        let image = Tensor::from_vec(vec![16384], (0..16384).map(|i| (i % 97) as f64 / 97.0).collect());
        let trace = net.forward_trace(&image).unwrap();
        assert_eq!(trace.shapes(), net.arch.shape_trace().unwrap());
        assert!(trace.output > 0.0 && trace.output < 1.0);
    }

    #[test]
    fn wrong_width_is_rejected() {
        let err = paper_net().forward(&Tensor::zeros(vec![4096])).unwrap_err();
        assert!(matches!(err, NnError::ShapeMismatch { .. }));
        let mut image = Tensor::zeros(vec![16384]);
        image.data_mut()[7] = f64::INFINITY;
        assert!(matches!(paper_net().forward(&image), Err(NnError::NonFiniteInput)));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let arch = Architecture::new(4096).unwrap();
        let a = init_params(11, arch).unwrap();
        let b = init_params(11, arch).unwrap();
        let c = init_params(12, arch).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.conv1.weight, c.conv1.weight);
        let limit = (6.0f64 / (12 + 64 * 12) as f64).sqrt();
        assert!(a.conv1.weight.data().iter().all(|w| w.abs() <= limit));
        assert!(a.conv1.bias.data().iter().all(|&b| b == 0.0));
        assert!(a.dense1.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_rejects_narrow_width() {
        assert!(matches!(Architecture::new(155), Err(NnError::InputTooShort { .. })));
    }
}
