use super::{Network, Tensor, Gradients};

/// Adam with bias correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moment estimates, one tensor per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(net: &Network) -> Self {
        let zeros: Vec<Tensor> = net.params().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam { lr, ..Adam::default() }
    }

    /// Update raw parameter slices in place.
    pub fn update(&self, step: u64, params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64]) {
        let c1 = 1.0 - self.beta1.powi(step as i32);
        let c2 = 1.0 - self.beta2.powi(step as i32);
        for (((w, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }

    pub fn step(&self, net: &mut Network, grads: &Gradients, state: &mut AdamState) {
        state.step += 1;
        for (i, param) in net.params_mut().into_iter().enumerate() {
            self.update(
                state.step,
                param.data_mut(),
                grads.tensors[i].data(),
                state.m[i].data_mut(),
                state.v[i].data_mut(),
            );
        }
    }
}
