/// Predictions are clamped to `[BCE_EPSILON, 1 - BCE_EPSILON]` before the log.
pub const BCE_EPSILON: f64 = 1e-7;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a probability against a 0/1 label.
pub fn bce_loss(p: f64, label: f64) -> f64 {
    let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Derivative of [`bce_loss`]`(sigmoid(z), label)` with respect to `z`.
/// Zero where the clamp is active.
pub fn bce_logit_grad(p: f64, label: f64) -> f64 {
    if p > BCE_EPSILON && p < 1.0 - BCE_EPSILON {
        p - label
    } else {
        0.0
    }
}
