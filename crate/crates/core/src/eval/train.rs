use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{MetricsReport, DEFAULT_THRESHOLD};
use super::records::{Label, Sample};
use super::{EvalError, Result};
use crate::nn::{Adam, AdamState, Gradients, Network, NnError};
use crate::par::Exec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without a strict validation-accuracy gain before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    pub threshold: f64,
    /// Stop as soon as validation accuracy reaches 1. No later epoch can
    /// improve on it, so the returned parameters are the same as with
    /// patience alone; only the wasted epochs are skipped.
    pub stop_on_perfect_validation: bool,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 200,
            patience: 50,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            stop_on_perfect_validation: false,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(EvalError::InvalidConfig(what.to_string()));
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be a positive number");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample loss over the epoch's minibatches.
    pub train_loss: f64,
    pub valid_accuracy: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub network: Network,
    /// Optimiser state matching `network`.
    pub optimizer: AdamState,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
}

/// Network outputs for `samples`, in order.
pub fn score(net: &Network, samples: &[&Sample], exec: Exec) -> Result<Vec<f64>> {
    exec.map_slice(samples, |s| net.forward(&s.image)).into_iter().map(|r| r.map_err(EvalError::from)).collect()
}

pub fn labels_of(samples: &[&Sample]) -> Vec<Label> {
    samples.iter().map(|s| s.label()).collect()
}

/// Confusion counts and metrics of `net` on `samples`.
pub fn evaluate(net: &Network, samples: &[&Sample], threshold: f64, exec: Exec) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(EvalError::EmptyPartition("evaluation"));
    }
    let scores = score(net, samples, exec)?;
    Ok(MetricsReport::from_scores(&scores, &labels_of(samples), threshold))
}

fn accuracy(net: &Network, samples: &[&Sample], cfg: &TrainConfig) -> Result<f64> {
    let report = evaluate(net, samples, cfg.threshold, cfg.exec)?;
    Ok(report.accuracy.expect("non-empty set has an accuracy"))
}

/// Mean loss and gradient over one minibatch. Per-sample gradients are
/// summed in batch order, so the result does not depend on `exec`.
pub fn batch_gradients(net: &Network, batch: &[&Sample], exec: Exec) -> std::result::Result<(f64, Gradients), NnError> {
    let per_sample = exec.map_slice(batch, |s| net.loss_and_gradients(&s.image, s.label().as_f64()));
    let mut total = Gradients::zeros_like(net);
    let mut loss = 0.0;
    for result in per_sample {
        let (l, g) = result?;
        loss += l;
        total.add_assign(&g);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    if !total.is_finite() {
        return Err(NnError::NonFiniteGradient);
    }
    Ok((loss / n, total))
}

/// Minibatch Adam with early stopping on validation accuracy.
pub fn train(net: Network, train: &[&Sample], valid: &[&Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(EvalError::EmptyPartition("train"));
    }
    if valid.is_empty() {
        return Err(EvalError::EmptyPartition("valid"));
    }
    let adam = Adam::with_lr(cfg.lr);
    let mut state = AdamState::new(&net);
    let mut net = net;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Network, AdamState)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            let (loss, grads) =
                batch_gradients(&net, &batch, cfg.exec).map_err(|source| EvalError::Training { epoch, source })?;
            loss_sum += loss * batch.len() as f64;
            adam.step(&mut net, &grads, &mut state);
        }
        let valid_accuracy = accuracy(&net, valid, cfg)?;
        let improved = best.as_ref().is_none_or(|(b, ..)| valid_accuracy > *b);
        if improved {
            best = Some((valid_accuracy, epoch, net.clone(), state.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        let train_loss = loss_sum / train.len() as f64;
        log::debug!("epoch {epoch}: loss {train_loss:.6}, valid accuracy {valid_accuracy:.4}");
        history.push(EpochRecord { epoch, train_loss, valid_accuracy, improved });
        if stale >= cfg.patience || (cfg.stop_on_perfect_validation && valid_accuracy >= 1.0) {
            break;
        }
    }

    let (best_valid_accuracy, best_epoch, network, optimizer) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { network, optimizer, history, best_epoch, best_valid_accuracy })
}

/// One JSON object per epoch.
pub fn write_history(mut w: impl Write, history: &[EpochRecord]) -> io::Result<()> {
    for record in history {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
