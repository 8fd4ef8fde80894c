#![allow(dead_code)]

use std::io::Write;

use dexvec::eval::Label;
use dexvec::nn::{init_params, Architecture, ForwardTrace, Network, Tensor, PARAM_NAMES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zip::write::SimpleFileOptions;
use zip::CompressionMethod;

// ---------------------------------------------------------------------------
// Finite differences

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub param: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    /// `|a - n| / max(|a|, |n|)`, and 0 when both agree exactly.
    pub fn relative_error(&self) -> f64 {
        let diff = (self.analytic - self.numeric).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / self.analytic.abs().max(self.numeric.abs())
        }
    }
}

pub fn random_image(rng: &mut impl Rng, width: usize) -> Tensor {
    Tensor::from_vec(vec![width], (0..width).map(|_| rng.random_range(0u8..=255) as f64 / 255.0).collect())
}

/// ReLU on/off masks and pooling choices: the loss is smooth in the
/// parameters as long as these do not change.
fn pattern(trace: &ForwardTrace) -> (Vec<bool>, Vec<u32>, Vec<bool>, Vec<u32>) {
    (
        trace.conv1.data().iter().map(|&v| v > 0.0).collect(),
        trace.pool1.argmax.clone(),
        trace.conv2.data().iter().map(|&v| v > 0.0).collect(),
        trace.pool2.argmax.clone(),
    )
}

/// Central difference for one parameter, or `None` when `[θ - h, θ + h]`
/// straddles a ReLU or max-pool kink.
pub fn check_param(net: &mut Network, image: &Tensor, label: f64, analytic: f64, t: usize, j: usize) -> Option<GradCheck> {
    let base = pattern(&net.forward_trace(image).unwrap());
    let original = net.params()[t].data()[j];
    let mut eval = |value: f64| {
        net.params_mut()[t].data_mut()[j] = value;
        let trace = net.forward_trace(image).unwrap();
        let p = pattern(&trace);
        (dexvec::nn::bce_loss(trace.output, label), p)
    };
    let (plus, p_plus) = eval(original + FD_STEP);
    let (minus, p_minus) = eval(original - FD_STEP);
    net.params_mut()[t].data_mut()[j] = original;
    if p_plus != base || p_minus != base {
        return None;
    }
    Some(GradCheck { param: PARAM_NAMES[t], index: j, analytic, numeric: (plus - minus) / (2.0 * FD_STEP) })
}

/// Architecture used for exhaustive checks: input 30, kernel 4, pool 2,
/// 2 and 3 filters, 3 hidden units (30 -> 27 -> 13 -> 10 -> 5).
pub fn tiny_architecture() -> Architecture {
    Architecture::custom(30, 4, 2, [2, 3], 3).unwrap()
}

/// Every parameter of the tiny network at the first seed whose point is
/// kink-free for all parameters. Biases are drawn in ±0.1 so that no
/// pre-activation sits exactly on a ReLU corner.
pub fn tiny_gradient_check() -> (u64, Vec<GradCheck>) {
    let arch = tiny_architecture();
    'seeds: for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = init_params(seed, arch).unwrap();
        for t in [1, 3, 5, 7] {
            net.params_mut()[t].data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
        let image = random_image(&mut rng, arch.input_width);
        let label = (seed % 2) as f64;
        let (_, grads) = net.loss_and_gradients(&image, label).unwrap();
        let mut checks = Vec::new();
        for t in 0..8 {
            for j in 0..grads.tensors[t].len() {
                match check_param(&mut net, &image, label, grads.tensors[t].data()[j], t, j) {
                    Some(c) => checks.push(c),
                    None => continue 'seeds,
                }
            }
        }
        return (seed, checks);
    }
    panic!("no kink-free point among 100 seeds");
}

/// `count` randomly sampled parameters of the full 16384-wide network.
/// Returns the checks and how many draws were redrawn because of a kink.
pub fn full_gradient_check(seed: u64, count: usize) -> (Vec<GradCheck>, usize) {
    let arch = Architecture::new(16384).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = init_params(seed, arch).unwrap();
    let image = random_image(&mut rng, arch.input_width);
    let (_, grads) = net.loss_and_gradients(&image, 1.0).unwrap();
    let mut checks = Vec::new();
    let mut kinks = 0;
    while checks.len() < count {
        let t = rng.random_range(0..8);
        let j = rng.random_range(0..grads.tensors[t].len());
        match check_param(&mut net, &image, 1.0, grads.tensors[t].data()[j], t, j) {
            Some(c) => checks.push(c),
            None => kinks += 1,
        }
        assert!(kinks < 10 * count, "too many kinks");
    }
    (checks, kinks)
}

// ---------------------------------------------------------------------------
// Scores

/// Probability that a random positive outscores a random negative, ties 1/2.
pub fn mann_whitney(scores: &[f64], labels: &[Label]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i].is_malware() {
            continue;
        }
        for (k, &sk) in scores.iter().enumerate() {
            if labels[k].is_malware() {
                continue;
            }
            pairs += 1.0;
            if si > sk {
                wins += 1.0;
            } else if si == sk {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

// ---------------------------------------------------------------------------
// APK fixtures

pub struct Entry<'a> {
    pub name: &'a str,
    pub body: &'a [u8],
    pub deflate: bool,
}

pub fn stored<'a>(name: &'a str, body: &'a [u8]) -> Entry<'a> {
    Entry { name, body, deflate: false }
}

pub fn deflated<'a>(name: &'a str, body: &'a [u8]) -> Entry<'a> {
    Entry { name, body, deflate: true }
}

/// A ZIP archive written by the reference `zip` crate.
pub fn build_zip(entries: &[Entry]) -> Vec<u8> {
    let mut w = zip::ZipWriter::new(std::io::Cursor::new(Vec::new()));
    for e in entries {
        let method = if e.deflate { CompressionMethod::Deflated } else { CompressionMethod::Stored };
        let opts = SimpleFileOptions::default()
            .compression_method(method)
            .last_modified_time(zip::DateTime::from_date_and_time(2019, 6, 15, 12, 0, 0).unwrap());
        w.start_file(e.name, opts).unwrap();
        w.write_all(e.body).unwrap();
    }
    w.finish().unwrap().into_inner()
}

/// A DEX-looking body: the magic followed by `len - 8` pseudo-random bytes.
pub fn dex_body(seed: u64, len: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = b"dex\n035\0".to_vec();
    out.extend((8..len.max(8)).map(|_| rng.random::<u8>()));
    out
}

/// A minimal app with a single `classes.dex`.
pub fn simple_apk(seed: u64, dex_len: usize) -> Vec<u8> {
    let dex = dex_body(seed, dex_len);
    build_zip(&[stored("AndroidManifest.xml", b"<manifest/>"), deflated("classes.dex", &dex)])
}
