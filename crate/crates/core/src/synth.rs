//! Synthetic byte-stream corpora with known class structure.
//!
//! Real APK corpora are large and externally labelled, so tests and demos use
//! generated streams instead. Two families are provided:
//!
//! * [`periodic_vs_uniform`]: malware streams repeat a short random motif,
//!   goodware streams are uniform random bytes.
//! * [`local_structure`]: both classes are built from the same uniform byte
//!   marginal; malware streams carry short repeated-byte runs scattered through
//!   them. Only byte-adjacent structure differs, which survives upsampling but
//!   is lost when a stream is sampled down to a few hundred pixels.

use chrono::{Days, NaiveDate};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{Label, SampleRecord};
use crate::image::VectorImage;
use crate::store::content_id;

/// Uniform random bytes.
pub fn uniform_bytes(rng: &mut impl Rng, len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    rng.fill_bytes(&mut out);
    out
}

/// A random motif of `period` bytes repeated to `len`.
pub fn periodic_bytes(rng: &mut impl Rng, len: usize, period: usize) -> Vec<u8> {
    let motif = uniform_bytes(rng, period.max(1));
    motif.iter().copied().cycle().take(len).collect()
}

/// Uniform bytes in which a fraction `coverage` of positions belong to runs
/// of one repeated byte, each `run` bytes long.
pub fn run_bytes(rng: &mut impl Rng, len: usize, run: usize, coverage: f64) -> Vec<u8> {
    let mut out = uniform_bytes(rng, len);
    let run = run.max(2).min(len);
    let runs = ((len as f64 * coverage) / run as f64).round() as usize;
    for _ in 0..runs {
        let start = rng.random_range(0..=len - run);
        let value = out[start];
        out[start..start + run].fill(value);
    }
    out
}

fn record(bytes: &[u8], label: Label, date: NaiveDate) -> SampleRecord {
    let id = content_id(bytes);
    SampleRecord { image_path: format!("raw/{id}.dxr1"), id, label, dex_date: date, obfuscated_of: None }
}

/// Labelled raw images, alternating malware and goodware.
pub type Corpus = Vec<(SampleRecord, VectorImage)>;

fn build(seed: u64, n: usize, mut make: impl FnMut(&mut ChaCha8Rng, Label) -> Vec<u8>) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = NaiveDate::from_ymd_opt(2019, 1, 1).unwrap();
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Malware } else { Label::Goodware };
            let bytes = make(&mut rng, label);
            let date = start + Days::new(rng.random_range(0..730));
            (record(&bytes, label, date), VectorImage { pixels: bytes })
        })
        .collect()
}

/// Periodic-motif malware against uniform-random goodware, `len` bytes each.
pub fn periodic_vs_uniform(seed: u64, n: usize, len: usize) -> Corpus {
    build(seed, n, |rng, label| match label {
        Label::Malware => {
            let period = rng.random_range(4..=16);
            periodic_bytes(rng, len, period)
        }
        Label::Goodware => uniform_bytes(rng, len),
    })
}

/// Parameters of [`local_structure`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalStructure {
    pub min_len: usize,
    pub max_len: usize,
    pub run: usize,
    pub coverage: f64,
}

impl Default for LocalStructure {
    fn default() -> Self {
        LocalStructure { min_len: 8192, max_len: 16384, run: 8, coverage: 0.5 }
    }
}

/// Run-carrying malware against uniform goodware with varying lengths.
pub fn local_structure(seed: u64, n: usize, params: LocalStructure) -> Corpus {
    build(seed, n, |rng, label| {
        let len = rng.random_range(params.min_len..=params.max_len);
        match label {
            Label::Malware => run_bytes(rng, len, params.run, params.coverage),
            Label::Goodware => uniform_bytes(rng, len),
        }
    })
}

/// Streams differing only in content, with ids derived from bytes.
pub fn random_stream(seed: u64, len: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0u8; len];
    rng.fill_bytes(&mut out);
    out
}
