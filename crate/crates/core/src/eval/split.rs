//! Train / validation / test partitioning.

use std::collections::{HashMap, HashSet};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::records::{validate_records, SampleRecord};
use super::{EvalError, Result};

/// Smallest population [`make_holdout_splits`] accepts.
pub const MIN_HOLDOUT_SAMPLES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    RandomHoldout,
    Temporal,
    Augmented,
}

/// Disjoint id sets for one experiment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub seed: u64,
    pub repetition: u64,
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl SplitPlan {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.valid.len(), self.test.len())
    }

    /// True when no id appears in two partitions (or twice in one).
    pub fn is_disjoint(&self) -> bool {
        let mut seen = HashSet::new();
        self.train.iter().chain(&self.valid).chain(&self.test).all(|id| seen.insert(id))
    }
}

/// Fractions of the population given to training and validation; the
/// remainder is the test set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.8, valid: 0.1 }
    }
}

impl SplitRatios {
    /// 90 % training, 10 % validation, nothing held out.
    pub const TRAIN_VALID_ONLY: SplitRatios = SplitRatios { train: 0.9, valid: 0.1 };

    fn validate(self) -> Result<()> {
        let ok = self.train > 0.0 && self.valid >= 0.0 && self.train + self.valid <= 1.0 + 1e-12;
        if ok {
            Ok(())
        } else {
            Err(EvalError::InvalidConfig(format!("bad split ratios {self:?}")))
        }
    }

    /// Partition sizes for `n` items: rounded train and validation counts,
    /// test takes the rest.
    pub fn counts(self, n: usize) -> (usize, usize, usize) {
        let train = ((n as f64 * self.train).round() as usize).min(n);
        let valid = ((n as f64 * self.valid).round() as usize).min(n - train);
        (train, valid, n - train - valid)
    }
}

fn rng_for(seed: u64, repetition: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(repetition);
    rng
}

fn cut(ids: Vec<String>, ratios: SplitRatios) -> (Vec<String>, Vec<String>, Vec<String>) {
    let (n_train, n_valid, _) = ratios.counts(ids.len());
    let mut ids = ids;
    let test = ids.split_off(n_train + n_valid);
    let valid = ids.split_off(n_train);
    (ids, valid, test)
}

/// One shuffled hold-out split.
pub fn holdout_split(records: &[SampleRecord], seed: u64, repetition: u64, ratios: SplitRatios) -> Result<SplitPlan> {
    ratios.validate()?;
    if records.len() < MIN_HOLDOUT_SAMPLES {
        return Err(EvalError::TooFewSamples { found: records.len(), needed: MIN_HOLDOUT_SAMPLES });
    }
    let mut ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    ids.shuffle(&mut rng_for(seed, repetition));
    let (train, valid, test) = cut(ids, ratios);
    Ok(SplitPlan { mode: SplitMode::RandomHoldout, seed, repetition, train, valid, test })
}

/// `repetitions` independent 80/10/10 hold-out splits.
pub fn make_holdout_splits(records: &[SampleRecord], seed: u64, repetitions: usize) -> Result<Vec<SplitPlan>> {
    (0..repetitions as u64)
        .map(|rep| holdout_split(records, seed, rep, SplitRatios::default()))
        .collect()
}

/// Temporally consistent split: records dated before `cutoff` are shuffled
/// into 80 % training / 20 % validation; everything on or after `cutoff` is
/// the test set.
pub fn make_temporal_split(records: &[SampleRecord], cutoff: NaiveDate, seed: u64) -> Result<SplitPlan> {
    let (before, after): (Vec<&SampleRecord>, Vec<&SampleRecord>) =
        records.iter().partition(|r| r.dex_date < cutoff);
    if before.is_empty() || after.is_empty() {
        return Err(EvalError::EmptySide { before: before.len(), after: after.len() });
    }
    let mut ids: Vec<String> = before.iter().map(|r| r.id.clone()).collect();
    ids.shuffle(&mut rng_for(seed, 0));
    let (train, valid, _) = cut(ids, SplitRatios { train: 0.8, valid: 0.2 });
    let test = after.iter().map(|r| r.id.clone()).collect();
    Ok(SplitPlan { mode: SplitMode::Temporal, seed, repetition: 0, train, valid, test })
}

/// What the augmented experiment is tested on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObfuscatedTest {
    /// The held-out base apps themselves.
    Base,
    /// Obfuscated variants of the held-out base apps, whose originals were
    /// never trained on.
    Obfuscated,
    /// Every obfuscated record not used for training or validation,
    /// including variants of apps that were trained on.
    AllObfuscated,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentOptions {
    /// Fraction in [0, 1] of available variants added to train and valid.
    pub fraction: f64,
    pub test: ObfuscatedTest,
    pub ratios: SplitRatios,
    pub seed: u64,
    pub repetition: u64,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions {
            fraction: 0.0,
            test: ObfuscatedTest::Base,
            ratios: SplitRatios::default(),
            seed: 0,
            repetition: 0,
        }
    }
}

/// Hold-out split of `base`, with training and validation augmented by a
/// fraction of their obfuscated variants from `obfuscated`.
pub fn make_augmented_split(
    base: &[SampleRecord],
    obfuscated: &[SampleRecord],
    opts: &AugmentOptions,
) -> Result<SplitPlan> {
    if !(0.0..=1.0).contains(&opts.fraction) {
        return Err(EvalError::InvalidConfig(format!("augmentation fraction {} outside [0, 1]", opts.fraction)));
    }
    if let Some(r) = base.iter().find(|r| r.obfuscated_of.is_some()) {
        return Err(EvalError::InvalidConfig(format!("base record {} is itself an obfuscated variant", r.id)));
    }
    let all: Vec<SampleRecord> = base.iter().chain(obfuscated).cloned().collect();
    validate_records(&all)?;
    let mut variants: HashMap<&str, Vec<String>> = HashMap::new();
    for r in obfuscated {
        match &r.obfuscated_of {
            Some(b) => variants.entry(b.as_str()).or_default().push(r.id.clone()),
            None => {
                return Err(EvalError::MissingLinkage { id: r.id.clone(), base: String::new() });
            }
        }
    }

    let mut plan = holdout_split(base, opts.seed, opts.repetition, opts.ratios)?;
    plan.mode = SplitMode::Augmented;
    // Separate stream so the base split matches a plain hold-out exactly.
    let mut rng = rng_for(opts.seed ^ 0xa5a5_a5a5_a5a5_a5a5, opts.repetition);
    let mut used = HashSet::new();
    for part in [&mut plan.train, &mut plan.valid] {
        let mut pool: Vec<String> = part
            .iter()
            .flat_map(|id| variants.get(id.as_str()).into_iter().flatten().cloned())
            .collect();
        pool.shuffle(&mut rng);
        let take = (pool.len() as f64 * opts.fraction).round() as usize;
        pool.truncate(take);
        used.extend(pool.iter().cloned());
        part.extend(pool);
    }
    plan.test = match opts.test {
        ObfuscatedTest::Base => plan.test,
        ObfuscatedTest::Obfuscated => plan
            .test
            .iter()
            .flat_map(|id| variants.get(id.as_str()).into_iter().flatten().cloned())
            .collect(),
        ObfuscatedTest::AllObfuscated => {
            obfuscated.iter().filter(|r| !used.contains(&r.id)).map(|r| r.id.clone()).collect()
        }
    };
    Ok(plan)
}
