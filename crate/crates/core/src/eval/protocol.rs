//! Repeated hold-out runs and the image-size ablation.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::metrics::{MetricsReport, MetricsSummary, METRIC_NAMES};
use super::records::{Dataset, Sample, SampleRecord};
use super::split::{make_holdout_splits, SplitPlan};
use super::train::{evaluate, train, TrainConfig, TrainOutcome};
use super::{EvalError, Result};
use crate::image::{normalize, resize_vector, VectorImage};
use crate::nn::{init_params, Architecture, NnError, PoolPadding};

/// Result of training and testing on one split.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub plan: SplitPlan,
    pub outcome: TrainOutcome,
    pub report: MetricsReport,
}

/// Train a freshly initialised network on `plan` and test it.
pub fn run_plan(dataset: &Dataset, plan: &SplitPlan, arch: Architecture, init_seed: u64, cfg: &TrainConfig) -> Result<RunResult> {
    let train_set = dataset.select(&plan.train)?;
    let valid_set = dataset.select(&plan.valid)?;
    let test_set = dataset.select(&plan.test)?;
    let net = init_params(init_seed, arch)?;
    let outcome = train(net, &train_set, &valid_set, cfg)?;
    let report = evaluate(&outcome.network, &test_set, cfg.threshold, cfg.exec)?;
    Ok(RunResult { plan: plan.clone(), outcome, report })
}

#[derive(Clone, Debug)]
pub struct ProtocolResult {
    pub runs: Vec<RunResult>,
    pub summary: MetricsSummary,
}

impl ProtocolResult {
    pub fn reports(&self) -> Vec<MetricsReport> {
        self.runs.iter().map(|r| r.report).collect()
    }
}

/// Train and test once per plan. Plan `i` uses `seed + i` both for weight
/// initialisation and for the epoch shuffles.
pub fn run_plans(
    dataset: &Dataset,
    plans: &[SplitPlan],
    arch: Architecture,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ProtocolResult> {
    let mut runs = Vec::with_capacity(plans.len());
    for (rep, plan) in plans.iter().enumerate() {
        let rep_seed = seed.wrapping_add(rep as u64);
        let rep_cfg = TrainConfig { seed: rep_seed, ..*cfg };
        let run = run_plan(dataset, plan, arch, rep_seed, &rep_cfg)?;
        log::info!(
            "run {}/{}: best epoch {}, test f1 {:?}",
            rep + 1,
            plans.len(),
            run.outcome.best_epoch,
            run.report.f1
        );
        runs.push(run);
    }
    let summary = MetricsSummary::from_reports(runs.iter().map(|r| &r.report));
    Ok(ProtocolResult { runs, summary })
}

/// `repetitions` shuffled 80/10/10 hold-out runs.
pub fn run_holdout_protocol(
    dataset: &Dataset,
    arch: Architecture,
    cfg: &TrainConfig,
    repetitions: usize,
    seed: u64,
) -> Result<ProtocolResult> {
    let plans = make_holdout_splits(&dataset.records(), seed, repetitions)?;
    run_plans(dataset, &plans, arch, cfg, seed)
}

/// Resize and normalise every raw image to `width`.
pub fn dataset_at_width(images: &[(SampleRecord, VectorImage)], width: usize) -> Result<Dataset> {
    let samples = images
        .iter()
        .map(|(record, image)| {
            let resized = resize_vector(image, width)?;
            Ok(Sample { record: record.clone(), image: normalize(&resized) })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOptions {
    pub widths: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
    /// Widths too narrow for two valid-padded extraction units fall back to
    /// keeping partial pooling windows instead of failing.
    pub same_padding_fallback: bool,
}

/// Network layout for `width`, honouring the fallback option.
pub fn ablation_architecture(width: usize, same_padding_fallback: bool) -> Result<Architecture> {
    match Architecture::new(width) {
        Ok(arch) => Ok(arch),
        Err(NnError::InputTooShort { .. }) if same_padding_fallback => {
            Ok(Architecture::with_padding(width, PoolPadding::Same)?)
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub width: usize,
    pub padding: PoolPadding,
    pub result: ProtocolResult,
}

/// Run the hold-out protocol once per width. `load` supplies the dataset at
/// a given width; ids (and therefore splits) must not change across widths.
pub fn resize_ablation(
    opts: &AblationOptions,
    cfg: &TrainConfig,
    mut load: impl FnMut(usize) -> Result<Dataset>,
) -> Result<Vec<AblationRow>> {
    if opts.widths.is_empty() {
        return Err(EvalError::InvalidConfig("no ablation widths given".into()));
    }
    let mut rows = Vec::with_capacity(opts.widths.len());
    for &width in &opts.widths {
        let arch = ablation_architecture(width, opts.same_padding_fallback)?;
        let dataset = load(width)?;
        if dataset.width() != Some(width) {
            return Err(EvalError::InvalidConfig(format!("dataset for width {width} has mixed or wrong widths")));
        }
        log::info!("ablation width {width} ({:?} pooling)", arch.pool_padding);
        let result = run_holdout_protocol(&dataset, arch, cfg, opts.repetitions, opts.seed)?;
        rows.push(AblationRow { width, padding: arch.pool_padding, result });
    }
    Ok(rows)
}

/// Plain-text table with one row per width.
pub struct AblationTable<'a>(pub &'a [AblationRow]);

impl fmt::Display for AblationTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<14}", "size")?;
        for name in METRIC_NAMES {
            write!(f, " {name:>22}")?;
        }
        writeln!(f)?;
        for row in self.0 {
            let side = (row.width as f64).sqrt().round() as usize;
            let size = if side * side == row.width { format!("1x{side}^2") } else { format!("1x{}", row.width) };
            let size = if row.padding == PoolPadding::Same { format!("{size}*") } else { size };
            write!(f, "{size:<14}")?;
            for m in row.result.summary.values() {
                write!(f, " {:>22}", m.to_string())?;
            }
            writeln!(f)?;
        }
        if self.0.iter().any(|r| r.padding == PoolPadding::Same) {
            writeln!(f, "* partial pooling windows kept")?;
        }
        Ok(())
    }
}

/// Serialisable per-run line for `metrics.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunLine {
    pub repetition: u64,
    pub width: usize,
    pub best_epoch: usize,
    pub epochs: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    #[serde(flatten)]
    pub report: MetricsReport,
}

impl RunLine {
    pub fn new(run: &RunResult, width: usize) -> Self {
        let (train, valid, test) = run.plan.sizes();
        RunLine {
            repetition: run.plan.repetition,
            width,
            best_epoch: run.outcome.best_epoch,
            epochs: run.outcome.history.len(),
            train,
            valid,
            test,
            report: run.report,
        }
    }
}
