use std::fmt;

use serde::{Deserialize, Serialize};

use super::records::Label;

/// Decision threshold: a score at or above it is classified as malware.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Confusion { tp, fp, tn, fn_ }
    }

    pub fn from_scores(scores: &[f64], labels: &[Label], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l.is_malware()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Detection metrics. A metric whose denominator is zero is `None`
/// (serialised as `null`), never silently 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub confusion: Confusion,
    pub threshold: f64,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Confusion, threshold: f64) -> Self {
        let Confusion { tp, fp, tn, fn_ } = confusion;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        MetricsReport {
            confusion,
            threshold,
            accuracy: ratio(tp + tn, confusion.total()),
            precision,
            recall,
            f1,
        }
    }

    pub fn from_scores(scores: &[f64], labels: &[Label], threshold: f64) -> Self {
        Self::from_confusion(Confusion::from_scores(scores, labels, threshold), threshold)
    }

    /// The four headline metrics in table order.
    pub fn values(&self) -> [Option<f64>; 4] {
        [self.accuracy, self.precision, self.recall, self.f1]
    }

    /// Names of undefined metrics, empty when all are defined.
    pub fn undefined(&self) -> Vec<&'static str> {
        METRIC_NAMES.iter().zip(self.values()).filter(|(_, v)| v.is_none()).map(|(n, _)| *n).collect()
    }
}

pub const METRIC_NAMES: [&str; 4] = ["accuracy", "precision", "recall", "f1"];

/// Mean and sample standard deviation over the defined values of a metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub defined: usize,
    pub total: usize,
}

impl MetricSummary {
    pub fn from_values(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let values: Vec<Option<f64>> = values.into_iter().collect();
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let n = defined.len();
        let mean = (n > 0).then(|| defined.iter().sum::<f64>() / n as f64);
        let std = mean.map(|m| {
            if n < 2 {
                0.0
            } else {
                (defined.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            }
        });
        MetricSummary { mean, std, defined: n, total: values.len() }
    }
}

impl fmt::Display for MetricSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => {
                write!(f, "{m:.4} ± {s:.4}")?;
                if self.defined < self.total {
                    write!(f, " ({}/{} defined)", self.defined, self.total)?;
                }
                Ok(())
            }
            _ => f.write_str("undefined"),
        }
    }
}

/// Means over repeated runs for all four metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub accuracy: MetricSummary,
    pub precision: MetricSummary,
    pub recall: MetricSummary,
    pub f1: MetricSummary,
}

impl MetricsSummary {
    pub fn from_reports<'a>(reports: impl IntoIterator<Item = &'a MetricsReport> + Clone) -> Self {
        let pick = |i: usize| MetricSummary::from_values(reports.clone().into_iter().map(|r| r.values()[i]));
        MetricsSummary { accuracy: pick(0), precision: pick(1), recall: pick(2), f1: pick(3) }
    }

    pub fn values(&self) -> [MetricSummary; 4] {
        [self.accuracy, self.precision, self.recall, self.f1]
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"))
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.confusion;
        writeln!(f, "tp={} fp={} tn={} fn={} (threshold {})", c.tp, c.fp, c.tn, c.fn_, self.threshold)?;
        writeln!(f, "{:<10} {:>10}", "metric", "value")?;
        for (name, v) in METRIC_NAMES.iter().zip(self.values()) {
            writeln!(f, "{name:<10} {:>10}", cell(v))?;
        }
        Ok(())
    }
}
