use std::io::{self, Write};

use super::records::Label;
use super::{EvalError, Result};

/// ROC curve from the strictest threshold to the loosest.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` pairs, starting at (0, 0) and ending at (1, 1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Sweep every distinct score as a threshold (score >= threshold is
/// positive). Tied scores move both rates in one step, so the trapezoidal
/// area counts ties as one half, the same as the Mann-Whitney statistic.
pub fn roc_curve(scores: &[f64], labels: &[Label]) -> Result<RocCurve> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(bad));
    }
    let positives = labels.iter().filter(|l| l.is_malware()).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::OneClassOnly);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (p, n) = (positives as f64, negatives as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]].is_malware() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (x0, y0) = *points.last().unwrap();
        let (x1, y1) = (fp as f64 / n, tp as f64 / p);
        auc += (x1 - x0) * (y0 + y1) / 2.0;
        points.push((x1, y1));
    }
    Ok(RocCurve { points, auc })
}

/// Two whitespace-separated columns, `fpr tpr`, one point per line.
pub fn write_points(mut w: impl Write, curve: &RocCurve) -> io::Result<()> {
    for (x, y) in &curve.points {
        writeln!(w, "{x} {y}")?;
    }
    Ok(())
}
