//! Dense depth error metrics and before/after improvement records.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Base of the δ accuracy thresholds (`1.25^k`, k = 1, 2, 3).
pub const DELTA_BASE: f64 = 1.25;
/// Lower clamp applied to predictions before the ratio metrics.
pub const PRED_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    pub rmse: f64,
    pub mae: f64,
    pub mre: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
}

/// Metrics of `pred` against `gt` over the pixels where `valid` is nonzero
/// (all pixels when `valid` is `None`).
pub fn evaluate(pred: &Tensor, gt: &Tensor, valid: Option<&Tensor>) -> Result<MetricRecord> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape {
            op: "evaluate",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    if let Some(v) = valid {
        if v.shape() != gt.shape() {
            return Err(Error::Shape {
                op: "evaluate mask",
                lhs: gt.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
    }
    let mut n = 0usize;
    let (mut se, mut ae, mut re) = (0.0, 0.0, 0.0);
    let mut within = [0usize; 3];
    let thresholds = [DELTA_BASE, DELTA_BASE.powi(2), DELTA_BASE.powi(3)];
    for i in 0..gt.len() {
        if valid.is_some_and(|v| v.data()[i] == 0.0) {
            continue;
        }
        let (p, d) = (pred.data()[i], gt.data()[i]);
        if d <= 0.0 {
            return Err(Error::Config(format!(
                "ground truth must be positive on valid pixels, found {d} at index {i}"
            )));
        }
        n += 1;
        let err = p - d;
        se += err * err;
        ae += err.abs();
        let pc = p.max(PRED_FLOOR);
        re += (pc - d).abs() / d;
        let ratio = (pc / d).max(d / pc);
        for (k, t) in thresholds.iter().enumerate() {
            if ratio < *t {
                within[k] += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let nf = n as f64;
    Ok(MetricRecord {
        rmse: (se / nf).sqrt(),
        mae: ae / nf,
        mre: re / nf,
        delta1: within[0] as f64 / nf,
        delta2: within[1] as f64 / nf,
        delta3: within[2] as f64 / nf,
        n_pixels: n,
    })
}

impl MetricRecord {
    /// Element-wise mean of several records; `n_pixels` is summed.
    pub fn mean(records: &[MetricRecord]) -> Option<MetricRecord> {
        if records.is_empty() {
            return None;
        }
        let k = records.len() as f64;
        let avg = |f: fn(&MetricRecord) -> f64| records.iter().map(f).sum::<f64>() / k;
        Some(MetricRecord {
            rmse: avg(|r| r.rmse),
            mae: avg(|r| r.mae),
            mre: avg(|r| r.mre),
            delta1: avg(|r| r.delta1),
            delta2: avg(|r| r.delta2),
            delta3: avg(|r| r.delta3),
            n_pixels: records.iter().map(|r| r.n_pixels).sum(),
        })
    }

    /// Element-wise median.
    pub fn median(records: &[MetricRecord]) -> Option<MetricRecord> {
        if records.is_empty() {
            return None;
        }
        let med = |f: fn(&MetricRecord) -> f64| {
            let mut v: Vec<f64> = records.iter().map(f).collect();
            v.sort_by(f64::total_cmp);
            let m = v.len() / 2;
            if v.len() % 2 == 1 {
                v[m]
            } else {
                0.5 * (v[m - 1] + v[m])
            }
        };
        Some(MetricRecord {
            rmse: med(|r| r.rmse),
            mae: med(|r| r.mae),
            mre: med(|r| r.mre),
            delta1: med(|r| r.delta1),
            delta2: med(|r| r.delta2),
            delta3: med(|r| r.delta3),
            n_pixels: records.iter().map(|r| r.n_pixels).sum(),
        })
    }
}

/// Relative reduction of one error metric, in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Percent(pub Option<f64>);

impl Percent {
    pub fn between(before: f64, after: f64) -> Self {
        if before == 0.0 {
            Percent(None)
        } else {
            Percent(Some(100.0 * (before - after) / before))
        }
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            None => f.write_str("n/a"),
            Some(v) => {
                // avoid printing "-0.0%"
                let r = (v * 10.0).round() / 10.0;
                let r = if r == 0.0 { 0.0 } else { r };
                write!(f, "{r:+.1}%")
            }
        }
    }
}

/// Relative improvement of each error metric; positive means `after` is better.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Improvement {
    pub rmse: Percent,
    pub mae: Percent,
    pub mre: Percent,
}

pub fn improvement(before: &MetricRecord, after: &MetricRecord) -> Improvement {
    Improvement {
        rmse: Percent::between(before.rmse, after.rmse),
        mae: Percent::between(before.mae, after.mae),
        mre: Percent::between(before.mre, after.mre),
    }
}

/// Header of the table-style CSV rows.
pub const CSV_HEADER: &str = "method,n_samples,pct_samples,rmse,mae,mre,d1,d2,d3";

/// One CSV row; δ values are written as percentages. When `vs` is given, the
/// error columns carry a `(+x.x%)` annotation relative to it.
pub fn csv_row(
    method: &str,
    n_samples: usize,
    pct_samples: f64,
    rec: &MetricRecord,
    vs: Option<&MetricRecord>,
) -> String {
    let ann = |after: f64, before: Option<f64>| match before {
        Some(b) => format!("{after:.4} ({})", Percent::between(b, after)),
        None => format!("{after:.4}"),
    };
    format!(
        "{method},{n_samples},{pct_samples:.3},{},{},{},{:.1},{:.1},{:.1}",
        ann(rec.rmse, vs.map(|v| v.rmse)),
        ann(rec.mae, vs.map(|v| v.mae)),
        ann(rec.mre, vs.map(|v| v.mre)),
        100.0 * rec.delta1,
        100.0 * rec.delta2,
        100.0 * rec.delta3,
    )
}
