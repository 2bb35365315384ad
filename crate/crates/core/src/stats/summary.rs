use serde::Serialize;

use crate::error::{Error, Result};

/// Named rows of a [`SummaryTable`] with their quantile levels.
pub const SUMMARY_LEVELS: [(&str, f64); 9] = [
    ("min", 0.0),
    ("25%", 0.25),
    ("50%", 0.5),
    ("75%", 0.75),
    ("95%", 0.95),
    ("99%", 0.99),
    ("99.9%", 0.999),
    ("99.99%", 0.9999),
    ("max", 1.0),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileRow {
    pub label: String,
    pub level: f64,
    pub value: f64,
    pub z_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryTable {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation (`n − 1` denominator).
    pub std: f64,
    pub quantiles: Vec<QuantileRow>,
}

impl SummaryTable {
    pub fn get(&self, label: &str) -> Option<&QuantileRow> {
        self.quantiles.iter().find(|r| r.label == label)
    }
}

/// `(value − mean) / std`: distance from the mean in standard deviations.
pub fn z_score(value: f64, mean: f64, std: f64) -> f64 {
    (value - mean) / std
}

/// Quantile of sorted data by linear interpolation between order
/// statistics, inclusive endpoints (`level` 0 is the min, 1 the max).
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * level.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let (a, b) = (sorted[lo], sorted[hi]);
    (a + (h - lo as f64) * (b - a)).clamp(a, b)
}

pub fn sorted_copy(samples: &[f64]) -> Vec<f64> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

pub fn summarize(samples: &[f64]) -> Result<SummaryTable> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 samples, got {n}"
        )));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::Degenerate("non-finite sample".into()));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::Degenerate(
            "all samples are equal; std is zero".into(),
        ));
    }
    let sorted = sorted_copy(samples);
    let quantiles = SUMMARY_LEVELS
        .iter()
        .map(|&(label, level)| {
            let value = quantile_sorted(&sorted, level);
            QuantileRow {
                label: label.to_string(),
                level,
                value,
                z_score: z_score(value, mean, std),
            }
        })
        .collect();
    Ok(SummaryTable {
        count: n,
        mean,
        std,
        quantiles,
    })
}
