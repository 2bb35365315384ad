use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::ArrayView1;
use serde::Serialize;

use super::{Datasets, KlSample};
use crate::ablation::patched_forward;
use crate::error::{Error, Result};
use crate::graph::Circuit;
use crate::model::Model;
use crate::stats::{min_samples, quantile_sorted, sorted_copy, summarize, BoundMethod};
use crate::tasks::{Role, Tokenizer};

/// `(p, δ, ε)` rows of the default bounds table.
pub const DEFAULT_BOUND_ROWS: [(f64, f64, f64); 6] = [
    (0.95, 0.95, 0.01),
    (0.95, 0.99, 0.01),
    (0.95, 0.95, 0.04),
    (0.99, 0.95, 0.005),
    (0.99, 0.99, 0.005),
    (0.999, 0.999, 0.0005),
];

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Malformed(format!("{}: {other:?}", path.display())),
    }
}

fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub statistic: String,
    pub value: f64,
    pub z_score: Option<f64>,
}

/// Count, mean and std, then one row per summary quantile with its z-score.
pub fn summary_rows(kls: &[f64]) -> Result<Vec<SummaryRow>> {
    let t = summarize(kls)?;
    let mut rows = vec![
        SummaryRow {
            statistic: "count".into(),
            value: t.count as f64,
            z_score: None,
        },
        SummaryRow {
            statistic: "mean".into(),
            value: t.mean,
            z_score: None,
        },
        SummaryRow {
            statistic: "std".into(),
            value: t.std,
            z_score: None,
        },
    ];
    rows.extend(t.quantiles.into_iter().map(|q| SummaryRow {
        statistic: q.label,
        value: q.value,
        z_score: Some(q.z_score),
    }));
    Ok(rows)
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_csv(
        path,
        &["statistic", "value", "z_score"],
        rows.iter().map(|r| {
            [
                r.statistic.clone(),
                r.value.to_string(),
                r.z_score.map(|z| z.to_string()).unwrap_or_default(),
            ]
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `counts.len() + 1` ascending edges from 0 to the max.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Equal-width bins over `[0, max]`, the last bin closed on the right.
/// When every sample is 0 the histogram has a single bin `[0, 0]`.
pub fn histogram(samples: &[f64], n_bins: usize) -> Result<Histogram> {
    if samples.is_empty() {
        return Err(Error::Degenerate("histogram of no samples".into()));
    }
    if n_bins < 1 {
        return Err(Error::Range("n_bins must be at least 1".into()));
    }
    if let Some(bad) = samples.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::Range(format!(
            "histogram sample {bad} is not a finite nonnegative value"
        )));
    }
    let max = samples.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(Histogram {
            edges: vec![0.0, 0.0],
            counts: vec![samples.len() as u64],
        });
    }
    let edges: Vec<f64> = (0..=n_bins)
        .map(|i| max * i as f64 / n_bins as f64)
        .collect();
    let mut counts = vec![0u64; n_bins];
    for &x in samples {
        let mut b = ((x / max * n_bins as f64) as usize).min(n_bins - 1);
        // Agree with the printed edges despite rounding in the division.
        while b > 0 && x < edges[b] {
            b -= 1;
        }
        while b + 1 < n_bins && x >= edges[b + 1] {
            b += 1;
        }
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

pub fn write_histogram_csv(path: &Path, h: &Histogram) -> Result<()> {
    write_csv(
        path,
        &["bin", "lower", "upper", "count"],
        h.counts.iter().enumerate().map(|(i, c)| {
            [
                i.to_string(),
                h.edges[i].to_string(),
                h.edges[i + 1].to_string(),
                c.to_string(),
            ]
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorstRow {
    pub clean_index: usize,
    pub corrupt_index: usize,
    pub clean_text: String,
    pub corrupt_text: String,
    pub kl_nats: f64,
    /// Most likely next tokens with their raw logits, highest first.
    pub model_top3: Vec<(String, f64)>,
    pub circuit_top3: Vec<(String, f64)>,
}

fn top3(logits: ArrayView1<f64>, tokenizer: &Tokenizer) -> Vec<(String, f64)> {
    let mut ids: Vec<usize> = (0..logits.len()).collect();
    ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    ids.into_iter()
        .take(3)
        .map(|id| {
            let word = tokenizer
                .word(id)
                .map(str::to_string)
                .unwrap_or_else(|_| format!("<{id}>"));
            (word, logits[id])
        })
        .collect()
}

/// Indices of the `k` largest samples: KL descending, then clean index and
/// corrupt index ascending.
pub fn worst_indices(samples: &[KlSample], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let key = |i: usize| (samples[i].clean_index, samples[i].corrupt_index);
    let cmp = |&a: &usize, &b: &usize| {
        samples[b]
            .kl_nats
            .total_cmp(&samples[a].kl_nats)
            .then(key(a).cmp(&key(b)))
    };
    let k = k.min(order.len());
    if k > 0 && k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    order
}

/// The `k` worst pairs, with both forward passes rerun to report the top
/// three tokens of the model and of the circuit at the final position.
pub fn worst_k(
    samples: &[KlSample],
    k: usize,
    model: &Model,
    circuit: &Circuit,
    datasets: &Datasets,
    tokenizer: &Tokenizer,
) -> Result<Vec<WorstRow>> {
    if k < 1 {
        return Err(Error::Range("k must be at least 1".into()));
    }
    worst_indices(samples, k)
        .into_iter()
        .map(|n| {
            let s = &samples[n];
            let clean = datasets.clean.get(s.clean_index).ok_or_else(|| {
                Error::Malformed(format!("clean index {} not in dataset", s.clean_index))
            })?;
            let corrupt = datasets.corrupt.get(s.corrupt_index).ok_or_else(|| {
                Error::Malformed(format!("corrupt index {} not in dataset", s.corrupt_index))
            })?;
            let last = clean.tokens.len() - 1;
            let (model_logits, _) = model.forward(&clean.tokens)?;
            let patched = patched_forward(model, circuit, &clean.tokens, &corrupt.tokens)?;
            Ok(WorstRow {
                clean_index: s.clean_index,
                corrupt_index: s.corrupt_index,
                clean_text: clean.text.clone(),
                corrupt_text: corrupt.text.clone(),
                kl_nats: s.kl_nats,
                model_top3: top3(model_logits.row(last), tokenizer),
                circuit_top3: top3(patched.logits.row(last), tokenizer),
            })
        })
        .collect()
}

pub fn write_worst_csv(path: &Path, rows: &[WorstRow]) -> Result<()> {
    let mut header = vec![
        "rank",
        "clean_index",
        "corrupt_index",
        "kl_nats",
        "clean_text",
        "corrupt_text",
    ];
    let names = [
        [
            "model_1",
            "model_1_logit",
            "model_2",
            "model_2_logit",
            "model_3",
            "model_3_logit",
        ],
        [
            "circuit_1",
            "circuit_1_logit",
            "circuit_2",
            "circuit_2_logit",
            "circuit_3",
            "circuit_3_logit",
        ],
    ];
    header.extend(names.iter().flatten());
    write_csv(
        path,
        &header,
        rows.iter().enumerate().map(|(rank, r)| {
            let mut rec = vec![
                (rank + 1).to_string(),
                r.clean_index.to_string(),
                r.corrupt_index.to_string(),
                r.kl_nats.to_string(),
                r.clean_text.clone(),
                r.corrupt_text.clone(),
            ];
            for top in [&r.model_top3, &r.circuit_top3] {
                for i in 0..3 {
                    match top.get(i) {
                        Some((w, l)) => rec.extend([w.clone(), l.to_string()]),
                        None => rec.extend([String::new(), String::new()]),
                    }
                }
            }
            rec
        }),
    )
}

/// A slot of the clean or corrupted prompt, written `clean.object`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub role: Role,
    pub field: String,
}

impl FieldSpec {
    pub fn file_stem(&self) -> String {
        format!("{}-{}", self.role, self.field)
    }

    fn value<'a>(&self, s: &'a KlSample) -> Result<&'a str> {
        let fields = match self.role {
            Role::Clean => &s.clean_fields,
            Role::Corrupt => &s.corrupt_fields,
        };
        fields
            .get(&self.field)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownField(self.to_string()))
    }
}

impl fmt::Display for FieldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.role, self.field)
    }
}

impl FromStr for FieldSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (role, field) = s
            .split_once('.')
            .ok_or_else(|| Error::UnknownField(s.to_string()))?;
        let role = match role {
            "clean" => Role::Clean,
            "corrupt" => Role::Corrupt,
            _ => return Err(Error::UnknownField(s.to_string())),
        };
        if field.is_empty() {
            return Err(Error::UnknownField(s.to_string()));
        }
        Ok(FieldSpec {
            role,
            field: field.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PercentileLevel {
    #[serde(rename = "max")]
    Max,
    #[serde(rename = "99.9")]
    P99_9,
    #[serde(rename = "99.99")]
    P99_99,
}

impl PercentileLevel {
    pub const DEFAULT: [PercentileLevel; 3] = [
        PercentileLevel::Max,
        PercentileLevel::P99_9,
        PercentileLevel::P99_99,
    ];

    pub fn level(&self) -> f64 {
        match self {
            PercentileLevel::Max => 1.0,
            PercentileLevel::P99_9 => 0.999,
            PercentileLevel::P99_99 => 0.9999,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            PercentileLevel::Max => "max",
            PercentileLevel::P99_9 => "99.9",
            PercentileLevel::P99_99 => "99.99",
        }
    }
}

impl FromStr for PercentileLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PercentileLevel::DEFAULT
            .into_iter()
            .find(|l| l.label() == s.trim_end_matches('%'))
            .ok_or_else(|| {
                Error::Range(format!(
                    "percentile level `{s}` (expected max, 99.9 or 99.99)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapCell {
    pub field_a_value: String,
    pub field_b_value: String,
    pub percentile_level: PercentileLevel,
    pub kl_value: f64,
    pub cell_count: usize,
}

/// KL percentiles within each group of samples sharing both field values.
/// Groups come out in lexicographic order of their values.
pub fn group_percentiles(
    samples: &[KlSample],
    field_a: &FieldSpec,
    field_b: &FieldSpec,
    levels: &[PercentileLevel],
) -> Result<Vec<HeatmapCell>> {
    let mut groups: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for s in samples {
        groups
            .entry((field_a.value(s)?, field_b.value(s)?))
            .or_default()
            .push(s.kl_nats);
    }
    let mut cells = Vec::with_capacity(groups.len() * levels.len());
    for ((a, b), kls) in groups {
        let sorted = sorted_copy(&kls);
        for &level in levels {
            cells.push(HeatmapCell {
                field_a_value: a.to_string(),
                field_b_value: b.to_string(),
                percentile_level: level,
                kl_value: quantile_sorted(&sorted, level.level()),
                cell_count: sorted.len(),
            });
        }
    }
    Ok(cells)
}

pub fn write_heatmap_csv(path: &Path, cells: &[HeatmapCell]) -> Result<()> {
    write_csv(
        path,
        &[
            "field_a_value",
            "field_b_value",
            "percentile_level",
            "kl_value",
            "cell_count",
        ],
        cells.iter().map(|c| {
            [
                c.field_a_value.clone(),
                c.field_b_value.clone(),
                c.percentile_level.label().to_string(),
                c.kl_value.to_string(),
                c.cell_count.to_string(),
            ]
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundsRow {
    pub p: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub exact: u64,
    pub chernoff: u64,
    pub hoeffding: u64,
}

/// Minimum sample counts under each bound for every `(p, δ, ε)` row.
pub fn bounds_table(rows: &[(f64, f64, f64)]) -> Result<Vec<BoundsRow>> {
    rows.iter()
        .map(|&(p, delta, epsilon)| {
            Ok(BoundsRow {
                p,
                delta,
                epsilon,
                exact: min_samples(p, delta, epsilon, BoundMethod::Exact)?,
                chernoff: min_samples(p, delta, epsilon, BoundMethod::Chernoff)?,
                hoeffding: min_samples(p, delta, epsilon, BoundMethod::Hoeffding)?,
            })
        })
        .collect()
}

pub fn write_bounds_csv(out: impl std::io::Write, rows: &[BoundsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Malformed(e.to_string());
    w.write_record(["p", "delta", "epsilon", "exact", "chernoff", "hoeffding"])
        .map_err(io)?;
    for r in rows {
        w.write_record([
            r.p.to_string(),
            r.delta.to_string(),
            r.epsilon.to_string(),
            r.exact.to_string(),
            r.chernoff.to_string(),
            r.hoeffding.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("<output>", e))
}
