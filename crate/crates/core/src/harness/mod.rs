//! End-to-end evaluation runs.
//!
//! A run generates clean and corrupted prompts from a master seed, evaluates
//! the circuit on every pair chosen by the pairing mode and writes one
//! [`KlSample`] per pair to `samples.jsonl`. Every report is a pure function
//! of that file plus the model and circuit.

mod reports;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ablation::{
    evaluate_pair, model_distribution, with_workers, CompiledCircuit, CorruptCache,
};
use crate::error::{Error, Result};
use crate::graph::{parse_circuit, Circuit};
use crate::model::{load_model, Model};
use crate::tasks::{
    builtin_tokenizer, generate_pairs, generate_prompts, PairingMode, PromptInstance, Role,
    TaskKind, TaskTemplate, Tokenizer,
};

pub use reports::{
    bounds_table, group_percentiles, histogram, summary_rows, worst_indices, worst_k,
    write_bounds_csv, write_heatmap_csv, write_histogram_csv, write_summary_csv, write_worst_csv,
    BoundsRow, FieldSpec, HeatmapCell, Histogram, PercentileLevel, SummaryRow, WorstRow,
    DEFAULT_BOUND_ROWS,
};

pub const SAMPLES_FILE: &str = "samples.jsonl";

/// Pairs evaluated per parallel batch; bounds peak memory of a run.
const CHUNK: usize = 1 << 16;

fn default_workers() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_bins() -> usize {
    100
}

fn default_worst() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportToggles {
    #[serde(default = "default_true")]
    pub summary: bool,
    #[serde(default = "default_true")]
    pub histogram: bool,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// Rows in the worst-pairs table; 0 disables it.
    #[serde(default = "default_worst")]
    pub worst_k: usize,
    /// Field pairs such as `["clean.place", "clean.object"]`.
    #[serde(default)]
    pub heatmaps: Vec<[String; 2]>,
}

impl Default for ReportToggles {
    fn default() -> Self {
        ReportToggles {
            summary: true,
            histogram: true,
            histogram_bins: default_bins(),
            worst_k: default_worst(),
            heatmaps: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model_path: PathBuf,
    pub circuit_path: PathBuf,
    pub task: TaskKind,
    pub n_clean: usize,
    pub n_corrupt: usize,
    #[serde(default)]
    pub pairing: PairingMode,
    #[serde(default)]
    pub master_seed: u64,
    /// Worker threads; 0 uses every core.
    #[serde(default = "default_workers")]
    pub worker_count: usize,
    pub output_dir: PathBuf,
    /// IOI only: name order in the first sentence swapped.
    #[serde(default)]
    pub swap_names: bool,
    #[serde(default)]
    pub reports: ReportToggles,
}

impl RunConfig {
    /// Parses a TOML document, or JSON when the text starts with `{`.
    pub fn from_str_auto(text: &str) -> Result<Self> {
        let config: RunConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?
        };
        Ok(config)
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_str_auto(&text)?;
        if let Some(base) = path.parent() {
            for p in [
                &mut config.model_path,
                &mut config.circuit_path,
                &mut config.output_dir,
            ] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clean < 1 || self.n_corrupt < 1 {
            return Err(Error::InvalidConfig(
                "n_clean and n_corrupt must be at least 1".into(),
            ));
        }
        if self.swap_names && self.task != TaskKind::Ioi {
            return Err(Error::InvalidConfig(
                "swap_names applies to the ioi task only".into(),
            ));
        }
        if self.reports.histogram_bins < 1 {
            return Err(Error::InvalidConfig(
                "histogram_bins must be at least 1".into(),
            ));
        }
        for pair in &self.reports.heatmaps {
            for spec in pair {
                spec.parse::<FieldSpec>()?;
            }
        }
        Ok(())
    }

    pub fn template(&self) -> TaskTemplate {
        if self.swap_names {
            TaskTemplate::ioi_swapped()
        } else {
            TaskTemplate::builtin(self.task)
        }
    }

    pub fn samples_path(&self) -> PathBuf {
        self.output_dir.join(SAMPLES_FILE)
    }
}

/// Generated prompts of a run.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub kind: TaskKind,
    pub clean: Vec<PromptInstance>,
    pub corrupt: Vec<PromptInstance>,
}

impl Datasets {
    pub fn generate(config: &RunConfig, tokenizer: &Tokenizer) -> Result<Self> {
        let template = config.template();
        Ok(Datasets {
            kind: config.task,
            clean: generate_prompts(
                &template,
                tokenizer,
                config.n_clean,
                config.master_seed,
                Role::Clean,
            )?,
            corrupt: generate_prompts(
                &template,
                tokenizer,
                config.n_corrupt,
                config.master_seed,
                Role::Corrupt,
            )?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlSample {
    pub clean_index: usize,
    pub corrupt_index: usize,
    pub kl_nats: f64,
    pub clean_fields: Arc<BTreeMap<String, String>>,
    pub corrupt_fields: Arc<BTreeMap<String, String>>,
}

pub fn load_model_file(path: &Path) -> Result<Model> {
    load_model(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_circuit_file(path: &Path, model: &Model) -> Result<Circuit> {
    parse_circuit(
        &fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
        &model.config,
    )
}

fn check_compatible(model: &Model, tokenizer: &Tokenizer, datasets: &Datasets) -> Result<()> {
    if model.config.vocab_size < tokenizer.vocab_size() {
        return Err(Error::InvalidConfig(format!(
            "model vocabulary ({}) is smaller than the task vocabulary ({})",
            model.config.vocab_size,
            tokenizer.vocab_size()
        )));
    }
    let len = datasets.clean[0].tokens.len();
    if len > model.config.max_seq_len {
        return Err(Error::InvalidConfig(format!(
            "prompts have {len} tokens, model max_seq_len is {}",
            model.config.max_seq_len
        )));
    }
    Ok(())
}

/// Evaluates every pair chosen by `pairing`, in pair-stream order.
///
/// Each corrupt index gets one cached unablated pass and each clean index one
/// model distribution; the result is independent of `workers`.
pub fn evaluate(
    model: &Model,
    circuit: &Circuit,
    datasets: &Datasets,
    pairing: PairingMode,
    workers: usize,
) -> Result<Vec<KlSample>> {
    let compiled = CompiledCircuit::new(model, circuit)?;
    let pairs = generate_pairs(&datasets.clean, &datasets.corrupt, pairing, datasets.kind)?;
    let clean_fields: Vec<_> = datasets
        .clean
        .iter()
        .map(|p| Arc::new(p.fields.clone()))
        .collect();
    let corrupt_fields: Vec<_> = datasets
        .corrupt
        .iter()
        .map(|p| Arc::new(p.fields.clone()))
        .collect();

    with_workers(workers, || {
        let mut caches: HashMap<usize, Arc<CorruptCache>> = HashMap::new();
        let mut dists = HashMap::new();
        let mut out = Vec::with_capacity(pairs.len());
        let mut pairs = pairs.enumerate().peekable();
        while pairs.peek().is_some() {
            let chunk: Vec<(usize, (usize, usize))> = pairs.by_ref().take(CHUNK).collect();

            let mut need_corrupt: Vec<usize> = chunk
                .iter()
                .map(|(_, (_, j))| *j)
                .filter(|j| !caches.contains_key(j))
                .collect();
            need_corrupt.sort_unstable();
            need_corrupt.dedup();
            let built: Vec<Result<CorruptCache>> = need_corrupt
                .par_iter()
                .map(|&j| CorruptCache::new(model, &datasets.corrupt[j].tokens))
                .collect();
            for (j, cache) in need_corrupt.into_iter().zip(built) {
                caches.insert(
                    j,
                    Arc::new(cache.map_err(|e| pair_error(&chunk, |p| p.1 == j, e))?),
                );
            }

            let mut need_clean: Vec<usize> = chunk
                .iter()
                .map(|(_, (i, _))| *i)
                .filter(|i| !dists.contains_key(i))
                .collect();
            need_clean.sort_unstable();
            need_clean.dedup();
            let built: Vec<_> = need_clean
                .par_iter()
                .map(|&i| model_distribution(model, &datasets.clean[i].tokens))
                .collect();
            for (i, dist) in need_clean.into_iter().zip(built) {
                dists.insert(i, dist.map_err(|e| pair_error(&chunk, |p| p.0 == i, e))?);
            }

            let results: Vec<Result<f64>> = chunk
                .par_iter()
                .map(|&(_, (i, j))| {
                    evaluate_pair(
                        model,
                        &compiled,
                        &datasets.clean[i].tokens,
                        &dists[&i],
                        &caches[&j],
                    )
                    .map(|r| r.kl_nats)
                })
                .collect();
            for (&(n, (i, j)), r) in chunk.iter().zip(results) {
                let kl_nats = r.map_err(|e| Error::Pair {
                    index: n,
                    source: Box::new(e),
                })?;
                out.push(KlSample {
                    clean_index: i,
                    corrupt_index: j,
                    kl_nats,
                    clean_fields: clean_fields[i].clone(),
                    corrupt_fields: corrupt_fields[j].clone(),
                });
            }
        }
        Ok(out)
    })?
}

/// Tags an error with the first pair of the chunk that triggered it.
fn pair_error(
    chunk: &[(usize, (usize, usize))],
    hit: impl Fn(&(usize, usize)) -> bool,
    e: Error,
) -> Error {
    let index = chunk
        .iter()
        .find(|(_, p)| hit(p))
        .map(|(n, _)| *n)
        .unwrap_or(0);
    Error::Pair {
        index,
        source: Box::new(e),
    }
}

/// Everything a run needs, loaded and checked.
pub struct RunInputs {
    pub model: Model,
    pub circuit: Circuit,
    pub tokenizer: &'static Tokenizer,
    pub datasets: Datasets,
}

impl RunInputs {
    pub fn load(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = load_model_file(&config.model_path)?;
        let circuit = load_circuit_file(&config.circuit_path, &model)?;
        let tokenizer = builtin_tokenizer();
        let datasets = Datasets::generate(config, tokenizer)?;
        check_compatible(&model, tokenizer, &datasets)?;
        Ok(RunInputs {
            model,
            circuit,
            tokenizer,
            datasets,
        })
    }
}

/// Loads inputs, evaluates every pair and writes the samples file.
pub fn run_evaluation(config: &RunConfig) -> Result<Vec<KlSample>> {
    let inputs = RunInputs::load(config)?;
    let samples = evaluate(
        &inputs.model,
        &inputs.circuit,
        &inputs.datasets,
        config.pairing,
        config.worker_count,
    )?;
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    write_samples(&config.samples_path(), &samples)?;
    Ok(samples)
}

pub fn write_samples(path: &Path, samples: &[KlSample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples(path: &Path) -> Result<Vec<KlSample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: KlSample = serde_json::from_str(&line)
            .map_err(|e| Error::Malformed(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if !(s.kl_nats.is_finite() && s.kl_nats >= 0.0) {
            return Err(Error::Malformed(format!(
                "{}:{}: kl_nats must be finite and nonnegative",
                path.display(),
                n + 1
            )));
        }
        out.push(s);
    }
    Ok(out)
}

/// Writes every report enabled in `config.reports` to the output directory
/// and returns the paths written.
pub fn write_reports(
    config: &RunConfig,
    samples: &[KlSample],
    inputs: &RunInputs,
) -> Result<Vec<PathBuf>> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let kls: Vec<f64> = samples.iter().map(|s| s.kl_nats).collect();
    let r = &config.reports;
    if r.summary {
        let path = dir.join("summary.csv");
        write_summary_csv(&path, &summary_rows(&kls)?)?;
        written.push(path);
    }
    if r.histogram {
        let path = dir.join("histogram.csv");
        write_histogram_csv(&path, &histogram(&kls, r.histogram_bins)?)?;
        written.push(path);
    }
    if r.worst_k > 0 {
        let rows = worst_k(
            samples,
            r.worst_k,
            &inputs.model,
            &inputs.circuit,
            &inputs.datasets,
            inputs.tokenizer,
        )?;
        let path = dir.join("worst.csv");
        write_worst_csv(&path, &rows)?;
        written.push(path);
    }
    for [a, b] in &r.heatmaps {
        let (fa, fb) = (a.parse::<FieldSpec>()?, b.parse::<FieldSpec>()?);
        let cells = group_percentiles(samples, &fa, &fb, &PercentileLevel::DEFAULT)?;
        let path = dir.join(format!("heatmap_{}_{}.csv", fa.file_stem(), fb.file_stem()));
        write_heatmap_csv(&path, &cells)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::serialize_circuit;
    use crate::model::{random_model, save_model, ModelConfig};

    pub(crate) fn toy_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            use_mlp: false,
            d_mlp: None,
            vocab_size: vocab,
            max_seq_len: 40,
            use_layernorm: true,
        }
    }

    fn setup(dir: &Path, full: bool, pairing: PairingMode) -> RunConfig {
        let tok = builtin_tokenizer();
        let model = random_model(&toy_config(tok.vocab_size()), 3).unwrap();
        let circuit = if full {
            Circuit::full(&model.config)
        } else {
            Circuit::empty(&model.config)
        };
        fs::write(dir.join("model.json"), save_model(&model)).unwrap();
        fs::write(dir.join("circuit.json"), serialize_circuit(&circuit)).unwrap();
        RunConfig {
            model_path: dir.join("model.json"),
            circuit_path: dir.join("circuit.json"),
            task: TaskKind::Ioi,
            n_clean: 6,
            n_corrupt: 5,
            pairing,
            master_seed: 11,
            worker_count: 2,
            output_dir: dir.join("out"),
            swap_names: false,
            reports: ReportToggles::default(),
        }
    }

    #[test]
    fn config_parsing() {
        let toml = r#"
model_path = "m.json"
circuit_path = "c.json"
task = "greaterthan"
n_clean = 3
n_corrupt = 4
output_dir = "out"
[reports]
worst_k = 0
heatmaps = [["clean.noun", "clean.century"]]
"#;
        let c = RunConfig::from_str_auto(toml).unwrap();
        assert_eq!(c.task, TaskKind::GreaterThan);
        assert_eq!(c.pairing, PairingMode::Cross);
        assert_eq!(c.worker_count, 1);
        assert!(c.reports.summary);
        c.validate().unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_str_auto(&json).unwrap(), c);
        assert!(RunConfig::from_str_auto(&toml.replace("n_clean", "n_cleen")).is_err());
        let mut bad = c.clone();
        bad.n_clean = 0;
        assert!(bad.validate().unwrap_err().is_config_error());
        let mut bad = c;
        bad.reports.heatmaps = vec![["dirty.noun".into(), "clean.noun".into()]];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn full_circuit_run() {
        let dir = tempfile::tempdir().unwrap();
        let config = setup(dir.path(), true, PairingMode::Cross);
        let samples = run_evaluation(&config).unwrap();
        assert_eq!(samples.len(), 30);
        assert!(samples.iter().all(|s| s.kl_nats < 1e-9));
        assert_eq!((samples[7].clean_index, samples[7].corrupt_index), (1, 2));
        assert_eq!(read_samples(&config.samples_path()).unwrap(), samples);
    }

    #[test]
    fn deterministic_across_workers() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = setup(dir.path(), false, PairingMode::Cross);
        let mut files = Vec::new();
        for workers in [1, 3, 8] {
            config.worker_count = workers;
            run_evaluation(&config).unwrap();
            files.push(fs::read(config.samples_path()).unwrap());
        }
        assert!(files.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn matched_count_equals_join() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = setup(dir.path(), false, PairingMode::Matched);
        config.n_clean = 200;
        config.n_corrupt = 200;
        let inputs = RunInputs::load(&config).unwrap();
        let samples = evaluate(
            &inputs.model,
            &inputs.circuit,
            &inputs.datasets,
            config.pairing,
            2,
        )
        .unwrap();
        // Join cardinality from per-key counts.
        let key = |p: &PromptInstance| (p.fields["place"].clone(), p.fields["object"].clone());
        let mut counts: HashMap<_, usize> = HashMap::new();
        for p in &inputs.datasets.corrupt {
            *counts.entry(key(p)).or_default() += 1;
        }
        let join: usize = inputs
            .datasets
            .clean
            .iter()
            .map(|p| counts.get(&key(p)).copied().unwrap_or(0))
            .sum();
        assert_eq!(samples.len(), join);
        assert!(join > 0);
    }

    #[test]
    fn incompatible_model() {
        let dir = tempfile::tempdir().unwrap();
        let config = setup(dir.path(), true, PairingMode::Cross);
        let small = random_model(&toy_config(10), 1).unwrap();
        fs::write(&config.model_path, save_model(&small)).unwrap();
        // The circuit was written for the other config.
        assert!(run_evaluation(&config).is_err());
        fs::write(
            &config.circuit_path,
            serialize_circuit(&Circuit::full(&small.config)),
        )
        .unwrap();
        let err = run_evaluation(&config).unwrap_err();
        assert!(err.is_config_error(), "{err}");
    }

    #[test]
    fn bad_samples_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        fs::write(&path, "{\"clean_index\":0}\n").unwrap();
        assert!(matches!(read_samples(&path), Err(Error::Malformed(_))));
        assert!(read_samples(&dir.path().join("missing"))
            .unwrap_err()
            .is_config_error());
    }
}
