//! `advcirc`: adversarial circuit evaluation from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! validation error.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advcirc_core::graph::{enumerate_edges, serialize_circuit};
use advcirc_core::harness::{
    bounds_table, read_samples, run_evaluation, write_bounds_csv, write_reports, RunConfig,
    RunInputs, DEFAULT_BOUND_ROWS,
};
use advcirc_core::model::save_model;
use advcirc_core::tasks::{builtin_tokenizer, dump_record, generate_prompts, Role};
use advcirc_core::{
    random_model, Circuit, Error, ModelConfig, PairingMode, TaskKind, TaskTemplate,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "advcirc",
    version,
    about = "Adversarial evaluation of transformer circuits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write clean and/or corrupted prompt datasets as JSON lines.
    GenData(GenData),
    /// Evaluate a circuit on every (clean, corrupted) pair; writes samples.jsonl.
    Eval(EvalArgs),
    /// Summary, histogram, worst-k and heatmap tables from a samples file.
    Report(ReportArgs),
    /// Sample sizes needed for percentile bounds (exact, Chernoff, Hoeffding).
    Bounds(BoundsArgs),
    /// Seeded random toy model.
    MakeModel(MakeModel),
    /// Full, empty or random circuit for a model.
    MakeCircuit(MakeCircuit),
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Clean,
    Corrupt,
    Both,
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    task: TaskKind,
    #[arg(long, short)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = RoleArg::Both)]
    role: RoleArg,
    #[arg(long, alias = "swap_names")]
    swap_names: bool,
    /// Output file; standard output when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Also write the tokenizer vocabulary (JSON word list) here.
    #[arg(long, alias = "vocab_out")]
    vocab_out: Option<PathBuf>,
}

/// RunConfig fields; each flag overrides the config document.
#[derive(Args)]
struct RunOverrides {
    /// TOML or JSON document with RunConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, alias = "model_path")]
    model_path: Option<PathBuf>,
    #[arg(long, alias = "circuit_path")]
    circuit_path: Option<PathBuf>,
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long, alias = "n_clean")]
    n_clean: Option<usize>,
    #[arg(long, alias = "n_corrupt")]
    n_corrupt: Option<usize>,
    #[arg(long)]
    pairing: Option<PairingMode>,
    #[arg(long, alias = "master_seed")]
    master_seed: Option<u64>,
    #[arg(long, alias = "worker_count")]
    worker_count: Option<usize>,
    #[arg(long, alias = "output_dir")]
    output_dir: Option<PathBuf>,
    #[arg(long, alias = "swap_names")]
    swap_names: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Also write the enabled reports.
    #[arg(long)]
    reports: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Samples file; defaults to samples.jsonl in the output directory.
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long, alias = "worst_k")]
    worst_k: Option<usize>,
    #[arg(long, alias = "histogram_bins")]
    histogram_bins: Option<usize>,
    /// Field pair for a heatmap, e.g. `clean.place,clean.object`. Repeatable.
    #[arg(long)]
    heatmap: Vec<String>,
}

#[derive(Args)]
struct BoundsArgs {
    /// `p,delta,epsilon`; repeatable. Defaults to the six standard rows.
    #[arg(long)]
    row: Vec<String>,
    #[arg(long, requires_all = ["delta", "epsilon"])]
    p: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args)]
struct MakeModel {
    #[arg(long, alias = "n_layers", default_value_t = 2)]
    n_layers: usize,
    #[arg(long, alias = "n_heads", default_value_t = 4)]
    n_heads: usize,
    #[arg(long, alias = "d_model", default_value_t = 32)]
    d_model: usize,
    #[arg(long, alias = "d_head", default_value_t = 8)]
    d_head: usize,
    /// Hidden width of the MLPs; omit for an attention-only model.
    #[arg(long, alias = "d_mlp")]
    d_mlp: Option<usize>,
    /// Defaults to the built-in task vocabulary size.
    #[arg(long, alias = "vocab_size")]
    vocab_size: Option<usize>,
    #[arg(long, alias = "max_seq_len", default_value_t = 64)]
    max_seq_len: usize,
    #[arg(long, alias = "no_layernorm")]
    no_layernorm: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CircuitKind {
    Full,
    Empty,
    Random,
}

#[derive(Args)]
struct MakeCircuit {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = CircuitKind::Full)]
    kind: CircuitKind,
    /// Probability of keeping each edge (random circuits).
    #[arg(long, default_value_t = 0.5)]
    keep: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn io_failure(e: io::Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn resolve(run: &RunOverrides) -> Result<RunConfig, Failure> {
    let mut config = match &run.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let missing =
                |name: &str| Failure::Usage(format!("--{name} is required without --config"));
            RunConfig {
                model_path: run
                    .model_path
                    .clone()
                    .ok_or_else(|| missing("model-path"))?,
                circuit_path: run
                    .circuit_path
                    .clone()
                    .ok_or_else(|| missing("circuit-path"))?,
                task: run.task.ok_or_else(|| missing("task"))?,
                n_clean: run.n_clean.ok_or_else(|| missing("n-clean"))?,
                n_corrupt: run.n_corrupt.ok_or_else(|| missing("n-corrupt"))?,
                pairing: PairingMode::Cross,
                master_seed: 0,
                worker_count: 1,
                output_dir: run
                    .output_dir
                    .clone()
                    .ok_or_else(|| missing("output-dir"))?,
                swap_names: false,
                reports: Default::default(),
            }
        }
    };
    if let Some(v) = &run.model_path {
        config.model_path = v.clone();
    }
    if let Some(v) = &run.circuit_path {
        config.circuit_path = v.clone();
    }
    if let Some(v) = run.task {
        config.task = v;
    }
    if let Some(v) = run.n_clean {
        config.n_clean = v;
    }
    if let Some(v) = run.n_corrupt {
        config.n_corrupt = v;
    }
    if let Some(v) = run.pairing {
        config.pairing = v;
    }
    if let Some(v) = run.master_seed {
        config.master_seed = v;
    }
    if let Some(v) = run.worker_count {
        config.worker_count = v;
    }
    if let Some(v) = &run.output_dir {
        config.output_dir = v.clone();
    }
    config.swap_names |= run.swap_names;
    config.validate()?;
    Ok(config)
}

fn gen_data(args: GenData) -> Result<(), Failure> {
    let template = if args.swap_names {
        if args.task != TaskKind::Ioi {
            return Err(Failure::Usage(
                "--swap-names applies to the ioi task only".into(),
            ));
        }
        TaskTemplate::ioi_swapped()
    } else {
        TaskTemplate::builtin(args.task)
    };
    let tokenizer = builtin_tokenizer();
    let roles: &[Role] = match args.role {
        RoleArg::Clean => &[Role::Clean],
        RoleArg::Corrupt => &[Role::Corrupt],
        RoleArg::Both => &[Role::Clean, Role::Corrupt],
    };
    let mut text = String::new();
    for &role in roles {
        for (i, p) in generate_prompts(&template, tokenizer, args.n, args.seed, role)?
            .iter()
            .enumerate()
        {
            text.push_str(&dump_record(role, i, p));
            text.push('\n');
        }
    }
    match &args.out {
        Some(path) => write_file(path, &text)?,
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(io_failure)?,
    }
    if let Some(path) = &args.vocab_out {
        write_file(path, &tokenizer.to_json())?;
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let config = resolve(&args.run)?;
    let samples = run_evaluation(&config)?;
    eprintln!(
        "{} samples -> {}",
        samples.len(),
        config.samples_path().display()
    );
    if args.reports {
        let inputs = RunInputs::load(&config)?;
        for path in write_reports(&config, &samples, &inputs)? {
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), Failure> {
    let mut config = resolve(&args.run)?;
    if let Some(k) = args.worst_k {
        config.reports.worst_k = k;
    }
    if let Some(b) = args.histogram_bins {
        config.reports.histogram_bins = b;
    }
    for spec in &args.heatmap {
        let (a, b) = spec.split_once(',').ok_or_else(|| {
            Failure::Usage(format!("--heatmap `{spec}`: expected FIELD_A,FIELD_B"))
        })?;
        config
            .reports
            .heatmaps
            .push([a.trim().to_string(), b.trim().to_string()]);
    }
    config.validate()?;
    let samples = read_samples(
        &args
            .samples
            .clone()
            .unwrap_or_else(|| config.samples_path()),
    )?;
    let inputs = RunInputs::load(&config)?;
    for path in write_reports(&config, &samples, &inputs)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn parse_row(s: &str) -> Result<(f64, f64, f64), Failure> {
    let bad = || Failure::Usage(format!("--row `{s}`: expected p,delta,epsilon"));
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    match v[..] {
        [p, d, e] => Ok((p, d, e)),
        _ => Err(bad()),
    }
}

fn bounds(args: BoundsArgs) -> Result<(), Failure> {
    let mut rows: Vec<(f64, f64, f64)> = args
        .row
        .iter()
        .map(|r| parse_row(r))
        .collect::<Result<_, _>>()?;
    if let (Some(p), Some(d), Some(e)) = (args.p, args.delta, args.epsilon) {
        rows.push((p, d, e));
    }
    if rows.is_empty() {
        rows = DEFAULT_BOUND_ROWS.to_vec();
    }
    let table = bounds_table(&rows)?;
    write_bounds_csv(io::stdout().lock(), &table)?;
    Ok(())
}

fn make_model(args: MakeModel) -> Result<(), Failure> {
    let config = ModelConfig {
        n_layers: args.n_layers,
        n_heads: args.n_heads,
        d_model: args.d_model,
        d_head: args.d_head,
        use_mlp: args.d_mlp.is_some(),
        d_mlp: args.d_mlp,
        vocab_size: args
            .vocab_size
            .unwrap_or_else(|| builtin_tokenizer().vocab_size()),
        max_seq_len: args.max_seq_len,
        use_layernorm: !args.no_layernorm,
    };
    let model = random_model(&config, args.seed)?;
    write_file(&args.out, &save_model(&model))
}

fn make_circuit(args: MakeCircuit) -> Result<(), Failure> {
    let model = advcirc_core::harness::load_model_file(&args.model)?;
    let config = &model.config;
    let circuit = match args.kind {
        CircuitKind::Full => Circuit::full(config),
        CircuitKind::Empty => Circuit::empty(config),
        CircuitKind::Random => {
            if !(0.0..=1.0).contains(&args.keep) {
                return Err(Failure::Usage("--keep must lie in [0, 1]".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let edges: Vec<_> = enumerate_edges(config)
                .into_iter()
                .filter(|_| rng.random_bool(args.keep))
                .collect();
            Circuit::new(config, edges)?
        }
    };
    write_file(&args.out, &serialize_circuit(&circuit))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Bounds(a) => bounds(a),
        Command::MakeModel(a) => make_model(a),
        Command::MakeCircuit(a) => make_circuit(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}
