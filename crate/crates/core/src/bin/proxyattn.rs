use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use proxyattn::comparators::{head_overlap_matrix, shared_ranking_curve, EstimatorKind, RowAggregation};
use proxyattn::dense::dense_attention_probs_all;
use proxyattn::mask::{write_mask_csv, write_mask_file};
use proxyattn::pipeline::{run_pipeline, PipelineOptions};
use proxyattn::report::{
    unix_now, write_head_analysis, write_preamble, write_report_header, write_report_rows, ANALYSIS_SCHEMA,
    REPORT_SCHEMA,
};
use proxyattn::tensor::pad_to_blocks;
use proxyattn::tensor_io::read_qkv_file;
use proxyattn::workloads::{generate, WorkloadKind, WorkloadSpec};
use proxyattn::{AttnConfig, Error, HeadTensor};

#[derive(Parser)]
#[command(name = "proxyattn", version, about = "Block-sparse attention estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline once and report per-head metrics.
    Run(RunArgs),
    /// Run the pipeline over a grid of gamma, stride and minimum budget.
    Sweep(SweepArgs),
    /// Head-overlap matrix and shared-ranking curves from dense probabilities.
    AnalyzeHeads(AnalyzeArgs),
}

#[derive(Args)]
struct InputArgs {
    /// key=value file with workload and attention settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    workload: Option<WorkloadKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// Read Q, K and V (three PXQK records) instead of generating a workload.
    #[arg(long, conflicts_with_all = ["workload", "seed"])]
    qkv_file: Option<PathBuf>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    q_heads: Option<usize>,
    #[arg(long)]
    kv_heads: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    /// Always select the first block column.
    #[arg(long)]
    force_sink: bool,
    /// Extra workload parameter as key=value; repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
}

#[derive(Args)]
struct OutputArgs {
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Omit the timestamp comment so identical runs are byte-identical.
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    output: OutputArgs,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    stride: Option<usize>,
    /// Minimum per-row budget in tokens.
    #[arg(long)]
    min_budget: Option<usize>,
    /// Estimators to run, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "proxy")]
    estimator: Vec<EstimatorKind>,
    #[arg(long, default_value_t = 8)]
    antidiagonal_stride: usize,
    /// Write the mask of the first estimator as PXMK.
    #[arg(long)]
    mask_out: Option<PathBuf>,
    /// Write the mask of the first estimator as head,row,col CSV.
    #[arg(long)]
    mask_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    output: OutputArgs,
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    gammas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    strides: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    min_budgets: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', default_value = "proxy")]
    estimators: Vec<EstimatorKind>,
    #[arg(long, default_value_t = 8)]
    antidiagonal_stride: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// Keys per head for the overlap matrix; defaults to seq_len / 8.
    #[arg(long)]
    top_t: Option<usize>,
    #[arg(long, default_value = "mean")]
    aggregation: RowAggregation,
}

/// Failure with its exit code: 2 for usage, 1 for runtime.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

struct Inputs {
    q: HeadTensor,
    k: HeadTensor,
    v: HeadTensor,
    cfg: AttnConfig,
    meta: Vec<(String, String)>,
}

fn build_spec(args: &InputArgs) -> Result<WorkloadSpec, Failure> {
    let mut spec = WorkloadSpec::new(WorkloadKind::RandomSmooth, 0, AttnConfig::default());
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::from(Error::Io { path: path.clone(), source: e }))?;
        spec.apply_text(&text)?;
    }
    let overrides = [
        ("seq_len", args.seq_len),
        ("n_q_heads", args.q_heads),
        ("n_kv_heads", args.kv_heads),
        ("head_dim", args.head_dim),
        ("block_size", args.block_size),
        ("groups", args.groups),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            spec.set(key, &v.to_string())?;
        }
    }
    if let Some(kind) = args.workload {
        spec.kind = kind;
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if args.force_sink {
        spec.cfg.force_sink_block = true;
    }
    for p in &args.params {
        let (k, v) = p.split_once('=').ok_or_else(|| usage(format!("--param expects KEY=VALUE, got '{p}'")))?;
        spec.set(k.trim(), v.trim())?;
    }
    Ok(spec)
}

fn load_inputs(args: &InputArgs) -> Result<Inputs, Failure> {
    let spec = build_spec(args)?;
    match &args.qkv_file {
        Some(path) => {
            let (q, k, v) = read_qkv_file(path)?;
            let mut cfg = spec.cfg;
            cfg.n_q_heads = q.n_heads();
            cfg.n_kv_heads = k.n_heads();
            cfg.head_dim = q.dim();
            cfg = cfg.with_seq_len(q.seq_len());
            if k.seq_len() != q.seq_len() || v.seq_len() != q.seq_len() {
                return Err(Error::Shape("Q, K and V in the file disagree on seq_len".into()).into());
            }
            let (q, k, v, cfg) = pad_to_blocks(&q, &k, &v, &cfg);
            cfg.validate()?;
            let meta = vec![("qkv_file".to_string(), path.display().to_string())];
            Ok(Inputs { q, k, v, cfg, meta })
        }
        None => {
            let (q, k, v) = generate(&spec)?;
            let meta = vec![("workload".to_string(), spec.kind.to_string()), ("seed".to_string(), spec.seed.to_string())];
            Ok(Inputs { q, k, v, cfg: spec.cfg, meta })
        }
    }
}

fn shape_meta(inputs: &Inputs) -> Vec<(String, String)> {
    let c = &inputs.cfg;
    let mut meta = inputs.meta.clone();
    for (k, v) in [
        ("n_q_heads", c.n_q_heads.to_string()),
        ("n_kv_heads", c.n_kv_heads.to_string()),
        ("head_dim", c.head_dim.to_string()),
        ("seq_len", c.seq_len.to_string()),
        ("valid_len", c.valid_len.to_string()),
        ("block_size", c.block_size.to_string()),
        ("force_sink_block", c.force_sink_block.to_string()),
    ] {
        meta.push((k.to_string(), v));
    }
    meta
}

fn emit(out: &OutputArgs, buf: &[u8]) -> Result<(), Failure> {
    match &out.out {
        Some(path) => fs::write(path, buf).map_err(|e| Error::Io { path: path.clone(), source: e }.into()),
        None => std::io::stdout().write_all(buf).map_err(|e| Error::Io { path: "<stdout>".into(), source: e }.into()),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }.into()
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let inputs = load_inputs(&args.input)?;
    let mut cfg = inputs.cfg;
    if let Some(g) = args.gamma {
        cfg.gamma = g;
    }
    if let Some(s) = args.stride {
        cfg.stride = s;
    }
    if let Some(m) = args.min_budget {
        cfg.min_budget_tokens = m;
    }
    cfg.validate()?;

    let mut meta = shape_meta(&inputs);
    meta.push(("antidiagonal_stride".into(), args.antidiagonal_stride.to_string()));
    let mut buf = Vec::new();
    let ts = (!args.output.no_timestamp).then(unix_now);
    let stdout = Path::new("<report>");
    write_preamble(&mut buf, REPORT_SCHEMA, ts, &meta).map_err(io_err(stdout))?;
    write_report_header(&mut buf).map_err(io_err(stdout))?;
    for (i, &estimator) in args.estimator.iter().enumerate() {
        let opts = PipelineOptions { estimator, antidiagonal_stride: args.antidiagonal_stride, ..Default::default() };
        let result = run_pipeline(&inputs.q, &inputs.k, &inputs.v, &cfg, &opts)?;
        write_report_rows(&mut buf, &result).map_err(io_err(stdout))?;
        if i == 0 {
            if let Some(path) = &args.mask_out {
                write_mask_file(&result.mask, path)?;
            }
            if let Some(path) = &args.mask_csv {
                let file = fs::File::create(path).map_err(io_err(path))?;
                write_mask_csv(&result.mask, std::io::BufWriter::new(file)).map_err(io_err(path))?;
            }
        }
    }
    emit(&args.output, &buf)
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    if args.gammas.is_none() && args.strides.is_none() && args.min_budgets.is_none() {
        return Err(usage("empty grid: give at least one of --gammas, --strides, --min-budgets"));
    }
    let empty = [
        ("gammas", args.gammas.as_ref().is_some_and(Vec::is_empty)),
        ("strides", args.strides.as_ref().is_some_and(Vec::is_empty)),
        ("min-budgets", args.min_budgets.as_ref().is_some_and(Vec::is_empty)),
    ];
    if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
        return Err(usage(format!("empty grid: --{name} has no values")));
    }
    if args.estimators.is_empty() {
        return Err(usage("empty grid: --estimators has no values"));
    }

    let inputs = load_inputs(&args.input)?;
    let base = inputs.cfg;
    let gammas = args.gammas.clone().unwrap_or_else(|| vec![base.gamma]);
    let strides = args.strides.clone().unwrap_or_else(|| vec![base.stride]);
    let min_budgets = args.min_budgets.clone().unwrap_or_else(|| vec![base.min_budget_tokens]);

    let mut meta = shape_meta(&inputs);
    meta.push(("antidiagonal_stride".into(), args.antidiagonal_stride.to_string()));
    let list = |v: Vec<String>| v.join(",");
    meta.push(("grid_gammas".into(), list(gammas.iter().map(|x| x.to_string()).collect())));
    meta.push(("grid_strides".into(), list(strides.iter().map(|x| x.to_string()).collect())));
    meta.push(("grid_min_budgets".into(), list(min_budgets.iter().map(|x| x.to_string()).collect())));
    meta.push(("grid_estimators".into(), list(args.estimators.iter().map(|x| x.to_string()).collect())));

    let sink = Path::new("<report>");
    let mut buf = Vec::new();
    let ts = (!args.output.no_timestamp).then(unix_now);
    write_preamble(&mut buf, REPORT_SCHEMA, ts, &meta).map_err(io_err(sink))?;
    write_report_header(&mut buf).map_err(io_err(sink))?;
    let mut failures = 0usize;
    for &gamma in &gammas {
        for &stride in &strides {
            for &min_budget in &min_budgets {
                for &estimator in &args.estimators {
                    let cfg = AttnConfig { gamma, stride, min_budget_tokens: min_budget, ..base };
                    let opts =
                        PipelineOptions { estimator, antidiagonal_stride: args.antidiagonal_stride, ..Default::default() };
                    let outcome = cfg.validate().and_then(|_| run_pipeline(&inputs.q, &inputs.k, &inputs.v, &cfg, &opts));
                    match outcome {
                        Ok(result) => write_report_rows(&mut buf, &result).map_err(io_err(sink))?,
                        Err(e) => {
                            failures += 1;
                            writeln!(
                                buf,
                                "# failed gamma={gamma} stride={stride} min_budget={min_budget} estimator={estimator}: {e}"
                            )
                            .map_err(io_err(sink))?;
                            eprintln!("proxyattn: grid point gamma={gamma} stride={stride} min_budget={min_budget} estimator={estimator} failed: {e}");
                        }
                    }
                }
            }
        }
    }
    emit(&args.output, &buf)?;
    if failures > 0 {
        eprintln!("proxyattn: {failures} grid point(s) failed");
    }
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), Failure> {
    let inputs = load_inputs(&args.input)?;
    let cfg = inputs.cfg;
    let top_t = args.top_t.unwrap_or(cfg.seq_len / 8).max(1);
    if top_t > cfg.seq_len {
        return Err(usage(format!("--top-t ({top_t}) exceeds seq_len ({})", cfg.seq_len)));
    }
    let probs = dense_attention_probs_all(&inputs.q, &inputs.k, &cfg)?;
    let overlap = head_overlap_matrix(&probs, top_t, args.aggregation)?;
    let (_, curves) = shared_ranking_curve(&probs, args.aggregation)?;

    let mut meta = shape_meta(&inputs);
    meta.push(("top_t".into(), top_t.to_string()));
    meta.push((
        "aggregation".into(),
        match args.aggregation {
            RowAggregation::Mean => "mean".into(),
            RowAggregation::LastRow => "last-row".into(),
        },
    ));
    let sink = Path::new("<report>");
    let mut buf = Vec::new();
    let ts = (!args.output.no_timestamp).then(unix_now);
    write_preamble(&mut buf, ANALYSIS_SCHEMA, ts, &meta).map_err(io_err(sink))?;
    write_head_analysis(&mut buf, &overlap, &curves).map_err(io_err(sink))?;
    emit(&args.output, &buf)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::AnalyzeHeads(a) => cmd_analyze(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("proxyattn: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
