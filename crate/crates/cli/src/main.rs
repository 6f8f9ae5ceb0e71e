use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use slpnet_core::dataset::{fingerprint, read_jsonl, write_jsonl, DatasetRecord};
use slpnet_core::experiment::{self, BenchTimeOptions, EvalOptions, Method, GROUPS};
use slpnet_core::{generate_dataset, train, Checkpoint, Predictor, ProxComposition, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "slpnet", version, about = "Symbol-level precoding experiments")]
struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file with training configuration fields.
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Output directory (gen-data, train) or file (eval, bench-time, validate).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate training and test sets as JSON lines.
    GenData(GenDataArgs),
    /// Train the unrolled network.
    Train(TrainArgs),
    /// Sweep SINR targets and report power, feasibility and time per method.
    Eval(EvalArgs),
    /// Measure per-sample execution time on one thread.
    BenchTime(BenchTimeArgs),
    /// Run the invariant suite.
    Validate(ValidateArgs),
}

#[derive(Args, Debug, Default)]
struct ProblemArgs {
    /// Users.
    #[arg(long)]
    k: Option<usize>,
    /// Transmit antennas.
    #[arg(long)]
    n: Option<usize>,
    /// PSK constellation order.
    #[arg(long)]
    psk_order: Option<u32>,
    /// Training SINR range in dB.
    #[arg(long, num_args = 2, value_names = ["LOW", "HIGH"])]
    gamma_db: Option<Vec<f64>>,
    /// Noise power.
    #[arg(long)]
    n0: Option<f64>,
    /// 50000 training and 2000 test samples.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Training samples.
    #[arg(long)]
    train: Option<usize>,
    /// Test samples.
    #[arg(long)]
    test: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Composition {
    Joint,
    Sequential,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory written by gen-data, or a training JSON-lines file.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    problem: ProblemArgs,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Unrolled layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    eta0: Option<f64>,
    /// Learning-rate decay factor.
    #[arg(long)]
    beta_decay: Option<f64>,
    /// Weight of the parameter regularizer.
    #[arg(long)]
    vartheta: Option<f64>,
    /// Decay the learning rate every optimizer step instead of every epoch.
    #[arg(long)]
    per_step_decay: bool,
    /// Add the dense residual block after the head.
    #[arg(long)]
    refinement: bool,
    /// Per-layer prox composition.
    #[arg(long, value_enum)]
    prox: Option<Composition>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Test JSON-lines file, or a directory holding test.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Required when slp_sdnet is among the methods.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// SINR grid in dB.
    #[arg(long, value_delimiter = ',', default_value = "0,5,10,15,20,25,30,35")]
    grid: Vec<f64>,
    /// Comma-separated methods: blp, slp_ipm, slp_sdnet, kkt_oracle.
    #[arg(long, value_delimiter = ',', default_value = "blp,slp_ipm,slp_sdnet")]
    methods: Vec<Method>,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Also write per-sample rows next to the summary (`<out>.samples.csv`).
    #[arg(long)]
    per_sample: bool,
    /// Report zero times so the output is reproducible byte for byte.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args, Debug)]
struct BenchTimeArgs {
    /// Test JSON-lines file, or a directory holding test.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Required when slp_sdnet is among the methods.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated methods to time.
    #[arg(long, value_delimiter = ',', default_value = "slp_ipm,slp_sdnet")]
    methods: Vec<Method>,
    /// Untimed calls per method before measuring.
    #[arg(long, default_value_t = 50)]
    warmup: usize,
    /// Common SINR target in dB; the stored targets otherwise.
    #[arg(long)]
    sinr_db: Option<f64>,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Time the first sample only.
    #[arg(long)]
    single: bool,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    /// Check groups to run: prox, jacobian, solver, duality.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
}

fn load_config(cli: &Cli, problem: &ProblemArgs, base_dir: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg = match (&cli.config, base_dir.map(|d| d.join("config.json"))) {
        (Some(path), _) => read_config(path)?,
        (None, Some(saved)) if saved.is_file() => read_config(&saved)?,
        _ if problem.paper_scale => TrainConfig::paper_scale(),
        _ => TrainConfig::default(),
    };
    if problem.paper_scale {
        let p = TrainConfig::paper_scale();
        cfg.n_train = p.n_train;
        cfg.n_test = p.n_test;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(k) = problem.k {
        cfg.k = k;
    }
    if let Some(n) = problem.n {
        cfg.n = n;
    }
    if let Some(m) = problem.psk_order {
        cfg.psk_order = m;
    }
    if let Some(r) = &problem.gamma_db {
        cfg.gamma_db_range = [r[0], r[1]];
    }
    if let Some(n0) = problem.n0 {
        cfg.n0 = n0;
    }
    Ok(cfg)
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn dataset_file(path: &Path, name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(name)
    } else {
        path.to_path_buf()
    }
}

fn load_records(path: &Path, name: &str, limit: Option<usize>) -> Result<Vec<DatasetRecord>> {
    let file = dataset_file(path, name);
    let mut records =
        read_jsonl(&file).with_context(|| format!("reading dataset {}", file.display()))?;
    if let Some(n) = limit {
        records.truncate(n);
    }
    if records.is_empty() {
        bail!("dataset {} is empty", file.display());
    }
    Ok(records)
}

fn load_predictor(path: Option<&PathBuf>, methods: &[Method]) -> Result<Option<Predictor>> {
    match path {
        Some(p) => {
            let ck = Checkpoint::load(p)
                .with_context(|| format!("loading checkpoint {}", p.display()))?;
            Ok(Some(Predictor::new(&ck)?))
        }
        None if methods.contains(&Method::SlpSdnet) => {
            bail!("slp_sdnet requested but no --checkpoint given")
        }
        None => Ok(None),
    }
}

fn require_out(cli: &Cli, what: &str) -> PathBuf {
    match &cli.out {
        Some(p) => p.clone(),
        None => Cli::command()
            .error(
                ErrorKind::MissingRequiredArgument,
                format!("{what} needs --out <PATH>"),
            )
            .exit(),
    }
}

fn create_writer(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn gen_data(cli: &Cli, args: &GenDataArgs) -> Result<()> {
    let out = require_out(cli, "gen-data");
    let mut cfg = load_config(cli, &args.problem, None)?;
    if let Some(n) = args.train {
        cfg.n_train = n;
    }
    if let Some(n) = args.test {
        cfg.n_test = n;
    }
    cfg.batch = cfg.batch.min(cfg.n_train.max(1));
    let (train_set, test_set) = generate_dataset(&cfg)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_jsonl(&out.join("train.jsonl"), &train_set)?;
    write_jsonl(&out.join("test.jsonl"), &test_set)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let (ftr, fte) = (fingerprint(&train_set), fingerprint(&test_set));
    if !cli.quiet {
        println!("train {} samples sha256 {ftr}", train_set.len());
        println!("test  {} samples sha256 {fte}", test_set.len());
    }
    Ok(())
}

fn run_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let out = require_out(cli, "train");
    let base = args.data.is_dir().then_some(args.data.as_path());
    let mut cfg = load_config(cli, &args.problem, base)?;
    macro_rules! set {
        ($field:ident, $arg:expr) => {
            if let Some(v) = $arg {
                cfg.$field = v;
            }
        };
    }
    set!(epochs, args.epochs);
    set!(layers, args.layers);
    set!(batch, args.batch);
    set!(eta0, args.eta0);
    set!(beta_decay, args.beta_decay);
    set!(vartheta, args.vartheta);
    if args.per_step_decay {
        cfg.lr_schedule = slpnet_core::train::LrSchedule::PerStep;
    }
    if args.refinement {
        cfg.refinement = true;
    }
    if let Some(p) = args.prox {
        cfg.prox_composition = match p {
            Composition::Joint => ProxComposition::Joint,
            Composition::Sequential => ProxComposition::Sequential,
        };
    }
    let records = load_records(&args.data, "train.jsonl", None)?;
    cfg.n_train = records.len();
    cfg.batch = cfg.batch.min(cfg.n_train);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let history_path = out.join("history.csv");
    let mut history = slpnet_core::TrainHistory::default();
    let quiet = cli.quiet;
    let result = train(&cfg, &records, |s| {
        history.epochs.push(*s);
        if !quiet {
            println!(
                "epoch {:>3}  loss {:.6e}  power {:.6e}  feasible {:.3}  lr {:.3e}",
                s.epoch, s.loss, s.power, s.feasibility_rate, s.lr
            );
        }
    });
    history.write_csv(&history_path)?;
    let run = result?;
    if run.masked > 0 {
        warn!("{} sample-steps masked for an unconverged prox", run.masked);
    }
    if run.skipped > 0 {
        warn!("{} training records could not be normalized", run.skipped);
    }
    let ck_path = out.join("checkpoint.json");
    run.checkpoint.save(&ck_path)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    info!("wrote {} and {}", ck_path.display(), history_path.display());
    Ok(())
}

fn run_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    if args.per_sample && cli.out.is_none() {
        Cli::command()
            .error(
                ErrorKind::MissingRequiredArgument,
                "--per-sample needs --out <PATH>",
            )
            .exit();
    }
    if args.grid.is_empty() || args.methods.is_empty() {
        bail!("grid and methods must be non-empty");
    }
    let records = load_records(&args.data, "test.jsonl", args.limit)?;
    let predictor = load_predictor(args.checkpoint.as_ref(), &args.methods)?;
    let opts = EvalOptions {
        grid: args.grid.clone(),
        methods: args.methods.clone(),
        timing: !args.no_timing,
        ..EvalOptions::default()
    };
    let res = experiment::evaluate(&records, predictor.as_ref(), &opts)?;
    experiment::write_csv(create_writer(cli.out.as_deref())?, &res.summary)?;
    if args.per_sample {
        let mut p = cli.out.clone().unwrap_or_default().into_os_string();
        p.push(".samples.csv");
        experiment::write_csv(create_writer(Some(Path::new(&p)))?, &res.samples)?;
    }
    if !cli.quiet && cli.out.is_some() {
        for r in &res.summary {
            println!(
                "{:>5.1} dB  {:<10}  power {:.4e}  feasible {:.3}",
                r.sinr_db,
                r.method.as_str(),
                r.mean_power,
                r.feasibility_rate
            );
        }
    }
    Ok(())
}

fn run_bench_time(cli: &Cli, args: &BenchTimeArgs) -> Result<()> {
    let records = load_records(&args.data, "test.jsonl", args.limit)?;
    let predictor = load_predictor(args.checkpoint.as_ref(), &args.methods)?;
    let opts = BenchTimeOptions {
        methods: args.methods.clone(),
        warmup: args.warmup,
        sinr_db: args.sinr_db,
        single: args.single,
        ..BenchTimeOptions::default()
    };
    // runs sequentially on this thread
    let rows = experiment::bench_time(&records, predictor.as_ref(), &opts)?;
    experiment::write_csv(create_writer(cli.out.as_deref())?, &rows)?;
    Ok(())
}

fn run_validate(cli: &Cli, args: &ValidateArgs) -> Result<bool> {
    for g in &args.only {
        if !GROUPS.contains(&g.as_str()) {
            Cli::command()
                .error(
                    ErrorKind::InvalidValue,
                    format!("unknown group `{g}`; expected one of {}", GROUPS.join(", ")),
                )
                .exit();
        }
    }
    let results = experiment::run_validation(&args.only, cli.seed.unwrap_or(0))?;
    if !cli.quiet {
        println!(
            "{:<9} {:<46} {:<6} {:>10} {:>8}",
            "group", "check", "result", "worst", "tol"
        );
        for r in &results {
            println!(
                "{:<9} {:<46} {:<6} {:>10.2e} {:>8.0e}",
                r.group,
                r.name,
                if r.passed { "PASS" } else { "FAIL" },
                r.worst,
                r.tol
            );
        }
    }
    if let Some(path) = &cli.out {
        fs::write(path, serde_json::to_string_pretty(&results)?)?;
    }
    Ok(results.iter().all(|r| r.passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet {
        "error"
    } else {
        "warn"
    }))
    .format_timestamp(None)
    .init();
    let outcome = match &cli.cmd {
        Command::GenData(a) => gen_data(&cli, a).map(|_| true),
        Command::Train(a) => run_train(&cli, a).map(|_| true),
        Command::Eval(a) => run_eval(&cli, a).map(|_| true),
        Command::BenchTime(a) => run_bench_time(&cli, a).map(|_| true),
        Command::Validate(a) => run_validate(&cli, a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
