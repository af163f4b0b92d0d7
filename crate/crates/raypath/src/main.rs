//! Command-line front end: scene generation, enumeration, tracing, oracle
//! queries, baselines, training, evaluation, and metrics export.
//!
//! Exit codes: 0 success, 2 usage error, 3 unreadable/unwritable file,
//! 4 invalid input or config, 5 runtime failure (caps, placement,
//! non-finite training state). Failures print one machine-parseable line:
//! `error kind=<usage|io|invalid|runtime> msg="..."`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use raypath::candgen::{
    count_candidates, enumerate_candidates, oracle_valid_set, random_baseline, CandGenError,
    DEFAULT_ORACLE_CAP,
};
use raypath::geometry::{load_scene, save_scene, GeometryError, Scene};
use raypath::gfn::GfnModel;
use raypath::neural::{Checkpoint, NeuralError};
use raypath::tracer::{trace_path, validate_path, PathCandidate, TraceError, DEFAULT_K_MAX};
use raypath::trainpipe::{
    eval_scene_set, evaluate, generate_canyon_scene, parse_metrics_csv, train, CanyonParams,
    MetricsRow, TrainConfig, TrainError, METRICS_HEADER,
};

const EXIT_IO: u8 = 3;
const EXIT_INVALID: u8 = 4;
const EXIT_RUNTIME: u8 = 5;

#[derive(Parser)]
#[command(
    name = "raypath",
    about = "Point-to-point specular ray tracing with a trainable path-candidate sampler",
    version
)]
struct Cli {
    /// Cap the worker thread count (also honored via RAYPATH_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Preset {
    Desk,
    Full,
}

impl Preset {
    fn canyon(self) -> CanyonParams {
        match self {
            Preset::Desk => CanyonParams::desk(),
            Preset::Full => CanyonParams::default(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random street-canyon scene file.
    GenScene(GenSceneArgs),
    /// Print every masked path candidate for (N, K), one JSON array per line.
    Enumerate(EnumerateArgs),
    /// Trace and validate every candidate of a scene; emit the valid ones.
    Oracle(OracleArgs),
    /// Trace one candidate and print its ray path and validity report.
    Trace(TraceArgs),
    /// Accuracy of uniform-random candidate sampling against the oracle.
    Baseline(BaselineArgs),
    /// Train the sampler per a JSON config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on freshly generated scenes.
    Eval(EvalArgs),
    /// Re-emit a metrics log as CSV or JSON.
    ExportMetrics(ExportMetricsArgs),
}

#[derive(Args)]
struct GenSceneArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Override the preset's maximum number of removed facets.
    #[arg(long)]
    r_max: Option<usize>,
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
}

#[derive(Args)]
struct EnumerateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    k: usize,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    k: usize,
    /// Output file (JSON lines); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ORACLE_CAP)]
    cap: u64,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Facet indices, comma separated, e.g. "3,0,7".
    #[arg(long)]
    candidate: String,
    #[arg(long, default_value_t = DEFAULT_K_MAX)]
    k_max: usize,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    samples: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_ORACLE_CAP)]
    cap: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to initialize from (curriculum or resume).
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scenes_seed: u64,
    #[arg(long, default_value_t = 100)]
    num: usize,
    #[arg(long, default_value_t = 10)]
    samples: usize,
    /// Interaction count; defaults to the checkpoint's.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0xE7A1)]
    draw_seed: u64,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long, default_value_t = DEFAULT_ORACLE_CAP)]
    cap: u64,
}

#[derive(Args)]
struct ExportMetricsArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long, value_enum)]
    format: ExportFormat,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum ExportFormat {
    Csv,
    Json,
}

struct Failure {
    kind: &'static str,
    code: u8,
    msg: String,
}

impl Failure {
    fn new(kind: &'static str, code: u8, msg: impl ToString) -> Self {
        Failure {
            kind,
            code,
            msg: msg.to_string(),
        }
    }
}

impl From<GeometryError> for Failure {
    fn from(e: GeometryError) -> Self {
        match e {
            GeometryError::Io { .. } => Failure::new("io", EXIT_IO, e),
            _ => Failure::new("invalid", EXIT_INVALID, e),
        }
    }
}

impl From<TraceError> for Failure {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::ParallelSegment { .. } => Failure::new("runtime", EXIT_RUNTIME, e),
            _ => Failure::new("invalid", EXIT_INVALID, e),
        }
    }
}

impl From<CandGenError> for Failure {
    fn from(e: CandGenError) -> Self {
        Failure::new("runtime", EXIT_RUNTIME, e)
    }
}

impl From<NeuralError> for Failure {
    fn from(e: NeuralError) -> Self {
        match e {
            NeuralError::Io(_) => Failure::new("io", EXIT_IO, e),
            NeuralError::Parse(_) => Failure::new("invalid", EXIT_INVALID, e),
            _ => Failure::new("runtime", EXIT_RUNTIME, e),
        }
    }
}

impl From<raypath::gfn::GfnError> for Failure {
    fn from(e: raypath::gfn::GfnError) -> Self {
        Failure::new("runtime", EXIT_RUNTIME, e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io { .. } => Failure::new("io", EXIT_IO, e),
            TrainError::Config(_) | TrainError::ArchMismatch(_) => {
                Failure::new("invalid", EXIT_INVALID, e)
            }
            TrainError::Geometry(ge) => ge.into(),
            TrainError::Neural(ne) => ne.into(),
            _ => Failure::new("runtime", EXIT_RUNTIME, e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new("io", EXIT_IO, e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let threads = cli.threads.or_else(|| {
        std::env::var("RAYPATH_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if n == 0 {
            eprintln!("error kind=invalid msg=\"--threads must be positive\"");
            return ExitCode::from(EXIT_INVALID);
        }
        // Errors only if a global pool already exists; harmless here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }

    let result = match cli.command {
        Command::GenScene(args) => cmd_gen_scene(args),
        Command::Enumerate(args) => cmd_enumerate(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Trace(args) => cmd_trace(args),
        Command::Baseline(args) => cmd_baseline(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::ExportMetrics(args) => cmd_export_metrics(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error kind={} msg=\"{}\"", f.kind, f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_gen_scene(args: GenSceneArgs) -> Result<(), Failure> {
    use rand::SeedableRng;
    let mut params = args.preset.canyon();
    if let Some(r) = args.r_max {
        params.r_max = r;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
    let scene = generate_canyon_scene(&mut rng, &params)?;
    save_scene(&args.out, &scene)?;
    println!(
        "{}",
        serde_json::json!({
            "out": args.out.display().to_string(),
            "facets": scene.num_facets(),
            "seed": args.seed,
        })
    );
    Ok(())
}

fn cmd_enumerate(args: EnumerateArgs) -> Result<(), Failure> {
    if args.n < 1 || args.k < 1 {
        return Err(Failure::new("invalid", EXIT_INVALID, "need --n >= 1 and --k >= 1"));
    }
    // Locks stdout once; enumeration can be large.
    use std::io::Write;
    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    for cand in enumerate_candidates(args.n, args.k) {
        writeln!(out, "{}", serde_json::to_string(cand.ids()).expect("ids json"))?;
    }
    out.flush()?;
    Ok(())
}

fn ray_path_json(path: &raypath::tracer::RayPath) -> serde_json::Value {
    serde_json::json!({
        "candidate": path.candidate.ids(),
        "points": path.points.iter().map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>(),
        "length": path.total_length(),
    })
}

fn cmd_oracle(args: OracleArgs) -> Result<(), Failure> {
    let scene = load_scene(&args.scene)?;
    let valid = oracle_valid_set(&scene, args.k, args.cap)?;
    let mut lines = String::new();
    for (_, path) in &valid {
        lines.push_str(&ray_path_json(path).to_string());
        lines.push('\n');
    }
    match &args.out {
        Some(path) => std::fs::write(path, lines)?,
        None => print!("{lines}"),
    }
    eprintln!(
        "oracle: {} valid of {} candidates",
        valid.len(),
        count_candidates(scene.num_facets(), args.k).map_err(Failure::from)?
    );
    Ok(())
}

fn cmd_trace(args: TraceArgs) -> Result<(), Failure> {
    let scene = load_scene(&args.scene)?;
    let ids: Result<Vec<usize>, _> = args
        .candidate
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect();
    let ids = ids.map_err(|e| Failure::new("invalid", EXIT_INVALID, format!("bad candidate: {e}")))?;
    let cand = PathCandidate::new(ids, scene.num_facets(), args.k_max).map_err(Failure::from)?;
    let path = trace_path(&scene, &cand).map_err(Failure::from)?;
    let report = validate_path(&scene, &path);
    let mut value = ray_path_json(&path);
    value["valid"] = serde_json::json!(report.valid);
    value["failure"] = serde_json::to_value(report.failure).expect("failure json");
    println!("{value}");
    Ok(())
}

fn cmd_baseline(args: BaselineArgs) -> Result<(), Failure> {
    let scene = load_scene(&args.scene)?;
    if args.samples == 0 {
        return Err(Failure::new("invalid", EXIT_INVALID, "--samples must be positive"));
    }
    let n = scene.num_facets();
    if n < 2 && args.k > 1 {
        return Err(Failure::new(
            "invalid",
            EXIT_INVALID,
            "masked space is empty for N=1, K>1",
        ));
    }
    let oracle: std::collections::BTreeSet<Vec<usize>> = oracle_valid_set(&scene, args.k, args.cap)?
        .into_iter()
        .map(|(c, _)| c.ids().to_vec())
        .collect();
    let draws = random_baseline(n, args.k, args.samples, args.seed);
    let hits = draws.iter().filter(|c| oracle.contains(c.ids())).count();
    let count = count_candidates(n, args.k).map_err(Failure::from)?;
    println!(
        "{}",
        serde_json::json!({
            "samples": args.samples,
            "accuracy": hits as f64 / args.samples as f64,
            "oracle_size": oracle.len(),
            "candidate_count": count,
            "exact_uniform_accuracy": oracle.len() as f64 / count as f64,
        })
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let cfg = TrainConfig::load(&args.config)?;
    let init = match &args.init {
        Some(path) => Some(Checkpoint::load(path)?),
        None => None,
    };
    let outcome = train(&cfg, init.as_ref())?;
    let last = outcome.metrics.last().expect("train always evaluates");
    println!(
        "{}",
        serde_json::json!({
            "steps": cfg.steps,
            "final_accuracy": last.accuracy,
            "final_hit_rate": last.hit_rate,
            "metrics_csv": outcome.metrics_csv.display().to_string(),
            "checkpoint": outcome.final_checkpoint.display().to_string(),
        })
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let (model, ckpt_k) = GfnModel::from_checkpoint(&ckpt).map_err(Failure::from)?;
    let k = args.k.unwrap_or(ckpt_k);
    if k < 1 || args.num == 0 || args.samples == 0 {
        return Err(Failure::new(
            "invalid",
            EXIT_INVALID,
            "need k >= 1, --num >= 1, --samples >= 1",
        ));
    }
    let scenes: Vec<Scene> = eval_scene_set(args.scenes_seed, args.num, &args.preset.canyon())?;
    let metrics = evaluate(&model, &scenes, k, args.samples, args.draw_seed, args.cap)?;
    println!(
        "{}",
        serde_json::json!({
            "k": k,
            "scenes": args.num,
            "samples_per_scene": args.samples,
            "accuracy": metrics.accuracy,
            "hit_rate": metrics.hit_rate,
            "per_scene": metrics.per_scene,
        })
    );
    Ok(())
}

fn cmd_export_metrics(args: ExportMetricsArgs) -> Result<(), Failure> {
    let rows: Vec<MetricsRow> = parse_metrics_csv(&args.log)?;
    match args.format {
        ExportFormat::Csv => {
            println!("{METRICS_HEADER}");
            for r in rows {
                println!("{},{},{},{}", r.step, r.loss, r.accuracy, r.hit_rate);
            }
        }
        ExportFormat::Json => {
            // NaN loss (the pre-training eval row) has no JSON number form;
            // export it as null.
            let values: Vec<serde_json::Value> = rows
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "step": r.step,
                        "loss": if r.loss.is_nan() {
                            serde_json::Value::Null
                        } else {
                            serde_json::json!(r.loss)
                        },
                        "accuracy": r.accuracy,
                        "hit_rate": r.hit_rate,
                    })
                })
                .collect();
            println!("{}", serde_json::to_string(&values).expect("rows json"));
        }
    }
    Ok(())
}
