use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use unhate::compositor::Placement;
use unhate::config::{BackendKind, ConfigError, EraserSpec, PipelineConfig, TranscriptMode};
use unhate::detector::{read_failures, read_results, report, write_failures, write_results, DetectionRun};
use unhate::human_eval::VerdictStore;
use unhate::model::{Label, MemeRecord, MultimodalChoice};
use unhate::pipeline::{build_index, by_id, load_pool, load_records, load_substitutes, Pipeline, PipelineError};
use unhate::service::ServiceState;

#[derive(Parser)]
#[command(name = "unhate", version, about = "Hateful meme detection and mitigation")]
struct Cli {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    backend: Option<BackendKind>,
    /// Mock backend seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Transcript file; replayed unless --record is given.
    #[arg(long, global = true)]
    transcript: Option<PathBuf>,
    /// Record backend traffic to --transcript instead of replaying it.
    #[arg(long, global = true, requires = "transcript")]
    record: bool,
    /// Maximum concurrent backend requests.
    #[arg(long, global = true)]
    in_flight: Option<usize>,
    /// Embedding dimension.
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Embedding index maintenance.
    EmbedIndex {
        #[command(subcommand)]
        cmd: IndexCmd,
    },
    /// Classify every meme in a manifest.
    Detect(DetectArgs),
    /// Rewrite hateful memes into non-hateful variants.
    Mitigate(MitigateArgs),
    /// Offline evaluation reports.
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
    },
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Run detection (and mitigation, if configured) twice from a transcript
    /// and compare output hashes.
    ReplayVerify(ReplayArgs),
}

#[derive(Subcommand)]
enum IndexCmd {
    /// Embed a manifest's images into an index file.
    Build {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct PoolArgs {
    /// Demonstration index (labels as class tags).
    #[arg(long, requires = "pool_manifest")]
    pool_index: Option<PathBuf>,
    /// Manifest holding the demonstration memes.
    #[arg(long, requires = "pool_index")]
    pool_manifest: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SubstituteArgs {
    /// Index over the substitute image collection.
    #[arg(long, requires = "substitutes_manifest")]
    substitutes_index: Option<PathBuf>,
    /// Manifest of the substitute images.
    #[arg(long, requires = "substitutes_index")]
    substitutes_manifest: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct DetectArgs {
    /// JSON-lines meme manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Demonstrations per prompt (even; half per class).
    #[arg(long)]
    shots: Option<usize>,
    #[command(flatten)]
    pool: PoolArgs,
    /// Include OCR text in the prompt.
    #[arg(long)]
    ocr: bool,
    /// Directory for results.jsonl, failures.jsonl and metrics.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct MitigateArgs {
    /// JSON-lines meme manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    substitutes: SubstituteArgs,
    /// Retrieved candidates per image substitution.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    choice: Option<MultimodalChoice>,
    /// top, bottom or split.
    #[arg(long)]
    placement: Option<Placement>,
    /// baseline or remote:<url>.
    #[arg(long)]
    eraser: Option<EraserSpec>,
    /// Directory for plans.jsonl, outputs.jsonl, failures.jsonl and one PNG per output.
    #[arg(long)]
    out: PathBuf,
    /// Also mitigate memes labeled non-hateful.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Accuracy and AUROC from a detect results file.
    Metrics {
        /// results.jsonl from a detect run.
        #[arg(long)]
        results: PathBuf,
        /// failures.jsonl from the same run, for refusal and failure counts.
        #[arg(long)]
        failures: Option<PathBuf>,
    },
    /// Aggregate human verdicts.
    HumanReport {
        /// Verdict store directory.
        #[arg(long)]
        store: PathBuf,
        /// Evaluator ids, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        pool: Vec<String>,
        /// JSON instead of a text table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Memes addressable by id.
    #[arg(long)]
    manifest: PathBuf,
    /// Verdict store directory; in-memory when absent.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Evaluator ids, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "eval-1,eval-2,eval-3")]
    pool: Vec<String>,
    #[command(flatten)]
    demos: PoolArgs,
    #[command(flatten)]
    substitutes: SubstituteArgs,
    /// Demonstrations per detection prompt.
    #[arg(long)]
    shots: Option<usize>,
    /// Previous `mitigate` output directory to queue for review.
    #[arg(long)]
    outputs: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    detect: DetectArgs,
    #[command(flatten)]
    substitutes: SubstituteArgs,
    #[arg(long, value_enum)]
    choice: Option<MultimodalChoice>,
    /// Also mitigate memes labeled non-hateful.
    #[arg(long)]
    force: bool,
}

enum Fail {
    /// Bad configuration or input files: exit 2.
    Config(String),
    /// Runtime failure: exit 1.
    Run(String),
}

impl From<ConfigError> for Fail {
    fn from(e: ConfigError) -> Self {
        Fail::Config(e.to_string())
    }
}

impl From<PipelineError> for Fail {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) | PipelineError::Manifest(_) | PipelineError::Index(_) | PipelineError::NoSubstitutes => {
                Fail::Config(e.to_string())
            }
            _ => Fail::Run(e.to_string()),
        }
    }
}

fn run_err(e: impl std::fmt::Display) -> Fail {
    Fail::Run(e.to_string())
}

type Outcome = Result<ExitCode, Fail>;

fn base_config(cli: &Cli) -> Result<PipelineConfig, Fail> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(b) = cli.backend {
        cfg.backend = b;
    }
    if let Some(s) = cli.seed {
        cfg.mock_seed = s;
    }
    if let Some(t) = &cli.transcript {
        cfg.transcript = Some(t.clone());
        cfg.transcript_mode = if cli.record { TranscriptMode::Record } else { TranscriptMode::Replay };
    }
    if let Some(n) = cli.in_flight {
        cfg.in_flight = n;
    }
    if let Some(d) = cli.dim {
        cfg.embedding_dim = d;
    }
    Ok(cfg)
}

fn pool_of(args: &PoolArgs) -> Result<Option<(String, unhate::detector::DemoPool)>, Fail> {
    match (&args.pool_index, &args.pool_manifest) {
        (Some(i), Some(m)) => {
            let name = m.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(Some((name, load_pool(i, m)?)))
        }
        _ => Ok(None),
    }
}

fn substitutes_of(args: &SubstituteArgs) -> Result<Option<unhate::mitigator::SubstituteCollection>, Fail> {
    match (&args.substitutes_index, &args.substitutes_manifest) {
        (Some(i), Some(m)) => Ok(Some(load_substitutes(i, m)?)),
        _ => Ok(None),
    }
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn exit_for(failures: usize) -> ExitCode {
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn embed_index(cfg: PipelineConfig, manifest: &Path, out: &Path) -> Outcome {
    let gateway = cfg.build_gateway()?;
    let records = load_records(manifest)?;
    let index = build_index(&gateway, &records)?;
    index.save(out).map_err(run_err)?;
    eprintln!("indexed {} images (dim {}) into {}", index.len(), index.dim(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn apply_detect(cfg: &mut PipelineConfig, args: &DetectArgs) {
    if let Some(s) = args.shots {
        cfg.shots = s;
    }
    cfg.use_ocr |= args.ocr;
}

fn write_detection(run: &DetectionRun, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    write_results(&dir.join("results.jsonl"), &run.lines())?;
    write_failures(&dir.join("failures.jsonl"), &run.failures)?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&run.metrics())? + "\n")
}

fn detect(mut cfg: PipelineConfig, args: &DetectArgs) -> Outcome {
    apply_detect(&mut cfg, args);
    let records = load_records(&args.manifest)?;
    let pipeline = Pipeline::new(cfg, pool_of(&args.pool)?, None)?;
    let run = pipeline.detect(&records);
    if let Some(dir) = &args.out {
        write_detection(&run, dir).map_err(run_err)?;
    }
    print_json(&run.metrics());
    Ok(exit_for(run.failures.len()))
}

/// Memes to mitigate: hateful or unlabeled, or everything when forced.
fn mitigation_inputs(records: Vec<MemeRecord>, force: bool) -> (Vec<MemeRecord>, usize) {
    let total = records.len();
    let kept: Vec<_> = records
        .into_iter()
        .filter(|r| force || r.label != Some(Label::NonHateful))
        .collect();
    let skipped = total - kept.len();
    (kept, skipped)
}

fn mitigate(mut cfg: PipelineConfig, args: &MitigateArgs) -> Outcome {
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if let Some(c) = args.choice {
        cfg.choice = c;
    }
    if let Some(p) = args.placement {
        cfg.placement = p;
    }
    if let Some(e) = &args.eraser {
        cfg.eraser = e.clone();
    }
    let subs = substitutes_of(&args.substitutes)?.ok_or(PipelineError::NoSubstitutes)?;
    let (records, skipped) = mitigation_inputs(load_records(&args.manifest)?, args.force);
    let choice = cfg.choice;
    let pipeline = Pipeline::new(cfg, None, Some(subs))?;
    let run = pipeline.mitigate(&records, choice)?;
    run.write(&args.out).map_err(run_err)?;
    print_json(&json!({
        "memes": records.len(),
        "skipped_non_hateful": skipped,
        "choice": run.choice,
        "splits": run.counters,
        "outputs": run.outputs.len(),
        "expected_outputs": run.counters.expected_outputs(run.choice),
        "identity_holds": run.identity_holds(),
        "failures": run.failures.len(),
    }));
    Ok(exit_for(run.failures.len()))
}

fn eval(cmd: &EvalCmd) -> Outcome {
    match cmd {
        EvalCmd::Metrics { results, failures } => {
            let lines = read_results(results).map_err(|e| Fail::Config(format!("{}: {e}", results.display())))?;
            let fails = match failures {
                Some(p) => read_failures(p).map_err(|e| Fail::Config(format!("{}: {e}", p.display())))?,
                None => Vec::new(),
            };
            let refusals = fails.iter().filter(|f| f.refusal).count();
            print_json(&report(&lines, refusals, fails.len()));
            Ok(ExitCode::SUCCESS)
        }
        EvalCmd::HumanReport { store, pool, json } => {
            if !store.is_dir() {
                return Err(Fail::Config(format!("store {} is not a directory", store.display())));
            }
            let store = VerdictStore::open(store, pool.clone()).map_err(|e| Fail::Config(e.to_string()))?;
            let report = store.aggregate();
            if *json {
                print_json(&report);
            } else {
                print!("{}", report.to_table());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn serve(mut cfg: PipelineConfig, args: &ServeArgs) -> Outcome {
    if let Some(s) = args.shots {
        cfg.shots = s;
    }
    let memes = by_id(load_records(&args.manifest)?);
    // Build every blocking client before the async runtime exists.
    let pipeline = Arc::new(Pipeline::new(cfg, pool_of(&args.demos)?, substitutes_of(&args.substitutes)?)?);
    let store = match &args.store {
        Some(dir) => VerdictStore::open(dir, args.pool.clone()).map_err(|e| Fail::Config(e.to_string()))?,
        None => VerdictStore::new(args.pool.clone()),
    };
    let state = Arc::new(ServiceState::new(pipeline, memes, store));
    if let Some(dir) = &args.outputs {
        let n = state.add_outputs_dir(dir).map_err(Fail::Config)?;
        eprintln!("queued {n} variants from {}", dir.display());
    }
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(run_err)?;
    let served = runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.addr)
            .await
            .map_err(|e| Fail::Config(format!("binding {}: {e}", args.addr)))?;
        eprintln!("listening on {}", listener.local_addr().map_err(run_err)?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        unhate::service::serve(listener, state.clone(), shutdown).await.map_err(run_err)
    });
    drop(runtime);
    drop(state);
    served.map(|_| ExitCode::SUCCESS)
}

fn hash_dir(dir: &Path) -> std::io::Result<String> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(p.file_name().unwrap().as_encoded_bytes());
        h.update([0]);
        h.update(std::fs::read(&p)?);
    }
    Ok(hex::encode(h.finalize()))
}

fn replay_once(cfg: &PipelineConfig, args: &ReplayArgs, dir: &Path) -> Result<(String, usize), Fail> {
    let records = load_records(&args.detect.manifest)?;
    let pipeline = Pipeline::new(cfg.clone(), pool_of(&args.detect.pool)?, substitutes_of(&args.substitutes)?)?;
    let detection = pipeline.detect(&records);
    write_detection(&detection, &dir.join("detect")).map_err(run_err)?;
    let mut failures = detection.failures.len();
    if pipeline.can_mitigate() {
        let (memes, _) = mitigation_inputs(records, args.force);
        let run = pipeline.mitigate(&memes, args.choice.unwrap_or(cfg.choice))?;
        run.write(&dir.join("mitigate")).map_err(run_err)?;
        failures += run.failures.len();
    }
    let mut h = Sha256::new();
    for sub in ["detect", "mitigate"] {
        let d = dir.join(sub);
        if d.is_dir() {
            h.update(hash_dir(&d).map_err(run_err)?);
        }
    }
    Ok((hex::encode(h.finalize()), failures))
}

fn replay_verify(mut cfg: PipelineConfig, args: &ReplayArgs) -> Outcome {
    if cfg.transcript_mode != TranscriptMode::Replay {
        return Err(Fail::Config("replay-verify needs --transcript (without --record)".into()));
    }
    apply_detect(&mut cfg, &args.detect);
    let scratch = match &args.detect.out {
        Some(d) => d.clone(),
        None => std::env::temp_dir().join(format!("unhate-replay-{}", std::process::id())),
    };
    let mut hashes = Vec::new();
    let mut failures = 0;
    for run in ["a", "b"] {
        let dir = scratch.join(run);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(run_err)?;
        }
        let (hash, f) = replay_once(&cfg, args, &dir)?;
        hashes.push(hash);
        failures = f;
    }
    if args.detect.out.is_none() {
        let _ = std::fs::remove_dir_all(&scratch);
    }
    let identical = hashes[0] == hashes[1];
    print_json(&json!({ "hashes": hashes, "identical": identical, "failures": failures }));
    Ok(if identical { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn run(cli: &Cli) -> Outcome {
    let cfg = base_config(cli)?;
    match &cli.cmd {
        Cmd::EmbedIndex {
            cmd: IndexCmd::Build { manifest, out },
        } => embed_index(cfg, manifest, out),
        Cmd::Detect(args) => detect(cfg, args),
        Cmd::Mitigate(args) => mitigate(cfg, args),
        Cmd::Eval { cmd } => eval(cmd),
        Cmd::Serve(args) => serve(cfg, args),
        Cmd::ReplayVerify(args) => replay_verify(cfg, args),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(Fail::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Fail::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
