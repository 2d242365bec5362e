//! `ctxhead`: generate data, train, calibrate, detect, evaluate, benchmark
//! filtering and run the self-check suites.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctxhead::dataio::{generate_synthetic, load_detections, load_scenes, save_detections, save_splits, write_text};
use ctxhead::evalkit::{curve_csv, curve_svg, evaluate};
use ctxhead::geom::build_grid;
use ctxhead::globalmodel::train_global;
use ctxhead::local::train_local;
use ctxhead::nets::{trace_csv, ModelArchive, TracePoint};
use ctxhead::pipeline::{calibrate, detections_from_outputs, filter_bench, filter_csv, score_scenes, Calibration};
use ctxhead::structloss::{initialize_pairwise, train_pairwise};
use ctxhead::verify::{run_suite, Suite, VerifyConfig};
use ctxhead::{CombineParams, DetectMode, GlobalModel, InferenceMethod, LocalModel, Models, PairwiseModelParams};

use config::RunConfig;
use manifest::RunManifest;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ctxhead::Error> for Failure {
    fn from(e: ctxhead::Error) -> Self {
        match e {
            ctxhead::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "ctxhead", version, about = "Context-aware head detection toolkit")]
struct Cli {
    /// TOML file with [synth], [local], [global] and [pairwise] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces every random seed of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-scene work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/val/test synthetic scene files.
    Synth,
    /// Train one of the three models.
    Train(TrainArgs),
    /// Grid-search combination parameters on validation scenes.
    Calibrate(CalibrateArgs),
    /// Score scenes and write detections.
    Detect(DetectArgs),
    /// Evaluate a detection file against scenes.
    Eval(EvalArgs),
    /// AP of the local model after keeping only the best-cell candidates.
    FilterBench(FilterArgs),
    /// Run self-check suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Local,
    Global,
    Pairwise,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(value_enum)]
    kind: Kind,
    /// Training scenes.
    #[arg(long)]
    data: PathBuf,
    /// Trained local model (required for pairwise).
    #[arg(long)]
    local: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    local: PathBuf,
    #[arg(long)]
    global: Option<PathBuf>,
    #[arg(long)]
    pairwise: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[command(flatten)]
    models: ModelArgs,
    #[arg(long, default_value = "full", value_parser = parse_mode)]
    mode: DetectMode,
    #[arg(long, value_enum, default_value = "cascade")]
    inference: Method,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[command(flatten)]
    models: ModelArgs,
    #[arg(long, default_value = "local", value_parser = parse_mode)]
    mode: DetectMode,
    #[arg(long, value_enum, default_value = "cascade")]
    inference: Method,
    /// Calibration file written by `calibrate`; individual flags override it.
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
}

#[derive(Args, Debug)]
struct FilterArgs {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    local: PathBuf,
    #[arg(long)]
    global: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.7,0.5,0.3,0.2,0.1")]
    fractions: Vec<f64>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, value_parser = parse_suite)]
    suite: Option<Suite>,
    /// Add 1 to this entry of the analytic joint-model gradient.
    #[arg(long)]
    corrupt_param: Option<usize>,
    /// Random inference instances checked.
    #[arg(long, default_value_t = 1000)]
    instances: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Method {
    Exhaustive,
    Cascade,
}

impl From<Method> for InferenceMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Exhaustive => InferenceMethod::Exhaustive,
            Method::Cascade => InferenceMethod::Cascade,
        }
    }
}

fn parse_mode(s: &str) -> Result<DetectMode, String> {
    s.parse().map_err(|e: ctxhead::Error| e.to_string())
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: ctxhead::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", cli.out.display())))?;
    let name = match &cli.command {
        Command::Synth => "synth".to_string(),
        Command::Train(a) => format!("train {}", format!("{:?}", a.kind).to_lowercase()),
        Command::Calibrate(_) => "calibrate".into(),
        Command::Detect(_) => "detect".into(),
        Command::Eval(_) => "eval".into(),
        Command::FilterBench(_) => "filter-bench".into(),
        Command::Verify(_) => "verify".into(),
    };
    let mut m = RunManifest::new(&name, cli.config.as_deref(), cli.seed, cli.threads);
    let out = cli.out.as_path();
    match cli.command {
        Command::Synth => synth(&cfg, out, &mut m)?,
        Command::Train(a) => train(&cfg, &a, out, &mut m)?,
        Command::Calibrate(a) => cmd_calibrate(&a, out, &mut m)?,
        Command::Detect(a) => detect(&a, out, &mut m)?,
        Command::Eval(a) => eval(&a, out, &mut m)?,
        Command::FilterBench(a) => cmd_filter(&a, out, &mut m)?,
        Command::Verify(a) => return verify(&a, cli.seed, out, m),
    }
    let path = m.write(out)?;
    eprintln!("manifest: {}", path.display());
    Ok(())
}

fn load(path: &Path, m: &mut RunManifest) -> Result<Vec<ctxhead::SceneRecord>, Failure> {
    m.input(path);
    Ok(load_scenes(path)?)
}

fn read_archive(path: &Path, m: &mut RunManifest) -> Result<ModelArchive, Failure> {
    m.input(path);
    let bytes = std::fs::read(path).map_err(|e| Failure::Runtime(format!("cannot read model {}: {e}", path.display())))?;
    Ok(ModelArchive::from_bytes(&bytes)?)
}

fn write_archive(path: &Path, a: &ModelArchive, m: &mut RunManifest) -> Result<(), Failure> {
    std::fs::write(path, a.to_bytes()).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
    m.output(path);
    Ok(())
}

fn write(path: &Path, text: &str, m: &mut RunManifest) -> Result<(), Failure> {
    write_text(path, text)?;
    m.output(path);
    Ok(())
}

fn synth(cfg: &RunConfig, out: &Path, m: &mut RunManifest) -> Result<(), Failure> {
    m.settings(&cfg.synth)?;
    m.phase("generate");
    let splits = generate_synthetic(&cfg.synth)?;
    m.phase("write");
    save_splits(out, &splits)?;
    for f in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        m.output(&out.join(f));
    }
    m.result("scenes", [splits.train.len(), splits.validation.len(), splits.test.len()]);
    println!(
        "wrote {} train, {} validation, {} test scenes to {}",
        splits.train.len(),
        splits.validation.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}

fn trace_summary(kind: &str, trace: &[TracePoint], out: &Path, m: &mut RunManifest) -> Result<(), Failure> {
    write(&out.join(format!("{kind}_trace.csv")), &trace_csv(trace), m)?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        m.result("steps", trace.len());
        m.result("first_loss", first.loss);
        m.result("last_loss", last.loss);
        println!("{kind}: {} steps, loss {:.6} -> {:.6}", trace.len(), first.loss, last.loss);
    }
    Ok(())
}

fn train(cfg: &RunConfig, a: &TrainArgs, out: &Path, m: &mut RunManifest) -> Result<(), Failure> {
    match a.kind {
        Kind::Local => {
            m.settings(&cfg.local)?;
            let scenes = load(&a.data, m)?;
            m.phase("train");
            let (model, trace) = train_local(&scenes, &cfg.local)?;
            write_archive(&out.join("local.model"), &model.to_archive(), m)?;
            trace_summary("local", &trace, out, m)
        }
        Kind::Global => {
            m.settings(&cfg.global)?;
            let scenes = load(&a.data, m)?;
            m.phase("train");
            let (model, trace) = train_global(&scenes, &build_grid(), &cfg.global)?;
            write_archive(&out.join("global.model"), &model.to_archive(), m)?;
            trace_summary("global", &trace, out, m)
        }
        Kind::Pairwise => {
            m.settings(&cfg.pairwise)?;
            let local_path = a
                .local
                .as_ref()
                .ok_or_else(|| Failure::Usage("pairwise training needs a trained local model (--local)".into()))?;
            let local = LocalModel::from_archive(&read_archive(local_path, m)?)?;
            let scenes = load(&a.data, m)?;
            m.phase("initialize");
            let init = initialize_pairwise(&scenes, &local, &cfg.pairwise)?;
            m.phase("train");
            let (model, trace) = train_pairwise(&scenes, &local, init, &cfg.pairwise.sgd)?;
            write_archive(&out.join("pairwise.model"), &model.to_archive(), m)?;
            trace_summary("pairwise", &trace, out, m)
        }
    }
}

fn load_models(a: &ModelArgs, m: &mut RunManifest) -> Result<Models, Failure> {
    let local = LocalModel::from_archive(&read_archive(&a.local, m)?)?;
    let global = match &a.global {
        Some(p) => Some(GlobalModel::from_archive(&read_archive(p, m)?)?),
        None => None,
    };
    let pairwise = match &a.pairwise {
        Some(p) => Some(PairwiseModelParams::from_archive(&read_archive(p, m)?)?),
        None => None,
    };
    Ok(Models { local, global, pairwise })
}

/// Missing models for the mode are a usage error, not a runtime one.
fn check_models(models: &Models, mode: DetectMode) -> Result<(), Failure> {
    models.check(mode).map_err(|e| match e {
        ctxhead::Error::Model(msg) => Failure::Usage(msg),
        e => e.into(),
    })
}

fn cmd_calibrate(a: &CalibrateArgs, out: &Path, m: &mut RunManifest) -> Result<(), Failure> {
    m.settings(&serde_json::json!({ "mode": a.mode, "inference": InferenceMethod::from(a.inference) }))?;
    let models = load_models(&a.models, m)?;
    check_models(&models, a.mode)?;
    let scenes = load(&a.scenes, m)?;
    m.phase("score");
    let outputs = score_scenes(&scenes, &models, &build_grid(), a.mode, a.inference.into())?;
    m.phase("search");
    let c = calibrate(&scenes, &outputs, a.mode)?;
    let text = serde_json::to_string_pretty(&serde_json::json!({ "mode": a.mode, "calibration": c }))
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    write(&out.join("calibration.json"), &(text + "\n"), m)?;
    m.result("calibration", c);
    println!(
        "{}: alpha {:.2} beta {:.1} gamma {:.2}, validation AP {:.4}",
        a.mode, c.params.alpha, c.params.beta, c.params.gamma, c.ap
    );
    Ok(())
}

fn read_calibration(path: &Path, m: &mut RunManifest) -> Result<CombineParams, Failure> {
    m.input(path);
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", path.display())))?;
    #[derive(serde::Deserialize)]
    struct File {
        calibration: Calibration,
    }
    let f: File = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Ok(f.calibration.params)
}

fn detect(a: &DetectArgs, out: &Path, m: &mut RunManifest) -> Result<(), Failure> {
    let mut p = match &a.calibration {
        Some(path) => read_calibration(path, m)?,
        None => CombineParams::default(),
    };
    p.alpha = a.alpha.unwrap_or(p.alpha);
    p.beta = a.beta.unwrap_or(p.beta);
    p.gamma = a.gamma.unwrap_or(p.gamma);
    p.validate()?;
    m.settings(&serde_json::json!({ "mode": a.mode, "inference": InferenceMethod::from(a.inference), "combine": p }))?;
    let models = load_models(&a.models, m)?;
    check_models(&models, a.mode)?;
    let scenes = load(&a.scenes, m)?;
    m.phase("score");
    let outputs = score_scenes(&scenes, &models, &build_grid(), a.mode, a.inference.into())?;
    let dets = detections_from_outputs(&scenes, &outputs, a.mode, &p);
    let path = out.join("detections.csv");
    save_detections(&path, &dets)?;
    m.output(&path);
    let n: usize = dets.iter().map(|d| d.detections.len()).sum();
    m.result("detections", n);
    println!("{}: {n} detections in {} scenes", a.mode, dets.len());
    Ok(())
}

fn eval(a: &EvalArgs, out: &Path, m: &mut RunManifest) -> Result<(), Failure> {
    let scenes = load(&a.scenes, m)?;
    m.input(&a.detections);
    let dets = load_detections(&a.detections)?;
    m.phase("evaluate");
    let e = evaluate(&scenes, &dets)?;
    write(&out.join("pr.csv"), &curve_csv(&e.curve), m)?;
    let title = a.detections.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    write(&out.join("pr.svg"), &curve_svg(&e.curve, &title), m)?;
    m.result("ap", e.curve.ap);
    m.result("ignored", e.ignored);
    println!("AP {:.4}", e.curve.ap);
    Ok(())
}

fn cmd_filter(a: &FilterArgs, out: &Path, m: &mut RunManifest) -> Result<(), Failure> {
    if let Some(f) = a.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Failure::Usage(format!("keep fraction {f} outside (0, 1]")));
    }
    m.settings(&serde_json::json!({ "fractions": a.fractions }))?;
    let models = Models {
        local: LocalModel::from_archive(&read_archive(&a.local, m)?)?,
        global: Some(GlobalModel::from_archive(&read_archive(&a.global, m)?)?),
        pairwise: None,
    };
    let scenes = load(&a.scenes, m)?;
    m.phase("bench");
    let rows = filter_bench(&scenes, &models, &build_grid(), &a.fractions)?;
    write(&out.join("filter_bench.csv"), &filter_csv(&rows), m)?;
    for r in &rows {
        println!("keep {:.2}: {} candidates, AP {:.4}", r.keep_fraction, r.candidates, r.ap);
    }
    m.result("rows", rows);
    Ok(())
}

fn verify(a: &VerifyArgs, seed: Option<u64>, out: &Path, mut m: RunManifest) -> Result<(), Failure> {
    let defaults = VerifyConfig::default();
    let cfg = VerifyConfig {
        seed: seed.unwrap_or(defaults.seed),
        inference_instances: a.instances,
        corrupt_parameter: a.corrupt_param,
        ..defaults
    };
    m.settings(&cfg)?;
    let suites: Vec<Suite> = a.suite.map_or(Suite::ALL.to_vec(), |s| vec![s]);
    let mut report = String::new();
    let mut ok = true;
    for s in suites {
        m.phase(&s.to_string());
        let r = run_suite(s, &cfg)?;
        print!("{}", r.render());
        report.push_str(&r.render());
        ok &= r.passed();
        m.result(&s.to_string(), r.passed());
    }
    write(&out.join("verify.txt"), &report, &mut m)?;
    m.write(out)?;
    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime("verification failed".into()))
    }
}
