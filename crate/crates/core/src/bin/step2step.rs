use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use step2step::config::RunConfig;
use step2step::control::{ClosedLoop, ControllerMode};
use step2step::gait::GaitSpec;
use step2step::invariance::{certify, verify_certificate};
use step2step::poincare::{find_fixed_point, FixedPointOptions, ReducedChart};
use step2step::sim::{rollout, write_trajectory_csv};
use step2step::synth::{
    beta_hash, optimize_loop, synthesize_gait, Candidate, EvalSettings, HistoryRecord, LoopObserver, Objective,
};
use step2step::{Error, RobotModel};

#[derive(Parser)]
#[command(name = "step2step", version, about = "Gait synthesis, simulation and barrier certification for planar bipeds")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override (takes precedence over STEP2STEP_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, value_parser = ["fblin", "pd"])]
    controller: Option<String>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Raise log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a periodic gait and write it as JSON.
    Synthesize {
        #[arg(long)]
        step_length: Option<f64>,
        #[arg(long)]
        step_duration: Option<f64>,
        #[arg(long)]
        step_height: Option<f64>,
        #[arg(long)]
        degree: Option<usize>,
        /// Output file (default: <output_dir>/gait.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll a gait out and write a 1 kHz trajectory CSV and a summary.
    Simulate {
        #[arg(long)]
        gait: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Certify a forward-invariant set around the gait's fixed point.
    Certify {
        #[arg(long)]
        gait: PathBuf,
        /// Verification horizon in steps; 0 skips verification.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Run the simulation-in-the-loop search over essential constraints.
    Optimize {
        #[arg(long, value_parser = ["robustness", "stability_only"])]
        objective: Option<String>,
        /// History file of an interrupted run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        gaits: Option<usize>,
    },
    /// Fixed point and Floquet multipliers of a gait.
    Analyze {
        #[arg(long)]
        gait: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Domain(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Domain(_) => 2,
            Failure::Internal(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::InvalidModel(_) | Error::InvalidGait(_) => Failure::Usage(msg),
            Error::Io(_) | Error::Json(_) => Failure::Internal(msg),
            _ => Failure::Domain(msg),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

struct Context {
    config: RunConfig,
    model: RobotModel,
    hash: String,
}

fn build_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.apply_env()?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(mode) = &cli.controller {
        config.controller.mode = mode.parse::<ControllerMode>()?;
    }
    if let Some(dir) = &cli.output_dir {
        config.output_dir = dir.clone();
    }
    match &cli.command {
        Command::Synthesize { step_length, step_duration, step_height, degree, .. } => {
            let y = &mut config.synthesis;
            y.step_length = step_length.unwrap_or(y.step_length);
            y.step_duration = step_duration.unwrap_or(y.step_duration);
            y.step_height = step_height.unwrap_or(y.step_height);
            y.degree = degree.unwrap_or(y.degree);
        }
        Command::Simulate { steps: Some(n), .. } => config.simulate.steps = *n,
        Command::Certify { horizon: Some(h), .. } => config.verify.horizon = *h,
        Command::Optimize { iterations, gaits, .. } => {
            let o = &mut config.optimize;
            o.iterations = iterations.unwrap_or(o.iterations);
            o.gaits_per_iteration = gaits.unwrap_or(o.gaits_per_iteration);
        }
        _ => {}
    }
    config.validate()?;
    Ok(config)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Internal(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?))
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::Internal(e.to_string()))
}

fn load_gait(ctx: &Context, path: &Path) -> CliResult<GaitSpec> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let gait = GaitSpec::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    gait.validate(&ctx.model)?;
    if gait.fixed_point.is_none() {
        return Err(Failure::Usage(format!("{}: gait carries no pre-impact state", path.display())));
    }
    Ok(gait)
}

fn field_for(ctx: &Context, gait: &GaitSpec) -> ClosedLoop {
    ClosedLoop::new(Arc::new(ctx.model.clone()), Arc::new(gait.clone()), ctx.config.controller)
}

fn cmd_synthesize(ctx: &Context, out: Option<PathBuf>) -> CliResult<()> {
    let c = &ctx.config;
    let report = synthesize_gait(&ctx.model, &c.essential(), &c.synthesis_options())?;
    let mut gait = report.gait;
    gait.config_hash = Some(ctx.hash.clone());
    let path = out.unwrap_or_else(|| c.output_dir.join("gait.json"));
    write_text(&path, &gait.to_json()?)?;
    let summary = json!({
        "gait_file": path,
        "residuals": report.residuals,
        "iterations": report.iterations,
        "start": report.start,
        "beta_hash": beta_hash(&gait),
        "config_hash": ctx.hash,
    });
    println!("{}", to_json(&summary)?);
    Ok(())
}

fn cmd_simulate(ctx: &Context, gait_path: &Path) -> CliResult<()> {
    let c = &ctx.config;
    let gait = load_gait(ctx, gait_path)?;
    let field = field_for(ctx, &gait);
    let x0 = gait.fixed_point.clone().expect("checked on load");
    let result = rollout(&field, &x0, c.simulate.steps, &c.sim)?;
    let csv_path = c.output_dir.join("trajectory.csv");
    let mut csv = create(&csv_path)?;
    let rows = write_trajectory_csv(&field, &result, &mut csv)?;
    csv.flush().map_err(|e| io_err(&csv_path, e))?;
    let summary = json!({
        "format": "summary-v1",
        "gait_file": gait_path,
        "steps_requested": c.simulate.steps,
        "steps_taken": result.steps_taken,
        "termination": result.termination,
        "detail": result.detail,
        "duration": result.duration(),
        "csv_rows": rows,
        "config_hash": ctx.hash,
    });
    let text = to_json(&summary)?;
    write_text(&c.output_dir.join("summary.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn cmd_certify(ctx: &Context, gait_path: &Path) -> CliResult<()> {
    let c = &ctx.config;
    let gait = load_gait(ctx, gait_path)?;
    let field = field_for(ctx, &gait);
    let x0 = gait.fixed_point.clone().expect("checked on load");
    let fp = find_fixed_point(&field, &x0, &c.sim, &FixedPointOptions::default())?;
    let chart = ReducedChart::with_default_indices(field.model.clone(), field.gait.clone(), fp.x_star.clone())?;
    let mut cert = certify(&field, &chart, &fp, &c.barrier, c.seed, &beta_hash(&gait), &c.sim)?;
    cert.config_hash = Some(ctx.hash.clone());
    write_text(&c.output_dir.join("certificate.json"), &cert.to_json()?)?;
    let csv_path = c.output_dir.join("samples.csv");
    let mut csv = create(&csv_path)?;
    cert.write_samples_csv(&mut csv)?;
    csv.flush().map_err(|e| io_err(&csv_path, e))?;
    let mut summary = json!({
        "r_star": cert.r_star,
        "alpha": cert.alpha,
        "n_samples": cert.n_samples,
        "spectral_radius": fp.spectral_radius,
        "config_hash": ctx.hash,
    });
    if c.verify.horizon > 0 {
        let seed = c.seed.wrapping_add(1);
        let report = verify_certificate(&field, &chart, &cert, c.verify.horizon, c.verify.samples, seed, &c.sim);
        let doc = json!({ "format": "verification-v1", "seed": seed, "report": report, "config_hash": ctx.hash });
        write_text(&c.output_dir.join("verification.json"), &to_json(&doc)?)?;
        summary["violations"] = json!(report.violations.len());
        summary["worst_margin"] = json!(report.worst_margin);
    }
    println!("{}", to_json(&summary)?);
    Ok(())
}

struct HistoryWriter {
    dir: PathBuf,
    out: BufWriter<File>,
    path: PathBuf,
    hash: String,
}

impl HistoryWriter {
    fn persist(&mut self, c: &Candidate) -> CliResult<HistoryRecord> {
        let mut record = c.record.clone();
        if let Some(gait) = &c.gait {
            let rel = format!("gaits/gait_{:04}.json", record.gait_id);
            let mut gait = gait.clone();
            gait.config_hash = Some(self.hash.clone());
            write_text(&self.dir.join(&rel), &gait.to_json()?)?;
            record.gait_file = Some(rel);
            record.config_hash = Some(self.hash.clone());
        }
        let line = serde_json::to_string(&record).map_err(|e| Failure::Internal(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| io_err(&self.path, e))?;
        self.out.flush().map_err(|e| io_err(&self.path, e))?;
        Ok(record)
    }
}

impl LoopObserver for HistoryWriter {
    fn on_candidate(&mut self, candidate: &Candidate) -> step2step::Result<()> {
        self.persist(candidate).map(|_| ()).map_err(|f| match f {
            Failure::Usage(m) | Failure::Domain(m) | Failure::Internal(m) => Error::Io(std::io::Error::other(m)),
        })
    }
}

fn read_history(path: &Path) -> CliResult<Vec<HistoryRecord>> {
    let file = File::open(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: HistoryRecord = serde_json::from_str(&line)
            .map_err(|e| Failure::Usage(format!("{} line {}: {e}", path.display(), i + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

fn cmd_optimize(ctx: &Context, objective: Objective, resume: Option<&Path>) -> CliResult<()> {
    let c = &ctx.config;
    let resume = match resume {
        Some(p) => read_history(p)?,
        None => Vec::new(),
    };
    let history_path = c.output_dir.join("history.jsonl");
    let mut writer = HistoryWriter { dir: c.output_dir.clone(), out: create(&history_path)?, path: history_path, hash: ctx.hash.clone() };
    let settings = EvalSettings { synthesis: c.synthesis_options(), barrier: c.barrier, sim: c.sim };
    let result = optimize_loop(&ctx.model, &c.loop_config(), objective, &settings, &resume, &mut writer)?;
    let best = result.best.ok_or_else(|| Failure::Domain("no candidate produced a gait".into()))?;
    let mut gait = match best.gait {
        Some(g) => g,
        None => {
            let rel = best.record.gait_file.clone().ok_or_else(|| Failure::Domain("best gait has no file".into()))?;
            let text = fs::read_to_string(c.output_dir.join(&rel)).map_err(|e| Failure::Usage(format!("{rel}: {e}")))?;
            GaitSpec::from_json(&text)?
        }
    };
    gait.config_hash = Some(ctx.hash.clone());
    write_text(&c.output_dir.join("best_gait.json"), &gait.to_json()?)?;
    let summary = json!({
        "objective": objective,
        "candidates": result.history.len(),
        "best": best.record,
        "config_hash": ctx.hash,
    });
    println!("{}", to_json(&summary)?);
    Ok(())
}

fn cmd_analyze(ctx: &Context, gait_path: &Path) -> CliResult<()> {
    let c = &ctx.config;
    let gait = load_gait(ctx, gait_path)?;
    let field = field_for(ctx, &gait);
    let x0 = gait.fixed_point.clone().expect("checked on load");
    let fp = find_fixed_point(&field, &x0, &c.sim, &FixedPointOptions::default())?;
    let chart = ReducedChart::with_default_indices(field.model.clone(), field.gait.clone(), fp.x_star.clone())?;
    let doc = json!({
        "format": "analysis-v1",
        "gait_file": gait_path,
        "fixed_point": fp,
        "stable": fp.spectral_radius < 1.0,
        "reduced_indices": chart.indices,
        "fixed_point_red": chart.project(&fp.x_star).as_slice(),
        "config_hash": ctx.hash,
    });
    let text = to_json(&doc)?;
    write_text(&c.output_dir.join("analysis.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let config = build_config(&cli)?;
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Failure::Usage("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Internal(e.to_string()))?;
    }
    let model = config.resolve_model()?;
    let hash = config.hash()?;
    let ctx = Context { config, model, hash };
    match cli.command {
        Command::Synthesize { out, .. } => cmd_synthesize(&ctx, out),
        Command::Simulate { gait, .. } => cmd_simulate(&ctx, &gait),
        Command::Certify { gait, .. } => cmd_certify(&ctx, &gait),
        Command::Optimize { objective, resume, .. } => {
            let objective = objective.as_deref().unwrap_or("robustness").parse::<Objective>()?;
            cmd_optimize(&ctx, objective, resume.as_deref())
        }
        Command::Analyze { gait } => cmd_analyze(&ctx, &gait),
    }
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
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Usage(m) => format!("error: {m}"),
                Failure::Domain(m) => format!("failed: {m}"),
                Failure::Internal(m) => format!("internal error: {m}"),
            };
            eprintln!("{msg}");
            ExitCode::from(f.code())
        }
    }
}
