use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use tracklab::autodiff::{read_container, ParamFileError};
use tracklab::config::{ConfigError, RunConfig};
use tracklab::ddpg::{train, EpisodeRecord, TrainError, TrainOptions};
use tracklab::eval::{read_log, run_scenario, write_csv, write_log, EvalError, EvalPolicy, Scenario};
use tracklab::nets::WeightsError;
use tracklab::observe::{render_raster, write_ppm, ObsKind, SceneRandomization};
use tracklab::plot::{learning_curve_svg, read_train_log, runs_in, trajectory_svg, PlotError};
use tracklab::sim::RelativeState;

/// Default output directory when neither `--out` nor the config sets one.
const OUT_ENV: &str = "TRACKLAB_OUT";

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "tracklab", version, about = "Train and evaluate recurrent DDPG trackers in a planar arena")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (falls back to the config, then $TRACKLAB_OUT, then ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config overrides as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an actor-critic pair.
    Train {
        /// Continue from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a policy on one or more scenarios.
    Eval {
        /// htg, htg-noisy, random, stationary, or a path to actor weights.
        #[arg(long)]
        policy: Option<String>,
        /// Scenario such as circular:3:3:0.01 (repeatable); config list when omitted.
        #[arg(long)]
        scenario: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Render SVG plots from training or evaluation logs.
    Plot {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Moving-average window for learning curves.
        #[arg(long, default_value_t = 50)]
        window: usize,
        /// Trajectory plots per evaluation log.
        #[arg(long, default_value_t = 3)]
        max_runs: usize,
    },
    /// Summarize a weights or checkpoint file, or dump a rendered frame.
    Inspect {
        path: Option<PathBuf>,
        /// Write a rendered observation as binary PPM instead.
        #[arg(long)]
        frame: Option<PathBuf>,
        #[arg(long, default_value_t = 80.0)]
        rho: f64,
        #[arg(long, default_value_t = 10.0)]
        theta_deg: f64,
        #[arg(long, default_value_t = 84)]
        width: usize,
        #[arg(long, default_value_t = 84)]
        height: usize,
    },
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn usage(m: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            kind: "usage",
            message: m.into(),
        }
    }

    fn config(kind: &'static str, m: impl ToString) -> Self {
        Failure {
            code: EXIT_CONFIG,
            kind,
            message: m.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::config("config", e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence(_) => Failure {
                code: EXIT_DIVERGED,
                kind: "divergence",
                message: e.to_string(),
            },
            TrainError::Config(_) => Failure::config("config", e),
            TrainError::Params(_) => Failure::config("weights", e),
            _ => Failure::config("runtime", e),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure::config("eval", e)
    }
}

impl From<PlotError> for Failure {
    fn from(e: PlotError) -> Self {
        Failure::config("plot", e)
    }
}

impl From<WeightsError> for Failure {
    fn from(e: WeightsError) -> Self {
        Failure::config("weights", e)
    }
}

impl From<ParamFileError> for Failure {
    fn from(e: ParamFileError) -> Self {
        Failure::config("weights", e)
    }
}

fn io_fail(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::config("io", format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", serde_json::json!({ "error": f.kind, "message": f.message }));
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Train { resume, common } => cmd_train(common, resume),
        Cmd::Eval { policy, scenario, common } => cmd_eval(common, policy, scenario),
        Cmd::Plot { logs, out, window, max_runs } => cmd_plot(&logs, out, window, max_runs),
        Cmd::Inspect {
            path,
            frame,
            rho,
            theta_deg,
            width,
            height,
        } => match (path, frame) {
            (_, Some(frame)) => cmd_frame(&frame, rho, theta_deg, width, height),
            (Some(path), None) => cmd_inspect(&path),
            (None, None) => Err(Failure::usage("inspect needs a weights path or --frame")),
        },
    }
}

/// Splits `--key value` / `--key=value` pairs.
fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            return Err(Failure::usage(format!("unexpected argument {arg:?}; overrides look like --key value")));
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            let v = it.next().ok_or_else(|| Failure::usage(format!("--{key} needs a value")))?;
            out.push((key.to_string(), v.clone()));
        }
    }
    Ok(out)
}

/// Flags that clap leaves in the trailing list when they follow an override.
#[derive(Default)]
struct Late {
    resume: Option<PathBuf>,
    policy: Option<String>,
    scenarios: Vec<String>,
}

fn load_config(common: &Common) -> Result<(RunConfig, PathBuf, Late), Failure> {
    let mut overrides = parse_overrides(&common.overrides)?;
    let mut config_path = common.config.clone();
    let mut out = common.out.clone();
    let mut late = Late::default();
    overrides.retain(|(k, v)| {
        match k.as_str() {
            "config" => config_path = Some(v.into()),
            "out" => out = Some(v.into()),
            "resume" => late.resume = Some(v.into()),
            "policy" => late.policy = Some(v.clone()),
            "scenario" => late.scenarios.push(v.clone()),
            _ => return true,
        }
        false
    });
    let base = match &config_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(&overrides)?;
    let out = out
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    Ok((cfg, out, late))
}

fn cmd_train(common: Common, resume: Option<PathBuf>) -> Result<(), Failure> {
    let (cfg, out, late) = load_config(&common)?;
    let resume = resume.or(late.resume);
    let setup = cfg.train_setup()?;
    fs::create_dir_all(&out).map_err(io_fail(&out))?;
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, cfg.to_json() + "\n").map_err(io_fail(&cfg_path))?;

    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    ctrlc::set_handler(move || {
        if flag.swap(true, Ordering::SeqCst) {
            std::process::exit(130);
        }
        eprintln!("interrupt: finishing current episodes, then checkpointing");
    })
    .map_err(|e| Failure::config("runtime", e))?;

    let every = (setup.train.episodes / 20).max(1);
    let progress = move |r: &EpisodeRecord| {
        if (r.episode + 1).is_multiple_of(every) {
            eprintln!(
                "episode {:>6}  {:<5}  mean reward {:.4}  updates {}",
                r.episode + 1,
                r.source.as_str(),
                r.mean_reward,
                r.updates
            );
        }
    };
    let opts = TrainOptions {
        out_dir: Some(out.clone()),
        stop: Some(stop),
        resume,
        progress: Some(Arc::new(progress)),
    };
    let outcome = train(&setup, &opts)?;
    let status = if outcome.interrupted { "interrupted" } else { "done" };
    println!(
        "{status}: {} episodes, {} updates; outputs in {}",
        outcome.episodes_done,
        outcome.updates,
        out.display()
    );
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

fn cmd_eval(common: Common, policy: Option<String>, scenarios: Vec<String>) -> Result<(), Failure> {
    let (cfg, out, late) = load_config(&common)?;
    let policy = policy.or(late.policy).ok_or_else(|| Failure::usage("eval needs --policy"))?;
    let policy = match EvalPolicy::builtin(&policy, cfg.noise()) {
        Some(p) => p,
        None => EvalPolicy::load(Path::new(&policy))?,
    };
    let scenarios: Vec<String> = scenarios.into_iter().chain(late.scenarios).collect();
    let names = if scenarios.is_empty() { cfg.eval.scenarios.clone() } else { scenarios };
    let settings = cfg.eval_settings();
    fs::create_dir_all(&out).map_err(io_fail(&out))?;
    let mut reports = Vec::new();
    for name in &names {
        let sc: Scenario = name.parse().map_err(|e| Failure::config("config", e))?;
        let (report, log) = run_scenario(&policy, &sc, &settings)?;
        let path = out.join(format!("eval-{}-{}.jsonl", sanitize(policy.name()), sanitize(name)));
        let file = File::create(&path).map_err(io_fail(&path))?;
        write_log(&log, BufWriter::new(file)).map_err(io_fail(&path))?;
        reports.push(report);
    }
    let csv_path = out.join("eval.csv");
    let file = File::create(&csv_path).map_err(io_fail(&csv_path))?;
    write_csv(&reports, BufWriter::new(file)).map_err(io_fail(&csv_path))?;
    write_csv(&reports, std::io::stdout().lock()).map_err(io_fail(Path::new("stdout")))?;
    Ok(())
}

enum LogKind {
    Train,
    Eval,
}

fn sniff(path: &Path) -> Result<LogKind, Failure> {
    let text = fs::read_to_string(path).map_err(io_fail(path))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).ok_or_else(|| Failure::config("plot", format!("{}: log is empty", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(first).map_err(|e| Failure::config("plot", format!("{}: {e}", path.display())))?;
    if v.get("episode").is_some() {
        Ok(LogKind::Train)
    } else if v.get("tracker").is_some() {
        Ok(LogKind::Eval)
    } else {
        Err(Failure::config("plot", format!("{}: not a training or evaluation log", path.display())))
    }
}

fn cmd_plot(logs: &[PathBuf], out: Option<PathBuf>, window: usize, max_runs: usize) -> Result<(), Failure> {
    for log in logs {
        let dir = out.clone().unwrap_or_else(|| log.parent().map(Path::to_path_buf).unwrap_or_default());
        fs::create_dir_all(&dir).map_err(io_fail(&dir))?;
        let stem = log.file_stem().and_then(|s| s.to_str()).unwrap_or("log").to_string();
        let reader = || File::open(log).map(BufReader::new).map_err(io_fail(log));
        let mut written = Vec::new();
        match sniff(log)? {
            LogKind::Train => {
                let svg = learning_curve_svg(&read_train_log(reader()?)?, window)?;
                written.push((dir.join(format!("{stem}.svg")), svg));
            }
            LogKind::Eval => {
                let steps = read_log(reader()?)?;
                for run in runs_in(&steps).into_iter().take(max_runs) {
                    written.push((dir.join(format!("{stem}-run{run}.svg")), trajectory_svg(&steps, run)?));
                }
            }
        }
        for (path, svg) in written {
            fs::write(&path, svg).map_err(io_fail(&path))?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<(), Failure> {
    let bytes = fs::read(path).map_err(io_fail(path))?;
    let (header, _) = read_container(&bytes)?;
    let meta = &header.metadata;
    let mut out = std::io::stdout().lock();
    let w = |out: &mut std::io::StdoutLock, s: String| writeln!(out, "{s}").map_err(io_fail(Path::new("stdout")));
    w(&mut out, format!("file: {}", path.display()))?;
    w(&mut out, format!("format version: {}", header.format_version))?;
    if let Some(role) = meta.get("role").and_then(|r| r.as_str()) {
        w(&mut out, format!("role: {role}"))?;
    }
    if let Some(net) = meta.get("net") {
        w(&mut out, format!("net: {net}"))?;
    }
    for key in ["info", "episodes_done", "updates"] {
        if let Some(v) = meta.get(key) {
            w(&mut out, format!("{key}: {v}"))?;
        }
    }
    w(&mut out, "tensors:".into())?;
    for e in &header.entries {
        w(&mut out, format!("  {:<32} {:?} {:?}", e.name, e.dtype, e.shape))?;
    }
    w(&mut out, format!("parameters: {}", header.parameter_count()))?;
    w(&mut out, format!("sha256: {}", header.sha256))?;
    Ok(())
}

fn cmd_frame(path: &Path, rho: f64, theta_deg: f64, width: usize, height: usize) -> Result<(), Failure> {
    let cfg = RunConfig::default();
    let mut mode = cfg.observation();
    mode.kind = ObsKind::Raster;
    mode.raster_width = width;
    mode.raster_height = height;
    mode.validate().map_err(|e| Failure::config("config", e))?;
    let rel = RelativeState {
        rho,
        theta: theta_deg.to_radians(),
    };
    let obs = render_raster(&rel, &mode, &SceneRandomization::default(), cfg.arena().fov, cfg.reward().rho_star);
    let file = File::create(path).map_err(io_fail(path))?;
    write_ppm(&obs, BufWriter::new(file)).map_err(io_fail(path))?;
    println!("{}", path.display());
    Ok(())
}
