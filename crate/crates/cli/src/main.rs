use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ria_core::config::OptimizerKind;
use ria_core::pipeline::train::{CHECKPOINT_FILE, METRICS_FILE};
use ria_core::pipeline::{ablate, evaluate, train_from, TrainState};
use ria_core::synthdata::{build_dataset, load_dataset, Split};
use ria_core::{suite, Error, TrainConfig};

const CONFIG_FILE: &str = "config.json";
const EVAL_FILE: &str = "eval.json";
const GRADCHECK_FILE: &str = "gradcheck.json";

#[derive(Parser)]
#[command(name = "ria", version, about = "Region-aware interaction attention: data, training, evaluation and gradient checks")]
struct Cli {
    /// JSON config file; flags given on the command line override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction dataset.
    GenData {
        #[arg(long, default_value_t = 180)]
        clips: usize,
    },
    /// Train the denoiser and write a checkpoint and metrics report.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run the five-variant ablation instead of a single training run.
        #[arg(long)]
        ablate: bool,
    },
    /// Single-step reconstruction metrics on the held-out clips.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        /// Only run targets with this name or dotted prefix (repeatable).
        #[arg(long)]
        only: Vec<String>,
        /// Corrupt the analytic gradient of the named targets.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Train every ablation variant and compare them.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<Optim>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Optim {
    Sgd,
    Adam,
}

/// A failure with its process exit code.
struct Fail {
    code: u8,
    msg: String,
}

impl Fail {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Self { code, msg: msg.into() }
    }
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::ConfigInvalid(_)
            | Error::UnknownClass(_)
            | Error::InvalidDimension(_)
            | Error::DimMismatch(_)
            | Error::NonPositiveTemperature(_)
            | Error::TooFewLatents(_)
            | Error::DatasetEmpty => 2,
            Error::Io(_)
            | Error::Json(_)
            | Error::FormatVersionMismatch(_)
            | Error::ChecksumMismatch { .. }
            | Error::MissingEntry(_) => 3,
            _ => 4,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Self::new(3, e.to_string())
    }
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

fn init_threads() -> Result<(), Fail> {
    let n = match std::env::var("IA_THREADS") {
        Ok(s) => s.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| Fail::new(2, format!("bad IA_THREADS {s:?}")))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Fail::new(4, e.to_string()))
}

fn load_config(cli: &Cli, run: Option<&RunArgs>) -> Result<TrainConfig, Fail> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p).map_err(at(p))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(run) = run {
        if let Some(s) = run.steps {
            cfg.steps = s;
        }
        if let Some(lr) = run.lr {
            cfg.lr = lr;
        }
        if let Some(o) = run.optimizer {
            cfg.optimizer = match o {
                Optim::Sgd => OptimizerKind::Sgd,
                Optim::Adam => OptimizerKind::Adam,
            };
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Adds the offending path to IO-class failures.
fn at(path: &Path) -> impl Fn(Error) -> Fail + '_ {
    move |e| {
        let f = Fail::from(e);
        Fail::new(f.code, format!("{}: {}", path.display(), f.msg))
    }
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Fail> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Fail::new(4, e.to_string()))?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn gen_data(cli: &Cli, clips: usize) -> Result<(), Fail> {
    let cfg = load_config(cli, None)?;
    let out = out_dir(cli, "data");
    let manifest = build_dataset(clips, cfg.seed, &cfg.clip_dims(), &out)?;
    println!(
        "wrote {} clips to {} ({} train / {} test, seed {})",
        manifest.clips.len(),
        out.display(),
        manifest.count(Split::Train),
        manifest.count(Split::Test),
        manifest.seed
    );
    for (label, n) in &manifest.histogram {
        println!("  {label}  {n}");
    }
    Ok(())
}

fn run_train(cli: &Cli, run: &RunArgs, resume: Option<&Path>) -> Result<(), Fail> {
    let cfg = load_config(cli, Some(run))?;
    let dataset = load_dataset(&run.data).map_err(at(&run.data))?;
    let out = out_dir(cli, "run");
    fs::create_dir_all(&out)?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    let state = match resume {
        Some(p) => TrainState::load(&cfg, p).map_err(at(p))?,
        None => TrainState::fresh(&cfg)?,
    };
    let outcome = train_from(&cfg, &dataset, state, Some(&out))?;
    let r = &outcome.report;
    println!("config {}", r.config_digest);
    println!("steps {}..{} in {:.2}s", r.start_step, r.steps, r.wall_time_secs);
    for p in &r.probe {
        println!("  step {:>5}  total {:.6}  diff {:.6}  ortho {:.6e}", p.step, p.loss.total, p.loss.diff, p.loss.ortho);
    }
    println!("initial {:.12e}  final {:.12e}", r.initial.total, r.final_loss.total);
    println!("wrote {} and {}", out.join(CHECKPOINT_FILE).display(), out.join(METRICS_FILE).display());
    Ok(())
}

fn run_ablate(cli: &Cli, run: &RunArgs) -> Result<(), Fail> {
    let cfg = load_config(cli, Some(run))?;
    let dataset = load_dataset(&run.data).map_err(at(&run.data))?;
    let out = out_dir(cli, "ablation");
    fs::create_dir_all(&out)?;
    let report = ablate(&cfg, &dataset)?;
    let path = out.join(ria_core::pipeline::ablate::ABLATION_FILE);
    report.write(&path)?;
    println!("{:<14} {:>6} {:>12} {:>14} {:>14}", "variant", "steps", "final loss", "ortho loss", "masked error");
    for v in &report.variants {
        println!(
            "{:<14} {:>6} {:>12.6} {:>14.6e} {:>14.6e}",
            v.label, v.steps, v.final_loss.total, v.combined_ortho_loss, v.masked_recon_error
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn run_eval(cli: &Cli, data: &Path, checkpoint: &Path) -> Result<(), Fail> {
    let cfg = load_config(cli, None)?;
    let dataset = load_dataset(data).map_err(at(data))?;
    let state = TrainState::load(&cfg, checkpoint).map_err(at(checkpoint))?;
    let report = evaluate(&state.model, &cfg, &dataset)?;
    let out = out_dir(cli, "eval");
    fs::create_dir_all(&out)?;
    write_json(&out.join(EVAL_FILE), &report)?;
    println!(
        "{} clips at t={}: PSNR {:.3} dB  SSIM {:.4}  L1 {:.5}",
        report.clips.len(),
        report.t,
        report.mean_psnr,
        report.mean_ssim,
        report.mean_l1
    );
    Ok(())
}

fn run_gradcheck(cli: &Cli, only: &[String], inject: Option<&str>) -> Result<(), Fail> {
    let report = suite::run_suite(only, inject)?;
    if report.results.is_empty() {
        return Err(Fail::new(2, format!("no gradcheck target matches {only:?}")));
    }
    for r in &report.results {
        let verdict = if r.passed { "ok" } else { "FAIL" };
        println!("{:<48} {:>10.3e}  {verdict}", r.name, r.max_rel_error);
    }
    if let Some(out) = &cli.out {
        fs::create_dir_all(out)?;
        write_json(&out.join(GRADCHECK_FILE), &report)?;
    }
    let failed: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("{} targets passed (tolerance {:e})", report.results.len(), report.tolerance);
        Ok(())
    } else {
        Err(Fail::new(1, format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match &cli.command {
        Command::GenData { clips } => gen_data(&cli, *clips),
        Command::Train { run, resume, ablate: true } => {
            if resume.is_some() {
                Err(Fail::new(2, "--resume cannot be combined with --ablate"))
            } else {
                run_ablate(&cli, run)
            }
        }
        Command::Train { run, resume, ablate: false } => run_train(&cli, run, resume.as_deref()),
        Command::Eval { data, checkpoint } => run_eval(&cli, data, checkpoint),
        Command::Gradcheck { only, inject_fault } => run_gradcheck(&cli, only, inject_fault.as_deref()),
        Command::Ablate { run } => run_ablate(&cli, run),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
