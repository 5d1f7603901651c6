//! `apg`: dataset generation, training, evaluation and gradient checks.
//!
//! Exit codes: 0 success, 1 I/O or internal failure, 2 usage or invalid
//! config, 3 training aborted on a non-finite loss, 4 checkpoint or dataset
//! mismatch, 5 gradient-check failure.

mod config;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use apg_core::gradcheck::{run_suite, SuiteOptions};
use apg_core::metrics::eval::{write_modes_csv, write_summary_csv};
use apg_core::policy::checkpoint::{load_tensors, policy_from_tensors, save_policy, save_tensors};
use apg_core::scenario_io::{load_dataset, save, with_trajectory, write_dataset};
use apg_core::trainer::{parse_log, EpochRecord, LOG_HEADER};
use apg_core::{evaluate, EvalConfig, GenSpec, Mode, PolicyParams, Scenario, Trainer};
use clap::{Args, Parser, Subcommand};

use config::{write_run_record, RunConfig, SplitSel};

#[derive(Parser)]
#[command(name = "apg", version, about = "Differentiable driving simulator with analytic policy gradients")]
struct Cli {
    /// Worker threads (APG_SIM_THREADS overrides).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Gen(GenArgs),
    /// Train a policy with APG or behaviour cloning.
    Train(TrainArgs),
    /// Evaluate a checkpoint over K sampled modes.
    Eval(EvalArgs),
    /// Check every analytic derivative against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Generator spec (TOML).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mode: Option<Mode>,
    /// Dataset manifest, overriding `[data] manifest`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    half_sequence: bool,
    /// Continue from the newest checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    /// Stop after this many epochs in this invocation.
    #[arg(long, hide = true)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "val")]
    split: SplitSel,
    /// Sampled rollouts per scenario.
    #[arg(long, default_value_t = 1)]
    modes: usize,
    /// Std-dev of position noise injected into the dynamics (m).
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt the analytic derivative of the named kernel.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

/// Error with its process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

type CmdResult = Result<(), Failure>;

fn fail(code: u8) -> impl FnOnce(anyhow::Error) -> Failure {
    move |error| Failure { code, error }
}

/// Exit code for a core error outside of the usage class.
fn core_code(e: &anyhow::Error) -> u8 {
    use apg_core::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::NanLoss { .. }) => 3,
        Some(E::Checkpoint(_) | E::ActionKind { .. } | E::Parse(_) | E::Schema(_) | E::Version { .. } | E::Invariant { .. }) => 4,
        Some(E::Config(_) | E::Infeasible(_) | E::EmptyDataset) => 2,
        _ => 1,
    }
}

fn classify(e: anyhow::Error) -> Failure {
    Failure {
        code: core_code(&e),
        error: e,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(f) = setup_threads(cli.jobs) {
        eprintln!("error: {:#}", f.error);
        return ExitCode::from(f.code);
    }
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn setup_threads(jobs: Option<usize>) -> CmdResult {
    let env = match std::env::var("APG_SIM_THREADS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .map_err(|_| anyhow!("APG_SIM_THREADS must be a positive integer, got `{v}`"))
                .map_err(fail(2))?,
        ),
        Err(_) => None,
    };
    if let Some(n) = env.or(jobs) {
        if n == 0 {
            return Err(fail(2)(anyhow!("thread count must be ≥ 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| fail(1)(e.into()))?;
    }
    Ok(())
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let text = fs::read_to_string(&a.spec)
        .with_context(|| format!("reading spec {}", a.spec.display()))
        .map_err(fail(2))?;
    let spec: GenSpec = toml::from_str(&text)
        .with_context(|| format!("parsing spec {}", a.spec.display()))
        .map_err(fail(2))?;
    let data = apg_core::scenario_io::generate(&spec).map_err(|e| fail(2)(e.into()))?;
    fs::create_dir_all(&a.out).context("creating output directory").map_err(fail(1))?;
    let manifest = write_dataset(&a.out, &data).map_err(|e| classify(e.into()))?;
    write_run_record(&a.out, "gen", spec.seed, &spec).map_err(fail(1))?;
    println!("wrote {} scenarios; manifest {}", data.len(), manifest.display());
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut c = RunConfig::load(&a.config)?;
    if let Some(m) = a.mode {
        c.train.mode = m;
    }
    if let Some(d) = &a.dataset {
        c.data.manifest = d.clone();
    }
    if let Some(e) = a.epochs {
        c.train.epochs = e;
    }
    if let Some(s) = a.seed {
        c.train.seed = s;
    }
    if let Some(lr) = a.lr {
        c.train.lr = lr;
    }
    if let Some(b) = a.batch_size {
        c.train.batch_size = b;
    }
    if a.half_sequence {
        c.train.half_sequence = true;
    }
    c.validate()?;
    Ok(c)
}

fn load_scenarios(manifest: &Path, split: SplitSel) -> Result<Vec<Scenario>, Failure> {
    let data = load_dataset(manifest, split.split())
        .with_context(|| format!("loading dataset {}", manifest.display()))
        .map_err(classify)?;
    if data.is_empty() {
        return Err(fail(2)(anyhow!("dataset {} has no {split:?} scenarios", manifest.display())));
    }
    Ok(data)
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:06}.ckpt"))
}

/// Newest `epoch_*.ckpt` in `dir`.
fn latest_checkpoint(dir: &Path) -> anyhow::Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_")?.strip_suffix(".ckpt")?.parse::<usize>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

struct LogFile {
    file: File,
}

impl LogFile {
    /// Opens the training log, keeping records of epochs before `keep`.
    fn open(path: &Path, keep: usize) -> anyhow::Result<Self> {
        let old: Vec<EpochRecord> = if keep > 0 && path.exists() {
            parse_log(&fs::read_to_string(path)?)?
                .into_iter()
                .filter(|r| r.epoch < keep)
                .collect()
        } else {
            Vec::new()
        };
        let mut file = File::create(path)?;
        writeln!(file, "{LOG_HEADER}")?;
        for r in &old {
            writeln!(file, "{}", r.to_line())?;
        }
        file.flush()?;
        Ok(Self { file })
    }

    fn append(&mut self, r: &EpochRecord) -> anyhow::Result<()> {
        writeln!(self.file, "{}", r.to_line())?;
        self.file.flush()?;
        Ok(())
    }
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = resolve_train_config(&a).map_err(|e| {
        let code = core_code(&e);
        fail(if code == 1 { 2 } else { code })(e)
    })?;
    let data = load_scenarios(&cfg.data.manifest, cfg.data.split)?;
    let model = data[0].dynamics;
    let ckpt_dir = a.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)
        .context("creating output directory")
        .map_err(fail(1))?;
    write_run_record(&a.out, "train", cfg.train.seed, &cfg).map_err(fail(1))?;

    let mut trainer = if a.resume {
        let path = latest_checkpoint(&ckpt_dir)
            .map_err(fail(1))?
            .ok_or_else(|| fail(4)(anyhow!("--resume: no checkpoint in {}", ckpt_dir.display())))?;
        let tensors = load_tensors(&path).map_err(|e| fail(4)(e.into()))?;
        let t = Trainer::resume(&data, cfg.train.clone(), &tensors)
            .with_context(|| format!("resuming from {}", path.display()))
            .map_err(|e| fail(4)(e))?;
        println!("resumed from {} at epoch {}", path.display(), t.epoch());
        t
    } else {
        let params = PolicyParams::init(cfg.policy, model, cfg.train.seed).map_err(|e| fail(2)(e.into()))?;
        Trainer::new(&data, cfg.train.clone(), params).map_err(|e| classify(e.into()))?
    };

    let log_path = a.out.join("train_log.tsv");
    let mut log = LogFile::open(&log_path, trainer.epoch()).map_err(fail(1))?;
    let save_state = |t: &Trainer| -> CmdResult {
        save_tensors(&checkpoint_path(&ckpt_dir, t.epoch()), &t.state_tensors()).map_err(|e| fail(1)(e.into()))
    };
    let every = cfg.train.checkpoint_every;
    let mut ran = 0usize;
    while !trainer.is_done() && a.stop_after.is_none_or(|n| ran < n) {
        let rec = trainer.run_epoch().map_err(|e| classify(e.into()))?;
        log.append(&rec).map_err(fail(1))?;
        println!("{}", rec.to_line());
        ran += 1;
        if every > 0 && trainer.epoch() % every == 0 {
            save_state(&trainer)?;
        }
    }
    if trainer.is_done() {
        if every == 0 || trainer.epoch() % every != 0 {
            save_state(&trainer)?;
        }
        save_policy(&a.out.join("policy.ckpt"), trainer.params()).map_err(|e| fail(1)(e.into()))?;
        if trainer.adam().skipped > 0 {
            eprintln!(
                "warning: {} optimizer steps skipped for non-finite gradients",
                trainer.adam().skipped
            );
        }
    } else {
        save_state(&trainer)?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let tensors = load_tensors(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))
        .map_err(fail(4))?;
    let params = policy_from_tensors(&tensors)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))
        .map_err(fail(4))?;
    let data = load_scenarios(&a.dataset, a.split)?;
    if let Some(s) = data.iter().find(|s| s.dynamics != params.model) {
        return Err(fail(4)(anyhow!(
            "checkpoint uses {:?} dynamics but scenario {} uses {:?}",
            params.model,
            s.id,
            s.dynamics
        )));
    }
    let cfg = EvalConfig {
        modes: a.modes,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    let report = evaluate(&params, &data, &cfg).map_err(|e| classify(e.into()))?;
    let traj_dir = a.out.join("trajectories");
    fs::create_dir_all(&traj_dir)
        .context("creating output directory")
        .map_err(fail(1))?;
    let io = |e: apg_core::Error| fail(1)(e.into());
    write_modes_csv(File::create(a.out.join("modes.csv")).map_err(|e| fail(1)(e.into()))?, &report.rows).map_err(io)?;
    write_summary_csv(File::create(a.out.join("summary.csv")).map_err(|e| fail(1)(e.into()))?, &report).map_err(io)?;
    for (s, t) in data.iter().zip(&report.best_trajectories) {
        save(&with_trajectory(s, t).map_err(io)?, &traj_dir.join(format!("{}.json", s.id))).map_err(io)?;
    }
    #[derive(serde::Serialize)]
    struct EvalRecord {
        checkpoint: PathBuf,
        dataset: PathBuf,
        split: SplitSel,
        modes: usize,
        noise: f64,
    }
    let rec = EvalRecord {
        checkpoint: a.checkpoint.clone(),
        dataset: a.dataset.clone(),
        split: a.split,
        modes: a.modes,
        noise: a.noise,
    };
    write_run_record(&a.out, "eval", a.seed, &rec).map_err(fail(1))?;
    let s = &report.summary;
    println!(
        "scenarios {}  K {}  sigma {}  minADE {:.4}  best-mode overlap {:.4}  best-mode offroad {:.4}  det ADE {:.4}",
        report.scenarios.len(),
        s.modes,
        s.noise_sigma,
        s.min_ade,
        s.best_mode_overlap,
        s.best_mode_offroad,
        s.deterministic_ade
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let opts = SuiteOptions {
        seed: a.seed,
        fault: a.inject_fault,
        ..SuiteOptions::default()
    };
    let report = run_suite(&opts).map_err(|e| classify(e.into()))?;
    print!("{}", report.to_text());
    let failures = report.failures();
    if failures.is_empty() {
        println!("all {} kernels passed", report.checks.len());
        Ok(())
    } else {
        let names: Vec<&str> = failures.iter().map(|c| c.kernel.as_str()).collect();
        Err(fail(5)(anyhow!("gradient check failed: {}", names.join(", "))))
    }
}
