//! Command-line front end: config files, presets, runs, sweeps and checks.

pub mod config;
pub mod experiment;
pub mod plot;
pub mod presets;

use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use gradreg_core::data_model::{generate_dataset, Dataset, SignalNoiseSpec};
use gradreg_core::metrics::{check_condition, theory_t2, TheoryParams};
use gradreg_core::trainer::theory_t1;
use gradreg_core::validation::{run_checks, CheckKind, ValidationOptions};

use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{file}:{line}: {message}")]
    Config { file: String, line: usize, message: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] gradreg_core::Error),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("{0} sweep cell(s) aborted")]
    SweepAborted(usize),
}

impl CliError {
    /// 1 usage or config, 2 validation failure, 3 runtime abort.
    pub fn exit_code(&self) -> i32 {
        use gradreg_core::Error as E;
        match self {
            CliError::Config { .. } | CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Core(e) => match e {
                E::InvalidArgument(_)
                | E::DimensionMismatch { .. }
                | E::EmptyDataset
                | E::Parse { .. }
                | E::RegimeViolated { .. } => 1,
                _ => 3,
            },
            CliError::Io { .. } | CliError::SweepAborted(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gradreg", version, about = "Gradient-regularized training of two-layer CNNs on signal-noise data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a training set and write it in the dataset text format.
    Generate(GenerateArgs),
    /// Run one training and write its trace.
    Train(TrainArgs),
    /// Run a grid over sigma_p, mode and seed replicates.
    Sweep(SweepArgs),
    /// Run the numerical self-checks.
    Validate(ValidateArgs),
    /// Report how a config sits against the theory's conditions.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long = "sigma-p")]
    pub sigma_p: f64,
    #[arg(long = "mu-norm", default_value_t = 1.0)]
    pub mu_norm: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Named preset applied first.
    #[arg(long)]
    pub preset: Option<String>,
    /// Config file applied after the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `section.key=value`, applied after the config file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub d: Option<String>,
    #[arg(long)]
    pub n: Option<String>,
    #[arg(long = "mu-norm")]
    pub mu_norm: Option<String>,
    #[arg(long = "sigma-p")]
    pub sigma_p: Option<String>,
    #[arg(long)]
    pub m: Option<String>,
    /// A value or `auto`.
    #[arg(long = "sigma-0")]
    pub sigma_0: Option<String>,
    #[arg(long)]
    pub eta: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    /// standard, pegr or fgr.
    #[arg(long)]
    pub mode: Option<String>,
    /// A value or `theory`.
    #[arg(long)]
    pub lambda: Option<String>,
    /// An epoch, `theory:<delta>` or `never`.
    #[arg(long)]
    pub cutoff: Option<String>,
    #[arg(long = "log-every")]
    pub log_every: Option<String>,
    /// Use the PEGR closed-form update.
    #[arg(long = "closed-form")]
    pub closed_form: bool,
    /// Skip decomposition tracking.
    #[arg(long = "no-track")]
    pub no_track: bool,
    #[arg(long = "test-samples")]
    pub test_samples: Option<String>,
    #[arg(long = "data-seed")]
    pub data_seed: Option<String>,
    #[arg(long = "init-seed")]
    pub init_seed: Option<String>,
    #[arg(long = "test-seed")]
    pub test_seed: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write SVG charts next to the trace.
    #[arg(long)]
    pub plot: bool,
}

impl ExperimentArgs {
    /// Preset, then config file, then `--set`, then the dedicated flags.
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.preset {
            Some(name) => presets::preset(name)?,
            None => ExperimentConfig::default(),
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|source| CliError::Io { context: path.display().to_string(), source })?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        for assignment in &self.set {
            let (k, v) = assignment
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{assignment}'")))?;
            cfg.set(k.trim(), v).map_err(|e| CliError::Usage(format!("--set {assignment}: {e}")))?;
        }
        let flags = [
            ("data.d", &self.d),
            ("data.n", &self.n),
            ("data.mu_norm", &self.mu_norm),
            ("data.sigma_p", &self.sigma_p),
            ("model.m", &self.m),
            ("model.sigma_0", &self.sigma_0),
            ("train.eta", &self.eta),
            ("train.epochs", &self.epochs),
            ("train.mode", &self.mode),
            ("train.lambda", &self.lambda),
            ("train.cutoff", &self.cutoff),
            ("train.log_every", &self.log_every),
            ("eval.test_samples", &self.test_samples),
            ("seeds.data_seed", &self.data_seed),
            ("seeds.init_seed", &self.init_seed),
            ("seeds.test_seed", &self.test_seed),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                let flag = format!("--{}", key.split('.').nth(1).unwrap_or(key).replace('_', "-"));
                cfg.set(key, v).map_err(|e| CliError::Usage(format!("{flag}: {e}")))?;
            }
        }
        if self.closed_form {
            cfg.train.closed_form = true;
        }
        if self.no_track {
            cfg.train.track_decomposition = false;
        }
        if self.plot {
            cfg.output.plot = true;
        }
        if let Some(out) = &self.out {
            cfg.output.directory = Some(out.clone());
        }
        cfg.validate().map_err(CliError::Usage)?;
        Ok(cfg)
    }

    fn run_name(&self, kind: &str) -> String {
        self.preset.clone().unwrap_or_else(|| kind.to_string())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Train on this dataset file instead of sampling one.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Comma-separated sigma_p axis.
    #[arg(long = "sigma-p-values")]
    pub sigma_p_values: Option<String>,
    /// Comma-separated mode axis.
    #[arg(long)]
    pub modes: Option<String>,
    #[arg(long)]
    pub replicates: Option<String>,
    /// Concurrent cells; defaults to the available parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Run only these checks (grad-fd, closed-form, decomp, concentration).
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<String>,
    /// Finite-difference step.
    #[arg(long)]
    pub h: Option<f64>,
    /// Random instances per gradient check.
    #[arg(long)]
    pub instances: Option<usize>,
    /// Concentration trials.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Add this offset to one analytic gradient component.
    #[arg(long = "inject-fault", hide = true)]
    pub inject_fault: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Kv,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    #[arg(long, default_value_t = 0.0005)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.05)]
    pub epsilon: f64,
    #[arg(long = "t-star")]
    pub t_star: Option<f64>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub format: ReportFormat,
}

fn write_out(path: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)
                    .map_err(|source| CliError::Io { context: parent.display().to_string(), source })?;
            }
            experiment::write_file(p, text)
        }
        None => stdout
            .write_all(text.as_bytes())
            .map_err(|source| CliError::Io { context: "stdout".into(), source }),
    }
}

fn cmd_generate(args: &GenerateArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let spec = SignalNoiseSpec::axis_aligned(args.d, args.mu_norm, args.sigma_p)?;
    let ds = generate_dataset(&spec, args.n, args.seed)?;
    let mut buf = Vec::new();
    ds.write_text(&mut buf)?;
    write_out(args.out.as_deref(), &String::from_utf8_lossy(&buf), stdout)?;
    if let Some(p) = &args.out {
        writeln!(stdout, "wrote {}", p.display()).ok();
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    let file = fs::File::open(path).map_err(|source| CliError::Io { context: path.display().to_string(), source })?;
    Ok(Dataset::read_text(BufReader::new(file))?)
}

fn cmd_train(args: &TrainArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = args.experiment.resolve()?;
    let dataset = args.dataset.as_deref().map(load_dataset).transpose()?;
    if let Some(ds) = &dataset {
        cfg.data.d = ds.d();
        cfg.data.n = ds.n();
        cfg.data.mu_norm = ds.spec().mu_norm();
        cfg.data.sigma_p = ds.spec().sigma_p();
    }
    let out = experiment::run_experiment(&cfg, dataset.as_ref())?;
    let dir = experiment::output_dir(cfg.output.directory.as_deref(), &args.experiment.run_name("train"));
    experiment::write_run(&dir, &cfg, &out)?;
    let last = out.trace.last();
    writeln!(
        stdout,
        "epoch {} train_loss {:.6e} signal {:.6e} noise {:.6e}{}",
        last.epoch,
        last.train_loss,
        last.signal,
        last.noise_max,
        last.test_error.map(|e| format!(" test_error {e:.4}")).unwrap_or_default()
    )
    .ok();
    writeln!(stdout, "wrote {}", dir.display()).ok();
    Ok(())
}

fn cmd_sweep(args: &SweepArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = args.experiment.resolve()?;
    for (key, value) in [
        ("sweep.sigma_p", &args.sigma_p_values),
        ("sweep.modes", &args.modes),
        ("sweep.replicates", &args.replicates),
    ] {
        if let Some(v) = value {
            cfg.set(key, v).map_err(CliError::Usage)?;
        }
    }
    cfg.validate().map_err(CliError::Usage)?;
    let workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let dir = experiment::output_dir(cfg.output.directory.as_deref(), &args.experiment.run_name("sweep"));
    let outcome = experiment::run_sweep(&cfg, workers, Some(&dir))?;
    writeln!(stdout, "{} cells finished, {} failed", outcome.rows.len(), outcome.failures.len()).ok();
    writeln!(stdout, "wrote {}", dir.display()).ok();
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::SweepAborted(outcome.failures.len()))
    }
}

fn cmd_validate(args: &ValidateArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let kinds: Vec<CheckKind> = if args.only.is_empty() {
        vec![CheckKind::GradFd, CheckKind::ClosedForm, CheckKind::Decomp, CheckKind::Concentration]
    } else {
        args.only
            .iter()
            .map(|s| s.trim().parse::<CheckKind>().map_err(|e| CliError::Usage(format!("--only: {e}"))))
            .collect::<Result<_, _>>()?
    };
    let mut opts = ValidationOptions::default();
    if let Some(h) = args.h {
        opts.h = h;
    }
    if let Some(k) = args.instances {
        opts.grad_instances = k;
        opts.closed_form_instances = k;
    }
    if let Some(t) = args.trials {
        opts.concentration_trials = t;
    }
    if let Some(s) = args.seed {
        opts.seed = s;
    }
    opts.perturbation = args.inject_fault;
    let report = run_checks(&kinds, &opts)?;
    write!(stdout, "{}", report.render()).ok();
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failed().map(|r| r.check.name()).collect();
        Err(CliError::Validation(names.join(", ")))
    }
}

fn cmd_check(args: &CheckArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = args.experiment.resolve()?;
    let spec = experiment::spec_of(&cfg)?;
    let t_star = args.t_star.unwrap_or(cfg.train.t_star);
    let theory = TheoryParams::new(&spec, args.alpha, args.delta, args.epsilon, t_star)?;
    let sigma_0 = cfg.sigma_0();
    let report = check_condition(&spec, cfg.data.n, cfg.model.m, cfg.train.eta, sigma_0, &theory);
    let t1 = theory_t1(cfg.model.m, cfg.train.eta, spec.mu_norm(), sigma_0, cfg.data.n, args.delta);
    let t2 = theory_t2(cfg.data.n, cfg.model.m, cfg.data.d, cfg.train.eta, args.epsilon, spec.mu_norm(), args.delta);
    let show = |r: gradreg_core::Result<u64>| match r {
        Ok(v) => v.to_string(),
        Err(e) => format!("undefined ({e})"),
    };
    match args.format {
        ReportFormat::Table => {
            write!(stdout, "{}", report.render_table()).ok();
            writeln!(stdout, "T1 {}", show(t1)).ok();
            writeln!(stdout, "T2 {}", show(t2)).ok();
        }
        ReportFormat::Kv => {
            write!(stdout, "{}", report.render_kv()).ok();
            writeln!(stdout, "t1={}", show(t1)).ok();
            writeln!(stdout, "t2={}", show(t2)).ok();
        }
    }
    Ok(())
}

/// Run one command, writing normal output to `stdout`.
pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, stdout),
        Command::Train(a) => cmd_train(a, stdout),
        Command::Sweep(a) => cmd_sweep(a, stdout),
        Command::Validate(a) => cmd_validate(a, stdout),
        Command::Check(a) => cmd_check(a, stdout),
    }
}

/// Parse `args`, run, and return the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match execute(&cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
