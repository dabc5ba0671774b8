//! Single runs and sweeps driven by an [`ExperimentConfig`].

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use gradreg_core::data_model::{generate_dataset, generate_test_stream, Dataset, SignalNoiseSpec};
use gradreg_core::derive_seed;
use gradreg_core::network::ModelParams;
use gradreg_core::trainer::{train, LambdaSchedule, TrainConfig, TrainTrace};

use crate::config::{ExperimentConfig, ModeName};
use crate::plot;
use crate::CliError;

pub const SUMMARY_HEADER: &str =
    "sigma_p,mode,seed,final_train_loss,final_test_error,final_signal,final_noise,gamma_max,rho_bar_max";

pub fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    let mut tc = TrainConfig::new(
        cfg.train.eta,
        cfg.train.epochs,
        LambdaSchedule::new(cfg.reg_mode(), cfg.train.cutoff.to_cutoff()),
    );
    tc.seed = cfg.seeds.init_seed;
    tc.use_closed_form_pegr = cfg.train.closed_form;
    tc.log_every = cfg.train.log_every;
    tc.track_decomposition = cfg.train.track_decomposition;
    tc.t_star = cfg.train.t_star;
    tc
}

pub fn spec_of(cfg: &ExperimentConfig) -> Result<SignalNoiseSpec, CliError> {
    Ok(SignalNoiseSpec::axis_aligned(cfg.data.d, cfg.data.mu_norm, cfg.data.sigma_p)?)
}

/// Everything one run produces, already serialized.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trace: TrainTrace,
    pub trace_csv: String,
    pub diagnostics_csv: String,
}

fn to_string(write: impl FnOnce(&mut Vec<u8>) -> gradreg_core::Result<()>) -> Result<String, CliError> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(String::from_utf8(buf).expect("writers emit ascii"))
}

/// Train on `dataset` (or on data generated from the config).
pub fn run_experiment(cfg: &ExperimentConfig, dataset: Option<&Dataset>) -> Result<RunOutput, CliError> {
    cfg.validate().map_err(CliError::Usage)?;
    let generated;
    let dataset = match dataset {
        Some(ds) => ds,
        None => {
            generated = generate_dataset(&spec_of(cfg)?, cfg.data.n, cfg.seeds.data_seed)?;
            &generated
        }
    };
    let params0 = ModelParams::init_gaussian(cfg.model.m, dataset.d(), cfg.sigma_0(), cfg.seeds.init_seed)?;
    let test = if cfg.eval.test_samples > 0 {
        Some(generate_test_stream(dataset.spec(), cfg.eval.test_samples, cfg.seeds.test_seed)?)
    } else {
        None
    };
    let trace = train(&params0, dataset, &train_config(cfg), test.as_ref())?;
    let trace_csv = to_string(|b| trace.write_csv(b))?;
    let diagnostics_csv = to_string(|b| trace.write_diagnostics_csv(b))?;
    Ok(RunOutput { trace, trace_csv, diagnostics_csv })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { context: path.display().to_string(), source }
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Write a run's files into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join("trace.csv"), &out.trace_csv)?;
    write_file(&dir.join("diagnostics.csv"), &out.diagnostics_csv)?;
    write_file(&dir.join("config.conf"), &cfg.to_text())?;
    let ckpt = to_string(|b| out.trace.final_params.write_checkpoint(b))?;
    write_file(&dir.join("final.ckpt"), &ckpt)?;
    if cfg.output.plot {
        for (name, svg) in plot::render_all(&out.trace_csv).map_err(CliError::Usage)? {
            write_file(&dir.join(name), &svg)?;
        }
    }
    Ok(())
}

/// Output directory: explicit, else `$GRADREG_OUT/<name>`, else `gradreg-out/<name>`.
pub fn output_dir(explicit: Option<&Path>, name: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os("GRADREG_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("gradreg-out"))
            .join(name),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub sigma_p: f64,
    pub mode: ModeName,
    pub replicate: usize,
}

impl Cell {
    pub fn label(&self) -> String {
        format!("sigma{}_{}_rep{}", self.sigma_p, self.mode, self.replicate)
    }
}

/// The Cartesian grid; an empty axis contributes the base value.
pub fn sweep_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let sigmas = if cfg.sweep.sigma_p.is_empty() { vec![cfg.data.sigma_p] } else { cfg.sweep.sigma_p.clone() };
    let modes = if cfg.sweep.modes.is_empty() { vec![cfg.train.mode] } else { cfg.sweep.modes.clone() };
    let mut cells = Vec::new();
    for &sigma_p in &sigmas {
        for &mode in &modes {
            for replicate in 0..cfg.sweep.replicates.max(1) {
                cells.push(Cell { sigma_p, mode, replicate });
            }
        }
    }
    cells
}

/// Base config specialised to one cell. Replicate 0 keeps the base seeds;
/// replicate `k` derives each seed from the base seed and `k`.
pub fn cell_config(base: &ExperimentConfig, cell: &Cell) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.data.sigma_p = cell.sigma_p;
    cfg.train.mode = cell.mode;
    if cell.replicate > 0 {
        let k = cell.replicate as u64;
        cfg.seeds.data_seed = derive_seed(base.seeds.data_seed, k);
        cfg.seeds.init_seed = derive_seed(base.seeds.init_seed, k);
        cfg.seeds.test_seed = derive_seed(base.seeds.test_seed, k);
    }
    cfg.sweep = Default::default();
    cfg.sweep.replicates = 1;
    cfg
}

/// Final-epoch metrics of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub sigma_p: f64,
    pub mode: ModeName,
    pub seed: u64,
    pub final_train_loss: f64,
    pub final_test_error: f64,
    /// Not part of the summary CSV.
    pub final_test_tie_rate: f64,
    pub final_signal: f64,
    pub final_noise: f64,
    pub gamma_max: f64,
    pub rho_bar_max: f64,
}

impl SummaryRow {
    pub fn from_trace(cell: &Cell, cfg: &ExperimentConfig, trace: &TrainTrace) -> Self {
        let last = trace.last();
        Self {
            sigma_p: cell.sigma_p,
            mode: cell.mode,
            seed: cfg.seeds.data_seed,
            final_train_loss: last.train_loss,
            final_test_error: last.test_error.unwrap_or(f64::NAN),
            final_test_tie_rate: last.test_tie_rate.unwrap_or(f64::NAN),
            final_signal: last.signal,
            final_noise: last.noise_max,
            gamma_max: last.gamma_max,
            rho_bar_max: last.rho_bar_max,
        }
    }

    /// `1 - error - tie_rate`; ties are not counted as correct.
    pub fn accuracy(&self) -> f64 {
        1.0 - self.final_test_error - self.final_test_tie_rate
    }

    fn values(&self) -> [f64; 6] {
        [
            self.final_train_loss,
            self.final_test_error,
            self.final_signal,
            self.final_noise,
            self.gamma_max,
            self.rho_bar_max,
        ]
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-(sigma_p, mode) medians of every metric, in first-seen order.
pub fn medians(rows: &[SummaryRow]) -> Vec<(f64, ModeName, [f64; 6])> {
    let mut groups: Vec<(f64, ModeName, Vec<[f64; 6]>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|g| g.0 == r.sigma_p && g.1 == r.mode) {
            Some(g) => g.2.push(r.values()),
            None => groups.push((r.sigma_p, r.mode, vec![r.values()])),
        }
    }
    groups
        .into_iter()
        .map(|(sp, mode, vals)| {
            let mut med = [0.0; 6];
            for (k, slot) in med.iter_mut().enumerate() {
                let mut col: Vec<f64> = vals.iter().map(|v| v[k]).collect();
                *slot = median(&mut col);
            }
            (sp, mode, med)
        })
        .collect()
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Summary CSV: one row per finished cell, then one `median` row per group.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for r in rows {
        let vals: Vec<String> = r.values().iter().map(|v| fmt(*v)).collect();
        s.push_str(&format!("{},{},{},{}\n", r.sigma_p, r.mode, r.seed, vals.join(",")));
    }
    for (sp, mode, med) in medians(rows) {
        let vals: Vec<String> = med.iter().map(|v| fmt(*v)).collect();
        s.push_str(&format!("{sp},{mode},median,{}\n", vals.join(",")));
    }
    s
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SummaryRow>,
    pub failures: Vec<(Cell, String)>,
    pub summary_csv: String,
}

/// Run every cell on `workers` threads and write the traces plus the summary.
/// When `out_dir` is `None` nothing is written.
pub fn run_sweep(cfg: &ExperimentConfig, workers: usize, out_dir: Option<&Path>) -> Result<SweepOutcome, CliError> {
    cfg.validate().map_err(CliError::Usage)?;
    let cells = sweep_cells(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<SummaryRow, CliError>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let cell_cfg = cell_config(cfg, cell);
                let out = run_experiment(&cell_cfg, None)?;
                if let Some(dir) = out_dir {
                    write_run(&dir.join("cells").join(cell.label()), &cell_cfg, &out)?;
                }
                Ok(SummaryRow::from_trace(cell, &cell_cfg, &out.trace))
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (cell, res) in cells.into_iter().zip(results) {
        match res {
            Ok(row) => rows.push(row),
            Err(e) => failures.push((cell, e.to_string())),
        }
    }
    let summary = summary_csv(&rows);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_file(&dir.join("summary.csv"), &summary)?;
        write_file(&dir.join("config.conf"), &cfg.to_text())?;
        let failed: String = failures.iter().map(|(c, e)| format!("{}: {e}\n", c.label())).collect();
        if failed.is_empty() {
            let _ = fs::remove_file(dir.join("failures.txt"));
        } else {
            write_file(&dir.join("failures.txt"), &failed)?;
        }
    }
    Ok(SweepOutcome { rows, failures, summary_csv: summary })
}
