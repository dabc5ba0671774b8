//! Full-batch gradient descent with a regularize-then-cut-off schedule.

use std::io::Write;

use crate::data_model::{fmt_real, Dataset};
use crate::decomposition::{
    check_bounds, monotonicity_report, solve_direct, BoundReport, DecompositionBasis, DecompositionState,
};
use crate::gradient::{
    objective_coeffs, objective_value_cached, pegr_step_closed_form_cached, PerExampleCache, RegMode,
};
use crate::metrics::{noise_metric, signal_metric, test_error};
use crate::network::ModelParams;
use crate::{Error, Result};

/// Header of the trace CSV.
pub const TRACE_HEADER: &str =
    "epoch,lambda,train_loss,penalty,grad_norm_sq,signal,noise_max,gamma_max,rho_bar_max,rho_under_min,test_error,decomp_residual";

/// Header of the per-record diagnostics CSV.
pub const DIAGNOSTICS_HEADER: &str = "epoch,test_tie_rate,grad_norm_bound_violated,bound_violations,monotonicity_violations,rho_bar_down_moves,decomp_discrepancy,decomp_trusted";

/// Relative span residual above which decomposition columns are untrusted.
pub const RESIDUAL_TRUST_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Cutoff {
    FixedEpoch(u64),
    TheoryT1 { delta: f64 },
    Never,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaSchedule {
    pub mode: RegMode,
    pub cutoff: Cutoff,
}

impl LambdaSchedule {
    pub fn new(mode: RegMode, cutoff: Cutoff) -> Self {
        Self { mode, cutoff }
    }

    /// Last epoch at which the penalty is active, `None` for no cutoff.
    pub fn cutoff_epoch(&self, params: &ModelParams, dataset: &Dataset, eta: f64) -> Result<Option<u64>> {
        match self.cutoff {
            Cutoff::FixedEpoch(t) => Ok(Some(t)),
            Cutoff::Never => Ok(None),
            Cutoff::TheoryT1 { delta } => Ok(Some(theory_t1(
                params.m(),
                eta,
                dataset.spec().mu_norm(),
                params.sigma_0(),
                dataset.n(),
                delta,
            )?)),
        }
    }

    /// Mode in effect for the step leaving epoch `t`.
    pub fn mode_at(&self, t: u64, cutoff: Option<u64>) -> RegMode {
        match cutoff {
            Some(c) if t > c => self.mode.with_lambda(0.0),
            _ => self.mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    pub epochs: u64,
    pub schedule: LambdaSchedule,
    /// Recorded with the trace; training itself is deterministic.
    pub seed: u64,
    pub use_closed_form_pegr: bool,
    pub log_every: u64,
    pub track_decomposition: bool,
    /// Horizon in the `4 log T*` coefficient envelope.
    pub t_star: f64,
}

impl TrainConfig {
    pub fn new(eta: f64, epochs: u64, schedule: LambdaSchedule) -> Self {
        Self {
            eta,
            epochs,
            schedule,
            seed: 0,
            use_closed_form_pegr: false,
            log_every: 100,
            track_decomposition: true,
            t_star: 1e7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta must be non-negative, got {}", self.eta)));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.log_every < 1 {
            return Err(Error::InvalidArgument("log_every must be at least 1".into()));
        }
        if !(self.t_star > 1.0) {
            return Err(Error::InvalidArgument("t_star must exceed 1".into()));
        }
        self.schedule.mode.validate()
    }
}

/// Per-record diagnostics; informational.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Diagnostics {
    /// `|grad L_S|^2 > 72 sigma_p^2 d L_S`.
    pub grad_norm_bound_violated: bool,
    pub bounds: BoundReport,
    /// Sign-pattern violations over the steps since the previous record.
    pub monotonicity_violations: usize,
    /// rho_bar entries that moved down since the previous record.
    pub rho_bar_down_moves: usize,
    /// Max gap between the tracked and directly solved coefficients.
    pub decomp_discrepancy: f64,
    pub decomp_trusted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub lambda: f64,
    pub train_loss: f64,
    pub penalty: f64,
    pub grad_norm_sq: f64,
    pub signal: f64,
    pub noise_max: f64,
    pub gamma_max: f64,
    pub rho_bar_max: f64,
    pub rho_under_min: f64,
    pub test_error: Option<f64>,
    pub test_tie_rate: Option<f64>,
    /// Span residual relative to `|W(t) - W(0)|_F`.
    pub decomp_residual: f64,
    pub diagnostics: Diagnostics,
}

/// Run-level tallies of the diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TraceSummary {
    pub cutoff_epoch: Option<u64>,
    pub grad_norm_bound_violations: usize,
    pub bound_violation_records: usize,
    pub monotonicity_violations: usize,
    pub max_decomp_discrepancy: f64,
    pub max_decomp_residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTrace {
    pub config: TrainConfig,
    pub records: Vec<EpochRecord>,
    pub summary: TraceSummary,
    pub final_params: ModelParams,
    pub final_state: Option<DecompositionState>,
}

impl TrainTrace {
    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("a trace always has records")
    }

    pub fn record_at(&self, epoch: u64) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == epoch)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{TRACE_HEADER}")?;
        for r in &self.records {
            let test = r.test_error.map(fmt_real).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                fmt_real(r.lambda),
                fmt_real(r.train_loss),
                fmt_real(r.penalty),
                fmt_real(r.grad_norm_sq),
                fmt_real(r.signal),
                fmt_real(r.noise_max),
                fmt_real(r.gamma_max),
                fmt_real(r.rho_bar_max),
                fmt_real(r.rho_under_min),
                test,
                fmt_real(r.decomp_residual),
            )?;
        }
        Ok(())
    }

    pub fn write_diagnostics_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{DIAGNOSTICS_HEADER}")?;
        for r in &self.records {
            let d = &r.diagnostics;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                r.test_tie_rate.map(fmt_real).unwrap_or_default(),
                d.grad_norm_bound_violated as u8,
                d.bounds.total(),
                d.monotonicity_violations,
                d.rho_bar_down_moves,
                fmt_real(d.decomp_discrepancy),
                d.decomp_trusted as u8,
            )?;
        }
        let s = &self.summary;
        writeln!(out, "# cutoff_epoch={}", s.cutoff_epoch.map(|c| c.to_string()).unwrap_or_else(|| "none".into()))?;
        writeln!(out, "# grad_norm_bound_violations={}", s.grad_norm_bound_violations)?;
        writeln!(out, "# bound_violation_records={}", s.bound_violation_records)?;
        writeln!(out, "# monotonicity_violations={}", s.monotonicity_violations)?;
        writeln!(out, "# max_decomp_discrepancy={}", fmt_real(s.max_decomp_discrepancy))?;
        writeln!(out, "# max_decomp_residual={}", fmt_real(s.max_decomp_residual))?;
        Ok(())
    }
}

/// End of the first phase:
/// `ceil((m / (eta |mu|^2)) log(4 / (sqrt(2 log(8m/delta)) sigma_0 |mu| log n)))`.
pub fn theory_t1(m: usize, eta: f64, mu_norm: f64, sigma_0: f64, n: usize, delta: f64) -> Result<u64> {
    if !(eta > 0.0 && mu_norm > 0.0) {
        return Err(Error::InvalidArgument("eta and |mu| must be positive".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
    }
    let mf = m as f64;
    let arg = 4.0 / ((2.0 * (8.0 * mf / delta).ln()).sqrt() * sigma_0 * mu_norm * (n as f64).ln());
    if !(arg > 1.0 && arg.is_finite()) {
        return Err(Error::RegimeViolated { argument: arg });
    }
    Ok((mf / (eta * mu_norm * mu_norm) * arg.ln()).ceil() as u64)
}

/// True when `|grad L_S|^2 <= 72 sigma_p^2 d L_S` fails.
pub fn gradient_norm_diagnostic(grad_norm_sq: f64, train_loss: f64, sigma_p: f64, d: usize) -> bool {
    grad_norm_sq > 72.0 * sigma_p * sigma_p * d as f64 * train_loss
}

fn non_finite(epoch: u64, quantity: &'static str, params: &ModelParams) -> Error {
    Error::NonFinite { epoch, quantity, checkpoint: Box::new(params.clone()) }
}

/// Run `config.epochs` full-batch steps from `params0`.
///
/// A record is written at epoch 0, every `log_every` epochs, at the cutoff and
/// the epoch after it, and at the end. Epoch `t` is the iterate after `t`
/// steps; its `lambda` is the weight used by the step leaving it.
pub fn train(
    params0: &ModelParams,
    dataset: &Dataset,
    config: &TrainConfig,
    test: Option<&Dataset>,
) -> Result<TrainTrace> {
    config.validate()?;
    if params0.d() != dataset.d() {
        return Err(Error::DimensionMismatch { expected: dataset.d(), found: params0.d() });
    }
    let cutoff = config.schedule.cutoff_epoch(params0, dataset, config.eta)?;
    let cutoff = match config.schedule.mode {
        RegMode::Standard => None,
        _ => cutoff,
    };
    let basis = DecompositionBasis::new(dataset)?;
    let is_logged = |t: u64| {
        t == 0
            || t % config.log_every == 0
            || t == config.epochs
            || cutoff.is_some_and(|c| t == c || t == c + 1)
    };

    let sigma_p = dataset.spec().sigma_p();
    let mut params = params0.clone();
    let mut tracked = config.track_decomposition.then(|| DecompositionState::zeros(params0.m(), dataset));
    let mut records = Vec::new();
    let mut summary = TraceSummary { cutoff_epoch: cutoff, ..Default::default() };
    let mut mono_since = 0usize;
    let mut down_since = 0usize;

    for t in 0..=config.epochs {
        let mode = config.schedule.mode_at(t, cutoff);
        let cache = PerExampleCache::compute(&params, dataset)?;
        let logged = is_logged(t);
        let last = t == config.epochs;

        let standard_coeffs = (logged || mode.lambda() == 0.0)
            .then(|| objective_coeffs(dataset, &cache, RegMode::Standard));

        if logged {
            let value = objective_value_cached(dataset, &cache, mode);
            if !value.train_loss.is_finite() {
                return Err(non_finite(t, "train_loss", &params));
            }
            let grad = standard_coeffs.as_ref().expect("computed when logged").materialize(dataset);
            let grad_norm_sq = grad.norm_sq();
            if !grad_norm_sq.is_finite() {
                return Err(non_finite(t, "gradient", &params));
            }
            let direct = solve_direct(&params, params0, dataset, &basis)?;
            let state = tracked.as_ref().unwrap_or(&direct);
            let discrepancy = tracked.as_ref().map_or(0.0, |s| s.max_abs_diff(&direct));
            let rel_residual = direct.relative_residual();
            let bounds = check_bounds(state, config.t_star);
            let grad_flag = gradient_norm_diagnostic(grad_norm_sq, value.train_loss, sigma_p, dataset.d());
            let test_report = test.map(|s| test_error(&params, s)).transpose()?;
            let diagnostics = Diagnostics {
                grad_norm_bound_violated: grad_flag,
                bounds,
                monotonicity_violations: mono_since,
                rho_bar_down_moves: down_since,
                decomp_discrepancy: discrepancy,
                decomp_trusted: rel_residual <= RESIDUAL_TRUST_TOL,
            };
            summary.grad_norm_bound_violations += grad_flag as usize;
            summary.bound_violation_records += (bounds.total() > 0) as usize;
            summary.max_decomp_discrepancy = summary.max_decomp_discrepancy.max(discrepancy);
            summary.max_decomp_residual = summary.max_decomp_residual.max(rel_residual);
            mono_since = 0;
            down_since = 0;
            records.push(EpochRecord {
                epoch: t,
                lambda: mode.lambda(),
                train_loss: value.train_loss,
                penalty: value.penalty,
                grad_norm_sq,
                signal: signal_metric(&params, dataset.spec().mu())?,
                noise_max: noise_metric(&params, dataset)?,
                gamma_max: state.gamma_max(),
                rho_bar_max: state.rho_bar_max(),
                rho_under_min: state.rho_under_min(),
                test_error: test_report.map(|r| r.error),
                test_tie_rate: test_report.map(|r| r.tie_rate),
                decomp_residual: rel_residual,
                diagnostics,
            });
        }
        if last {
            break;
        }

        let lambda = mode.lambda();
        let closed_form = config.use_closed_form_pegr && matches!(mode, RegMode::Pegr(_));
        let (next, coeffs) = if closed_form {
            (pegr_step_closed_form_cached(&params, dataset, &cache, lambda, config.eta)?, None)
        } else {
            let coeffs = match (&standard_coeffs, lambda == 0.0) {
                (Some(c), true) => c.clone(),
                _ => objective_coeffs(dataset, &cache, mode),
            };
            let grad = coeffs.materialize(dataset);
            if !grad.is_finite() {
                return Err(non_finite(t, "gradient", &params));
            }
            (grad.descend(&params, config.eta), Some(coeffs))
        };
        if !next.as_slice().iter().all(|v| v.is_finite()) {
            return Err(non_finite(t, "parameters", &params));
        }

        if let Some(state) = tracked.as_mut() {
            let prev = state.clone();
            match (mode, coeffs) {
                (RegMode::Fgr(l), Some(c)) if l != 0.0 => state.step_from_coeffs(&c, dataset, config.eta)?,
                _ => state.step_recurrence(&cache, dataset, lambda, config.eta)?,
            }
            let rep = monotonicity_report(&prev, state, lambda);
            mono_since += rep.violations();
            down_since += rep.rho_bar_down_moves;
            summary.monotonicity_violations += rep.violations();
        }
        params = next;
    }

    Ok(TrainTrace { config: config.clone(), records, summary, final_params: params, final_state: tracked })
}
