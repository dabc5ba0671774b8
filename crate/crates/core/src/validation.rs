//! Self-check battery: finite differences, closed form against HVP, dual-path
//! decomposition, and the concentration events.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data_model::{generate_dataset, SignalNoiseSpec};
use crate::decomposition::{solve_direct, DecompositionBasis, DecompositionState};
use crate::gradcheck::{central_difference_gradient, random_instance, relative_error};
use crate::gradient::{objective_coeffs, objective_grad, objective_value, pegr_step_closed_form, PerExampleCache, RegMode};
use crate::metrics::concentration_suite;
use crate::network::ModelParams;
use crate::seeds::derive_seed;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CheckKind {
    GradFd,
    ClosedForm,
    Decomp,
    Concentration,
}

impl CheckKind {
    pub const ALL: [CheckKind; 4] = [CheckKind::GradFd, CheckKind::ClosedForm, CheckKind::Decomp, CheckKind::Concentration];

    pub fn name(self) -> &'static str {
        match self {
            CheckKind::GradFd => "grad-fd",
            CheckKind::ClosedForm => "closed-form",
            CheckKind::Decomp => "decomp",
            CheckKind::Concentration => "concentration",
        }
    }
}

impl FromStr for CheckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown check '{s}' (expected grad-fd, closed-form, decomp, concentration)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationOptions {
    pub h: f64,
    pub grad_instances: usize,
    pub closed_form_instances: usize,
    pub concentration_trials: usize,
    pub seed: u64,
    /// Added to the first component of every analytic gradient under test.
    pub perturbation: Option<f64>,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            grad_instances: 100,
            closed_form_instances: 50,
            concentration_trials: 500,
            seed: 20240601,
            perturbation: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub check: CheckKind,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub results: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failed(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            let status = if r.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(
                s,
                "{status} {:<14} measured={:.3e} tolerance={:.3e}  {}",
                r.check.name(),
                r.measured,
                r.tolerance,
                r.detail
            );
        }
        s
    }
}

/// Shapes cycled through by the finite-difference battery: `(d, n, m)`.
pub const GRAD_SHAPES: [(usize, usize, usize); 8] =
    [(5, 1, 1), (5, 1, 4), (5, 5, 1), (5, 5, 4), (50, 1, 1), (50, 1, 4), (50, 5, 1), (50, 5, 4)];

fn perturb(grad: &mut crate::gradient::GradientBundle, perturbation: Option<f64>) {
    if let Some(p) = perturbation {
        grad.as_mut_slice()[0] += p;
    }
}

/// Max relative error between analytic and finite-difference gradients of the
/// standard, PEGR and FGR objectives, per mode.
pub fn grad_fd_errors(opts: &ValidationOptions) -> Result<[f64; 3]> {
    let mut worst = [0.0f64; 3];
    for k in 0..opts.grad_instances {
        let (d, n, m) = GRAD_SHAPES[k % GRAD_SHAPES.len()];
        let (params, ds) = random_instance(d, n, m, 1.0, derive_seed(opts.seed, k as u64));
        for (slot, mode) in [RegMode::Standard, RegMode::Pegr(0.5), RegMode::Fgr(0.5)].into_iter().enumerate() {
            let mut g = objective_grad(&params, &ds, mode)?;
            perturb(&mut g, opts.perturbation);
            let fd = central_difference_gradient(&params, opts.h, |w| {
                objective_value(w, &ds, mode).map(|v| v.total()).unwrap_or(f64::NAN)
            });
            let e = relative_error(&g, &fd);
            worst[slot] = if e.is_nan() { f64::INFINITY } else { worst[slot].max(e) };
        }
    }
    Ok(worst)
}

/// Max relative gap between the closed-form PEGR step and the HVP step,
/// measured against the step length, over `lambda` in {0, 0.01, 1}.
pub fn closed_form_gap(opts: &ValidationOptions) -> Result<f64> {
    let eta = 0.1;
    let mut worst: f64 = 0.0;
    for k in 0..opts.closed_form_instances {
        let (d, n, m) = [(50, 5, 4), (100, 10, 5), (400, 20, 10)][k % 3];
        let (params, ds) = random_instance(d, n, m, 1.0, derive_seed(opts.seed ^ 0xC105ED, k as u64));
        for lambda in [0.0, 0.01, 1.0] {
            let closed = pegr_step_closed_form(&params, &ds, lambda, eta)?;
            let mut g = objective_grad(&params, &ds, RegMode::Pegr(lambda))?;
            perturb(&mut g, opts.perturbation);
            let via_hvp = g.descend(&params, eta);
            let (mut diff, mut step) = (0.0, 0.0);
            for ((c, h), w) in closed.as_slice().iter().zip(via_hvp.as_slice()).zip(params.as_slice()) {
                diff += (c - h) * (c - h);
                step += (h - w) * (h - w);
            }
            let gap = if step > 0.0 { (diff / step).sqrt() } else { diff.sqrt() };
            worst = worst.max(gap);
        }
    }
    Ok(worst)
}

/// Max coefficient gap between tracking and the direct solve, and the max
/// relative span residual, over short runs in every mode.
pub fn decomp_gap(seed: u64) -> Result<(f64, f64)> {
    let spec = SignalNoiseSpec::axis_aligned(100, 1.0, 1.0)?;
    let ds = generate_dataset(&spec, 10, derive_seed(seed, 0))?;
    let basis = DecompositionBasis::new(&ds)?;
    let p0 = ModelParams::init_gaussian(5, 100, 0.01, derive_seed(seed, 1))?;
    let eta = 0.2;
    let (mut gap, mut resid): (f64, f64) = (0.0, 0.0);
    for mode in [RegMode::Standard, RegMode::Pegr(0.1), RegMode::Fgr(0.1)] {
        let mut p = p0.clone();
        let mut state = DecompositionState::zeros(5, &ds);
        for t in 1..=200 {
            let cache = PerExampleCache::compute(&p, &ds)?;
            let coeffs = objective_coeffs(&ds, &cache, mode);
            match mode {
                RegMode::Fgr(_) => state.step_from_coeffs(&coeffs, &ds, eta)?,
                _ => state.step_recurrence(&cache, &ds, mode.lambda(), eta)?,
            }
            p = coeffs.materialize(&ds).descend(&p, eta);
            if t % 50 == 0 {
                let direct = solve_direct(&p, &p0, &ds, &basis)?;
                gap = gap.max(state.max_abs_diff(&direct));
                resid = resid.max(direct.relative_residual());
            }
        }
    }
    Ok((gap, resid))
}

pub fn run_checks(kinds: &[CheckKind], opts: &ValidationOptions) -> Result<ValidationReport> {
    let mut results = Vec::new();
    for &kind in kinds {
        match kind {
            CheckKind::GradFd => {
                let tol = 1e-4;
                let [s, p, f] = grad_fd_errors(opts)?;
                let measured = s.max(p).max(f);
                results.push(CheckResult {
                    check: kind,
                    measured,
                    tolerance: tol,
                    passed: measured < tol,
                    detail: format!(
                        "{} instances, h={:e}; standard={s:.2e} pegr={p:.2e} fgr={f:.2e}",
                        opts.grad_instances, opts.h
                    ),
                });
            }
            CheckKind::ClosedForm => {
                let tol = 1e-9;
                let measured = closed_form_gap(opts)?;
                results.push(CheckResult {
                    check: kind,
                    measured,
                    tolerance: tol,
                    passed: measured < tol,
                    detail: format!("{} instances, lambda in {{0, 0.01, 1}}", opts.closed_form_instances),
                });
            }
            CheckKind::Decomp => {
                let tol = 1e-6;
                let (gap, resid) = decomp_gap(opts.seed)?;
                results.push(CheckResult {
                    check: kind,
                    measured: gap,
                    tolerance: tol,
                    passed: gap < tol && resid < 1e-8,
                    detail: format!("standard/pegr/fgr, 200 steps; relative residual {resid:.2e} (tolerance 1e-8)"),
                });
            }
            CheckKind::Concentration => {
                let spec = SignalNoiseSpec::axis_aligned(400, 1.0, 1.0)?;
                let rep = concentration_suite(&spec, 20, 10, 0.01, 0.05, opts.concentration_trials, opts.seed)?;
                let worst = rep
                    .events
                    .iter()
                    .filter(|e| e.asserted)
                    .map(|e| e.rate() - e.threshold)
                    .fold(f64::NEG_INFINITY, f64::max);
                let detail = rep
                    .events
                    .iter()
                    .map(|e| format!("{}={:.3}", e.name, e.rate()))
                    .collect::<Vec<_>>()
                    .join(" ");
                results.push(CheckResult {
                    check: kind,
                    measured: worst,
                    tolerance: 0.0,
                    passed: rep.passed(),
                    detail: format!("rate minus threshold; {detail}"),
                });
            }
        }
    }
    Ok(ValidationReport { results })
}
