//! Evaluation metrics and theory-side utilities.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data_model::{generate_dataset, Dataset, SignalNoiseSpec};
use crate::linalg::dot;
use crate::network::{activation, ModelParams};
use crate::seeds::derive_seed;
use crate::{Error, Result};

/// `max_{j,r} |<w_{j,r}, mu>|`
pub fn signal_metric(params: &ModelParams, mu: &[f64]) -> Result<f64> {
    if mu.len() != params.d() {
        return Err(Error::DimensionMismatch { expected: params.d(), found: mu.len() });
    }
    Ok((0..params.num_filters()).map(|f| dot(params.filter_at(f), mu).abs()).fold(0.0, f64::max))
}

/// `max_{j,r,i} <w_{j,r}, xi_i>` (signed).
pub fn noise_metric(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if dataset.d() != params.d() {
        return Err(Error::DimensionMismatch { expected: params.d(), found: dataset.d() });
    }
    let mut best = f64::NEG_INFINITY;
    for f in 0..params.num_filters() {
        for i in 0..dataset.n() {
            best = best.max(dot(params.filter_at(f), dataset.xi(i)));
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestErrorReport {
    /// Fraction with `y f(W, x) < 0`.
    pub error: f64,
    /// Fraction with `y f(W, x) = 0`, not counted as errors.
    pub tie_rate: f64,
    pub count: usize,
}

impl TestErrorReport {
    pub fn accuracy(&self) -> f64 {
        1.0 - self.error - self.tie_rate
    }
}

/// Strict-inequality error rate on a held-out stream.
pub fn test_error(params: &ModelParams, stream: &Dataset) -> Result<TestErrorReport> {
    if stream.d() != params.d() {
        return Err(Error::DimensionMismatch { expected: params.d(), found: stream.d() });
    }
    let nf = params.num_filters();
    let m = params.m();
    let w_mu: Vec<f64> = (0..nf).map(|f| dot(params.filter_at(f), stream.spec().mu())).collect();
    let (mut wrong, mut ties) = (0usize, 0usize);
    for i in 0..stream.n() {
        let y = stream.y(i);
        let xi = stream.xi(i);
        let f_out: f64 = (0..nf)
            .map(|f| {
                let j = if f < m { 1.0 } else { -1.0 };
                j * (activation(y * w_mu[f]) + activation(dot(params.filter_at(f), xi)))
            })
            .sum::<f64>()
            / m as f64;
        let margin = y * f_out;
        if margin < 0.0 {
            wrong += 1;
        } else if margin == 0.0 {
            ties += 1;
        }
    }
    let n = stream.n() as f64;
    Ok(TestErrorReport { error: wrong as f64 / n, tie_rate: ties as f64 / n, count: stream.n() })
}

/// Theory constants used by the condition checker and the diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TheoryParams {
    pub alpha: f64,
    pub delta: f64,
    /// `1 / (sigma_p sqrt(d))`
    pub lambda_theory: f64,
    pub epsilon: f64,
    /// `1 - exp(-epsilon)`
    pub epsilon0: f64,
    pub t_star: f64,
    /// `2 max |<w(0), mu>|, |<w(0), xi_i>|`, once an initialization is known.
    pub beta: Option<f64>,
}

impl TheoryParams {
    pub fn new(spec: &SignalNoiseSpec, alpha: f64, delta: f64, epsilon: f64, t_star: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 0.001) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 0.001), got {alpha}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
        }
        if !(t_star > 1.0 && t_star.is_finite()) {
            return Err(Error::InvalidArgument(format!("t_star must exceed 1, got {t_star}")));
        }
        Ok(Self {
            alpha,
            delta,
            lambda_theory: 1.0 / (spec.sigma_p() * (spec.d() as f64).sqrt()),
            epsilon,
            epsilon0: 1.0 - (-epsilon).exp(),
            t_star,
            beta: None,
        })
    }

    pub fn with_beta(mut self, params0: &ModelParams, dataset: &Dataset) -> Self {
        let mut b: f64 = 0.0;
        for f in 0..params0.num_filters() {
            let w = params0.filter_at(f);
            b = b.max(dot(w, dataset.spec().mu()).abs());
            for i in 0..dataset.n() {
                b = b.max(dot(w, dataset.xi(i)).abs());
            }
        }
        self.beta = Some(2.0 * b);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Satisfied,
    Marginal,
    Violated,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Satisfied => "satisfied",
            Verdict::Marginal => "marginal",
            Verdict::Violated => "violated",
        }
    }

    /// For "at least" clauses: ratio >= 1 holds.
    fn at_least(ratio: f64) -> Self {
        if ratio >= 1.0 {
            Verdict::Satisfied
        } else {
            Verdict::Violated
        }
    }

    /// For "much larger" / "tends to infinity" clauses.
    fn much_larger(ratio: f64) -> Self {
        if ratio >= 100.0 {
            Verdict::Satisfied
        } else if ratio >= 1.0 {
            Verdict::Marginal
        } else {
            Verdict::Violated
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clause {
    pub key: &'static str,
    pub description: &'static str,
    pub ratio: f64,
    pub verdict: Verdict,
}

/// Ratios for each clause of the over-parameterization condition, hidden
/// constants set to 1. A ratio above 1 means the clause points the right way.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionReport {
    pub clauses: Vec<Clause>,
    /// `log d` and `log(1/sigma_0)`, the polylog scale for `n` and `m`.
    pub polylog_scale: f64,
}

impl ConditionReport {
    pub fn clause(&self, key: &str) -> Option<&Clause> {
        self.clauses.iter().find(|c| c.key == key)
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>14}  {:<10} {}", "clause", "ratio", "verdict", "condition");
        for c in &self.clauses {
            let _ = writeln!(s, "{:<16} {:>14.6e}  {:<10} {}", c.key, c.ratio, c.verdict.as_str(), c.description);
        }
        let _ = writeln!(s, "polylog scale (max of log d, log 1/sigma_0): {:.6}", self.polylog_scale);
        s
    }

    pub fn render_kv(&self) -> String {
        let mut s = String::new();
        for c in &self.clauses {
            let _ = writeln!(s, "condition.{}.ratio={:e}", c.key, c.ratio);
            let _ = writeln!(s, "condition.{}.verdict={}", c.key, c.verdict.as_str());
        }
        let _ = writeln!(s, "condition.polylog_scale={:e}", self.polylog_scale);
        s
    }
}

pub fn check_condition(
    spec: &SignalNoiseSpec,
    n: usize,
    m: usize,
    eta: f64,
    sigma_0: f64,
    theory: &TheoryParams,
) -> ConditionReport {
    let d = spec.d() as f64;
    let (nf, mf) = (n as f64, m as f64);
    let a = theory.alpha;
    let sp = spec.sigma_p();
    let mu = spec.mu_norm();
    let noise_scale = sp * d.sqrt();

    let d_ratio = d / (mf * mf * nf.powf(2.0 + 2.0 * a));
    let snr_ratio = noise_scale / (mu + mu.powi(4));
    let sigma0_ratio = (1.0 / (sp * sp * d * (nf * mf).powf(2.0 * a))) / sigma_0;
    let eta_ratio = (nf * mf / (sp * sp * d)) / eta;
    let polylog = d.ln().max((1.0 / sigma_0).ln());
    let nm_ratio = nf.min(mf) / polylog;

    let clauses = vec![
        Clause {
            key: "dimension",
            description: "d >= m^2 n^(2+2 alpha)",
            ratio: d_ratio,
            verdict: Verdict::at_least(d_ratio),
        },
        Clause {
            key: "snr",
            description: "|mu| + |mu|^4 << sigma_p sqrt(d)",
            ratio: snr_ratio,
            verdict: Verdict::much_larger(snr_ratio),
        },
        Clause {
            key: "noise_scale",
            description: "sigma_p sqrt(d) -> infinity",
            ratio: noise_scale,
            verdict: Verdict::much_larger(noise_scale),
        },
        Clause {
            key: "init_scale",
            description: "sigma_0 <= 1 / (sigma_p^2 d (n m)^(2 alpha))",
            ratio: sigma0_ratio,
            verdict: Verdict::at_least(sigma0_ratio),
        },
        Clause {
            key: "learning_rate",
            description: "eta <= n m / (sigma_p^2 d)",
            ratio: eta_ratio,
            verdict: Verdict::at_least(eta_ratio),
        },
        Clause {
            key: "width_samples",
            description: "m, n >= polylog(d, 1/sigma_0)",
            ratio: nm_ratio,
            verdict: Verdict::at_least(nm_ratio),
        },
    ];
    ConditionReport { clauses, polylog_scale: polylog }
}

/// Length of the second training phase:
/// `ceil((2 n m / (eta eps0 |mu|^2)) log(sqrt(2 log(8m/delta)) log(n) d))`.
pub fn theory_t2(n: usize, m: usize, d: usize, eta: f64, epsilon: f64, mu_norm: f64, delta: f64) -> Result<u64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(eta > 0.0 && mu_norm > 0.0) {
        return Err(Error::InvalidArgument("eta and |mu| must be positive".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
    }
    let eps0 = 1.0 - (-epsilon).exp();
    let (nf, mf) = (n as f64, m as f64);
    let arg = (2.0 * (8.0 * mf / delta).ln()).sqrt() * nf.ln() * d as f64;
    if !(arg > 1.0 && arg.is_finite()) {
        return Err(Error::RegimeViolated { argument: arg });
    }
    let value = 2.0 * nf * mf / (eta * eps0 * mu_norm * mu_norm) * arg.ln();
    Ok(value.ceil() as u64)
}

/// Which concentration events held in one trial.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrialOutcome {
    /// Label balance band.
    pub b1: bool,
    /// Noise norm band and pairwise inner products.
    pub b2: bool,
    /// Initialization bounds on `<w, mu>` and `|<w, xi>|`, and the lower bound on `max_r j <w, mu>`.
    pub b3: bool,
    /// Lower bound `max_r j <w, xi_i> >= sigma_0 sigma_p sqrt(d) / 4`, reported on its own.
    pub b3_noise_lower: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventRate {
    pub name: &'static str,
    pub failures: usize,
    pub trials: usize,
    /// `delta + 3 sqrt(delta (1 - delta) / trials)`
    pub threshold: f64,
    /// Whether the rate is held to the threshold.
    pub asserted: bool,
}

impl EventRate {
    pub fn rate(&self) -> f64 {
        self.failures as f64 / self.trials as f64
    }

    pub fn passed(&self) -> bool {
        !self.asserted || self.rate() <= self.threshold
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationReport {
    pub delta: f64,
    pub events: Vec<EventRate>,
}

impl ConcentrationReport {
    pub fn passed(&self) -> bool {
        self.events.iter().all(EventRate::passed)
    }

    pub fn event(&self, name: &str) -> Option<&EventRate> {
        self.events.iter().find(|e| e.name == name)
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>8} {:>8} {:>10} {:>10}  {}", "event", "fails", "trials", "rate", "threshold", "status");
        for e in &self.events {
            let status = match (e.asserted, e.passed()) {
                (false, _) => "info",
                (true, true) => "pass",
                (true, false) => "FAIL",
            };
            let _ = writeln!(
                s,
                "{:<16} {:>8} {:>8} {:>10.4} {:>10.4}  {}",
                e.name,
                e.failures,
                e.trials,
                e.rate(),
                e.threshold,
                status
            );
        }
        s
    }

    pub fn render_kv(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            let _ = writeln!(s, "concentration.{}.failures={}", e.name, e.failures);
            let _ = writeln!(s, "concentration.{}.trials={}", e.name, e.trials);
            let _ = writeln!(s, "concentration.{}.rate={:e}", e.name, e.rate());
            let _ = writeln!(s, "concentration.{}.threshold={:e}", e.name, e.threshold);
        }
        s
    }
}

/// Evaluate every event on one dataset / initialization pair.
pub fn concentration_trial(dataset: &Dataset, params0: &ModelParams, delta: f64) -> TrialOutcome {
    let n = dataset.n() as f64;
    let d = dataset.d() as f64;
    let m = params0.m();
    let sp = dataset.spec().sigma_p();
    let sigma_0 = params0.sigma_0();
    let mu = dataset.spec().mu();
    let mu_norm = dataset.spec().mu_norm();

    let positives = (0..dataset.n()).filter(|&i| dataset.y(i) > 0.0).count() as f64;
    let half_width = ((4.0 / delta).ln() / 2.0 * n).sqrt();
    let b1 = (positives - n / 2.0).abs() <= half_width;

    let var = sp * sp * d;
    let cross_cap = 2.0 * sp * sp * (d * (4.0 * n * n / delta).ln()).sqrt();
    let gram = dataset.basis_gram();
    let mut b2 = true;
    for i in 0..dataset.n() {
        let sq = gram.xi_dot(i, i);
        b2 &= sq >= var / 2.0 && sq <= 1.5 * var;
        for k in 0..i {
            b2 &= gram.xi_dot(i, k).abs() <= cross_cap;
        }
    }

    let mu_cap = (2.0 * (8.0 * m as f64 / delta).ln()).sqrt() * sigma_0 * mu_norm;
    let xi_cap = 2.0 * (8.0 * m as f64 * n / delta).ln().sqrt() * sigma_0 * sp * d.sqrt();
    let mut b3 = true;
    let mut b3_noise_lower = true;
    for side in 0..2 {
        let j = if side == 0 { 1.0 } else { -1.0 };
        let filters = side * m..(side + 1) * m;
        let mut best_mu = f64::NEG_INFINITY;
        for f in filters.clone() {
            let v = dot(params0.filter_at(f), mu);
            b3 &= v.abs() <= mu_cap;
            best_mu = best_mu.max(j * v);
            for i in 0..dataset.n() {
                b3 &= dot(params0.filter_at(f), dataset.xi(i)).abs() <= xi_cap;
            }
        }
        b3 &= best_mu >= sigma_0 * mu_norm / 2.0;
        for i in 0..dataset.n() {
            let best_xi = filters
                .clone()
                .map(|f| j * dot(params0.filter_at(f), dataset.xi(i)))
                .fold(f64::NEG_INFINITY, f64::max);
            b3_noise_lower &= best_xi >= sigma_0 * sp * d.sqrt() / 4.0;
        }
    }
    TrialOutcome { b1, b2, b3, b3_noise_lower }
}

/// Run `trials` independent draws and tally how often each event fails.
pub fn concentration_suite(
    spec: &SignalNoiseSpec,
    n: usize,
    m: usize,
    sigma_0: f64,
    delta: f64,
    trials: usize,
    seed: u64,
) -> Result<ConcentrationReport> {
    if trials < 1 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
    }
    let outcomes: Vec<TrialOutcome> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let s = derive_seed(seed, t);
            let ds = generate_dataset(spec, n, derive_seed(s, 0))?;
            let p0 = ModelParams::init_gaussian(m, spec.d(), sigma_0, derive_seed(s, 1))?;
            Ok(concentration_trial(&ds, &p0, delta))
        })
        .collect::<Result<_>>()?;
    let threshold = delta + 3.0 * (delta * (1.0 - delta) / trials as f64).sqrt();
    let tally = |name, asserted, pick: fn(&TrialOutcome) -> bool| EventRate {
        name,
        failures: outcomes.iter().filter(|o| !pick(o)).count(),
        trials,
        threshold,
        asserted,
    };
    Ok(ConcentrationReport {
        delta,
        events: vec![
            tally("label_balance", true, |o| o.b1),
            tally("noise_norms", true, |o| o.b2),
            tally("init_bounds", true, |o| o.b3),
            tally("init_noise_lower", false, |o| o.b3_noise_lower),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::generate_test_stream;
    use crate::linalg::axpy;

    #[test]
    fn metrics_on_constructed_weights() {
        let spec = SignalNoiseSpec::axis_aligned(20, 1.0, 1.0).unwrap();
        let ds = generate_dataset(&spec, 4, 2).unwrap();
        let mut p = ModelParams::zeros(2, 20);
        assert_eq!(signal_metric(&p, spec.mu()).unwrap(), 0.0);
        assert_eq!(noise_metric(&p, &ds).unwrap(), 0.0);
        axpy(3.0, spec.mu(), p.filter_at_mut(0));
        assert!((signal_metric(&p, spec.mu()).unwrap() - 3.0).abs() < 1e-15);

        let mut q = ModelParams::zeros(2, 20);
        axpy(2.0 / ds.xi_norm_sq(0), ds.xi(0), q.filter_at_mut(0));
        let expect = (0..4).map(|i| dot(q.filter_at(0), ds.xi(i))).fold(0.0, f64::max);
        assert_eq!(noise_metric(&q, &ds).unwrap(), expect);
        assert!(expect >= 2.0 - 1e-12);
    }

    #[test]
    fn test_error_conventions() {
        let spec = SignalNoiseSpec::axis_aligned(20, 1.0, 1.0).unwrap();
        let stream = generate_test_stream(&spec, 500, 3).unwrap();
        let zero = ModelParams::zeros(2, 20);
        let r = test_error(&zero, &stream).unwrap();
        assert_eq!((r.error, r.tie_rate), (0.0, 1.0));

        let mut p = ModelParams::zeros(2, 20);
        for r in 0..2 {
            axpy(0.7, spec.mu(), p.filter_at_mut(r));
            axpy(-0.7, spec.mu(), p.filter_at_mut(2 + r));
        }
        let r = test_error(&p, &stream).unwrap();
        assert_eq!((r.error, r.tie_rate), (0.0, 0.0));
    }

    #[test]
    fn test_error_is_scale_invariant() {
        let spec = SignalNoiseSpec::axis_aligned(30, 1.0, 1.0).unwrap();
        let stream = generate_test_stream(&spec, 300, 4).unwrap();
        let p = ModelParams::init_gaussian(3, 30, 0.3, 5).unwrap();
        let mut q = p.clone();
        q.as_mut_slice().iter_mut().for_each(|v| *v *= 7.5);
        assert_eq!(test_error(&p, &stream).unwrap(), test_error(&q, &stream).unwrap());
    }

    #[test]
    fn condition_clauses_at_desk_scale() {
        let spec = SignalNoiseSpec::axis_aligned(400, 1.0, 1.0).unwrap();
        let th = TheoryParams::new(&spec, 0.0005, 0.05, 0.05, 1e7).unwrap();
        let rep = check_condition(&spec, 20, 10, 0.02, 0.01, &th);
        let dc = rep.clause("dimension").unwrap();
        assert!((dc.ratio - 400.0 / 40000.0 * 20f64.powf(-0.001)).abs() < 1e-15);
        assert_eq!(dc.verdict, Verdict::Violated);
        let ns = rep.clause("noise_scale").unwrap();
        assert_eq!(ns.ratio, 20.0);
        assert_eq!(ns.verdict, Verdict::Marginal);

        let big = SignalNoiseSpec::axis_aligned(1_000_000, 1.0, 1.0).unwrap();
        let rep = check_condition(&big, 20, 10, 0.02, 0.01, &th);
        assert_eq!(rep.clause("dimension").unwrap().verdict, Verdict::Satisfied);
    }

    #[test]
    fn dimension_clause_is_monotone_in_d() {
        let mut last = 0.0;
        for d in [50, 400, 5000, 100_000] {
            let spec = SignalNoiseSpec::axis_aligned(d, 1.0, 1.0).unwrap();
            let th = TheoryParams::new(&spec, 0.0005, 0.05, 0.05, 1e7).unwrap();
            let r = check_condition(&spec, 20, 10, 0.02, 0.01, &th).clause("dimension").unwrap().ratio;
            assert!(r > last);
            last = r;
        }
    }

    #[test]
    fn theory_params_validate() {
        let spec = SignalNoiseSpec::axis_aligned(400, 1.0, 1.0).unwrap();
        assert!(TheoryParams::new(&spec, 0.001, 0.05, 0.05, 1e7).is_err());
        let th = TheoryParams::new(&spec, 0.0005, 0.05, 0.05, 1e7).unwrap();
        assert_eq!(th.epsilon0, 1.0 - (-0.05f64).exp());
        assert_eq!(th.lambda_theory, 0.05);
    }

    #[test]
    fn t2_behaviour() {
        assert!(theory_t2(20, 10, 400, 0.02, 0.0, 1.0, 0.05).is_err());
        let a = theory_t2(20, 10, 400, 0.02, 0.05, 1.0, 0.05).unwrap();
        let b = theory_t2(20, 10, 400, 0.02, 0.5, 1.0, 0.05).unwrap();
        let c = theory_t2(20, 10, 400, 0.02, 5.0, 1.0, 0.05).unwrap();
        assert!(a > b && b > c);
        assert_eq!(a, 3_458_833);
        // Doubling n doubles the prefactor; the log term moves with log n.
        let a2 = theory_t2(40, 10, 400, 0.02, 0.05, 1.0, 0.05).unwrap() as f64;
        let log_term = |n: f64| ((2.0 * 1600f64.ln()).sqrt() * n.ln() * 400.0).ln();
        let expect = a as f64 * 2.0 * log_term(40.0) / log_term(20.0);
        assert!((a2 - expect).abs() <= 2.0 * 2.0 + 1.0);
    }

    #[test]
    fn concentration_suite_rejects_zero_trials() {
        let spec = SignalNoiseSpec::axis_aligned(40, 1.0, 1.0).unwrap();
        assert!(concentration_suite(&spec, 5, 3, 0.01, 0.05, 0, 1).is_err());
    }
}
