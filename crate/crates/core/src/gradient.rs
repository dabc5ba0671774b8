//! Losses and exact gradients.
//!
//! With `z_i = y_i f(W, x_i)`, `l_i = log(1 + exp(-z_i))` and
//! `g_i = grad_W l_i`, the three objectives are
//!
//! ```text
//! standard  L_S(W)
//! PEGR      L_S(W) + (lambda / 2n) sum_i |g_i|_F^2
//! FGR       L_S(W) + (lambda / 2)  |grad L_S(W)|_F^2
//! ```
//!
//! Penalty gradients are computed with Hessian-vector products:
//! `grad (1/2)|g_i|^2 = H_i g_i` and `grad (1/2)|G|^2 = (1/n) sum_i H_i G`.
//! Every gradient of the network lies in `span{mu, xi_1, .., xi_n}`, so the
//! products are carried out on per-filter coefficients over that raw basis
//! using its exact Gram data, then materialized once. No orthogonality is
//! assumed on this path.
//!
//! [`pegr_step_closed_form`] is the separate closed-form PEGR update, which
//! does rely on `<mu, xi_i> = 0`.

use crate::data_model::{Dataset, ORTHOGONALITY_TOL};
use crate::linalg::{axpy, dot};
use crate::network::{activation_prime, activation_second, ModelParams};
use crate::{Error, Result};

/// Logistic loss and its first two derivatives at margin `z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossStats {
    pub margin: f64,
    pub loss: f64,
    /// `l'(z) = -1 / (1 + e^z)`, in `(-1, 0)`.
    pub lp: f64,
    /// `l''(z) = e^z / (1 + e^z)^2`, in `(0, 1/4]`.
    pub lpp: f64,
}

pub fn logistic(z: f64) -> LossStats {
    let e = (-z.abs()).exp();
    let loss = (-z).max(0.0) + e.ln_1p();
    let lp = if z >= 0.0 { -e / (1.0 + e) } else { -1.0 / (1.0 + e) };
    let lpp = e / ((1.0 + e) * (1.0 + e));
    LossStats { margin: z, loss, lp, lpp }
}

/// A parameter-shaped vector (one `d`-vector per filter).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    m: usize,
    d: usize,
    data: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros(m: usize, d: usize) -> Self {
        Self { m, d, data: vec![0.0; 2 * m * d] }
    }

    pub fn zeros_like(params: &ModelParams) -> Self {
        Self::zeros(params.m(), params.d())
    }

    pub fn from_flat(m: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 2 * m * d {
            return Err(Error::DimensionMismatch { expected: 2 * m * d, found: data.len() });
        }
        Ok(Self { m, d, data })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn filter_at(&self, f: usize) -> &[f64] {
        &self.data[f * self.d..(f + 1) * self.d]
    }

    pub fn filter_at_mut(&mut self, f: usize) -> &mut [f64] {
        &mut self.data[f * self.d..(f + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &GradientBundle) {
        assert_eq!(self.data.len(), other.data.len(), "bundle shapes differ");
        axpy(alpha, &other.data, &mut self.data);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn dot(&self, other: &GradientBundle) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "bundle shapes differ");
        dot(&self.data, &other.data)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `params - eta * self`
    pub fn descend(&self, params: &ModelParams, eta: f64) -> ModelParams {
        let mut next = params.clone();
        axpy(-eta, &self.data, next.as_mut_slice());
        next
    }

    fn check_shape(&self, params: &ModelParams) -> Result<()> {
        if self.m != params.m() || self.d != params.d() {
            return Err(Error::DimensionMismatch {
                expected: 2 * params.m() * params.d(),
                found: self.data.len(),
            });
        }
        Ok(())
    }
}

/// Regularization applied on top of the empirical loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RegMode {
    Standard,
    Pegr(f64),
    Fgr(f64),
}

impl RegMode {
    pub fn lambda(self) -> f64 {
        match self {
            RegMode::Standard => 0.0,
            RegMode::Pegr(l) | RegMode::Fgr(l) => l,
        }
    }

    /// Same mode with a different weight (`Standard` stays `Standard`).
    pub fn with_lambda(self, lambda: f64) -> Self {
        match self {
            RegMode::Standard => RegMode::Standard,
            RegMode::Pegr(_) => RegMode::Pegr(lambda),
            RegMode::Fgr(_) => RegMode::Fgr(lambda),
        }
    }

    pub fn validate(self) -> Result<()> {
        let l = self.lambda();
        if !(l >= 0.0 && l.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {l}")));
        }
        Ok(())
    }

    pub fn name(self) -> &'static str {
        match self {
            RegMode::Standard => "standard",
            RegMode::Pegr(_) => "pegr",
            RegMode::Fgr(_) => "fgr",
        }
    }
}

/// Per-example quantities at one iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleCache {
    pub stats: LossStats,
    /// `sum_f [relu(<w_f, y mu>)^2 |mu|^2 + relu(<w_f, xi>)^2 |xi|^2]`
    pub zeta: f64,
    /// `<w_f, y_i mu>` per flat filter index.
    pub signal_pre: Vec<f64>,
    /// `<w_f, xi_i>` per flat filter index.
    pub noise_pre: Vec<f64>,
}

impl ExampleCache {
    fn from_preactivations(
        params: &ModelParams,
        dataset: &Dataset,
        i: usize,
        signal_pre: Vec<f64>,
        noise_pre: Vec<f64>,
    ) -> Self {
        let m = params.m() as f64;
        let mu_sq = dataset.spec().mu_norm_sq();
        let xi_sq = dataset.xi_norm_sq(i);
        let mut f_out = 0.0;
        let mut zeta = 0.0;
        for f in 0..params.num_filters() {
            let s = signal_pre[f].max(0.0);
            let u = noise_pre[f].max(0.0);
            f_out += params.side_of(f).sign() * (s * s + u * u);
            zeta += s * s * mu_sq + u * u * xi_sq;
        }
        let stats = logistic(dataset.y(i) * f_out / m);
        Self { stats, zeta, signal_pre, noise_pre }
    }

    pub fn compute(params: &ModelParams, dataset: &Dataset, i: usize) -> Result<Self> {
        check_dims(params, dataset)?;
        let mu = dataset.spec().mu();
        let y = dataset.y(i);
        let xi = dataset.xi(i);
        let nf = params.num_filters();
        let signal_pre = (0..nf).map(|f| y * dot(params.filter_at(f), mu)).collect();
        let noise_pre = (0..nf).map(|f| dot(params.filter_at(f), xi)).collect();
        Ok(Self::from_preactivations(params, dataset, i, signal_pre, noise_pre))
    }
}

/// [`ExampleCache`] for every training example at one iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct PerExampleCache {
    m: usize,
    examples: Vec<ExampleCache>,
}

impl PerExampleCache {
    pub fn compute(params: &ModelParams, dataset: &Dataset) -> Result<Self> {
        check_dims(params, dataset)?;
        let nf = params.num_filters();
        let mu = dataset.spec().mu();
        let w_mu: Vec<f64> = (0..nf).map(|f| dot(params.filter_at(f), mu)).collect();
        let examples = (0..dataset.n())
            .map(|i| {
                let y = dataset.y(i);
                let xi = dataset.xi(i);
                let signal_pre = w_mu.iter().map(|v| y * v).collect();
                let noise_pre = (0..nf).map(|f| dot(params.filter_at(f), xi)).collect();
                ExampleCache::from_preactivations(params, dataset, i, signal_pre, noise_pre)
            })
            .collect();
        Ok(Self { m: params.m(), examples })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn example(&self, i: usize) -> &ExampleCache {
        &self.examples[i]
    }

    pub fn examples(&self) -> &[ExampleCache] {
        &self.examples
    }

    /// `L_S`, summed in index order.
    pub fn mean_loss(&self) -> f64 {
        self.examples.iter().map(|e| e.stats.loss).sum::<f64>() / self.examples.len() as f64
    }
}

fn check_dims(params: &ModelParams, dataset: &Dataset) -> Result<()> {
    if params.d() != dataset.d() {
        return Err(Error::DimensionMismatch { expected: params.d(), found: dataset.d() });
    }
    if dataset.n() == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

#[inline]
fn side_sign(f: usize, m: usize) -> f64 {
    if f < m {
        1.0
    } else {
        -1.0
    }
}

/// Per-filter coefficients over the raw basis: filter `f` of the represented
/// bundle is `mu_coef[f] * mu + sum_i xi_coef[f * n + i] * xi_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanCoeffs {
    m: usize,
    n: usize,
    mu_coef: Vec<f64>,
    xi_coef: Vec<f64>,
}

impl SpanCoeffs {
    fn zeros(m: usize, n: usize) -> Self {
        Self { m, n, mu_coef: vec![0.0; 2 * m], xi_coef: vec![0.0; 2 * m * n] }
    }

    #[inline]
    pub fn mu_coef(&self, f: usize) -> f64 {
        self.mu_coef[f]
    }

    #[inline]
    pub fn xi_coef(&self, f: usize, i: usize) -> f64 {
        self.xi_coef[f * self.n + i]
    }

    pub fn materialize(&self, dataset: &Dataset) -> GradientBundle {
        let d = dataset.d();
        let mut out = GradientBundle::zeros(self.m, d);
        let mu = dataset.spec().mu();
        for f in 0..2 * self.m {
            let row = out.filter_at_mut(f);
            axpy(self.mu_coef[f], mu, row);
            for i in 0..self.n {
                axpy(self.xi_coef[f * self.n + i], dataset.xi(i), row);
            }
        }
        out
    }
}

/// Coefficients of `g_i` on `(mu, xi_i)` per filter:
/// `g_{i,f} = (l'_i / m) j_f (sigma'(s_f) mu + y_i sigma'(u_f) xi_i)`.
fn example_grad_coeffs(ex: &ExampleCache, y: f64, m: usize) -> (Vec<f64>, Vec<f64>) {
    let c = ex.stats.lp / m as f64;
    let nf = 2 * m;
    let a = (0..nf).map(|f| c * side_sign(f, m) * activation_prime(ex.signal_pre[f])).collect();
    let b = (0..nf).map(|f| c * side_sign(f, m) * y * activation_prime(ex.noise_pre[f])).collect();
    (a, b)
}

/// Adds `scale * H_i v` in `(mu, xi_i)` coefficients, given `mv[f] = <mu, v_f>`
/// and `xv[f] = <xi_i, v_f>`.
///
/// `H_i v = l'' <grad z_i, v> grad z_i + l' (grad^2 z_i) v` with
/// `grad_f z_i = (j/m)(sigma'(s_f) mu + y sigma'(u_f) xi_i)` and
/// `(grad^2 z_i v)_f = (j y / m)(sigma''(s_f) <mu, v_f> mu + sigma''(u_f) <xi_i, v_f> xi_i)`.
#[allow(clippy::too_many_arguments)]
fn accumulate_hvp(
    ex: &ExampleCache,
    y: f64,
    m: usize,
    mv: &[f64],
    xv: &[f64],
    scale: f64,
    out_mu: &mut [f64],
    mut out_xi: impl FnMut(usize, f64),
) {
    let inv_m = 1.0 / m as f64;
    let nf = 2 * m;
    let dz_v: f64 = (0..nf)
        .map(|f| {
            side_sign(f, m)
                * inv_m
                * (activation_prime(ex.signal_pre[f]) * mv[f] + y * activation_prime(ex.noise_pre[f]) * xv[f])
        })
        .sum();
    let lp = ex.stats.lp;
    let lpp = ex.stats.lpp;
    for f in 0..nf {
        let j = side_sign(f, m);
        let cmu = lpp * dz_v * j * inv_m * activation_prime(ex.signal_pre[f])
            + lp * j * y * inv_m * activation_second(ex.signal_pre[f]) * mv[f];
        let cxi = lpp * dz_v * j * inv_m * y * activation_prime(ex.noise_pre[f])
            + lp * j * y * inv_m * activation_second(ex.noise_pre[f]) * xv[f];
        out_mu[f] += scale * cmu;
        out_xi(f, scale * cxi);
    }
}

fn pair_to_bundle(dataset: &Dataset, i: usize, m: usize, a: &[f64], b: &[f64]) -> GradientBundle {
    let mut out = GradientBundle::zeros(m, dataset.d());
    for f in 0..2 * m {
        let row = out.filter_at_mut(f);
        axpy(a[f], dataset.spec().mu(), row);
        axpy(b[f], dataset.xi(i), row);
    }
    out
}

/// `grad_W l(y_i f(W, x_i))`.
pub fn per_example_grad(params: &ModelParams, dataset: &Dataset, i: usize) -> Result<GradientBundle> {
    let ex = ExampleCache::compute(params, dataset, i)?;
    let (a, b) = example_grad_coeffs(&ex, dataset.y(i), params.m());
    Ok(pair_to_bundle(dataset, i, params.m(), &a, &b))
}

/// `grad L_S(W)`.
pub fn full_grad(params: &ModelParams, dataset: &Dataset) -> Result<GradientBundle> {
    objective_grad(params, dataset, RegMode::Standard)
}

/// `zeta_i` at the current weights.
pub fn zeta(params: &ModelParams, dataset: &Dataset, i: usize) -> Result<f64> {
    if i >= dataset.n() {
        return Err(Error::InvalidArgument(format!("point {i} out of range (n = {})", dataset.n())));
    }
    Ok(ExampleCache::compute(params, dataset, i)?.zeta)
}

/// `(grad^2_W l_i) v`, `O(m d)`.
pub fn hvp(params: &ModelParams, dataset: &Dataset, i: usize, v: &GradientBundle) -> Result<GradientBundle> {
    v.check_shape(params)?;
    let ex = ExampleCache::compute(params, dataset, i)?;
    let m = params.m();
    let nf = 2 * m;
    let mu = dataset.spec().mu();
    let xi = dataset.xi(i);
    let mv: Vec<f64> = (0..nf).map(|f| dot(mu, v.filter_at(f))).collect();
    let xv: Vec<f64> = (0..nf).map(|f| dot(xi, v.filter_at(f))).collect();
    let mut out_mu = vec![0.0; nf];
    let mut out_xi = vec![0.0; nf];
    accumulate_hvp(&ex, dataset.y(i), m, &mv, &xv, 1.0, &mut out_mu, |f, c| out_xi[f] += c);
    Ok(pair_to_bundle(dataset, i, m, &out_mu, &out_xi))
}

/// Gradient of the chosen objective, as raw-basis coefficients.
pub fn objective_coeffs(dataset: &Dataset, cache: &PerExampleCache, mode: RegMode) -> SpanCoeffs {
    let m = cache.m();
    let n = dataset.n();
    let nf = 2 * m;
    let inv_n = 1.0 / n as f64;

    let per_example: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .map(|i| example_grad_coeffs(cache.example(i), dataset.y(i), m))
        .collect();

    let mut out = SpanCoeffs::zeros(m, n);
    for (i, (a, b)) in per_example.iter().enumerate() {
        for f in 0..nf {
            out.mu_coef[f] += a[f];
            out.xi_coef[f * n + i] = b[f] * inv_n;
        }
    }
    out.mu_coef.iter_mut().for_each(|v| *v *= inv_n);

    match mode {
        RegMode::Pegr(lambda) if lambda != 0.0 => {
            let gram = dataset.basis_gram();
            let scale = lambda * inv_n;
            let mut mv = vec![0.0; nf];
            let mut xv = vec![0.0; nf];
            for (i, (a, b)) in per_example.iter().enumerate() {
                let mu_xi = gram.mu_xi[i];
                let xi_sq = gram.xi_dot(i, i);
                for f in 0..nf {
                    mv[f] = a[f] * gram.mu_sq + b[f] * mu_xi;
                    xv[f] = a[f] * mu_xi + b[f] * xi_sq;
                }
                let SpanCoeffs { mu_coef, xi_coef, .. } = &mut out;
                accumulate_hvp(cache.example(i), dataset.y(i), m, &mv, &xv, scale, mu_coef, |f, c| {
                    xi_coef[f * n + i] += c
                });
            }
        }
        RegMode::Fgr(lambda) if lambda != 0.0 => {
            let gram = dataset.basis_gram();
            let scale = lambda * inv_n;
            let full = out.clone();
            let mv: Vec<f64> = (0..nf)
                .map(|f| {
                    full.mu_coef[f] * gram.mu_sq
                        + (0..n).map(|k| full.xi_coef[f * n + k] * gram.mu_xi[k]).sum::<f64>()
                })
                .collect();
            let mut xv = vec![0.0; nf];
            for i in 0..n {
                for f in 0..nf {
                    xv[f] = full.mu_coef[f] * gram.mu_xi[i]
                        + (0..n).map(|k| full.xi_coef[f * n + k] * gram.xi_dot(i, k)).sum::<f64>();
                }
                let SpanCoeffs { mu_coef, xi_coef, .. } = &mut out;
                accumulate_hvp(cache.example(i), dataset.y(i), m, &mv, &xv, scale, mu_coef, |f, c| {
                    xi_coef[f * n + i] += c
                });
            }
        }
        _ => {}
    }
    out
}

/// Gradient of the chosen objective at the iterate `cache` was computed for.
pub fn objective_grad_cached(dataset: &Dataset, cache: &PerExampleCache, mode: RegMode) -> GradientBundle {
    objective_coeffs(dataset, cache, mode).materialize(dataset)
}

/// Exact gradient of the standard, PEGR or FGR objective.
pub fn objective_grad(params: &ModelParams, dataset: &Dataset, mode: RegMode) -> Result<GradientBundle> {
    mode.validate()?;
    let cache = PerExampleCache::compute(params, dataset)?;
    Ok(objective_grad_cached(dataset, &cache, mode))
}

/// One PEGR descent step from the closed-form update rule.
///
/// For each filter `(j, r)`:
///
/// ```text
/// w <- w - (2 eta / n m) sum_i l'_i (1 + 4 lambda zeta_i l''_i / m^2) j y_i (relu(<w, y_i mu>) y_i mu + relu(<w, xi_i>) xi_i)
///        - (4 lambda eta / n m^2) sum_i l'_i^2 (relu(<w, y_i mu>) |mu|^2 y_i mu + relu(<w, xi_i>) |xi_i|^2 xi_i)
/// ```
///
/// Exact only when every `xi_i` is orthogonal to `mu`.
pub fn pegr_step_closed_form(params: &ModelParams, dataset: &Dataset, lambda: f64, eta: f64) -> Result<ModelParams> {
    let cache = PerExampleCache::compute(params, dataset)?;
    pegr_step_closed_form_cached(params, dataset, &cache, lambda, eta)
}

pub fn pegr_step_closed_form_cached(
    params: &ModelParams,
    dataset: &Dataset,
    cache: &PerExampleCache,
    lambda: f64,
    eta: f64,
) -> Result<ModelParams> {
    if dataset.max_signal_noise_cosine() > ORTHOGONALITY_TOL {
        return Err(Error::NonOrthogonal { cosine: dataset.max_signal_noise_cosine() });
    }
    RegMode::Pegr(lambda).validate()?;
    let n = dataset.n() as f64;
    let m = params.m() as f64;
    let mu = dataset.spec().mu();
    let mu_sq = dataset.spec().mu_norm_sq();
    let loss_coef = 2.0 * eta / (n * m);
    let penalty_coef = 4.0 * lambda * eta / (n * m * m);

    let mut next = params.clone();
    for f in 0..params.num_filters() {
        let j = params.side_of(f).sign();
        let mut c_mu = 0.0;
        let row = next.filter_at_mut(f);
        for (i, ex) in cache.examples().iter().enumerate() {
            let y = dataset.y(i);
            let lp = ex.stats.lp;
            let boost = 1.0 + 4.0 * lambda * ex.zeta * ex.stats.lpp / (m * m);
            let s = ex.signal_pre[f].max(0.0);
            let u = ex.noise_pre[f].max(0.0);
            c_mu += loss_coef * lp * boost * j * y * s * y + penalty_coef * lp * lp * s * mu_sq * y;
            let c_xi = loss_coef * lp * boost * j * y * u + penalty_coef * lp * lp * u * dataset.xi_norm_sq(i);
            axpy(-c_xi, dataset.xi(i), row);
        }
        axpy(-c_mu, mu, row);
    }
    Ok(next)
}

/// Empirical loss and penalty at one iterate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub train_loss: f64,
    pub penalty: f64,
}

impl ObjectiveValue {
    pub fn total(&self) -> f64 {
        self.train_loss + self.penalty
    }
}

pub fn objective_value_cached(dataset: &Dataset, cache: &PerExampleCache, mode: RegMode) -> ObjectiveValue {
    let train_loss = cache.mean_loss();
    let m = cache.m();
    let n = dataset.n();
    let penalty = match mode {
        RegMode::Pegr(lambda) if lambda != 0.0 => {
            let sum: f64 = (0..n)
                .map(|i| {
                    let (a, b) = example_grad_coeffs(cache.example(i), dataset.y(i), m);
                    pair_to_bundle(dataset, i, m, &a, &b).norm_sq()
                })
                .sum();
            lambda / (2.0 * n as f64) * sum
        }
        RegMode::Fgr(lambda) if lambda != 0.0 => {
            let g = objective_grad_cached(dataset, cache, RegMode::Standard);
            lambda / 2.0 * g.norm_sq()
        }
        _ => 0.0,
    };
    ObjectiveValue { train_loss, penalty }
}

pub fn objective_value(params: &ModelParams, dataset: &Dataset, mode: RegMode) -> Result<ObjectiveValue> {
    mode.validate()?;
    let cache = PerExampleCache::compute(params, dataset)?;
    Ok(objective_value_cached(dataset, &cache, mode))
}
