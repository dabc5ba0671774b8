//! Finite-difference checks for the analytic gradients.

use crate::data_model::{generate_dataset, Dataset, SignalNoiseSpec};
use crate::gradient::GradientBundle;
use crate::linalg::{dot, norm_sq};
use crate::network::ModelParams;
use crate::seeds::derive_seed;

/// Central-difference gradient of `f` at `params`, one coordinate at a time.
pub fn central_difference_gradient<F>(params: &ModelParams, h: f64, f: F) -> GradientBundle
where
    F: Fn(&ModelParams) -> f64,
{
    let mut out = GradientBundle::zeros_like(params);
    let mut probe = params.clone();
    for k in 0..params.as_slice().len() {
        let orig = params.as_slice()[k];
        probe.as_mut_slice()[k] = orig + h;
        let plus = f(&probe);
        probe.as_mut_slice()[k] = orig - h;
        let minus = f(&probe);
        probe.as_mut_slice()[k] = orig;
        out.as_mut_slice()[k] = (plus - minus) / (2.0 * h);
    }
    out
}

/// `(f(W + h v) - f(W - h v)) / 2h`
pub fn directional_derivative<F>(params: &ModelParams, dir: &GradientBundle, h: f64, f: F) -> f64
where
    F: Fn(&ModelParams) -> f64,
{
    let plus = dir.descend(params, -h);
    let minus = dir.descend(params, h);
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|)`, or the absolute difference when both are tiny.
pub fn relative_error(a: &GradientBundle, b: &GradientBundle) -> f64 {
    let diff: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum();
    let scale = a.norm_sq().max(b.norm_sq()).sqrt();
    if scale < 1e-300 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}

/// Smallest `|<w_f, x>|` over every filter and every patch of the dataset.
pub fn kink_margin(params: &ModelParams, dataset: &Dataset) -> f64 {
    let mu = dataset.spec().mu();
    let mut margin = f64::INFINITY;
    for f in 0..params.num_filters() {
        let w = params.filter_at(f);
        margin = margin.min(dot(w, mu).abs());
        for i in 0..dataset.n() {
            margin = margin.min(dot(w, dataset.xi(i)).abs());
        }
    }
    margin
}

/// True when no pre-activation can cross zero under a coordinate or unit
/// directional perturbation of size `h`, with a factor-10 cushion.
pub fn passes_kink_guard(params: &ModelParams, dataset: &Dataset, h: f64) -> bool {
    let max_patch = (0..dataset.n())
        .map(|i| dataset.xi_norm_sq(i))
        .fold(dataset.spec().mu_norm_sq(), f64::max)
        .sqrt();
    kink_margin(params, dataset) > 10.0 * h * max_patch
}

/// A random `(params, dataset)` pair with pre-activations of order one that
/// passes the kink guard at `h = 1e-5`. Deterministic in `seed`.
pub fn random_instance(d: usize, n: usize, m: usize, sigma_p: f64, seed: u64) -> (ModelParams, Dataset) {
    let spec = SignalNoiseSpec::axis_aligned(d, 1.0, sigma_p).expect("valid instance spec");
    // Scale so both kinds of pre-activation are O(1).
    let sigma_0 = 1.0 / (1.0 + sigma_p * (d as f64).sqrt()) * 2.0;
    for attempt in 0..10_000u64 {
        let s = derive_seed(seed, attempt);
        let dataset = generate_dataset(&spec, n, derive_seed(s, 0)).expect("valid dataset");
        let params = ModelParams::init_gaussian(m, d, sigma_0, derive_seed(s, 1)).expect("valid init");
        if passes_kink_guard(&params, &dataset, 1e-5) {
            return (params, dataset);
        }
    }
    panic!("no kink-free instance found for seed {seed}");
}

/// Frobenius distance between two parameter sets relative to the second.
pub fn relative_param_distance(a: &ModelParams, b: &ModelParams) -> f64 {
    let diff: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum();
    let scale = norm_sq(b.as_slice()).sqrt();
    if scale < 1e-300 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}
