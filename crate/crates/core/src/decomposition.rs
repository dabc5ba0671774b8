//! Signal-noise decomposition of the filter displacements.
//!
//! Every filter moves inside `span{mu, xi_1, .., xi_n}`:
//!
//! ```text
//! w_{j,r}(t) = w_{j,r}(0) + j gamma_{j,r} mu / |mu|^2 + sum_i rho_{j,r,i} xi_i / |xi_i|^2
//! ```
//!
//! The coefficients are obtained either by projecting `W(t) - W(0)` onto the
//! span (a Cholesky solve against the raw Gram matrix) or by advancing them
//! alongside the optimizer.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::data_model::Dataset;
use crate::gradient::{PerExampleCache, SpanCoeffs};
use crate::linalg::{axpy, dot, norm_sq};
use crate::network::ModelParams;
use crate::{Error, Result};

/// Factorized Gram matrix of `{mu, xi_1, .., xi_n}`.
#[derive(Clone, Debug)]
pub struct DecompositionBasis {
    n: usize,
    mu_sq: f64,
    xi_sq: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl DecompositionBasis {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let n = dataset.n();
        let g = dataset.basis_gram();
        let gram = DMatrix::from_fn(n + 1, n + 1, |a, b| match (a, b) {
            (0, 0) => g.mu_sq,
            (0, k) | (k, 0) => g.mu_xi[k - 1],
            (a, b) => g.xi_dot(a - 1, b - 1),
        });
        let chol = Cholesky::new(gram).ok_or(Error::SingularGram)?;
        // A numerically singular basis can still factor; reject it explicitly.
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        if !(lo > 1e-7 * hi) {
            return Err(Error::SingularGram);
        }
        Ok(Self { n, mu_sq: g.mu_sq, xi_sq: (0..n).map(|i| g.xi_dot(i, i)).collect(), chol })
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// `gamma` per filter and `rho` per (filter, example), flat filter indexing.
#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionState {
    m: usize,
    n: usize,
    gamma: Vec<f64>,
    rho: Vec<f64>,
    labels: Vec<f64>,
    /// Frobenius norm of the part of `W(t) - W(0)` outside the span.
    pub residual: f64,
    /// `|W(t) - W(0)|_F`.
    pub displacement: f64,
}

impl DecompositionState {
    pub fn zeros(m: usize, dataset: &Dataset) -> Self {
        let n = dataset.n();
        Self {
            m,
            n,
            gamma: vec![0.0; 2 * m],
            rho: vec![0.0; 2 * m * n],
            labels: (0..n).map(|i| dataset.y(i)).collect(),
            residual: 0.0,
            displacement: 0.0,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn side_sign(&self, f: usize) -> f64 {
        if f < self.m {
            1.0
        } else {
            -1.0
        }
    }

    pub fn gamma(&self, f: usize) -> f64 {
        self.gamma[f]
    }

    pub fn rho(&self, f: usize, i: usize) -> f64 {
        self.rho[f * self.n + i]
    }

    /// `rho * 1{j = y_i}`
    pub fn rho_bar(&self, f: usize, i: usize) -> f64 {
        if self.side_sign(f) == self.labels[i] {
            self.rho(f, i)
        } else {
            0.0
        }
    }

    /// `rho * 1{j != y_i}`
    pub fn rho_under(&self, f: usize, i: usize) -> f64 {
        if self.side_sign(f) != self.labels[i] {
            self.rho(f, i)
        } else {
            0.0
        }
    }

    pub fn gamma_max(&self) -> f64 {
        self.gamma.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn gamma_min(&self) -> f64 {
        self.gamma.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..2 * self.m).flat_map(move |f| (0..self.n).map(move |i| (f, i)))
    }

    /// Max of `rho` over matching pairs (`j = y_i`).
    pub fn rho_bar_max(&self) -> f64 {
        self.pairs()
            .filter(|&(f, i)| self.side_sign(f) == self.labels[i])
            .map(|(f, i)| self.rho(f, i))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Min of `rho` over matching pairs.
    pub fn rho_bar_min(&self) -> f64 {
        self.pairs()
            .filter(|&(f, i)| self.side_sign(f) == self.labels[i])
            .map(|(f, i)| self.rho(f, i))
            .fold(f64::INFINITY, f64::min)
    }

    /// Min of `rho` over mismatching pairs (`j != y_i`).
    pub fn rho_under_min(&self) -> f64 {
        self.pairs()
            .filter(|&(f, i)| self.side_sign(f) != self.labels[i])
            .map(|(f, i)| self.rho(f, i))
            .fold(f64::INFINITY, f64::min)
    }

    /// `residual / displacement`, 0 when nothing has moved.
    pub fn relative_residual(&self) -> f64 {
        if self.displacement > 0.0 {
            self.residual / self.displacement
        } else {
            self.residual
        }
    }

    /// Largest absolute coefficient difference.
    pub fn max_abs_diff(&self, other: &DecompositionState) -> f64 {
        assert_eq!((self.m, self.n), (other.m, other.n), "state shapes differ");
        self.gamma
            .iter()
            .zip(&other.gamma)
            .chain(self.rho.iter().zip(&other.rho))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check(&self, m: usize, n: usize) -> Result<()> {
        if self.m != m {
            return Err(Error::DimensionMismatch { expected: self.m, found: m });
        }
        if self.n != n {
            return Err(Error::DimensionMismatch { expected: self.n, found: n });
        }
        Ok(())
    }

    /// One step of the coefficient recurrence.
    ///
    /// With `s = <w, y_i mu>`, `u = <w, xi_i>` at the current iterate and
    /// `c_i = 4 lambda zeta_i l''_i / m^2`:
    ///
    /// ```text
    /// gamma += -(2 eta / n m) sum_i [l'_i (1 + c_i) relu(s) |mu|^2 + (2 lambda / m) l'_i^2 relu(s) |mu|^4 j y_i]
    /// rho_i += -(2 eta / n m) [l'_i (1 + c_i) relu(u) |xi_i|^2 j y_i + (2 lambda / m) l'_i^2 relu(u) |xi_i|^4]
    /// ```
    ///
    /// Exact for the PEGR and standard updates on orthogonal data. `cache`
    /// must be the one the optimizer used for the same step.
    pub fn step_recurrence(
        &mut self,
        cache: &PerExampleCache,
        dataset: &Dataset,
        lambda: f64,
        eta: f64,
    ) -> Result<()> {
        self.check(cache.m(), cache.len())?;
        let n = self.n as f64;
        let m = self.m as f64;
        let mu_sq = dataset.spec().mu_norm_sq();
        let base = -2.0 * eta / (n * m);
        for f in 0..2 * self.m {
            let j = self.side_sign(f);
            let mut dgamma = 0.0;
            for (i, ex) in cache.examples().iter().enumerate() {
                let y = self.labels[i];
                let lp = ex.stats.lp;
                let boost = 1.0 + 4.0 * lambda * ex.zeta * ex.stats.lpp / (m * m);
                let pen = 2.0 * lambda / m * lp * lp;
                let s = ex.signal_pre[f].max(0.0);
                let u = ex.noise_pre[f].max(0.0);
                dgamma += lp * boost * s * mu_sq + pen * s * mu_sq * mu_sq * j * y;
                let xi_sq = dataset.xi_norm_sq(i);
                self.rho[f * self.n + i] += base * (lp * boost * u * xi_sq * j * y + pen * u * xi_sq * xi_sq);
            }
            self.gamma[f] += base * dgamma;
        }
        Ok(())
    }

    /// Advance by the update `W <- W - eta * G` where `G` is given as span
    /// coefficients. Exact for any mode and any data.
    pub fn step_from_coeffs(&mut self, coeffs: &SpanCoeffs, dataset: &Dataset, eta: f64) -> Result<()> {
        self.check(self.m, dataset.n())?;
        let mu_sq = dataset.spec().mu_norm_sq();
        for f in 0..2 * self.m {
            let j = self.side_sign(f);
            self.gamma[f] -= eta * j * coeffs.mu_coef(f) * mu_sq;
            for i in 0..self.n {
                self.rho[f * self.n + i] -= eta * coeffs.xi_coef(f, i) * dataset.xi_norm_sq(i);
            }
        }
        Ok(())
    }
}

/// Project `W(t) - W(0)` onto the span and read off the coefficients.
pub fn solve_direct(
    params_t: &ModelParams,
    params_0: &ModelParams,
    dataset: &Dataset,
    basis: &DecompositionBasis,
) -> Result<DecompositionState> {
    if params_t.m() != params_0.m() || params_t.d() != params_0.d() {
        return Err(Error::DimensionMismatch {
            expected: params_0.as_slice().len(),
            found: params_t.as_slice().len(),
        });
    }
    if params_t.d() != dataset.d() {
        return Err(Error::DimensionMismatch { expected: dataset.d(), found: params_t.d() });
    }
    if basis.n != dataset.n() {
        return Err(Error::DimensionMismatch { expected: dataset.n(), found: basis.n });
    }
    let m = params_t.m();
    let n = dataset.n();
    let d = dataset.d();
    let mu = dataset.spec().mu();
    let mut state = DecompositionState::zeros(m, dataset);
    let mut residual_sq = 0.0;
    let mut displacement_sq = 0.0;
    let mut delta = vec![0.0; d];
    for f in 0..2 * m {
        let (wt, w0) = (params_t.filter_at(f), params_0.filter_at(f));
        for k in 0..d {
            delta[k] = wt[k] - w0[k];
        }
        displacement_sq += norm_sq(&delta);
        let mut rhs = DVector::zeros(n + 1);
        rhs[0] = dot(mu, &delta);
        for i in 0..n {
            rhs[i + 1] = dot(dataset.xi(i), &delta);
        }
        let c = basis.chol.solve(&rhs);
        let j = state.side_sign(f);
        state.gamma[f] = j * c[0] * basis.mu_sq;
        for i in 0..n {
            state.rho[f * n + i] = c[i + 1] * basis.xi_sq[i];
        }
        axpy(-c[0], mu, &mut delta);
        for i in 0..n {
            axpy(-c[i + 1], dataset.xi(i), &mut delta);
        }
        residual_sq += norm_sq(&delta);
    }
    state.residual = residual_sq.sqrt();
    state.displacement = displacement_sq.sqrt();
    Ok(state)
}

/// Signed coefficient movements between two states.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MonotonicityReport {
    /// Whether the sign pattern is guaranteed (unregularized step).
    pub enforced: bool,
    pub gamma_decreases: usize,
    pub rho_bar_decreases: usize,
    pub rho_under_increases: usize,
    /// Most negative gamma / rho_bar movement and most positive rho_under movement.
    pub worst_gamma: f64,
    pub worst_rho_bar: f64,
    pub worst_rho_under: f64,
    /// Count of rho_bar entries that moved down (regardless of `enforced`).
    pub rho_bar_down_moves: usize,
    pub rho_bar_moves: usize,
}

impl MonotonicityReport {
    /// Violations of the sign pattern; always 0 when not enforced.
    pub fn violations(&self) -> usize {
        if self.enforced {
            self.gamma_decreases + self.rho_bar_decreases + self.rho_under_increases
        } else {
            0
        }
    }

    pub fn is_empty(&self) -> bool {
        self.gamma_decreases == 0 && self.rho_bar_decreases == 0 && self.rho_under_increases == 0 && self.rho_bar_moves == 0
    }
}

pub fn monotonicity_report(prev: &DecompositionState, next: &DecompositionState, lambda: f64) -> MonotonicityReport {
    assert_eq!((prev.m, prev.n), (next.m, next.n), "state shapes differ");
    let mut rep = MonotonicityReport { enforced: lambda == 0.0, ..Default::default() };
    for f in 0..2 * prev.m {
        let dg = next.gamma[f] - prev.gamma[f];
        if dg < 0.0 {
            rep.gamma_decreases += 1;
            rep.worst_gamma = rep.worst_gamma.min(dg);
        }
        for i in 0..prev.n {
            let dr = next.rho(f, i) - prev.rho(f, i);
            if prev.side_sign(f) == prev.labels[i] {
                if dr != 0.0 {
                    rep.rho_bar_moves += 1;
                }
                if dr < 0.0 {
                    rep.rho_bar_decreases += 1;
                    rep.rho_bar_down_moves += 1;
                    rep.worst_rho_bar = rep.worst_rho_bar.min(dr);
                }
            } else if dr > 0.0 {
                rep.rho_under_increases += 1;
                rep.worst_rho_under = rep.worst_rho_under.max(dr);
            }
        }
    }
    rep
}

/// Counts of coefficients outside the envelope
/// `0 <= gamma, rho_bar <= 4 log T*`, `rho_under >= -4 log T*`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BoundReport {
    pub gamma_below_zero: usize,
    pub gamma_above: usize,
    pub rho_bar_below_zero: usize,
    pub rho_bar_above: usize,
    pub rho_under_below: usize,
}

impl BoundReport {
    pub fn total(&self) -> usize {
        self.gamma_below_zero + self.gamma_above + self.rho_bar_below_zero + self.rho_bar_above + self.rho_under_below
    }
}

pub fn check_bounds(state: &DecompositionState, t_star: f64) -> BoundReport {
    let cap = 4.0 * t_star.ln();
    let mut rep = BoundReport::default();
    for f in 0..2 * state.m {
        let g = state.gamma[f];
        rep.gamma_below_zero += (g < 0.0) as usize;
        rep.gamma_above += (g > cap) as usize;
        for i in 0..state.n {
            let r = state.rho(f, i);
            if state.side_sign(f) == state.labels[i] {
                rep.rho_bar_below_zero += (r < 0.0) as usize;
                rep.rho_bar_above += (r > cap) as usize;
            } else {
                rep.rho_under_below += (r < -cap) as usize;
            }
        }
    }
    rep
}
