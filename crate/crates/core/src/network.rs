//! Two-layer CNN with squared-ReLU activation.
//!
//! `f(W, x) = F_{+1}(W_{+1}, x) - F_{-1}(W_{-1}, x)` where
//! `F_j = (1/m) sum_r [sigma(<w_{j,r}, x1>) + sigma(<w_{j,r}, x2>)]` and
//! `sigma(z) = max(0, z)^2`. The second layer is fixed at `±1/m`.
//!
//! Filters are stored as one flat vector: the `m x d` block for `j = +1`
//! followed by the block for `j = -1`. Flat filter index `f = side * m + r`.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::data_model::{fmt_real, parse_err, parse_field, parse_reals, write_row, Dataset};
use crate::linalg::dot;
use crate::{Error, Result};

/// The activation exponent. Only squared ReLU is supported.
pub const ACTIVATION_EXPONENT: u32 = 2;

/// Sign of the fixed second-layer weight of a filter bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Pos,
    Neg,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Pos, Side::Neg];

    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Side::Pos => 1.0,
            Side::Neg => -1.0,
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Side::Pos => 0,
            Side::Neg => 1,
        }
    }
}

/// `max(0, z)^2`
#[inline]
pub fn activation(z: f64) -> f64 {
    if z > 0.0 {
        z * z
    } else {
        0.0
    }
}

/// `2 max(0, z)`, taken as 0 at the kink.
#[inline]
pub fn activation_prime(z: f64) -> f64 {
    if z > 0.0 {
        2.0 * z
    } else {
        0.0
    }
}

/// `2 * 1{z > 0}`, taken as 0 at the kink.
#[inline]
pub fn activation_second(z: f64) -> f64 {
    if z > 0.0 {
        2.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    m: usize,
    d: usize,
    sigma_0: f64,
    seed: u64,
    w: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(m: usize, d: usize) -> Self {
        Self { m, d, sigma_0: 0.0, seed: 0, w: vec![0.0; 2 * m * d] }
    }

    /// Wraps an explicit flat filter vector (`+1` block first).
    pub fn from_flat(m: usize, d: usize, w: Vec<f64>) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::InvalidArgument("width and dimension must be positive".into()));
        }
        if w.len() != 2 * m * d {
            return Err(Error::DimensionMismatch { expected: 2 * m * d, found: w.len() });
        }
        Ok(Self { m, d, sigma_0: 0.0, seed: 0, w })
    }

    /// Every entry i.i.d. `N(0, sigma_0^2)`, deterministic in `seed`.
    pub fn init_gaussian(m: usize, d: usize, sigma_0: f64, seed: u64) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::InvalidArgument("width and dimension must be positive".into()));
        }
        if !(sigma_0 > 0.0 && sigma_0.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma_0 must be positive, got {sigma_0}")));
        }
        let normal = Normal::new(0.0, sigma_0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let w = (0..2 * m * d).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self { m, d, sigma_0, seed, w })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn q(&self) -> u32 {
        ACTIVATION_EXPONENT
    }

    pub fn sigma_0(&self) -> f64 {
        self.sigma_0
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_filters(&self) -> usize {
        2 * self.m
    }

    /// Side of flat filter index `f`.
    #[inline]
    pub fn side_of(&self, f: usize) -> Side {
        if f < self.m {
            Side::Pos
        } else {
            Side::Neg
        }
    }

    #[inline]
    pub fn filter_index(&self, side: Side, r: usize) -> usize {
        side.index() * self.m + r
    }

    #[inline]
    pub fn filter(&self, side: Side, r: usize) -> &[f64] {
        self.filter_at(self.filter_index(side, r))
    }

    #[inline]
    pub fn filter_at(&self, f: usize) -> &[f64] {
        &self.w[f * self.d..(f + 1) * self.d]
    }

    #[inline]
    pub fn filter_at_mut(&mut self, f: usize) -> &mut [f64] {
        &mut self.w[f * self.d..(f + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.w
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.w, &self.w).sqrt()
    }

    /// Checkpoint text: header `m d sigma_0 seed q`, then `2m` rows of `d`
    /// reals (`+1` bank first). Round-trips bit-exactly.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{} {} {} {} {}", self.m, self.d, fmt_real(self.sigma_0), self.seed, self.q())?;
        for f in 0..self.num_filters() {
            write_row(&mut out, self.filter_at(f))?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| parse_err(1, "missing header"))??;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(parse_err(1, "header must be `m d sigma_0 seed q`"));
        }
        let m: usize = parse_field(1, fields[0], "m")?;
        let d: usize = parse_field(1, fields[1], "d")?;
        let sigma_0: f64 = parse_field(1, fields[2], "sigma_0")?;
        let seed: u64 = parse_field(1, fields[3], "seed")?;
        let q: u32 = parse_field(1, fields[4], "q")?;
        if q != ACTIVATION_EXPONENT {
            return Err(parse_err(1, &format!("unsupported activation exponent {q}")));
        }
        let mut w = Vec::with_capacity(2 * m * d);
        for f in 0..2 * m {
            let ln = f + 2;
            let line = lines.next().ok_or_else(|| parse_err(ln, "missing filter row"))??;
            let row = parse_reals(ln, &line)?;
            if row.len() != d {
                return Err(parse_err(ln, &format!("expected {d} entries, found {}", row.len())));
            }
            w.extend(row);
        }
        let mut params = Self::from_flat(m, d, w)?;
        params.sigma_0 = sigma_0;
        params.seed = seed;
        Ok(params)
    }
}

fn check_dim(params: &ModelParams, x: &[f64]) -> Result<()> {
    if x.len() != params.d {
        return Err(Error::DimensionMismatch { expected: params.d, found: x.len() });
    }
    Ok(())
}

/// `F_j(W_j, x)` for an explicit pair of patches.
pub fn forward_side(params: &ModelParams, x1: &[f64], x2: &[f64], side: Side) -> Result<f64> {
    check_dim(params, x1)?;
    check_dim(params, x2)?;
    let total: f64 = (0..params.m)
        .map(|r| {
            let w = params.filter(side, r);
            activation(dot(w, x1)) + activation(dot(w, x2))
        })
        .sum();
    Ok(total / params.m as f64)
}

/// `f(W, x) = F_{+1} - F_{-1}`.
pub fn forward(params: &ModelParams, x1: &[f64], x2: &[f64]) -> Result<f64> {
    Ok(forward_side(params, x1, x2, Side::Pos)? - forward_side(params, x1, x2, Side::Neg)?)
}

/// Network output on point `i` of a dataset, using `<w, y mu> = y <w, mu>`.
pub fn forward_example(params: &ModelParams, dataset: &Dataset, i: usize) -> Result<f64> {
    if dataset.d() != params.d {
        return Err(Error::DimensionMismatch { expected: params.d, found: dataset.d() });
    }
    let y = dataset.y(i);
    let mu = dataset.spec().mu();
    let xi = dataset.xi(i);
    let m = params.m as f64;
    let out = (0..params.num_filters())
        .map(|f| {
            let w = params.filter_at(f);
            params.side_of(f).sign() * (activation(y * dot(w, mu)) + activation(dot(w, xi)))
        })
        .sum::<f64>();
    Ok(out / m)
}
