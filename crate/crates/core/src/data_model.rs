//! Signal-noise data.
//!
//! Every example carries two patches of dimension `d`. One patch is `y * mu`
//! (the signal), the other is a noise vector drawn from
//! `N(0, sigma_p^2 (I - mu mu^T / |mu|^2))`, so noise is orthogonal to `mu`.
//! Which patch holds the signal is drawn uniformly and recorded.
//!
//! Randomness comes from ChaCha20: example `i` of a dataset with seed `s` is
//! drawn from stream `i` of the generator keyed by `s`, so a dataset is
//! reproducible regardless of generation order.

use std::io::{BufRead, Write};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::linalg::{dot, norm_sq};
use crate::{Error, Result};

/// Relative tolerance on `|<mu, xi>| / (|mu| |xi|)` for a point to count as
/// signal-orthogonal.
pub const ORTHOGONALITY_TOL: f64 = 1e-10;

/// Distribution parameters: signal vector `mu` and noise scale `sigma_p`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalNoiseSpec {
    mu: Vec<f64>,
    mu_norm_sq: f64,
    sigma_p: f64,
}

impl SignalNoiseSpec {
    pub fn new(mu: Vec<f64>, sigma_p: f64) -> Result<Self> {
        if mu.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "patch dimension must be at least 2, got {}",
                mu.len()
            )));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("signal vector must be finite".into()));
        }
        let mu_norm_sq = norm_sq(&mu);
        if mu_norm_sq <= 0.0 {
            return Err(Error::InvalidArgument("signal vector must be non-zero".into()));
        }
        if !(sigma_p > 0.0 && sigma_p.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma_p must be positive, got {sigma_p}"
            )));
        }
        Ok(Self { mu, mu_norm_sq, sigma_p })
    }

    /// Signal `mu_norm * e_1`. The model is rotation invariant, so the
    /// direction of `mu` is immaterial.
    pub fn axis_aligned(d: usize, mu_norm: f64, sigma_p: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("patch dimension must be at least 2, got 0".into()));
        }
        let mut mu = vec![0.0; d];
        mu[0] = mu_norm;
        Self::new(mu, sigma_p)
    }

    pub fn d(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn mu_norm_sq(&self) -> f64 {
        self.mu_norm_sq
    }

    pub fn mu_norm(&self) -> f64 {
        self.mu_norm_sq.sqrt()
    }

    pub fn sigma_p(&self) -> f64 {
        self.sigma_p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Pos,
    Neg,
}

impl Label {
    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Label::Pos => 1.0,
            Label::Neg => -1.0,
        }
    }

    pub fn from_sign(v: i64) -> Option<Self> {
        match v {
            1 => Some(Label::Pos),
            -1 => Some(Label::Neg),
            _ => None,
        }
    }
}

/// Which of the two patches holds `y * mu`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SignalSlot {
    First,
    Second,
}

impl SignalSlot {
    fn code(self) -> u8 {
        match self {
            SignalSlot::First => 1,
            SignalSlot::Second => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataPoint {
    pub label: Label,
    pub signal_slot: SignalSlot,
    /// Row of the dataset's noise store holding this point's noise patch.
    pub noise_index: usize,
}

/// Inner products among the raw basis `{mu, xi_1, .., xi_n}`.
#[derive(Clone, Debug)]
pub struct BasisGram {
    n: usize,
    pub mu_sq: f64,
    /// `<mu, xi_i>`
    pub mu_xi: Vec<f64>,
    /// Row-major `n x n`, `<xi_i, xi_k>`.
    pub xi_xi: Vec<f64>,
}

impl BasisGram {
    #[inline]
    pub fn xi_dot(&self, i: usize, k: usize) -> f64 {
        self.xi_xi[i * self.n + k]
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// An immutable training set or test stream.
#[derive(Debug)]
pub struct Dataset {
    spec: SignalNoiseSpec,
    points: Vec<DataPoint>,
    xi: Vec<f64>,
    xi_norm_sq: Vec<f64>,
    seed: u64,
    max_cosine: f64,
    gram: OnceLock<BasisGram>,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            points: self.points.clone(),
            xi: self.xi.clone(),
            xi_norm_sq: self.xi_norm_sq.clone(),
            seed: self.seed,
            max_cosine: self.max_cosine,
            gram: OnceLock::new(),
        }
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.points == other.points
            && self.seed == other.seed
            && self.xi.len() == other.xi.len()
            && self.xi.iter().zip(&other.xi).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Draws one noise vector: `sigma_p * (z - (<z, mu> / |mu|^2) mu)` with `z`
/// standard normal.
pub fn sample_noise<R: Rng + ?Sized>(spec: &SignalNoiseSpec, rng: &mut R) -> Vec<f64> {
    let mut z: Vec<f64> = (0..spec.d()).map(|_| rng.sample(StandardNormal)).collect();
    let c = dot(&z, &spec.mu) / spec.mu_norm_sq;
    for (zi, mi) in z.iter_mut().zip(&spec.mu) {
        *zi = spec.sigma_p * (*zi - c * mi);
    }
    z
}

fn point_rng(seed: u64, index: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn draw_points(spec: &SignalNoiseSpec, count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidArgument("need at least one data point".into()));
    }
    let d = spec.d();
    let mut points = Vec::with_capacity(count);
    let mut xi = Vec::with_capacity(count * d);
    for i in 0..count {
        let mut rng = point_rng(seed, i);
        let label = if rng.random::<bool>() { Label::Pos } else { Label::Neg };
        let signal_slot = if rng.random::<bool>() {
            SignalSlot::First
        } else {
            SignalSlot::Second
        };
        xi.extend(sample_noise(spec, &mut rng));
        points.push(DataPoint { label, signal_slot, noise_index: i });
    }
    Dataset::assemble(spec.clone(), points, xi, seed)
}

/// `n` i.i.d. training examples.
pub fn generate_dataset(spec: &SignalNoiseSpec, n: usize, seed: u64) -> Result<Dataset> {
    draw_points(spec, n, seed)
}

/// Fresh examples from the same law, used for test-error estimation.
pub fn generate_test_stream(spec: &SignalNoiseSpec, count: usize, seed: u64) -> Result<Dataset> {
    draw_points(spec, count, seed)
}

impl Dataset {
    /// Builds a dataset from explicit labels, slots and noise rows (row `i`
    /// belongs to point `i`). Rejects noise that is not orthogonal to `mu`.
    pub fn from_parts(
        spec: SignalNoiseSpec,
        labels: &[Label],
        slots: &[SignalSlot],
        xi_rows: &[Vec<f64>],
        seed: u64,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if slots.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: slots.len() });
        }
        if xi_rows.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: xi_rows.len() });
        }
        let d = spec.d();
        let mut xi = Vec::with_capacity(n * d);
        for row in xi_rows {
            if row.len() != d {
                return Err(Error::DimensionMismatch { expected: d, found: row.len() });
            }
            xi.extend_from_slice(row);
        }
        let points = labels
            .iter()
            .zip(slots)
            .enumerate()
            .map(|(i, (&label, &signal_slot))| DataPoint { label, signal_slot, noise_index: i })
            .collect();
        Self::assemble(spec, points, xi, seed)
    }

    fn assemble(spec: SignalNoiseSpec, points: Vec<DataPoint>, xi: Vec<f64>, seed: u64) -> Result<Self> {
        let d = spec.d();
        let mu_norm = spec.mu_norm();
        let mut xi_norm_sq = Vec::with_capacity(points.len());
        let mut max_cosine: f64 = 0.0;
        for row in xi.chunks_exact(d) {
            let nsq = norm_sq(row);
            if nsq > 0.0 {
                let cos = dot(row, spec.mu()).abs() / (mu_norm * nsq.sqrt());
                max_cosine = max_cosine.max(cos);
            }
            xi_norm_sq.push(nsq);
        }
        if !(max_cosine <= ORTHOGONALITY_TOL) {
            return Err(Error::NonOrthogonal { cosine: max_cosine });
        }
        Ok(Self { spec, points, xi, xi_norm_sq, seed, max_cosine, gram: OnceLock::new() })
    }

    pub fn spec(&self) -> &SignalNoiseSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn d(&self) -> usize {
        self.spec.d()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn points(&self) -> &[DataPoint] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &DataPoint {
        &self.points[i]
    }

    /// `y_i` as `±1.0`.
    #[inline]
    pub fn y(&self, i: usize) -> f64 {
        self.points[i].label.sign()
    }

    /// Noise patch of point `i`.
    #[inline]
    pub fn xi(&self, i: usize) -> &[f64] {
        let d = self.d();
        let row = self.points[i].noise_index;
        &self.xi[row * d..(row + 1) * d]
    }

    #[inline]
    pub fn xi_norm_sq(&self, i: usize) -> f64 {
        self.xi_norm_sq[self.points[i].noise_index]
    }

    /// Largest `|<mu, xi_i>| / (|mu| |xi_i|)` over the dataset, measured at
    /// construction.
    pub fn max_signal_noise_cosine(&self) -> f64 {
        self.max_cosine
    }

    /// The two patches of point `i` in storage order.
    pub fn patches(&self, i: usize) -> (Vec<f64>, Vec<f64>) {
        let y = self.y(i);
        let signal: Vec<f64> = self.spec.mu.iter().map(|v| y * v).collect();
        let noise = self.xi(i).to_vec();
        match self.points[i].signal_slot {
            SignalSlot::First => (signal, noise),
            SignalSlot::Second => (noise, signal),
        }
    }

    /// Gram data of `{mu, xi_1, .., xi_n}`, computed once on first use.
    pub fn basis_gram(&self) -> &BasisGram {
        self.gram.get_or_init(|| {
            let n = self.n();
            let mu_xi = (0..n).map(|i| dot(self.spec.mu(), self.xi(i))).collect();
            let mut xi_xi = vec![0.0; n * n];
            for i in 0..n {
                for k in 0..=i {
                    let v = if i == k { self.xi_norm_sq(i) } else { dot(self.xi(i), self.xi(k)) };
                    xi_xi[i * n + k] = v;
                    xi_xi[k * n + i] = v;
                }
            }
            BasisGram { n, mu_sq: self.spec.mu_norm_sq, mu_xi, xi_xi }
        })
    }

    /// Writes the text format: a `d n sigma_p seed` header, one line with `mu`,
    /// then one line per point holding `y slot xi_1 .. xi_d`. Reals use 17
    /// significant digits and reload bit-exactly.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{} {} {} {}", self.d(), self.n(), fmt_real(self.spec.sigma_p), self.seed)?;
        write_row(&mut out, self.spec.mu())?;
        for (i, p) in self.points.iter().enumerate() {
            let y = match p.label {
                Label::Pos => "1",
                Label::Neg => "-1",
            };
            write!(out, "{} {}", y, p.signal_slot.code())?;
            for v in self.xi(i) {
                write!(out, " {}", fmt_real(*v))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let mut next_line = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, line)) => Ok((i + 1, line?)),
                None => Err(Error::Parse { line: 0, message: format!("missing {what}") }),
            }
        };

        let (ln, header) = next_line("header")?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(parse_err(ln, "header must be `d n sigma_p seed`"));
        }
        let d: usize = parse_field(ln, fields[0], "d")?;
        let n: usize = parse_field(ln, fields[1], "n")?;
        let sigma_p: f64 = parse_field(ln, fields[2], "sigma_p")?;
        let seed: u64 = parse_field(ln, fields[3], "seed")?;

        let (ln, mu_line) = next_line("signal vector")?;
        let mu = parse_reals(ln, &mu_line)?;
        if mu.len() != d {
            return Err(parse_err(ln, &format!("expected {d} signal entries, found {}", mu.len())));
        }
        let spec = SignalNoiseSpec::new(mu, sigma_p).map_err(|e| parse_err(ln, &e.to_string()))?;

        let mut labels = Vec::with_capacity(n);
        let mut slots = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, line) = next_line("data point")?;
            let mut it = line.split_whitespace();
            let y: i64 = parse_field(ln, it.next().unwrap_or(""), "label")?;
            let label = Label::from_sign(y).ok_or_else(|| parse_err(ln, "label must be 1 or -1"))?;
            let slot = match it.next() {
                Some("1") => SignalSlot::First,
                Some("2") => SignalSlot::Second,
                _ => return Err(parse_err(ln, "slot must be 1 or 2")),
            };
            let row = it
                .map(|tok| parse_field::<f64>(ln, tok, "noise entry"))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != d {
                return Err(parse_err(ln, &format!("expected {d} noise entries, found {}", row.len())));
            }
            labels.push(label);
            slots.push(slot);
            rows.push(row);
        }
        Self::from_parts(spec, &labels, &slots, &rows, seed)
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub(crate) fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn write_row<W: Write>(out: &mut W, row: &[f64]) -> Result<()> {
    let line: Vec<String> = row.iter().map(|v| fmt_real(*v)).collect();
    writeln!(out, "{}", line.join(" "))?;
    Ok(())
}

pub(crate) fn parse_err(line: usize, message: &str) -> Error {
    Error::Parse { line, message: message.to_string() }
}

pub(crate) fn parse_field<T: std::str::FromStr>(line: usize, tok: &str, what: &str) -> Result<T> {
    tok.parse().map_err(|_| parse_err(line, &format!("invalid {what} `{tok}`")))
}

pub(crate) fn parse_reals(line: usize, text: &str) -> Result<Vec<f64>> {
    text.split_whitespace().map(|tok| parse_field(line, tok, "real")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(d: usize, sigma_p: f64) -> SignalNoiseSpec {
        SignalNoiseSpec::axis_aligned(d, 1.0, sigma_p).unwrap()
    }

    #[test]
    fn spec_rejects_degenerate_inputs() {
        assert!(SignalNoiseSpec::new(vec![1.0], 1.0).is_err());
        assert!(SignalNoiseSpec::new(vec![0.0, 0.0], 1.0).is_err());
        assert!(SignalNoiseSpec::new(vec![1.0, 0.0], 0.0).is_err());
        assert!(SignalNoiseSpec::new(vec![1.0, 0.0], -1.0).is_err());
        assert!(SignalNoiseSpec::new(vec![1.0, f64::NAN], 1.0).is_err());
    }

    #[test]
    fn noise_is_orthogonal_to_signal() {
        let s = SignalNoiseSpec::new((0..50).map(|k| (k as f64 * 0.37).sin()).collect(), 1.3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..200 {
            let xi = sample_noise(&s, &mut rng);
            let cos = dot(&xi, s.mu()) / (norm_sq(&xi).sqrt() * s.mu_norm());
            assert!(cos.abs() <= 1e-10, "cosine {cos}");
        }
    }

    #[test]
    fn mean_noise_energy_matches_projected_trace() {
        // E|xi|^2 = sigma_p^2 (d - 1)
        let s = spec(400, 1.0);
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let draws = 10_000;
        let mean: f64 = (0..draws).map(|_| norm_sq(&sample_noise(&s, &mut rng))).sum::<f64>() / draws as f64;
        assert!((mean - 399.0).abs() <= 0.03 * 399.0, "mean {mean}");
    }

    #[test]
    fn every_draw_sits_in_the_norm_band() {
        let s = spec(400, 1.0);
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for _ in 0..2_000 {
            let e = norm_sq(&sample_noise(&s, &mut rng));
            assert!((200.0..=600.0).contains(&e), "energy {e}");
        }
    }

    #[test]
    fn empirical_covariance_approaches_projection() {
        // Entrywise within 5 sigma_p^2 / sqrt(draws) of sigma_p^2 (I - mu mu^T / |mu|^2).
        let d = 4;
        let mu = vec![1.0, 2.0, 0.0, -1.0];
        let s = SignalNoiseSpec::new(mu.clone(), 0.7).unwrap();
        let mu_sq = norm_sq(&mu);
        let draws = 100_000;
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut cov = vec![0.0; d * d];
        for _ in 0..draws {
            let xi = sample_noise(&s, &mut rng);
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += xi[a] * xi[b];
                }
            }
        }
        let var = 0.7 * 0.7;
        let tol = 5.0 * var / (draws as f64).sqrt();
        for a in 0..d {
            for b in 0..d {
                let expect = var * (if a == b { 1.0 } else { 0.0 } - mu[a] * mu[b] / mu_sq);
                let got = cov[a * d + b] / draws as f64;
                assert!((got - expect).abs() <= tol, "({a},{b}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(30, 1.0);
        let a = generate_dataset(&s, 20, 99).unwrap();
        let b = generate_dataset(&s, 20, 99).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&s, 20, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn prefix_of_larger_dataset_is_identical() {
        // Streams are per point, so generation order does not matter.
        let s = spec(16, 0.5);
        let small = generate_dataset(&s, 5, 42).unwrap();
        let large = generate_dataset(&s, 9, 42).unwrap();
        for i in 0..5 {
            assert_eq!(small.point(i), large.point(i));
            assert_eq!(small.xi(i), large.xi(i));
        }
    }

    #[test]
    fn zero_points_rejected() {
        let s = spec(8, 1.0);
        assert!(generate_dataset(&s, 0, 1).is_err());
        assert!(generate_test_stream(&s, 0, 1).is_err());
    }

    #[test]
    fn exactly_one_patch_is_the_signal() {
        let s = spec(12, 1.0);
        let ds = generate_dataset(&s, 40, 8).unwrap();
        let mut slots = [0usize; 2];
        for i in 0..ds.n() {
            let (p1, p2) = ds.patches(i);
            let ymu: Vec<f64> = s.mu().iter().map(|v| ds.y(i) * v).collect();
            let (sig, noise) = match ds.point(i).signal_slot {
                SignalSlot::First => {
                    slots[0] += 1;
                    (p1, p2)
                }
                SignalSlot::Second => {
                    slots[1] += 1;
                    (p2, p1)
                }
            };
            assert_eq!(sig, ymu);
            assert_eq!(noise, ds.xi(i));
        }
        assert!(slots[0] > 0 && slots[1] > 0);
    }

    #[test]
    fn test_stream_seeds() {
        let s = spec(20, 1.0);
        let a = generate_test_stream(&s, 10_000, 1).unwrap();
        let a2 = generate_test_stream(&s, 10_000, 1).unwrap();
        let b = generate_test_stream(&s, 10_000, 2).unwrap();
        assert_eq!(a, a2);
        assert_ne!(a.xi(0), b.xi(0));
        let mean: f64 = (0..a.n()).map(|i| a.y(i)).sum::<f64>() / a.n() as f64;
        assert!(mean.abs() <= 0.03, "label mean {mean}");
    }

    #[test]
    fn text_format_round_trips_bit_exact() {
        let s = SignalNoiseSpec::new(vec![0.3, -1.0 / 3.0, 2.0_f64.sqrt(), 0.0], 0.77).unwrap();
        let ds = generate_dataset(&s, 6, 12345).unwrap();
        let mut buf = Vec::new();
        ds.write_text(&mut buf).unwrap();
        let back = Dataset::read_text(buf.as_slice()).unwrap();
        assert_eq!(ds, back);
        assert_eq!(back.spec().sigma_p().to_bits(), 0.77f64.to_bits());
    }

    #[test]
    fn malformed_text_reports_line() {
        let text = "3 1 1.0 0\n1 0 0\n1 3 0 0 0\n";
        match Dataset::read_text(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn from_parts_rejects_correlated_noise() {
        let s = spec(3, 1.0);
        let err = Dataset::from_parts(s, &[Label::Pos], &[SignalSlot::First], &[vec![0.1, 1.0, 0.0]], 0);
        assert!(matches!(err, Err(Error::NonOrthogonal { .. })));
    }

    #[test]
    fn gram_matches_direct_inner_products() {
        let s = spec(25, 1.0);
        let ds = generate_dataset(&s, 7, 3).unwrap();
        let g = ds.basis_gram();
        for i in 0..7 {
            assert_eq!(g.mu_xi[i], dot(s.mu(), ds.xi(i)));
            for k in 0..7 {
                assert_eq!(g.xi_dot(i, k), g.xi_dot(k, i));
                assert!((g.xi_dot(i, k) - dot(ds.xi(i), ds.xi(k))).abs() <= 1e-12 * ds.xi_norm_sq(i));
            }
        }
    }
}
