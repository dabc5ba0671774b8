//! Experiment configuration: flat `section.key = value` text.
//!
//! Later sources override earlier ones: preset, then config file, then flags.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use gradreg_core::gradient::RegMode;
use gradreg_core::trainer::Cutoff;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModeName {
    Standard,
    Pegr,
    Fgr,
}

impl ModeName {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeName::Standard => "standard",
            ModeName::Pegr => "pegr",
            ModeName::Fgr => "fgr",
        }
    }

    pub fn with_lambda(self, lambda: f64) -> RegMode {
        match self {
            ModeName::Standard => RegMode::Standard,
            ModeName::Pegr => RegMode::Pegr(lambda),
            ModeName::Fgr => RegMode::Fgr(lambda),
        }
    }
}

impl FromStr for ModeName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "standard" => Ok(ModeName::Standard),
            "pegr" => Ok(ModeName::Pegr),
            "fgr" => Ok(ModeName::Fgr),
            _ => Err(format!("unknown mode '{s}' (expected standard, pegr or fgr)")),
        }
    }
}

impl fmt::Display for ModeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `0.01` or `theory` (`1 / (sigma_p sqrt(d))`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaSpec {
    Value(f64),
    Theory,
}

impl FromStr for LambdaSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "theory" {
            return Ok(LambdaSpec::Theory);
        }
        let v: f64 = s.parse().map_err(|_| format!("invalid lambda '{s}'"))?;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(format!("lambda must be non-negative, got {s}"));
        }
        Ok(LambdaSpec::Value(v))
    }
}

/// `0.01` or `auto` (0.001 when `sigma_p >= 1.5`, else 0.01).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sigma0Spec {
    Value(f64),
    Auto,
}

impl FromStr for Sigma0Spec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(Sigma0Spec::Auto);
        }
        let v: f64 = s.parse().map_err(|_| format!("invalid sigma_0 '{s}'"))?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(format!("sigma_0 must be positive, got {s}"));
        }
        Ok(Sigma0Spec::Value(v))
    }
}

/// `800`, `theory:0.05` or `never`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CutoffSpec {
    Epoch(u64),
    Theory(f64),
    Never,
}

impl FromStr for CutoffSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "never" {
            return Ok(CutoffSpec::Never);
        }
        if let Some(rest) = s.strip_prefix("theory:") {
            let delta: f64 = rest.parse().map_err(|_| format!("invalid delta in cutoff '{s}'"))?;
            if !(delta > 0.0 && delta < 1.0) {
                return Err(format!("cutoff delta must lie in (0, 1), got {rest}"));
            }
            return Ok(CutoffSpec::Theory(delta));
        }
        s.parse()
            .map(CutoffSpec::Epoch)
            .map_err(|_| format!("invalid cutoff '{s}' (expected an epoch, theory:<delta> or never)"))
    }
}

impl CutoffSpec {
    pub fn to_cutoff(self) -> Cutoff {
        match self {
            CutoffSpec::Epoch(t) => Cutoff::FixedEpoch(t),
            CutoffSpec::Theory(delta) => Cutoff::TheoryT1 { delta },
            CutoffSpec::Never => Cutoff::Never,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub d: usize,
    pub n: usize,
    pub mu_norm: f64,
    pub sigma_p: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub m: usize,
    pub sigma_0: Sigma0Spec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub eta: f64,
    pub epochs: u64,
    pub mode: ModeName,
    pub lambda: LambdaSpec,
    pub cutoff: CutoffSpec,
    pub log_every: u64,
    pub closed_form: bool,
    pub track_decomposition: bool,
    pub t_star: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    /// 0 disables test evaluation.
    pub test_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedSection {
    pub data_seed: u64,
    pub init_seed: u64,
    pub test_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputSection {
    pub directory: Option<PathBuf>,
    pub plot: bool,
}

/// Sweep axes; empty lists mean "use the base value".
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepSection {
    pub sigma_p: Vec<f64>,
    pub modes: Vec<ModeName>,
    pub replicates: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub seeds: SeedSection,
    pub output: OutputSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSection { d: 400, n: 20, mu_norm: 1.0, sigma_p: 1.0 },
            model: ModelSection { m: 10, sigma_0: Sigma0Spec::Value(0.01) },
            train: TrainSection {
                eta: 0.02,
                epochs: 1500,
                mode: ModeName::Standard,
                lambda: LambdaSpec::Value(0.0),
                cutoff: CutoffSpec::Never,
                log_every: 100,
                closed_form: false,
                track_decomposition: true,
                t_star: 1e7,
            },
            eval: EvalSection { test_samples: 10_000 },
            seeds: SeedSection { data_seed: 1, init_seed: 2, test_seed: 3 },
            output: OutputSection { directory: None, plot: false },
            sweep: SweepSection { sigma_p: Vec::new(), modes: Vec::new(), replicates: 1 },
        }
    }
}

/// Every accepted key, in file order.
pub const KEYS: [&str; 24] = [
    "data.d",
    "data.n",
    "data.mu_norm",
    "data.sigma_p",
    "model.m",
    "model.sigma_0",
    "train.eta",
    "train.epochs",
    "train.mode",
    "train.lambda",
    "train.cutoff",
    "train.log_every",
    "train.closed_form",
    "train.track_decomposition",
    "train.t_star",
    "eval.test_samples",
    "seeds.data_seed",
    "seeds.init_seed",
    "seeds.test_seed",
    "output.directory",
    "output.plot",
    "sweep.sigma_p",
    "sweep.modes",
    "sweep.replicates",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("invalid value '{value}' for {key}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn parse_modes(value: &str) -> Result<Vec<ModeName>, String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("invalid boolean '{value}' for {key}")),
    }
}

impl ExperimentConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "data.d" => self.data.d = parse_value(key, v)?,
            "data.n" => self.data.n = parse_value(key, v)?,
            "data.mu_norm" => self.data.mu_norm = parse_value(key, v)?,
            "data.sigma_p" => self.data.sigma_p = parse_value(key, v)?,
            "model.m" => self.model.m = parse_value(key, v)?,
            "model.sigma_0" => self.model.sigma_0 = v.parse()?,
            "train.eta" => self.train.eta = parse_value(key, v)?,
            "train.epochs" => self.train.epochs = parse_value(key, v)?,
            "train.mode" => self.train.mode = v.parse()?,
            "train.lambda" => self.train.lambda = v.parse()?,
            "train.cutoff" => self.train.cutoff = v.parse()?,
            "train.log_every" => self.train.log_every = parse_value(key, v)?,
            "train.closed_form" => self.train.closed_form = parse_bool(key, v)?,
            "train.track_decomposition" => self.train.track_decomposition = parse_bool(key, v)?,
            "train.t_star" => self.train.t_star = parse_value(key, v)?,
            "eval.test_samples" => self.eval.test_samples = parse_value(key, v)?,
            "seeds.data_seed" => self.seeds.data_seed = parse_value(key, v)?,
            "seeds.init_seed" => self.seeds.init_seed = parse_value(key, v)?,
            "seeds.test_seed" => self.seeds.test_seed = parse_value(key, v)?,
            "output.directory" => self.output.directory = (!v.is_empty()).then(|| PathBuf::from(v)),
            "output.plot" => self.output.plot = parse_bool(key, v)?,
            "sweep.sigma_p" => self.sweep.sigma_p = parse_list(key, v)?,
            "sweep.modes" => self.sweep.modes = parse_modes(v)?,
            "sweep.replicates" => self.sweep.replicates = parse_value(key, v)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Apply a config file's assignments. `source` names the file in errors.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<(), CliError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| CliError::Config { file: source.to_string(), line: idx + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected 'key = value', found '{line}'")))?;
            self.set(key.trim(), value).map_err(err)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        cfg.apply_text(text, source)?;
        Ok(cfg)
    }

    pub fn sigma_0(&self) -> f64 {
        match self.model.sigma_0 {
            Sigma0Spec::Value(v) => v,
            Sigma0Spec::Auto if self.data.sigma_p >= 1.5 => 0.001,
            Sigma0Spec::Auto => 0.01,
        }
    }

    pub fn lambda(&self) -> f64 {
        match self.train.lambda {
            LambdaSpec::Value(v) => v,
            LambdaSpec::Theory => 1.0 / (self.data.sigma_p * (self.data.d as f64).sqrt()),
        }
    }

    pub fn reg_mode(&self) -> RegMode {
        self.train.mode.with_lambda(self.lambda())
    }

    /// Checks the constraints that are not enforced by the core constructors.
    pub fn validate(&self) -> Result<(), String> {
        if self.data.d < 2 {
            return Err(format!("data.d must be at least 2, got {}", self.data.d));
        }
        if self.data.n < 1 {
            return Err("data.n must be at least 1".into());
        }
        if !(self.data.sigma_p > 0.0 && self.data.sigma_p.is_finite()) {
            return Err(format!("data.sigma_p must be positive, got {}", self.data.sigma_p));
        }
        if !(self.data.mu_norm > 0.0 && self.data.mu_norm.is_finite()) {
            return Err(format!("data.mu_norm must be positive, got {}", self.data.mu_norm));
        }
        if self.model.m < 1 {
            return Err("model.m must be at least 1".into());
        }
        if !(self.train.eta >= 0.0 && self.train.eta.is_finite()) {
            return Err(format!("train.eta must be non-negative, got {}", self.train.eta));
        }
        if self.train.epochs < 1 {
            return Err("train.epochs must be at least 1".into());
        }
        if self.train.log_every < 1 {
            return Err("train.log_every must be at least 1".into());
        }
        if self.sweep.replicates < 1 {
            return Err("sweep.replicates must be at least 1".into());
        }
        if self.sweep.sigma_p.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err("sweep.sigma_p values must be positive".into());
        }
        Ok(())
    }

    /// Render as a config file that reproduces `self`.
    pub fn to_text(&self) -> String {
        let list = |v: &[String]| v.join(", ");
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        put("data.d", self.data.d.to_string());
        put("data.n", self.data.n.to_string());
        put("data.mu_norm", format!("{:?}", self.data.mu_norm));
        put("data.sigma_p", format!("{:?}", self.data.sigma_p));
        put("model.m", self.model.m.to_string());
        put(
            "model.sigma_0",
            match self.model.sigma_0 {
                Sigma0Spec::Value(v) => format!("{v:?}"),
                Sigma0Spec::Auto => "auto".into(),
            },
        );
        put("train.eta", format!("{:?}", self.train.eta));
        put("train.epochs", self.train.epochs.to_string());
        put("train.mode", self.train.mode.to_string());
        put(
            "train.lambda",
            match self.train.lambda {
                LambdaSpec::Value(v) => format!("{v:?}"),
                LambdaSpec::Theory => "theory".into(),
            },
        );
        put(
            "train.cutoff",
            match self.train.cutoff {
                CutoffSpec::Epoch(t) => t.to_string(),
                CutoffSpec::Theory(d) => format!("theory:{d:?}"),
                CutoffSpec::Never => "never".into(),
            },
        );
        put("train.log_every", self.train.log_every.to_string());
        put("train.closed_form", self.train.closed_form.to_string());
        put("train.track_decomposition", self.train.track_decomposition.to_string());
        put("train.t_star", format!("{:?}", self.train.t_star));
        put("eval.test_samples", self.eval.test_samples.to_string());
        put("seeds.data_seed", self.seeds.data_seed.to_string());
        put("seeds.init_seed", self.seeds.init_seed.to_string());
        put("seeds.test_seed", self.seeds.test_seed.to_string());
        put(
            "output.directory",
            self.output.directory.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        put("output.plot", self.output.plot.to_string());
        put("sweep.sigma_p", list(&self.sweep.sigma_p.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>()));
        put("sweep.modes", list(&self.sweep.modes.iter().map(|m| m.to_string()).collect::<Vec<_>>()));
        put("sweep.replicates", self.sweep.replicates.to_string());
        out
    }
}
