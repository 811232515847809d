//! Model constants, simulation settings and the plain-text config format.
//!
//! The file format is one `key = value` per line with `#` comments. Keys that
//! are absent keep their defaults, which reproduce the reference experiment:
//! every coefficient equal to one except `D = 0.05`, `H0 = 0` and
//! `Gamma = Gamma0 = Gamma1 = 0.5`, on the horizon `[0, 5]`, with follower
//! initial states uniform on `[0, 10]` and a leader terminal value `N(0, 5)`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Distribution of the i.i.d. follower initial states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialDist {
    Deterministic(f64),
    Uniform { low: f64, high: f64 },
    /// Second parameter is the variance.
    Gaussian { mean: f64, variance: f64 },
}

impl InitialDist {
    pub fn mean(&self) -> f64 {
        match *self {
            InitialDist::Deterministic(v) => v,
            InitialDist::Uniform { low, high } => 0.5 * (low + high),
            InitialDist::Gaussian { mean, .. } => mean,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            InitialDist::Deterministic(_) => 0.0,
            InitialDist::Uniform { low, high } => (high - low).powi(2) / 12.0,
            InitialDist::Gaussian { variance, .. } => variance,
        }
    }

    /// Finite parameters and a finite second moment.
    fn is_well_formed(&self) -> bool {
        match *self {
            InitialDist::Deterministic(v) => v.is_finite(),
            InitialDist::Uniform { low, high } => low.is_finite() && high.is_finite() && low <= high,
            InitialDist::Gaussian { mean, variance } => {
                mean.is_finite() && variance.is_finite() && variance >= 0.0
            }
        }
    }

    /// Map a uniform draw in `(0, 1)` and a standard normal draw to a sample.
    pub(crate) fn sample(&self, uniform: f64, normal: f64) -> f64 {
        match *self {
            InitialDist::Deterministic(v) => v,
            InitialDist::Uniform { low, high } => low + (high - low) * uniform,
            InitialDist::Gaussian { mean, variance } => mean + variance.sqrt() * normal,
        }
    }
}

impl fmt::Display for InitialDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialDist::Deterministic(v) => write!(f, "det:{v}"),
            InitialDist::Uniform { low, high } => write!(f, "uniform:{low}:{high}"),
            InitialDist::Gaussian { mean, variance } => write!(f, "gaussian:{mean}:{variance}"),
        }
    }
}

impl FromStr for InitialDist {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let num = |p: &str| p.parse::<f64>().map_err(|_| format!("`{p}` is not a number"));
        match parts.as_slice() {
            ["det", v] => Ok(InitialDist::Deterministic(num(v)?)),
            ["uniform", a, b] => Ok(InitialDist::Uniform {
                low: num(a)?,
                high: num(b)?,
            }),
            ["gaussian", m, v] => Ok(InitialDist::Gaussian {
                mean: num(m)?,
                variance: num(v)?,
            }),
            _ => Err(format!(
                "expected det:<v>, uniform:<a>:<b> or gaussian:<mean>:<variance>, got `{s}`"
            )),
        }
    }
}

/// Leader terminal value: a constant, or a Gaussian independent of every
/// Brownian motion. Only its mean enters the deterministic offset of the
/// decoupling field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TerminalSpec {
    Deterministic(f64),
    Gaussian { mean: f64, variance: f64 },
}

impl TerminalSpec {
    pub fn mean(&self) -> f64 {
        match *self {
            TerminalSpec::Deterministic(v) => v,
            TerminalSpec::Gaussian { mean, .. } => mean,
        }
    }

    pub fn is_random(&self) -> bool {
        matches!(self, TerminalSpec::Gaussian { .. })
    }

    fn is_well_formed(&self) -> bool {
        match *self {
            TerminalSpec::Deterministic(v) => v.is_finite(),
            TerminalSpec::Gaussian { mean, variance } => {
                mean.is_finite() && variance.is_finite() && variance >= 0.0
            }
        }
    }

    pub(crate) fn sample(&self, normal: f64) -> f64 {
        match *self {
            TerminalSpec::Deterministic(v) => v,
            TerminalSpec::Gaussian { mean, variance } => mean + variance.sqrt() * normal,
        }
    }
}

impl fmt::Display for TerminalSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminalSpec::Deterministic(v) => write!(f, "det:{v}"),
            TerminalSpec::Gaussian { mean, variance } => write!(f, "gaussian:{mean}:{variance}"),
        }
    }
}

impl FromStr for TerminalSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.parse::<InitialDist>()? {
            InitialDist::Deterministic(v) => Ok(TerminalSpec::Deterministic(v)),
            InitialDist::Gaussian { mean, variance } => Ok(TerminalSpec::Gaussian { mean, variance }),
            InitialDist::Uniform { .. } => {
                Err(format!("expected det:<v> or gaussian:<mean>:<variance>, got `{s}`"))
            }
        }
    }
}

/// Population size for the finite-N equations, or the mean-field limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Population {
    Finite(usize),
    Limit,
}

impl Population {
    /// Multiplier `1 - Gamma/N` of the follower state weight (1 in the limit).
    pub fn coupling_factor(&self, gamma: f64) -> f64 {
        match *self {
            Population::Finite(n) => 1.0 - gamma / n as f64,
            Population::Limit => 1.0,
        }
    }
}

impl fmt::Display for Population {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Population::Finite(n) => write!(f, "{n}"),
            Population::Limit => f.write_str("limit"),
        }
    }
}

/// Scalar constants of the leader BSDE, follower SDEs and both cost functionals.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    // leader state
    pub A0: f64,
    pub B0: f64,
    pub C0: f64,
    pub f0: f64,
    // follower state
    pub A: f64,
    pub B: f64,
    pub F: f64,
    pub G: f64,
    pub f: f64,
    pub D: f64,
    // leader cost
    pub Q0: f64,
    pub R0: f64,
    pub H0: f64,
    pub Gamma0: f64,
    pub eta0: f64,
    // follower cost
    pub Q: f64,
    pub R: f64,
    pub L: f64,
    pub H: f64,
    pub Gamma: f64,
    pub Gamma1: f64,
    pub eta: f64,
    pub T: f64,
    pub xi_dist: InitialDist,
    pub xi0_spec: TerminalSpec,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            A0: 1.0,
            B0: 1.0,
            C0: 1.0,
            f0: 1.0,
            A: 1.0,
            B: 1.0,
            F: 1.0,
            G: 1.0,
            f: 1.0,
            D: 0.05,
            Q0: 1.0,
            R0: 1.0,
            H0: 0.0,
            Gamma0: 0.5,
            eta0: 1.0,
            Q: 1.0,
            R: 1.0,
            L: 1.0,
            H: 1.0,
            Gamma: 0.5,
            Gamma1: 0.5,
            eta: 1.0,
            T: 5.0,
            xi_dist: InitialDist::Uniform {
                low: 0.0,
                high: 10.0,
            },
            xi0_spec: TerminalSpec::Gaussian {
                mean: 0.0,
                variance: 5.0,
            },
        }
    }
}

impl ModelParams {
    /// Mean of the follower initial states.
    pub fn xi_bar(&self) -> f64 {
        self.xi_dist.mean()
    }

    /// `B^2 / R`.
    pub fn control_gain(&self) -> f64 {
        self.B * self.B / self.R
    }

    /// `G - B L / R`, the net effect of the leader control on a follower once
    /// the cross term in the follower cost is accounted for.
    pub fn leader_coupling(&self) -> f64 {
        self.G - self.B * self.L / self.R
    }

    fn scalars(&self) -> [(&'static str, f64); 23] {
        [
            ("A0", self.A0),
            ("B0", self.B0),
            ("C0", self.C0),
            ("f0", self.f0),
            ("A", self.A),
            ("B", self.B),
            ("F", self.F),
            ("G", self.G),
            ("f", self.f),
            ("D", self.D),
            ("Q0", self.Q0),
            ("R0", self.R0),
            ("H0", self.H0),
            ("Gamma0", self.Gamma0),
            ("eta0", self.eta0),
            ("Q", self.Q),
            ("R", self.R),
            ("L", self.L),
            ("H", self.H),
            ("Gamma", self.Gamma),
            ("Gamma1", self.Gamma1),
            ("eta", self.eta),
            ("T", self.T),
        ]
    }

    fn scalar_mut(&mut self, key: &str) -> Option<&mut f64> {
        Some(match key {
            "A0" => &mut self.A0,
            "B0" => &mut self.B0,
            "C0" => &mut self.C0,
            "f0" => &mut self.f0,
            "A" => &mut self.A,
            "B" => &mut self.B,
            "F" => &mut self.F,
            "G" => &mut self.G,
            "f" => &mut self.f,
            "D" => &mut self.D,
            "Q0" => &mut self.Q0,
            "R0" => &mut self.R0,
            "H0" => &mut self.H0,
            "Gamma0" => &mut self.Gamma0,
            "eta0" => &mut self.eta0,
            "Q" => &mut self.Q,
            "R" => &mut self.R,
            "L" => &mut self.L,
            "H" => &mut self.H,
            "Gamma" => &mut self.Gamma,
            "Gamma1" => &mut self.Gamma1,
            "eta" => &mut self.eta,
            "T" => &mut self.T,
            _ => return None,
        })
    }
}

/// Names of violated inequalities; empty when the parameters are admissible.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    /// True if some violation message contains `needle`.
    pub fn contains(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.contains(needle))
    }

    fn check(&mut self, ok: bool, name: &str) {
        if !ok {
            self.violations.push(format!("{name} violated"));
        }
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("ok");
        }
        f.write_str(&self.violations.join("; "))
    }
}

/// Check the standing assumptions for the finite-N game or its limit.
///
/// Never fails; callers decide what to do with a non-empty report.
pub fn validate(params: &ModelParams, population: Population) -> ValidationReport {
    let mut report = ValidationReport::default();
    let all_finite = params.scalars().iter().all(|(_, v)| v.is_finite());
    report.check(all_finite, "finite coefficients");
    report.check(params.R > 0.0, "R > 0");
    report.check(params.R0 > 0.0, "R0 > 0");
    report.check(params.Q >= 0.0, "Q ≥ 0");
    report.check(params.Q0 >= 0.0, "Q0 ≥ 0");
    report.check(params.H >= 0.0, "H ≥ 0");
    report.check(params.H0 >= 0.0, "H0 ≥ 0");
    report.check(params.T > 0.0, "T > 0");
    report.check(params.xi_dist.is_well_formed(), "xi_dist finite second moment");
    report.check(params.xi0_spec.is_well_formed(), "xi0_spec finite second moment");
    match population {
        Population::Limit => {
            report.check(1.0 - params.Gamma >= 0.0, "1 − Γ ≥ 0");
        }
        Population::Finite(n) => {
            report.check(n >= 1, "N ≥ 1");
            let c = population.coupling_factor(params.Gamma);
            report.check(c >= 0.0, "1 − Γ/N ≥ 0");
            report.check(c * (1.0 - params.Gamma) >= 0.0, "(1 − Γ/N)(1 − Γ) ≥ 0");
        }
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Sup-norm bound on the decoupling Riccati residual.
    pub riccati_residual_tol: f64,
    /// Largest admissible condition number of `beta(t)`.
    pub beta_condition_max: f64,
    /// Smallest admissible `|1 - H0 * Phi11(0)|`.
    pub fixed_point_denominator_min: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            riccati_residual_tol: 1e-6,
            beta_condition_max: 1e12,
            fixed_point_denominator_min: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub population_sizes: Vec<usize>,
    pub seed: u64,
    pub tolerances: Tolerances,
}

pub const DEFAULT_STEPS: usize = 2000;
pub const DEFAULT_PATHS: usize = 200;
pub const DEFAULT_SEED: u64 = 20_240_917;

impl SimConfig {
    pub fn for_params(params: &ModelParams) -> Result<Self> {
        Ok(Self {
            grid: TimeGrid::new(params.T, DEFAULT_STEPS)?,
            n_paths: DEFAULT_PATHS,
            population_sizes: vec![25, 100, 400],
            seed: DEFAULT_SEED,
            tolerances: Tolerances::default(),
        })
    }

    pub fn with_steps(mut self, steps: usize) -> Result<Self> {
        self.grid = TimeGrid::new(self.grid.horizon(), steps)?;
        Ok(self)
    }
}

/// Every key accepted by the config file, in serialization order.
pub const CONFIG_KEYS: [&str; 29] = [
    "A0", "B0", "C0", "f0", "A", "B", "F", "G", "f", "D", "Q0", "R0", "H0", "Gamma0", "eta0", "Q",
    "R", "L", "H", "Gamma", "Gamma1", "eta", "T", "M", "n_paths", "seed", "xi_dist", "xi0_spec",
    "N_list",
];

pub fn load_config(path: impl AsRef<Path>) -> Result<(ModelParams, SimConfig)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<(ModelParams, SimConfig)> {
    let mut params = ModelParams::default();
    let mut steps = DEFAULT_STEPS;
    let mut n_paths = DEFAULT_PATHS;
    let mut seed = DEFAULT_SEED;
    let mut population_sizes = vec![25, 100, 400];

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::Parse {
                key: content.to_string(),
                line,
                message: "expected `key = value`".into(),
            });
        };
        let key = key.trim();
        let value = value.trim();
        let err = |message: String| Error::Parse {
            key: key.to_string(),
            line,
            message,
        };
        if let Some(slot) = params.scalar_mut(key) {
            *slot = value
                .parse::<f64>()
                .map_err(|_| err(format!("`{value}` is not a number")))?;
            continue;
        }
        match key {
            "M" => steps = parse_int(value).map_err(err)?,
            "n_paths" => n_paths = parse_int(value).map_err(err)?,
            "seed" => seed = parse_int(value).map_err(err)?,
            "xi_dist" => params.xi_dist = value.parse().map_err(err)?,
            "xi0_spec" => params.xi0_spec = value.parse().map_err(err)?,
            "N_list" => {
                population_sizes = value
                    .split(',')
                    .map(|s| parse_int::<usize>(s.trim()))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(err)?;
                if population_sizes.contains(&0) {
                    return Err(err("population sizes must be positive".into()));
                }
            }
            _ => return Err(err("unknown key".into())),
        }
    }

    if n_paths == 0 {
        return Err(Error::Parse {
            key: "n_paths".into(),
            line: 0,
            message: "need at least one path".into(),
        });
    }
    let grid = TimeGrid::new(params.T, steps).map_err(|e| Error::Parse {
        key: "M".into(),
        line: 0,
        message: e.to_string(),
    })?;
    let config = SimConfig {
        grid,
        n_paths,
        population_sizes,
        seed,
        tolerances: Tolerances::default(),
    };
    Ok((params, config))
}

fn parse_int<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value
        .parse::<T>()
        .map_err(|_| format!("`{value}` is not a non-negative integer"))
}

/// Render every key so that [`parse_config`] reproduces the same values.
pub fn render_config(params: &ModelParams, config: &SimConfig) -> String {
    config_entries(params, config)
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

/// Resolved `(key, value)` pairs in [`CONFIG_KEYS`] order.
pub fn config_entries(params: &ModelParams, config: &SimConfig) -> Vec<(&'static str, String)> {
    let mut out: Vec<(&'static str, String)> = params
        .scalars()
        .iter()
        .map(|(k, v)| (*k, v.to_string()))
        .collect();
    out.push(("M", config.grid.steps().to_string()));
    out.push(("n_paths", config.n_paths.to_string()));
    out.push(("seed", config.seed.to_string()));
    out.push(("xi_dist", params.xi_dist.to_string()));
    out.push(("xi0_spec", params.xi0_spec.to_string()));
    let sizes: Vec<String> = config.population_sizes.iter().map(|n| n.to_string()).collect();
    out.push(("N_list", sizes.join(",")));
    out
}
