//! The four experiment commands behind the command-line front end.
//!
//! Each command resolves the configuration, runs library operations, writes
//! its CSV tables under the output directory and finishes with the manifest.
//! Validation happens before anything is written.

use std::path::PathBuf;
use std::time::Instant;

use crate::config::{config_entries, load_config, validate, ModelParams, Population, SimConfig};
use crate::decoupling::{solve_phi_direct, solve_phi_flow, CouplingTerm, LeaderDecoupling};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::noise::derive_seed;
use crate::output::{
    costs_table, epsilon_table, format_number, gaps_table, limit_paths_table, phi_table, riccati_table,
    ArtifactWriter, RunManifest,
};
use crate::riccati::FollowerRiccati;
use crate::simulate::{
    check_identity, epsilon_sweep, perturbation_gap, random_directions, simulate_ensemble, DecentralizedSolution,
    GapRecord, PerturbationSpec, PerturbationTarget, Retention,
};

pub const VERSION: &str = concat!("bfstack ", env!("CARGO_PKG_VERSION"));

/// Bound on baseline stationarity residuals.
pub const STATIONARITY_TOL: f64 = 1e-10;
/// Accepted range for the fitted decay exponent of `epsilon(N)`.
pub const SLOPE_RANGE: (f64, f64) = (-0.65, -0.35);
pub const PERTURBATION_DIRECTIONS: usize = 5;
pub const DIRECTION_SEGMENTS: usize = 10;
pub const PERTURBATION_DELTAS: [f64; 5] = [0.0, -0.5, -0.25, 0.25, 0.5];
/// Constant deviation of the leader in the arbitrary-leader reading.
pub const LEADER_OFFSET: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub limit_paths: bool,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            config: None,
            out: out.into(),
            seed: None,
            paths: None,
            limit_paths: false,
        }
    }
}

/// Configuration file (or defaults) with command-line overrides applied,
/// validated for the limit population.
pub fn resolve(options: &RunOptions) -> Result<(ModelParams, SimConfig)> {
    let (params, mut config) = match &options.config {
        Some(path) => load_config(path)?,
        None => {
            let params = ModelParams::default();
            let config = SimConfig::for_params(&params)?;
            (params, config)
        }
    };
    if let Some(seed) = options.seed {
        config.seed = seed;
    }
    if let Some(paths) = options.paths {
        if paths == 0 {
            return Err(Error::InvalidArgument("--paths must be positive".into()));
        }
        config.n_paths = paths;
    }
    validate(&params, Population::Limit).into_result()?;
    Ok((params, config))
}

fn base_manifest(command: &str, params: &ModelParams, config: &SimConfig) -> RunManifest {
    let mut m = RunManifest::new();
    m.set("version", VERSION);
    m.set("command", command);
    for (key, value) in config_entries(params, config) {
        m.set(format!("config.{key}"), value);
    }
    m
}

struct Stopwatch(Instant);

impl Stopwatch {
    fn start() -> Self {
        Self(Instant::now())
    }

    fn record(&mut self, manifest: &mut RunManifest, stage: &str) {
        manifest.set(format!("time.{stage}_s"), format!("{:.3}", self.0.elapsed().as_secs_f64()));
        self.0 = Instant::now();
    }
}

pub fn cmd_riccati(options: &RunOptions) -> Result<RunManifest> {
    let (params, config) = resolve(options)?;
    let mut manifest = base_manifest("riccati", &params, &config);
    let mut clock = Stopwatch::start();
    let sol = FollowerRiccati::solve(&params, &config.grid, Population::Limit)?;
    check_identity(&sol, config.tolerances.riccati_residual_tol)?;
    clock.record(&mut manifest, "solve");
    manifest.set_number("riccati.identity_defect", sol.identity_defect());
    manifest.set_number("riccati.P0", *sol.p.first());
    manifest.set_number("riccati.K0", *sol.k.first());
    manifest.set_number("riccati.Pi0", *sol.pi.first());

    let mut writer = ArtifactWriter::new(&options.out, manifest)?;
    writer.write_table("riccati.csv", &riccati_table(&sol))?;
    writer.finish()
}

pub fn cmd_phi(options: &RunOptions) -> Result<RunManifest> {
    let (params, config) = resolve(options)?;
    let mut manifest = base_manifest("phi", &params, &config);
    let mut clock = Stopwatch::start();
    let riccati = FollowerRiccati::solve(&params, &config.grid, Population::Limit)?;
    check_identity(&riccati, config.tolerances.riccati_residual_tol)?;
    let flow = solve_phi_flow(&params, &riccati.pi, &config.grid, config.tolerances.beta_condition_max)?;
    let dec = LeaderDecoupling::solve(&params, &riccati, &config.tolerances)?;
    clock.record(&mut manifest, "flow");

    let m = &mut manifest;
    m.set_number("phi.residual_sup", dec.residual_sup);
    m.set_check("check.phi_residual", dec.residual_sup <= config.tolerances.riccati_residual_tol);
    m.set_number("phi.beta_condition_max", dec.max_beta_condition());
    m.set_number("phi.asymmetry_sup", dec.asymmetry());
    m.set("psi.terminal", format!("mean(xi0) = {}", format_number(dec.xi0_mean)));
    for term in CouplingTerm::ALL {
        let key = format!("phi.coupling_{}", term.label());
        m.set_number(format!("{key}.residual_sup"), dec.residual(&params, term));
        match solve_phi_direct(&params, &riccati.pi, &config.grid, term) {
            Ok(direct) => m.set_number(format!("{key}.flow_vs_direct_sup"), flow.phi.sup_abs_diff(&direct)),
            Err(e) => m.set(format!("{key}.flow_vs_direct_sup"), format!("n/a ({e})")),
        }
    }
    let agreement = solve_phi_direct(&params, &riccati.pi, &config.grid, CouplingTerm::Included)
        .map(|direct| flow.phi.sup_abs_diff(&direct) <= 1e-6)
        .unwrap_or(false);
    m.set_check("check.flow_vs_direct", agreement);
    clock.record(&mut manifest, "diagnostics");

    let mut writer = ArtifactWriter::new(&options.out, manifest)?;
    writer.write_table("phi.csv", &phi_table(&flow.phi))?;
    writer.finish()
}

/// Five seeded directions applied to the leader, to follower 1, and to
/// follower 1 while the leader plays its decentralized control plus a
/// constant offset.
pub fn standard_perturbations(grid: &TimeGrid, seed: u64) -> Result<Vec<PerturbationSpec>> {
    let directions = random_directions(seed, PERTURBATION_DIRECTIONS, grid, DIRECTION_SEGMENTS)?;
    let targets = [
        PerturbationTarget::Leader,
        PerturbationTarget::Follower(0),
        PerturbationTarget::FollowerAgainstOffset {
            follower: 0,
            leader_offset: vec![LEADER_OFFSET; grid.nodes()],
        },
    ];
    Ok(targets
        .iter()
        .flat_map(|target| {
            directions.iter().enumerate().map(move |(id, d)| PerturbationSpec {
                target: target.clone(),
                direction_id: id + 1,
                direction: d.clone(),
                magnitudes: PERTURBATION_DELTAS.to_vec(),
            })
        })
        .collect())
}

/// Smallest `gap(delta) + gap(-delta)` over all directions of `target`.
pub fn symmetric_gap_min(gaps: &[GapRecord], target: &str) -> f64 {
    let of_target: Vec<&GapRecord> = gaps.iter().filter(|g| g.target == target).collect();
    of_target
        .iter()
        .filter(|g| g.delta > 0.0)
        .filter_map(|g| {
            of_target
                .iter()
                .find(|o| o.direction == g.direction && o.delta == -g.delta)
                .map(|o| g.gap + o.gap)
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn gap_min(gaps: &[GapRecord], target: &str) -> f64 {
    gaps.iter()
        .filter(|g| g.target == target && g.delta != 0.0)
        .map(|g| g.gap)
        .fold(f64::INFINITY, f64::min)
}

pub fn cmd_simulate(options: &RunOptions, population: usize) -> Result<RunManifest> {
    let (params, config) = resolve(options)?;
    validate(&params, Population::Finite(population)).into_result()?;
    let mut manifest = base_manifest("simulate", &params, &config);
    manifest.set("N", population);
    let mut clock = Stopwatch::start();
    let sol = DecentralizedSolution::solve(&params, &config.grid, &config.tolerances)?;
    clock.record(&mut manifest, "solve");

    let retention = Retention::Summary;
    let (ensemble, mut report) = simulate_ensemble(&sol, &config, population, retention)?;
    clock.record(&mut manifest, "simulate");
    let specs = standard_perturbations(&config.grid, derive_seed(config.seed, 0))?;
    report.gaps = perturbation_gap(&sol, &config, population, &specs)?;
    clock.record(&mut manifest, "perturb");

    let m = &mut manifest;
    m.set_number("epsilon", report.epsilon.mean);
    m.set_number("epsilon_stderr", report.epsilon.stderr);
    m.set_number("stationarity.follower_sup", report.follower_residual_sup);
    m.set_number("stationarity.leader_sup", report.leader_residual_sup);
    m.set_check("check.stationarity", report.stationarity_sup() <= STATIONARITY_TOL);
    m.set_check(
        "check.zero_delta_gap",
        report.gaps.iter().filter(|g| g.delta == 0.0).all(|g| g.gap == 0.0),
    );
    let mut labels: Vec<String> = report.gaps.iter().map(|g| g.target.clone()).collect();
    labels.dedup();
    for label in labels {
        m.set_number(format!("gap.{label}.min"), gap_min(&report.gaps, &label));
        m.set_number(format!("gap.{label}.symmetric_min"), symmetric_gap_min(&report.gaps, &label));
    }
    m.set("leader_offset", format_number(LEADER_OFFSET));

    let mut writer = ArtifactWriter::new(&options.out, manifest)?;
    writer.write_table("costs.csv", &costs_table(std::slice::from_ref(&report)))?;
    writer.write_table("gaps.csv", &gaps_table(&report.gaps))?;
    if options.limit_paths {
        writer.write_table("limit_paths.csv", &limit_paths_table(&ensemble))?;
    }
    writer.finish()
}

pub fn cmd_sweep(options: &RunOptions) -> Result<RunManifest> {
    let (params, config) = resolve(options)?;
    for &n in &config.population_sizes {
        validate(&params, Population::Finite(n)).into_result()?;
    }
    let mut manifest = base_manifest("sweep", &params, &config);
    let mut clock = Stopwatch::start();
    let sol = DecentralizedSolution::solve(&params, &config.grid, &config.tolerances)?;
    let sweep = epsilon_sweep(&sol, &config, &config.population_sizes)?;
    clock.record(&mut manifest, "sweep");

    let m = &mut manifest;
    match sweep.slope {
        Some(slope) => {
            m.set_number("slope", slope);
            m.set_check("check.slope", (SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&slope));
        }
        None => {
            m.set("slope", "n/a");
            m.set("check.slope", "n/a");
        }
    }
    let decreasing = sweep.rows.windows(2).all(|w| w[1].epsilon < w[0].epsilon);
    m.set_check("check.decreasing", decreasing);

    let mut writer = ArtifactWriter::new(&options.out, manifest)?;
    writer.write_table("epsilon.csv", &epsilon_table(&sweep.rows))?;
    writer.finish()
}
