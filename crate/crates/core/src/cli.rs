//! Configuration-driven experiment runner behind the `qproc` binary.
//!
//! A config is a TOML file with four blocks (`[engine]`, `[experiment]`,
//! `[numeric]`, `[output]`) plus top-level `id` and `seed`. Unknown keys are
//! rejected everywhere. Every run produces a [`ResultEnvelope`]; CSV tables are
//! written next to it when `output.csv` is set.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coherent::{Cell, CoherentFamily, PhaseFunction, PhasePoint, QuadratureSpec};
use crate::conditioning::{conditional_correlation, conditional_pair, tower_check, PointerField};
use crate::correlations::{
    ctp_exact, gaussian_ctp, kinematic_particle_kernels, oracle_kernels, CurrentPair, KernelKind, Observable, TimeGrid,
};
use crate::decfun::{check_axioms, phi_cells, Check, Event, Hamiltonian, History, Initial, ProcessEngine, Route};
use crate::error::QprocError;
use crate::fock::{basis_vector, harmonic_hamiltonian, quartic_hamiltonian, FockOperator, LEAKAGE_FLAG};
use crate::markov::{
    chapman_kolmogorov_check, extract_hamiltonian, propagator_symmetry_check, reconstruct_subspace,
    time_reversibility_check, DensityPropagator, PhaseGrid, PropagatorSample, PropagatorTable,
};
use crate::pancharatnam::{extract_phase, history_scan, PROTOCOL_POINTS};
use crate::symbol::Polynomial;
use crate::wigner::{axis, wigner_decfun_cells, wigner_function, wigner_oracle_cells};

/// Largest cutoff accepted from a config.
pub const MAX_CUTOFF: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Axioms,
    Decfun,
    Interfere,
    Condition,
    Correlate,
    Ctp,
    CkCheck,
    Reversibility,
    Reconstruct,
    Wigner,
}

impl Subcommand {
    pub const ALL: [Subcommand; 10] = [
        Subcommand::Axioms,
        Subcommand::Decfun,
        Subcommand::Interfere,
        Subcommand::Condition,
        Subcommand::Correlate,
        Subcommand::Ctp,
        Subcommand::CkCheck,
        Subcommand::Reversibility,
        Subcommand::Reconstruct,
        Subcommand::Wigner,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Axioms => "axioms",
            Subcommand::Decfun => "decfun",
            Subcommand::Interfere => "interfere",
            Subcommand::Condition => "condition",
            Subcommand::Correlate => "correlate",
            Subcommand::Ctp => "ctp",
            Subcommand::CkCheck => "ck-check",
            Subcommand::Reversibility => "reversibility",
            Subcommand::Reconstruct => "reconstruct",
            Subcommand::Wigner => "wigner",
        }
    }

    pub fn parse(s: &str) -> Option<Subcommand> {
        Subcommand::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// ------------------------------------------------------------------- config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub id: Option<String>,
    pub seed: u64,
    pub engine: EngineConfig,
    pub experiment: ExperimentBlock,
    pub numeric: NumericConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            id: None,
            seed: 0,
            engine: EngineConfig::default(),
            experiment: ExperimentBlock::default(),
            numeric: NumericConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub cutoff: usize,
    pub initial: InitialConfig,
    pub hamiltonian: HamiltonianConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig { cutoff: crate::fock::DEFAULT_CUTOFF, initial: InitialConfig::Vacuum, hamiltonian: HamiltonianConfig::Zero }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    Vacuum,
    Point { x: f64, xi: f64 },
    Fock { n: usize },
    /// Diagonal mixture of number states.
    Mixture { populations: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HamiltonianConfig {
    Zero,
    Harmonic {
        #[serde(default = "half")]
        offset: f64,
    },
    Quartic {
        #[serde(default = "half")]
        offset: f64,
        lambda: f64,
    },
    /// P-symbol `Σ c x^i ξ^j` as `[i, j, c]` triples.
    Symbol { terms: Vec<(u32, u32, f64)> },
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericConfig {
    /// Gauss–Legendre order per panel for cells and region rules.
    pub quad_order: usize,
    pub panel_width: f64,
    pub tolerance: f64,
    pub max_refinements: u32,
    pub tail_tolerance: f64,
    /// Gram-eigenvalue cut for subspace reconstruction.
    pub threshold: f64,
    /// Half-width of integration regions (composition, trace integrals).
    pub region_radius: f64,
    /// Overrides the per-subcommand pass tolerance when set.
    pub check_tolerance: Option<f64>,
}

impl Default for NumericConfig {
    fn default() -> Self {
        let q = QuadratureSpec::default();
        NumericConfig {
            quad_order: 12,
            panel_width: q.panel_width,
            tolerance: q.tolerance,
            max_refinements: q.max_refinements,
            tail_tolerance: q.tail_tolerance,
            threshold: crate::markov::DEFAULT_THRESHOLD,
            region_radius: 8.0,
            check_tolerance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub csv: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out"), csv: true }
    }
}

/// One history step: a cell `[x0, x1, ξ0, ξ1]` or the empty event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    #[serde(default)]
    pub cell: Option<[f64; 4]>,
    #[serde(default)]
    pub empty: bool,
    pub t: f64,
}

/// Subcommand parameters. Each subcommand reads the keys it needs and falls
/// back to the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentBlock {
    /// axioms: disjoint cells and times.
    pub cells: Vec<[f64; 4]>,
    pub times: Vec<f64>,
    /// decfun, interfere: history pair.
    pub alpha: Vec<StepConfig>,
    pub beta: Vec<StepConfig>,
    pub route: Route,
    /// condition: pointer field, observables and an optional split for the
    /// tower check.
    pub pointer_cells: Vec<[f64; 4]>,
    pub include_rest: bool,
    pub bounds_radius: f64,
    pub split: Option<usize>,
    pub f: String,
    pub g: String,
    pub time: f64,
    /// correlate, ctp: observables and time grid.
    pub observables: Vec<String>,
    pub t0: f64,
    pub t1: f64,
    pub n_times: usize,
    pub samples: usize,
    pub current_amplitude: f64,
    /// ck-check.
    pub z1: [f64; 2],
    pub z1p: [f64; 2],
    pub z0: [f64; 2],
    pub z0p: [f64; 2],
    pub t: f64,
    pub s: f64,
    pub s_mid: f64,
    /// reversibility: sample disc and a damped negative control.
    pub sample_radius: f64,
    pub damped_gamma: Option<f64>,
    /// reconstruct.
    pub disc_radius: f64,
    pub spacing: f64,
    pub dt: f64,
    pub table: Option<PathBuf>,
    pub expected_eigenvalues: Vec<f64>,
    /// wigner.
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_points: usize,
    pub cell_a: Option<[f64; 4]>,
    pub cell_b: Option<[f64; 4]>,
}

impl Default for ExperimentBlock {
    fn default() -> Self {
        ExperimentBlock {
            cells: vec![[-3.0, 0.0, -3.0, 0.0], [0.0, 3.0, -3.0, 0.0], [-3.0, 0.0, 0.0, 3.0], [0.0, 3.0, 0.0, 3.0]],
            times: vec![0.0],
            alpha: vec![StepConfig { cell: Some([0.0, 3.0, -3.0, 3.0]), empty: false, t: 0.0 }],
            beta: Vec::new(),
            route: Route::BargmannQuadrature,
            pointer_cells: vec![[-3.0, 0.0, -3.0, 3.0], [0.0, 3.0, -3.0, 3.0]],
            include_rest: true,
            bounds_radius: 6.0,
            split: None,
            f: "x".into(),
            g: "1".into(),
            time: 0.0,
            observables: vec!["x".into(), "p".into()],
            t0: 0.0,
            t1: 1.0,
            n_times: 5,
            samples: 10,
            current_amplitude: 0.3,
            z1: [1.0, -0.5],
            z1p: [0.3, 1.2],
            z0: [-1.1, 0.4],
            z0p: [0.0, -1.5],
            t: 2.0,
            s: 0.0,
            s_mid: 1.0,
            sample_radius: 1.5,
            damped_gamma: None,
            disc_radius: 6.0,
            spacing: 0.5,
            dt: 0.1,
            table: None,
            expected_eigenvalues: Vec::new(),
            grid_min: -6.0,
            grid_max: 6.0,
            grid_points: 61,
            cell_a: None,
            cell_b: None,
        }
    }
}

/// A config violation with the dotted path of the offending key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl ExperimentConfig {
    /// Parses TOML; syntax errors and unknown keys become a single diagnostic.
    pub fn from_toml(text: &str) -> Result<Self, Vec<Diagnostic>> {
        toml::from_str(text).map_err(|e| vec![Diagnostic { path: "<config>".into(), message: e.to_string().trim().to_string() }])
    }

    pub fn load(path: &Path) -> Result<Self, Vec<Diagnostic>> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| vec![Diagnostic { path: path.display().to_string(), message: e.to_string() }])?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, ignoring where outputs go.
    pub fn digest(&self) -> String {
        let inputs = ExperimentConfig { output: OutputConfig::default(), ..self.clone() };
        let json = serde_json::to_string(&inputs).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn family(&self) -> CoherentFamily {
        let n = &self.numeric;
        CoherentFamily {
            cutoff: self.engine.cutoff,
            quad: QuadratureSpec {
                panel_width: n.panel_width,
                tolerance: n.tolerance,
                max_refinements: n.max_refinements,
                tail_tolerance: n.tail_tolerance,
            },
        }
    }

    pub fn build_engine(&self) -> crate::Result<ProcessEngine> {
        let dim = self.engine.cutoff;
        let initial = match &self.engine.initial {
            InitialConfig::Vacuum => Initial::Point(PhasePoint::ORIGIN),
            InitialConfig::Point { x, xi } => Initial::Point(PhasePoint::new(*x, *xi)),
            InitialConfig::Fock { n } => Initial::Density(FockOperator::projector(&basis_vector(dim, *n))),
            InitialConfig::Mixture { populations } => {
                let mut p = populations.clone();
                p.resize(dim, 0.0);
                let total: f64 = p.iter().sum();
                Initial::Density(FockOperator::diagonal(&p.iter().map(|v| v / total).collect::<Vec<_>>()))
            }
        };
        let hamiltonian = match &self.engine.hamiltonian {
            HamiltonianConfig::Zero => Hamiltonian::Zero,
            HamiltonianConfig::Harmonic { offset } => Hamiltonian::Operator(harmonic_hamiltonian(dim, *offset)?),
            HamiltonianConfig::Quartic { offset, lambda } => Hamiltonian::Operator(quartic_hamiltonian(dim, *offset, *lambda)?),
            HamiltonianConfig::Symbol { terms } => {
                let t: Vec<((u32, u32), f64)> = terms.iter().map(|(i, j, c)| ((*i, *j), *c)).collect();
                Hamiltonian::Symbol(Polynomial::from_terms(&t))
            }
        };
        ProcessEngine::new(self.family(), initial, hamiltonian)
    }

    fn cell(&self, c: &[f64; 4]) -> crate::Result<Cell> {
        Cell::new((c[0], c[1]), (c[2], c[3]), self.numeric.quad_order)
    }

    fn history(&self, steps: &[StepConfig], label: &str) -> crate::Result<History> {
        let events = steps
            .iter()
            .map(|s| {
                let ev = match (s.cell, s.empty) {
                    (Some(c), false) => Event::cell(self.cell(&c)?),
                    (None, true) => Event::empty(),
                    _ => return Err(QprocError::Validation("a step needs exactly one of `cell` or `empty = true`".into())),
                };
                Ok((ev, s.t))
            })
            .collect::<crate::Result<Vec<_>>>()?;
        History::new(events, label)
    }

    fn tol(&self, default: f64) -> f64 {
        self.numeric.check_tolerance.unwrap_or(default)
    }
}

fn diag(out: &mut Vec<Diagnostic>, path: impl Into<String>, message: impl Into<String>) {
    out.push(Diagnostic { path: path.into(), message: message.into() });
}

fn check_cells(out: &mut Vec<Diagnostic>, path: &str, cells: &[[f64; 4]], order: usize, disjoint: bool) {
    let mut parsed = Vec::new();
    for (k, c) in cells.iter().enumerate() {
        match Cell::new((c[0], c[1]), (c[2], c[3]), order.max(2)) {
            Ok(cell) => parsed.push((k, cell)),
            Err(e) => diag(out, format!("{path}[{k}]"), e.to_string()),
        }
    }
    if disjoint {
        for (a, (i, ci)) in parsed.iter().enumerate() {
            for (j, cj) in &parsed[a + 1..] {
                if ci.overlaps(cj) {
                    diag(out, path, format!("cells {i} and {j} overlap; pointer and axiom cells must be disjoint"));
                }
            }
        }
    }
}

fn check_history(out: &mut Vec<Diagnostic>, path: &str, steps: &[StepConfig], order: usize) {
    for (k, s) in steps.iter().enumerate() {
        match (s.cell, s.empty) {
            (Some(c), false) => check_cells(out, &format!("{path}[{k}].cell"), &[c], order, false),
            (None, true) => {}
            _ => diag(out, format!("{path}[{k}]"), "needs exactly one of `cell` or `empty = true`"),
        }
        if !s.t.is_finite() {
            diag(out, format!("{path}[{k}].t"), "time must be finite");
        }
    }
    if steps.windows(2).any(|w| !(w[1].t > w[0].t)) {
        diag(out, path, "step times must be strictly increasing");
    }
}

/// Every violation in the config, without running anything.
pub fn validate(config: &ExperimentConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let e = &config.engine;
    if e.cutoff < 2 || e.cutoff > MAX_CUTOFF {
        diag(&mut out, "engine.cutoff", format!("dimension {} outside [2, {MAX_CUTOFF}]", e.cutoff));
    }
    match &e.initial {
        InitialConfig::Point { x, xi } => {
            if !(x.is_finite() && xi.is_finite()) {
                diag(&mut out, "engine.initial", "point coordinates must be finite");
            } else if (x * x + xi * xi) / 2.0 > e.cutoff as f64 / 4.0 {
                diag(&mut out, "engine.initial", "initial point lies beyond the truncation guard |α|² ≤ cutoff/4");
            }
        }
        InitialConfig::Fock { n } if *n >= e.cutoff => {
            diag(&mut out, "engine.initial.n", format!("level {n} not below the cutoff {}", e.cutoff));
        }
        InitialConfig::Mixture { populations } => {
            if populations.is_empty() || populations.len() > e.cutoff {
                diag(&mut out, "engine.initial.populations", "need between 1 and cutoff populations");
            }
            if populations.iter().any(|p| !(*p >= 0.0)) || !(populations.iter().sum::<f64>() > 0.0) {
                diag(&mut out, "engine.initial.populations", "populations must be nonnegative with positive sum");
            }
        }
        _ => {}
    }
    match &e.hamiltonian {
        HamiltonianConfig::Harmonic { offset } | HamiltonianConfig::Quartic { offset, .. } if !offset.is_finite() => {
            diag(&mut out, "engine.hamiltonian.offset", "must be finite");
        }
        HamiltonianConfig::Quartic { lambda, .. } if !(lambda.is_finite() && *lambda >= 0.0) => {
            diag(&mut out, "engine.hamiltonian.lambda", "must be finite and nonnegative");
        }
        HamiltonianConfig::Symbol { terms } if terms.iter().any(|(_, _, c)| !c.is_finite()) => {
            diag(&mut out, "engine.hamiltonian.terms", "coefficients must be finite");
        }
        _ => {}
    }

    let n = &config.numeric;
    if !(2..=64).contains(&n.quad_order) {
        diag(&mut out, "numeric.quad_order", format!("{} outside [2, 64]", n.quad_order));
    }
    for (name, v) in [
        ("panel_width", n.panel_width),
        ("tolerance", n.tolerance),
        ("tail_tolerance", n.tail_tolerance),
        ("region_radius", n.region_radius),
    ] {
        if !(v.is_finite() && v > 0.0) {
            diag(&mut out, format!("numeric.{name}"), format!("{v} must be positive"));
        }
    }
    if !(n.threshold > 0.0 && n.threshold < 1.0) {
        diag(&mut out, "numeric.threshold", format!("{} outside (0, 1)", n.threshold));
    }
    if n.max_refinements > 8 {
        diag(&mut out, "numeric.max_refinements", "at most 8 refinements");
    }
    if let Some(t) = n.check_tolerance {
        if !(t.is_finite() && t >= 0.0) {
            diag(&mut out, "numeric.check_tolerance", "must be nonnegative");
        }
    }

    let x = &config.experiment;
    let order = n.quad_order;
    check_cells(&mut out, "experiment.cells", &x.cells, order, true);
    if x.times.iter().any(|t| !t.is_finite()) {
        diag(&mut out, "experiment.times", "times must be finite");
    }
    check_history(&mut out, "experiment.alpha", &x.alpha, order);
    check_history(&mut out, "experiment.beta", &x.beta, order);
    check_cells(&mut out, "experiment.pointer_cells", &x.pointer_cells, order, true);
    if !(x.bounds_radius > 0.0) {
        diag(&mut out, "experiment.bounds_radius", "must be positive");
    }
    if let Some(k) = x.split {
        if k >= x.pointer_cells.len() {
            diag(&mut out, "experiment.split", format!("index {k} beyond the {} pointer cells", x.pointer_cells.len()));
        }
    }
    for (name, v) in [("f", &x.f), ("g", &x.g)] {
        if phase_function(v).is_err() {
            diag(&mut out, format!("experiment.{name}"), format!("unknown observable '{v}'"));
        }
    }
    for (k, o) in x.observables.iter().enumerate() {
        if Observable::parse(o).is_err() {
            diag(&mut out, format!("experiment.observables[{k}]"), format!("unknown observable '{o}'"));
        }
    }
    if !(x.t1 > x.t0) {
        diag(&mut out, "experiment.t1", "must exceed t0");
    }
    if x.n_times < 2 {
        diag(&mut out, "experiment.n_times", "need at least 2 time points");
    }
    if !(x.s < x.s_mid && x.s_mid < x.t) {
        diag(&mut out, "experiment.s_mid", "need s < s_mid < t");
    }
    if !(x.disc_radius > 0.0 && x.spacing > 0.0 && x.spacing <= x.disc_radius) {
        diag(&mut out, "experiment.spacing", "need 0 < spacing ≤ disc_radius");
    }
    if !(x.dt > 0.0) {
        diag(&mut out, "experiment.dt", "must be positive");
    }
    if let Some(g) = x.damped_gamma {
        if !(g >= 0.0) {
            diag(&mut out, "experiment.damped_gamma", "must be nonnegative");
        }
    }
    if !(x.grid_max > x.grid_min) || x.grid_points < 2 {
        diag(&mut out, "experiment.grid_points", "need grid_min < grid_max and at least 2 points");
    }
    for (name, c) in [("cell_a", x.cell_a), ("cell_b", x.cell_b)] {
        if let Some(c) = c {
            check_cells(&mut out, &format!("experiment.{name}"), &[c], order, false);
        }
    }
    out
}

fn phase_function(id: &str) -> crate::Result<PhaseFunction> {
    match id {
        "1" | "one" => Ok(PhaseFunction::One),
        "x" => Ok(PhaseFunction::X),
        "p" | "xi" => Ok(PhaseFunction::Xi),
        other => Err(QprocError::UnknownObservable(other.into())),
    }
}

// ----------------------------------------------------------------- envelope

/// A complex result with its quadrature error estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportedValue {
    pub name: String,
    pub re: f64,
    pub im: f64,
    pub quad_error: f64,
}

impl ReportedValue {
    fn new(name: impl Into<String>, v: C64, quad_error: f64) -> Self {
        ReportedValue { name: name.into(), re: v.re, im: v.im, quad_error }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeakageSummary {
    /// Initial-state weight on the top two number levels.
    pub initial_state: f64,
    pub flag: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultEnvelope {
    pub experiment_id: String,
    pub subcommand: String,
    pub input_digest: String,
    pub seed: u64,
    pub cutoff: usize,
    pub numeric: NumericConfig,
    pub checks: Vec<Check>,
    pub values: Vec<ReportedValue>,
    /// Subcommand-specific arrays (eigenvalues, tables).
    pub data: serde_json::Map<String, serde_json::Value>,
    pub leakage: Option<LeakageSummary>,
    pub error: Option<String>,
    pub pass: bool,
    pub wall_time_s: f64,
}

impl ResultEnvelope {
    fn new(sub: Subcommand, config: &ExperimentConfig) -> Self {
        ResultEnvelope {
            experiment_id: config.id.clone().unwrap_or_else(|| sub.name().to_string()),
            subcommand: sub.name().to_string(),
            input_digest: config.digest(),
            seed: config.seed,
            cutoff: config.engine.cutoff,
            numeric: config.numeric,
            checks: Vec::new(),
            values: Vec::new(),
            data: serde_json::Map::new(),
            leakage: None,
            error: None,
            pass: false,
            wall_time_s: 0.0,
        }
    }

    fn check(&mut self, c: Check) {
        self.checks.push(c);
    }

    fn put(&mut self, key: &str, v: impl Serialize) {
        self.data.insert(key.into(), serde_json::to_value(v).expect("serializable"));
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("envelope serializes")
    }
}

fn at_most(name: &str, value: f64, tolerance: f64) -> Check {
    Check::at_most(name, value, tolerance)
}

/// A finished run: the envelope and the CSV tables to write beside it.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub envelope: ResultEnvelope,
    pub tables: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunError {
    Config(Vec<Diagnostic>),
    Module { context: String, error: QprocError },
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(d) => {
                let lines: Vec<String> = d.iter().map(|x| x.to_string()).collect();
                write!(f, "config error: {}", lines.join("; "))
            }
            RunError::Module { context, error } => write!(f, "{context}: {error}"),
        }
    }
}

impl RunError {
    /// 2 for config problems (including module validation), 3 for numerical
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Module { error, .. } if error.is_numerical() => 3,
            RunError::Module { .. } => 2,
        }
    }
}

trait Context<T> {
    fn ctx(self, context: &str) -> Result<T, RunError>;
}

impl<T> Context<T> for crate::Result<T> {
    fn ctx(self, context: &str) -> Result<T, RunError> {
        self.map_err(|error| RunError::Module { context: context.to_string(), error })
    }
}

// ------------------------------------------------------------------ runners

/// Validates, builds the engine and dispatches to the subcommand.
pub fn run(sub: Subcommand, config: &ExperimentConfig) -> Result<RunOutput, RunError> {
    let diagnostics = validate(config);
    if !diagnostics.is_empty() {
        return Err(RunError::Config(diagnostics));
    }
    let start = Instant::now();
    let mut env = ResultEnvelope::new(sub, config);
    let mut tables = Vec::new();
    // An external propagator table needs no engine.
    let engine = if sub == Subcommand::Reconstruct && config.experiment.table.is_some() {
        None
    } else {
        Some(config.build_engine().ctx("engine")?)
    };
    if let Some(e) = &engine {
        let l = e.rho().leakage();
        env.leakage = Some(LeakageSummary { initial_state: l, flag: LEAKAGE_FLAG, flagged: l > LEAKAGE_FLAG });
    }
    let engine = engine.as_ref();
    match sub {
        Subcommand::Axioms => run_axioms(config, engine.unwrap(), &mut env)?,
        Subcommand::Decfun => run_decfun(config, engine.unwrap(), &mut env)?,
        Subcommand::Interfere => run_interfere(config, engine.unwrap(), &mut env, &mut tables)?,
        Subcommand::Condition => run_condition(config, engine.unwrap(), &mut env)?,
        Subcommand::Correlate => run_correlate(config, engine.unwrap(), &mut env, &mut tables)?,
        Subcommand::Ctp => run_ctp(config, engine.unwrap(), &mut env)?,
        Subcommand::CkCheck => run_ck(config, engine.unwrap(), &mut env)?,
        Subcommand::Reversibility => run_reversibility(config, engine.unwrap(), &mut env)?,
        Subcommand::Reconstruct => run_reconstruct(config, engine, &mut env, &mut tables)?,
        Subcommand::Wigner => run_wigner(config, engine.unwrap(), &mut env, &mut tables)?,
    }
    env.pass = env.checks.iter().all(|c| c.pass);
    env.wall_time_s = start.elapsed().as_secs_f64();
    Ok(RunOutput { envelope: env, tables })
}

fn run_axioms(config: &ExperimentConfig, engine: &ProcessEngine, env: &mut ResultEnvelope) -> Result<(), RunError> {
    let x = &config.experiment;
    let cells: Vec<Cell> = x.cells.iter().map(|c| config.cell(c)).collect::<crate::Result<_>>().ctx("experiment.cells")?;
    let report = check_axioms(engine, &cells, &x.times).ctx("axioms")?;
    for c in report.checks(config.numeric.tolerance) {
        env.check(c);
    }
    env.put("report", report);
    Ok(())
}

fn run_decfun(config: &ExperimentConfig, engine: &ProcessEngine, env: &mut ResultEnvelope) -> Result<(), RunError> {
    let x = &config.experiment;
    let a = config.history(&x.alpha, "alpha").ctx("experiment.alpha")?;
    let b = config.history(&x.beta, "beta").ctx("experiment.beta")?;
    let main = phi_cells(engine, &a, &b, x.route).ctx("decfun")?;
    let other_route = match main.route {
        Route::BargmannQuadrature => Route::OracleTrace,
        Route::OracleTrace => Route::BargmannQuadrature,
    };
    let other = phi_cells(engine, &a, &b, other_route).ctx("decfun (cross-check route)")?;
    let swapped = phi_cells(engine, &b, &a, main.route).ctx("decfun (swapped)")?;
    env.values.push(ReportedValue::new("phi", main.value, main.quad_error));
    env.values.push(ReportedValue::new("phi_cross_route", other.value, other.quad_error));
    env.put("route", main.route);
    let err = main.quad_error.max(other.quad_error);
    env.check(at_most("route_agreement", (main.value - other.value).norm(), config.tol(1e-6_f64.max(err))));
    env.check(at_most("hermiticity", (swapped.value - main.value.conj()).norm(), config.tol(1e-10_f64.max(err))));
    env.check(at_most("boundedness", main.value.norm() - 1.0, 1e-6));
    Ok(())
}

fn run_interfere(
    config: &ExperimentConfig,
    engine: &ProcessEngine,
    env: &mut ResultEnvelope,
    tables: &mut Vec<(String, String)>,
) -> Result<(), RunError> {
    let x = &config.experiment;
    let a = config.history(&x.alpha, "alpha").ctx("experiment.alpha")?;
    let r = config.history(&x.beta, "reference").ctx("experiment.beta")?;
    let scan = history_scan(engine, &a, &r, PROTOCOL_POINTS).ctx("interfere")?;
    tables.push(("interference.csv".into(), scan.to_csv()));
    let fit = extract_phase(&scan).ctx("interfere")?;
    let phi = phi_cells(engine, &a, &r, Route::OracleTrace).ctx("interfere (direct functional)")?;
    env.values.push(ReportedValue::new("phase_fit", fit.complex(), 0.0));
    env.values.push(ReportedValue::new("phi", phi.value, phi.quad_error));
    env.put("fit", fit);
    env.check(at_most("protocol_agreement", (fit.complex() - phi.value).norm(), config.tol(1e-5 + phi.quad_error)));
    Ok(())
}

fn run_condition(config: &ExperimentConfig, engine: &ProcessEngine, env: &mut ResultEnvelope) -> Result<(), RunError> {
    let x = &config.experiment;
    let cells: Vec<Cell> = x.pointer_cells.iter().map(|c| config.cell(c)).collect::<crate::Result<_>>().ctx("experiment.pointer_cells")?;
    let bounds = Cell::covering(x.bounds_radius).with_order(config.numeric.quad_order);
    let field = PointerField::new(cells, x.include_rest, bounds).ctx("experiment.pointer_cells")?;
    let f = phase_function(&x.f).ctx("experiment.f")?;
    let g = phase_function(&x.g).ctx("experiment.g")?;
    let table = conditional_pair(engine, &f, &g, &field, x.time).ctx("condition")?;
    let corr = conditional_correlation(engine, &f, &g, &field, x.time).ctx("condition")?;
    let unit = conditional_pair(engine, &PhaseFunction::One, &PhaseFunction::One, &field, x.time).ctx("condition")?;
    let unit_defect = unit.entries.iter().flatten().flatten().map(|v| (v - 1.0).norm()).fold(0.0, f64::max);
    for (i, row) in table.entries.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if let Some(v) = v {
                env.values.push(ReportedValue::new(format!("pair[{i}][{j}]"), *v, table.quad_error));
            }
        }
    }
    for (i, v) in corr.entries.iter().enumerate() {
        if let Some(v) = v {
            env.values.push(ReportedValue::new(format!("correlation[{i}]"), *v, corr.quad_error));
        }
    }
    env.put("dropped", &table.dropped);
    env.check(at_most("unit_normalization", unit_defect, config.tol(1e-10)));
    if let Some(k) = x.split {
        let fine = field.split(k).ctx("experiment.split")?;
        let defect = tower_check(engine, &f, &g, &field, &fine, x.time).ctx("tower check")?;
        env.check(at_most("tower_property", defect, config.tol(1e-8 + config.numeric.tolerance)));
    }
    Ok(())
}

fn time_grid(config: &ExperimentConfig) -> crate::Result<(Vec<Observable>, TimeGrid)> {
    let x = &config.experiment;
    let obs = x.observables.iter().map(|o| Observable::parse(o)).collect::<crate::Result<Vec<_>>>()?;
    Ok((obs, TimeGrid::uniform(x.t0, x.t1, x.n_times)?))
}

fn run_correlate(
    config: &ExperimentConfig,
    engine: &ProcessEngine,
    env: &mut ResultEnvelope,
    tables: &mut Vec<(String, String)>,
) -> Result<(), RunError> {
    let (obs, grid) = time_grid(config).ctx("experiment")?;
    let k = oracle_kernels(engine, &obs, &grid).ctx("correlate")?;
    tables.push(("kernels_delta.csv".into(), k.to_csv(KernelKind::Delta)));
    tables.push(("kernels_k.csv".into(), k.to_csv(KernelKind::K)));
    env.check(at_most("kernel_consistency", k.consistency_defect(), config.tol(1e-10)));
    env.put("mean", &k.mean);
    // A kinematic coherent-state process has the vacuum table for (x, p).
    let names: Vec<&str> = k.observables.iter().map(String::as_str).collect();
    if engine.is_kinematic() && matches!(engine.initial(), Initial::Point(_)) && names == ["x", "p"] {
        let reference = kinematic_particle_kernels(0.5, 0.5, 0.0, &grid).ctx("correlate")?;
        let d = (&k.i_delta - &reference.i_delta).iter().chain((&k.i_k - &reference.i_k).iter()).map(|z| z.norm()).fold(0.0, f64::max);
        env.check(at_most("kinematic_table", d, config.tol(1e-8)));
    }
    Ok(())
}

fn random_currents(rng: &mut ChaCha8Rng, grid: &TimeGrid, n_obs: usize, amp: f64) -> crate::Result<CurrentPair> {
    let mut draw = || (0..n_obs).map(|_| (0..grid.len()).map(|_| rng.gen_range(-amp..amp)).collect()).collect();
    let jp = draw();
    let jm = draw();
    CurrentPair::new(grid.clone(), jp, jm)
}

fn run_ctp(config: &ExperimentConfig, engine: &ProcessEngine, env: &mut ResultEnvelope) -> Result<(), RunError> {
    let x = &config.experiment;
    let (obs, grid) = time_grid(config).ctx("experiment")?;
    let kernels = oracle_kernels(engine, &obs, &grid).ctx("ctp")?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut worst: f64 = 0.0;
    let mut herm: f64 = 0.0;
    for _ in 0..x.samples {
        let j = random_currents(&mut rng, &grid, obs.len(), x.current_amplitude).ctx("ctp")?;
        let exact = ctp_exact(engine, &obs, &j, None).ctx("ctp")?;
        let gauss = gaussian_ctp(&kernels, &j).ctx("ctp")?;
        worst = worst.max((exact - gauss).norm());
        let swapped = ctp_exact(engine, &obs, &j.swapped(), None).ctx("ctp")?;
        herm = herm.max((swapped - exact.conj()).norm());
    }
    let zero = ctp_exact(engine, &obs, &CurrentPair::zeros(grid.clone(), obs.len()), None).ctx("ctp")?;
    env.values.push(ReportedValue::new("z_zero", zero, 0.0));
    env.check(at_most("gaussian_agreement", worst, config.tol(1e-4)));
    env.check(at_most("hermiticity", herm, 1e-10));
    env.check(at_most("normalization", (zero - 1.0).norm(), 1e-10));
    Ok(())
}

fn point(p: [f64; 2]) -> PhasePoint {
    PhasePoint::new(p[0], p[1])
}

fn run_ck(config: &ExperimentConfig, engine: &ProcessEngine, env: &mut ResultEnvelope) -> Result<(), RunError> {
    let x = &config.experiment;
    let region = Cell::covering(config.numeric.region_radius);
    let r = chapman_kolmogorov_check(
        engine,
        point(x.z1),
        point(x.z1p),
        x.t,
        point(x.z0),
        point(x.z0p),
        x.s,
        x.s_mid,
        &region,
        config.numeric.quad_order,
    )
    .ctx("ck-check")?;
    env.put("report", r);
    let default = if engine.is_kinematic() { 1e-6 } else { 1e-5 };
    env.check(at_most("composition_defect", r.defect, config.tol(default)));
    Ok(())
}

fn run_reversibility(config: &ExperimentConfig, engine: &ProcessEngine, env: &mut ResultEnvelope) -> Result<(), RunError> {
    let x = &config.experiment;
    let prop = match x.damped_gamma {
        Some(gamma) => DensityPropagator::Damped { gamma },
        None => DensityPropagator::Unitary(engine.clone()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let t_max = x.t - x.s;
    let samples: Vec<PropagatorSample> = (0..x.samples).map(|_| PropagatorSample::random(&mut rng, x.sample_radius, t_max)).collect();
    let region = Cell::covering(config.numeric.region_radius);
    let sym = propagator_symmetry_check(&prop, &samples, &region, config.seed).ctx("reversibility")?;
    let rev = time_reversibility_check(&prop, (0.0, t_max), &samples).ctx("reversibility")?;
    env.put("symmetry", sym);
    env.check(at_most("hermiticity", sym.hermiticity, 1e-10));
    env.check(at_most("trace_preservation", sym.trace_preservation, 1e-6));
    env.check(Check::at_least_neg("positivity", sym.positivity_min, 1e-8));
    env.check(at_most("time_reversal", rev, config.tol(1e-8)));
    Ok(())
}

fn run_reconstruct(
    config: &ExperimentConfig,
    engine: Option<&ProcessEngine>,
    env: &mut ResultEnvelope,
    tables: &mut Vec<(String, String)>,
) -> Result<(), RunError> {
    let x = &config.experiment;
    let table = match (&x.table, engine) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                RunError::Config(vec![Diagnostic { path: "experiment.table".into(), message: format!("{}: {e}", path.display()) }])
            })?;
            PropagatorTable::from_csv(&text).ctx("experiment.table")?
        }
        (None, Some(e)) => {
            let grid = PhaseGrid::disc(x.disc_radius, x.spacing).ctx("reconstruct grid")?;
            let t = PropagatorTable::from_engine(e, grid, &[(0.0, 0.0), (x.dt, 0.0)]).ctx("propagator table")?;
            tables.push(("propagator_table.csv".into(), t.to_csv()));
            t
        }
        (None, None) => unreachable!("engine is built when no table is given"),
    };
    let sub = reconstruct_subspace(&table, config.numeric.threshold).ctx("reconstruct")?;
    let energies = extract_hamiltonian(&table, &sub, x.dt).ctx("reconstruct")?;
    env.put("subspace_dim", sub.dim());
    env.put("eigenvalues", &energies);
    env.put("gram_spectrum", &sub.spectrum);
    env.check(at_most("projector_idempotence", sub.projector_defect(), 1e-8));
    if !x.expected_eigenvalues.is_empty() {
        let d = if energies.len() < x.expected_eigenvalues.len() {
            f64::INFINITY
        } else {
            x.expected_eigenvalues.iter().zip(&energies).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        env.check(at_most("expected_spectrum", d, config.tol(1e-3)));
    }
    Ok(())
}

fn run_wigner(
    config: &ExperimentConfig,
    engine: &ProcessEngine,
    env: &mut ResultEnvelope,
    tables: &mut Vec<(String, String)>,
) -> Result<(), RunError> {
    let x = &config.experiment;
    let rho = engine.rho();
    let ax = axis(x.grid_min, x.grid_max, x.grid_points);
    let w = wigner_function(rho, &ax, &ax).ctx("wigner")?;
    tables.push(("wigner.csv".into(), w.to_csv()));
    env.put("min", w.min());
    env.put("normalization", w.normalization());
    env.check(at_most("normalization", (w.normalization() - 1.0).abs(), config.tol(1e-4)));
    if let (Some(a), Some(b)) = (x.cell_a, x.cell_b) {
        let a = config.cell(&a).ctx("experiment.cell_a")?;
        let b = config.cell(&b).ctx("experiment.cell_b")?;
        let v = wigner_decfun_cells(rho, &a, &b).ctx("wigner")?;
        let oracle = wigner_oracle_cells(rho, &a, &b, 16).ctx("wigner oracle")?;
        env.values.push(ReportedValue::new("phi_wigner", v.value, v.quad_error));
        env.values.push(ReportedValue::new("phi_oracle", oracle, 0.0));
        env.check(at_most("oracle_agreement", (v.value - oracle).norm(), config.tol(1e-4)));
    }
    Ok(())
}

/// Runs and writes `result.json` plus tables into `dir`; returns the exit
/// status (0 pass, 1 check failure, 2 config error, 3 numerical error).
pub fn execute(sub: Subcommand, config: &ExperimentConfig, dir: &Path) -> std::io::Result<i32> {
    std::fs::create_dir_all(dir)?;
    let (envelope, code) = match run(sub, config) {
        Ok(out) => {
            if config.output.csv {
                for (name, text) in &out.tables {
                    std::fs::write(dir.join(name), text)?;
                }
            }
            let code = if out.envelope.pass { 0 } else { 1 };
            (out.envelope, code)
        }
        Err(e) => {
            let mut env = ResultEnvelope::new(sub, config);
            env.error = Some(e.to_string());
            if let RunError::Config(d) = &e {
                env.put("diagnostics", d);
            }
            (env, e.exit_code())
        }
    };
    std::fs::write(dir.join("result.json"), envelope.to_json())?;
    Ok(code)
}
