//! Decoherence functionals on histories of phase-space events.
//!
//! Two independent routes are provided. The chain route sums products of
//! propagator kernels `<z_a|e^{-iH(t_a-t_b)}|z_b>` over quadrature nodes; the
//! oracle route traces Heisenberg-picture class operators. The functional is
//! bilinear in the event weights:
//! `Φ(α, β) = Tr(C_n(t_n)⋯C_1(t_1) ρ C'_1(t'_1)⋯C'_m(t'_m))`.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::coherent::{
    bargmann_invariant, coherent_components, coherent_vector, components_matrix, guard_nodes, level_mass_outside,
    node_operator, Cell, CoherentFamily, NodeSet, PhaseFunction, PhasePoint, QuadratureSpec, Region, ORDER_STEP,
};
use crate::error::{QprocError, Result};
use crate::fock::{trace_product, CVector, Evolution, FockOperator};
use crate::symbol::{anti_normal_operator, Polynomial};

/// Largest `n + m` evaluated by the chain route before falling back.
pub const CHAIN_STEP_CAP: usize = 4;

/// Initial-state mass allowed outside the covering cell that stands in for Ω.
pub const COVERING_MASS: f64 = 1e-10;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

#[derive(Debug, Clone)]
pub enum Initial {
    Point(PhasePoint),
    Density(FockOperator),
}

#[derive(Debug, Clone)]
pub enum Hamiltonian {
    Zero,
    Operator(FockOperator),
    /// P-symbol, quantized anti-normally at the family cutoff.
    Symbol(Polynomial),
}

/// A quantum process: coherent family, initial condition and dynamics.
#[derive(Debug, Clone)]
pub struct ProcessEngine {
    family: CoherentFamily,
    initial: Initial,
    hamiltonian: Option<FockOperator>,
    evolution: Option<Evolution>,
    rho: FockOperator,
    components: Vec<(f64, CVector)>,
}

impl ProcessEngine {
    pub fn new(family: CoherentFamily, initial: Initial, hamiltonian: Hamiltonian) -> Result<Self> {
        family.quad.validate()?;
        let dim = family.cutoff;
        let rho = match &initial {
            Initial::Point(z) => {
                let v = coherent_vector(*z, dim)?;
                FockOperator::outer(&v, &v)
            }
            Initial::Density(r) => {
                if r.dim() != dim {
                    return Err(QprocError::InvalidDimension { dim: r.dim(), reason: "initial density must match the cutoff" });
                }
                r.validate_density(1e-10)?;
                r.clone()
            }
        };
        let hamiltonian = match hamiltonian {
            Hamiltonian::Zero => None,
            Hamiltonian::Operator(h) => {
                if h.dim() != dim {
                    return Err(QprocError::InvalidDimension { dim: h.dim(), reason: "Hamiltonian must match the cutoff" });
                }
                Some(h)
            }
            Hamiltonian::Symbol(p) => Some(anti_normal_operator(&p, dim)?),
        };
        let evolution = hamiltonian.as_ref().map(Evolution::new).transpose()?;
        let components = match &initial {
            Initial::Point(z) => vec![(1.0, coherent_components(*z, dim))],
            Initial::Density(r) => {
                let h = (r.matrix() + r.matrix().adjoint()) * C64::new(0.5, 0.0);
                let eig = h.symmetric_eigen();
                eig.eigenvalues
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| **p > 1e-15)
                    .map(|(k, p)| (*p, eig.eigenvectors.column(k).into_owned()))
                    .collect()
            }
        };
        Ok(ProcessEngine { family, initial, hamiltonian, evolution, rho, components })
    }

    /// Kinematic engine started from the vacuum.
    pub fn vacuum(family: CoherentFamily) -> Result<Self> {
        ProcessEngine::new(family, Initial::Point(PhasePoint::ORIGIN), Hamiltonian::Zero)
    }

    pub fn family(&self) -> &CoherentFamily {
        &self.family
    }

    pub fn initial(&self) -> &Initial {
        &self.initial
    }

    pub fn dim(&self) -> usize {
        self.family.cutoff
    }

    /// Oracle realization of the initial state.
    pub fn rho(&self) -> &FockOperator {
        &self.rho
    }

    /// Pure components `(p_k, ψ_k)` of the initial state.
    pub fn components(&self) -> &[(f64, CVector)] {
        &self.components
    }

    pub fn is_pure(&self) -> bool {
        self.components.len() == 1 && (self.components[0].0 - 1.0).abs() < 1e-10
    }

    pub fn is_kinematic(&self) -> bool {
        self.hamiltonian.is_none()
    }

    pub fn hamiltonian(&self) -> Option<&FockOperator> {
        self.hamiltonian.as_ref()
    }

    pub fn evolution(&self) -> Option<&Evolution> {
        self.evolution.as_ref()
    }

    /// `exp(-iHt)`; the identity for kinematic engines.
    pub fn unitary(&self, t: f64) -> FockOperator {
        match &self.evolution {
            Some(e) => e.unitary(t),
            None => FockOperator::identity(self.dim()),
        }
    }

    /// Heisenberg-picture operator at time `t`.
    pub fn heisenberg(&self, op: &FockOperator, t: f64) -> FockOperator {
        match &self.evolution {
            Some(e) => e.heisenberg(op, t),
            None => op.clone(),
        }
    }

    /// Smallest radius whose disc holds all but `mass` of the state at each of
    /// the given times.
    pub fn state_radius(&self, mass: f64, times: &[f64]) -> f64 {
        let dim = self.dim();
        let mut diags: Vec<Vec<f64>> = Vec::new();
        for &t in times.iter().chain(std::iter::once(&0.0)) {
            let u = self.unitary(t);
            let r = u.mul(&self.rho).mul(&u.adjoint());
            diags.push((0..dim).map(|n| r.matrix()[(n, n)].re.max(0.0)).collect());
        }
        let outside = |r: f64| {
            diags
                .iter()
                .map(|d| d.iter().enumerate().map(|(n, p)| p * level_mass_outside(n, r)).sum::<f64>())
                .fold(0.0, f64::max)
        };
        let mut r = 0.5;
        while outside(r) >= mass && r < 100.0 {
            r += 0.1;
        }
        r
    }

    /// Square cell standing in for the full sample space.
    pub fn covering_cell(&self, times: &[f64]) -> Cell {
        let r = self.state_radius(COVERING_MASS, times);
        Cell::covering((10.0 * r).ceil() / 10.0)
    }
}

/// One event of a history.
#[derive(Debug, Clone)]
pub enum Event {
    /// `∫_region dz f(z)|z><z|`.
    Region { region: Region, weight: PhaseFunction },
    /// The rank-one event `|z><z|`.
    Point(PhasePoint),
}

impl Event {
    pub fn cell(c: Cell) -> Self {
        Event::Region { region: Region::from(c), weight: PhaseFunction::One }
    }

    pub fn region(region: Region) -> Self {
        Event::Region { region, weight: PhaseFunction::One }
    }

    pub fn weighted(region: Region, weight: PhaseFunction) -> Self {
        Event::Region { region, weight }
    }

    pub fn empty() -> Self {
        Event::region(Region::empty())
    }

    pub fn nodes(&self, extra_order: usize, panel_width: f64) -> NodeSet {
        match self {
            Event::Region { region, weight } => NodeSet::from_region(region, weight, extra_order, panel_width),
            Event::Point(z) => NodeSet::single(*z),
        }
    }

    fn has_quadrature(&self) -> bool {
        matches!(self, Event::Region { .. })
    }

    pub fn operator(&self, family: &CoherentFamily, extra_order: usize) -> Result<FockOperator> {
        let nodes = self.nodes(extra_order, family.quad.panel_width);
        guard_nodes(&nodes, family)?;
        Ok(node_operator(&nodes, family.cutoff))
    }
}

/// Time-ordered list of events.
#[derive(Debug, Clone)]
pub struct History {
    steps: Vec<(Event, f64)>,
    pub label: String,
}

impl History {
    pub fn new(steps: Vec<(Event, f64)>, label: impl Into<String>) -> Result<Self> {
        if steps.iter().any(|(_, t)| !t.is_finite()) {
            return Err(QprocError::Validation("history times must be finite".into()));
        }
        if steps.windows(2).any(|w| !(w[1].1 > w[0].1)) {
            return Err(QprocError::Validation("history times must be strictly increasing".into()));
        }
        Ok(History { steps, label: label.into() })
    }

    /// History with no events: the unit class operator.
    pub fn trivial() -> Self {
        History { steps: Vec::new(), label: "1".into() }
    }

    pub fn cells(steps: &[(Cell, f64)]) -> Result<Self> {
        History::new(steps.iter().map(|(c, t)| (Event::cell(*c), *t)).collect(), "cells")
    }

    pub fn single(event: Event, t: f64) -> Self {
        History { steps: vec![(event, t)], label: String::new() }
    }

    pub fn steps(&self) -> &[(Event, f64)] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.steps.iter().map(|(_, t)| *t).collect()
    }

    /// Replaces the event at step `k`.
    pub fn with_event(&self, k: usize, event: Event) -> Self {
        let mut h = self.clone();
        h.steps[k].0 = event;
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    BargmannQuadrature,
    OracleTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecoherenceValue {
    pub value: C64,
    pub quad_error: f64,
    pub route: Route,
}

// ---------------------------------------------------------------- chain route

/// Nodes of one stage of the closed chain, with their Fock components cached
/// when the dynamics needs them.
struct Stage {
    nodes: NodeSet,
    alphas: Vec<C64>,
    time: f64,
    comps: Option<DMatrix<C64>>,
}

impl Stage {
    fn new(nodes: NodeSet, time: f64, engine: &ProcessEngine) -> Stage {
        let alphas = nodes.points.iter().map(PhasePoint::alpha).collect();
        let comps = if engine.is_kinematic() { None } else { Some(components_matrix(&nodes.points, engine.dim())) };
        Stage { nodes, alphas, time, comps }
    }
}

enum Anchor<'a> {
    Point(PhasePoint),
    Vector(&'a CVector),
}

/// `y_a = Σ_b <z_a|z_b> x_b` from the analytic overlap, skipping negligible pairs.
fn overlap_apply(to: &[C64], from: &[C64], x: &[C64]) -> Vec<C64> {
    let half_from: Vec<f64> = from.iter().map(|b| 0.5 * b.norm_sqr()).collect();
    to.iter()
        .map(|a| {
            let ha = 0.5 * a.norm_sqr();
            let ac = a.conj();
            let mut acc = ZERO;
            for ((b, hb), xb) in from.iter().zip(&half_from).zip(x) {
                let e = ac * b - ha - hb;
                if e.re > -60.0 {
                    acc += e.exp() * xb;
                }
            }
            acc
        })
        .collect()
}

/// Evaluates the closed chain anchor → stages → anchor, weighting each
/// stage by its node weights.
fn chain(engine: &ProcessEngine, anchor: Anchor<'_>, stages: &[Stage]) -> C64 {
    let dim = engine.dim();
    let anchor_vec = match anchor {
        Anchor::Vector(v) => Some(v.clone()),
        Anchor::Point(z) if !engine.is_kinematic() => Some(coherent_components(z, dim)),
        Anchor::Point(_) => None,
    };
    let anchor_alpha = match anchor {
        Anchor::Point(z) => Some(z.alpha()),
        Anchor::Vector(_) => None,
    };
    let Some(first) = stages.first() else {
        return match (&anchor_vec, anchor_alpha) {
            (Some(v), _) => v.dotc(v),
            (None, _) => ONE,
        };
    };
    // Vector in the truncated space, for Fock links.
    let lift = |stage: &Stage, x: &[C64]| -> CVector {
        let comps = stage.comps.clone().unwrap_or_else(|| components_matrix(&stage.nodes.points, dim));
        &comps * CVector::from_column_slice(x)
    };
    let project = |stage: &Stage, v: &CVector| -> Vec<C64> {
        match &stage.comps {
            Some(c) => (c.adjoint() * v).iter().copied().collect(),
            None => (components_matrix(&stage.nodes.points, dim).adjoint() * v).iter().copied().collect(),
        }
    };
    let weigh = |stage: &Stage, y: Vec<C64>| -> Vec<C64> { y.iter().zip(&stage.nodes.weights).map(|(a, w)| a * w).collect() };

    // anchor → first stage
    let mut x = match (anchor_alpha, &anchor_vec) {
        (Some(a), None) => overlap_apply(&first.alphas, &[a], &[ONE]),
        (_, Some(v)) => {
            let v = engine.unitary(first.time).apply(v);
            project(first, &v)
        }
        _ => unreachable!(),
    };
    x = weigh(first, x);
    for w in stages.windows(2) {
        let (prev, next) = (&w[0], &w[1]);
        if x.iter().all(|v| *v == ZERO) {
            return ZERO;
        }
        let y = if engine.is_kinematic() {
            overlap_apply(&next.alphas, &prev.alphas, &x)
        } else {
            let v = engine.unitary(next.time - prev.time).apply(&lift(prev, &x));
            project(next, &v)
        };
        x = weigh(next, y);
    }
    // last stage → anchor
    let last = stages.last().expect("nonempty");
    match (anchor_alpha, &anchor_vec) {
        (Some(a), None) => overlap_apply(&[a], &last.alphas, &x)[0],
        (_, Some(v)) => {
            let u = engine.unitary(0.0 - last.time).apply(&lift(last, &x));
            v.dotc(&u)
        }
        _ => unreachable!(),
    }
}

/// Sums the chain over the pure components of the initial state.
fn chain_total(engine: &ProcessEngine, stages: &[Stage]) -> C64 {
    match engine.initial {
        Initial::Point(z) => chain(engine, Anchor::Point(z), stages),
        Initial::Density(_) => engine.components.iter().map(|(p, v)| chain(engine, Anchor::Vector(v), stages) * *p).sum(),
    }
}

/// Stage list `forward (time order)` then `backward (reverse time order)`.
fn build_stages(
    engine: &ProcessEngine,
    forward: &[(NodeSet, f64)],
    backward: &[(NodeSet, f64)],
) -> Vec<Stage> {
    forward
        .iter()
        .cloned()
        .chain(backward.iter().rev().cloned())
        .map(|(n, t)| Stage::new(n, t, engine))
        .collect()
}

fn check_ordered(points: &[(PhasePoint, f64)]) -> Result<()> {
    if points.iter().any(|(z, t)| !t.is_finite() || !z.x.is_finite() || !z.xi.is_finite()) {
        return Err(QprocError::Validation("vertices must be finite".into()));
    }
    if points.windows(2).any(|w| w[1].1 < w[0].1) {
        return Err(QprocError::Validation("vertex times must be ordered within each branch".into()));
    }
    Ok(())
}

fn point_stages(points: &[(PhasePoint, f64)]) -> Vec<(NodeSet, f64)> {
    points.iter().map(|(z, t)| (NodeSet::single(*z), *t)).collect()
}

/// Distribution function `υ^{n,m}` of the kinematic process.
pub fn upsilon_kinematic(
    engine: &ProcessEngine,
    forward: &[(PhasePoint, f64)],
    backward: &[(PhasePoint, f64)],
) -> Result<C64> {
    if !engine.is_kinematic() {
        return Err(QprocError::WrongEngine("kinematic distribution requested from an engine with dynamics"));
    }
    check_ordered(forward)?;
    check_ordered(backward)?;
    if let Initial::Point(z0) = engine.initial {
        let mut fwd = vec![z0];
        fwd.extend(forward.iter().map(|(z, _)| *z));
        let bwd: Vec<PhasePoint> = backward.iter().map(|(z, _)| *z).collect();
        return Ok(bargmann_invariant(&fwd, &bwd));
    }
    Ok(chain_total(engine, &build_stages(engine, &point_stages(forward), &point_stages(backward))))
}

/// Distribution function `υ^{n,m}` of a process with a Hamiltonian.
pub fn upsilon_dynamical(
    engine: &ProcessEngine,
    forward: &[(PhasePoint, f64)],
    backward: &[(PhasePoint, f64)],
) -> Result<C64> {
    if engine.is_kinematic() {
        return Err(QprocError::WrongEngine("dynamical distribution requested from a kinematic engine"));
    }
    check_ordered(forward)?;
    check_ordered(backward)?;
    Ok(chain_total(engine, &build_stages(engine, &point_stages(forward), &point_stages(backward))))
}

/// `υ^{n,m}` for either kind of engine.
pub fn upsilon(engine: &ProcessEngine, forward: &[(PhasePoint, f64)], backward: &[(PhasePoint, f64)]) -> Result<C64> {
    if engine.is_kinematic() {
        upsilon_kinematic(engine, forward, backward)
    } else {
        upsilon_dynamical(engine, forward, backward)
    }
}

// --------------------------------------------------------------- oracle route

/// Heisenberg-picture class operator `C_n(t_n)⋯C_1(t_1)`.
pub fn class_operator(engine: &ProcessEngine, history: &History, extra_order: usize) -> Result<FockOperator> {
    let mut acc = FockOperator::identity(engine.dim());
    for (event, t) in history.steps() {
        let op = match event {
            Event::Point(z) => {
                let v = coherent_components(*z, engine.dim());
                guard_nodes(&NodeSet::single(*z), engine.family())?;
                FockOperator::outer(&v, &v)
            }
            _ => event.operator(engine.family(), extra_order)?,
        };
        acc = engine.heisenberg(&op, *t).mul(&acc);
    }
    Ok(acc)
}

/// Anti-time-ordered product `C'_1(t'_1)⋯C'_m(t'_m)` for the second slot.
pub fn backward_class_operator(engine: &ProcessEngine, history: &History, extra_order: usize) -> Result<FockOperator> {
    // The reversed product of the same factors is the transpose-order product.
    let mut acc = FockOperator::identity(engine.dim());
    for (event, t) in history.steps() {
        let op = match event {
            Event::Point(z) => {
                let v = coherent_components(*z, engine.dim());
                FockOperator::outer(&v, &v)
            }
            _ => event.operator(engine.family(), extra_order)?,
        };
        acc = acc.mul(&engine.heisenberg(&op, *t));
    }
    Ok(acc)
}

fn oracle_value(engine: &ProcessEngine, alpha: &History, beta: &History, extra: usize) -> Result<C64> {
    let ca = class_operator(engine, alpha, extra)?;
    let cb = backward_class_operator(engine, beta, extra)?;
    Ok(trace_product(&ca.mul(engine.rho()), &cb))
}

fn chain_value(engine: &ProcessEngine, alpha: &History, beta: &History, extra: usize, panel: f64) -> Result<C64> {
    let nodes = |h: &History| -> Result<Vec<(NodeSet, f64)>> {
        h.steps()
            .iter()
            .map(|(e, t)| {
                let n = e.nodes(extra, panel);
                if !engine.is_kinematic() {
                    guard_nodes(&n, engine.family())?;
                }
                Ok((n, *t))
            })
            .collect()
    };
    let fwd = nodes(alpha)?;
    let bwd = nodes(beta)?;
    Ok(chain_total(engine, &build_stages(engine, &fwd, &bwd)))
}

fn needs_quadrature(alpha: &History, beta: &History) -> bool {
    alpha.steps().iter().chain(beta.steps()).any(|(e, _)| e.has_quadrature())
}

/// `Φ(α, β)` with an order `p` versus `p + 4` error estimate, refining the
/// panels when the estimate exceeds the family tolerance.
pub fn phi_cells(engine: &ProcessEngine, alpha: &History, beta: &History, route: Route) -> Result<DecoherenceValue> {
    let route = if route == Route::BargmannQuadrature && alpha.len() + beta.len() > CHAIN_STEP_CAP {
        Route::OracleTrace
    } else {
        route
    };
    let quad = engine.family().quad;
    let mut panel = quad.panel_width;
    let mut worst = 0.0;
    for _ in 0..=quad.max_refinements {
        let eval = |extra: usize| match route {
            Route::OracleTrace => {
                let fam = engine.family().with_quadrature(QuadratureSpec { panel_width: panel, ..quad });
                let e = ProcessEngine { family: fam, ..engine.clone() };
                oracle_value(&e, alpha, beta, extra)
            }
            Route::BargmannQuadrature => chain_value(engine, alpha, beta, extra, panel),
        };
        let hi = eval(ORDER_STEP)?;
        if !needs_quadrature(alpha, beta) {
            return Ok(DecoherenceValue { value: hi, quad_error: 0.0, route });
        }
        let lo = eval(0)?;
        let err = (hi - lo).norm();
        if err <= quad.tolerance {
            return Ok(DecoherenceValue { value: hi, quad_error: err, route });
        }
        worst = err;
        panel *= 0.5;
    }
    Err(QprocError::QuadratureNonconvergence { error: worst, tolerance: quad.tolerance })
}

// ------------------------------------------------------------------- axioms

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AxiomReport {
    /// `max |Φ(∅, A)|`, `max |Φ(A, ∅)|`.
    pub null_triviality: f64,
    /// `max |Φ(B, A) − conj Φ(A, B)|`.
    pub hermiticity: f64,
    /// `min Re Φ(A, A)`.
    pub positivity: f64,
    /// `|Φ(Ω, Ω) − 1|`.
    pub normalization: f64,
    /// `max |Φ(A∪B, C) − Φ(A, C) − Φ(B, C)|` over disjoint `A`, `B`.
    pub additivity: f64,
    /// `max |Φ(A, B)| − 1`.
    pub boundedness: f64,
    /// Largest quadrature error estimate met.
    pub quad_error: f64,
    pub histories: usize,
    pub covering_radius: f64,
}

/// Pass/fail line of a named check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when `value ≤ tolerance`.
    pub fn at_most(name: &str, value: f64, tolerance: f64) -> Check {
        Check { name: name.into(), value, tolerance, pass: value <= tolerance }
    }

    /// Passes when `value ≥ -tolerance`.
    pub fn at_least_neg(name: &str, value: f64, tolerance: f64) -> Check {
        Check { name: name.into(), value, tolerance, pass: value >= -tolerance }
    }
}

impl AxiomReport {
    pub fn checks(&self, tolerance: f64) -> Vec<Check> {
        vec![
            Check::at_most("null_triviality", self.null_triviality, 0.0),
            Check::at_most("hermiticity", self.hermiticity, 1e-10),
            Check::at_least_neg("positivity", self.positivity, 1e-10),
            Check::at_most("normalization", self.normalization, 1e-4),
            Check::at_most("additivity", self.additivity, tolerance.max(self.quad_error)),
            Check::at_most("boundedness", self.boundedness, 1e-6),
        ]
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.checks(tolerance).iter().all(|c| c.pass)
    }
}

/// Single- and two-time histories over the cells, with the class operators of
/// both slots at orders `p` and `p + 4`.
struct CachedHistory {
    fwd: [FockOperator; 2],
    bwd: [FockOperator; 2],
}

fn cache(engine: &ProcessEngine, h: &History) -> Result<CachedHistory> {
    let fwd = [class_operator(engine, h, 0)?, class_operator(engine, h, ORDER_STEP)?];
    // Both orderings of a single factor coincide.
    let bwd = if h.len() <= 1 {
        fwd.clone()
    } else {
        [backward_class_operator(engine, h, 0)?, backward_class_operator(engine, h, ORDER_STEP)?]
    };
    Ok(CachedHistory { fwd, bwd })
}

fn cached_phi(engine: &ProcessEngine, a: &CachedHistory, b: &CachedHistory) -> (C64, f64) {
    let hi = trace_product(&a.fwd[1].mul(engine.rho()), &b.bwd[1]);
    let lo = trace_product(&a.fwd[0].mul(engine.rho()), &b.bwd[0]);
    (hi, (hi - lo).norm())
}

/// Worst-case axiom defects over single- and two-time histories built from
/// `cells` at `times`, using the oracle route.
pub fn check_axioms(engine: &ProcessEngine, cells: &[Cell], times: &[f64]) -> Result<AxiomReport> {
    if cells.len() < 2 {
        return Err(QprocError::Validation("axiom check needs at least two cells".into()));
    }
    if times.is_empty() {
        return Err(QprocError::Validation("axiom check needs at least one time".into()));
    }
    for i in 0..cells.len() {
        for j in i + 1..cells.len() {
            if cells[i].overlaps(&cells[j]) {
                return Err(QprocError::Validation(format!("cells {i} and {j} overlap")));
            }
        }
    }
    let mut times = times.to_vec();
    times.sort_by(f64::total_cmp);
    times.dedup();

    // Heisenberg cell operators per (cell, time) at both orders, shared by
    // every history built from them.
    let ops: Vec<Vec<[FockOperator; 2]>> = cells
        .iter()
        .map(|c| {
            let ev = Event::cell(*c);
            let base = [ev.operator(engine.family(), 0)?, ev.operator(engine.family(), ORDER_STEP)?];
            Ok(times.iter().map(|t| [engine.heisenberg(&base[0], *t), engine.heisenberg(&base[1], *t)]).collect())
        })
        .collect::<Result<_>>()?;
    let single = |c: usize, t: usize| CachedHistory { fwd: ops[c][t].clone(), bwd: ops[c][t].clone() };
    let mut cached: Vec<CachedHistory> = Vec::new();
    let mut histories = 0;
    for c in 0..cells.len() {
        for t in 0..times.len() {
            cached.push(single(c, t));
            histories += 1;
        }
    }
    for ta in 0..times.len() {
        for tb in ta + 1..times.len() {
            for ci in 0..cells.len() {
                for cj in 0..cells.len() {
                    let (a, b) = (&ops[ci][ta], &ops[cj][tb]);
                    cached.push(CachedHistory {
                        fwd: [b[0].mul(&a[0]), b[1].mul(&a[1])],
                        bwd: [a[0].mul(&b[0]), a[1].mul(&b[1])],
                    });
                    histories += 1;
                }
            }
        }
    }

    let mut report = AxiomReport {
        null_triviality: 0.0,
        hermiticity: 0.0,
        positivity: f64::INFINITY,
        normalization: 0.0,
        additivity: 0.0,
        boundedness: f64::NEG_INFINITY,
        quad_error: 0.0,
        histories,
        covering_radius: 0.0,
    };
    let mut values = vec![vec![ZERO; cached.len()]; cached.len()];
    for (i, a) in cached.iter().enumerate() {
        for (j, b) in cached.iter().enumerate() {
            let (v, err) = cached_phi(engine, a, b);
            values[i][j] = v;
            report.quad_error = report.quad_error.max(err);
            report.boundedness = report.boundedness.max(v.norm() - 1.0);
        }
        report.positivity = report.positivity.min(values[i][i].re);
    }
    for i in 0..cached.len() {
        for j in 0..cached.len() {
            report.hermiticity = report.hermiticity.max((values[j][i] - values[i][j].conj()).norm());
        }
    }

    // Null events in either slot, in first and second position.
    let null = cache(engine, &History::single(Event::empty(), times[0]))?;
    for c in &cached {
        report.null_triviality = report.null_triviality.max(cached_phi(engine, &null, c).0.norm());
        report.null_triviality = report.null_triviality.max(cached_phi(engine, c, &null).0.norm());
    }

    // Additivity in the first step of the first slot.
    for i in 0..cells.len() {
        for j in i + 1..cells.len() {
            let union = Region::from(cells[i]).union(&Region::from(cells[j]))?;
            for (k, &t) in times.iter().enumerate() {
                let hu = History::single(Event::region(union.clone()), t);
                let (ca, cb, cu) = (single(i, k), single(j, k), cache(engine, &hu)?);
                for c in &cached {
                    let d = cached_phi(engine, &cu, c).0 - cached_phi(engine, &ca, c).0 - cached_phi(engine, &cb, c).0;
                    report.additivity = report.additivity.max(d.norm());
                }
            }
        }
    }

    let omega = engine.covering_cell(&times);
    report.covering_radius = omega.x_range.1;
    let ho = History::single(Event::cell(omega), times[0]);
    let co = cache(engine, &ho)?;
    let (n, err) = cached_phi(engine, &co, &co);
    report.normalization = (n - ONE).norm();
    report.quad_error = report.quad_error.max(err);
    Ok(report)
}

// --------------------------------------------------------- hierarchy checks

/// Largest neighbour radius the marginal tail estimate has to clear.
fn anchor_radius(engine: &ProcessEngine, times: &[f64]) -> f64 {
    match engine.initial {
        Initial::Point(z) if engine.is_kinematic() => z.radius(),
        _ => engine.state_radius(1e-12, times),
    }
}

/// Estimated integrand weight outside `region` when marginalizing a vertex
/// whose neighbours lie within radius `r` (exact for rotation-invariant flows).
pub fn marginal_tail(region: &Region, r: f64) -> f64 {
    let d = region.inscribed_radius() - r;
    if d <= 0.0 {
        return 1.0;
    }
    (-0.5 * d * d).exp()
}

/// `|∫_region dz_k υ^{n+1,m} − υ^{n,m}|` without the tail guard.
pub fn kolmogorov_additivity_defect(
    engine: &ProcessEngine,
    forward: &[(PhasePoint, f64)],
    backward: &[(PhasePoint, f64)],
    marginal_index: usize,
    region: &Region,
) -> Result<f64> {
    if marginal_index >= forward.len() {
        return Err(QprocError::Validation(format!("marginal index {marginal_index} outside the forward branch")));
    }
    check_ordered(forward)?;
    check_ordered(backward)?;
    let panel = engine.family().quad.panel_width;
    let mut fwd = point_stages(forward);
    fwd[marginal_index].0 = NodeSet::from_region(region, &PhaseFunction::One, 0, panel);
    let integrated = chain_total(engine, &build_stages(engine, &fwd, &point_stages(backward)));
    let mut reduced = forward.to_vec();
    reduced.remove(marginal_index);
    let direct = upsilon(engine, &reduced, backward)?;
    Ok((integrated - direct).norm())
}

/// Kolmogorov additivity defect, refusing regions whose tail is too heavy.
pub fn kolmogorov_additivity_check(
    engine: &ProcessEngine,
    forward: &[(PhasePoint, f64)],
    backward: &[(PhasePoint, f64)],
    marginal_index: usize,
    region: &Region,
) -> Result<f64> {
    let times: Vec<f64> = forward.iter().chain(backward).map(|(_, t)| *t).collect();
    let r = forward
        .iter()
        .chain(backward)
        .map(|(z, _)| z.radius())
        .fold(anchor_radius(engine, &times), f64::max);
    let tail = marginal_tail(region, r);
    let tol = engine.family().quad.tail_tolerance;
    if tail > tol {
        return Err(QprocError::RegionTooSmall { tail, tolerance: tol });
    }
    kolmogorov_additivity_defect(engine, forward, backward, marginal_index, region)
}

/// `θ` with the equal-time convention `θ(0) = 1/2`.
pub fn theta(t: f64) -> f64 {
    if t > 0.0 {
        1.0
    } else if t < 0.0 {
        0.0
    } else {
        0.5
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..=p.len() {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

fn theta_chain(points: &[(PhasePoint, f64)]) -> f64 {
    points.windows(2).map(|w| theta(w[1].1 - w[0].1)).product()
}

/// Time-symmetric distribution `w^{n,m}`: the θ-weighted `υ^{n,m}` summed over
/// permutations of the forward entries and, separately, of the backward ones.
/// `upsilon` is only called on time-ordered arguments.
pub fn time_symmetric_w(
    forward: &[(PhasePoint, f64)],
    backward: &[(PhasePoint, f64)],
    upsilon: impl Fn(&[(PhasePoint, f64)], &[(PhasePoint, f64)]) -> Result<C64>,
) -> Result<C64> {
    let mut acc = ZERO;
    for pf in permutations(forward.len()) {
        let f: Vec<_> = pf.iter().map(|&i| forward[i]).collect();
        let wf = theta_chain(&f);
        if wf == 0.0 {
            continue;
        }
        for pb in permutations(backward.len()) {
            let b: Vec<_> = pb.iter().map(|&i| backward[i]).collect();
            let wb = theta_chain(&b);
            if wb == 0.0 {
                continue;
            }
            acc += upsilon(&f, &b)? * (wf * wb);
        }
    }
    Ok(acc)
}

/// Rebuilds `υ^{n,m}` from the diagonal `υ^{N,N}`, `N = n + m`: every time
/// label appears in both branches and the entries not supplied are integrated
/// over `region`.
pub fn diagonal_reconstruction(
    engine: &ProcessEngine,
    forward: &[(PhasePoint, f64)],
    backward: &[(PhasePoint, f64)],
    region: &Region,
) -> Result<C64> {
    check_ordered(forward)?;
    check_ordered(backward)?;
    let mut times: Vec<f64> = forward.iter().chain(backward).map(|(_, t)| *t).collect();
    times.sort_by(f64::total_cmp);
    if times.windows(2).any(|w| w[0] == w[1]) {
        return Err(QprocError::Validation("diagonal reconstruction needs distinct time labels".into()));
    }
    let r = forward
        .iter()
        .chain(backward)
        .map(|(z, _)| z.radius())
        .fold(anchor_radius(engine, &times), f64::max);
    let free = times.len();
    let tail = free as f64 * marginal_tail(region, r);
    let tol = engine.family().quad.tail_tolerance;
    if tail > tol {
        return Err(QprocError::RegionTooSmall { tail, tolerance: tol });
    }
    let panel = engine.family().quad.panel_width;
    let grid = NodeSet::from_region(region, &PhaseFunction::One, 0, panel);
    let branch = |given: &[(PhasePoint, f64)]| -> Vec<(NodeSet, f64)> {
        times
            .iter()
            .map(|t| match given.iter().find(|(_, s)| s == t) {
                Some((z, _)) => (NodeSet::single(*z), *t),
                None => (grid.clone(), *t),
            })
            .collect()
    };
    Ok(chain_total(engine, &build_stages(engine, &branch(forward), &branch(backward))))
}

// -------------------------------------------------------------- subsystems

/// `Φ₁(A₁, B₁) Φ₂(A₂, B₂)` for independent engines, oracle route.
pub fn tensor_combine(
    a: &ProcessEngine,
    b: &ProcessEngine,
    first: (&History, &History),
    second: (&History, &History),
) -> Result<C64> {
    let pa = phi_cells(a, first.0, first.1, Route::OracleTrace)?.value;
    let pb = phi_cells(b, second.0, second.1, Route::OracleTrace)?.value;
    Ok(pa * pb)
}

/// The same quantity evaluated directly on the two-mode space with product
/// cell operators and the product initial state.
pub fn two_mode_oracle(
    a: &ProcessEngine,
    b: &ProcessEngine,
    first: (&History, &History),
    second: (&History, &History),
) -> Result<C64> {
    let lift = |h1: &History, h2: &History, backward: bool| -> Result<FockOperator> {
        let o1 = if backward { backward_class_operator(a, h1, ORDER_STEP)? } else { class_operator(a, h1, ORDER_STEP)? };
        let o2 = if backward { backward_class_operator(b, h2, ORDER_STEP)? } else { class_operator(b, h2, ORDER_STEP)? };
        Ok(o1.kron(&o2))
    };
    let ca = lift(first.0, second.0, false)?;
    let cb = lift(first.1, second.1, true)?;
    let mut acc = ZERO;
    for (p, u) in a.components() {
        for (q, v) in b.components() {
            let psi = u.kronecker(v);
            // Tr(Cα |ψ><ψ| Cβ) = <ψ| Cβ Cα |ψ>
            let left = cb.adjoint().apply(&psi);
            let right = ca.apply(&psi);
            acc += left.dotc(&right) * (p * q);
        }
    }
    Ok(acc)
}

/// Convenience: history over a single cell at time `t`.
pub fn cell_history(c: Cell, t: f64) -> History {
    History::single(Event::cell(c), t)
}
