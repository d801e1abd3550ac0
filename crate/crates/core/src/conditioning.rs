//! Conditioning on pointer fields: conditional pairs, conditional
//! correlations, the tower property and the link with state reduction.

use num_complex::Complex64 as C64;
use serde::Serialize;

use crate::coherent::{Cell, PhaseFunction, Region, ORDER_STEP};
use crate::decfun::{phi_cells, Event, History, Initial, ProcessEngine, Route};
use crate::error::{QprocError, Result};
use crate::fock::{reduce_state_positive, trace_product, FockOperator};

/// Pairs with `|Φ(A_i, A_j)|` below this are dropped.
pub const ZERO_MEASURE: f64 = 1e-12;

/// A finite partition of (part of) phase space into disjoint cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PointerField {
    cells: Vec<Cell>,
    include_rest: bool,
    bounds: Cell,
    elements: Vec<Region>,
}

impl PointerField {
    /// `bounds` is the covering cell that `include_rest` completes the
    /// family to.
    pub fn new(cells: Vec<Cell>, include_rest: bool, bounds: Cell) -> Result<Self> {
        if cells.is_empty() {
            return Err(QprocError::Validation("pointer field has no cells".into()));
        }
        let union = Region::new(cells.clone()).map_err(|e| QprocError::Validation(format!("pointer cells: {e}")))?;
        let mut elements: Vec<Region> = cells.iter().map(|c| Region::from(*c)).collect();
        if include_rest {
            if !Region::from(bounds).contains_region(&union) {
                return Err(QprocError::Validation("pointer cells leave the bounding cell".into()));
            }
            let rest = union.complement_within(&bounds);
            if !rest.is_empty() {
                elements.push(rest);
            }
        }
        Ok(PointerField { cells, include_rest, bounds, elements })
    }

    /// Single element covering `bounds`.
    pub fn trivial(bounds: Cell) -> Self {
        PointerField { cells: vec![bounds], include_rest: false, bounds, elements: vec![Region::from(bounds)] }
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn include_rest(&self) -> bool {
        self.include_rest
    }

    pub fn bounds(&self) -> Cell {
        self.bounds
    }

    /// The field's atoms, the rest (if any) last.
    pub fn elements(&self) -> &[Region] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Splits cell `k` in two along its longer side.
    pub fn split(&self, k: usize) -> Result<PointerField> {
        let c = *self.cells.get(k).ok_or_else(|| QprocError::Validation(format!("no cell {k}")))?;
        let (a, b) = if c.x_range.1 - c.x_range.0 >= c.xi_range.1 - c.xi_range.0 {
            let m = 0.5 * (c.x_range.0 + c.x_range.1);
            (Cell { x_range: (c.x_range.0, m), ..c }, Cell { x_range: (m, c.x_range.1), ..c })
        } else {
            let m = 0.5 * (c.xi_range.0 + c.xi_range.1);
            (Cell { xi_range: (c.xi_range.0, m), ..c }, Cell { xi_range: (m, c.xi_range.1), ..c })
        };
        let mut cells = self.cells.clone();
        cells[k] = a;
        cells.insert(k + 1, b);
        PointerField::new(cells, self.include_rest, self.bounds)
    }

    /// For each element of `fine`, the element of `self` containing it.
    pub fn parents_of(&self, fine: &PointerField) -> Result<Vec<usize>> {
        fine.elements
            .iter()
            .enumerate()
            .map(|(i, f)| {
                self.elements
                    .iter()
                    .position(|c| c.contains_region(f))
                    .ok_or_else(|| QprocError::Validation(format!("fine element {i} is not inside a coarse element")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionalPairTable {
    /// `None` marks a dropped pair.
    pub entries: Vec<Vec<Option<C64>>>,
    pub dropped: Vec<(usize, usize)>,
    /// `Φ(A_i, A_j)`.
    pub weights: Vec<Vec<C64>>,
    pub quad_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionalCorrelationTable {
    pub entries: Vec<Option<C64>>,
    pub dropped: Vec<usize>,
    pub quad_error: f64,
}

/// Heisenberg-picture weighted cell operators at one time, at orders `p` and
/// `p + 4`.
struct Slice<'a> {
    engine: &'a ProcessEngine,
    time: f64,
}

impl Slice<'_> {
    fn ops(&self, region: &Region, f: &PhaseFunction) -> Result<[FockOperator; 2]> {
        let ev = Event::weighted(region.clone(), f.clone());
        let fam = self.engine.family();
        Ok([
            self.engine.heisenberg(&ev.operator(fam, 0)?, self.time),
            self.engine.heisenberg(&ev.operator(fam, ORDER_STEP)?, self.time),
        ])
    }

    /// `Φ(X, Y) = Tr(X ρ Y)` with the order-difference error.
    fn phi(&self, x: &[FockOperator; 2], y: &[FockOperator; 2]) -> (C64, f64) {
        let rho = self.engine.rho();
        let hi = trace_product(&x[1].mul(rho), &y[1]);
        let lo = trace_product(&x[0].mul(rho), &y[0]);
        (hi, (hi - lo).norm())
    }
}

/// `Φ(Fχ_{A_i}, Gχ_{A_j}) / Φ(A_i, A_j)` over all element pairs at one time.
pub fn conditional_pair(
    engine: &ProcessEngine,
    f: &PhaseFunction,
    g: &PhaseFunction,
    field: &PointerField,
    time: f64,
) -> Result<ConditionalPairTable> {
    let s = Slice { engine, time };
    let one = PhaseFunction::One;
    let n = field.len();
    let plain: Vec<_> = field.elements().iter().map(|r| s.ops(r, &one)).collect::<Result<_>>()?;
    let fw: Vec<_> = field.elements().iter().map(|r| s.ops(r, f)).collect::<Result<_>>()?;
    let gw: Vec<_> = field.elements().iter().map(|r| s.ops(r, g)).collect::<Result<_>>()?;
    let mut entries = vec![vec![None; n]; n];
    let mut weights = vec![vec![C64::new(0.0, 0.0); n]; n];
    let mut dropped = Vec::new();
    let mut quad_error: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (w, ew) = s.phi(&plain[i], &plain[j]);
            weights[i][j] = w;
            quad_error = quad_error.max(ew);
            if w.norm() < ZERO_MEASURE {
                dropped.push((i, j));
                continue;
            }
            let (v, ev) = s.phi(&fw[i], &gw[j]);
            quad_error = quad_error.max(ev);
            entries[i][j] = Some(v / w);
        }
    }
    if dropped.len() == n * n {
        return Err(QprocError::EmptyConditioning);
    }
    Ok(ConditionalPairTable { entries, dropped, weights, quad_error })
}

/// `Φ(Fχ_{A_i}, Gχ_{A_i}) / Φ(A_i, A_i)` per element.
pub fn conditional_correlation(
    engine: &ProcessEngine,
    f: &PhaseFunction,
    g: &PhaseFunction,
    field: &PointerField,
    time: f64,
) -> Result<ConditionalCorrelationTable> {
    let s = Slice { engine, time };
    let mut entries = Vec::with_capacity(field.len());
    let mut dropped = Vec::new();
    let mut quad_error: f64 = 0.0;
    for (i, r) in field.elements().iter().enumerate() {
        let p = s.ops(r, &PhaseFunction::One)?;
        let (w, ew) = s.phi(&p, &p);
        quad_error = quad_error.max(ew);
        if w.norm() < ZERO_MEASURE {
            dropped.push(i);
            entries.push(None);
            continue;
        }
        let (v, ev) = s.phi(&s.ops(r, f)?, &s.ops(r, g)?);
        quad_error = quad_error.max(ev);
        entries.push(Some(v / w));
    }
    if dropped.len() == field.len() {
        return Err(QprocError::EmptyConditioning);
    }
    Ok(ConditionalCorrelationTable { entries, dropped, quad_error })
}

/// Re-conditions a fine pair table onto the coarse field:
/// `Σ_{i⊂K, j⊂L} Φ(A_i, A_j) Φ̃_ij / Φ(K, L)`.
fn coarsen(fine: &ConditionalPairTable, parents: &[usize], coarse_weights: &[Vec<C64>]) -> Vec<Vec<Option<C64>>> {
    let n = coarse_weights.len();
    let mut acc = vec![vec![C64::new(0.0, 0.0); n]; n];
    let mut only: Vec<Vec<Option<(usize, usize)>>> = vec![vec![None; n]; n];
    let mut count = vec![vec![0usize; n]; n];
    for (i, row) in fine.entries.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            let (k, l) = (parents[i], parents[j]);
            count[k][l] += 1;
            only[k][l] = Some((i, j));
            if let Some(v) = e {
                acc[k][l] += fine.weights[i][j] * v;
            }
        }
    }
    (0..n)
        .map(|k| {
            (0..n)
                .map(|l| {
                    // A coarse pair with a single fine pair inherits its entry as is.
                    if let (1, Some((i, j))) = (count[k][l], only[k][l]) {
                        return fine.entries[i][j];
                    }
                    let w = coarse_weights[k][l];
                    (w.norm() >= ZERO_MEASURE).then(|| acc[k][l] / w)
                })
                .collect()
        })
        .collect()
}

/// Worst entry difference between conditioning on `fine` then `coarse` (and
/// the reverse nesting) and conditioning on `coarse` directly.
pub fn tower_check(
    engine: &ProcessEngine,
    f: &PhaseFunction,
    g: &PhaseFunction,
    coarse: &PointerField,
    fine: &PointerField,
    time: f64,
) -> Result<f64> {
    let parents = coarse.parents_of(fine)?;
    let direct = conditional_pair(engine, f, g, coarse, time)?;
    let fine_table = conditional_pair(engine, f, g, fine, time)?;
    let nested = coarsen(&fine_table, &parents, &direct.weights);
    // Coarse first: lift onto fine pairs, then coarsen again.
    let lifted = ConditionalPairTable {
        entries: (0..fine.len())
            .map(|i| (0..fine.len()).map(|j| direct.entries[parents[i]][parents[j]]).collect())
            .collect(),
        dropped: Vec::new(),
        weights: fine_table.weights.clone(),
        quad_error: 0.0,
    };
    let reverse = coarsen(&lifted, &parents, &direct.weights);
    let mut worst: f64 = 0.0;
    for k in 0..coarse.len() {
        for l in 0..coarse.len() {
            if let Some(d) = direct.entries[k][l] {
                for t in [&nested, &reverse] {
                    if let Some(v) = t[k][l] {
                        worst = worst.max((v - d).norm());
                    }
                }
            }
        }
    }
    Ok(worst)
}

/// Engine whose initial state is the reduction of `engine` by the cell
/// operator of `cell` at time `t`: `ĈρĈ / Tr(ĈρĈ)`, with `Ĉ` taken in the
/// Heisenberg picture.
pub fn reduced_engine(engine: &ProcessEngine, cell: &Cell, t: f64) -> Result<ProcessEngine> {
    let c = Event::cell(*cell).operator(engine.family(), ORDER_STEP)?;
    let c = engine.heisenberg(&c, t);
    let rho = reduce_state_positive(engine.rho(), &c)?;
    let h = match engine.hamiltonian() {
        Some(h) => crate::decfun::Hamiltonian::Operator(h.clone()),
        None => crate::decfun::Hamiltonian::Zero,
    };
    ProcessEngine::new(*engine.family(), Initial::Density(rho), h)
}

/// `Φ(A∘α, A∘β) / Φ(A, A)`: the functional conditioned on `cell` at time `t`,
/// evaluated on later histories.
pub fn conditioned_functional(
    engine: &ProcessEngine,
    cell: &Cell,
    t: f64,
    alpha: &History,
    beta: &History,
) -> Result<C64> {
    let prefix = |h: &History| -> Result<History> {
        if h.steps().first().is_some_and(|(_, s)| *s <= t) {
            return Err(QprocError::Validation("conditioned histories must start after the conditioning time".into()));
        }
        let mut steps = vec![(Event::cell(*cell), t)];
        steps.extend(h.steps().iter().cloned());
        History::new(steps, h.label.clone())
    };
    let a = History::single(Event::cell(*cell), t);
    let norm = phi_cells(engine, &a, &a, Route::OracleTrace)?.value;
    if norm.norm() < ZERO_MEASURE {
        return Err(QprocError::ZeroMeasureEvent { weight: norm.norm() });
    }
    Ok(phi_cells(engine, &prefix(alpha)?, &prefix(beta)?, Route::OracleTrace)?.value / norm)
}
