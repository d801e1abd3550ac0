//! Gaussian coherent states on the plane, cells and P-symbol quantization.
//!
//! Convention: `α(z) = (x + iξ)/√2` and `dz = dx dξ / 2π`, so that
//! `∫dz |z><z| = 1` and `<z|w> = exp(-|α|²/2 - |β|²/2 + ᾱβ)`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{QprocError, Result};
use crate::fock::{CMatrix, CVector, FockOperator, DEFAULT_CUTOFF};
use crate::quadrature::Rule2D;
use crate::symbol::Polynomial;

/// Phase-space measure density relative to `dx dξ`.
pub const MEASURE: f64 = 1.0 / (2.0 * PI);

/// Default Gauss–Legendre order per axis.
pub const DEFAULT_QUAD_ORDER: usize = 12;

/// Extra order used for the error estimate.
pub const ORDER_STEP: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: f64,
    pub xi: f64,
}

impl PhasePoint {
    pub const ORIGIN: PhasePoint = PhasePoint { x: 0.0, xi: 0.0 };

    pub fn new(x: f64, xi: f64) -> Self {
        PhasePoint { x, xi }
    }

    pub fn checked(x: f64, xi: f64) -> Result<Self> {
        if !x.is_finite() || !xi.is_finite() {
            return Err(QprocError::Validation(format!("phase point ({x}, {xi}) is not finite")));
        }
        Ok(PhasePoint { x, xi })
    }

    pub fn from_alpha(a: C64) -> Self {
        PhasePoint { x: a.re * std::f64::consts::SQRT_2, xi: a.im * std::f64::consts::SQRT_2 }
    }

    pub fn alpha(&self) -> C64 {
        C64::new(self.x, self.xi) * std::f64::consts::FRAC_1_SQRT_2
    }

    pub fn radius(&self) -> f64 {
        self.x.hypot(self.xi)
    }

    pub fn distance(&self, other: &PhasePoint) -> f64 {
        (self.x - other.x).hypot(self.xi - other.xi)
    }

    /// Momentum reversal `(x, ξ) → (x, -ξ)`.
    pub fn flipped(&self) -> Self {
        PhasePoint { x: self.x, xi: -self.xi }
    }

    /// Rotation of `α` by `e^{-iθ}`, the classical flow of `a†a` for time `θ`.
    pub fn rotated(&self, theta: f64) -> Self {
        PhasePoint::from_alpha(self.alpha() * C64::from_polar(1.0, -theta))
    }
}

/// Exponent of the overlap, `log <z|w>`.
pub fn log_overlap(z: PhasePoint, w: PhasePoint) -> C64 {
    let a = z.alpha();
    let b = w.alpha();
    -0.5 * a.norm_sqr() - 0.5 * b.norm_sqr() + a.conj() * b
}

/// `<z|w>`.
pub fn overlap(z: PhasePoint, w: PhasePoint) -> C64 {
    log_overlap(z, w).exp()
}

/// Number-basis components of `|z>` without any truncation check. The first
/// `dim` components are exact whatever `dim` is.
pub fn coherent_components(z: PhasePoint, dim: usize) -> CVector {
    let a = z.alpha();
    let mut v = CVector::zeros(dim);
    if dim == 0 {
        return v;
    }
    v[0] = C64::new((-0.5 * a.norm_sqr()).exp(), 0.0);
    for n in 1..dim {
        v[n] = v[n - 1] * a / (n as f64).sqrt();
    }
    v
}

/// Columns are the components of `|z_i>`.
pub fn components_matrix(points: &[PhasePoint], dim: usize) -> CMatrix {
    let mut m = CMatrix::zeros(dim, points.len());
    for (j, z) in points.iter().enumerate() {
        m.set_column(j, &coherent_components(*z, dim));
    }
    m
}

/// `P(N ≥ n)` for a Poisson variable of mean `mu`.
pub fn poisson_tail(mu: f64, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    if mu <= 0.0 {
        return 0.0;
    }
    // Sum whichever side is smaller to avoid cancellation.
    let log_pmf = |k: usize| -mu + k as f64 * mu.ln() - ln_factorial(k);
    if (n as f64) > mu {
        let mut s = 0.0;
        let mut k = n;
        loop {
            let t = log_pmf(k).exp();
            s += t;
            if t < 1e-18 * s || k > n + 2000 {
                break;
            }
            k += 1;
        }
        s
    } else {
        let below: f64 = (0..n).map(|k| log_pmf(k).exp()).sum();
        (1.0 - below).max(0.0)
    }
}

pub(crate) fn ln_factorial(k: usize) -> f64 {
    (1..=k).map(|j| (j as f64).ln()).sum()
}

/// Weight of `|n>` outside the disc of radius `r`: `∫_{|z|>r} dz |<n|z>|²`.
pub fn level_mass_outside(n: usize, r: f64) -> f64 {
    // ∫_{|z|<r} dz |<n|z>|² = P(n+1, r²/2) = P(Poisson(r²/2) ≥ n+1)
    1.0 - poisson_tail(0.5 * r * r, n + 1)
}

/// Fock realization of `|z>`, guarded against truncation leakage.
pub fn coherent_vector(z: PhasePoint, cutoff: usize) -> Result<CVector> {
    let mu = z.alpha().norm_sqr();
    if mu > cutoff as f64 / 4.0 {
        return Err(QprocError::TruncationOverflow { tail_mass: poisson_tail(mu, cutoff) });
    }
    Ok(coherent_components(z, cutoff))
}

/// Panelization and tolerance shared by every phase-space integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub panel_width: f64,
    pub tolerance: f64,
    pub max_refinements: u32,
    /// Allowed weight outside an integration region for P-symbols and marginals.
    pub tail_tolerance: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec { panel_width: 1.0, tolerance: 1e-8, max_refinements: 2, tail_tolerance: 1e-4 }
    }
}

impl QuadratureSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.panel_width > 0.0) || !(self.tolerance > 0.0) || !(self.tail_tolerance > 0.0) {
            return Err(QprocError::Validation("quadrature widths and tolerances must be positive".into()));
        }
        Ok(())
    }

    pub fn refined(&self) -> Self {
        QuadratureSpec { panel_width: 0.5 * self.panel_width, ..*self }
    }
}

/// The coherent-state family: Fock truncation plus quadrature settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherentFamily {
    pub cutoff: usize,
    pub quad: QuadratureSpec,
}

impl Default for CoherentFamily {
    fn default() -> Self {
        CoherentFamily { cutoff: DEFAULT_CUTOFF, quad: QuadratureSpec::default() }
    }
}

impl CoherentFamily {
    pub fn new(cutoff: usize) -> Result<Self> {
        if cutoff < 2 {
            return Err(QprocError::InvalidDimension { dim: cutoff, reason: "cutoff must be at least 2" });
        }
        Ok(CoherentFamily { cutoff, quad: QuadratureSpec::default() })
    }

    pub fn with_quadrature(mut self, quad: QuadratureSpec) -> Self {
        self.quad = quad;
        self
    }

    pub fn measure(&self) -> f64 {
        MEASURE
    }

    /// Largest `|α|²` a cell node may have before the compressed operator
    /// stops resolving it.
    pub fn node_guard(&self) -> f64 {
        2.0 * self.cutoff as f64
    }
}

/// Closed rectangle `[x0, x1] × [ξ0, ξ1]` with its quadrature order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub x_range: (f64, f64),
    pub xi_range: (f64, f64),
    pub quad_order: usize,
}

impl Cell {
    pub fn new(x_range: (f64, f64), xi_range: (f64, f64), quad_order: usize) -> Result<Self> {
        let finite = [x_range.0, x_range.1, xi_range.0, xi_range.1].iter().all(|v| v.is_finite());
        if !finite || x_range.0 > x_range.1 || xi_range.0 > xi_range.1 {
            return Err(QprocError::Validation(format!("invalid cell ranges {x_range:?} × {xi_range:?}")));
        }
        if quad_order < 2 {
            return Err(QprocError::Validation(format!("cell quadrature order {quad_order} below 2")));
        }
        Ok(Cell { x_range, xi_range, quad_order })
    }

    /// Shorthand with the default order; panics on invalid ranges.
    pub fn rect(x0: f64, x1: f64, xi0: f64, xi1: f64) -> Self {
        Cell::new((x0, x1), (xi0, xi1), DEFAULT_QUAD_ORDER).expect("valid rectangle")
    }

    /// Square `[-r, r]²`.
    pub fn covering(radius: f64) -> Self {
        Cell::rect(-radius, radius, -radius, radius)
    }

    pub fn with_order(mut self, order: usize) -> Self {
        self.quad_order = order.max(2);
        self
    }

    pub fn area(&self) -> f64 {
        (self.x_range.1 - self.x_range.0) * (self.xi_range.1 - self.xi_range.0)
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() == 0.0
    }

    pub fn contains(&self, z: PhasePoint) -> bool {
        z.x >= self.x_range.0 && z.x <= self.x_range.1 && z.xi >= self.xi_range.0 && z.xi <= self.xi_range.1
    }

    pub fn center(&self) -> PhasePoint {
        PhasePoint::new(0.5 * (self.x_range.0 + self.x_range.1), 0.5 * (self.xi_range.0 + self.xi_range.1))
    }

    /// Largest distance of a corner from the origin.
    pub fn max_radius(&self) -> f64 {
        let xs = [self.x_range.0, self.x_range.1];
        let ys = [self.xi_range.0, self.xi_range.1];
        xs.iter().flat_map(|x| ys.iter().map(move |y| x.hypot(*y))).fold(0.0, f64::max)
    }

    pub fn intersection(&self, other: &Cell) -> Option<Cell> {
        let x0 = self.x_range.0.max(other.x_range.0);
        let x1 = self.x_range.1.min(other.x_range.1);
        let y0 = self.xi_range.0.max(other.xi_range.0);
        let y1 = self.xi_range.1.min(other.xi_range.1);
        if x0 > x1 || y0 > y1 {
            return None;
        }
        Some(Cell { x_range: (x0, x1), xi_range: (y0, y1), quad_order: self.quad_order.max(other.quad_order) })
    }

    /// Whether the interiors intersect; shared edges do not count.
    pub fn overlaps(&self, other: &Cell) -> bool {
        self.intersection(other).map(|c| c.area() > 0.0).unwrap_or(false)
    }

    pub fn rule(&self, extra_order: usize, panel_width: f64) -> Rule2D {
        Rule2D::rectangle(self.x_range, self.xi_range, self.quad_order + extra_order, panel_width)
    }
}

/// Finite union of interior-disjoint cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Region {
    cells: Vec<Cell>,
}

impl From<Cell> for Region {
    fn from(c: Cell) -> Self {
        Region { cells: vec![c] }
    }
}

impl Region {
    pub fn new(cells: Vec<Cell>) -> Result<Self> {
        for i in 0..cells.len() {
            for j in i + 1..cells.len() {
                if cells[i].overlaps(&cells[j]) {
                    return Err(QprocError::Validation(format!("region cells {i} and {j} overlap")));
                }
            }
        }
        Ok(Region { cells })
    }

    pub fn empty() -> Self {
        Region { cells: Vec::new() }
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0.0
    }

    pub fn area(&self) -> f64 {
        self.cells.iter().map(Cell::area).sum()
    }

    /// Union with a disjoint region.
    pub fn union(&self, other: &Region) -> Result<Region> {
        let mut cells = self.cells.clone();
        cells.extend(other.cells.iter().copied());
        Region::new(cells)
    }

    pub fn intersect(&self, other: &Region) -> Region {
        let mut cells = Vec::new();
        for a in &self.cells {
            for b in &other.cells {
                if let Some(c) = a.intersection(b) {
                    if c.area() > 0.0 {
                        cells.push(c);
                    }
                }
            }
        }
        Region { cells }
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.intersect(other).area() > 0.0
    }

    /// Whether `other` lies inside `self` up to measure zero.
    pub fn contains_region(&self, other: &Region) -> bool {
        let inside = self.intersect(other).area();
        (inside - other.area()).abs() <= 1e-12 * other.area().max(1.0)
    }

    pub fn contains(&self, z: PhasePoint) -> bool {
        self.cells.iter().any(|c| c.contains(z))
    }

    pub fn max_radius(&self) -> f64 {
        self.cells.iter().map(Cell::max_radius).fold(0.0, f64::max)
    }

    /// Radius of the largest origin-centred disc inside the region, sampled on
    /// circles.
    pub fn inscribed_radius(&self) -> f64 {
        if self.is_empty() || !self.contains(PhasePoint::ORIGIN) {
            return 0.0;
        }
        let covered = |r: f64| {
            (0..720).all(|k| {
                let th = 2.0 * PI * k as f64 / 720.0;
                self.contains(PhasePoint::new(r * th.cos(), r * th.sin()))
            })
        };
        let (mut lo, mut hi) = (0.0, self.max_radius());
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if covered(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn rule(&self, extra_order: usize, panel_width: f64) -> Rule2D {
        let mut r = Rule2D { points: Vec::new(), weights: Vec::new() };
        for c in &self.cells {
            r.extend(c.rule(extra_order, panel_width));
        }
        r
    }

    /// Decomposes `bounds` minus this region into interior-disjoint rectangles.
    pub fn complement_within(&self, bounds: &Cell) -> Region {
        let mut xs = vec![bounds.x_range.0, bounds.x_range.1];
        let mut ys = vec![bounds.xi_range.0, bounds.xi_range.1];
        for c in &self.cells {
            for v in [c.x_range.0, c.x_range.1] {
                if v > bounds.x_range.0 && v < bounds.x_range.1 {
                    xs.push(v);
                }
            }
            for v in [c.xi_range.0, c.xi_range.1] {
                if v > bounds.xi_range.0 && v < bounds.xi_range.1 {
                    ys.push(v);
                }
            }
        }
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        ys.sort_by(f64::total_cmp);
        ys.dedup();
        let mut cells = Vec::new();
        for wx in xs.windows(2) {
            for wy in ys.windows(2) {
                let piece = Cell { x_range: (wx[0], wx[1]), xi_range: (wy[0], wy[1]), quad_order: bounds.quad_order };
                if piece.area() > 0.0 && !self.contains(piece.center()) {
                    cells.push(piece);
                }
            }
        }
        Region { cells }
    }
}

/// A complex weight function on phase space.
#[derive(Clone)]
pub enum PhaseFunction {
    One,
    X,
    Xi,
    Poly(Polynomial),
    Custom(Arc<dyn Fn(PhasePoint) -> C64 + Send + Sync>),
}

impl fmt::Debug for PhaseFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhaseFunction::One => write!(f, "One"),
            PhaseFunction::X => write!(f, "X"),
            PhaseFunction::Xi => write!(f, "Xi"),
            PhaseFunction::Poly(p) => write!(f, "Poly({p:?})"),
            PhaseFunction::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl PhaseFunction {
    pub fn custom(f: impl Fn(PhasePoint) -> C64 + Send + Sync + 'static) -> Self {
        PhaseFunction::Custom(Arc::new(f))
    }

    pub fn eval(&self, z: PhasePoint) -> C64 {
        match self {
            PhaseFunction::One => C64::new(1.0, 0.0),
            PhaseFunction::X => C64::new(z.x, 0.0),
            PhaseFunction::Xi => C64::new(z.xi, 0.0),
            PhaseFunction::Poly(p) => p.eval(z),
            PhaseFunction::Custom(f) => f(z),
        }
    }

    pub fn is_one(&self) -> bool {
        matches!(self, PhaseFunction::One)
    }

    /// Pointwise product.
    pub fn times(&self, other: &PhaseFunction) -> PhaseFunction {
        match (self, other) {
            (PhaseFunction::One, g) | (g, PhaseFunction::One) => g.clone(),
            _ => {
                let (a, b) = (self.clone(), other.clone());
                PhaseFunction::custom(move |z| a.eval(z) * b.eval(z))
            }
        }
    }

    pub fn conj(&self) -> PhaseFunction {
        match self {
            PhaseFunction::One | PhaseFunction::X | PhaseFunction::Xi => self.clone(),
            _ => {
                let a = self.clone();
                PhaseFunction::custom(move |z| a.eval(z).conj())
            }
        }
    }
}

/// Quadrature nodes with their full weights (rule weight × measure × f).
#[derive(Debug, Clone, Default)]
pub struct NodeSet {
    pub points: Vec<PhasePoint>,
    pub weights: Vec<C64>,
}

impl NodeSet {
    pub fn single(z: PhasePoint) -> Self {
        NodeSet { points: vec![z], weights: vec![C64::new(1.0, 0.0)] }
    }

    pub fn from_region(region: &Region, f: &PhaseFunction, extra_order: usize, panel_width: f64) -> Self {
        let rule = region.rule(extra_order, panel_width);
        let mut points = Vec::with_capacity(rule.len());
        let mut weights = Vec::with_capacity(rule.len());
        for ((x, xi), w) in rule.points.iter().zip(&rule.weights) {
            let z = PhasePoint::new(*x, *xi);
            points.push(z);
            weights.push(f.eval(z) * (w * MEASURE));
        }
        NodeSet { points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn max_alpha_sq(&self) -> f64 {
        self.points.iter().map(|z| z.alpha().norm_sqr()).fold(0.0, f64::max)
    }
}

pub(crate) fn guard_nodes(nodes: &NodeSet, family: &CoherentFamily) -> Result<()> {
    let mu = nodes.max_alpha_sq();
    if mu > family.node_guard() {
        return Err(QprocError::TruncationOverflow { tail_mass: poisson_tail(mu, family.cutoff) });
    }
    Ok(())
}

/// `Σ w_i |z_i><z_i|` in the truncated basis.
pub fn node_operator(nodes: &NodeSet, dim: usize) -> FockOperator {
    let v = components_matrix(&nodes.points, dim);
    let mut vw = v.clone();
    for (j, w) in nodes.weights.iter().enumerate() {
        for v in vw.column_mut(j).iter_mut() {
            *v *= w;
        }
    }
    FockOperator::from_matrix(vw * v.adjoint())
}

/// `∫_region dz f(z)|z><z|` at the cells' own orders plus `extra_order`.
pub fn region_operator(
    region: &Region,
    f: &PhaseFunction,
    family: &CoherentFamily,
    extra_order: usize,
) -> Result<FockOperator> {
    let nodes = NodeSet::from_region(region, f, extra_order, family.quad.panel_width);
    guard_nodes(&nodes, family)?;
    Ok(node_operator(&nodes, family.cutoff))
}

/// Gauss–Legendre approximation of `Ĉ = ∫_C dz |z><z|`.
pub fn cell_operator(cell: &Cell, family: &CoherentFamily) -> Result<FockOperator> {
    region_operator(&Region::from(*cell), &PhaseFunction::One, family, 0)
}

/// Cell operator with the order-`p` versus order-`p+4` error estimate.
pub fn cell_operator_with_error(cell: &Cell, family: &CoherentFamily) -> Result<(FockOperator, f64)> {
    let region = Region::from(*cell);
    let lo = region_operator(&region, &PhaseFunction::One, family, 0)?;
    let hi = region_operator(&region, &PhaseFunction::One, family, ORDER_STEP)?;
    let err = lo.max_abs_diff(&hi);
    Ok((hi, err))
}

/// Bound on the weight the low levels carry outside `region`, scaled by the
/// size of `f` on the region's boundary.
pub fn p_symbol_tail(f: &PhaseFunction, region: &Region, probe_level: usize) -> f64 {
    let r = region.inscribed_radius();
    let mut sup: f64 = 0.0;
    for k in 0..360 {
        let th = 2.0 * PI * k as f64 / 360.0;
        sup = sup.max(f.eval(PhasePoint::new(r * th.cos(), r * th.sin())).norm());
    }
    sup.max(1.0) * level_mass_outside(probe_level, r)
}

/// Levels whose matrix elements the tail estimate protects.
pub const P_SYMBOL_PROBE_LEVEL: usize = 8;

/// Quadrature of `Â = ∫dz f(z)|z><z|` over `region`.
pub fn p_symbol_operator(f: &PhaseFunction, region: &Region, family: &CoherentFamily) -> Result<FockOperator> {
    let tail = p_symbol_tail(f, region, P_SYMBOL_PROBE_LEVEL);
    if tail > family.quad.tail_tolerance {
        return Err(QprocError::RegionTooSmall { tail, tolerance: family.quad.tail_tolerance });
    }
    region_operator(region, f, family, 0)
}

/// Log of the cyclic overlap product, whose imaginary part is the unwrapped phase.
pub fn bargmann_log(forward: &[PhasePoint], backward: &[PhasePoint]) -> C64 {
    // Loop order z0 → z1 → … → zn → z'm → … → z'1 → z0, each arrow a factor <next|prev>.
    let mut loop_pts: Vec<PhasePoint> = forward.to_vec();
    loop_pts.extend(backward.iter().rev().copied());
    let n = loop_pts.len();
    let mut acc = C64::new(0.0, 0.0);
    for k in 0..n {
        let prev = loop_pts[k];
        let next = loop_pts[(k + 1) % n];
        acc += log_overlap(next, prev);
    }
    acc
}

/// `<z'_m|z_n><z_n|z_{n-1}>⋯<z_1|z_0><z_0|z'_1>⋯<z'_{m-1}|z'_m>`; `forward[0]` is `z_0`.
pub fn bargmann_invariant(forward: &[PhasePoint], backward: &[PhasePoint]) -> C64 {
    if forward.is_empty() && backward.is_empty() {
        return C64::new(1.0, 0.0);
    }
    bargmann_log(forward, backward).exp()
}

/// Vertices of a counter-clockwise circle of radius `r` about the origin.
pub fn circle_loop(r: f64, n: usize) -> Vec<PhasePoint> {
    (0..n)
        .map(|k| {
            let th = 2.0 * PI * k as f64 / n as f64;
            PhasePoint::new(r * th.cos(), r * th.sin())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::position;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt() -> impl Strategy<Value = PhasePoint> {
        (-3.0f64..3.0, -3.0f64..3.0).prop_map(|(x, xi)| PhasePoint::new(x, xi))
    }

    #[test]
    fn overlap_examples() {
        let z = PhasePoint::new(0.3, -1.2);
        assert!((overlap(z, z) - C64::new(1.0, 0.0)).norm() < 1e-15);
        let v = overlap(PhasePoint::ORIGIN, PhasePoint::new(2.0, 0.0));
        assert!((v - C64::new((-1.0f64).exp(), 0.0)).norm() < 1e-15);
        assert!((v.re - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn coherent_vector_examples() {
        let v = coherent_vector(PhasePoint::ORIGIN, 48).unwrap();
        assert_eq!(v[0], C64::new(1.0, 0.0));
        assert!(v.iter().skip(1).all(|c| c.norm() == 0.0));
        let v = coherent_vector(PhasePoint::new(2f64.sqrt(), 0.0), 48).unwrap();
        assert!((v[1].norm_sqr() - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn coherent_vector_guard() {
        let far = PhasePoint::new(5.0, 0.0); // |α|² = 12.5 > 48/4
        match coherent_vector(far, 48) {
            Err(QprocError::TruncationOverflow { tail_mass }) => assert!(tail_mass < 1e-6),
            other => panic!("{other:?}"),
        }
        assert!(coherent_vector(PhasePoint::new(4.8, 0.0), 48).is_ok());
    }

    #[test]
    fn poisson_tail_values() {
        assert!((poisson_tail(1.0, 1) - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!((poisson_tail(3.0, 0) - 1.0).abs() < 1e-15);
        assert!(poisson_tail(2.0, 40) < 1e-25);
    }

    #[test]
    fn degenerate_cell_gives_zero_operator() {
        let fam = CoherentFamily::new(16).unwrap();
        let op = cell_operator(&Cell::rect(0.0, 0.0, -1.0, 1.0), &fam).unwrap();
        assert_eq!(op.max_abs(), 0.0);
    }

    #[test]
    fn covering_cell_resolves_identity() {
        let fam = CoherentFamily::new(48).unwrap();
        let region = Region::from(Cell::covering(6.0));
        let op = region_operator(&region, &PhaseFunction::One, &fam, 0).unwrap();
        // the square contains the radius-6 disc, so level k loses less than
        // P(Poisson(18) <= k)
        assert!(op.block_diff(&FockOperator::identity(48), 3) < 1e-6);
        assert!(op.block_diff(&FockOperator::identity(48), 6) < 1e-4);
        assert!(op.hermitian_eigenvalues()[0] > -1e-12);
    }

    #[test]
    fn resolution_defect_decays_with_radius() {
        let fam = CoherentFamily::new(24).unwrap();
        let defect = |r: f64| {
            let op = region_operator(&Region::from(Cell::covering(r)), &PhaseFunction::One, &fam, 0).unwrap();
            op.block_diff(&FockOperator::identity(24), 4)
        };
        let (d2, d3, d4) = (defect(2.0), defect(3.0), defect(4.0));
        assert!(d2 > d3 && d3 > d4, "{d2} {d3} {d4}");
        assert!(d4 < level_mass_outside(3, 4.0));
    }

    #[test]
    fn disjoint_cells_add() {
        let fam = CoherentFamily::new(20).unwrap();
        let a = Cell::rect(-1.0, 0.0, -1.0, 1.0);
        let b = Cell::rect(0.0, 1.5, -1.0, 1.0);
        let u = Region::new(vec![a, b]).unwrap();
        let lhs = region_operator(&u, &PhaseFunction::One, &fam, 0).unwrap();
        let rhs = cell_operator(&a, &fam).unwrap().add(&cell_operator(&b, &fam).unwrap());
        assert!(lhs.max_abs_diff(&rhs) < 1e-15);
    }

    #[test]
    fn cell_operator_is_positive_and_bounded() {
        let fam = CoherentFamily::new(24).unwrap();
        let (op, err) = cell_operator_with_error(&Cell::rect(-0.5, 1.5, 0.2, 2.0), &fam).unwrap();
        assert!(err < 1e-10, "{err}");
        let ev = op.hermitian_eigenvalues();
        assert!(ev[0] > -1e-12 && *ev.last().unwrap() <= 1.0 + 1e-10);
    }

    #[test]
    fn position_symbol_over_radius_eight() {
        let fam = CoherentFamily::new(48).unwrap();
        let region = Region::from(Cell::covering(8.0));
        let op = p_symbol_operator(&PhaseFunction::X, &region, &fam).unwrap();
        assert!(op.block_diff(&position(48).unwrap(), 8) < 1e-5);
    }

    #[test]
    fn x_squared_symbol_offset_from_oracle() {
        let fam = CoherentFamily::new(48).unwrap();
        let region = Region::from(Cell::covering(8.0));
        let f = PhaseFunction::Poly(Polynomial::monomial(2, 0, 1.0));
        let op = p_symbol_operator(&f, &region, &fam).unwrap();
        let x = position(48).unwrap();
        let diff = op.sub(&x.mul(&x));
        let offset = diff.matrix()[(0, 0)].re;
        assert!((offset - 0.5).abs() < 1e-5, "{offset}");
        assert!(diff.block_diff(&FockOperator::identity(48).scale(C64::new(offset, 0.0)), 6) < 1e-5);
    }

    #[test]
    fn small_region_is_rejected_for_p_symbols() {
        let fam = CoherentFamily::new(48).unwrap();
        let r = p_symbol_operator(&PhaseFunction::X, &Region::from(Cell::covering(3.0)), &fam);
        assert!(matches!(r, Err(QprocError::RegionTooSmall { .. })));
    }

    #[test]
    fn complement_tiles_the_bounds() {
        let inner = Region::new(vec![Cell::rect(-1.0, 0.0, -1.0, 1.0), Cell::rect(0.5, 2.0, 0.0, 1.0)]).unwrap();
        let bounds = Cell::covering(3.0);
        let rest = inner.complement_within(&bounds);
        assert!(!rest.overlaps(&inner));
        assert!((rest.area() + inner.area() - bounds.area()).abs() < 1e-12);
    }

    #[test]
    fn inscribed_radius_of_square() {
        let r = Region::from(Cell::covering(2.0)).inscribed_radius();
        assert!((r - 2.0).abs() < 1e-6);
    }

    #[test]
    fn bargmann_examples() {
        let z = PhasePoint::new(0.4, -0.9);
        assert!((bargmann_invariant(&[z, z, z], &[z, z]) - C64::new(1.0, 0.0)).norm() < 1e-15);

        let pts = [PhasePoint::new(0.1, 0.2), PhasePoint::new(1.0, -0.5), PhasePoint::new(-0.7, 0.9)];
        let fwd = [PhasePoint::ORIGIN, pts[0], pts[1], pts[2]];
        let b = bargmann_invariant(&fwd, &pts);
        assert!(b.arg().abs() < 1e-14);
        let mut modulus = 1.0;
        for w in fwd.windows(2) {
            modulus *= overlap(w[1], w[0]).norm_sqr();
        }
        assert!((b.norm() - modulus).abs() < 1e-14);
    }

    #[test]
    fn triangle_phase_is_signed_area() {
        let z0 = PhasePoint::new(0.2, -0.3);
        let z1 = PhasePoint::new(1.1, 0.4);
        let z2 = PhasePoint::new(-0.5, 1.0);
        let b = bargmann_invariant(&[z0, z1, z2], &[]);
        let (a0, a1, a2) = (z0.alpha(), z1.alpha(), z2.alpha());
        let expected = (a1.conj() * a0 + a2.conj() * a1 + a0.conj() * a2).im;
        assert!((b.arg() - expected).abs() < 1e-14);
        // equivalently minus the enclosed area in (x, ξ)
        let area = 0.5 * ((z1.x - z0.x) * (z2.xi - z0.xi) - (z2.x - z0.x) * (z1.xi - z0.xi));
        assert!((b.arg() + area).abs() < 1e-14);
    }

    #[test]
    fn holonomy_converges_to_minus_area() {
        for r in [1.0, 2.0] {
            let area = PI * r * r;
            let mut errs = Vec::new();
            for n in [16, 32, 64, 128] {
                let phase = bargmann_log(&circle_loop(r, n), &[]).im;
                errs.push((phase + area).abs());
            }
            for w in errs.windows(2) {
                assert!(w[1] < w[0] * 0.6, "{errs:?}");
            }
            assert!(errs[3] < 1e-2 * r * r);
        }
    }

    #[test]
    fn random_inner_products_match_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let z = PhasePoint::from_alpha(C64::from_polar(rng.gen_range(0.0..2.0), rng.gen_range(0.0..6.3)));
            let w = PhasePoint::from_alpha(C64::from_polar(rng.gen_range(0.0..2.0), rng.gen_range(0.0..6.3)));
            let u = coherent_vector(z, 48).unwrap();
            let v = coherent_vector(w, 48).unwrap();
            assert!((u.dotc(&v) - overlap(z, w)).norm() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn overlap_hermitian_and_gaussian(z in pt(), w in pt()) {
            let a = overlap(z, w);
            prop_assert!((a - overlap(w, z).conj()).norm() < 1e-14);
            let d2 = (z.x - w.x).powi(2) + (z.xi - w.xi).powi(2);
            prop_assert!((a.norm() - (-d2 / 4.0).exp()).abs() < 1e-12);
        }

        #[test]
        fn bargmann_cyclic_invariance(pts in proptest::collection::vec(pt(), 2..7), shift in 0usize..7) {
            let n = pts.len();
            let k = shift % n;
            let rotated: Vec<PhasePoint> = (0..n).map(|i| pts[(i + k) % n]).collect();
            let a = bargmann_invariant(&pts, &[]);
            let b = bargmann_invariant(&rotated, &[]);
            prop_assert!((a - b).norm() < 1e-12);
        }

        #[test]
        fn vector_norm_within_guard(r in 0.0f64..3.4, th in 0.0f64..6.28) {
            let z = PhasePoint::new(r * th.cos(), r * th.sin());
            let v = coherent_vector(z, 48).unwrap();
            let n = v.norm();
            prop_assert!(n <= 1.0 + 1e-14 && n >= 1.0 - 1e-8);
        }
    }
}
