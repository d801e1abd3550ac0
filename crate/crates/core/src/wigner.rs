//! Single-time decoherence functionals on phase space: spectral, Wigner-transform
//! and coherent-state versions, plus the Δ̂ operators behind the Wigner route.
//!
//! Normalization: `Δ̂(q,p) = 2 D(2α) Π` with `α = (q + ip)/√2` and `Π` the
//! parity, so `W = Tr(ρΔ̂)` has `∫W dq dp/2π = 1` and `W_vac(0,0) = 2`.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::Serialize;

use crate::coherent::{coherent_vector, overlap, Cell, PhasePoint, MEASURE, ORDER_STEP};
use crate::decfun::{DecoherenceValue, Route};
use crate::error::{QprocError, Result};
use crate::fock::FockOperator;

/// Default panel width for the nested Wigner quadrature.
pub const WIGNER_PANEL: f64 = 0.5;

/// Default tolerance on the order-doubling error estimate.
pub const WIGNER_TOL: f64 = 1e-6;

/// `<m|D(γ)|n>` for `m, n < dim`. Columns come from `D|n> = (a† − γ̄)D|n−1>/√n`,
/// which only reads lower components, so the block is exact.
pub fn displacement_block(gamma: C64, dim: usize) -> DMatrix<C64> {
    let mut d = DMatrix::<C64>::zeros(dim, dim);
    if dim == 0 {
        return d;
    }
    d[(0, 0)] = C64::new((-0.5 * gamma.norm_sqr()).exp(), 0.0);
    for m in 1..dim {
        d[(m, 0)] = d[(m - 1, 0)] * gamma / (m as f64).sqrt();
    }
    let gb = gamma.conj();
    for n in 1..dim {
        let inv = 1.0 / (n as f64).sqrt();
        for m in 0..dim {
            let raised = if m > 0 { d[(m - 1, n - 1)] * (m as f64).sqrt() } else { C64::new(0.0, 0.0) };
            d[(m, n)] = (raised - gb * d[(m, n - 1)]) * inv;
        }
    }
    d
}

fn alpha_of(q: f64, p: f64) -> C64 {
    C64::new(q, p) * std::f64::consts::FRAC_1_SQRT_2
}

/// `Δ̂(q,p)` on `cutoff` levels, guarded like a coherent vector.
pub fn delta_operator(q: f64, p: f64, cutoff: usize) -> Result<FockOperator> {
    coherent_vector(PhasePoint::new(q, p), cutoff)?;
    Ok(delta_unchecked(q, p, cutoff))
}

fn delta_unchecked(q: f64, p: f64, dim: usize) -> FockOperator {
    let mut d = displacement_block(2.0 * alpha_of(q, p), dim);
    for n in (1..dim).step_by(2) {
        d.column_mut(n).neg_mut();
    }
    FockOperator::new(d * C64::new(2.0, 0.0)).expect("square")
}

/// Highest populated level plus one.
fn support(rho: &FockOperator) -> usize {
    let m = rho.matrix();
    let dim = rho.dim();
    (0..dim)
        .rev()
        .find(|&k| (0..dim).any(|j| m[(k, j)].norm() > 1e-15 || m[(j, k)].norm() > 1e-15))
        .map_or(1, |k| k + 1)
}

/// `Tr(ρ D(γ))`.
pub fn characteristic(rho: &FockOperator, gamma: C64) -> C64 {
    characteristic_on(rho, support(rho), gamma)
}

fn characteristic_on(rho: &FockOperator, k: usize, gamma: C64) -> C64 {
    characteristic_buf(rho, k, gamma, &mut vec![C64::new(0.0, 0.0); k * k])
}

/// `Tr(ρ D(γ))` over the leading `k` levels, with `buf` holding `k²` entries of
/// scratch for the displacement block (column-major).
fn characteristic_buf(rho: &FockOperator, k: usize, gamma: C64, buf: &mut [C64]) -> C64 {
    let e0 = (-0.5 * gamma.norm_sqr()).exp();
    if k == 1 {
        return rho.matrix()[(0, 0)] * e0;
    }
    let gb = gamma.conj();
    buf[0] = C64::new(e0, 0.0);
    for m in 1..k {
        buf[m] = buf[m - 1] * gamma / (m as f64).sqrt();
    }
    for n in 1..k {
        let inv = 1.0 / (n as f64).sqrt();
        for m in 0..k {
            let raised = if m > 0 { buf[(n - 1) * k + m - 1] * (m as f64).sqrt() } else { C64::new(0.0, 0.0) };
            buf[n * k + m] = (raised - gb * buf[(n - 1) * k + m]) * inv;
        }
    }
    let r = rho.matrix();
    let mut acc = C64::new(0.0, 0.0);
    for n in 0..k {
        for m in 0..k {
            acc += r[(n, m)] * buf[n * k + m];
        }
    }
    acc
}

/// `W(q,p) = Tr(ρΔ̂(q,p))`.
pub fn wigner_value(rho: &FockOperator, q: f64, p: f64) -> f64 {
    let k = support(rho);
    let delta = delta_unchecked(q, p, k);
    let r = rho.matrix();
    let mut acc = C64::new(0.0, 0.0);
    for n in 0..k {
        for m in 0..k {
            acc += r[(n, m)] * delta.matrix()[(m, n)];
        }
    }
    acc.re
}

/// `W` sampled on `q × p`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WignerTable {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    /// `values[i][j] = W(q_i, p_j)`.
    pub values: Vec<Vec<f64>>,
}

impl WignerTable {
    pub fn min(&self) -> f64 {
        self.values.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    /// Trapezoid estimate of `∫W dq dp/2π`.
    pub fn normalization(&self) -> f64 {
        let w = |axis: &[f64]| -> Vec<f64> {
            let n = axis.len();
            (0..n)
                .map(|k| {
                    let l = if k > 0 { axis[k] - axis[k - 1] } else { 0.0 };
                    let r = if k + 1 < n { axis[k + 1] - axis[k] } else { 0.0 };
                    0.5 * (l + r)
                })
                .collect()
        };
        let (wq, wp) = (w(&self.q), w(&self.p));
        let mut s = 0.0;
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                s += wq[i] * wp[j] * v;
            }
        }
        s * MEASURE
    }

    /// CSV with columns `q,p,w`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("q,p,w\n");
        for (i, q) in self.q.iter().enumerate() {
            for (j, p) in self.p.iter().enumerate() {
                let _ = writeln!(s, "{q},{p},{}", self.values[i][j]);
            }
        }
        s
    }
}

/// Uniform axis of `n` points on `[a, b]`.
pub fn axis(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![a];
    }
    (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
}

pub fn wigner_function(rho: &FockOperator, q: &[f64], p: &[f64]) -> Result<WignerTable> {
    rho.validate_density(1e-8)?;
    let guard = 2.0 * rho.dim() as f64;
    for &qi in q {
        for &pj in p {
            let mu = alpha_of(qi, pj).norm_sqr();
            if mu > guard {
                return Err(QprocError::TruncationOverflow { tail_mass: mu });
            }
        }
    }
    let values = q.iter().map(|&qi| p.iter().map(|&pj| wigner_value(rho, qi, pj)).collect()).collect();
    Ok(WignerTable { q: q.to_vec(), p: p.to_vec(), values })
}

/// `υ(z, z') = Tr(Δ̂(z) ρ Δ̂(z')) = 4 e^{2i(ξx' − xξ')} Tr(ρ D(2(β − α)))`.
pub fn wigner_upsilon(rho: &FockOperator, z: PhasePoint, zp: PhasePoint) -> C64 {
    upsilon_on(rho, support(rho), z, zp)
}

fn upsilon_on(rho: &FockOperator, k: usize, z: PhasePoint, zp: PhasePoint) -> C64 {
    upsilon_buf(rho, k, z, zp, &mut vec![C64::new(0.0, 0.0); k * k])
}

fn upsilon_buf(rho: &FockOperator, k: usize, z: PhasePoint, zp: PhasePoint, buf: &mut [C64]) -> C64 {
    let phase = 2.0 * (z.xi * zp.x - z.x * zp.xi);
    let gamma = 2.0 * (alpha_of(zp.x, zp.xi) - alpha_of(z.x, z.xi));
    C64::from_polar(4.0, phase) * characteristic_buf(rho, k, gamma, buf)
}

fn cells_sum(rho: &FockOperator, a: &Cell, b: &Cell, extra: usize, panel: f64) -> C64 {
    let k = support(rho);
    let mut buf = vec![C64::new(0.0, 0.0); k * k];
    let ra = a.rule(extra, panel);
    let rb = b.rule(extra, panel);
    let mut acc = C64::new(0.0, 0.0);
    for ((x, xi), wa) in ra.points.iter().zip(&ra.weights) {
        let z = PhasePoint::new(*x, *xi);
        let mut inner = C64::new(0.0, 0.0);
        for ((y, eta), wb) in rb.points.iter().zip(&rb.weights) {
            inner += upsilon_buf(rho, k, z, PhasePoint::new(*y, *eta), &mut buf) * *wb;
        }
        acc += inner * *wa;
    }
    acc * (MEASURE * MEASURE)
}

/// `Φ(A,B) = ∫_A dz/2π ∫_B dz'/2π υ(z, z')` by nested Gauss–Legendre, with the
/// error estimated from a higher-order pass.
pub fn wigner_decfun_cells(rho: &FockOperator, a: &Cell, b: &Cell) -> Result<DecoherenceValue> {
    wigner_decfun_cells_with(rho, a, b, WIGNER_PANEL, WIGNER_TOL)
}

pub fn wigner_decfun_cells_with(rho: &FockOperator, a: &Cell, b: &Cell, panel: f64, tol: f64) -> Result<DecoherenceValue> {
    rho.validate_density(1e-8)?;
    if a.is_degenerate() || b.is_degenerate() {
        return Ok(DecoherenceValue { value: C64::new(0.0, 0.0), quad_error: 0.0, route: Route::BargmannQuadrature });
    }
    let lo = cells_sum(rho, a, b, 0, panel);
    let hi = cells_sum(rho, a, b, ORDER_STEP, panel);
    let quad_error = (hi - lo).norm();
    if quad_error > tol {
        return Err(QprocError::QuadratureNonconvergence { error: quad_error, tolerance: tol });
    }
    Ok(DecoherenceValue { value: hi, quad_error, route: Route::BargmannQuadrature })
}

/// `∫_A dz/2π Δ̂(z)` on `dim` levels.
pub fn delta_cell_operator(cell: &Cell, dim: usize, panel: f64) -> FockOperator {
    let rule = cell.rule(ORDER_STEP, panel);
    let mut acc = DMatrix::<C64>::zeros(dim, dim);
    for ((x, xi), w) in rule.points.iter().zip(&rule.weights) {
        acc += delta_unchecked(*x, *xi, dim).into_matrix() * C64::new(w * MEASURE, 0.0);
    }
    FockOperator::new(acc).expect("square")
}

/// Oracle assembly `Tr(Δ̂_A ρ Δ̂_B)` with the cell operators built on
/// `rho.dim() + pad` levels.
pub fn wigner_oracle_cells(rho: &FockOperator, a: &Cell, b: &Cell, pad: usize) -> Result<C64> {
    rho.validate_density(1e-8)?;
    let dim = rho.dim() + pad;
    let big = rho.resized(dim);
    let ea = delta_cell_operator(a, dim, WIGNER_PANEL);
    let eb = delta_cell_operator(b, dim, WIGNER_PANEL);
    Ok(ea.mul(&big).mul(&eb).trace())
}

/// Finite union of closed real intervals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RealSet {
    pub intervals: Vec<(f64, f64)>,
}

impl RealSet {
    pub fn empty() -> Self {
        RealSet { intervals: Vec::new() }
    }

    pub fn all() -> Self {
        RealSet { intervals: vec![(f64::NEG_INFINITY, f64::INFINITY)] }
    }

    pub fn point(x: f64) -> Self {
        RealSet { intervals: vec![(x, x)] }
    }

    pub fn interval(a: f64, b: f64) -> Self {
        RealSet { intervals: vec![(a.min(b), a.max(b))] }
    }

    pub fn union(mut self, other: RealSet) -> Self {
        self.intervals.extend(other.intervals);
        self
    }

    pub fn contains(&self, x: f64) -> bool {
        const EPS: f64 = 1e-9;
        self.intervals.iter().any(|(a, b)| x >= a - EPS && x <= b + EPS)
    }
}

/// `Φ(A,B) = Tr(ρ P_{A∩B})` with spectral projectors of `observable`.
pub fn spectral_decfun(rho: &FockOperator, observable: &FockOperator, a: &RealSet, b: &RealSet) -> Result<f64> {
    if !observable.is_hermitian(1e-10) {
        return Err(QprocError::Validation("observable must be Hermitian".into()));
    }
    if observable.dim() != rho.dim() {
        return Err(QprocError::InvalidDimension { dim: observable.dim(), reason: "observable must match the state" });
    }
    let eig = observable.matrix().clone().symmetric_eigen();
    let mut p = 0.0;
    for (k, lam) in eig.eigenvalues.iter().enumerate() {
        if a.contains(*lam) && b.contains(*lam) {
            let v = eig.eigenvectors.column(k);
            p += v.dotc(&(rho.matrix() * v)).re;
        }
    }
    Ok(p)
}

/// `υ(z, z') = <z|ρ|z'><z'|z>`.
pub fn coherent_single_time_decfun(rho: &FockOperator, z: PhasePoint, zp: PhasePoint) -> Result<C64> {
    let a = coherent_vector(z, rho.dim())?;
    let b = coherent_vector(zp, rho.dim())?;
    Ok(a.dotc(&rho.apply(&b)) * overlap(zp, z))
}
