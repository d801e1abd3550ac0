//! Mixed correlation functions `G^{n,m}`, the closed-time-path generating
//! functional and its Gaussian closed form, kinematic and velocity kernels, and
//! the Heisenberg flow of polynomial P-symbols.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::Serialize;

use crate::decfun::{theta, ProcessEngine};
use crate::error::{QprocError, Result};
use crate::fock::{trace_product, Evolution, FockOperator};
use crate::quadrature::Rule1D;
use crate::symbol::{anti_normal_operator, extract_p_symbol, Polynomial};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Largest polynomial degree the Heisenberg flow accepts.
pub const MAX_FLOW_DEGREE: u32 = 4;

/// Successive series orders must agree to this before a series value is accepted.
pub const SERIES_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum Observable {
    X,
    P,
    Symbol(Polynomial),
}

impl Observable {
    pub fn parse(id: &str) -> Result<Observable> {
        match id {
            "x" => Ok(Observable::X),
            "p" | "xi" => Ok(Observable::P),
            other => Err(QprocError::UnknownObservable(other.to_string())),
        }
    }

    pub fn symbol(&self) -> Polynomial {
        match self {
            Observable::X => Polynomial::x(),
            Observable::P => Polynomial::xi(),
            Observable::Symbol(p) => p.clone(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Observable::X => "x".into(),
            Observable::P => "p".into(),
            Observable::Symbol(p) => format!("{p:?}"),
        }
    }

    /// Anti-normal quantization of the P-symbol.
    pub fn operator(&self, dim: usize) -> Result<FockOperator> {
        anti_normal_operator(&self.symbol(), dim)
    }
}

/// Strictly increasing time labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(QprocError::Validation("time grid needs at least two points".into()));
        }
        if points.iter().any(|t| !t.is_finite()) || points.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(QprocError::Validation("time grid must be finite and strictly increasing".into()));
        }
        Ok(TimeGrid { points })
    }

    pub fn uniform(t0: f64, t1: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(QprocError::Validation("time grid needs at least two points".into()));
        }
        TimeGrid::new((0..n).map(|k| t0 + (t1 - t0) * k as f64 / (n - 1) as f64).collect())
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Smallest gap between neighbours.
    pub fn spacing(&self) -> f64 {
        self.points.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    }

    /// Trapezoid weights realizing `∫dt` on the grid.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.points.len();
        (0..n)
            .map(|k| {
                let left = if k > 0 { self.points[k] - self.points[k - 1] } else { 0.0 };
                let right = if k + 1 < n { self.points[k + 1] - self.points[k] } else { 0.0 };
                0.5 * (left + right)
            })
            .collect()
    }
}

/// Sources `J₊`, `J₋`, indexed `[observable][time]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurrentPair {
    pub grid: TimeGrid,
    pub j_plus: Vec<Vec<f64>>,
    pub j_minus: Vec<Vec<f64>>,
}

impl CurrentPair {
    pub fn new(grid: TimeGrid, j_plus: Vec<Vec<f64>>, j_minus: Vec<Vec<f64>>) -> Result<Self> {
        let shape_ok = |j: &Vec<Vec<f64>>| j.iter().all(|row| row.len() == grid.len() && row.iter().all(|v| v.is_finite()));
        if j_plus.len() != j_minus.len() || !shape_ok(&j_plus) || !shape_ok(&j_minus) {
            return Err(QprocError::GridMismatch("currents must be finite and shaped [observable][time]".into()));
        }
        Ok(CurrentPair { grid, j_plus, j_minus })
    }

    pub fn zeros(grid: TimeGrid, observables: usize) -> Self {
        let z = vec![vec![0.0; grid.len()]; observables];
        CurrentPair { grid, j_plus: z.clone(), j_minus: z }
    }

    pub fn observables(&self) -> usize {
        self.j_plus.len()
    }

    /// `Z[J₋, J₊]`'s arguments.
    pub fn swapped(&self) -> Self {
        CurrentPair { grid: self.grid.clone(), j_plus: self.j_minus.clone(), j_minus: self.j_plus.clone() }
    }
}

/// Two-point kernels `iΔ^{ab}(t, t')`, `iK^{ab}(t, t')` and means `X^a(t)` on a
/// grid. Kernel matrices are indexed by `(a·T + i, b·T + j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTable {
    pub observables: Vec<String>,
    pub grid: TimeGrid,
    pub i_delta: DMatrix<C64>,
    pub i_k: DMatrix<C64>,
    pub mean: Vec<Vec<f64>>,
}

impl KernelTable {
    fn zeros(observables: Vec<String>, grid: TimeGrid) -> Self {
        let n = observables.len() * grid.len();
        let mean = vec![vec![0.0; grid.len()]; observables.len()];
        KernelTable { observables, grid, i_delta: DMatrix::zeros(n, n), i_k: DMatrix::zeros(n, n), mean }
    }

    fn idx(&self, a: usize, i: usize) -> usize {
        a * self.grid.len() + i
    }

    pub fn delta(&self, a: usize, b: usize, i: usize, j: usize) -> C64 {
        self.i_delta[(self.idx(a, i), self.idx(b, j))]
    }

    pub fn k(&self, a: usize, b: usize, i: usize, j: usize) -> C64 {
        self.i_k[(self.idx(a, i), self.idx(b, j))]
    }

    /// Whether the entry sits at coincident times, where `θ(0)` enters.
    pub fn equal_time(&self, i: usize, j: usize) -> bool {
        self.grid.points[i] == self.grid.points[j]
    }

    /// Worst violation of `iΔ^{ab}(t,t') = iΔ^{ba}(t',t)` and
    /// `iK^{ab}(t,t') = conj iK^{ba}(t',t)`.
    pub fn consistency_defect(&self) -> f64 {
        let n = self.i_delta.nrows();
        let mut worst: f64 = 0.0;
        for r in 0..n {
            for c in 0..n {
                worst = worst.max((self.i_delta[(r, c)] - self.i_delta[(c, r)]).norm());
                worst = worst.max((self.i_k[(r, c)] - self.i_k[(c, r)].conj()).norm());
            }
        }
        worst
    }

    /// Kernels of the scalar process `Σ_a c_a F^a`.
    pub fn linear_combination(&self, coeffs: &[f64], name: &str) -> Result<KernelTable> {
        if coeffs.len() != self.observables.len() {
            return Err(QprocError::GridMismatch("one coefficient per observable expected".into()));
        }
        let t = self.grid.len();
        let mut out = KernelTable::zeros(vec![name.to_string()], self.grid.clone());
        for i in 0..t {
            for j in 0..t {
                let mut d = ZERO;
                let mut k = ZERO;
                for (a, ca) in coeffs.iter().enumerate() {
                    for (b, cb) in coeffs.iter().enumerate() {
                        d += self.delta(a, b, i, j) * (ca * cb);
                        k += self.k(a, b, i, j) * (ca * cb);
                    }
                }
                out.i_delta[(i, j)] = d;
                out.i_k[(i, j)] = k;
            }
            out.mean[0][i] = coeffs.iter().enumerate().map(|(a, c)| c * self.mean[a][i]).sum();
        }
        Ok(out)
    }

    /// CSV with columns `a,b,t_index,t'_index,re,im`; `which` picks `iΔ` or `iK`.
    pub fn to_csv(&self, which: KernelKind) -> String {
        let m = match which {
            KernelKind::Delta => &self.i_delta,
            KernelKind::K => &self.i_k,
        };
        let mut s = String::from("a,b,t_index,t'_index,re,im\n");
        let t = self.grid.len();
        for (a, na) in self.observables.iter().enumerate() {
            for (b, nb) in self.observables.iter().enumerate() {
                for i in 0..t {
                    for j in 0..t {
                        let v = m[(a * t + i, b * t + j)];
                        let _ = writeln!(s, "{na},{nb},{i},{j},{},{}", v.re, v.im);
                    }
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Delta,
    K,
}

// ------------------------------------------------------------- correlations

fn heisenberg_ops(engine: &ProcessEngine, obs: &[(Observable, f64)]) -> Result<Vec<(FockOperator, f64)>> {
    obs.iter().map(|(o, t)| Ok((engine.heisenberg(&o.operator(engine.dim())?, *t), *t))).collect()
}

/// `G^{n,m}` with each branch time-ordered (latest leftmost forward, earliest
/// leftmost backward); equal times keep the supplied order.
pub fn g_nm_observables(
    engine: &ProcessEngine,
    forward: &[(Observable, f64)],
    backward: &[(Observable, f64)],
) -> Result<C64> {
    let mut fwd = heisenberg_ops(engine, forward)?;
    let mut bwd = heisenberg_ops(engine, backward)?;
    fwd.sort_by(|a, b| a.1.total_cmp(&b.1));
    bwd.sort_by(|a, b| a.1.total_cmp(&b.1));
    let dim = engine.dim();
    let mut left = FockOperator::identity(dim);
    for (op, _) in &fwd {
        left = op.mul(&left);
    }
    let mut right = FockOperator::identity(dim);
    for (op, _) in &bwd {
        right = right.mul(op);
    }
    Ok(trace_product(&left.mul(engine.rho()), &right))
}

/// `G^{n,m}` for observable ids `x`, `p`.
pub fn g_nm(engine: &ProcessEngine, forward: &[(&str, f64)], backward: &[(&str, f64)]) -> Result<C64> {
    let parse = |v: &[(&str, f64)]| -> Result<Vec<(Observable, f64)>> {
        v.iter().map(|(id, t)| Ok((Observable::parse(id)?, *t))).collect()
    };
    g_nm_observables(engine, &parse(forward)?, &parse(backward)?)
}

/// Connected two-point kernels and means of `engine` on `grid`, from the oracle.
pub fn oracle_kernels(engine: &ProcessEngine, observables: &[Observable], grid: &TimeGrid) -> Result<KernelTable> {
    let names = observables.iter().map(Observable::name).collect();
    let mut table = KernelTable::zeros(names, grid.clone());
    let t = grid.points();
    for (a, oa) in observables.iter().enumerate() {
        for (i, ti) in t.iter().enumerate() {
            table.mean[a][i] = g_nm_observables(engine, &[(oa.clone(), *ti)], &[])?.re;
        }
    }
    for (a, oa) in observables.iter().enumerate() {
        for (b, ob) in observables.iter().enumerate() {
            for (i, ti) in t.iter().enumerate() {
                for (j, tj) in t.iter().enumerate() {
                    let xx = table.mean[a][i] * table.mean[b][j];
                    let g11 = g_nm_observables(engine, &[(oa.clone(), *ti)], &[(ob.clone(), *tj)])?;
                    // θ-weighted ordering with θ(0) = 1/2 symmetrizes equal times.
                    let later_a = g_nm_observables(engine, &[(ob.clone(), *tj), (oa.clone(), *ti)], &[])?;
                    let later_b = g_nm_observables(engine, &[(oa.clone(), *ti), (ob.clone(), *tj)], &[])?;
                    let g20 = if ti == tj {
                        0.5 * (later_a + later_b)
                    } else {
                        later_a * theta(ti - tj) + later_b * theta(tj - ti)
                    };
                    let r = table.idx(a, i);
                    let c = table.idx(b, j);
                    table.i_delta[(r, c)] = g20 - xx;
                    table.i_k[(r, c)] = g11 - xx;
                }
            }
        }
    }
    Ok(table)
}

/// `η(t) = θ(t) − θ(−t)`.
pub fn eta(t: f64) -> f64 {
    theta(t) - theta(-t)
}

/// Kernels of the kinematic process of a Gaussian reference state with
/// `<x²> = σ_x²`, `<p²> = σ_p²`, `<xp + px> = C`; observables `(x, p)`.
pub fn kinematic_particle_kernels(sigma_x2: f64, sigma_p2: f64, c_corr: f64, grid: &TimeGrid) -> Result<KernelTable> {
    if !(sigma_x2 > 0.0) || !(sigma_p2 > 0.0) {
        return Err(QprocError::Validation("variances must be positive".into()));
    }
    let mut table = KernelTable::zeros(vec!["x".into(), "p".into()], grid.clone());
    let t = grid.points().to_vec();
    let half = 0.5;
    for (i, ti) in t.iter().enumerate() {
        for (j, tj) in t.iter().enumerate() {
            let e = eta(ti - tj);
            let set = |m: &mut DMatrix<C64>, a: usize, b: usize, v: C64, n: usize| m[(a * n + i, b * n + j)] = v;
            let n = t.len();
            set(&mut table.i_delta, 0, 0, C64::new(sigma_x2, 0.0), n);
            set(&mut table.i_delta, 1, 1, C64::new(sigma_p2, 0.0), n);
            set(&mut table.i_delta, 0, 1, C64::new(c_corr, e) * half, n);
            set(&mut table.i_delta, 1, 0, C64::new(c_corr, -e) * half, n);
            set(&mut table.i_k, 0, 0, C64::new(sigma_x2, 0.0), n);
            set(&mut table.i_k, 1, 1, C64::new(sigma_p2, 0.0), n);
            set(&mut table.i_k, 0, 1, C64::new(c_corr, -1.0) * half, n);
            set(&mut table.i_k, 1, 0, C64::new(c_corr, 1.0) * half, n);
        }
    }
    Ok(table)
}

/// Kinematic kernel entry between `x`/`p` (`0`/`1`) at arbitrary times.
fn kinematic_entry(delta: bool, a: usize, b: usize, dt: f64, sx2: f64, sp2: f64, c: f64) -> C64 {
    match (a, b) {
        (0, 0) => C64::new(sx2, 0.0),
        (1, 1) => C64::new(sp2, 0.0),
        (0, 1) => C64::new(c, if delta { eta(dt) } else { -1.0 }) * 0.5,
        _ => C64::new(c, if delta { -eta(dt) } else { 1.0 }) * 0.5,
    }
}

/// Kernels for `(x, p, ẋ, ṗ)` of the vacuum-like kinematic process, the dotted
/// observables being forward differences `(F(t+ε) − F(t))/ε`.
pub fn velocity_process_kernels(grid: &TimeGrid, epsilon: f64) -> Result<KernelTable> {
    velocity_kernels_for(grid, epsilon, 0.5, 0.5, 0.0)
}

pub fn velocity_kernels_for(grid: &TimeGrid, epsilon: f64, sx2: f64, sp2: f64, c: f64) -> Result<KernelTable> {
    if !(epsilon > 0.0) || epsilon >= grid.spacing() {
        return Err(QprocError::Resolution(format!(
            "difference step {epsilon} must be positive and below the grid spacing {}",
            grid.spacing()
        )));
    }
    let names = ["x", "p", "xdot", "pdot"].map(String::from).to_vec();
    let mut table = KernelTable::zeros(names, grid.clone());
    let t = grid.points().to_vec();
    let n = t.len();
    // Observable `o` is base `o % 2`, differenced when `o ≥ 2`.
    let taps = |o: usize| -> Vec<(f64, f64)> {
        if o < 2 {
            vec![(0.0, 1.0)]
        } else {
            vec![(epsilon, 1.0 / epsilon), (0.0, -1.0 / epsilon)]
        }
    };
    for a in 0..4 {
        for b in 0..4 {
            for i in 0..n {
                for j in 0..n {
                    let (mut d, mut k) = (ZERO, ZERO);
                    for (sa, wa) in taps(a) {
                        for (sb, wb) in taps(b) {
                            let dt = (t[i] + sa) - (t[j] + sb);
                            d += kinematic_entry(true, a % 2, b % 2, dt, sx2, sp2, c) * (wa * wb);
                            k += kinematic_entry(false, a % 2, b % 2, dt, sx2, sp2, c) * (wa * wb);
                        }
                    }
                    table.i_delta[(a * n + i, b * n + j)] = d;
                    table.i_k[(a * n + i, b * n + j)] = k;
                }
            }
        }
    }
    Ok(table)
}

/// `∫∫ J(t) iΔ^{ẋṗ}_ε(t − t') J'(t') dt dt'` on `[t0, t1]`, integrating the
/// piecewise-constant difference kernel exactly in `t'` and by Gauss–Legendre
/// in `t`. Tends to `−i ∫ J J̇' dt` as `ε → 0`.
pub fn velocity_cross_form(
    j: impl Fn(f64) -> f64,
    jp_antiderivative: impl Fn(f64) -> f64,
    t0: f64,
    t1: f64,
    epsilon: f64,
) -> C64 {
    // iΔ^{ẋṗ}_ε(s) = (i/2)(2η(s) − η(s+ε) − η(s−ε))/ε² = (i/ε²)·sign(s)·1{|s|<ε}
    let jp_int = |a: f64, b: f64| jp_antiderivative(b.clamp(t0, t1)) - jp_antiderivative(a.clamp(t0, t1));
    let rule = Rule1D::composite(t0, t1, 16, epsilon.min(0.05));
    let v = rule.integrate(|t| j(t) * (jp_int(t - epsilon, t) - jp_int(t, t + epsilon)));
    I * v / (epsilon * epsilon)
}

// -------------------------------------------------------------- CTP functional

fn combined_source(ops: &[FockOperator], currents: &[Vec<f64>], k: usize, w: f64) -> FockOperator {
    let dim = ops[0].dim();
    let mut acc = FockOperator::zeros(dim);
    for (op, j) in ops.iter().zip(currents) {
        if j[k] != 0.0 {
            acc = acc.add(&op.scale(C64::new(w * j[k], 0.0)));
        }
    }
    acc
}

/// `exp(i s A)` or its Taylor polynomial of the given order.
fn exp_i(a: &FockOperator, s: f64, order: Option<usize>) -> Result<FockOperator> {
    match order {
        None => Ok(Evolution::new(a)?.unitary(-s)),
        Some(n) => {
            let dim = a.dim();
            let mut term = FockOperator::identity(dim);
            let mut acc = term.clone();
            for k in 1..=n {
                term = term.mul(a).scale(I * s / k as f64);
                acc = acc.add(&term);
            }
            Ok(acc)
        }
    }
}

fn ctp_value(engine: &ProcessEngine, observables: &[Observable], currents: &CurrentPair, order: Option<usize>) -> Result<C64> {
    let dim = engine.dim();
    let base: Vec<FockOperator> = observables.iter().map(|o| o.operator(dim)).collect::<Result<_>>()?;
    let w = currents.grid.weights();
    let mut t_ord = FockOperator::identity(dim);
    let mut b_ord = FockOperator::identity(dim);
    for (k, &t) in currents.grid.points().iter().enumerate() {
        let ops: Vec<FockOperator> = base.iter().map(|o| engine.heisenberg(o, t)).collect();
        let jp = combined_source(&ops, &currents.j_plus, k, w[k]);
        let jm = combined_source(&ops, &currents.j_minus, k, w[k]);
        t_ord = exp_i(&jp, 1.0, order)?.mul(&t_ord);
        b_ord = b_ord.mul(&exp_i(&jm, -1.0, order)?);
    }
    Ok(trace_product(&t_ord.mul(engine.rho()), &b_ord))
}

/// `Z[J₊, J₋] = Tr(T[e^{iF·J₊}] ρ T̄[e^{−iF·J₋}])` on the currents' grid. With
/// `truncation_order`, each exponential is replaced by its Taylor polynomial
/// and the result is accepted only if it agrees with one order less.
pub fn ctp_exact(
    engine: &ProcessEngine,
    observables: &[Observable],
    currents: &CurrentPair,
    truncation_order: Option<usize>,
) -> Result<C64> {
    if observables.len() != currents.observables() {
        return Err(QprocError::GridMismatch("one current row per observable expected".into()));
    }
    match truncation_order {
        None => ctp_value(engine, observables, currents, None),
        Some(n) => {
            let hi = ctp_value(engine, observables, currents, Some(n))?;
            let lo = ctp_value(engine, observables, currents, Some(n.saturating_sub(1)))?;
            let difference = (hi - lo).norm();
            if difference > SERIES_TOL {
                return Err(QprocError::SeriesNonconvergence { difference });
            }
            Ok(hi)
        }
    }
}

fn bilinear(m: &DMatrix<C64>, a: &[f64], b: &[f64]) -> C64 {
    let mut acc = ZERO;
    for (r, x) in a.iter().enumerate() {
        if *x == 0.0 {
            continue;
        }
        for (c, y) in b.iter().enumerate() {
            acc += m[(r, c)] * (x * y);
        }
    }
    acc
}

/// Closed form of `Z` for a Gaussian process:
/// `exp(−½J₊·iΔ·J₊ − ½J₋·conj(iΔ)·J₋ + J₊·iK·J₋ + i(J₊ − J₋)·X)`.
pub fn gaussian_ctp(kernels: &KernelTable, currents: &CurrentPair) -> Result<C64> {
    if kernels.grid != currents.grid {
        return Err(QprocError::GridMismatch("kernel and current grids differ".into()));
    }
    if kernels.observables.len() != currents.observables() {
        return Err(QprocError::GridMismatch("kernel and current observables differ".into()));
    }
    let w = currents.grid.weights();
    let flat = |j: &Vec<Vec<f64>>| -> Vec<f64> {
        j.iter().flat_map(|row| row.iter().zip(&w).map(|(v, wk)| v * wk)).collect()
    };
    let jp = flat(&currents.j_plus);
    let jm = flat(&currents.j_minus);
    let x: Vec<f64> = kernels.mean.iter().flatten().copied().collect();
    let conj_delta = kernels.i_delta.map(|z| z.conj());
    let lin: f64 = jp.iter().zip(&jm).zip(&x).map(|((p, m), xv)| (p - m) * xv).sum();
    let exponent = -0.5 * bilinear(&kernels.i_delta, &jp, &jp) - 0.5 * bilinear(&conj_delta, &jm, &jm)
        + bilinear(&kernels.i_k, &jp, &jm)
        + I * lin;
    Ok(exponent.exp())
}

/// Which source a functional derivative acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Plus,
    Minus,
}

/// Two-point function recovered from second central differences of `ctp_exact`
/// at zero sources (step `h`, one Richardson refinement). Derivatives in
/// `(J₊, J₊)`, `(J₊, J₋)`, `(J₋, J₋)` give `G^{2,0}`, `G^{1,1}`, `G^{0,2}`.
pub fn ctp_two_point(
    engine: &ProcessEngine,
    observables: &[Observable],
    grid: &TimeGrid,
    first: (Branch, usize, usize),
    second: (Branch, usize, usize),
    h: f64,
) -> Result<C64> {
    let w = grid.weights();
    let eval = |s1: f64, s2: f64| -> Result<C64> {
        let mut c = CurrentPair::zeros(grid.clone(), observables.len());
        for ((br, a, k), s) in [(first, s1), (second, s2)] {
            let row = match br {
                Branch::Plus => &mut c.j_plus,
                Branch::Minus => &mut c.j_minus,
            };
            row[a][k] += s;
        }
        ctp_exact(engine, observables, &c, None)
    };
    let mixed = |h: f64| -> Result<C64> {
        Ok((eval(h, h)? - eval(h, -h)? - eval(-h, h)? + eval(-h, -h)?) / (4.0 * h * h))
    };
    let coarse = mixed(h)?;
    let fine = mixed(0.5 * h)?;
    let d2 = (fine * 4.0 - coarse) / 3.0;
    // ∂²Z = (±i)(±i) w_k w_l G.
    let factor = |b: Branch| if b == Branch::Plus { I } else { -I };
    Ok(d2 / (factor(first.0) * factor(second.0) * w[first.2] * w[second.2]))
}

// -------------------------------------------------------------- Heisenberg flow

/// P-symbol of `e^{iHs} Â_f e^{−iHs}`, extracted by least squares over
/// polynomials of degree ≤ 4 on a low-level block, with the fit residual.
pub fn heisenberg_flow(hamiltonian: &FockOperator, f: &Polynomial, s: f64) -> Result<(Polynomial, f64)> {
    if f.degree() > MAX_FLOW_DEGREE {
        return Err(QprocError::UnsupportedObservable(format!("degree {} exceeds {MAX_FLOW_DEGREE}", f.degree())));
    }
    let dim = hamiltonian.dim();
    let evo = Evolution::new(hamiltonian)?;
    let a = anti_normal_operator(f, dim)?;
    let moved = evo.heisenberg(&a, s);
    let block = (dim / 3).clamp(MAX_FLOW_DEGREE as usize + 2, 12);
    extract_p_symbol(&moved, MAX_FLOW_DEGREE, block)
}
