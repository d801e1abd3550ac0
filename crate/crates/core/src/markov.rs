//! Coherent-state propagators, the quantum Chapman–Kolmogorov composition, propagator
//! symmetries, and reconstruction of the physical subspace and spectrum from
//! gridded propagator tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::coherent::{coherent_components, coherent_vector, components_matrix, level_mass_outside, log_overlap, overlap, Cell, PhasePoint, MEASURE};
use crate::decfun::ProcessEngine;
use crate::error::{QprocError, Result};
use crate::fock::CVector;

/// Relative Gram eigenvalue threshold used when none is given.
pub const DEFAULT_THRESHOLD: f64 = 1e-6;

/// Default unitarity tolerance for the projected step operator.
pub const UNITARITY_TOL: f64 = 1e-6;

/// Largest tail bound the composition check accepts before refusing the region.
pub const CK_TAIL_TOL: f64 = 1e-4;

/// `χ(z, t | z₀, s) = <z|e^{−iH(t−s)}|z₀>`.
pub fn propagator(engine: &ProcessEngine, z: PhasePoint, t: f64, z0: PhasePoint, s: f64) -> Result<C64> {
    if t < s {
        return Err(QprocError::Validation(format!("propagator needs t ≥ s, got t = {t}, s = {s}")));
    }
    chi_signed(engine, z, z0, t - s)
}

/// `χ` for any sign of the elapsed time; anchors are guarded against truncation.
fn chi_signed(engine: &ProcessEngine, z: PhasePoint, z0: PhasePoint, tau: f64) -> Result<C64> {
    match engine.evolution() {
        None => Ok(overlap(z, z0)),
        Some(_) => {
            // The source is guarded; the target is a projected coherent state.
            let a = coherent_components(z, engine.dim());
            let b = coherent_vector(z0, engine.dim())?;
            Ok(a.dotc(&engine.unitary(tau).apply(&b)))
        }
    }
}

/// `e^{−iH τ}|z₀>` in the engine's basis.
fn evolved(engine: &ProcessEngine, z0: PhasePoint, tau: f64) -> Result<CVector> {
    let v = coherent_vector(z0, engine.dim())?;
    Ok(engine.unitary(tau).apply(&v))
}

/// Weight of `v` outside the disc of radius `r`.
fn mass_outside(v: &CVector, r: f64) -> f64 {
    v.iter().enumerate().map(|(n, c)| c.norm_sqr() * level_mass_outside(n, r)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CkReport {
    pub defect: f64,
    /// Cauchy–Schwarz bound on the weight the region misses.
    pub tail: f64,
    pub nodes: usize,
}

/// `|υ(z₁,z₁';t|z₀,z₀';s) − ∬dz dz' υ(z₁,z₁';t|z,z';s_mid) υ(z,z';s_mid|z₀,z₀';s)|`.
/// The factorized integrand lets the double integral run as a product of two
/// single integrals over `region`.
#[allow(clippy::too_many_arguments)]
pub fn chapman_kolmogorov_check(
    engine: &ProcessEngine,
    z1: PhasePoint,
    z1p: PhasePoint,
    t: f64,
    z0: PhasePoint,
    z0p: PhasePoint,
    s: f64,
    s_mid: f64,
    region: &Cell,
    quad_order: usize,
) -> Result<CkReport> {
    if !(s < s_mid && s_mid < t) {
        return Err(QprocError::Validation("need s < s_mid < t".into()));
    }
    let dim = engine.dim();
    let r_in = 0.5 * (region.x_range.1 - region.x_range.0).min(region.xi_range.1 - region.xi_range.0);
    let centred = region.center().radius();
    let d = r_in - centred;
    // Intermediate states: e^{−iH(s_mid−s)}|z₀> and e^{+iH(t−s_mid)}|z₁>.
    let mut tail: f64 = 0.0;
    let mut legs = Vec::new();
    for (a, b) in [(z1, z0), (z1p, z0p)] {
        let fwd = evolved(engine, b, s_mid - s)?;
        let bwd = evolved(engine, a, s_mid - t)?;
        tail = tail.max(if d > 0.0 { (mass_outside(&fwd, d) * mass_outside(&bwd, d)).sqrt() } else { 1.0 });
        legs.push((fwd, bwd));
    }
    if tail > CK_TAIL_TOL {
        return Err(QprocError::RegionTooSmall { tail, tolerance: CK_TAIL_TOL });
    }
    let rule = region.with_order(quad_order).rule(0, engine.family().quad.panel_width);
    let points: Vec<PhasePoint> = rule.points.iter().map(|(x, xi)| PhasePoint::new(*x, *xi)).collect();
    let comps = components_matrix(&points, dim);
    let mut integral = [C64::new(0.0, 0.0); 2];
    for (k, (fwd, bwd)) in legs.iter().enumerate() {
        // <z₁|U|z><z|U|z₀> = conj(<z|bwd>) <z|fwd>
        let a = comps.ad_mul(fwd);
        let b = comps.ad_mul(bwd);
        integral[k] = rule.weights.iter().enumerate().map(|(i, w)| b[i].conj() * a[i] * (w * MEASURE)).sum();
    }
    let composed = integral[0] * integral[1].conj();
    let direct = propagator(engine, z1, t, z0, s)? * propagator(engine, z1p, t, z0p, s)?.conj();
    Ok(CkReport { defect: (composed - direct).norm(), tail, nodes: points.len() })
}

/// The density-matrix propagator `υ(z,z';t|z₀,z₀';s)`.
#[derive(Debug, Clone)]
pub enum DensityPropagator {
    /// `χ(z,t|z₀,s) conj χ(z',t|z₀',s)` of a unitary engine.
    Unitary(ProcessEngine),
    /// Amplitude damping at rate `gamma`: `|z₀><z₀'|` goes to
    /// `<z₀'|z₀>^{1−η} |√η z₀><√η z₀'|` with `η = e^{−γ(t−s)}`.
    Damped { gamma: f64 },
}

/// One argument tuple `(z, z', t, z₀, z₀', s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagatorSample {
    pub z: PhasePoint,
    pub zp: PhasePoint,
    pub t: f64,
    pub z0: PhasePoint,
    pub z0p: PhasePoint,
    pub s: f64,
}

impl PropagatorSample {
    pub fn random(rng: &mut impl Rng, radius: f64, t_max: f64) -> Self {
        let mut p = || PhasePoint::new(rng.gen_range(-radius..radius), rng.gen_range(-radius..radius));
        let (z, zp, z0, z0p) = (p(), p(), p(), p());
        let s = rng.gen_range(0.0..t_max);
        let t = rng.gen_range(s..=t_max);
        PropagatorSample { z, zp, t, z0, z0p, s }
    }
}

impl DensityPropagator {
    /// `υ` at elapsed time `tau = t − s`, which may be negative.
    pub fn value_at(&self, z: PhasePoint, zp: PhasePoint, z0: PhasePoint, z0p: PhasePoint, tau: f64) -> Result<C64> {
        match self {
            DensityPropagator::Unitary(e) => Ok(chi_signed(e, z, z0, tau)? * chi_signed(e, zp, z0p, tau)?.conj()),
            DensityPropagator::Damped { gamma } => {
                let eta = (-gamma * tau).exp();
                let shrink = |w: PhasePoint| PhasePoint::new(w.x * eta.sqrt(), w.xi * eta.sqrt());
                let coherence = ((1.0 - eta) * log_overlap(z0p, z0)).exp();
                Ok(overlap(z, shrink(z0)) * overlap(shrink(z0p), zp) * coherence)
            }
        }
    }

    pub fn value(&self, z: PhasePoint, zp: PhasePoint, t: f64, z0: PhasePoint, z0p: PhasePoint, s: f64) -> Result<C64> {
        if t < s {
            return Err(QprocError::Validation(format!("propagator needs t ≥ s, got t = {t}, s = {s}")));
        }
        self.value_at(z, zp, z0, z0p, t - s)
    }

    pub fn sample(&self, p: &PropagatorSample) -> Result<C64> {
        self.value(p.z, p.zp, p.t, p.z0, p.z0p, p.s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SymmetryReport {
    pub hermiticity: f64,
    /// `|∫dz υ(z,z;t|z₀,z₀';s) − <z₀'|z₀>|`.
    pub trace_preservation: f64,
    /// Smallest `Σ conj(F_i) F_j υ(z_i,z_j;t|z₀,z₀;s)` over random `F`.
    pub positivity_min: f64,
}

/// Hermiticity, trace preservation and positivity of `υ` over `samples`. The
/// trace integral runs over `region`; positivity uses the sample points as the
/// support of random test functions drawn from `seed`.
pub fn propagator_symmetry_check(
    prop: &DensityPropagator,
    samples: &[PropagatorSample],
    region: &Cell,
    seed: u64,
) -> Result<SymmetryReport> {
    let mut hermiticity: f64 = 0.0;
    let mut trace_preservation: f64 = 0.0;
    let rule = region.rule(0, 1.0);
    for p in samples {
        let a = prop.sample(p)?;
        let b = prop.value(p.zp, p.z, p.t, p.z0p, p.z0, p.s)?;
        hermiticity = hermiticity.max((a - b.conj()).norm());
        let integral = trace_integral(prop, p, &rule)?;
        trace_preservation = trace_preservation.max((integral - overlap(p.z0p, p.z0)).norm());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positivity_min = f64::INFINITY;
    let points: Vec<PhasePoint> = samples.iter().flat_map(|p| [p.z, p.zp]).collect();
    for p in samples {
        let m = DMatrix::from_fn(points.len(), points.len(), |i, j| {
            prop.value(points[i], points[j], p.t, p.z0, p.z0, p.s).unwrap_or(C64::new(f64::NAN, 0.0))
        });
        for _ in 0..8 {
            let f: Vec<C64> = (0..points.len()).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
            let mut q = C64::new(0.0, 0.0);
            for i in 0..points.len() {
                for j in 0..points.len() {
                    q += f[i].conj() * f[j] * m[(i, j)];
                }
            }
            positivity_min = positivity_min.min(q.re);
        }
    }
    Ok(SymmetryReport { hermiticity, trace_preservation, positivity_min })
}

/// `∫dz υ(z,z;t|z₀,z₀';s)` on a rule; the unitary case evolves the sources once.
fn trace_integral(prop: &DensityPropagator, p: &PropagatorSample, rule: &crate::quadrature::Rule2D) -> Result<C64> {
    let points: Vec<PhasePoint> = rule.points.iter().map(|(x, xi)| PhasePoint::new(*x, *xi)).collect();
    match prop {
        DensityPropagator::Unitary(e) if e.evolution().is_some() => {
            let a = evolved(e, p.z0, p.t - p.s)?;
            let b = evolved(e, p.z0p, p.t - p.s)?;
            let comps = components_matrix(&points, e.dim());
            let (ca, cb) = (comps.ad_mul(&a), comps.ad_mul(&b));
            Ok(rule.weights.iter().enumerate().map(|(i, w)| ca[i] * cb[i].conj() * (w * MEASURE)).sum())
        }
        _ => {
            let mut acc = C64::new(0.0, 0.0);
            for (z, w) in points.iter().zip(&rule.weights) {
                acc += prop.value(*z, *z, p.t, p.z0, p.z0p, p.s)? * (w * MEASURE);
            }
            Ok(acc)
        }
    }
}

/// Largest sampled `|υ(z̃,z̃';(T−t)−(T−s)) − conj υ(z,z';t−s)|`, where `z̃` is `z`
/// with momentum reversed and `T = tf − t0`.
pub fn time_reversibility_check(prop: &DensityPropagator, interval: (f64, f64), samples: &[PropagatorSample]) -> Result<f64> {
    let span = interval.1 - interval.0;
    let mut worst: f64 = 0.0;
    for p in samples {
        let forward = prop.sample(p)?;
        let tau_rev = (span - p.t) - (span - p.s);
        let reversed = prop.value_at(p.z.flipped(), p.zp.flipped(), p.z0.flipped(), p.z0p.flipped(), tau_rev)?;
        worst = worst.max((reversed - forward.conj()).norm());
    }
    Ok(worst)
}

/// `υ^{N,N}` assembled from propagator factors: the initial kernel at the first
/// time, one `υ` per later step, and the closing overlap `<z'_N|z_N>`.
pub fn markov_chain_value(engine: &ProcessEngine, forward: &[PhasePoint], backward: &[PhasePoint], times: &[f64]) -> Result<C64> {
    if forward.len() != times.len() || backward.len() != times.len() || times.is_empty() {
        return Err(QprocError::Validation("one forward and one backward point per time".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(QprocError::Validation("times must increase".into()));
    }
    let prop = DensityPropagator::Unitary(engine.clone());
    let u = engine.unitary(times[0]);
    let mut total = C64::new(0.0, 0.0);
    // ρ₀(z, z') at the first time, summed over pure components.
    let a = coherent_components(forward[0], engine.dim());
    let b = coherent_components(backward[0], engine.dim());
    for (p, psi) in engine.components() {
        let moved = u.apply(psi);
        total += a.dotc(&moved) * b.dotc(&moved).conj() * *p;
    }
    for k in 1..times.len() {
        total *= prop.value(forward[k], backward[k], times[k], forward[k - 1], backward[k - 1], times[k - 1])?;
    }
    let last = times.len() - 1;
    Ok(total * overlap(backward[last], forward[last]))
}

/// Ratio of the second to the first singular value of `υ` matricized with rows
/// `(z, z₀)` and columns `(z', z₀')`; a unitary propagator is `χ ⊗ conj χ` and
/// gives zero.
pub fn factorization_ratio(prop: &DensityPropagator, targets: &[PhasePoint], sources: &[PhasePoint], tau: f64) -> Result<f64> {
    let pairs: Vec<(PhasePoint, PhasePoint)> = targets.iter().flat_map(|z| sources.iter().map(move |w| (*z, *w))).collect();
    let mut m = DMatrix::<C64>::zeros(pairs.len(), pairs.len());
    for (i, (z, z0)) in pairs.iter().enumerate() {
        for (j, (zp, z0p)) in pairs.iter().enumerate() {
            m[(i, j)] = prop.value_at(*z, *zp, *z0, *z0p, tau)?;
        }
    }
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(if sv[0] > 0.0 { sv.get(1).copied().unwrap_or(0.0) / sv[0] } else { 0.0 })
}

// ----------------------------------------------------------------- tables

/// Grid points with their quadrature weights (measure included).
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGrid {
    pub points: Vec<PhasePoint>,
    pub weights: Vec<f64>,
    pub spacing: f64,
}

impl PhaseGrid {
    /// Lattice points of spacing `h` inside the disc of radius `r`, each with
    /// weight `h²/2π`.
    pub fn disc(radius: f64, spacing: f64) -> Result<Self> {
        if !(radius > 0.0) || !(spacing > 0.0) {
            return Err(QprocError::Validation("grid radius and spacing must be positive".into()));
        }
        let n = (radius / spacing).floor() as i64;
        let mut points = Vec::new();
        for i in -n..=n {
            for j in -n..=n {
                let z = PhasePoint::new(i as f64 * spacing, j as f64 * spacing);
                if z.radius() <= radius + 1e-12 {
                    points.push(z);
                }
            }
        }
        Ok(PhaseGrid::uniform(points, spacing))
    }

    pub fn uniform(points: Vec<PhasePoint>, spacing: f64) -> Self {
        let w = spacing * spacing * MEASURE;
        let weights = vec![w; points.len()];
        PhaseGrid { points, weights, spacing }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Gridded `χ(z_i, t | z_j, s)`, one matrix per time pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatorTable {
    pub grid: PhaseGrid,
    pub blocks: Vec<((f64, f64), DMatrix<C64>)>,
}

impl PropagatorTable {
    /// Tabulates the engine's propagator between projected coherent states
    /// `P_N|z>`, so points beyond the truncation guard are allowed.
    pub fn from_engine(engine: &ProcessEngine, grid: PhaseGrid, time_pairs: &[(f64, f64)]) -> Result<Self> {
        let a = components_matrix(&grid.points, engine.dim());
        let mut blocks = Vec::new();
        for &(t, s) in time_pairs {
            if t < s {
                return Err(QprocError::Validation(format!("time pair ({t}, {s}) has t < s")));
            }
            let u = engine.unitary(t - s);
            blocks.push(((t, s), a.adjoint() * (u.matrix() * &a)));
        }
        Ok(PropagatorTable { grid, blocks })
    }

    pub fn block(&self, t: f64, s: f64) -> Option<&DMatrix<C64>> {
        self.blocks.iter().find(|((a, b), _)| *a == t && *b == s).map(|(_, m)| m)
    }

    /// First block with `t − s = dt` (to 1e-12).
    pub fn step_block(&self, dt: f64) -> Option<&DMatrix<C64>> {
        self.blocks.iter().find(|((t, s), _)| ((t - s) - dt).abs() <= 1e-12).map(|(_, m)| m)
    }

    /// Columns `zi_x,zi_xi,zj_x,zj_xi,t,s,re,im`, shortest round-trip floats.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("zi_x,zi_xi,zj_x,zj_xi,t,s,re,im\n");
        for ((t, s), m) in &self.blocks {
            for (i, zi) in self.grid.points.iter().enumerate() {
                for (j, zj) in self.grid.points.iter().enumerate() {
                    let v = m[(i, j)];
                    let _ = writeln!(out, "{},{},{},{},{t},{s},{},{}", zi.x, zi.xi, zj.x, zj.xi, v.re, v.im);
                }
            }
        }
        out
    }

    /// Parses [`PropagatorTable::to_csv`] output, or any table on a uniform
    /// lattice; the spacing is inferred from the coordinates.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header.trim() != "zi_x,zi_xi,zj_x,zj_xi,t,s,re,im" {
            return Err(QprocError::Validation(format!("unexpected propagator table header {header:?}")));
        }
        let key = |z: PhasePoint| (z.x.to_bits(), z.xi.to_bits());
        let mut index: BTreeMap<(u64, u64), usize> = BTreeMap::new();
        let mut points = Vec::new();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| QprocError::Validation(format!("line {}: {e}", n + 2)))?;
            if v.len() != 8 {
                return Err(QprocError::Validation(format!("line {}: expected 8 columns", n + 2)));
            }
            let zi = PhasePoint::new(v[0], v[1]);
            let zj = PhasePoint::new(v[2], v[3]);
            for z in [zi, zj] {
                index.entry(key(z)).or_insert_with(|| {
                    points.push(z);
                    points.len() - 1
                });
            }
            rows.push((key(zi), key(zj), v[4], v[5], C64::new(v[6], v[7])));
        }
        let n = points.len();
        let mut order: Vec<(f64, f64)> = Vec::new();
        let mut mats: Vec<DMatrix<C64>> = Vec::new();
        for (ki, kj, t, s, val) in rows {
            let b = match order.iter().position(|p| *p == (t, s)) {
                Some(b) => b,
                None => {
                    order.push((t, s));
                    mats.push(DMatrix::from_element(n, n, C64::new(f64::NAN, 0.0)));
                    order.len() - 1
                }
            };
            mats[b][(index[&ki], index[&kj])] = val;
        }
        if mats.iter().any(|m| m.iter().any(|z| z.re.is_nan())) {
            return Err(QprocError::Validation("propagator table is missing grid pairs".into()));
        }
        let spacing = infer_spacing(&points)?;
        Ok(PropagatorTable { grid: PhaseGrid::uniform(points, spacing), blocks: order.into_iter().zip(mats).collect() })
    }
}

fn infer_spacing(points: &[PhasePoint]) -> Result<f64> {
    let mut coords: Vec<f64> = points.iter().flat_map(|z| [z.x, z.xi]).collect();
    coords.sort_by(f64::total_cmp);
    coords.dedup();
    coords
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|d| *d > 1e-12)
        .min_by(f64::total_cmp)
        .ok_or_else(|| QprocError::Validation("cannot infer grid spacing".into()))
}

/// Orthonormal eigenvectors of the weighted Gram matrix above threshold.
#[derive(Debug, Clone)]
pub struct PhysicalSubspace {
    /// Eigenvectors of `W^{1/2} Ψ W^{1/2}`, one column per retained mode.
    pub vectors: DMatrix<C64>,
    pub eigenvalues: Vec<f64>,
    pub threshold: f64,
    /// Gram eigenvalues resolved by the factorization, descending.
    pub spectrum: Vec<f64>,
    sqrt_weights: Vec<f64>,
}

impl PhysicalSubspace {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Coefficient vectors over grid points, orthonormal in the weighted
    /// inner product `Σ w_i conj(c_i) d_i`.
    pub fn basis(&self) -> DMatrix<C64> {
        let mut b = self.vectors.clone();
        for (i, sw) in self.sqrt_weights.iter().enumerate() {
            b.row_mut(i).scale_mut(1.0 / sw);
        }
        b
    }

    pub fn projector(&self) -> DMatrix<C64> {
        &self.vectors * self.vectors.adjoint()
    }

    pub fn projector_defect(&self) -> f64 {
        let p = self.projector();
        (&p * &p - &p).iter().fold(0.0, |a, z| a.max(z.norm()))
    }

    /// Largest deviation of the weighted basis Gram matrix from the identity.
    pub fn orthonormality_defect(&self, weights: &[f64]) -> f64 {
        let b = self.basis();
        let mut wb = b.clone();
        for (i, w) in weights.iter().enumerate() {
            wb.row_mut(i).scale_mut(*w);
        }
        let g = b.adjoint() * wb;
        let id = DMatrix::<C64>::identity(g.nrows(), g.ncols());
        (g - id).iter().fold(0.0, |a, z| a.max(z.norm()))
    }
}

/// Pivoted Cholesky stops once every residual diagonal falls below this
/// fraction of the largest Gram diagonal.
pub const CHOLESKY_TOL: f64 = 1e-15;

/// Eigenpairs of `G_ij = w_i^{1/2} ψ(z_i|z_j) w_j^{1/2}` from the first
/// equal-time block, keeping eigenvalues above `threshold × λ_max`. `G` is
/// positive semidefinite with fast-decaying spectrum, so it is factored as
/// `L L†` by pivoted Cholesky and the small matrix `L†L` is diagonalized.
pub fn reconstruct_subspace(table: &PropagatorTable, threshold: f64) -> Result<PhysicalSubspace> {
    let psi = table
        .blocks
        .iter()
        .find(|((t, s), _)| t == s)
        .map(|(_, m)| m)
        .ok_or_else(|| QprocError::Validation("table has no equal-time block".into()))?;
    let sw: Vec<f64> = table.grid.weights.iter().map(|w| w.sqrt()).collect();
    let n = sw.len();
    let g = |i: usize, j: usize| 0.5 * (psi[(i, j)] + psi[(j, i)].conj()) * (sw[i] * sw[j]);
    let mut diag: Vec<f64> = (0..n).map(|i| g(i, i).re).collect();
    let stop = CHOLESKY_TOL * diag.iter().fold(0.0f64, |a, d| a.max(*d));
    let mut cols: Vec<Vec<C64>> = Vec::new();
    while cols.len() < n {
        let (p, dp) = diag.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, d)| if *d > acc.1 { (i, *d) } else { acc });
        if !(dp > stop) {
            break;
        }
        let root = dp.sqrt();
        let mut l: Vec<C64> = (0..n).map(|i| g(i, p)).collect();
        for c in &cols {
            let cp = c[p].conj();
            for (li, ci) in l.iter_mut().zip(c) {
                *li -= ci * cp;
            }
        }
        for (i, li) in l.iter_mut().enumerate() {
            *li /= root;
            diag[i] -= li.norm_sqr();
        }
        diag[p] = 0.0;
        cols.push(l);
    }
    let r = cols.len();
    let l = DMatrix::from_fn(n, r, |i, c| cols[c][i]);
    let small = l.adjoint() * &l;
    let small = (&small + small.adjoint()) * C64::new(0.5, 0.0);
    let eig = small.symmetric_eigen();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let spectrum: Vec<f64> = order.iter().map(|k| eig.eigenvalues[*k]).collect();
    let cut = threshold * spectrum.first().copied().unwrap_or(0.0).max(0.0);
    let kept: Vec<usize> = order.iter().copied().filter(|k| eig.eigenvalues[*k] > cut && eig.eigenvalues[*k] > 0.0).collect();
    if kept.len() < 2 {
        return Err(QprocError::DegenerateKernel { retained: kept.len() });
    }
    let mut vectors = DMatrix::<C64>::zeros(n, kept.len());
    for (c, k) in kept.iter().enumerate() {
        let lam = eig.eigenvalues[*k];
        vectors.set_column(c, &((&l * eig.eigenvectors.column(*k)) / C64::new(lam.sqrt(), 0.0)));
    }
    let eigenvalues = kept.iter().map(|k| eig.eigenvalues[*k]).collect();
    Ok(PhysicalSubspace { vectors, eigenvalues, threshold, spectrum, sqrt_weights: sw })
}

/// Step operator `U_dt` compressed to the retained subspace.
pub fn projected_step(table: &PropagatorTable, subspace: &PhysicalSubspace, dt: f64) -> Result<DMatrix<C64>> {
    let x = table
        .step_block(dt)
        .ok_or_else(|| QprocError::Validation(format!("table has no block with t − s = {dt}")))?;
    let sw = &subspace.sqrt_weights;
    // Columns W^{1/2} V Λ^{-1/2}.
    let mut q = subspace.vectors.clone();
    for (i, s) in sw.iter().enumerate() {
        q.row_mut(i).scale_mut(*s);
    }
    for (c, l) in subspace.eigenvalues.iter().enumerate() {
        q.column_mut(c).scale_mut(1.0 / l.sqrt());
    }
    Ok(q.adjoint() * (x * &q))
}

/// Sorted eigenvalues of `i log(U_dt)/dt` on the retained subspace, principal branch.
pub fn extract_hamiltonian(table: &PropagatorTable, subspace: &PhysicalSubspace, dt: f64) -> Result<Vec<f64>> {
    extract_hamiltonian_with(table, subspace, dt, UNITARITY_TOL)
}

pub fn extract_hamiltonian_with(table: &PropagatorTable, subspace: &PhysicalSubspace, dt: f64, unitarity_tol: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(QprocError::Validation("dt must be positive".into()));
    }
    let u = projected_step(table, subspace, dt)?;
    let id = DMatrix::<C64>::identity(u.nrows(), u.ncols());
    let defect = (u.adjoint() * &u - &id).iter().fold(0.0f64, |a, z| a.max(z.norm()));
    if defect > unitarity_tol {
        return Err(QprocError::SubspaceLeakage { defect });
    }
    // Cayley transform i(I − U)(I + U)⁻¹ is Hermitian with eigenvalues tan(φ/2),
    // which pins each eigenphase φ on the principal branch.
    let plus = &u + &id;
    let minus = &id - &u;
    let cayley = plus
        .lu()
        .solve(&minus)
        .map(|m| m * C64::new(0.0, 1.0))
        .ok_or(QprocError::DtTooLarge { max_phase: std::f64::consts::PI })?;
    let cayley = (&cayley + cayley.adjoint()) * C64::new(0.5, 0.0);
    let phases: Vec<f64> = cayley.symmetric_eigen().eigenvalues.iter().map(|l| 2.0 * l.atan()).collect();
    let max_phase = phases.iter().fold(0.0f64, |a, p| a.max(p.abs()));
    if max_phase >= std::f64::consts::FRAC_PI_2 {
        return Err(QprocError::DtTooLarge { max_phase });
    }
    let mut e: Vec<f64> = phases.iter().map(|p| -p / dt).collect();
    e.sort_by(f64::total_cmp);
    Ok(e)
}
