//! Truncated Fock-space realization of ordinary quantum mechanics.
//!
//! Everything in the phase-space modules is cross-checked against this
//! oracle: operators are dense complex matrices in the number basis
//! `|0>, ..., |N-1>` with `hbar = 1`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;

use crate::error::{QprocError, Result};

pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Default Fock truncation.
pub const DEFAULT_CUTOFF: usize = 48;

/// Hermiticity tolerance for operators that claim to be Hermitian.
pub const HERMITIAN_TOL: f64 = 1e-12;

/// Leakage above this is flagged on results.
pub const LEAKAGE_FLAG: f64 = 1e-6;

/// A square complex matrix in a truncated number basis.
#[derive(Debug, Clone, PartialEq)]
pub struct FockOperator {
    m: CMatrix,
}

impl FockOperator {
    pub fn new(m: CMatrix) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(QprocError::InvalidDimension {
                dim: m.nrows(),
                reason: "operator matrix must be square and nonempty",
            });
        }
        Ok(FockOperator { m })
    }

    pub(crate) fn from_matrix(m: CMatrix) -> Self {
        debug_assert!(m.is_square());
        FockOperator { m }
    }

    pub fn zeros(dim: usize) -> Self {
        FockOperator { m: CMatrix::zeros(dim, dim) }
    }

    pub fn identity(dim: usize) -> Self {
        FockOperator { m: CMatrix::identity(dim, dim) }
    }

    /// Diagonal operator with the given real entries.
    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        FockOperator {
            m: CMatrix::from_fn(n, n, |i, j| if i == j { C64::new(values[i], 0.0) } else { C64::new(0.0, 0.0) }),
        }
    }

    /// `|u><v|`.
    pub fn outer(u: &CVector, v: &CVector) -> Self {
        FockOperator { m: u * v.adjoint() }
    }

    /// Rank-one projector onto the normalized direction of `v`.
    pub fn projector(v: &CVector) -> Self {
        let n = v.norm();
        let u = v / C64::new(n, 0.0);
        Self::outer(&u, &u)
    }

    /// Projector onto the number state `|n>`.
    pub fn number_projector(dim: usize, n: usize) -> Self {
        let mut m = CMatrix::zeros(dim, dim);
        m[(n, n)] = C64::new(1.0, 0.0);
        FockOperator { m }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    pub fn into_matrix(self) -> CMatrix {
        self.m
    }

    pub fn adjoint(&self) -> Self {
        FockOperator { m: self.m.adjoint() }
    }

    pub fn trace(&self) -> C64 {
        self.m.trace()
    }

    pub fn scale(&self, s: C64) -> Self {
        FockOperator { m: &self.m * s }
    }

    pub fn mul(&self, other: &FockOperator) -> Self {
        FockOperator { m: &self.m * &other.m }
    }

    pub fn add(&self, other: &FockOperator) -> Self {
        FockOperator { m: &self.m + &other.m }
    }

    pub fn sub(&self, other: &FockOperator) -> Self {
        FockOperator { m: &self.m - &other.m }
    }

    pub fn apply(&self, v: &CVector) -> CVector {
        &self.m * v
    }

    /// Largest entrywise modulus.
    pub fn max_abs(&self) -> f64 {
        self.m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
    }

    /// Largest entrywise deviation between `self` and another operator.
    pub fn max_abs_diff(&self, other: &FockOperator) -> f64 {
        self.sub(other).max_abs()
    }

    /// Max entrywise deviation restricted to the leading `k x k` block.
    pub fn block_diff(&self, other: &FockOperator, k: usize) -> f64 {
        let k = k.min(self.dim()).min(other.dim());
        let mut worst: f64 = 0.0;
        for i in 0..k {
            for j in 0..k {
                worst = worst.max((self.m[(i, j)] - other.m[(i, j)]).norm());
            }
        }
        worst
    }

    pub fn hermiticity_defect(&self) -> f64 {
        let n = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in i..n {
                worst = worst.max((self.m[(i, j)] - self.m[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_defect() <= tol
    }

    /// Operator 2-norm via the singular values.
    pub fn operator_norm(&self) -> f64 {
        self.m.clone().singular_values().max()
    }

    /// Eigenvalues of the Hermitian part, ascending.
    pub fn hermitian_eigenvalues(&self) -> Vec<f64> {
        let h = (&self.m + self.m.adjoint()) * C64::new(0.5, 0.0);
        let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    /// Weight on the top two number levels; for a density matrix this is the
    /// truncation-leakage estimate.
    pub fn leakage(&self) -> f64 {
        let n = self.dim();
        (n.saturating_sub(2)..n).map(|k| self.m[(k, k)].norm()).sum()
    }

    /// Checks the density-matrix invariants: Hermitian, unit trace, PSD.
    pub fn validate_density(&self, trace_tol: f64) -> Result<()> {
        let herm = self.hermiticity_defect();
        if herm > 1e-10 {
            return Err(QprocError::Validation(format!("density matrix not Hermitian (defect {herm:e})")));
        }
        let tr = self.trace();
        if (tr.re - 1.0).abs() > trace_tol || tr.im.abs() > trace_tol {
            return Err(QprocError::Validation(format!("density matrix trace {tr} differs from 1")));
        }
        let min_ev = self.hermitian_eigenvalues()[0];
        if min_ev < -1e-10 {
            return Err(QprocError::Validation(format!("density matrix has eigenvalue {min_ev:e}")));
        }
        Ok(())
    }

    /// Embeds into a larger truncation (zero padding) or crops to a smaller one.
    pub fn resized(&self, dim: usize) -> Self {
        let n = self.dim().min(dim);
        let mut m = CMatrix::zeros(dim, dim);
        m.view_mut((0, 0), (n, n)).copy_from(&self.m.view((0, 0), (n, n)));
        FockOperator { m }
    }

    /// Kronecker product (two-mode operator).
    pub fn kron(&self, other: &FockOperator) -> Self {
        FockOperator { m: self.m.kronecker(&other.m) }
    }
}

/// Lowering and raising operators on `dim` levels.
pub fn ladder_operators(dim: usize) -> Result<(FockOperator, FockOperator)> {
    if dim < 2 {
        return Err(QprocError::InvalidDimension { dim, reason: "ladder operators need at least two levels" });
    }
    let mut a = CMatrix::zeros(dim, dim);
    for n in 1..dim {
        a[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
    }
    let adag = a.adjoint();
    Ok((FockOperator { m: a }, FockOperator { m: adag }))
}

/// `x = (a + a†)/√2`.
pub fn position(dim: usize) -> Result<FockOperator> {
    let (a, ad) = ladder_operators(dim)?;
    Ok(a.add(&ad).scale(C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0)))
}

/// `p = i(a† − a)/√2`.
pub fn momentum(dim: usize) -> Result<FockOperator> {
    let (a, ad) = ladder_operators(dim)?;
    Ok(ad.sub(&a).scale(C64::new(0.0, std::f64::consts::FRAC_1_SQRT_2)))
}

pub fn number_operator(dim: usize) -> Result<FockOperator> {
    let (a, ad) = ladder_operators(dim)?;
    Ok(ad.mul(&a))
}

/// `a†a + offset`.
pub fn harmonic_hamiltonian(dim: usize, offset: f64) -> Result<FockOperator> {
    Ok(number_operator(dim)?.add(&FockOperator::identity(dim).scale(C64::new(offset, 0.0))))
}

/// `a†a + offset + λ (a† + a)^4 / 4`.
pub fn quartic_hamiltonian(dim: usize, offset: f64, lambda: f64) -> Result<FockOperator> {
    // The quartic term is built in a padded space so the top rows are exact.
    let pad = dim + 4;
    let (a, ad) = ladder_operators(pad)?;
    let s = a.add(&ad);
    let s2 = s.mul(&s);
    let quartic = s2.mul(&s2).resized(dim).scale(C64::new(lambda / 4.0, 0.0));
    Ok(harmonic_hamiltonian(dim, offset)?.add(&quartic))
}

/// Spectral decomposition of a Hermitian Hamiltonian, used to build exactly
/// unitary propagators `exp(-iHt)`.
#[derive(Debug, Clone)]
pub struct Evolution {
    vectors: CMatrix,
    energies: Vec<f64>,
}

impl Evolution {
    pub fn new(hamiltonian: &FockOperator) -> Result<Self> {
        let defect = hamiltonian.hermiticity_defect();
        if defect > HERMITIAN_TOL * hamiltonian.max_abs().max(1.0) {
            return Err(QprocError::Validation(format!("Hamiltonian is not Hermitian (defect {defect:e})")));
        }
        let h = (hamiltonian.matrix() + hamiltonian.matrix().adjoint()) * C64::new(0.5, 0.0);
        let eig = h.symmetric_eigen();
        Ok(Evolution { vectors: eig.eigenvectors, energies: eig.eigenvalues.iter().copied().collect() })
    }

    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn is_zero(&self) -> bool {
        self.energies.iter().all(|e| *e == 0.0)
    }

    /// `exp(-iHt)`.
    pub fn unitary(&self, t: f64) -> FockOperator {
        self.spectral_function(|e| C64::from_polar(1.0, -e * t))
    }

    /// Applies `f` to the spectrum: `V f(E) V†`.
    pub fn spectral_function(&self, f: impl Fn(f64) -> C64) -> FockOperator {
        let n = self.dim();
        let mut scaled = self.vectors.clone();
        for (j, e) in self.energies.iter().enumerate() {
            let fj = f(*e);
            for i in 0..n {
                scaled[(i, j)] *= fj;
            }
        }
        FockOperator { m: scaled * self.vectors.adjoint() }
    }

    /// Heisenberg-picture operator `U†(t) A U(t)`.
    pub fn heisenberg(&self, op: &FockOperator, t: f64) -> FockOperator {
        if t == 0.0 || self.is_zero() {
            return op.clone();
        }
        let u = self.unitary(t);
        u.adjoint().mul(op).mul(&u)
    }
}

/// `exp(i s A)` for Hermitian `A`.
pub fn exp_i_hermitian(op: &FockOperator, s: f64) -> Result<FockOperator> {
    Ok(Evolution::new(op)?.unitary(-s))
}

/// Time-ordered list of event operators.
#[derive(Debug, Clone)]
pub struct TimedOperatorSequence {
    steps: Vec<(FockOperator, f64)>,
}

impl TimedOperatorSequence {
    pub fn new(steps: Vec<(FockOperator, f64)>) -> Result<Self> {
        if let Some(first) = steps.first() {
            let dim = first.0.dim();
            if steps.iter().any(|(op, _)| op.dim() != dim) {
                return Err(QprocError::Validation("history operators have mismatched dimensions".into()));
            }
        }
        if steps.windows(2).any(|w| !(w[1].1 > w[0].1)) {
            return Err(QprocError::Validation("history times must be strictly increasing".into()));
        }
        Ok(TimedOperatorSequence { steps })
    }

    pub fn steps(&self) -> &[(FockOperator, f64)] {
        &self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// `U†(t_n) α_n U(t_n) ... U†(t_1) α_1 U(t_1)` with `U(s) = exp(-iHs)`.
pub fn class_operator(history: &TimedOperatorSequence, hamiltonian: &FockOperator) -> Result<FockOperator> {
    let evolution = Evolution::new(hamiltonian)?;
    class_operator_with(history, &evolution)
}

pub(crate) fn class_operator_with(history: &TimedOperatorSequence, evolution: &Evolution) -> Result<FockOperator> {
    if history.is_empty() {
        return Err(QprocError::Validation("class operator of an empty history".into()));
    }
    let dim = history.steps[0].0.dim();
    if dim != evolution.dim() {
        return Err(QprocError::Validation("Hamiltonian and history dimensions differ".into()));
    }
    let mut acc = FockOperator::identity(dim);
    for (op, t) in &history.steps {
        acc = evolution.heisenberg(op, *t).mul(&acc);
    }
    Ok(acc)
}

/// `Tr(C_α ρ C_β†)`.
pub fn decoherence_trace(rho0: &FockOperator, c_alpha: &FockOperator, c_beta: &FockOperator) -> Result<C64> {
    let tr = rho0.trace();
    if (tr.re - 1.0).abs() > 1e-8 || tr.im.abs() > 1e-8 {
        return Err(QprocError::Validation(format!("initial state trace {tr} differs from 1")));
    }
    Ok(trace_product(&c_alpha.mul(rho0), &c_beta.adjoint()))
}

/// `Tr(A B)` without forming the product.
pub fn trace_product(a: &FockOperator, b: &FockOperator) -> C64 {
    let n = a.dim();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..n {
        for k in 0..n {
            acc += a.m[(i, k)] * b.m[(k, i)];
        }
    }
    acc
}

/// Wave-packet reduction `PρP / Tr(ρP)`.
pub fn reduce_state(rho: &FockOperator, projector: &FockOperator) -> Result<FockOperator> {
    let weight = trace_product(rho, projector).re;
    if weight <= 1e-12 {
        return Err(QprocError::ZeroMeasureEvent { weight });
    }
    Ok(projector.mul(rho).mul(projector).scale(C64::new(1.0 / weight, 0.0)))
}

/// Reduction by a positive (non-projector) effect: `CρC / Tr(CρC)`.
pub fn reduce_state_positive(rho: &FockOperator, effect: &FockOperator) -> Result<FockOperator> {
    let sandwiched = effect.mul(rho).mul(effect);
    let weight = sandwiched.trace().re;
    if weight <= 1e-12 {
        return Err(QprocError::ZeroMeasureEvent { weight });
    }
    Ok(sandwiched.scale(C64::new(1.0 / weight, 0.0)))
}

/// Number-basis vector `|n>`.
pub fn basis_vector(dim: usize, n: usize) -> CVector {
    let mut v = CVector::zeros(dim);
    v[n] = C64::new(1.0, 0.0);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn ladder_dim_two() {
        let (a, ad) = ladder_operators(2).unwrap();
        assert_eq!(a.matrix()[(0, 1)], c(1.0, 0.0));
        assert_eq!(a.matrix()[(1, 0)], c(0.0, 0.0));
        assert_eq!(a.matrix()[(0, 0)], c(0.0, 0.0));
        assert_eq!(ad, a.adjoint());
    }

    #[test]
    fn ladder_rejects_small_dim() {
        assert!(matches!(ladder_operators(1), Err(QprocError::InvalidDimension { .. })));
    }

    #[test]
    fn number_operator_is_diagonal() {
        let n = number_operator(4).unwrap();
        assert!(n.max_abs_diff(&FockOperator::diagonal(&[0.0, 1.0, 2.0, 3.0])) < 1e-15);
    }

    #[test]
    fn commutator_breaks_only_at_the_top() {
        let dim = 16;
        let x = position(dim).unwrap();
        let p = momentum(dim).unwrap();
        let comm = x.mul(&p).sub(&p.mul(&x));
        let target = FockOperator::identity(dim).scale(c(0.0, 1.0));
        let diff = comm.sub(&target);
        for i in 0..dim {
            for j in 0..dim {
                let d = diff.matrix()[(i, j)].norm();
                if i < dim - 1 && j < dim - 1 {
                    assert!(d < 1e-13, "({i},{j}) {d}");
                }
            }
        }
        // the boundary entry carries the truncation: [x,p]_{N-1,N-1} = -i(N-1)
        assert!((comm.matrix()[(dim - 1, dim - 1)] - c(0.0, -(dim as f64 - 1.0))).norm() < 1e-12);
    }

    #[test]
    fn class_operator_identity_step() {
        let h = harmonic_hamiltonian(6, 0.5).unwrap();
        let hist = TimedOperatorSequence::new(vec![(FockOperator::identity(6), 1.0)]).unwrap();
        let c = class_operator(&hist, &h).unwrap();
        assert!(c.max_abs_diff(&FockOperator::identity(6)) < 1e-13);
    }

    #[test]
    fn class_operator_without_dynamics_is_reversed_product() {
        let x = position(5).unwrap();
        let p = momentum(5).unwrap();
        let hist = TimedOperatorSequence::new(vec![(x.clone(), 1.0), (p.clone(), 2.0)]).unwrap();
        let c = class_operator(&hist, &FockOperator::zeros(5)).unwrap();
        assert!(c.max_abs_diff(&p.mul(&x)) < 1e-14);
    }

    #[test]
    fn class_operator_ground_projector_phase_cancels() {
        let dim = 8;
        let h = harmonic_hamiltonian(dim, 0.5).unwrap();
        let p0 = FockOperator::number_projector(dim, 0);
        let hist = TimedOperatorSequence::new(vec![(p0.clone(), PI)]).unwrap();
        let c = class_operator(&hist, &h).unwrap();
        assert!(c.max_abs_diff(&p0) < 1e-13);
    }

    #[test]
    fn class_operator_rejects_non_hermitian() {
        let (a, _) = ladder_operators(4).unwrap();
        let hist = TimedOperatorSequence::new(vec![(FockOperator::identity(4), 1.0)]).unwrap();
        assert!(matches!(class_operator(&hist, &a), Err(QprocError::Validation(_))));
    }

    #[test]
    fn times_must_increase() {
        let id = FockOperator::identity(3);
        assert!(TimedOperatorSequence::new(vec![(id.clone(), 1.0), (id, 1.0)]).is_err());
    }

    #[test]
    fn decoherence_trace_examples() {
        let dim = 4;
        let id = FockOperator::identity(dim);
        let rho = FockOperator::number_projector(dim, 1);
        assert!((decoherence_trace(&rho, &id, &id).unwrap() - c(1.0, 0.0)).norm() < 1e-15);
        assert!((decoherence_trace(&rho, &rho, &rho).unwrap() - c(1.0, 0.0)).norm() < 1e-15);

        // two-slit pair on the {|0>,|1>} subspace
        let mut plus = CVector::zeros(dim);
        plus[0] = c(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        plus[1] = c(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let rho = FockOperator::projector(&plus);
        let p0 = FockOperator::number_projector(dim, 0);
        let p1 = FockOperator::number_projector(dim, 1);
        // Tr(P0 ρ P1) = <0|ρ|1><1|0> vanishes for orthogonal slits,
        // while the coherence itself is <0|ρ|1> = 1/2
        let d = decoherence_trace(&rho, &p0, &p1).unwrap();
        assert!(d.norm() < 1e-15, "{d}");
        assert!((rho.matrix()[(0, 1)] - c(0.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn decoherence_trace_rejects_unnormalized_state() {
        let id = FockOperator::identity(3);
        assert!(decoherence_trace(&id, &id, &id).is_err());
    }

    #[test]
    fn reduce_state_examples() {
        let dim = 4;
        let p0 = FockOperator::number_projector(dim, 0);
        assert!(reduce_state(&p0, &p0).unwrap().max_abs_diff(&p0) < 1e-15);

        let mixed = FockOperator::identity(dim).scale(c(0.25, 0.0));
        let p = FockOperator::number_projector(dim, 0).add(&FockOperator::number_projector(dim, 2));
        let r = reduce_state(&mixed, &p).unwrap();
        assert!(r.max_abs_diff(&p.scale(c(0.5, 0.0))) < 1e-15);

        let mut plus = CVector::zeros(dim);
        plus[0] = c(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        plus[1] = c(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let r = reduce_state(&FockOperator::projector(&plus), &p0).unwrap();
        assert!(r.max_abs_diff(&p0) < 1e-15);
        r.validate_density(1e-12).unwrap();

        let p3 = FockOperator::number_projector(dim, 3);
        assert!(matches!(reduce_state(&p0, &p3), Err(QprocError::ZeroMeasureEvent { .. })));
    }

    #[test]
    fn evolve_then_reduce_matches_heisenberg_reduction() {
        let dim = 10;
        let h = quartic_hamiltonian(dim, 0.5, 0.05).unwrap();
        let ev = Evolution::new(&h).unwrap();
        let t = 0.7;
        let mut psi = CVector::zeros(dim);
        for k in 0..4 {
            psi[k] = c(1.0 / (k as f64 + 1.0), 0.3 * k as f64);
        }
        let rho = FockOperator::projector(&psi);
        let p = FockOperator::number_projector(dim, 1).add(&FockOperator::number_projector(dim, 2));
        let u = ev.unitary(t);
        // Schrödinger picture: evolve, reduce, transport back.
        let rho_t = u.mul(&rho).mul(&u.adjoint());
        let back = u.adjoint().mul(&reduce_state(&rho_t, &p).unwrap()).mul(&u);
        // Heisenberg picture: reduce with U†PU.
        let ph = ev.heisenberg(&p, t);
        let direct = reduce_state(&rho, &ph).unwrap();
        assert!(back.max_abs_diff(&direct) < 1e-10);
    }

    #[test]
    fn unitary_is_unitary() {
        let h = quartic_hamiltonian(20, 0.5, 0.01).unwrap();
        let u = Evolution::new(&h).unwrap().unitary(1.3);
        assert!(u.mul(&u.adjoint()).max_abs_diff(&FockOperator::identity(20)) < 1e-12);
    }

    #[test]
    fn leakage_reads_top_levels() {
        let rho = FockOperator::diagonal(&[0.5, 0.2, 0.2, 0.1]);
        assert!((rho.leakage() - 0.3).abs() < 1e-15);
    }
}
