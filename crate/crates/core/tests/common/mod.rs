#![allow(dead_code)]

use num_complex::Complex64 as C64;
use qproc::coherent::{Cell, CoherentFamily, PhasePoint};
use qproc::decfun::{Event, Hamiltonian, History, Initial, ProcessEngine};
use qproc::fock::{harmonic_hamiltonian, quartic_hamiltonian, CVector, FockOperator};
use rand::Rng;

pub fn vacuum() -> ProcessEngine {
    ProcessEngine::vacuum(CoherentFamily::default()).unwrap()
}

pub fn kinematic(z0: PhasePoint) -> ProcessEngine {
    ProcessEngine::new(CoherentFamily::default(), Initial::Point(z0), Hamiltonian::Zero).unwrap()
}

pub fn harmonic(cutoff: usize, z0: PhasePoint) -> ProcessEngine {
    let h = harmonic_hamiltonian(cutoff, 0.5).unwrap();
    ProcessEngine::new(CoherentFamily::new(cutoff).unwrap(), Initial::Point(z0), Hamiltonian::Operator(h)).unwrap()
}

pub fn quartic(cutoff: usize, lambda: f64, z0: PhasePoint) -> ProcessEngine {
    let h = quartic_hamiltonian(cutoff, 0.5, lambda).unwrap();
    ProcessEngine::new(CoherentFamily::new(cutoff).unwrap(), Initial::Point(z0), Hamiltonian::Operator(h)).unwrap()
}

/// Coherent amplitudes by the plain recurrence `c_n = c_{n−1} α/√n`.
pub fn coherent_by_recurrence(z: PhasePoint, dim: usize) -> CVector {
    let a = C64::new(z.x, z.xi) / 2f64.sqrt();
    let mut v = CVector::zeros(dim);
    v[0] = C64::new((-0.5 * a.norm_sqr()).exp(), 0.0);
    for n in 1..dim {
        v[n] = v[n - 1] * a / (n as f64).sqrt();
    }
    v
}

pub fn random_point(rng: &mut impl Rng, r: f64) -> PhasePoint {
    PhasePoint::new(rng.gen_range(-r..r), rng.gen_range(-r..r))
}

/// Axis-aligned cell inside `[−bound, bound]²` with sides of at least 0.25.
pub fn random_cell(rng: &mut impl Rng, bound: f64) -> Cell {
    let side = |rng: &mut dyn rand::RngCore| {
        let a = rng.gen_range(-bound..bound - 0.25);
        let b = rng.gen_range(a + 0.25..=bound);
        (a, b)
    };
    let (x0, x1) = side(rng);
    let (y0, y1) = side(rng);
    Cell::rect(x0, x1, y0, y1)
}

/// `n` pairwise disjoint cells, made by cutting random vertical strips of `[−bound, bound]²`.
pub fn disjoint_cells(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<Cell> {
    let cuts = loop {
        let mut cuts: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(-bound..bound)).collect();
        cuts.push(-bound);
        cuts.push(bound);
        cuts.sort_by(f64::total_cmp);
        if cuts.windows(2).all(|w| w[1] - w[0] >= 0.1) {
            break cuts;
        }
    };
    cuts.windows(2)
        .map(|w| {
            let lo = rng.gen_range(-bound..0.0);
            let hi = rng.gen_range(0.0..bound);
            Cell::rect(w[0], w[1], lo, hi)
        })
        .collect()
}

pub fn history(steps: &[(Cell, f64)]) -> History {
    History::new(steps.iter().map(|(c, t)| (Event::cell(*c), *t)).collect(), "h").unwrap()
}

/// History of `len` random cells at increasing times drawn from `[0, 2]`.
pub fn random_history(rng: &mut impl Rng, len: usize, bound: f64) -> History {
    let mut times: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..2.0)).collect();
    times.sort_by(f64::total_cmp);
    let steps: Vec<(Cell, f64)> = times.iter().map(|t| (random_cell(rng, bound), *t)).collect();
    history(&steps)
}

pub fn random_state(rng: &mut impl Rng, dim: usize) -> CVector {
    CVector::from_fn(dim, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).normalize()
}

pub fn random_projector(rng: &mut impl Rng, dim: usize) -> FockOperator {
    FockOperator::projector(&random_state(rng, dim))
}

pub fn close(a: C64, b: C64, tol: f64) -> bool {
    (a - b).norm() <= tol
}
