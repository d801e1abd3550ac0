mod common;

use common::{close, harmonic, history, kinematic, quartic, random_point};
use proptest::prelude::*;
use qproc::coherent::{poisson_tail, Cell, PhasePoint};
use qproc::decfun::{phi_cells, upsilon, Route};
use qproc::fock::quartic_hamiltonian;
use qproc::markov::{
    chapman_kolmogorov_check, extract_hamiltonian, factorization_ratio, propagator, reconstruct_subspace, DensityPropagator, PhaseGrid,
    PropagatorSample, PropagatorTable, DEFAULT_THRESHOLD,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spectrum(cutoff: usize, e: &qproc::decfun::ProcessEngine, radius: f64, spacing: f64, dt: f64) -> (usize, Vec<f64>) {
    let grid = PhaseGrid::disc(radius, spacing).unwrap();
    let table = PropagatorTable::from_engine(e, grid, &[(0.0, 0.0), (dt, 0.0)]).unwrap();
    let sub = reconstruct_subspace(&table, DEFAULT_THRESHOLD).unwrap();
    assert!(sub.dim() <= cutoff);
    let ev = extract_hamiltonian(&table, &sub, dt).unwrap();
    (sub.dim(), ev)
}

#[test]
fn retained_modes_follow_the_disc_mass() {
    // Level n keeps P(Poisson(r²/2) ≥ n + 1) of its weight inside the disc.
    let expected = (0..48).filter(|n| poisson_tail(18.0, n + 1) > DEFAULT_THRESHOLD).count();
    assert_eq!(expected, 41);
    let e = harmonic(48, PhasePoint::ORIGIN);
    let table = PropagatorTable::from_engine(&e, PhaseGrid::disc(6.0, 0.5).unwrap(), &[(0.0, 0.0)]).unwrap();
    assert_eq!(reconstruct_subspace(&table, DEFAULT_THRESHOLD).unwrap().dim(), expected);
}

#[test]
fn harmonic_spectrum_is_stable_under_grid_doubling() {
    let e = harmonic(12, PhasePoint::ORIGIN);
    let (n1, coarse) = spectrum(12, &e, 9.0, 0.5, 0.1);
    let (n2, fine) = spectrum(12, &e, 9.0, 0.25, 0.1);
    assert_eq!((n1, n2), (12, 12));
    for (k, v) in coarse.iter().enumerate() {
        assert!((v - (k as f64 + 0.5)).abs() < 1e-3, "{coarse:?}");
    }
    assert!(coarse.iter().zip(&fine).all(|(a, b)| (a - b).abs() <= 1e-6));
}

#[test]
fn quartic_spectrum_matches_dense_diagonalization() {
    let e = quartic(12, 0.01, PhasePoint::ORIGIN);
    let dense = quartic_hamiltonian(12, 0.5, 0.01).unwrap().hermitian_eigenvalues();
    let (_, got) = spectrum(12, &e, 6.0, 0.5, 0.1);
    for (a, b) in got.iter().zip(&dense) {
        assert!((a - b).abs() < 1e-8, "{got:?} vs {dense:?}");
    }
}

#[test]
fn point_conditioning_forgets_the_past() {
    // Ratio of distribution functions: conditioning on (z', z'') at s' as well as
    // (z₀, z₀') at s leaves the transition to (z₁, z₁') at t unchanged.
    let e = harmonic(48, PhasePoint::new(0.8, -0.3));
    let p = |x, xi| PhasePoint::new(x, xi);
    let (zp, zpp, z0, z0p, z1, z1p) = (p(0.5, 0.2), p(-0.1, 0.4), p(0.3, -0.6), p(0.9, 0.1), p(-0.4, 0.7), p(0.2, 0.5));
    let (sp, s, t) = (0.3, 0.8, 1.5);
    let u = |f: &[(PhasePoint, f64)], b: &[(PhasePoint, f64)]| upsilon(&e, f, b).unwrap();
    let past = u(&[(zp, sp), (z0, s), (z1, t)], &[(zpp, sp), (z0p, s), (z1p, t)]) / u(&[(zp, sp), (z0, s)], &[(zpp, sp), (z0p, s)]);
    let now = u(&[(z0, s), (z1, t)], &[(z0p, s), (z1p, t)]) / u(&[(z0, s)], &[(z0p, s)]);
    assert!(close(past, now, 1e-8), "{past} vs {now}");
}

#[test]
fn coarse_cells_do_not_forget_the_past() {
    let e = harmonic(48, PhasePoint::new(0.8, -0.3));
    let half = [Cell::rect(-6.0, 0.0, -6.0, 6.0), Cell::rect(0.0, 6.0, -6.0, 6.0)];
    let (c, cp) = (Cell::rect(-1.0, 1.5, -1.0, 1.0), Cell::rect(0.0, 2.0, -2.0, 0.5));
    let (sp, s, t) = (0.3, 0.8, 1.5);
    let phi = |a: &[(Cell, f64)], b: &[(Cell, f64)]| phi_cells(&e, &history(a), &history(b), Route::OracleTrace).unwrap().value;
    let mut worst: f64 = 0.0;
    for a in half {
        let now = phi(&[(a, s), (c, t)], &[(a, s), (cp, t)]) / phi(&[(a, s)], &[(a, s)]);
        for b in half {
            let past = phi(&[(b, sp), (a, s), (c, t)], &[(b, sp), (a, s), (cp, t)]) / phi(&[(b, sp), (a, s)], &[(b, sp), (a, s)]);
            worst = worst.max((past - now).norm());
        }
    }
    assert!(worst > 1e-3, "{worst}");
}

#[test]
fn composition_improves_with_region_size() {
    let e = harmonic(48, PhasePoint::new(0.5, 0.2));
    let p = |x, xi| PhasePoint::new(x, xi);
    let defects: Vec<f64> = [6.0, 8.0, 10.0]
        .iter()
        .map(|r| {
            chapman_kolmogorov_check(&e, p(1.0, -0.5), p(0.3, 1.2), 2.0, p(-1.1, 0.4), p(0.0, -1.5), 0.0, 1.0, &Cell::covering(*r), 24)
                .unwrap()
                .defect
        })
        .collect();
    assert!(defects[1] <= 1e-5 && defects[2] <= defects[0], "{defects:?}");
}

#[test]
fn table_survives_a_csv_file() {
    let e = harmonic(12, PhasePoint::ORIGIN);
    let table = PropagatorTable::from_engine(&e, PhaseGrid::disc(1.5, 0.5).unwrap(), &[(0.0, 0.0), (0.1, 0.0)]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("table.csv");
    std::fs::write(&path, table.to_csv()).unwrap();
    let back = PropagatorTable::from_csv(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, table);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn kinematic_composition_is_the_reproducing_kernel(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = kinematic(PhasePoint::ORIGIN);
        let pts: Vec<PhasePoint> = (0..4).map(|_| random_point(&mut rng, 1.5)).collect();
        let r = chapman_kolmogorov_check(&e, pts[0], pts[1], 2.0, pts[2], pts[3], 0.0, 1.0, &Cell::covering(8.0), 24).unwrap();
        prop_assert!(r.defect <= 1e-6, "{:?}", r);
    }

    #[test]
    fn propagator_is_time_homogeneous_and_contractive(seed in any::<u64>(), s in 0.0..2.0f64, tau in 0.0..2.0f64, shift in 0.0..3.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = harmonic(48, PhasePoint::ORIGIN);
        let (z, w) = (random_point(&mut rng, 1.5), random_point(&mut rng, 1.5));
        let a = propagator(&e, z, s + tau, w, s).unwrap();
        let b = propagator(&e, z, s + tau + shift, w, s + shift).unwrap();
        prop_assert!(close(a, b, 1e-12));
        prop_assert!(a.norm() <= 1.0 + 1e-12);
    }

    #[test]
    fn unitary_density_propagator_factorizes(seed in any::<u64>(), tau in 0.1..2.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<PhasePoint> = (0..3).map(|_| random_point(&mut rng, 1.5)).collect();
        let src: Vec<PhasePoint> = (0..3).map(|_| random_point(&mut rng, 1.5)).collect();
        let u = DensityPropagator::Unitary(harmonic(48, PhasePoint::ORIGIN));
        prop_assert!(factorization_ratio(&u, &pts, &src, tau).unwrap() <= 1e-8);
    }

    #[test]
    fn density_propagator_is_hermitian(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = PropagatorSample::random(&mut rng, 1.5, 2.0);
        for prop in [DensityPropagator::Unitary(quartic(48, 0.01, PhasePoint::ORIGIN)), DensityPropagator::Damped { gamma: 0.5 }] {
            let a = prop.sample(&p).unwrap();
            let b = prop.value(p.zp, p.z, p.t, p.z0p, p.z0, p.s).unwrap();
            prop_assert!(close(a, b.conj(), 1e-12));
        }
    }
}
