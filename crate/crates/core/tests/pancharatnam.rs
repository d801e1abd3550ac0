mod common;

use std::f64::consts::TAU;

use common::{harmonic, history, random_cell, random_projector, random_state};
use proptest::prelude::*;
use qproc::coherent::{cell_operator, Cell, CoherentFamily, PhasePoint};
use qproc::decfun::{phi_cells, History, Route};
use qproc::fock::{decoherence_trace, FockOperator};
use qproc::pancharatnam::{chi_grid, extract_phase, history_phase_protocol, history_scan, interfere, phase_distance, IntensityScan};
use qproc::QprocError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

#[test]
fn projector_and_cell_pairs_match_the_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let family = CoherentFamily::new(16).unwrap();
    let chi = chi_grid(64);
    for _ in 0..6 {
        let psi = random_state(&mut rng, 16);
        let p = random_projector(&mut rng, 16);
        let c = cell_operator(&random_cell(&mut rng, 2.0), &family).unwrap();
        let chain = c.mul(&p);
        let scan = interfere(&psi, &chain.apply(&psi), &chi).unwrap();
        let want = decoherence_trace(&FockOperator::projector(&psi), &chain, &FockOperator::identity(16)).unwrap();
        let fit = extract_phase(&scan).unwrap();
        assert!((fit.complex() - want).norm() < 1e-5, "{fit:?} vs {want}");
        // The brightest setting sits on the phase to within one grid step.
        let best = (0..chi.len()).max_by(|a, b| scan.intensities[*a].total_cmp(&scan.intensities[*b])).unwrap();
        assert!(phase_distance(chi[best], want.arg()) <= TAU / 64.0);
    }
}

#[test]
fn right_half_plane_against_the_trivial_history() {
    // Φ(right, Ω) for |z0> is the Gaussian mass with x > 0, a real number.
    for x0 in [0.0, 0.6, -1.1] {
        let e = harmonic(48, PhasePoint::new(x0, 0.0));
        let right = history(&[(Cell::rect(0.0, 8.0, -8.0, 8.0), 0.0)]);
        let fit = history_phase_protocol(&e, &right, &History::trivial()).unwrap();
        let want = Normal::new(0.0, 1.0).unwrap().cdf(x0);
        assert!((fit.rho - want).abs() < 1e-6, "{fit:?} vs {want}");
        assert!(phase_distance(fit.beta, 0.0) < 1e-8);
    }
}

#[test]
fn two_step_history_phase_is_locked() {
    let e = harmonic(48, PhasePoint::new(0.8, -0.3));
    let a = history(&[(Cell::rect(-0.5, 1.5, 0.0, 2.0), 0.0), (Cell::rect(-2.0, 1.0, -1.0, 1.0), 1.0)]);
    let fit = history_phase_protocol(&e, &a, &History::trivial()).unwrap();
    let phi = phi_cells(&e, &a, &History::trivial(), Route::OracleTrace).unwrap();
    assert!((fit.complex() - phi.value).norm() < 1e-5 + phi.quad_error);
    assert!((fit.rho - 0.112823774993).abs() < 1e-9, "{fit:?}");
    assert!((fit.beta - 5.991577554234).abs() < 1e-9, "{fit:?}");
}

#[test]
fn scan_round_trips_through_csv() {
    let e = harmonic(24, PhasePoint::new(0.3, 0.4));
    let a = history(&[(Cell::rect(-1.0, 1.0, -1.0, 1.0), 0.5)]);
    let scan = history_scan(&e, &a, &History::trivial(), 32).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("interference.csv");
    std::fs::write(&path, scan.to_csv()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("chi,intensity"));
    let (chi, i): (Vec<f64>, Vec<f64>) = lines
        .map(|l| {
            let (c, v) = l.split_once(',').unwrap();
            (c.parse::<f64>().unwrap(), v.parse::<f64>().unwrap())
        })
        .unzip();
    let back = extract_phase(&IntensityScan::new(chi, i).unwrap()).unwrap();
    let fit = extract_phase(&scan).unwrap();
    assert!((back.complex() - fit.complex()).norm() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn synthetic_fringes_are_recovered(rho in 0.01..1.0f64, beta in 0.0..TAU, excess in 0.0..1.0f64, n in 8usize..80) {
        let a = 2.0 * rho + excess;
        let chi = chi_grid(n);
        let i: Vec<f64> = chi.iter().map(|c| a + 2.0 * rho * (c - beta).cos()).collect();
        let fit = extract_phase(&IntensityScan::new(chi, i).unwrap()).unwrap();
        prop_assert!((fit.rho - rho).abs() < 1e-10);
        prop_assert!(phase_distance(fit.beta, beta) < 1e-9);
        prop_assert!((fit.r2 - (a - 1.0)).abs() < 1e-10);
    }

    #[test]
    fn shifting_the_shifter_shifts_the_phase(rho in 0.05..1.0f64, beta in 0.0..TAU, offset in 0.0..TAU) {
        let chi: Vec<f64> = chi_grid(32).iter().map(|c| c + offset).collect();
        let i: Vec<f64> = chi.iter().map(|c| 1.0 + 2.0 * rho + 2.0 * rho * (c - beta).cos()).collect();
        let fit = extract_phase(&IntensityScan::new(chi, i).unwrap()).unwrap();
        prop_assert!(phase_distance(fit.beta, beta) < 1e-9);
    }

    #[test]
    fn flat_scans_have_no_phase(level in 0.1..3.0f64, n in 8usize..64) {
        let chi = chi_grid(n);
        let r = extract_phase(&IntensityScan::new(chi, vec![level; n]).unwrap());
        let undetermined = matches!(r, Err(QprocError::PhaseUndetermined { .. }));
        prop_assert!(undetermined);
    }
}
