mod common;

use common::{close, harmonic, kinematic, vacuum};
use num_complex::Complex64 as C64;
use proptest::prelude::*;
use qproc::coherent::PhasePoint;
use qproc::correlations::{
    ctp_exact, g_nm, gaussian_ctp, kinematic_particle_kernels, oracle_kernels, velocity_process_kernels, CurrentPair, Observable,
    TimeGrid,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const XP: [Observable; 2] = [Observable::X, Observable::P];

fn currents(rng: &mut ChaCha8Rng, grid: &TimeGrid, scale: f64) -> CurrentPair {
    let n = grid.len();
    let mut row = || (0..n).map(|_| rng.gen_range(-scale..scale)).collect::<Vec<f64>>();
    CurrentPair::new(grid.clone(), vec![row(), row()], vec![row(), row()]).unwrap()
}

#[test]
fn oscillator_vacuum_autocorrelation() {
    let e = harmonic(48, PhasePoint::ORIGIN);
    for t in [0.0, 0.4, 1.3, 2.9] {
        // Tr(x(t) ρ x(0)) = <0|x(0) x(t)|0> = ½ e^{it}
        let g = g_nm(&e, &[("x", t)], &[("x", 0.0)]).unwrap();
        assert!(close(g, C64::from_polar(0.5, t), 1e-12), "{t}: {g}");
    }
}

#[test]
fn displaced_state_has_classical_means_and_vacuum_kernels() {
    let z0 = PhasePoint::new(1.2, -0.5);
    let grid = TimeGrid::uniform(0.0, 1.0, 3).unwrap();
    let moved = oracle_kernels(&kinematic(z0), &XP, &grid).unwrap();
    let still = oracle_kernels(&vacuum(), &XP, &grid).unwrap();
    assert!(moved.mean[0].iter().all(|m| (m - z0.x).abs() < 1e-12));
    assert!(moved.mean[1].iter().all(|m| (m - z0.xi).abs() < 1e-12));
    assert!((&moved.i_delta - &still.i_delta).iter().all(|z| z.norm() < 1e-10));
    assert!((&moved.i_k - &still.i_k).iter().all(|z| z.norm() < 1e-10));
}

#[test]
fn equal_time_cross_entries_are_symmetrized() {
    let grid = TimeGrid::uniform(0.0, 1.0, 3).unwrap();
    let t = oracle_kernels(&vacuum(), &XP, &grid).unwrap();
    for i in 0..3 {
        // θ(0) = ½ averages ½(C + i) and ½(C − i).
        assert!(t.delta(0, 1, i, i).norm() < 1e-12);
        assert!(close(t.k(0, 1, i, i), C64::new(0.0, -0.5), 1e-12));
    }
}

#[test]
fn velocity_blocks_in_the_limit() {
    // iΔ^{xp}(s) = ½(C + iη(s)), so the forward difference in the first slot vanishes
    // at separated times and is ½i(η(ε) − η(0))/ε = i/2ε at equal times.
    let grid = TimeGrid::uniform(0.0, 1.0, 5).unwrap();
    for eps in [0.1, 0.01] {
        let t = velocity_process_kernels(&grid, eps).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert!(t.delta(2, 1, i, j).norm() < 1e-12);
                }
            }
            assert!(close(t.delta(2, 1, i, i), C64::new(0.0, 0.5 / eps), 1e-9), "{}", t.delta(2, 1, i, i));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn oracle_kernels_are_consistent(x in -1.0..1.0f64, xi in -1.0..1.0f64, t1 in 0.5..2.0f64) {
        let grid = TimeGrid::uniform(0.0, t1, 3).unwrap();
        let t = oracle_kernels(&harmonic(48, PhasePoint::new(x, xi)), &XP, &grid).unwrap();
        prop_assert!(t.consistency_defect() < 1e-12);
    }

    #[test]
    fn kinematic_table_matches_oracle(t1 in 0.5..3.0f64, n in 2usize..5) {
        let grid = TimeGrid::uniform(0.0, t1, n).unwrap();
        let oracle = oracle_kernels(&vacuum(), &XP, &grid).unwrap();
        let table = kinematic_particle_kernels(0.5, 0.5, 0.0, &grid).unwrap();
        prop_assert!((&table.i_delta - &oracle.i_delta).iter().all(|z| z.norm() < 1e-8));
        prop_assert!((&table.i_k - &oracle.i_k).iter().all(|z| z.norm() < 1e-8));
    }

    #[test]
    fn ctp_functional_invariants(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = TimeGrid::uniform(0.0, 1.0, 3).unwrap();
        let e = vacuum();
        let c = currents(&mut rng, &grid, 0.3);
        let z = ctp_exact(&e, &XP, &c, None).unwrap();
        prop_assert!(close(ctp_exact(&e, &XP, &c.swapped(), None).unwrap(), z.conj(), 1e-10));
        prop_assert!(z.norm() <= 1.0 + 1e-10);
        let diag = CurrentPair::new(grid.clone(), c.j_plus.clone(), c.j_plus.clone()).unwrap();
        prop_assert!(close(ctp_exact(&e, &XP, &diag, None).unwrap(), C64::new(1.0, 0.0), 1e-10));
        let g = gaussian_ctp(&kinematic_particle_kernels(0.5, 0.5, 0.0, &grid).unwrap(), &c).unwrap();
        prop_assert!(close(g, z, 1e-4), "{} vs {}", g, z);
    }
}
