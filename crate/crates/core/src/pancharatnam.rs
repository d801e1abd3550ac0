//! The two-beam interference protocol: an intensity scan over a phase shifter
//! recovers an off-diagonal decoherence-functional element in polar form.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::Serialize;

use crate::coherent::ORDER_STEP;
use crate::decfun::{class_operator, History, ProcessEngine};
use crate::error::{QprocError, Result};
use crate::fock::CVector;

/// Minimum scan length accepted by [`extract_phase`].
pub const MIN_SCAN_POINTS: usize = 8;

/// Default number of phase-shifter settings in a protocol scan.
pub const PROTOCOL_POINTS: usize = 64;

/// Fringe amplitudes at or below this are treated as noise.
pub const NOISE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntensityScan {
    pub chi_values: Vec<f64>,
    pub intensities: Vec<f64>,
}

impl IntensityScan {
    pub fn new(chi_values: Vec<f64>, intensities: Vec<f64>) -> Result<Self> {
        if chi_values.len() != intensities.len() {
            return Err(QprocError::Validation("scan lengths differ".into()));
        }
        if intensities.iter().any(|i| !(*i >= 0.0)) {
            return Err(QprocError::Validation("intensities must be nonnegative".into()));
        }
        Ok(IntensityScan { chi_values, intensities })
    }

    /// CSV with columns `chi,intensity`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("chi,intensity\n");
        for (c, i) in self.chi_values.iter().zip(&self.intensities) {
            let _ = writeln!(s, "{c},{i}");
        }
        s
    }
}

/// `n` equally spaced settings on `[0, 2π)`.
pub fn chi_grid(n: usize) -> Vec<f64> {
    (0..n).map(|k| TAU * k as f64 / n as f64).collect()
}

/// `‖e^{iχ}ψ + filtered‖²` at each setting.
pub fn interfere(psi: &CVector, filtered: &CVector, chi: &[f64]) -> Result<IntensityScan> {
    if (psi.norm() - 1.0).abs() > 1e-8 {
        return Err(QprocError::Validation(format!("beam state has norm {}", psi.norm())));
    }
    two_beam(psi, filtered, chi)
}

fn two_beam(reference: &CVector, filtered: &CVector, chi: &[f64]) -> Result<IntensityScan> {
    if reference.len() != filtered.len() {
        return Err(QprocError::InvalidDimension { dim: filtered.len(), reason: "beams must share a dimension" });
    }
    let intensities = chi.iter().map(|c| (reference * C64::from_polar(1.0, *c) + filtered).norm_squared()).collect();
    IntensityScan::new(chi.to_vec(), intensities)
}

/// Fit of `I(χ) = a + 2ρ cos(χ − β)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseFit {
    pub rho: f64,
    /// In `[0, 2π)`.
    pub beta: f64,
    /// `a − 1`.
    pub r2: f64,
}

impl PhaseFit {
    pub fn complex(&self) -> C64 {
        C64::from_polar(self.rho, self.beta)
    }
}

/// Least-squares fit of `a + b cos χ + c sin χ`.
pub fn extract_phase(scan: &IntensityScan) -> Result<PhaseFit> {
    let n = scan.chi_values.len();
    if n < MIN_SCAN_POINTS {
        return Err(QprocError::Validation(format!("scan needs at least {MIN_SCAN_POINTS} points, got {n}")));
    }
    let mut sorted: Vec<f64> = scan.chi_values.iter().map(|c| c.rem_euclid(TAU)).collect();
    sorted.sort_by(f64::total_cmp);
    let widest_gap = sorted
        .windows(2)
        .map(|w| w[1] - w[0])
        .chain(std::iter::once(sorted[0] + TAU - sorted[n - 1]))
        .fold(0.0, f64::max);
    if widest_gap > std::f64::consts::PI {
        return Err(QprocError::Validation("scan does not cover a full period".into()));
    }
    let design = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => scan.chi_values[i].cos(),
        _ => scan.chi_values[i].sin(),
    });
    let target = DVector::from_vec(scan.intensities.clone());
    let coef = design
        .svd(true, true)
        .solve(&target, 1e-14)
        .map_err(|e| QprocError::Validation(e.to_string()))?;
    let rho = 0.5 * coef[1].hypot(coef[2]);
    if rho <= NOISE_FLOOR * coef[0].abs().max(1.0) {
        return Err(QprocError::PhaseUndetermined { rho });
    }
    let beta = coef[2].atan2(coef[1]).rem_euclid(TAU);
    Ok(PhaseFit { rho, beta, r2: coef[0] - 1.0 })
}

/// Distance between two angles on the circle.
pub fn phase_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

/// Intensity scan of the beams `Ĉ_reference ψ` (through the phase shifter)
/// and `Ĉ_alpha ψ`, with Heisenberg-picture class operators.
pub fn history_scan(engine: &ProcessEngine, alpha: &History, reference: &History, points: usize) -> Result<IntensityScan> {
    if !engine.is_pure() {
        return Err(QprocError::Validation("the interference protocol needs a pure initial state".into()));
    }
    let psi = &engine.components()[0].1;
    let ca = class_operator(engine, alpha, ORDER_STEP)?;
    let cr = class_operator(engine, reference, ORDER_STEP)?;
    two_beam(&cr.apply(psi), &ca.apply(psi), &chi_grid(points))
}

/// The fitted `ρe^{iβ}` is `Φ(alpha, reference)`.
pub fn history_phase_protocol(engine: &ProcessEngine, alpha: &History, reference: &History) -> Result<PhaseFit> {
    extract_phase(&history_scan(engine, alpha, reference, PROTOCOL_POINTS)?)
}
