//! Polynomial phase-space functions and their anti-normal (P-symbol) quantization.
//!
//! A P-symbol `f` stands for the operator `∫dz f(z)|z><z|`. For monomials in the
//! complex label this is exact: `α^j ᾱ^k` maps to `a^j a†^k`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;

use crate::coherent::PhasePoint;
use crate::error::{QprocError, Result};
use crate::fock::{ladder_operators, FockOperator};

const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Polynomial in `(x, ξ)` with complex coefficients; key `(i, j)` is `x^i ξ^j`.
#[derive(Clone, PartialEq, Default)]
pub struct Polynomial {
    coeffs: BTreeMap<(u32, u32), C64>,
}

impl fmt::Debug for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.coeffs.is_empty() {
            return write!(f, "0");
        }
        let terms: Vec<String> = self
            .coeffs
            .iter()
            .map(|((i, j), c)| format!("({:.6}{:+.6}i)·x^{i}ξ^{j}", c.re, c.im))
            .collect();
        write!(f, "{}", terms.join(" + "))
    }
}

impl Polynomial {
    pub fn zero() -> Self {
        Polynomial::default()
    }

    pub fn constant(c: f64) -> Self {
        Polynomial::monomial(0, 0, c)
    }

    pub fn x() -> Self {
        Polynomial::monomial(1, 0, 1.0)
    }

    pub fn xi() -> Self {
        Polynomial::monomial(0, 1, 1.0)
    }

    pub fn monomial(i: u32, j: u32, c: f64) -> Self {
        Polynomial::monomial_c(i, j, C64::new(c, 0.0))
    }

    pub fn monomial_c(i: u32, j: u32, c: C64) -> Self {
        let mut p = Polynomial::zero();
        p.add_term(i, j, c);
        p
    }

    pub fn from_terms(terms: &[((u32, u32), f64)]) -> Self {
        let mut p = Polynomial::zero();
        for &((i, j), c) in terms {
            p.add_term(i, j, C64::new(c, 0.0));
        }
        p
    }

    fn add_term(&mut self, i: u32, j: u32, c: C64) {
        if c == C64::new(0.0, 0.0) {
            return;
        }
        let e = self.coeffs.entry((i, j)).or_insert(C64::new(0.0, 0.0));
        *e += c;
        if *e == C64::new(0.0, 0.0) {
            self.coeffs.remove(&(i, j));
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (&(u32, u32), &C64)> {
        self.coeffs.iter()
    }

    pub fn coefficient(&self, i: u32, j: u32) -> C64 {
        self.coeffs.get(&(i, j)).copied().unwrap_or(C64::new(0.0, 0.0))
    }

    pub fn degree(&self) -> u32 {
        self.coeffs.keys().map(|(i, j)| i + j).max().unwrap_or(0)
    }

    pub fn add(&self, other: &Polynomial) -> Polynomial {
        let mut p = self.clone();
        for (&(i, j), &c) in &other.coeffs {
            p.add_term(i, j, c);
        }
        p
    }

    pub fn scale(&self, s: C64) -> Polynomial {
        let mut p = Polynomial::zero();
        for (&(i, j), &c) in &self.coeffs {
            p.add_term(i, j, c * s);
        }
        p
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        let mut p = Polynomial::zero();
        for (&(i, j), &c) in &self.coeffs {
            for (&(k, l), &d) in &other.coeffs {
                p.add_term(i + k, j + l, c * d);
            }
        }
        p
    }

    pub fn eval(&self, z: PhasePoint) -> C64 {
        self.coeffs.iter().map(|(&(i, j), c)| c * z.x.powi(i as i32) * z.xi.powi(j as i32)).sum()
    }

    /// Largest coefficient modulus of `self - other`.
    pub fn max_coeff_diff(&self, other: &Polynomial) -> f64 {
        self.add(&other.scale(C64::new(-1.0, 0.0))).coeffs.values().fold(0.0, |a, c| a.max(c.norm()))
    }

    /// Largest imaginary part among the coefficients.
    pub fn imaginary_defect(&self) -> f64 {
        self.coeffs.values().fold(0.0, |a, c| a.max(c.im.abs()))
    }

    /// Drops coefficients below `tol` in modulus.
    pub fn pruned(&self, tol: f64) -> Polynomial {
        Polynomial { coeffs: self.coeffs.iter().filter(|(_, c)| c.norm() > tol).map(|(k, c)| (*k, *c)).collect() }
    }

    /// Rewrites in the complex label: key `(j, k)` is `α^j ᾱ^k`.
    pub fn to_alpha(&self) -> BTreeMap<(u32, u32), C64> {
        // x = (α + ᾱ)/√2, ξ = -i(α - ᾱ)/√2
        let x = AlphaPoly::from([((1, 0), C64::new(SQRT_HALF, 0.0)), ((0, 1), C64::new(SQRT_HALF, 0.0))]);
        let xi = AlphaPoly::from([((1, 0), C64::new(0.0, -SQRT_HALF)), ((0, 1), C64::new(0.0, SQRT_HALF))]);
        let mut out = AlphaPoly::new();
        for (&(i, j), &c) in &self.coeffs {
            let mut term = AlphaPoly::from([((0, 0), c)]);
            for _ in 0..i {
                term = alpha_mul(&term, &x);
            }
            for _ in 0..j {
                term = alpha_mul(&term, &xi);
            }
            alpha_add_into(&mut out, &term);
        }
        out
    }

    /// Inverse of [`Polynomial::to_alpha`].
    pub fn from_alpha(a: &BTreeMap<(u32, u32), C64>) -> Polynomial {
        // α = (x + iξ)/√2, ᾱ = (x - iξ)/√2
        let alpha = Polynomial { coeffs: BTreeMap::from([((1, 0), C64::new(SQRT_HALF, 0.0)), ((0, 1), C64::new(0.0, SQRT_HALF))]) };
        let alpha_bar = Polynomial { coeffs: BTreeMap::from([((1, 0), C64::new(SQRT_HALF, 0.0)), ((0, 1), C64::new(0.0, -SQRT_HALF))]) };
        let mut out = Polynomial::zero();
        for (&(j, k), &c) in a {
            let mut term = Polynomial::monomial_c(0, 0, c);
            for _ in 0..j {
                term = term.mul(&alpha);
            }
            for _ in 0..k {
                term = term.mul(&alpha_bar);
            }
            out = out.add(&term);
        }
        out
    }
}

type AlphaPoly = BTreeMap<(u32, u32), C64>;

fn alpha_mul(a: &AlphaPoly, b: &AlphaPoly) -> AlphaPoly {
    let mut out = AlphaPoly::new();
    for (&(i, j), &c) in a {
        for (&(k, l), &d) in b {
            *out.entry((i + k, j + l)).or_insert(C64::new(0.0, 0.0)) += c * d;
        }
    }
    out
}

fn alpha_add_into(out: &mut AlphaPoly, a: &AlphaPoly) {
    for (&k, &c) in a {
        *out.entry(k).or_insert(C64::new(0.0, 0.0)) += c;
    }
}

/// `a^j a†^k` on `dim` levels, exact in the kept block.
fn anti_normal_monomial(j: u32, k: u32, dim: usize) -> Result<FockOperator> {
    let big = dim + (j + k) as usize + 1;
    let (a, ad) = ladder_operators(big.max(2))?;
    let mut op = FockOperator::identity(big.max(2));
    for _ in 0..j {
        op = op.mul(&a);
    }
    for _ in 0..k {
        op = op.mul(&ad);
    }
    Ok(op.resized(dim))
}

/// Operator with P-symbol `f`, i.e. the anti-normally ordered quantization.
pub fn anti_normal_operator(f: &Polynomial, dim: usize) -> Result<FockOperator> {
    let mut acc = FockOperator::zeros(dim);
    for ((j, k), c) in f.to_alpha() {
        if c.norm() == 0.0 {
            continue;
        }
        acc = acc.add(&anti_normal_monomial(j, k, dim)?.scale(c));
    }
    Ok(acc)
}

/// Least-squares P-symbol of `op` among polynomials of degree `≤ max_degree`,
/// fitted on the leading `block × block` entries. Returns the symbol and the
/// largest entrywise residual of the fit.
pub fn extract_p_symbol(op: &FockOperator, max_degree: u32, block: usize) -> Result<(Polynomial, f64)> {
    if block < max_degree as usize + 2 || block > op.dim() {
        return Err(QprocError::InvalidDimension { dim: block, reason: "fit block must exceed the degree and fit the operator" });
    }
    let monomials: Vec<(u32, u32)> =
        (0..=max_degree).flat_map(|d| (0..=d).map(move |j| (j, d - j))).collect();
    let rows = block * block;
    let mut design = DMatrix::<C64>::zeros(rows, monomials.len());
    for (col, &(j, k)) in monomials.iter().enumerate() {
        let basis = anti_normal_monomial(j, k, block)?;
        for m in 0..block {
            for n in 0..block {
                design[(m * block + n, col)] = basis.matrix()[(m, n)];
            }
        }
    }
    let mut target = DVector::<C64>::zeros(rows);
    for m in 0..block {
        for n in 0..block {
            target[m * block + n] = op.matrix()[(m, n)];
        }
    }
    let svd = design.clone().svd(true, true);
    let coeffs = svd.solve(&target, 1e-12).map_err(|e| QprocError::Validation(e.to_string()))?;
    let residual = (&design * &coeffs - &target).iter().fold(0.0f64, |a, z| a.max(z.norm()));
    let alpha: AlphaPoly = monomials.iter().zip(coeffs.iter()).map(|(k, c)| (*k, *c)).collect();
    Ok((Polynomial::from_alpha(&alpha).pruned(1e-13), residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{momentum, position};

    #[test]
    fn alpha_round_trip() {
        let p = Polynomial::from_terms(&[((0, 0), 1.5), ((2, 1), -0.25), ((0, 4), 2.0), ((1, 1), 0.5)]);
        let back = Polynomial::from_alpha(&p.to_alpha());
        assert!(back.max_coeff_diff(&p) < 1e-14);
    }

    #[test]
    fn position_and_momentum_symbols_are_exact() {
        let dim = 12;
        let x = anti_normal_operator(&Polynomial::x(), dim).unwrap();
        let p = anti_normal_operator(&Polynomial::xi(), dim).unwrap();
        assert!(x.max_abs_diff(&position(dim).unwrap()) < 1e-14);
        assert!(p.max_abs_diff(&momentum(dim).unwrap()) < 1e-14);
    }

    #[test]
    fn x_squared_offset_is_one_half() {
        let dim = 10;
        let q = anti_normal_operator(&Polynomial::monomial(2, 0, 1.0), dim).unwrap();
        let x = position(dim + 1).unwrap();
        let x2 = x.mul(&x).resized(dim);
        let diff = q.sub(&x2);
        for m in 0..dim {
            for n in 0..dim {
                let expected = if m == n { 0.5 } else { 0.0 };
                assert!((diff.matrix()[(m, n)] - C64::new(expected, 0.0)).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn extraction_inverts_quantization() {
        let f = Polynomial::from_terms(&[((0, 0), 0.3), ((1, 0), 1.0), ((1, 1), -0.7), ((0, 3), 0.2), ((4, 0), 0.05)]);
        let op = anti_normal_operator(&f, 20).unwrap();
        let (g, res) = extract_p_symbol(&op, 4, 10).unwrap();
        assert!(res < 1e-11, "{res}");
        assert!(g.max_coeff_diff(&f) < 1e-10, "{g:?}");
    }

    #[test]
    fn degree_limit_is_checked() {
        let op = FockOperator::identity(4);
        assert!(extract_p_symbol(&op, 4, 4).is_err());
    }
}
