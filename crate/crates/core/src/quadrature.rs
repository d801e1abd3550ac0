//! Gauss–Legendre rules, composite panels and tensor-product rules on rectangles.

use std::f64::consts::PI;

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    for i in 0..m {
        // Tricomi's initial guess, then Newton on P_n.
        let mut x = ((i as f64 + 0.75) / (n as f64 + 0.5) * PI).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// A one-dimensional composite rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule1D {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule1D {
    /// Composite Gauss–Legendre on `[a, b]` split into panels no wider than
    /// `panel_width`. An empty interval yields an empty rule.
    pub fn composite(a: f64, b: f64, order: usize, panel_width: f64) -> Rule1D {
        if !(b > a) {
            return Rule1D { nodes: Vec::new(), weights: Vec::new() };
        }
        let panels = ((b - a) / panel_width).ceil().max(1.0) as usize;
        let h = (b - a) / panels as f64;
        let (gx, gw) = gauss_legendre(order);
        let mut nodes = Vec::with_capacity(panels * order);
        let mut weights = Vec::with_capacity(panels * order);
        for k in 0..panels {
            let lo = a + k as f64 * h;
            let mid = lo + 0.5 * h;
            for (x, w) in gx.iter().zip(&gw) {
                nodes.push(mid + 0.5 * h * x);
                weights.push(0.5 * h * w);
            }
        }
        Rule1D { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(*x)).sum()
    }
}

/// Tensor-product rule on a rectangle, nodes listed row-major in `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule2D {
    pub points: Vec<(f64, f64)>,
    pub weights: Vec<f64>,
}

impl Rule2D {
    pub fn rectangle(x: (f64, f64), y: (f64, f64), order: usize, panel_width: f64) -> Rule2D {
        let rx = Rule1D::composite(x.0, x.1, order, panel_width);
        let ry = Rule1D::composite(y.0, y.1, order, panel_width);
        let mut points = Vec::with_capacity(rx.len() * ry.len());
        let mut weights = Vec::with_capacity(rx.len() * ry.len());
        for (xi, wx) in rx.nodes.iter().zip(&rx.weights) {
            for (yi, wy) in ry.nodes.iter().zip(&ry.weights) {
                points.push((*xi, *yi));
                weights.push(wx * wy);
            }
        }
        Rule2D { points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn extend(&mut self, other: Rule2D) {
        self.points.extend(other.points);
        self.weights.extend(other.weights);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_rules_match_tables() {
        let (x, w) = gauss_legendre(2);
        let r = 1.0 / 3f64.sqrt();
        assert!((x[0] + r).abs() < 1e-15 && (x[1] - r).abs() < 1e-15);
        assert!((w[0] - 1.0).abs() < 1e-15 && (w[1] - 1.0).abs() < 1e-15);
        let (x, w) = gauss_legendre(3);
        assert!((x[2] - 0.6f64.sqrt()).abs() < 1e-15);
        assert!((w[1] - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn weights_sum_to_two() {
        for n in 1..40 {
            let (_, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13, "n = {n}");
        }
    }

    #[test]
    fn gaussian_integral_converges_spectrally() {
        // the tail beyond |x| = 8 is below 1e-28
        let exact = PI.sqrt();
        let coarse = Rule1D::composite(-8.0, 8.0, 6, 4.0).integrate(|x| (-x * x).exp());
        let fine = Rule1D::composite(-8.0, 8.0, 12, 1.0).integrate(|x| (-x * x).exp());
        assert!((fine - exact).abs() < 1e-13);
        assert!((coarse - exact).abs() > (fine - exact).abs());
    }

    #[test]
    fn empty_interval_gives_empty_rule() {
        assert!(Rule1D::composite(1.0, 1.0, 12, 1.0).is_empty());
        assert!(Rule2D::rectangle((0.0, 1.0), (2.0, 2.0), 12, 1.0).is_empty());
    }

    proptest! {
        #[test]
        fn exact_for_polynomials(n in 2usize..20, deg in 0u32..8, a in -3.0f64..0.0, len in 0.1f64..5.0) {
            prop_assume!(2 * n as u32 > deg);
            let b = a + len;
            let r = Rule1D::composite(a, b, n, 10.0);
            let got = r.integrate(|x| x.powi(deg as i32));
            let exact = (b.powi(deg as i32 + 1) - a.powi(deg as i32 + 1)) / (deg as f64 + 1.0);
            prop_assert!((got - exact).abs() < 1e-11 * (1.0 + exact.abs()));
        }

        #[test]
        fn rectangle_rule_measures_area(x0 in -3.0f64..3.0, y0 in -3.0f64..3.0, w in 0.0f64..4.0, h in 0.0f64..4.0) {
            let r = Rule2D::rectangle((x0, x0 + w), (y0, y0 + h), 6, 1.0);
            let area: f64 = r.weights.iter().sum();
            prop_assert!((area - w * h).abs() < 1e-12);
        }
    }
}
