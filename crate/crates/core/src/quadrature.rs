//! Quadrature rules and interpolation shared by the solvers.
//!
//! Gauss–Hermite nodes are returned in probabilists' form, so that
//! `Σ w_i f(ξ_i) ≈ E[f(ξ)]` for a standard normal `ξ`.

use std::f64::consts::PI;

/// Gauss–Hermite rule normalized against the standard normal law.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Builds an `n`-point rule. Nodes are found by Newton iteration on the
    /// orthonormal Hermite recurrence, which stays in range for large `n`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Hermite rule needs at least one node");
        let pim4 = PI.powf(-0.25);
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let nf = n as f64;
        let m = n.div_ceil(2);
        let mut z = 0.0_f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        let scale = 1.0 / PI.sqrt();
        let mut nodes: Vec<f64> = x.iter().map(|v| v * 2f64.sqrt()).collect();
        let mut weights: Vec<f64> = w.iter().map(|v| v * scale).collect();
        // ascending order
        nodes.reverse();
        weights.reverse();
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[f(ξ)]` for `ξ ~ N(0,1)`.
    pub fn expect<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        let terms: Vec<f64> = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .collect();
        pairwise_sum(&terms)
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut pp = 1.0;
            for _ in 0..100 {
                let mut p1 = 1.0;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
                }
                pp = nf * (z * p1 - p2) / (z * z - 1.0);
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-16 {
                    break;
                }
            }
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            weights[i] = 2.0 / ((1.0 - z * z) * pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        Self { nodes, weights }
    }

    /// Integral of `f` over `[a, b]`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        acc * half
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Deterministic pairwise summation. The result depends only on the slice
/// contents and order, never on how the slice was produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Cubic Lagrange interpolation on a uniform grid, with first derivative.
#[derive(Debug, Clone)]
pub struct UniformCubic {
    start: f64,
    step: f64,
    values: Vec<f64>,
}

impl UniformCubic {
    pub fn new(start: f64, step: f64, values: Vec<f64>) -> Self {
        assert!(values.len() >= 4, "cubic interpolation needs four nodes");
        assert!(step > 0.0);
        Self {
            start,
            step,
            values,
        }
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.start + self.step * (self.values.len() - 1) as f64
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.start && x <= self.end()
    }

    /// Value and derivative at `x`; extrapolates from the edge stencils
    /// outside the grid.
    pub fn eval(&self, x: f64) -> (f64, f64) {
        let n = self.values.len();
        let s = (x - self.start) / self.step;
        let mut i0 = s.floor() as isize - 1;
        i0 = i0.clamp(0, n as isize - 4);
        let i0 = i0 as usize;
        let u = s - i0 as f64;
        let f = &self.values[i0..i0 + 4];
        // nodes at u = 0,1,2,3
        let l0 = -(u - 1.0) * (u - 2.0) * (u - 3.0) / 6.0;
        let l1 = u * (u - 2.0) * (u - 3.0) / 2.0;
        let l2 = -u * (u - 1.0) * (u - 3.0) / 2.0;
        let l3 = u * (u - 1.0) * (u - 2.0) / 6.0;
        let d0 = -((u - 2.0) * (u - 3.0) + (u - 1.0) * (u - 3.0) + (u - 1.0) * (u - 2.0)) / 6.0;
        let d1 = ((u - 2.0) * (u - 3.0) + u * (u - 3.0) + u * (u - 2.0)) / 2.0;
        let d2 = -((u - 1.0) * (u - 3.0) + u * (u - 3.0) + u * (u - 1.0)) / 2.0;
        let d3 = ((u - 1.0) * (u - 2.0) + u * (u - 2.0) + u * (u - 1.0)) / 6.0;
        let v = l0 * f[0] + l1 * f[1] + l2 * f[2] + l3 * f[3];
        let d = (d0 * f[0] + d1 * f[1] + d2 * f[2] + d3 * f[3]) / self.step;
        (v, d)
    }
}

/// Central first derivative with one Richardson extrapolation step.
pub fn richardson_derivative<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    let d = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    let coarse = d(h);
    let fine = d(0.5 * h);
    (4.0 * fine - coarse) / 3.0
}

/// Central second derivative with one Richardson extrapolation step.
pub fn richardson_second_derivative<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    let fx = f(x);
    let d = |h: f64| (f(x + h) - 2.0 * fx + f(x - h)) / (h * h);
    let coarse = d(h);
    let fine = d(0.5 * h);
    (4.0 * fine - coarse) / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_moments_match_standard_normal() {
        let gh = GaussHermite::new(96);
        assert!((gh.expect(|_| 1.0) - 1.0).abs() < 1e-14);
        assert!(gh.expect(|x| x).abs() < 1e-14);
        assert!((gh.expect(|x| x * x) - 1.0).abs() < 1e-13);
        assert!((gh.expect(|x| x.powi(4)) - 3.0).abs() < 1e-12);
        // E[e^{cξ}] = e^{c²/2}
        let c = 3.0_f64;
        let got = gh.expect(|x| (c * x).exp());
        assert!((got / (0.5 * c * c).exp() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn hermite_small_rules() {
        let gh = GaussHermite::new(1);
        assert_eq!(gh.nodes(), &[0.0]);
        assert!((gh.weights()[0] - 1.0).abs() < 1e-15);
        let gh = GaussHermite::new(3);
        assert!((gh.nodes()[2] - 3f64.sqrt()).abs() < 1e-14);
        assert!((gh.weights()[1] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn legendre_integrates_polynomials() {
        let gl = GaussLegendre::new(8);
        let v = gl.integrate(0.0, 2.0, |x| x.powi(15));
        assert!((v - 2f64.powi(16) / 16.0).abs() < 1e-9);
        let v = gl.integrate(-1.0, 3.0, |x| x.exp());
        assert!((v - (3f64.exp() - (-1f64).exp())).abs() < 1e-10);
    }

    #[test]
    fn cubic_is_exact_on_cubics() {
        let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x - 0.25 * x * x * x;
        let df = |x: f64| -2.0 + x - 0.75 * x * x;
        let vals: Vec<f64> = (0..11).map(|i| f(-1.0 + 0.3 * i as f64)).collect();
        let interp = UniformCubic::new(-1.0, 0.3, vals);
        for &x in &[-1.0, -0.77, 0.0, 0.41, 1.9, 2.0] {
            let (v, d) = interp.eval(x);
            assert!((v - f(x)).abs() < 1e-12, "{x}");
            assert!((d - df(x)).abs() < 1e-11, "{x}");
        }
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }
}
