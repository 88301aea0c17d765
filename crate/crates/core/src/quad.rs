//! Gauss–Legendre quadrature and the composite/graded meshes used for the
//! quasimomentum integrals.

use crate::{rf, Real};

/// Nodes and weights of the `n`-point Gauss–Legendre rule on [-1, 1].
///
/// Computed by Newton iteration on P_n with the Chebyshev-angle initial
/// guess; accurate to machine precision for the `n` used here (≤ 64).
pub fn gauss_legendre<T: Real>(n: usize) -> (Vec<T>, Vec<T>) {
    assert!(n >= 1);
    let mut nodes = vec![T::zero(); n];
    let mut weights = vec![T::zero(); n];
    let nf = rf::<T>(n as f64);
    for i in 0..n.div_ceil(2) {
        // Chebyshev-like initial guess
        let theta = rf::<T>(std::f64::consts::PI) * (rf::<T>(i as f64) + rf(0.75))
            / (nf + rf(0.5));
        let mut x = theta.cos();
        let mut pp = T::zero();
        for _ in 0..100 {
            // Legendre recurrence: p1 = P_n(x), p2 = P_{n-1}(x)
            let mut p1 = T::one();
            let mut p2 = T::zero();
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = rf::<T>(j as f64);
                p1 = ((rf::<T>(2.0) * jf + T::one()) * x * p2 - jf * p3) / (jf + T::one());
            }
            pp = nf * (x * p1 - p2) / (x * x - T::one());
            let dx = p1 / pp;
            x -= dx;
            if dx.abs() <= T::default_epsilon() * rf(4.0) {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = rf::<T>(2.0) / ((T::one() - x * x) * pp * pp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// A 1D quadrature rule as explicit (node, weight) pairs.
#[derive(Debug, Clone)]
pub struct Rule<T> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Real> Rule<T> {
    /// Composite Gauss–Legendre over the given consecutive segments.
    pub fn composite(breaks: &[T], points_per_segment: usize) -> Self {
        let (gx, gw) = gauss_legendre::<T>(points_per_segment);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for w in breaks.windows(2) {
            let (a, b) = (w[0], w[1]);
            let mid = (a + b) * rf(0.5);
            let half = (b - a) * rf(0.5);
            for (x, wgt) in gx.iter().zip(&gw) {
                nodes.push(mid + half * *x);
                weights.push(half * *wgt);
            }
        }
        Rule { nodes, weights }
    }

    pub fn integrate<F: FnMut(T) -> T>(&self, mut f: F) -> T {
        let mut acc = T::zero();
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += *w * f(*x);
        }
        acc
    }
}

/// Breakpoints of [-π, π] graded dyadically toward each center in `centers`.
///
/// Starting from uniform coarse breaks, each center receives nested intervals
/// of halving width down to `min_width`. The resulting mesh depends only on
/// (`centers`, `min_width`, `coarse`), never on the spectral parameter, so a
/// family of integrals sharing one mesh retains exact monotonicity
/// properties of its integrands.
pub fn graded_breaks<T: Real>(centers: &[T], min_width: T, coarse: usize) -> Vec<T> {
    let pi = T::pi();
    let mut breaks: Vec<T> = (0..=coarse)
        .map(|i| -pi + rf::<T>(2.0) * pi * rf::<T>(i as f64) / rf::<T>(coarse as f64))
        .collect();
    for &c in centers {
        let mut w = pi * rf::<T>(0.5);
        while w > min_width {
            for s in [-T::one(), T::one()] {
                let p = c + s * w;
                if p > -pi && p < pi {
                    breaks.push(p);
                }
            }
            w *= rf(0.5);
        }
        for s in [-T::one(), T::one()] {
            let p = c + s * w;
            if p > -pi && p < pi {
                breaks.push(p);
            }
        }
        if c > -pi && c < pi {
            breaks.push(c);
        }
    }
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // drop breakpoints that collide (grading from two nearby centers)
    let tol = rf::<T>(1e-12);
    breaks.dedup_by(|a, b| (*a - *b).abs() < tol);
    breaks
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss_nodes_match_reference() {
        let (x, w) = gauss_legendre::<f64>(5);
        // standard 5-point rule
        assert_relative_eq!(x[2], 0.0, epsilon = 1e-15);
        assert_relative_eq!(x[4], 0.9061798459386640, epsilon = 1e-14);
        assert_relative_eq!(w[2], 0.5688888888888889, epsilon = 1e-14);
        assert_relative_eq!(w[4], 0.2369268850561891, epsilon = 1e-14);
        assert_relative_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn composite_integrates_polynomial_exactly() {
        let rule = Rule::composite(&[0.0f64, 0.3, 1.0], 8);
        let val = rule.integrate(|x| x.powi(7) - 2.0 * x.powi(3) + 1.0);
        assert_relative_eq!(val, 1.0 / 8.0 - 2.0 / 4.0 + 1.0, epsilon = 1e-14);
    }

    #[test]
    fn composite_handles_peaked_integrand() {
        // 1/(x^2 + a^2) over [-pi, pi] = 2 atan(pi/a)/a
        let a: f64 = 1e-3;
        let breaks = graded_breaks(&[0.0], 1e-4, 8);
        let rule = Rule::composite(&breaks, 16);
        let val = rule.integrate(|x| 1.0 / (x * x + a * a));
        let exact = 2.0 * (std::f64::consts::PI / a).atan() / a;
        assert_relative_eq!(val, exact, max_relative = 1e-12);
    }

    #[test]
    fn graded_mesh_is_sorted_and_bounded() {
        let b = graded_breaks(&[0.5f64, -2.0], 1e-6, 8);
        assert!(b.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(b[0], -std::f64::consts::PI);
        assert_eq!(*b.last().unwrap(), std::f64::consts::PI);
    }
}
