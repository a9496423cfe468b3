//! Quadrature helpers shared by the operator assembly and the oracles.

use std::f64::consts::FRAC_PI_2;
use std::num::NonZeroUsize;

/// Fixed Gauss–Legendre rule stored as `(node, weight)` pairs on `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct GaussRule {
    pairs: Vec<(f64, f64)>,
}

impl GaussRule {
    pub fn new(points: usize) -> Self {
        let n = NonZeroUsize::new(points.max(1)).expect("nonzero");
        let rule = gauss_quad::legendre::GaussLegendre::new(n);
        GaussRule { pairs: rule.as_node_weight_pairs().to_vec() }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Nodes and weights mapped to `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let c = 0.5 * (b - a);
        let m = 0.5 * (a + b);
        self.pairs.iter().map(move |&(x, w)| (m + c * x, c * w))
    }

    pub fn integrate(&self, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }

    /// Tensor-product rule over the rectangle `[a0, b0] x [a1, b1]`.
    pub fn integrate_rect(&self, a: [f64; 2], b: [f64; 2], f: impl Fn(f64, f64) -> f64) -> f64 {
        let mut acc = 0.0;
        for (x, wx) in self.mapped(a[0], b[0]) {
            for (y, wy) in self.mapped(a[1], b[1]) {
                acc += wx * wy * f(x, y);
            }
        }
        acc
    }
}

/// Tanh-sinh integration on `[a, b]`; tolerates integrable endpoint singularities.
///
/// Abscissae are formed from their distance to the nearest endpoint, so nodes
/// crowd the ends without losing precision to cancellation.
pub fn integrate_adaptive(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let half = 0.5 * (b - a);
    let t_max = 6.5;
    let eval = |t: f64| -> f64 {
        let u = FRAC_PI_2 * t.sinh();
        let e = (-2.0 * u.abs()).exp();
        // Distance from the nearest endpoint, computed without cancellation.
        let delta = (b - a) * e / (1.0 + e);
        if delta == 0.0 {
            return 0.0;
        }
        let x = if u < 0.0 { a + delta } else { b - delta };
        let cu = 2.0 * e.sqrt() / (1.0 + e);
        let w = half * FRAC_PI_2 * t.cosh() * cu * cu;
        let v = f(x);
        if v.is_finite() {
            w * v
        } else {
            0.0
        }
    };
    let mut step = 1.0;
    let mut sum = eval(0.0);
    let mut k = 1;
    while k as f64 * step <= t_max {
        sum += eval(k as f64 * step) + eval(-(k as f64) * step);
        k += 1;
    }
    let mut estimate = sum * step;
    for _ in 0..12 {
        step *= 0.5;
        let mut k = 1;
        while k as f64 * step <= t_max {
            sum += eval(k as f64 * step) + eval(-(k as f64) * step);
            k += 2;
        }
        let next = sum * step;
        let done = (next - estimate).abs() <= tol.max(1e-15 * next.abs());
        estimate = next;
        if done {
            break;
        }
    }
    estimate
}

/// `∫_a^∞ f` through the substitution `x = a + t / (1 - t)`.
pub fn integrate_to_infinity(f: impl Fn(f64) -> f64, a: f64, tol: f64) -> f64 {
    integrate_adaptive(
        |t| {
            let u = 1.0 - t;
            f(a + t / u) / (u * u)
        },
        0.0,
        1.0,
        tol,
    )
}
