//! Elliptic and parabolic obstacle problems with the zero obstacle, solved by
//! projected successive over-relaxation (PSOR).
//!
//! Both problems reduce to the linear complementarity problem
//! `x ≥ 0, M x + q ≥ 0, x·(M x + q) = 0` with `M = α I + β A` an M-matrix.
//! The solver keeps the residual `M x + q` up to date column by column, so a
//! sweep only pays for the nodes that actually move.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fracops::FracOperator;
use crate::grid::{SpaceField, SpaceTimeField};

/// Symmetric matrix with cheap row and column access.
pub trait LcpMatrix: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn diag(&self, i: usize) -> f64;
    /// `(M x)_i`.
    fn row_dot(&self, i: usize, x: &[f64]) -> f64;
    /// `r += delta * M[:, i]`.
    fn add_column(&self, i: usize, delta: f64, r: &mut [f64]);
}

/// `α I + β A` for the fractional operator `A` on its base box.
pub struct ShiftedOperator<'a> {
    pub op: &'a FracOperator,
    pub alpha: f64,
    pub beta: f64,
}

impl LcpMatrix for ShiftedOperator<'_> {
    fn len(&self) -> usize {
        self.op.grid().node_count()
    }

    fn diag(&self, _i: usize) -> f64 {
        self.alpha + self.beta * self.op.diag()
    }

    fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        self.alpha * x[i] + self.beta * self.op.row_dot(i, x)
    }

    fn add_column(&self, i: usize, delta: f64, r: &mut [f64]) {
        let bd = self.beta * delta;
        for (j, rj) in r.iter_mut().enumerate() {
            *rj += bd * self.op.entry(j, i);
        }
        r[i] += self.alpha * delta;
    }
}

/// Row-major dense symmetric matrix.
#[derive(Clone, Debug)]
pub struct DenseMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl LcpMatrix for DenseMatrix {
    fn len(&self) -> usize {
        self.n
    }

    fn diag(&self, i: usize) -> f64 {
        self.data[i * self.n + i]
    }

    fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        self.data[i * self.n..(i + 1) * self.n].iter().zip(x).map(|(a, b)| a * b).sum()
    }

    fn add_column(&self, i: usize, delta: f64, r: &mut [f64]) {
        for (j, rj) in r.iter_mut().enumerate() {
            *rj += delta * self.data[j * self.n + i];
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsorOptions {
    pub omega: f64,
    /// Relative tolerance; the absolute one is `tol * max(1, data scale)`.
    pub tol: f64,
    /// Sweep budget per solve, as a multiple of the unknown count.
    pub max_sweeps_per_node: usize,
}

impl Default for PsorOptions {
    fn default() -> Self {
        PsorOptions { omega: 1.5, tol: 1e-8, max_sweeps_per_node: 10 }
    }
}

/// Complementarity residual of `x` given `r = M x + q`.
pub fn lcp_residual(x: &[f64], r: &[f64]) -> f64 {
    x.iter()
        .zip(r)
        .map(|(&xi, &ri)| if xi > 0.0 { ri.abs() } else { (-ri).max(0.0) })
        .fold(0.0, f64::max)
}

fn full_residual(m: &impl LcpMatrix, q: &[f64], x: &[f64], r: &mut [f64]) {
    for i in 0..x.len() {
        r[i] = m.row_dot(i, x) + q[i];
    }
}

/// Projected SOR for the LCP `(M, q)`, starting from `x`.
///
/// Returns the sweep count. On failure the error carries the residual history.
pub fn psor(m: &impl LcpMatrix, q: &[f64], x: &mut [f64], omega: f64, tol: f64, max_iter: usize) -> Result<usize> {
    if !(omega > 0.0 && omega < 2.0) {
        return Err(Error::InvalidArgument(format!("relaxation factor must lie in (0, 2), got {omega}")));
    }
    let n = m.len();
    if q.len() != n || x.len() != n {
        return Err(Error::GridMismatch(format!("LCP of size {n} with vectors of size {} and {}", q.len(), x.len())));
    }
    for xi in x.iter_mut() {
        *xi = xi.max(0.0);
    }
    let mut r = vec![0.0; n];
    full_residual(m, q, x, &mut r);
    let mut history = Vec::new();
    let mut sweeps = 0;
    loop {
        let res = lcp_residual(x, &r);
        if res <= tol {
            // Guard against drift in the incremental residual.
            full_residual(m, q, x, &mut r);
            if lcp_residual(x, &r) <= tol {
                return Ok(sweeps);
            }
        }
        if sweeps >= max_iter {
            history.push(lcp_residual(x, &r));
            return Err(Error::NotConverged { solver: "PSOR", iterations: sweeps, residual: res, history });
        }
        history.push(res);
        let forward = sweeps % 2 == 0;
        for k in 0..n {
            let i = if forward { k } else { n - 1 - k };
            let xi = x[i];
            let ri = r[i];
            if xi == 0.0 && ri >= 0.0 {
                continue;
            }
            let new = (xi - omega * ri / m.diag(i)).max(0.0);
            let delta = new - xi;
            if delta != 0.0 {
                x[i] = new;
                m.add_column(i, delta, &mut r);
            }
        }
        sweeps += 1;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSolveReport {
    /// PSOR sweeps per solve (one entry for the elliptic problem, one per step otherwise).
    pub iterations: Vec<usize>,
    /// Largest complementarity residual `min{PDE residual, w}`, in PDE units.
    pub max_residual: f64,
    /// Largest `min(|PDE residual|, w)` over nodes where both are positive.
    pub complementarity: f64,
    /// Tolerance the residuals were held to.
    pub tolerance: f64,
    pub wall_time_s: f64,
}

impl ObstacleSolveReport {
    fn absorb(&mut self, x: &[f64], r: &[f64], scale: f64) {
        self.max_residual = self.max_residual.max(lcp_residual(x, r) / scale);
        let comp = x
            .iter()
            .zip(r)
            .filter(|(&a, &b)| a > 0.0 && b.abs() > 0.0)
            .map(|(&a, &b)| a.min(b.abs() / scale))
            .fold(0.0, f64::max);
        self.complementarity = self.complementarity.max(comp);
    }
}

fn data_tol(opts: &PsorOptions, forcing: &SpaceField) -> f64 {
    opts.tol * forcing.max_abs().max(1.0)
}

/// Solves `min{A u + forcing, u} = 0`.
pub fn solve_elliptic_obstacle(op: &FracOperator, forcing: &SpaceField) -> Result<(SpaceField, ObstacleSolveReport)> {
    solve_elliptic_obstacle_with(op, forcing, &PsorOptions::default())
}

pub fn solve_elliptic_obstacle_with(
    op: &FracOperator,
    forcing: &SpaceField,
    opts: &PsorOptions,
) -> Result<(SpaceField, ObstacleSolveReport)> {
    op.grid().check_same(&forcing.grid)?;
    let start = Instant::now();
    let n = forcing.len();
    let m = ShiftedOperator { op, alpha: 0.0, beta: 1.0 };
    let tol = data_tol(opts, forcing);
    let mut x = vec![0.0; n];
    let sweeps = psor(&m, &forcing.values, &mut x, opts.omega, tol, opts.max_sweeps_per_node * n)?;
    let mut r = vec![0.0; n];
    full_residual(&m, &forcing.values, &x, &mut r);
    let mut report = ObstacleSolveReport { iterations: vec![sweeps], tolerance: tol, ..Default::default() };
    report.absorb(&x, &r, 1.0);
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((SpaceField { grid: forcing.grid.clone(), values: x }, report))
}

/// Solves `min{(w^{k+1} - w^k)/dt + A w^{k+1} + forcing, w^{k+1}} = 0` for
/// `k = 0, 1, …` up to `horizon`, starting from `w0`.
pub fn solve_parabolic_obstacle(
    op: &FracOperator,
    w0: &SpaceField,
    forcing: &SpaceField,
    dt: f64,
    horizon: f64,
) -> Result<(SpaceTimeField, ObstacleSolveReport)> {
    solve_parabolic_obstacle_with(op, w0, forcing, dt, horizon, &PsorOptions::default(), |_, _| false)
}

/// Number of implicit steps covering `[0, horizon]` with step `dt`.
pub fn step_count(dt: f64, horizon: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!("horizon must be finite and >= 0, got {horizon}")));
    }
    let steps = horizon / dt;
    let rounded = steps.round();
    if (steps - rounded).abs() > 1e-9 * steps.max(1.0) {
        return Err(Error::InvalidArgument(format!("horizon {horizon} is not a multiple of the time step {dt}")));
    }
    Ok(rounded as usize)
}

/// Parabolic solve with explicit options and an early-stop predicate
/// `stop(k, w^k)` checked after each step.
pub fn solve_parabolic_obstacle_with(
    op: &FracOperator,
    w0: &SpaceField,
    forcing: &SpaceField,
    dt: f64,
    horizon: f64,
    opts: &PsorOptions,
    mut stop: impl FnMut(usize, &SpaceField) -> bool,
) -> Result<(SpaceTimeField, ObstacleSolveReport)> {
    op.grid().check_same(&w0.grid)?;
    op.grid().check_same(&forcing.grid)?;
    if let Some(v) = w0.values.iter().find(|&&v| v < 0.0) {
        return Err(Error::InvalidArgument(format!("initial obstacle state must be >= 0, found {v}")));
    }
    let steps = step_count(dt, horizon)?;
    let start = Instant::now();
    let n = w0.len();
    let m = ShiftedOperator { op, alpha: 1.0, beta: dt };
    let tol = data_tol(opts, forcing);
    let mut report = ObstacleSolveReport { tolerance: tol, ..Default::default() };
    let mut slices = vec![w0.clone()];
    let mut x = w0.values.clone();
    let mut q = vec![0.0; n];
    let mut r = vec![0.0; n];
    for k in 0..steps {
        let prev = &slices[k].values;
        for i in 0..n {
            q[i] = dt * forcing.values[i] - prev[i];
        }
        let sweeps = psor(&m, &q, &mut x, opts.omega, dt * tol, opts.max_sweeps_per_node * n)?;
        full_residual(&m, &q, &x, &mut r);
        report.absorb(&x, &r, dt);
        report.iterations.push(sweeps);
        let next = SpaceField { grid: w0.grid.clone(), values: x.clone() };
        let done = stop(k + 1, &next);
        slices.push(next);
        if done {
            break;
        }
    }
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((SpaceTimeField { grid: w0.grid.clone(), dt, slices }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fracops::{build_operator, implicit_heat_step};
    use crate::grid::GridSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn op(n: usize) -> FracOperator {
        build_operator(&GridSpec::line(2.0, n).unwrap(), 0.4).unwrap()
    }

    /// Projected gradient descent on `½ xᵀMx + qᵀx` over `x ≥ 0`, the oracle for small LCPs.
    fn projected_gradient(m: &DenseMatrix, q: &[f64], iters: usize) -> Vec<f64> {
        let n = m.n;
        let lmax = (0..n).map(|i| (0..n).map(|j| m.data[i * n + j].abs()).sum::<f64>()).fold(0.0, f64::max);
        let step = 1.0 / lmax;
        let mut x = vec![0.0; n];
        for _ in 0..iters {
            let g: Vec<f64> = (0..n).map(|i| m.row_dot(i, &x) + q[i]).collect();
            for i in 0..n {
                x[i] = (x[i] - step * g[i]).max(0.0);
            }
        }
        x
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let o = op(32);
        let z = SpaceField::zeros(o.grid());
        let (u, rep) = solve_elliptic_obstacle(&o, &z).unwrap();
        assert!(u.values.iter().all(|&v| v == 0.0));
        assert_eq!(rep.max_residual, 0.0);
    }

    #[test]
    fn nonnegative_forcing_gives_zero_solution() {
        let o = op(64);
        let f = SpaceField::from_fn(o.grid(), |x| 1.0 + x[0].sin().abs());
        let (u, _) = solve_elliptic_obstacle(&o, &f).unwrap();
        assert!(u.values.iter().all(|&v| v == 0.0));
        let (w, _) = solve_parabolic_obstacle(&o, &SpaceField::zeros(o.grid()), &f, 0.125, 1.0).unwrap();
        assert!(w.slices.iter().all(|s| s.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn inactive_constraint_matches_linear_solve() {
        // One implicit step from a positive state with zero forcing never touches the obstacle.
        let o = op(64);
        let w0 = SpaceField::from_fn(o.grid(), |x| 1.0 + (1.0 - x[0] * x[0] / 4.0));
        let z = SpaceField::zeros(o.grid());
        let dt = 0.05;
        let (w, _) = solve_parabolic_obstacle_with(&o, &w0, &z, dt, dt, &PsorOptions { tol: 1e-12, ..Default::default() }, |_, _| false).unwrap();
        let lin = implicit_heat_step(&o, &w0, dt, &z).unwrap();
        assert!(lin.min() > 0.0);
        for (a, b) in w.last().values.iter().zip(&lin.values) {
            assert!((a - b).abs() < 1e-8, "{a} {b}");
        }
    }

    #[test]
    fn matches_projected_gradient_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 32;
        let o = op(n);
        for _ in 0..5 {
            let alpha = rng.random_range(0.0..1.0);
            let m = ShiftedOperator { op: &o, alpha, beta: 1.0 };
            let dense = DenseMatrix {
                n,
                data: (0..n * n).map(|k| m.row_dot(k / n, &unit(n, k % n))).collect(),
            };
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut x = vec![0.0; n];
            psor(&m, &q, &mut x, 1.5, 1e-12, 100_000).unwrap();
            let y = projected_gradient(&dense, &q, 200_000);
            for (a, b) in x.iter().zip(&y) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    fn unit(n: usize, i: usize) -> Vec<f64> {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        e
    }

    #[test]
    fn melting_like_solve_is_monotone_in_time() {
        let o = op(64);
        let forcing = SpaceField::from_fn(o.grid(), |x| if x[0].abs() < 0.5 { -1.0 } else { 1.0 });
        let (w, rep) = solve_parabolic_obstacle(&o, &SpaceField::zeros(o.grid()), &forcing, 1.0 / 32.0, 1.0).unwrap();
        assert!(rep.max_residual <= rep.tolerance);
        for k in 1..w.len() {
            for (a, b) in w.slice(k).values.iter().zip(&w.slice(k - 1).values) {
                assert!(*a >= *b - 1e-12);
            }
        }
    }

    #[test]
    fn reports_nonconvergence_with_history() {
        let o = op(32);
        let f = SpaceField::from_fn(o.grid(), |_| -1.0);
        let err = solve_elliptic_obstacle_with(&o, &f, &PsorOptions { max_sweeps_per_node: 0, ..Default::default() }).unwrap_err();
        match err {
            Error::NotConverged { history, .. } => assert!(!history.is_empty()),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn rejects_bad_relaxation() {
        let o = op(32);
        let m = ShiftedOperator { op: &o, alpha: 0.0, beta: 1.0 };
        let mut x = vec![0.0; 32];
        assert!(psor(&m, &[0.0; 32], &mut x, 2.0, 1e-8, 10).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn comparison_principle(a in prop::collection::vec(-2.0f64..1.0, 32), bump in prop::collection::vec(0.0f64..1.0, 32)) {
            let o = op(32);
            let f1 = SpaceField::from_values(o.grid(), a).unwrap();
            let f2 = f1.zip_map(&SpaceField::from_values(o.grid(), bump).unwrap(), |x, y| x + y).unwrap();
            let (u1, r1) = solve_elliptic_obstacle(&o, &f1).unwrap();
            let (u2, _) = solve_elliptic_obstacle(&o, &f2).unwrap();
            prop_assert!(r1.max_residual <= r1.tolerance);
            for (x, y) in u1.values.iter().zip(&u2.values) {
                prop_assert!(*x >= *y - 1e-7);
                prop_assert!(*x >= 0.0);
            }
        }
    }
}
