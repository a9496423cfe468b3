//! Discrete fractional Laplacian, Riesz potentials, implicit heat steps and
//! the principal Dirichlet eigenvalue.
//!
//! Fields are read as piecewise constant on grid cells. Row `i` of the operator
//! applied to `v` is then
//!
//! ```text
//! (A v)_i = C ∫ (v(x_i) - v(y)) |x_i - y|^{-d-2s} dy
//!         = D v_i - Σ_{j≠i} W(i - j) v_j,
//! ```
//!
//! where `W(o)` is the kernel integrated over the cell at offset `o` and `D` is
//! the kernel integrated over everything but the own cell. Both depend only on
//! the offset, so one table serves the base box, the extended box and any
//! sub-domain. Off-diagonals are negative and each row sum equals the kernel
//! mass outside the box, which makes the matrix an M-matrix.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{DensityField, GridSpec, NodeMask, SpaceField};
use crate::quad::GaussRule;

/// Normalisation of `(-Δ)^s` with Fourier multiplier `|ξ|^{2s}`.
pub fn fractional_laplacian_constant(d: usize, s: f64) -> f64 {
    let dh = d as f64 / 2.0;
    s * 4f64.powf(s) * gamma(dh + s) / (PI.powf(dh) * gamma(1.0 - s))
}

/// Constant of the Riesz kernel `N(y) = c |y|^{2s-d}`, the fundamental solution of `(-Δ)^s`.
pub fn riesz_constant(d: usize, s: f64) -> f64 {
    let dh = d as f64 / 2.0;
    gamma(dh - s) / (4f64.powf(s) * PI.powf(dh) * gamma(s))
}

fn check_stability(s: f64) -> Result<()> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::InvalidStability(s));
    }
    Ok(())
}

/// `8 ∫_0^{π/4} cos(θ)^p dθ`, the angular factor of square-cell integrals.
fn square_angular(p: f64) -> f64 {
    8.0 * GaussRule::new(32).integrate(0.0, PI / 4.0, |t| t.cos().powf(p))
}

/// `∫_cell |z|^p dz` over the unit cell at integer offset `o` (2D, `p` not too singular).
fn unit_cell_integral_2d(o: [usize; 2], p: f64, near: &GaussRule, far: &GaussRule) -> f64 {
    let (x0, y0) = (o[0] as f64 - 0.5, o[1] as f64 - 0.5);
    let f = |x: f64, y: f64| (x * x + y * y).powf(p / 2.0);
    if o[0].max(o[1]) <= 2 {
        let k = 8;
        let step = 1.0 / k as f64;
        let mut acc = 0.0;
        for a in 0..k {
            for b in 0..k {
                let lo = [x0 + a as f64 * step, y0 + b as f64 * step];
                acc += near.integrate_rect(lo, [lo[0] + step, lo[1] + step], f);
            }
        }
        acc
    } else {
        far.integrate_rect([x0, y0], [x0 + 1.0, y0 + 1.0], f)
    }
}

/// Offset table of a translation-invariant kernel on a grid with `n` points per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OffsetTable {
    dim: usize,
    n: usize,
    values: Vec<f64>,
}

impl OffsetTable {
    fn build(dim: usize, n: usize, f: impl Fn([usize; 2]) -> f64 + Sync) -> Self {
        let values = match dim {
            1 => (0..n).into_par_iter().map(|o| f([o, 0])).collect(),
            _ => {
                let mut v = vec![0.0; n * n];
                let upper: Vec<(usize, usize, f64)> = (0..n)
                    .into_par_iter()
                    .flat_map_iter(|a| (a..n).map(move |b| (a, b)))
                    .map(|(a, b)| (a, b, f([a, b])))
                    .collect();
                for (a, b, w) in upper {
                    v[a * n + b] = w;
                    v[b * n + a] = w;
                }
                v
            }
        };
        OffsetTable { dim, n, values }
    }

    #[inline]
    fn get(&self, a: [usize; 2], b: [usize; 2]) -> f64 {
        match self.dim {
            1 => self.values[a[0].abs_diff(b[0])],
            _ => self.values[a[0].abs_diff(b[0]) * self.n + a[1].abs_diff(b[1])],
        }
    }

    /// `Σ_j T(target - src_j) v_j` for one target, sources given in table coordinates.
    fn dot(&self, target: [usize; 2], src: &[[usize; 2]], v: &[f64]) -> f64 {
        match self.dim {
            1 => {
                let t = target[0];
                src.iter().zip(v).map(|(j, &vj)| self.values[t.abs_diff(j[0])] * vj).sum()
            }
            _ => src.iter().zip(v).map(|(j, &vj)| self.get(target, *j) * vj).sum(),
        }
    }
}

/// Discrete restricted fractional Laplacian on a grid and its extended box.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FracOperator {
    s: f64,
    grid: GridSpec,
    constant: f64,
    /// Entry `0` is the diagonal, the rest are the (negative) off-diagonals.
    table: OffsetTable,
    /// Kernel mass outside the base box, per base node (row sums).
    row_sums: Vec<f64>,
    /// Kernel mass outside the extended box, per base node.
    exterior: Vec<f64>,
    /// Base nodes expressed as extended-grid multi-indices.
    base_in_ext: Vec<[usize; 2]>,
}

/// Assembles the operator for `(-Δ)^s` on `grid` (and its extended box).
pub fn build_operator(grid: &GridSpec, s: f64) -> Result<FracOperator> {
    check_stability(s)?;
    let d = grid.dim();
    let c = fractional_laplacian_constant(d, s);
    let h = grid.spacing();
    let scale = c * h.powf(-2.0 * s);
    let ext = grid.extended();
    let two_s = 2.0 * s;

    let table = match d {
        1 => {
            let diag = 2.0 / two_s * 0.5f64.powf(-two_s);
            OffsetTable::build(1, ext.points_per_axis(), |o| {
                if o[0] == 0 {
                    scale * diag
                } else {
                    let k = o[0] as f64;
                    -scale / two_s * ((k - 0.5).powf(-two_s) - (k + 0.5).powf(-two_s))
                }
            })
        }
        _ => {
            let diag = 0.5f64.powf(-two_s) / two_s * square_angular(two_s);
            let near = GaussRule::new(8);
            let far = GaussRule::new(6);
            OffsetTable::build(2, ext.points_per_axis(), |o| {
                if o == [0, 0] {
                    scale * diag
                } else {
                    -scale * unit_cell_integral_2d(o, -2.0 - two_s, &near, &far)
                }
            })
        }
    };

    let m = grid.ext_margin();
    let base_in_ext: Vec<[usize; 2]> = (0..grid.node_count())
        .map(|i| {
            let mi = grid.multi_index(i);
            [mi[0] + m, if d == 2 { mi[1] + m } else { 0 }]
        })
        .collect();

    let ext_all: Vec<[usize; 2]> = (0..ext.node_count()).map(|k| ext.multi_index(k)).collect();
    let ones_ext = vec![1.0; ext_all.len()];
    let ones_base = vec![1.0; base_in_ext.len()];
    let exterior = base_in_ext.par_iter().map(|&j| table.dot(j, &ext_all, &ones_ext)).collect();
    let row_sums = base_in_ext.par_iter().map(|&j| table.dot(j, &base_in_ext, &ones_base)).collect();

    Ok(FracOperator { s, grid: grid.clone(), constant: c, table, row_sums, exterior, base_in_ext })
}

impl FracOperator {
    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn diag(&self) -> f64 {
        self.table.values[0]
    }

    /// Matrix entry between base nodes `i` and `j`.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.table.get(self.base_in_ext[i], self.base_in_ext[j])
    }

    /// Row sums of the base-box matrix (kernel mass outside the base box).
    pub fn row_sums(&self) -> &[f64] {
        &self.row_sums
    }

    /// Kernel mass outside the extended box seen from each base node.
    ///
    /// For `w` supported in the base box, `Σ_ext (A w) h^d = Σ_j w_j exterior_j h^d`,
    /// i.e. this is what escapes the extended box.
    pub fn exterior_weights(&self) -> &[f64] {
        &self.exterior
    }

    /// `(A v)_i` for base node `i`, with `v` on the base grid.
    #[inline]
    pub fn row_dot(&self, i: usize, v: &[f64]) -> f64 {
        match self.grid.dim() {
            1 => {
                let t = &self.table.values;
                let mut acc = 0.0;
                for (j, &vj) in v[..i].iter().enumerate() {
                    acc += t[i - j] * vj;
                }
                for (k, &vj) in v[i..].iter().enumerate() {
                    acc += t[k] * vj;
                }
                acc
            }
            _ => self.table.dot(self.base_in_ext[i], &self.base_in_ext, v),
        }
    }

    /// `(A v)` on an arbitrary sub-domain: only nodes in `mask` carry values.
    pub fn apply_masked(&self, mask: &NodeMask, v: &[f64], out: &mut [f64]) {
        let idx: Vec<usize> = mask.indices().collect();
        let src: Vec<[usize; 2]> = idx.iter().map(|&i| self.base_in_ext[i]).collect();
        let vals: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
        let res: Vec<f64> = src.par_iter().map(|&t| self.table.dot(t, &src, &vals)).collect();
        out.iter_mut().for_each(|o| *o = 0.0);
        for (k, &i) in idx.iter().enumerate() {
            out[i] = res[k];
        }
    }

    fn apply_slice(&self, v: &[f64]) -> Vec<f64> {
        (0..v.len()).into_par_iter().map(|i| self.row_dot(i, v)).collect()
    }

    /// `(-Δ)^s v` at the base nodes.
    pub fn apply(&self, v: &SpaceField) -> Result<SpaceField> {
        self.grid.check_same(&v.grid)?;
        Ok(SpaceField { grid: self.grid.clone(), values: self.apply_slice(&v.values) })
    }

    /// `(-Δ)^s v` at every node of the extended box, `v` supported in the base box.
    pub fn apply_extended(&self, v: &SpaceField) -> Result<SpaceField> {
        self.grid.check_same(&v.grid)?;
        let ext = self.grid.extended();
        let values = (0..ext.node_count())
            .into_par_iter()
            .map(|k| self.table.dot(ext.multi_index(k), &self.base_in_ext, &v.values))
            .collect();
        Ok(SpaceField { grid: ext, values })
    }

    /// `(-Δ)^s v` at a point whose own cell carries no mass of `v`.
    ///
    /// This is the pure kernel integral `-C Σ_j v_j ∫_{cell_j} |x - y|^{-d-2s} dy`.
    pub fn evaluate_at(&self, v: &SpaceField, point: &[f64]) -> Result<f64> {
        self.grid.check_same(&v.grid)?;
        if let Some(k) = self.grid.cell_of(point) {
            if v.values[k] != 0.0 {
                return Err(Error::InvalidArgument(
                    "evaluation point lies in a cell where the field is nonzero".into(),
                ));
            }
        }
        let h = self.grid.spacing();
        let two_s = 2.0 * self.s;
        let c = self.constant;
        let rule = GaussRule::new(8);
        let mut acc = 0.0;
        for (j, &vj) in v.values.iter().enumerate() {
            if vj == 0.0 {
                continue;
            }
            let p = self.grid.node(j);
            let w = match self.grid.dim() {
                1 => {
                    let a = (p[0] - 0.5 * h - point[0]).abs();
                    let b = (p[0] + 0.5 * h - point[0]).abs();
                    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                    (lo.powf(-two_s) - hi.powf(-two_s)) / two_s
                }
                _ => {
                    let lo = [p[0] - 0.5 * h, p[1] - 0.5 * h];
                    let mut sub = 0.0;
                    let k = 4;
                    let st = h / k as f64;
                    for a in 0..k {
                        for b in 0..k {
                            let l = [lo[0] + a as f64 * st, lo[1] + b as f64 * st];
                            sub += rule.integrate_rect(l, [l[0] + st, l[1] + st], |x, y| {
                                let r2 = (x - point[0]).powi(2) + (y - point[1]).powi(2);
                                r2.powf(-1.0 - self.s)
                            });
                        }
                    }
                    sub
                }
            };
            acc -= c * w * vj;
        }
        Ok(acc)
    }

    /// Full-space `(-Δ)^s g` at base nodes for a function that does not vanish
    /// outside the box.
    ///
    /// `g_ext` holds `g` on the extended box; `far` evaluates `g` beyond it. The
    /// kernel integral over the far region is done by a radial substitution
    /// `r = ρ/t` with Gauss–Legendre in `t` and in the angle.
    pub fn apply_unbounded(
        &self,
        g_ext: &SpaceField,
        far: impl Fn(&[f64]) -> f64 + Sync,
    ) -> Result<SpaceField> {
        let ext = self.grid.extended();
        ext.check_same(&g_ext.grid)?;
        let all: Vec<[usize; 2]> = (0..ext.node_count()).map(|k| ext.multi_index(k)).collect();
        let r_ext = ext.half_width();
        let two_s = 2.0 * self.s;
        let c = self.constant;
        let t_rule = GaussRule::new(32);
        let a_rule = GaussRule::new(16);
        let d = self.grid.dim();
        let values = (0..self.grid.node_count())
            .into_par_iter()
            .map(|i| {
                let near = self.table.dot(self.base_in_ext[i], &all, &g_ext.values);
                let x = self.grid.node(i);
                let far_int = match d {
                    1 => {
                        let mut acc = 0.0;
                        for side in [-1.0, 1.0] {
                            let rho = r_ext - side * x[0];
                            acc += t_rule.integrate(0.0, 1.0, |t| {
                                let r = rho / t;
                                far(&[x[0] + side * r]) * r.powf(-1.0 - two_s) * rho / (t * t)
                            });
                        }
                        acc
                    }
                    _ => {
                        let corners = [[r_ext, r_ext], [-r_ext, r_ext], [-r_ext, -r_ext], [r_ext, -r_ext]];
                        let mut ang: Vec<f64> =
                            corners.iter().map(|q| (q[1] - x[1]).atan2(q[0] - x[0])).collect();
                        ang.sort_by(|a, b| a.partial_cmp(b).unwrap());
                        ang.push(ang[0] + 2.0 * PI);
                        let mut acc = 0.0;
                        for w in ang.windows(2) {
                            acc += a_rule.integrate(w[0], w[1], |th| {
                                let e = [th.cos(), th.sin()];
                                let rho = box_exit_distance(&x, &e, r_ext);
                                t_rule.integrate(0.0, 1.0, |t| {
                                    let r = rho / t;
                                    let y = [x[0] + r * e[0], x[1] + r * e[1]];
                                    far(&y) * r.powf(-1.0 - two_s) * rho / (t * t)
                                })
                            });
                        }
                        acc
                    }
                };
                near - c * far_int
            })
            .collect();
        Ok(SpaceField { grid: self.grid.clone(), values })
    }
}

/// Distance from `x` (inside the square `[-r, r]^2`) to its boundary along unit vector `e`.
fn box_exit_distance(x: &[f64; 2], e: &[f64; 2], r: f64) -> f64 {
    let mut best = f64::INFINITY;
    for a in 0..2 {
        if e[a] > 1e-300 {
            best = best.min((r - x[a]) / e[a]);
        } else if e[a] < -1e-300 {
            best = best.min((-r - x[a]) / e[a]);
        }
    }
    best
}

/// `(-Δ)^s v` on the base box, or on `eval_box` (the operator's extended box).
pub fn apply(op: &FracOperator, v: &SpaceField, eval_box: Option<&GridSpec>) -> Result<SpaceField> {
    match eval_box {
        None => op.apply(v),
        Some(b) => {
            op.grid.extended().check_same(b)?;
            op.apply_extended(v)
        }
    }
}

/// Riesz kernel `N(y) = c |y|^{2s-d}`; only exists for transient processes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RieszKernel {
    s: f64,
    d: usize,
    constant: f64,
}

impl RieszKernel {
    pub fn new(d: usize, s: f64) -> Result<Self> {
        check_stability(s)?;
        if d == 1 && s >= 0.5 {
            return Err(Error::Recurrent { dim: d, s });
        }
        if d != 1 && d != 2 {
            return Err(Error::InvalidGrid(format!("dimension must be 1 or 2, got {d}")));
        }
        Ok(RieszKernel { s, d, constant: riesz_constant(d, s) })
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        let r = y[..self.d].iter().map(|v| v * v).sum::<f64>().sqrt();
        self.constant * r.powf(2.0 * self.s - self.d as f64)
    }

    /// `∫_cell N` over the cell at offset `o`, for cell size `h`.
    fn cell_table(&self, n: usize, h: f64) -> OffsetTable {
        let two_s = 2.0 * self.s;
        let scale = self.constant * h.powf(two_s);
        match self.d {
            1 => {
                let f = |z: f64| z.signum() * z.abs().powf(two_s) / two_s;
                OffsetTable::build(1, n, |o| {
                    let k = o[0] as f64;
                    scale * (f(k + 0.5) - f(k - 0.5))
                })
            }
            _ => {
                let selfc = 0.5f64.powf(two_s) / two_s * square_angular(-two_s);
                let near = GaussRule::new(8);
                let far = GaussRule::new(6);
                OffsetTable::build(2, n, |o| {
                    if o == [0, 0] {
                        scale * selfc
                    } else {
                        scale * unit_cell_integral_2d(o, two_s - 2.0, &near, &far)
                    }
                })
            }
        }
    }
}

/// Potential `U_m(y) = ∫ N(y - x) m(x) dx` at the base nodes of `m`'s grid.
pub fn riesz_potential(m: &DensityField, kernel: &RieszKernel) -> Result<SpaceField> {
    let full = riesz_potential_extended(m, kernel)?;
    full.restrict_to(&m.grid)
}

/// Potential of `m` at every node of the extended box of its grid.
///
/// Cells are integrated exactly against the kernel, including the singular own cell.
pub fn riesz_potential_extended(m: &DensityField, kernel: &RieszKernel) -> Result<SpaceField> {
    let grid = &m.grid;
    if grid.dim() != kernel.d {
        return Err(Error::GridMismatch(format!(
            "kernel dimension {} vs grid dimension {}",
            kernel.d,
            grid.dim()
        )));
    }
    let ext = grid.extended();
    let table = kernel.cell_table(ext.points_per_axis(), grid.spacing());
    let mg = grid.ext_margin();
    let (src, vals): (Vec<[usize; 2]>, Vec<f64>) = (0..grid.node_count())
        .filter(|&i| m.values[i] != 0.0)
        .map(|i| {
            let mi = grid.multi_index(i);
            ([mi[0] + mg, if grid.dim() == 2 { mi[1] + mg } else { 0 }], m.values[i])
        })
        .unzip();
    let values = (0..ext.node_count())
        .into_par_iter()
        .map(|k| table.dot(ext.multi_index(k), &src, &vals))
        .collect();
    Ok(SpaceField { grid: ext, values })
}

/// Potential of `m` at an arbitrary point, by the midpoint rule (for points away from supp m).
pub fn potential_at(m: &DensityField, kernel: &RieszKernel, point: &[f64]) -> f64 {
    let vol = m.grid.cell_volume();
    m.values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(j, &v)| {
            let p = m.grid.node(j);
            let y = [point[0] - p[0], if kernel.d == 2 { point[1] - p[1] } else { 0.0 }];
            kernel.eval(&y) * v * vol
        })
        .sum()
}

/// Conjugate gradients for a symmetric positive definite operator.
///
/// Stops when `‖b - A x‖ ≤ tol`; returns the iteration count and final residual.
pub(crate) fn conjugate_gradient(
    apply: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> std::result::Result<(usize, f64), (usize, f64)> {
    let n = b.len();
    let mut ax = vec![0.0; n];
    apply(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        if rr.sqrt() <= tol {
            return Ok((it, rr.sqrt()));
        }
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    if rr.sqrt() <= tol {
        Ok((max_iter, rr.sqrt()))
    } else {
        Err((max_iter, rr.sqrt()))
    }
}

/// One implicit Euler step: solves `(I + dt A) u = v + dt source`.
pub fn implicit_heat_step(op: &FracOperator, v: &SpaceField, dt: f64, source: &SpaceField) -> Result<SpaceField> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    op.grid.check_same(&v.grid)?;
    op.grid.check_same(&source.grid)?;
    let rhs: Vec<f64> = v.values.iter().zip(&source.values).map(|(a, b)| a + dt * b).collect();
    let vnorm = v.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    let rnorm = rhs.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut u = rhs.clone();
    if rnorm == 0.0 {
        return Ok(SpaceField { grid: op.grid.clone(), values: u });
    }
    let tol = 1e-10 * if vnorm > 0.0 { vnorm } else { rnorm };
    let n = rhs.len();
    conjugate_gradient(
        |x, out| {
            let ax = op.apply_slice(x);
            for i in 0..n {
                out[i] = x[i] + dt * ax[i];
            }
        },
        &rhs,
        &mut u,
        tol,
        10 * n,
    )
    .map_err(|(iterations, residual)| Error::NotConverged {
        solver: "implicit heat step",
        iterations,
        residual,
        history: vec![],
    })?;
    Ok(SpaceField { grid: op.grid.clone(), values: u })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenvalueEstimate {
    pub lambda: f64,
    pub residual: f64,
    /// Largest node radius in the domain plus half a cell.
    pub radius: f64,
    pub iterations: usize,
}

/// Smallest eigenvalue of the operator restricted to `mask` (zero elsewhere).
pub fn principal_eigenvalue(op: &FracOperator, mask: &NodeMask) -> Result<EigenvalueEstimate> {
    if mask.len() != op.grid.node_count() {
        return Err(Error::GridMismatch(format!("mask of {} nodes for {} nodes", mask.len(), op.grid.node_count())));
    }
    let idx: Vec<usize> = mask.indices().collect();
    if idx.is_empty() {
        return Err(Error::InvalidArgument("eigenvalue domain is empty".into()));
    }
    let src: Vec<[usize; 2]> = idx.iter().map(|&i| op.base_in_ext[i]).collect();
    let k = idx.len();
    let apply = |x: &[f64], out: &mut [f64]| {
        let res: Vec<f64> = src.par_iter().map(|&t| op.table.dot(t, &src, x)).collect();
        out.copy_from_slice(&res);
    };
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut v = vec![1.0 / (k as f64).sqrt(); k];
    let mut av = vec![0.0; k];
    let mut lambda = 0.0;
    let mut residual = f64::INFINITY;
    let max_outer = 1000;
    for it in 0..max_outer {
        apply(&v, &mut av);
        lambda = v.iter().zip(&av).map(|(a, b)| a * b).sum();
        residual = av.iter().zip(&v).map(|(a, b)| (a - lambda * b).powi(2)).sum::<f64>().sqrt();
        if residual <= 1e-8 {
            let radius = idx.iter().map(|&i| op.grid.node_radius(i)).fold(0.0, f64::max) + 0.5 * op.grid.spacing();
            return Ok(EigenvalueEstimate { lambda, residual, radius, iterations: it });
        }
        let mut y = v.iter().map(|x| x / lambda).collect::<Vec<_>>();
        conjugate_gradient(apply, &v, &mut y, 1e-13, 20 * k).map_err(|(iterations, residual)| {
            Error::NotConverged { solver: "eigenvalue inner solve", iterations, residual, history: vec![] }
        })?;
        let ny = norm(&y);
        v = y.into_iter().map(|x| x / ny).collect();
    }
    Err(Error::NotConverged {
        solver: "inverse power iteration",
        iterations: max_outer,
        residual,
        history: vec![lambda],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line_op(l: f64, n: usize, c: f64, s: f64) -> FracOperator {
        build_operator(&GridSpec::new(1, l, n, c).unwrap(), s).unwrap()
    }

    #[test]
    fn constants_match_known_values() {
        // s = 1/2, d = 1: C = 1/π and the Riesz constant diverges (recurrent).
        assert!((fractional_laplacian_constant(1, 0.5) - 1.0 / PI).abs() < 1e-12);
        // d = 2, s = 1/2: Riesz kernel is 1/(2π|y|).
        assert!((riesz_constant(2, 0.5) - 0.5 / PI).abs() < 1e-12);
    }

    #[test]
    fn m_matrix_structure_and_symmetry() {
        let op = line_op(4.0, 256, 1.0, 0.4);
        let n = 256;
        assert!(op.diag() > 0.0);
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                let a = op.entry(i, j);
                assert_eq!(a, op.entry(j, i));
                if i != j {
                    assert!(a < 0.0);
                }
                row += a;
            }
            assert!(row > 0.0);
            assert!((row - op.row_sums()[i]).abs() < 1e-9 * op.diag());
        }
    }

    #[test]
    fn two_d_operator_structure() {
        let g = GridSpec::new(2, 1.0, 16, 3.0).unwrap();
        let op = build_operator(&g, 0.4).unwrap();
        for i in 0..g.node_count() {
            assert!(op.row_sums()[i] > 0.0);
            assert!(op.exterior_weights()[i] > 0.0);
            assert!(op.exterior_weights()[i] < op.row_sums()[i]);
        }
        // Symmetric under the dihedral group of the square.
        let a = op.entry(g.flat_index([3, 5]), g.flat_index([10, 2]));
        let b = op.entry(g.flat_index([5, 3]), g.flat_index([2, 10]));
        assert!((a - b).abs() < 1e-14 * a.abs());
    }

    #[test]
    fn exterior_weight_matches_closed_form_in_1d() {
        let op = line_op(4.0, 128, 3.0, 0.4);
        let c = op.constant();
        let r = 12.0;
        for i in [0, 17, 64, 127] {
            let x = op.grid().node(i)[0];
            let exact = c / 0.8 * ((r - x).powf(-0.8) + (r + x).powf(-0.8));
            assert!((op.exterior_weights()[i] - exact).abs() < 1e-9 * exact, "{i}");
        }
    }

    #[test]
    fn zero_field_maps_to_zero() {
        let op = line_op(4.0, 64, 3.0, 0.4);
        let z = SpaceField::zeros(op.grid());
        assert!(op.apply(&z).unwrap().values.iter().all(|&v| v == 0.0));
        assert!(op.apply_extended(&z).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_parameters() {
        let g = GridSpec::line(1.0, 32).unwrap();
        assert!(matches!(build_operator(&g, 1.0), Err(Error::InvalidStability(_))));
        assert!(matches!(build_operator(&g, 0.0), Err(Error::InvalidStability(_))));
        assert!(matches!(RieszKernel::new(1, 0.6), Err(Error::Recurrent { .. })));
        assert!(RieszKernel::new(2, 0.6).is_ok());
    }

    #[test]
    fn heat_step_trivial_and_decay() {
        let op = line_op(2.0, 64, 1.0, 0.4);
        let z = SpaceField::zeros(op.grid());
        let u = implicit_heat_step(&op, &z, 0.1, &z).unwrap();
        assert!(u.values.iter().all(|&v| v == 0.0));
        let v = SpaceField::from_fn(op.grid(), |x| (1.0 - x[0] * x[0]).max(0.0));
        let u = implicit_heat_step(&op, &v, 0.1, &z).unwrap();
        assert!(u.values.iter().all(|&x| x >= 0.0));
        assert!(u.integrate() < v.integrate());
        let r: Vec<f64> = op.apply(&u).unwrap().values.iter().zip(&u.values).map(|(a, b)| b + 0.1 * a).collect();
        let err = r.iter().zip(&v.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let vn = v.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(err <= 1e-9 * vn);
    }

    #[test]
    fn eigenvalue_is_positive_and_scales() {
        let s = 0.4;
        let e1 = {
            let op = line_op(2.0, 64, 1.0, s);
            let mask = NodeMask(op.grid().nodes().map(|p| p[0].abs() < 1.0).collect());
            principal_eigenvalue(&op, &mask).unwrap()
        };
        let e2 = {
            let op = line_op(4.0, 64, 1.0, s);
            let mask = NodeMask(op.grid().nodes().map(|p| p[0].abs() < 2.0).collect());
            principal_eigenvalue(&op, &mask).unwrap()
        };
        assert!(e1.lambda > 0.0 && e1.residual <= 1e-8);
        let ratio = e2.lambda / e1.lambda;
        assert!((ratio / 2f64.powf(-2.0 * s) - 1.0).abs() < 1e-6, "{ratio}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn self_adjoint_and_nonnegative(u in prop::collection::vec(-1.0f64..1.0, 32), v in prop::collection::vec(-1.0f64..1.0, 32), s in 0.1f64..0.9) {
            let op = line_op(1.0, 32, 1.0, s);
            let fu = SpaceField::from_values(op.grid(), u).unwrap();
            let fv = SpaceField::from_values(op.grid(), v).unwrap();
            let au = op.apply(&fu).unwrap();
            let av = op.apply(&fv).unwrap();
            let a = au.dot(&fv).unwrap();
            let b = fu.dot(&av).unwrap();
            let scale = au.max_abs() * fv.max_abs() + av.max_abs() * fu.max_abs();
            prop_assert!((a - b).abs() <= 1e-12 * scale.max(1e-300));
            prop_assert!(au.dot(&fu).unwrap() >= 0.0);
        }

        #[test]
        fn strong_maximum_principle(bump in 0usize..32, amp in 0.1f64..2.0) {
            // A u = e_bump ≥ 0 has a solution that is positive everywhere.
            let op = line_op(1.0, 32, 1.0, 0.4);
            let mut b = vec![0.0; 32];
            b[bump] = amp;
            let mut u = vec![0.0; 32];
            conjugate_gradient(|x, out| out.copy_from_slice(&op.apply_slice(x)), &b, &mut u, 1e-13, 1000).unwrap();
            prop_assert!(u.iter().all(|&x| x > 0.0));
        }

        #[test]
        fn even_input_gives_even_output(half in prop::collection::vec(-1.0f64..1.0, 16)) {
            let op = line_op(1.0, 32, 1.0, 0.4);
            let mut full = half.clone();
            full.extend(half.iter().rev());
            let out = op.apply(&SpaceField::from_values(op.grid(), full).unwrap()).unwrap();
            for i in 0..16 {
                prop_assert!((out.values[i] - out.values[31 - i]).abs() <= 1e-10 * out.max_abs().max(1.0));
            }
        }
    }
}
