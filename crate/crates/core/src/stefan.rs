//! Freezing and melting pipelines: from `(μ, f)` to temperature, stopped mass,
//! target measure, enthalpy and stopping barrier.
//!
//! Both pipelines solve a parabolic obstacle problem for the time integral `w`
//! of the temperature and read everything else off `w`:
//!
//! * melting: `w⁰ = 0`, forcing `f - μ`, `η^k = (w^k - w^{k-1})/Δt` for `k ≥ 1`
//!   and `η⁰ = (μ - f)` on the initial region (the rest of `μ` stops at once);
//! * freezing: `w⁰ = u` from the elliptic obstacle problem, forcing
//!   `ν = μ - (-Δ)^s u`, `η⁰ = μ`, `η^k = (w^{k-1} - w^k)/Δt`.
//!
//! The stopped mass is `ρ_cum^k = μ - η^k - A w^k` (melting) and
//! `ρ_cum^k = ν + A w^k - η^k` (freezing), evaluated on the extended box.
//! With this choice the discrete balance `η^k - η^{k-1} + Δt A η^k + ρ^k - ρ^{k-1} = 0`
//! holds exactly, and the only mass not accounted for on the extended box is
//! the kernel tail `Σ_j w_j exterior_j h^d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fracops::{build_operator, FracOperator};
use crate::grid::{DensityField, GridSpec, NodeMask, SpaceField, SpaceTimeField};
use crate::obstacle::{
    solve_elliptic_obstacle_with, solve_parabolic_obstacle_with, ObstacleSolveReport, PsorOptions,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StefanType {
    /// Type I: forward barrier, particles stop once `t ≥ s(X_t)`.
    Freezing,
    /// Type II: backward barrier, particles stop while `t ≤ s(X_t)`.
    Melting,
}

/// Input of one Stefan run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProblemData {
    pub mu: DensityField,
    /// Capacity (latent heat density), `f ≥ 0`.
    pub f: SpaceField,
    /// Insulated set for freezing runs; `f` must vanish on it.
    pub insulated: Option<NodeMask>,
    pub s: f64,
    pub dt: f64,
    pub horizon: f64,
    /// Extinction threshold on `∫η`; defaults to `1e-8 * max(1, ∫μ)`.
    pub extinction_threshold: Option<f64>,
    /// Solver settings for the elliptic problem.
    pub elliptic_psor: PsorOptions,
    /// Solver settings for each implicit step.
    pub parabolic_psor: PsorOptions,
}

impl ProblemData {
    pub fn new(mu: DensityField, f: SpaceField, s: f64, dt: f64, horizon: f64) -> Result<Self> {
        mu.grid.check_same(&f.grid)?;
        if let Some(v) = f.values.iter().find(|&&v| v < 0.0) {
            return Err(Error::InvalidData(format!("capacity f must be >= 0, found {v}")));
        }
        crate::obstacle::step_count(dt, horizon)?;
        Ok(ProblemData {
            mu,
            f,
            insulated: None,
            s,
            dt,
            horizon,
            extinction_threshold: None,
            elliptic_psor: PsorOptions::default(),
            parabolic_psor: PsorOptions { omega: 1.0, ..PsorOptions::default() },
        })
    }

    pub fn with_insulated(mut self, g: NodeMask) -> Self {
        self.insulated = Some(g);
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        crate::obstacle::step_count(self.dt, horizon)?;
        self.horizon = horizon;
        Ok(self)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.mu.grid
    }

    pub fn extinction_threshold(&self) -> f64 {
        self.extinction_threshold.unwrap_or(1e-8 * self.mu.mass().max(1.0))
    }

    /// Positivity threshold used for the sets `{η > 0}`.
    pub fn positivity_tol(&self) -> f64 {
        1e-8 * self.mu.max().max(1.0)
    }

    /// Melting needs `μ > f` wherever `μ > 0` (no initial mushy region).
    pub fn validate_melting(&self) -> Result<()> {
        if self.insulated.is_some() {
            return Err(Error::InvalidData("insulated regions apply to freezing runs only".into()));
        }
        let bad = self.mu.values.iter().zip(&self.f.values).position(|(&m, &f)| m > 0.0 && m <= f);
        if let Some(i) = bad {
            let p = self.grid().node(i);
            return Err(Error::MushyRegion(format!(
                "0 < mu = {} <= f = {} at node {:?}; melting needs mu > f on the support of mu",
                self.mu.values[i], self.f.values[i], &p[..self.grid().dim()]
            )));
        }
        Ok(())
    }

    /// Freezing with an insulated set `G` needs `f = 0` on `G` and `G ⊇ {0 < μ ≤ f}`.
    pub fn validate_freezing(&self) -> Result<()> {
        if let Some(g) = &self.insulated {
            if g.len() != self.grid().node_count() {
                return Err(Error::GridMismatch("insulated mask does not match the grid".into()));
            }
            for i in 0..g.len() {
                let (m, f) = (self.mu.values[i], self.f.values[i]);
                if g.get(i) && f != 0.0 {
                    return Err(Error::InvalidData(format!("f must vanish on the insulated set, found {f}")));
                }
                if !g.get(i) && m > 0.0 && m <= f {
                    return Err(Error::InvalidData(
                        "the insulated set must contain every node with 0 < mu <= f".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BarrierOrientation {
    Forward,
    Backward,
}

/// Per-node stopping surface with nearest-node lookup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierFunction {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub orientation: BarrierOrientation,
}

impl BarrierFunction {
    pub fn constant(grid: &GridSpec, value: f64, orientation: BarrierOrientation) -> Self {
        BarrierFunction { grid: grid.clone(), values: vec![value; grid.node_count()], orientation }
    }

    /// `s` at the node whose cell contains `point`; `None` outside the box.
    pub fn value_at(&self, point: &[f64]) -> Option<f64> {
        self.grid.cell_of(point).map(|k| self.values[k])
    }

    /// Whether a particle at `point` at time `t` is in the stopping region.
    /// Points outside the box always stop.
    pub fn stops(&self, t: f64, point: &[f64]) -> bool {
        match self.value_at(point) {
            None => true,
            Some(s) => match self.orientation {
                BarrierOrientation::Forward => t >= s,
                BarrierOrientation::Backward => t <= s,
            },
        }
    }
}

/// Everything computed by one pipeline run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StefanSolution {
    pub kind: StefanType,
    pub s: f64,
    pub dt: f64,
    pub mu: DensityField,
    pub f: SpaceField,
    /// Elliptic obstacle solution (freezing only).
    pub u: Option<SpaceField>,
    pub w: SpaceTimeField,
    /// Temperature on the base box.
    pub eta: SpaceTimeField,
    /// Stopped mass `ρ([0, t_k), ·)` on the extended box.
    pub rho_cum: SpaceTimeField,
    /// Target measure on the extended box.
    pub nu: DensityField,
    /// Nonlocal latent-heat correction (`κ₁` or `κ₂`) on the extended box.
    pub kappa: SpaceTimeField,
    /// Enthalpy on the extended box.
    pub enthalpy: SpaceTimeField,
    pub barrier: BarrierFunction,
    pub initial_domain: NodeMask,
    pub insulated: NodeMask,
    /// Mass stopped at `t = 0` (melting), zero for freezing.
    pub instant_layer: SpaceField,
    pub extinction_time: Option<f64>,
    /// Mass beyond the extended box, per slice.
    pub tail_mass: Vec<f64>,
    /// Nodes where the recovered insulated region differs from the requested one
    /// by more than one cell layer.
    pub insulated_mismatch: Option<usize>,
    pub positivity_tol: f64,
    pub elliptic_report: Option<ObstacleSolveReport>,
    pub parabolic_report: ObstacleSolveReport,
}

impl StefanSolution {
    pub fn grid(&self) -> &GridSpec {
        &self.mu.grid
    }

    pub fn horizon(&self) -> f64 {
        self.w.horizon()
    }

    /// Nodes where `η` exceeded the positivity tolerance at some slice.
    pub fn ever_active(&self) -> NodeMask {
        let n = self.grid().node_count();
        let mut m = vec![false; n];
        for s in &self.eta.slices {
            for (i, &v) in s.values.iter().enumerate() {
                m[i] |= v > self.positivity_tol;
            }
        }
        NodeMask(m)
    }
}

/// Negative temperatures beyond this multiple of the data scale are solver failures.
const NEGATIVE_TOL: f64 = 1e-6;

fn mask_where(values: &[f64], pred: impl Fn(f64) -> bool) -> NodeMask {
    NodeMask(values.iter().map(|&v| pred(v)).collect())
}

fn apply_ext_stack(op: &FracOperator, stack: &SpaceTimeField) -> Result<Vec<SpaceField>> {
    stack.slices.iter().map(|s| op.apply_extended(s)).collect()
}

fn tail_of(op: &FracOperator, w: &SpaceField) -> f64 {
    w.values.iter().zip(op.exterior_weights()).map(|(a, b)| a * b).sum::<f64>() * w.grid.cell_volume()
}

fn w_tol(w: &SpaceTimeField) -> f64 {
    let scale = w.slices.iter().map(|s| s.max_abs()).fold(0.0, f64::max);
    1e-12 * scale.max(1.0)
}

fn temperature(w: &SpaceTimeField, first: SpaceField, sign: f64, scale: f64) -> Result<SpaceTimeField> {
    let mut slices = vec![first];
    for k in 1..w.len() {
        let mut s = SpaceField::zeros(&w.grid);
        for i in 0..s.len() {
            let v = sign * (w.slices[k].values[i] - w.slices[k - 1].values[i]) / w.dt;
            if v < -NEGATIVE_TOL * scale {
                return Err(Error::NegativeTemperature { slice: k, value: v });
            }
            s.values[i] = v.max(0.0);
        }
        slices.push(s);
    }
    SpaceTimeField::new(&w.grid, w.dt, slices)
}

/// Solves the melting (Type II) problem.
pub fn solve_melting(data: &ProblemData) -> Result<StefanSolution> {
    data.validate_melting()?;
    let grid = data.grid().clone();
    let op = build_operator(&grid, data.s)?;
    solve_melting_with(data, &op)
}

/// Melting with a prebuilt operator (must match the data grid and `s`).
pub fn solve_melting_with(data: &ProblemData, op: &FracOperator) -> Result<StefanSolution> {
    data.validate_melting()?;
    let grid = data.grid().clone();
    check_operator(op, data)?;
    let ext = grid.extended();
    let mu = &data.mu;
    let sigma = mask_where(&mu.values, |v| v > 0.0);
    let forcing = data.f.zip_map(mu, |f, m| f - m)?;
    let (w, report) = solve_parabolic_obstacle_with(
        op,
        &SpaceField::zeros(&grid),
        &forcing,
        data.dt,
        data.horizon,
        &data.parabolic_psor,
        |_, _| false,
    )?;
    let scale = mu.max().max(1.0);
    let eta0 = mu.zip_map(&data.f, |m, f| if m > 0.0 { m - f } else { 0.0 })?;
    let instant = data.f.masked(&sigma);
    let eta = temperature(&w, eta0, 1.0, scale)?;
    let tol = data.positivity_tol();

    let aw = apply_ext_stack(op, &w)?;
    let mu_ext = mu.to_extended();
    let mut rho = Vec::with_capacity(w.len());
    let mut enthalpy = Vec::with_capacity(w.len());
    for (slice, a_w) in eta.slices.iter().zip(&aw) {
        let eta_ext = slice.to_extended();
        let h = mu_ext.zip_map(a_w, |m, a| m - a)?;
        rho.push(h.zip_map(&eta_ext, |h, e| h - e)?);
        enthalpy.push(h);
    }
    let rho_cum = SpaceTimeField::new(&ext, data.dt, rho)?;
    let nu = DensityField::new(rho_cum.last().map(|v| v.max(0.0)))?;

    // κ₂(t_k) = -Σ_{j<k} [A η^j] χ_{η^j = 0} Δt.
    let a_eta = apply_ext_stack(op, &eta)?;
    let mut kappa = vec![SpaceField::zeros(&ext)];
    for k in 1..w.len() {
        let inactive = eta.slices[k - 1].to_extended();
        let prev = &kappa[k - 1];
        let mut next = prev.clone();
        for i in 0..next.len() {
            if inactive.values[i] <= tol {
                next.values[i] -= a_eta[k - 1].values[i] * data.dt;
            }
        }
        kappa.push(next);
    }

    let wt = w_tol(&w);
    let horizon_steps = w.len();
    let barrier_vals = (0..grid.node_count())
        .map(|i| {
            let last_zero = (0..horizon_steps).rev().find(|&k| w.slices[k].values[i] <= wt);
            match last_zero {
                Some(k) if k + 1 == horizon_steps => f64::INFINITY,
                Some(k) => w.time(k),
                None => 0.0,
            }
        })
        .collect();
    let tail_mass = w.slices.iter().map(|s| tail_of(op, s)).collect();

    Ok(StefanSolution {
        kind: StefanType::Melting,
        s: data.s,
        dt: data.dt,
        mu: mu.clone(),
        f: data.f.clone(),
        u: None,
        eta,
        rho_cum,
        nu,
        kappa: SpaceTimeField::new(&ext, data.dt, kappa)?,
        enthalpy: SpaceTimeField::new(&ext, data.dt, enthalpy)?,
        barrier: BarrierFunction { grid: grid.clone(), values: barrier_vals, orientation: BarrierOrientation::Backward },
        initial_domain: sigma.clone(),
        insulated: sigma,
        instant_layer: instant,
        extinction_time: None,
        tail_mass,
        insulated_mismatch: None,
        positivity_tol: tol,
        elliptic_report: None,
        parabolic_report: report,
        w,
    })
}

fn check_operator(op: &FracOperator, data: &ProblemData) -> Result<()> {
    op.grid().check_same(data.grid())?;
    if op.grid().ext_factor() != data.grid().ext_factor() || op.s() != data.s {
        return Err(Error::InvalidArgument("operator does not match the problem data".into()));
    }
    Ok(())
}

/// Solves the freezing (Type I) problem, optionally with an insulated set.
pub fn solve_freezing(data: &ProblemData) -> Result<StefanSolution> {
    data.validate_freezing()?;
    let op = build_operator(data.grid(), data.s)?;
    solve_freezing_with(data, &op)
}

/// Elliptic step of the freezing pipeline: `u`, its report, and `ν` on the extended box.
pub fn freezing_target(op: &FracOperator, mu: &DensityField, f: &SpaceField, psor: &PsorOptions) -> Result<(SpaceField, ObstacleSolveReport, DensityField)> {
    let forcing = f.zip_map(mu, |f, m| f - m)?;
    let (u, report) = solve_elliptic_obstacle_with(op, &forcing, psor)?;
    let au = op.apply_extended(&u)?;
    let nu = mu.to_extended().zip_map(&au, |m, a| (m - a).max(0.0))?;
    Ok((u, report, DensityField::new(nu)?))
}

pub fn solve_freezing_with(data: &ProblemData, op: &FracOperator) -> Result<StefanSolution> {
    data.validate_freezing()?;
    check_operator(op, data)?;
    let grid = data.grid().clone();
    let ext = grid.extended();
    let mu = &data.mu;
    let (u, elliptic, nu) = freezing_target(op, mu, &data.f, &data.elliptic_psor)?;
    let e_mask = u.positive_set(u.default_tol());
    let nu_base = nu.restrict_to(&grid)?;
    let (w, report) =
        solve_parabolic_obstacle_with(op, &u, &nu_base, data.dt, data.horizon, &data.parabolic_psor, |_, _| false)?;
    let scale = mu.max().max(1.0);
    let eta = temperature(&w, mu.field().clone(), -1.0, scale)?;
    let tol = data.positivity_tol();
    let m = w.len();

    let aw = apply_ext_stack(op, &w)?;
    let nu_f = nu.field();
    let mut rho = Vec::with_capacity(m);
    let mut enthalpy = Vec::with_capacity(m);
    for (slice, a_w) in eta.slices.iter().zip(&aw).take(m) {
        let eta_ext = slice.to_extended();
        let r = nu_f.zip_map(a_w, |n, a| n + a)?.zip_map(&eta_ext, |r, e| r - e)?;
        enthalpy.push(eta_ext.zip_map(&r, |e, r| e + r)?.zip_map(nu_f, |h, n| h - n)?);
        rho.push(r);
    }
    let rho_cum = SpaceTimeField::new(&ext, data.dt, rho)?;

    // κ₁(t_k) = -Σ_{j≥k} [A η^j] χ_{η^j = 0} Δt, closed beyond the horizon by -A w^M
    // on nodes still inactive at the horizon.
    let a_eta = apply_ext_stack(op, &eta)?;
    let last_eta = eta.last().to_extended();
    let mut tail = aw[m - 1].map(|v| -v);
    for i in 0..tail.len() {
        if last_eta.values[i] > tol {
            tail.values[i] = 0.0;
        }
    }
    let mut kappa = vec![SpaceField::zeros(&ext); m];
    let mut acc = tail;
    for k in (0..m).rev() {
        let ek = eta.slices[k].to_extended();
        for i in 0..acc.len() {
            if ek.values[i] <= tol {
                acc.values[i] -= a_eta[k].values[i] * data.dt;
            }
        }
        kappa[k] = acc.clone();
    }

    let threshold = data.extinction_threshold();
    let insulated_run = data.insulated.as_ref().is_some_and(|g| !g.is_empty());
    let extinction_time = if insulated_run {
        None
    } else {
        eta.slices.iter().position(|s| s.integrate() < threshold).map(|k| eta.time(k))
    };

    let wt = w_tol(&w);
    let barrier_vals: Vec<f64> = (0..grid.node_count())
        .map(|i| match (0..m).find(|&k| w.slices[k].values[i] <= wt) {
            Some(k) => w.time(k),
            None => f64::INFINITY,
        })
        .collect();

    let (insulated, insulated_mismatch) = match &data.insulated {
        Some(g) if !g.is_empty() => {
            let sigma = eta.last().positive_set(tol);
            let bad = layer_mismatch(&grid, &sigma, g);
            (sigma, Some(bad))
        }
        _ => (NodeMask::empty(grid.node_count()), None),
    };

    let tail_mass = w.slices.iter().map(|s| tail_of(op, &u) - tail_of(op, s)).collect();

    Ok(StefanSolution {
        kind: StefanType::Freezing,
        s: data.s,
        dt: data.dt,
        mu: mu.clone(),
        f: data.f.clone(),
        u: Some(u),
        eta,
        rho_cum,
        nu,
        kappa: SpaceTimeField::new(&ext, data.dt, kappa)?,
        enthalpy: SpaceTimeField::new(&ext, data.dt, enthalpy)?,
        barrier: BarrierFunction { grid: grid.clone(), values: barrier_vals, orientation: BarrierOrientation::Forward },
        initial_domain: e_mask,
        insulated,
        instant_layer: SpaceField::zeros(&grid),
        extinction_time,
        tail_mass,
        insulated_mismatch,
        positivity_tol: tol,
        elliptic_report: Some(elliptic),
        parabolic_report: report,
        w,
    })
}

/// Nodes of `a △ b` that are not within one cell of the boundary of `b`.
fn layer_mismatch(grid: &GridSpec, a: &NodeMask, b: &NodeMask) -> usize {
    let n = grid.points_per_axis() as isize;
    let d = grid.dim();
    let mut bad = 0;
    for i in 0..grid.node_count() {
        if a.get(i) == b.get(i) {
            continue;
        }
        let mi = grid.multi_index(i);
        let mut near_other = false;
        let range1 = if d == 2 { -1..=1 } else { 0..=0 };
        for da in -1isize..=1 {
            for db in range1.clone() {
                let p = mi[0] as isize + da;
                let q = mi[1] as isize + db;
                if p < 0 || p >= n || q < 0 || (d == 2 && q >= n) {
                    continue;
                }
                let j = grid.flat_index([p as usize, q as usize]);
                if b.get(j) != b.get(i) {
                    near_other = true;
                }
            }
        }
        if !near_other {
            bad += 1;
        }
    }
    bad
}

/// Enthalpy from temperature, stopped mass and target:
/// `η + ρ_cum - ν` (freezing) or `η + ρ_cum` (melting, instant layer included in `ρ_cum`).
pub fn compute_enthalpy(
    eta: &SpaceTimeField,
    rho_cum: &SpaceTimeField,
    nu: &SpaceField,
    kind: StefanType,
) -> Result<SpaceTimeField> {
    if eta.len() != rho_cum.len() {
        return Err(Error::GridMismatch(format!("{} temperature slices vs {} stopped-mass slices", eta.len(), rho_cum.len())));
    }
    rho_cum.grid.check_same(&nu.grid)?;
    let slices = eta
        .slices
        .iter()
        .zip(&rho_cum.slices)
        .map(|(e, r)| {
            let e_ext = if e.grid == r.grid { e.clone() } else { e.to_extended() };
            let h = e_ext.zip_map(r, |a, b| a + b)?;
            match kind {
                StefanType::Freezing => h.zip_map(nu, |a, b| a - b),
                StefanType::Melting => Ok(h),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    SpaceTimeField::new(&rho_cum.grid, rho_cum.dt, slices)
}

/// Sup-in-time, L¹-in-space distance between the structural stopped mass
/// (built from the positivity sets and `κ`) and the balance reconstruction
/// `μ - η(t_k) - Σ_{j<k} A η(t_j) Δt`, over the slices `t_k > 0`.
pub fn rho_consistency(sol: &StefanSolution, op: &FracOperator) -> Result<f64> {
    let grid = sol.grid();
    let ext = grid.extended();
    let tol = sol.positivity_tol;
    let mu_ext = sol.mu.to_extended();
    let nu = sol.nu.field();
    let vol = grid.cell_volume();
    let mut cum = SpaceField::zeros(&ext);
    let mut worst = 0.0_f64;
    for k in 0..sol.eta.len() {
        let eta_ext = sol.eta.slices[k].to_extended();
        let kappa = &sol.kappa.slices[k];
        let structural: Vec<f64> = match sol.kind {
            StefanType::Melting => {
                let layer = sol.instant_layer.to_extended();
                let f_ext = sol.f.to_extended();
                let sigma = sol.insulated.0.clone();
                let mut s_ext = vec![false; ext.node_count()];
                for (i, &b) in sigma.iter().enumerate() {
                    s_ext[grid.base_to_ext(i)] = b;
                }
                (0..ext.node_count())
                    .map(|i| {
                        let active = eta_ext.values[i] > tol;
                        let mut v = layer.values[i];
                        if !s_ext[i] && active {
                            v += f_ext.values[i];
                        }
                        if !active {
                            v += kappa.values[i];
                        }
                        v
                    })
                    .collect()
            }
            StefanType::Freezing => (0..ext.node_count())
                .map(|i| {
                    let after = if eta_ext.values[i] > tol { nu.values[i] } else { kappa.values[i] };
                    nu.values[i] - after
                })
                .collect(),
        };
        let mut dist = 0.0;
        if k > 0 {
            for (i, st) in structural.iter().enumerate() {
                dist += (st - (mu_ext.values[i] - eta_ext.values[i] - cum.values[i])).abs();
            }
        }
        worst = worst.max(dist * vol);
        let a_eta = op.apply_extended(&sol.eta.slices[k])?;
        for i in 0..ext.node_count() {
            cum.values[i] += a_eta.values[i] * sol.dt;
        }
    }
    Ok(worst)
}

/// Test functions for the weak residual: 4 time profiles times 5 spatial bumps.
type TimeProfile = fn(f64) -> (f64, f64);

fn test_dictionary() -> (Vec<TimeProfile>, [f64; 5]) {
    fn p0(t: f64) -> (f64, f64) {
        ((1.0 - t).powi(3), -3.0 * (1.0 - t).powi(2))
    }
    fn p1(t: f64) -> (f64, f64) {
        (t * (1.0 - t).powi(2), (1.0 - t).powi(2) - 2.0 * t * (1.0 - t))
    }
    fn p2(t: f64) -> (f64, f64) {
        (t * t * (1.0 - t), 2.0 * t - 3.0 * t * t)
    }
    fn p3(t: f64) -> (f64, f64) {
        let a = std::f64::consts::PI * t;
        (a.sin().powi(2), std::f64::consts::PI * (2.0 * a).sin())
    }
    (vec![p0, p1, p2, p3], [-1.5, -0.75, 0.0, 0.75, 1.5])
}

/// Largest normalised weak-form residual of `∂_t h + (-Δ)^s η = 0` over a fixed
/// dictionary of 20 space-time test functions vanishing at the horizon.
pub fn enthalpy_residual(sol: &StefanSolution, op: &FracOperator) -> Result<f64> {
    let grid = sol.grid();
    let vol = grid.cell_volume();
    let horizon = sol.horizon();
    if horizon <= 0.0 {
        return Ok(0.0);
    }
    let (profiles, centres) = test_dictionary();
    let dt = sol.dt;
    let m = sol.eta.len();
    let weights: Vec<f64> = (0..m).map(|k| if k == 0 || k + 1 == m { 0.5 * dt } else { dt }).collect();
    let h_ext = &sol.enthalpy;
    let h_sup = h_ext.slices.iter().map(|s| s.max_abs()).fold(0.0, f64::max);
    let eta_sup = sol.eta.slices.iter().map(|s| s.max_abs()).fold(0.0, f64::max);
    if h_sup == 0.0 && eta_sup == 0.0 {
        return Ok(0.0);
    }
    let mut worst = 0.0_f64;
    for &c in &centres {
        let bump = SpaceField::from_fn(grid, |x| {
            let mut r2 = (x[0] - c).powi(2);
            if x.len() > 1 {
                r2 += x[1] * x[1];
            }
            (1.0 - r2).max(0.0).powi(3)
        });
        let a_bump = op.apply(&bump)?;
        let bump_ext = bump.to_extended();
        let bump_l1 = bump.values.iter().map(|v| v.abs()).sum::<f64>() * vol;
        let a_l1 = a_bump.values.iter().map(|v| v.abs()).sum::<f64>() * vol;
        // Time-independent spatial pairings per slice.
        let hb: Vec<f64> = h_ext.slices.iter().map(|h| h.dot(&bump_ext)).collect::<Result<_>>()?;
        let ea: Vec<f64> = sol.eta.slices.iter().map(|e| e.dot(&a_bump)).collect::<Result<_>>()?;
        for p in &profiles {
            let mut val = 0.0;
            let mut dphi_l1 = 0.0;
            let mut phi_l1 = 0.0;
            for k in 0..m {
                let (phi, dphi) = p(k as f64 * dt / horizon);
                let dphi = dphi / horizon;
                val += weights[k] * (-dphi * hb[k] + phi * ea[k]);
                dphi_l1 += weights[k] * dphi.abs();
                phi_l1 += weights[k] * phi.abs();
            }
            let (phi0, _) = p(0.0);
            val -= phi0 * hb[0];
            let h0_sup = h_ext.slices[0].max_abs();
            let norm = dphi_l1 * bump_l1 * h_sup + phi_l1 * a_l1 * eta_sup + phi0.abs() * bump_l1 * h0_sup;
            if norm > 0.0 {
                worst = worst.max(val.abs() / norm);
            }
        }
    }
    Ok(worst)
}
