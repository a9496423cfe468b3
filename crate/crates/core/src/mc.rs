//! Monte Carlo for isotropic 2s-stable processes.
//!
//! Increments are Gaussian mixtures `Δt^{1/(2s)} sqrt(2 S) Z` with `S` a positive
//! s-stable variable (Laplace transform `exp(-λ^s)`) drawn by Kanter's
//! representation, so the characteristic function is `exp(-Δt |θ|^{2s})`.
//!
//! Every particle owns the ChaCha stream `(seed, index)` and histograms hold
//! integer counts, so results do not depend on how work is scheduled.

use std::f64::consts::PI;

use rand::distr::{Distribution, Open01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DensityField, GridSpec, SpaceField};
use crate::quad::{integrate_adaptive, integrate_to_infinity};
use crate::stefan::{BarrierFunction, BarrierOrientation, StefanSolution, StefanType};

/// Sampler of isotropic 2s-stable increments in `d` dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StableSampler {
    s: f64,
    d: usize,
}

impl StableSampler {
    pub fn new(d: usize, s: f64) -> Result<Self> {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::InvalidStability(s));
        }
        if d != 1 && d != 2 {
            return Err(Error::InvalidArgument(format!("dimension must be 1 or 2, got {d}")));
        }
        Ok(StableSampler { s, d })
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Positive s-stable variable with `E exp(-λ S) = exp(-λ^s)`.
    pub fn subordinator<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let s = self.s;
        let o: f64 = Open01.sample(rng);
        let u = PI * o;
        let w: f64 = Exp1.sample(rng);
        let a = (s * u).sin() / u.sin().powf(1.0 / s);
        a * (((1.0 - s) * u).sin() / w).powf((1.0 - s) / s)
    }

    /// One increment over a step whose scale is `scale = dt^{1/(2s)}`.
    #[inline]
    pub fn increment_scaled<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64) -> [f64; 2] {
        let amp = scale * (2.0 * self.subordinator(rng)).sqrt();
        let z0: f64 = StandardNormal.sample(rng);
        if self.d == 1 {
            [amp * z0, 0.0]
        } else {
            let z1: f64 = StandardNormal.sample(rng);
            [amp * z0, amp * z1]
        }
    }

    pub fn sample_increment<R: Rng + ?Sized>(&self, rng: &mut R, dt: f64) -> [f64; 2] {
        self.increment_scaled(rng, dt.powf(0.5 / self.s))
    }

    pub fn step_scale(&self, dt: f64) -> f64 {
        dt.powf(0.5 / self.s)
    }
}

/// The RNG stream of particle `index`.
pub fn particle_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn with_workers<T: Send>(workers: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(job()),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))?;
            Ok(pool.install(job))
        }
    }
}

/// Inverse-CDF sampler over the cells of a density: picks a cell with
/// probability proportional to its mass, then a uniform point inside it.
#[derive(Clone, Debug)]
pub struct CellSampler {
    grid: GridSpec,
    cdf: Vec<f64>,
    cells: Vec<usize>,
}

impl CellSampler {
    pub fn new(mu: &DensityField) -> Result<Self> {
        let mut cdf = Vec::new();
        let mut cells = Vec::new();
        let mut acc = 0.0;
        for (i, &v) in mu.values.iter().enumerate() {
            if v > 0.0 {
                acc += v;
                cdf.push(acc);
                cells.push(i);
            }
        }
        if cells.is_empty() {
            return Err(Error::InvalidArgument("cannot sample from a zero density".into()));
        }
        for c in cdf.iter_mut() {
            *c /= acc;
        }
        Ok(CellSampler { grid: mu.grid.clone(), cdf, cells })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let u: f64 = rng.random();
        let k = self.cdf.partition_point(|&c| c <= u).min(self.cells.len() - 1);
        let centre = self.grid.node(self.cells[k]);
        let h = self.grid.spacing();
        let mut p = [centre[0] + h * (rng.random::<f64>() - 0.5), 0.0];
        if self.grid.dim() == 2 {
            p[1] = centre[1] + h * (rng.random::<f64>() - 0.5);
        }
        p
    }
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSettings {
    pub particles: usize,
    /// Simulation step; must divide the slice step.
    pub dt: f64,
    pub seed: u64,
    pub workers: Option<usize>,
    /// Particles whose paths go to the trace (rows are capped at 10⁴).
    pub trace_particles: usize,
}

impl McSettings {
    pub fn new(particles: usize, dt: f64, seed: u64) -> Self {
        McSettings { particles, dt, seed, workers: None, trace_particles: 0 }
    }
}

/// Inputs of a barrier simulation.
#[derive(Clone, Copy, Debug)]
pub struct BarrierProblem<'a> {
    pub mu: &'a DensityField,
    /// Capacity; only used by Type II for the instant stops at `t = 0`.
    pub f: Option<&'a SpaceField>,
    pub barrier: &'a BarrierFunction,
    pub kind: StefanType,
    pub s: f64,
    /// Spacing of the recorded time slices.
    pub slice_dt: f64,
    pub horizon: f64,
}

impl<'a> BarrierProblem<'a> {
    /// The problem matching a PDE run, on the same time slices.
    pub fn from_solution(sol: &'a StefanSolution) -> Self {
        BarrierProblem {
            mu: &sol.mu,
            f: Some(&sol.f),
            barrier: &sol.barrier,
            kind: sol.kind,
            s: sol.s,
            slice_dt: sol.dt,
            horizon: sol.horizon(),
        }
    }
}

pub const MAX_TRACE_ROWS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub particle: usize,
    pub t: f64,
    pub x: [f64; 2],
    pub active: bool,
}

/// Active-particle counts per base cell at one recorded slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub slice: usize,
    pub time: f64,
    pub counts: Vec<u32>,
}

/// Outcome of a barrier simulation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Ensemble {
    pub grid: GridSpec,
    pub kind: StefanType,
    pub slice_dt: f64,
    /// Mass carried by each particle, `∫μ / N`.
    pub weight: f64,
    /// `+∞` for particles still active at the horizon.
    pub stop_time: Vec<f64>,
    pub stop_position: Vec<[f64; 2]>,
    /// Slice `k` with stop time in `(t_{k-1}, t_k]`; `u32::MAX` if never stopped.
    pub stop_slice: Vec<u32>,
    /// Active particles at every slice.
    pub active_totals: Vec<u64>,
    pub snapshots: Vec<Snapshot>,
    pub trace: Vec<TraceRow>,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.stop_time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stop_time.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.weight * self.len() as f64
    }

    pub fn slices(&self) -> usize {
        self.active_totals.len()
    }
}

#[derive(Clone, Copy)]
struct Stop {
    time: f64,
    pos: [f64; 2],
    slice: u32,
}

struct Path<'a> {
    problem: &'a BarrierProblem<'a>,
    sampler: StableSampler,
    init: CellSampler,
    steps_per_slice: usize,
    slices: usize,
    dt: f64,
    scale: f64,
    seed: u64,
}

impl Path<'_> {
    /// Runs particle `index`, calling `visit(slice, x)` at every slice where it is active.
    fn run(&self, index: usize, mut visit: impl FnMut(usize, [f64; 2])) -> Stop {
        let p = self.problem;
        let grid = &p.mu.grid;
        let mut rng = particle_rng(self.seed, index as u64);
        let mut x = self.init.sample(&mut rng);
        let stop_now = match p.kind {
            StefanType::Melting => {
                let cell = grid.cell_of(&x).expect("initial point lies in the box");
                let m = p.mu.values[cell];
                let f = p.f.map_or(0.0, |f| f.values[cell]);
                let u: f64 = rng.random();
                u < f.min(m) / m
            }
            StefanType::Freezing => p.barrier.stops(0.0, &x),
        };
        if stop_now {
            return Stop { time: 0.0, pos: x, slice: 0 };
        }
        visit(0, x);
        let total = (self.slices - 1) * self.steps_per_slice;
        for m in 1..=total {
            let inc = self.sampler.increment_scaled(&mut rng, self.scale);
            x[0] += inc[0];
            x[1] += inc[1];
            let t = m as f64 * self.dt;
            // Leaving the box stops the particle; `stops` covers that case.
            if p.barrier.stops(t, &x) {
                return Stop { time: t, pos: x, slice: m.div_ceil(self.steps_per_slice) as u32 };
            }
            if m % self.steps_per_slice == 0 {
                visit(m / self.steps_per_slice, x);
            }
        }
        Stop { time: f64::INFINITY, pos: x, slice: u32::MAX }
    }
}

struct Tally {
    active: Vec<u64>,
    snaps: Vec<Vec<u32>>,
}

impl Tally {
    fn merge(mut self, other: Tally) -> Tally {
        self.active.iter_mut().zip(other.active).for_each(|(a, b)| *a += b);
        for (a, b) in self.snaps.iter_mut().zip(other.snaps) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self
    }
}

fn slice_ratio(slice_dt: f64, dt: f64) -> Result<usize> {
    let ratio = slice_dt / dt;
    let k = ratio.round();
    if !(dt > 0.0) || k < 1.0 || (ratio - k).abs() > 1e-9 * ratio {
        return Err(Error::InvalidArgument(format!("simulation step {dt} must divide the slice step {slice_dt}")));
    }
    Ok(k as usize)
}

fn slice_index(slice_dt: f64, t: f64, slices: usize) -> Result<usize> {
    let k = (t / slice_dt).round();
    if !(t >= 0.0) || (t / slice_dt - k).abs() > 1e-9 * k.max(1.0) || k as usize >= slices {
        return Err(Error::InvalidArgument(format!("time {t} is not a recorded slice")));
    }
    Ok(k as usize)
}

/// Runs `settings.particles` particles from `μ` against the barrier.
///
/// Type I stops a particle at the first step with `t ≥ s(X_t)`, `t = 0` included.
/// Type II stops it at `t = 0` with probability `min(f, μ)/μ` of its start cell, and
/// otherwise at the first step `t > 0` with `t ≤ s(X_t)`. Leaving the base box stops
/// a particle at once. Active-particle histograms are kept at the `snapshots` times.
pub fn simulate_to_barrier(problem: &BarrierProblem, settings: &McSettings, snapshots: &[f64]) -> Result<Ensemble> {
    let grid = problem.mu.grid.clone();
    problem.barrier.grid.check_same(&grid)?;
    let expected = match problem.kind {
        StefanType::Freezing => BarrierOrientation::Forward,
        StefanType::Melting => BarrierOrientation::Backward,
    };
    if problem.barrier.orientation != expected {
        return Err(Error::InvalidArgument("barrier orientation does not match the Stefan type".into()));
    }
    if let Some(f) = problem.f {
        f.grid.check_same(&grid)?;
    }
    if settings.particles == 0 || settings.particles > u32::MAX as usize {
        return Err(Error::InvalidArgument(format!("particle count {} out of range", settings.particles)));
    }
    let slices = crate::obstacle::step_count(problem.slice_dt, problem.horizon)? + 1;
    let steps_per_slice = slice_ratio(problem.slice_dt, settings.dt)?;
    let snap_idx = snapshots
        .iter()
        .map(|&t| slice_index(problem.slice_dt, t, slices))
        .collect::<Result<Vec<_>>>()?;
    let sampler = StableSampler::new(grid.dim(), problem.s)?;
    let path = Path {
        problem,
        sampler,
        init: CellSampler::new(problem.mu)?,
        steps_per_slice,
        slices,
        dt: settings.dt,
        scale: sampler.step_scale(settings.dt),
        seed: settings.seed,
    };
    let cells = grid.node_count();
    let empty = || Tally { active: vec![0; slices], snaps: vec![vec![0; cells]; snap_idx.len()] };
    // Slot of each slice in `snaps`, if recorded.
    let mut slot = vec![usize::MAX; slices];
    for (j, &k) in snap_idx.iter().enumerate() {
        slot[k] = j;
    }

    const CHUNK: usize = 1024;
    let mut stops = vec![Stop { time: 0.0, pos: [0.0; 2], slice: 0 }; settings.particles];
    let tally = with_workers(settings.workers, || {
        stops
            .par_chunks_mut(CHUNK)
            .enumerate()
            .fold(empty, |mut tally, (c, out)| {
                for (j, stop) in out.iter_mut().enumerate() {
                    *stop = path.run(c * CHUNK + j, |k, x| {
                        tally.active[k] += 1;
                        if slot[k] != usize::MAX {
                            let cell = grid.cell_of(&x).expect("active particles lie in the box");
                            tally.snaps[slot[k]][cell] += 1;
                        }
                    });
                }
                tally
            })
            .reduce(empty, Tally::merge)
    })?;

    let mut trace = Vec::new();
    for i in 0..settings.trace_particles.min(settings.particles) {
        let stop = path.run(i, |k, x| {
            trace.push(TraceRow { particle: i, t: k as f64 * problem.slice_dt, x, active: true })
        });
        if stop.time.is_finite() {
            trace.push(TraceRow { particle: i, t: stop.time, x: stop.pos, active: false });
        }
        if trace.len() >= MAX_TRACE_ROWS {
            trace.truncate(MAX_TRACE_ROWS);
            break;
        }
    }

    Ok(Ensemble {
        grid: grid.clone(),
        kind: problem.kind,
        slice_dt: problem.slice_dt,
        weight: problem.mu.mass() / settings.particles as f64,
        stop_time: stops.iter().map(|s| s.time).collect(),
        stop_position: stops.iter().map(|s| s.pos).collect(),
        stop_slice: stops.iter().map(|s| s.slice).collect(),
        active_totals: tally.active,
        snapshots: snap_idx
            .iter()
            .zip(tally.snaps)
            .map(|(&k, counts)| Snapshot { slice: k, time: k as f64 * problem.slice_dt, counts })
            .collect(),
        trace,
    })
}

/// Empirical Eulerian variables at a set of recorded times.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EulerianEstimate {
    pub times: Vec<f64>,
    /// Density of active particles on the base grid.
    pub eta: Vec<SpaceField>,
    /// Density of particles stopped by each time, on the extended grid.
    pub rho_cum: Vec<SpaceField>,
    /// Stopped mass beyond the extended box.
    pub tail: Vec<f64>,
}

impl EulerianEstimate {
    /// `∫η̂ + ∫ρ̂_cum + tail` at the `j`-th time; equals the initial mass.
    pub fn total_mass(&self, j: usize) -> f64 {
        self.eta[j].integrate() + self.rho_cum[j].integrate() + self.tail[j]
    }
}

/// Weighted histograms of active particles (`stop_time > t`) and of stopped
/// particles (`stop_time ≤ t`) at each of `times`, which must be snapshot times.
pub fn estimate_eulerian(ens: &Ensemble, times: &[f64]) -> Result<EulerianEstimate> {
    let grid = &ens.grid;
    let ext = grid.extended();
    let vol = grid.cell_volume();
    let mut out = EulerianEstimate { times: times.to_vec(), eta: vec![], rho_cum: vec![], tail: vec![] };
    for &t in times {
        let k = slice_index(ens.slice_dt, t, ens.slices())?;
        let snap = ens
            .snapshots
            .iter()
            .find(|s| s.slice == k)
            .ok_or_else(|| Error::InvalidArgument(format!("no snapshot recorded at t = {t}")))?;
        let eta = snap.counts.iter().map(|&c| c as f64 * ens.weight / vol).collect();
        let mut counts = vec![0u64; ext.node_count()];
        let mut tail = 0u64;
        for (pos, &slice) in ens.stop_position.iter().zip(&ens.stop_slice) {
            if slice as usize <= k {
                match ext.cell_of(pos) {
                    Some(c) => counts[c] += 1,
                    None => tail += 1,
                }
            }
        }
        out.eta.push(SpaceField::from_values(grid, eta)?);
        out.rho_cum
            .push(SpaceField::from_values(&ext, counts.iter().map(|&c| c as f64 * ens.weight / vol).collect())?);
        out.tail.push(tail as f64 * ens.weight);
    }
    Ok(out)
}

/// Step until `|X| ≥ r`; returns the exit time (`+∞` past `max_steps`) and position.
fn exit_path(sampler: &StableSampler, rng: &mut ChaCha8Rng, x0: [f64; 2], r: f64, dt: f64, max_steps: u64) -> (f64, [f64; 2]) {
    let scale = sampler.step_scale(dt);
    let r2 = r * r;
    let mut x = x0;
    for m in 1..=max_steps {
        let inc = sampler.increment_scaled(rng, scale);
        x[0] += inc[0];
        x[1] += inc[1];
        if x[0] * x[0] + x[1] * x[1] >= r2 {
            return (m as f64 * dt, x);
        }
    }
    (f64::INFINITY, x)
}

fn check_start(x0: [f64; 2], r: f64) -> Result<()> {
    if !(r > 0.0) || x0[0] * x0[0] + x0[1] * x0[1] >= r * r {
        return Err(Error::InvalidArgument(format!("start {x0:?} must lie inside the ball of radius {r}")));
    }
    Ok(())
}

/// Reference law of the exit position from `B_r` started at `x0`, tabulated in
/// the distance `a = |y| - r` to the sphere.
///
/// The density is `c ((r² - |x0|²)/(|y|² - r²))^s |x0 - y|^{-d}` with
/// `c = Γ(d/2) sin(πs) / π^{d/2+1}`. In the plane only `|y|` is tabulated, using
/// `∫ |x0 - y|^{-2} dθ = 2π / (R² - |x0|²)` on the circle `|y| = R`.
#[derive(Clone, Debug)]
pub struct ExitReference {
    d: usize,
    s: f64,
    r: f64,
    x0: f64,
    q: f64,
    /// Log-spaced distances, shared by all sides.
    a: Vec<f64>,
    /// Cumulative mass from the sphere out to `a[j]`, per side (d = 1: `[+, -]`).
    cum: Vec<Vec<f64>>,
    /// Total mass per side, including the far tail.
    side_mass: Vec<f64>,
    /// Mass before normalization; should be 1.
    pub raw_mass: f64,
}

impl ExitReference {
    pub fn new(d: usize, s: f64, r: f64, x0: [f64; 2]) -> Result<Self> {
        StableSampler::new(d, s)?;
        check_start(x0, r)?;
        let rho0 = x0[0].hypot(x0[1]);
        let (lo, hi, per_decade) = (-14.0f64, 10.0f64, 20usize);
        let count = ((hi - lo) as usize) * per_decade + 1;
        let a: Vec<f64> = (0..count).map(|j| 10f64.powf(lo + j as f64 / per_decade as f64)).collect();
        let mut law = ExitReference {
            d,
            s,
            r,
            x0: if d == 1 { x0[0] } else { rho0 },
            q: r * r - rho0 * rho0,
            a,
            cum: vec![],
            side_mass: vec![],
            raw_mass: 1.0,
        };
        for side in 0..(3 - d) {
            let g = |t: f64| law.density(side, t);
            let mut acc = integrate_adaptive(g, 0.0, law.a[0], 1e-15);
            let mut c = vec![acc];
            for w in law.a.windows(2) {
                acc += integrate_adaptive(g, w[0], w[1], 1e-14);
                c.push(acc);
            }
            let far = integrate_to_infinity(g, law.a[count - 1], 1e-14);
            law.side_mass.push(acc + far);
            law.cum.push(c);
        }
        law.raw_mass = law.side_mass.iter().sum();
        let total = law.raw_mass;
        law.cum.iter_mut().flatten().for_each(|v| *v /= total);
        law.side_mass.iter_mut().for_each(|v| *v /= total);
        Ok(law)
    }

    /// Unnormalized density at distance `a` past the sphere (d = 1 sides: 0 right, 1 left;
    /// d = 2: density of `|X_τ|`).
    fn density(&self, side: usize, a: f64) -> f64 {
        let (s, r) = (self.s, self.r);
        let y = r + a;
        let shape = (self.q / (a * (y + r))).powf(s);
        if self.d == 1 {
            let dist = if side == 0 { y - self.x0 } else { y + self.x0 };
            (PI * s).sin() / PI * shape / dist
        } else {
            (PI * s).sin() / (PI * PI) * shape * y * 2.0 * PI / (y * y - self.x0 * self.x0)
        }
    }

    /// Normalized mass of one side within distance `a` of the sphere.
    fn side_cdf(&self, side: usize, a: f64) -> f64 {
        if a <= 0.0 {
            return 0.0;
        }
        let c = &self.cum[side];
        let j = self.a.partition_point(|&v| v <= a);
        let g = |t: f64| self.density(side, t) / self.raw_mass;
        if j == 0 {
            return integrate_adaptive(g, 0.0, a, 1e-15);
        }
        if j == self.a.len() {
            return self.side_mass[side] - integrate_to_infinity(g, a, 1e-14);
        }
        c[j - 1] + integrate_adaptive(g, self.a[j - 1], a, 1e-14)
    }
    /// CDF of the signed exit position (d = 1) or of `|X_τ|` (d = 2).
    pub fn cdf(&self, y: f64) -> f64 {
        if self.d == 2 {
            return self.side_cdf(0, y - self.r);
        }
        if y <= -self.r {
            self.side_mass[1] - self.side_cdf(1, -y - self.r)
        } else if y < self.r {
            self.side_mass[1]
        } else {
            self.side_mass[1] + self.side_cdf(0, y - self.r)
        }
    }
}

/// Kolmogorov–Smirnov distance of the samples to `cdf`.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExitLaw {
    pub d: usize,
    pub s: f64,
    pub r: f64,
    pub x0: [f64; 2],
    pub dt: f64,
    /// Signed exit positions in d = 1, exit radii in d = 2.
    pub samples: Vec<f64>,
    pub positions: Vec<[f64; 2]>,
    pub exit_times: Vec<f64>,
    pub ks: f64,
    /// Mass of the reference density before normalization.
    pub reference_mass: f64,
}

/// Samples `X_{τ_r}` from `x0` by plain time stepping and compares with the exact law.
pub fn exit_ball_law(
    sampler: &StableSampler,
    x0: [f64; 2],
    r: f64,
    particles: usize,
    dt: f64,
    seed: u64,
    workers: Option<usize>,
) -> Result<ExitLaw> {
    check_start(x0, r)?;
    if particles == 0 || !(dt > 0.0) {
        return Err(Error::InvalidArgument("exit law needs particles > 0 and dt > 0".into()));
    }
    let reference = ExitReference::new(sampler.dim(), sampler.s(), r, x0)?;
    let runs: Vec<(f64, [f64; 2])> = with_workers(workers, || {
        (0..particles)
            .into_par_iter()
            .map(|i| exit_path(sampler, &mut particle_rng(seed, i as u64), x0, r, dt, u64::MAX))
            .collect()
    })?;
    let samples: Vec<f64> = runs
        .iter()
        .map(|(_, x)| if sampler.dim() == 1 { x[0] } else { x[0].hypot(x[1]) })
        .collect();
    let ks = ks_distance(&samples, |y| reference.cdf(y));
    Ok(ExitLaw {
        d: sampler.dim(),
        s: sampler.s(),
        r,
        x0,
        dt,
        samples,
        positions: runs.iter().map(|r| r.1).collect(),
        exit_times: runs.iter().map(|r| r.0).collect(),
        ks,
        reference_mass: reference.raw_mass,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SurvivalFit {
    pub r: f64,
    /// Fitted decay rate `λ` of `P(τ_r > t)`.
    pub rate: f64,
    /// Fit window `[t_a, horizon]`, spanning the last decade of survival probability.
    pub window: [f64; 2],
    pub survivors: usize,
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
}

/// Least-squares slope of `log P(τ_r > t)` over the last decade before the horizon.
#[allow(clippy::too_many_arguments)]
pub fn survival_tail(
    sampler: &StableSampler,
    x0: [f64; 2],
    r: f64,
    particles: usize,
    horizon: f64,
    dt: f64,
    seed: u64,
    workers: Option<usize>,
) -> Result<SurvivalFit> {
    check_start(x0, r)?;
    let steps = crate::obstacle::step_count(dt, horizon)?;
    let mut taus: Vec<f64> = with_workers(workers, || {
        (0..particles)
            .into_par_iter()
            .map(|i| exit_path(sampler, &mut particle_rng(seed, i as u64), x0, r, dt, steps as u64).0)
            .collect()
    })?;
    taus.sort_by(f64::total_cmp);
    let n = particles as f64;
    let survivors = taus.iter().filter(|t| !t.is_finite()).count();
    if survivors < 100 {
        return Err(Error::InsufficientSurvivors(survivors));
    }
    let points = 200;
    let times: Vec<f64> = (0..=points).map(|j| horizon * j as f64 / points as f64).collect();
    let survival: Vec<f64> =
        times.iter().map(|&t| (particles - taus.partition_point(|&v| v <= t)) as f64 / n).collect();
    let p_end = survival[points];
    let start = survival.iter().position(|&p| p <= 10.0 * p_end).unwrap_or(0);
    let window: Vec<(f64, f64)> = (start..=points).map(|j| (times[j], survival[j].ln())).collect();
    if window.len() < 3 {
        return Err(Error::InvalidArgument("survival fit window has fewer than 3 points".into()));
    }
    let m = window.len() as f64;
    let (tx, ty) = window.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let (tx, ty) = (tx / m, ty / m);
    let (sxy, sxx) = window.iter().fold((0.0, 0.0), |acc, p| (acc.0 + (p.0 - tx) * (p.1 - ty), acc.1 + (p.0 - tx).powi(2)));
    Ok(SurvivalFit { r, rate: -sxy / sxx, window: [times[start], horizon], survivors, times, survival })
}
