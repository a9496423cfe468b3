//! Mode orchestration: solve, check, write artifacts.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fracstefan::fracops::{build_operator, principal_eigenvalue, FracOperator};
use fracstefan::grid::{DensityField, NodeMask, SpaceField};
use fracstefan::mc::{
    estimate_eulerian, exit_ball_law, simulate_to_barrier, survival_tail, BarrierProblem, McSettings,
    StableSampler,
};
use fracstefan::stefan::{solve_freezing_with, solve_melting_with, ProblemData, StefanSolution, StefanType};
use fracstefan::valprops::{self as vp, CheckReport};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Mode, RunConfig, Setup};
use crate::output;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub mode: &'static str,
    pub config: RunConfig,
    pub config_digest: String,
    pub seed: u64,
    pub masses: Value,
    pub residuals: Value,
    pub extinction_time: Option<f64>,
    pub checks: Vec<CheckReport>,
    pub artifacts: Vec<String>,
    pub error: Option<String>,
}

impl Manifest {
    pub fn new(mode: Mode, config: &RunConfig) -> Self {
        Manifest {
            mode: mode.as_str(),
            config: config.clone(),
            config_digest: vp::digest(config),
            seed: config.mc.seed,
            masses: Value::Null,
            residuals: Value::Null,
            extinction_time: None,
            checks: vec![],
            artifacts: vec![],
            error: None,
        }
    }

    /// No check ran and failed.
    pub fn all_ok(&self) -> bool {
        self.error.is_none() && self.checks.iter().all(CheckReport::ok)
    }
}

struct Writer<'a> {
    root: &'a Path,
    files: Vec<String>,
}

impl Writer<'_> {
    fn path(&mut self, rel: &str) -> PathBuf {
        self.files.push(rel.to_string());
        self.root.join(rel)
    }
}

/// Runs `mode` and writes its artifacts under `out`; the manifest goes to `out/manifest.json`.
pub fn run(config: &RunConfig, mode: Mode, out: &Path) -> Result<Manifest> {
    let mut manifest = Manifest::new(mode, config);
    let mut w = Writer { root: out, files: vec![] };
    match mode {
        Mode::Melt | Mode::Freeze => run_stefan(config, mode, &mut w, &mut manifest)?,
        Mode::Mc => run_mc(config, &mut w, &mut manifest)?,
        Mode::Validate => run_validate(config, &mut w, &mut manifest)?,
        Mode::ExitLaw => run_exit_law(config, &mut w, &mut manifest)?,
        Mode::Tail => run_tail(config, &mut w, &mut manifest)?,
    }
    if mode == Mode::Validate {
        let p = w.path("checks.json");
        output::write_json(&p, &manifest.checks)?;
    }
    manifest.artifacts = w.files;
    manifest.artifacts.push("manifest.json".into());
    output::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Writes a manifest describing a failed run.
pub fn write_failure(config: &RunConfig, mode: Mode, out: &Path, error: &str) -> Result<()> {
    let mut manifest = Manifest::new(mode, config);
    manifest.error = Some(error.to_string());
    manifest.artifacts.push("manifest.json".into());
    output::write_json(&out.join("manifest.json"), &manifest).map(|_| ())
}

fn setup(config: &RunConfig, mode: Mode) -> Result<(Setup, FracOperator)> {
    let setup = config.setup(mode)?;
    let op = build_operator(&setup.grid, config.s).context("assembling the fractional Laplacian")?;
    Ok((setup, op))
}

fn solve(kind: StefanType, data: &ProblemData, op: &FracOperator) -> Result<StefanSolution> {
    Ok(match kind {
        StefanType::Melting => solve_melting_with(data, op).context("melting pipeline")?,
        StefanType::Freezing => solve_freezing_with(data, op).context("freezing pipeline")?,
    })
}

fn masses(sol: &StefanSolution) -> Value {
    json!({
        "mu": sol.mu.mass(),
        "nu": sol.nu.mass(),
        "eta": sol.eta.masses(),
        "rho_cum": sol.rho_cum.masses(),
        "tail": sol.tail_mass,
    })
}

fn residuals(sol: &StefanSolution) -> Value {
    let p = &sol.parabolic_report;
    let mut v = json!({
        "parabolic_max_residual": p.max_residual,
        "parabolic_complementarity": p.complementarity,
        "parabolic_tolerance": p.tolerance,
        "parabolic_sweeps": p.iterations.iter().sum::<usize>(),
    });
    if let Some(e) = &sol.elliptic_report {
        v["elliptic_max_residual"] = json!(e.max_residual);
        v["elliptic_complementarity"] = json!(e.complementarity);
        v["elliptic_tolerance"] = json!(e.tolerance);
        v["elliptic_sweeps"] = json!(e.iterations.iter().sum::<usize>());
    }
    v
}

fn write_solution(w: &mut Writer, prefix: &str, sol: &StefanSolution, snapshots: usize) -> Result<()> {
    let idx = output::snapshot_indices(sol.w.len(), snapshots);
    output::write_field(&w.path(&format!("{prefix}nu.csv")), sol.nu.field())?;
    if let Some(u) = &sol.u {
        output::write_field(&w.path(&format!("{prefix}u.csv")), u)?;
    }
    output::write_barrier(&w.path(&format!("{prefix}barrier.csv")), &sol.barrier)?;
    for (name, stack) in [("w", &sol.w), ("eta", &sol.eta), ("rho_cum", &sol.rho_cum), ("enthalpy", &sol.enthalpy)] {
        let dir = format!("{prefix}{name}");
        output::write_stack(&w.root.join(&dir), stack, &idx)?;
        w.files.push(format!("{dir}/"));
    }
    Ok(())
}

fn basic_checks(sol: &StefanSolution, tol: &vp::Tolerances) -> Vec<CheckReport> {
    let mut c = vec![
        vp::check_mass_conservation(sol, tol),
        vp::check_complementarity(sol),
        vp::check_saturation(sol, tol),
        vp::check_enthalpy_identities(sol, tol),
        vp::check_active_sets(sol),
    ];
    if sol.kind == StefanType::Freezing {
        c.push(vp::check_extinction(sol));
        if sol.insulated_mismatch.is_some() {
            c.push(vp::check_insulated_domain(sol, tol));
        }
    }
    c
}

fn run_stefan(config: &RunConfig, mode: Mode, w: &mut Writer, manifest: &mut Manifest) -> Result<()> {
    let (setup, op) = setup(config, mode)?;
    let kind = if mode == Mode::Melt { StefanType::Melting } else { StefanType::Freezing };
    let sol = solve(kind, &setup.data, &op)?;
    write_solution(w, "", &sol, config.snapshots)?;
    manifest.masses = masses(&sol);
    manifest.residuals = residuals(&sol);
    manifest.extinction_time = sol.extinction_time;
    manifest.checks = basic_checks(&sol, &config.tolerances);
    Ok(())
}

fn mc_settings(config: &RunConfig, particles: usize) -> McSettings {
    McSettings {
        particles,
        dt: config.mc_dt(),
        seed: config.mc.seed,
        workers: config.mc.workers,
        trace_particles: config.mc.trace,
    }
}

fn run_mc(config: &RunConfig, w: &mut Writer, manifest: &mut Manifest) -> Result<()> {
    let (setup, op) = setup(config, Mode::Mc)?;
    let sol = solve(config.mc.kind, &setup.data, &op)?;
    write_solution(w, "pde_", &sol, config.snapshots)?;
    let mut times = config.mc.probes.clone();
    times.push(sol.horizon());
    let ens = simulate_to_barrier(&BarrierProblem::from_solution(&sol), &mc_settings(config, config.mc.particles), &times)
        .context("particle simulation")?;
    let est = estimate_eulerian(&ens, &times)?;
    for (j, &t) in times.iter().enumerate() {
        let k = (t / sol.dt).round() as usize;
        output::write_field(&w.path(&format!("eta_hat/slice_{k:05}.csv")), &est.eta[j])?;
    }
    output::write_field(&w.path("rho_cum_hat_T.csv"), &est.rho_cum[times.len() - 1])?;
    if !ens.trace.is_empty() {
        let mut text = if sol.grid().dim() == 1 { "t,x,status\n".to_string() } else { "t,x,y,status\n".to_string() };
        for row in &ens.trace {
            let status = if row.active { "active" } else { "stopped" };
            if sol.grid().dim() == 1 {
                text.push_str(&format!("{},{},{status}\n", row.t, row.x[0]));
            } else {
                text.push_str(&format!("{},{},{},{status}\n", row.t, row.x[0], row.x[1]));
            }
        }
        output::write_text(&w.path("trace.csv"), &text)?;
    }
    let total = sol.mu.mass();
    let identity = (0..times.len()).map(|j| (est.total_mass(j) - total).abs()).fold(0.0, f64::max);
    manifest.masses = json!({
        "pde": masses(&sol),
        "mc_eta": est.eta.iter().map(|e| e.integrate()).collect::<Vec<_>>(),
        "mc_rho_cum": est.rho_cum.iter().map(|e| e.integrate()).collect::<Vec<_>>(),
        "mc_tail": est.tail,
        "mc_times": times,
    });
    manifest.residuals = residuals(&sol);
    manifest.extinction_time = sol.extinction_time;
    manifest.checks = vec![
        vp::cross_validate_mc(&sol, &ens, &config.mc.probes, &config.tolerances)?,
        CheckReport::new(
            "mc_mass_identity",
            "particle bookkeeping conserves mass",
            identity / total.max(f64::MIN_POSITIVE),
            1e-12,
            vp::digest(&manifest.masses),
        ),
    ];
    Ok(())
}

fn kind_name(kind: StefanType) -> &'static str {
    match kind {
        StefanType::Freezing => "freeze",
        StefanType::Melting => "melt",
    }
}

/// `μ(2x)`: the same profile shrunk by half.
fn shrunk(mu: &DensityField) -> Result<DensityField> {
    let g = &mu.grid;
    let field = SpaceField::from_fn(g, |x| {
        let y = [2.0 * x[0], if g.dim() == 2 { 2.0 * x[1] } else { 0.0 }];
        g.cell_of(&y).map_or(0.0, |k| mu.values[k])
    });
    Ok(DensityField::new(field)?)
}

fn scaled(mu: &DensityField, c: f64) -> Result<DensityField> {
    Ok(DensityField::new(mu.field().map(|v| c * v))?)
}

fn variant(data: &ProblemData, mu: DensityField) -> ProblemData {
    ProblemData { mu, ..data.clone() }
}

fn run_validate(config: &RunConfig, w: &mut Writer, manifest: &mut Manifest) -> Result<()> {
    let (setup, op) = setup(config, Mode::Validate)?;
    let tol = &config.tolerances;
    let data = &setup.data;
    let small = variant(data, shrunk(&data.mu)?);
    let large = variant(data, scaled(&data.mu, 1.5)?);
    let mut checks = vec![];

    let freeze = solve(StefanType::Freezing, data, &op)?;
    write_solution(w, "freeze_", &freeze, config.snapshots)?;
    let mut kinds = vec![(StefanType::Freezing, freeze)];
    let melt_ok = data.insulated.is_none() && data.validate_melting().is_ok();
    if melt_ok {
        let melt = solve(StefanType::Melting, data, &op)?;
        write_solution(w, "melt_", &melt, config.snapshots)?;
        kinds.push((StefanType::Melting, melt));
    }
    let const_f = data.f.values.iter().all(|&v| v == data.f.values[0]);
    for (kind, sol) in &kinds {
        let mut own = basic_checks(sol, tol);
        own.push(vp::check_weak_residual(sol, &op, tol)?);
        own.push(vp::check_rho_consistency(sol, &op, tol)?);
        if *kind == StefanType::Freezing {
            own.push(vp::check_tail_exponent(sol, &op, tol)?);
        }
        if const_f && sol.grid().dim() == 1 {
            own.push(vp::check_bv_bound(sol, tol)?);
        }
        let small_sol = solve(*kind, &small, &op)?;
        let large_sol = solve(*kind, &large, &op)?;
        own.push(vp::check_l1_contraction(sol, &small_sol, tol)?);
        let mut swapped = vp::check_l1_contraction(&small_sol, sol, tol)?;
        swapped.name.push_str("_swapped");
        own.push(swapped);
        own.push(vp::check_monotonicity(sol, &large_sol, tol)?);
        if config.validate.mc {
            let times: Vec<f64> = config.mc.probes.iter().copied().chain([sol.horizon()]).collect();
            let settings = mc_settings(config, config.mc.particles);
            let ens = simulate_to_barrier(&BarrierProblem::from_solution(sol), &settings, &times)?;
            own.push(vp::cross_validate_mc(sol, &ens, &config.mc.probes, tol)?);
        }
        for c in own.iter_mut() {
            c.name = format!("{}/{}", kind_name(*kind), c.name);
        }
        checks.extend(own);
    }
    if melt_ok {
        checks.push(vp::check_universality(data, &op, tol)?);
    }
    let freeze = &kinds[0].1;
    manifest.masses = json!(kinds.iter().map(|(k, s)| (kind_name(*k).to_string(), masses(s))).collect::<serde_json::Map<_, _>>());
    manifest.residuals = json!(kinds.iter().map(|(k, s)| (kind_name(*k).to_string(), residuals(s))).collect::<serde_json::Map<_, _>>());
    manifest.extinction_time = freeze.extinction_time;
    manifest.checks = checks;
    Ok(())
}

fn run_exit_law(config: &RunConfig, w: &mut Writer, manifest: &mut Manifest) -> Result<()> {
    let grid = config.grid_spec()?;
    let x0 = config.exit_start()?;
    let sampler = StableSampler::new(grid.dim(), config.s)?;
    let law = exit_ball_law(
        &sampler,
        x0,
        config.exit_law.r,
        config.mc.particles,
        config.exit_law.dt,
        config.mc.seed,
        config.mc.workers,
    )?;
    let mut text = if grid.dim() == 1 { "x,tau\n".to_string() } else { "x,y,tau\n".to_string() };
    for (p, t) in law.positions.iter().zip(&law.exit_times) {
        if grid.dim() == 1 {
            text.push_str(&format!("{},{t}\n", p[0]));
        } else {
            text.push_str(&format!("{},{},{t}\n", p[0], p[1]));
        }
    }
    output::write_text(&w.path("exit_positions.csv"), &text)?;
    let mean_tau = law.exit_times.iter().sum::<f64>() / law.exit_times.len() as f64;
    manifest.masses = json!({ "particles": law.samples.len(), "mean_exit_time": mean_tau });
    manifest.residuals = json!({ "ks": law.ks, "reference_mass": law.reference_mass });
    manifest.checks = vec![vp::check_exit_law(&law, &config.tolerances)];
    Ok(())
}

fn run_tail(config: &RunConfig, w: &mut Writer, manifest: &mut Manifest) -> Result<()> {
    config.check_tail()?;
    let grid = config.grid_spec()?;
    let op = build_operator(&grid, config.s)?;
    let sampler = StableSampler::new(grid.dim(), config.s)?;
    let tol = &config.tolerances;
    let t = &config.tail;
    let mut rates = [0.0; 2];
    let mut eigs = [0.0; 2];
    let mut checks = vec![];
    for j in 0..2 {
        let r = t.radii[j];
        let ball = NodeMask((0..grid.node_count()).map(|i| grid.node_radius(i) < r).collect());
        let eig = principal_eigenvalue(&op, &ball)?;
        let fit = survival_tail(&sampler, [0.0; 2], r, config.mc.particles, t.horizons[j], t.dt, config.mc.seed, config.mc.workers)?;
        output::write_columns(&w.path(&format!("survival_r{r}.csv")), ["t", "value"], fit.times.iter().copied().zip(fit.survival.iter().copied()))?;
        checks.push(vp::check_tail_rate(&fit, &eig, tol));
        rates[j] = fit.rate;
        eigs[j] = eig.lambda;
    }
    checks.push(vp::check_scaling("tail_rate_scaling", rates, t.radii, config.s, tol.tail_scaling));
    checks.push(vp::check_scaling("eigenvalue_scaling", eigs, t.radii, config.s, tol.eigen_scaling));
    manifest.masses = json!({ "particles": config.mc.particles });
    manifest.residuals = json!({ "rates": rates, "eigenvalues": eigs });
    manifest.checks = checks;
    Ok(())
}
