use fracstefan::fracops::{build_operator, principal_eigenvalue};
use fracstefan::grid::{DensityField, GridSpec, NodeMask, SpaceField};
use fracstefan::mc::{
    estimate_eulerian, exit_ball_law, simulate_to_barrier, survival_tail, BarrierProblem, ExitReference, McSettings,
    StableSampler,
};
use fracstefan::stefan::{solve_freezing_with, solve_melting_with, ProblemData};
use fracstefan::valprops::{cross_validate_mc, Tolerances};
use statrs::function::beta::beta_reg;

const S: f64 = 0.4;

#[test]
fn off_centre_exit_law_matches_the_reference() {
    let sampler = StableSampler::new(1, S).unwrap();
    let law = exit_ball_law(&sampler, [0.4, 0.0], 1.0, 20_000, 1e-3, 5, None).unwrap();
    // Small step, moderate sample: the KS statistic sits near its sampling noise.
    assert!(law.ks < 0.03, "ks {}", law.ks);
    assert!(law.samples.iter().all(|y| y.abs() >= 1.0));
    assert!((law.reference_mass - 1.0).abs() < 1e-9);
}

#[test]
fn planar_exit_radius_follows_the_beta_law() {
    // From the centre the exit radius R has P(R <= ρ) = I_{1 - 1/ρ²}(1 - s, s) in any dimension.
    let reference = ExitReference::new(2, S, 1.0, [0.0, 0.0]).unwrap();
    for rho in [1.01, 1.5, 3.0, 20.0] {
        let exact = beta_reg(1.0 - S, S, 1.0 - 1.0 / (rho * rho));
        assert!((reference.cdf(rho) - exact).abs() < 1e-8, "rho {rho}");
    }
    let sampler = StableSampler::new(2, S).unwrap();
    let law = exit_ball_law(&sampler, [0.0, 0.0], 1.0, 10_000, 1e-3, 3, None).unwrap();
    assert!(law.ks < 0.04, "ks {}", law.ks);
}

#[test]
fn survival_rate_tracks_the_discrete_eigenvalue() {
    let grid = GridSpec::line(2.0, 256).unwrap();
    let op = build_operator(&grid, S).unwrap();
    let ball = NodeMask(grid.nodes().map(|p| p[0].abs() < 1.0).collect());
    let lambda = principal_eigenvalue(&op, &ball).unwrap().lambda;
    let fit = survival_tail(&StableSampler::new(1, S).unwrap(), [0.0, 0.0], 1.0, 40_000, 4.0, 2e-3, 11, None).unwrap();
    assert!((fit.rate - lambda).abs() <= 0.1 * lambda, "rate {} vs {lambda}", fit.rate);
}

fn setup(n: usize) -> ProblemData {
    let grid = GridSpec::new(1, 4.0, n, 3.0).unwrap();
    let mu = DensityField::new(SpaceField::from_fn(&grid, |x| if x[0].abs() < 1.0 { 2.0 } else { 0.0 })).unwrap();
    ProblemData::new(mu, SpaceField::from_fn(&grid, |_| 1.0), S, 1.0 / 64.0, 1.0).unwrap()
}

#[test]
fn particles_reproduce_both_pipelines_on_a_coarse_grid() {
    let data = setup(128);
    let op = build_operator(data.grid(), S).unwrap();
    let tol = Tolerances { mc: 0.1, ..Tolerances::default() };
    for sol in [solve_melting_with(&data, &op).unwrap(), solve_freezing_with(&data, &op).unwrap()] {
        let settings = McSettings::new(40_000, 1.0 / 256.0, 9);
        let ens = simulate_to_barrier(&BarrierProblem::from_solution(&sol), &settings, &[0.5, 1.0]).unwrap();
        let est = estimate_eulerian(&ens, &[0.5, 1.0]).unwrap();
        for j in 0..2 {
            assert!((est.total_mass(j) - sol.mu.mass()).abs() < 1e-12 * sol.mu.mass());
        }
        let r = cross_validate_mc(&sol, &ens, &[0.5], &tol).unwrap();
        assert!(r.pass, "{:?}: {}", sol.kind, r.metric);
    }
}
