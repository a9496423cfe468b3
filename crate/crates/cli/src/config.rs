//! Run configuration: JSON schema, defaults and validation.

use std::path::{Path, PathBuf};

use fracstefan::grid::{DensityField, GridSpec, NodeMask, SpaceField};
use fracstefan::stefan::{ProblemData, StefanType};
use fracstefan::valprops::Tolerances;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Melt,
    Freeze,
    Mc,
    Validate,
    ExitLaw,
    Tail,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Melt => "melt",
            Mode::Freeze => "freeze",
            Mode::Mc => "mc",
            Mode::Validate => "validate",
            Mode::ExitLaw => "exit-law",
            Mode::Tail => "tail",
        }
    }

    /// Modes that run a Stefan pipeline and so need a transient process.
    pub fn needs_potentials(self) -> bool {
        matches!(self, Mode::Melt | Mode::Freeze | Mode::Mc | Mode::Validate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub d: usize,
    #[serde(rename = "L")]
    pub half_width: f64,
    pub n: usize,
    pub c_ext: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { d: 1, half_width: 4.0, n: 512, c_ext: 3.0 }
    }
}

/// Axis-aligned open box `lo < x < hi` carrying a constant value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    #[serde(default)]
    pub value: f64,
}

impl Segment {
    fn contains(&self, x: &[f64]) -> bool {
        self.lo.iter().zip(&self.hi).zip(x).all(|((lo, hi), v)| lo < v && v < hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `2 χ` of the unit box.
    Benchmark,
    /// `2 χ` of the box of half-width 1/2.
    Small,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MuSpec {
    Preset(Preset),
    /// Later segments overwrite earlier ones.
    Segments(Vec<Segment>),
}

impl Default for MuSpec {
    fn default() -> Self {
        MuSpec::Preset(Preset::Benchmark)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiecewiseF {
    pub background: f64,
    pub pieces: Vec<Segment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FSpec {
    Constant(f64),
    /// `f = 1 - χ_G` with `G` the given box, which also becomes the insulated set.
    OneMinusIndicator(Segment),
    Piecewise(PiecewiseF),
}

impl Default for FSpec {
    fn default() -> Self {
        FSpec::Constant(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    #[serde(rename = "N")]
    pub particles: usize,
    /// Defaults to a quarter of the PDE step.
    pub dt: Option<f64>,
    pub seed: u64,
    pub workers: Option<usize>,
    /// Which pipeline the `mc` mode cross-checks.
    pub kind: StefanType,
    pub probes: Vec<f64>,
    pub trace: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            particles: 100_000,
            dt: None,
            seed: 42,
            workers: None,
            kind: StefanType::Melting,
            probes: vec![0.25, 0.5, 1.0],
            trace: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExitLawConfig {
    pub r: f64,
    pub x0: Vec<f64>,
    pub dt: f64,
}

impl Default for ExitLawConfig {
    fn default() -> Self {
        ExitLawConfig { r: 1.0, x0: vec![], dt: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailConfig {
    pub radii: [f64; 2],
    pub horizons: [f64; 2],
    pub dt: f64,
}

impl Default for TailConfig {
    fn default() -> Self {
        TailConfig { radii: [1.0, 2.0], horizons: [5.0, 9.0], dt: 1e-3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    /// Also run the particle cross-check (slow).
    pub mc: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub grid: GridConfig,
    pub s: f64,
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub mu: MuSpec,
    pub f: FSpec,
    pub mc: McConfig,
    pub exit_law: ExitLawConfig,
    pub tail: TailConfig,
    pub validate: ValidateConfig,
    pub out: Option<PathBuf>,
    /// Number of time slices written per space-time field (first and last included).
    pub snapshots: usize,
    pub tolerances: Tolerances,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: None,
            grid: GridConfig::default(),
            s: 0.4,
            dt: 1.0 / 256.0,
            horizon: 2.0,
            mu: MuSpec::default(),
            f: FSpec::default(),
            mc: McConfig::default(),
            exit_law: ExitLawConfig::default(),
            tail: TailConfig::default(),
            validate: ValidateConfig::default(),
            out: None,
            snapshots: 9,
            tolerances: Tolerances::default(),
        }
    }
}

/// A configuration problem, located by its field path.
#[derive(Debug)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error at `{}`: {}", self.path, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { path: path.into(), message: message.into() }
}

/// Parses a JSON document; unknown or mistyped fields are reported with their path.
pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        err(if path.is_empty() { "." } else { &path }, e.into_inner().to_string())
    })
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| err(".", format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

/// Everything a Stefan-mode run needs, built from a validated config.
pub struct Setup {
    pub grid: GridSpec,
    pub data: ProblemData,
}

impl RunConfig {
    pub fn grid_spec(&self) -> Result<GridSpec, ConfigError> {
        let g = &self.grid;
        GridSpec::new(g.d, g.half_width, g.n, g.c_ext).map_err(|e| err("grid", e.to_string()))
    }

    fn check_segments(&self, path: &str, segs: &[Segment]) -> Result<(), ConfigError> {
        for (i, s) in segs.iter().enumerate() {
            if s.lo.len() != self.grid.d || s.hi.len() != self.grid.d {
                return Err(err(&format!("{path}[{i}]"), format!("lo and hi need {} coordinates", self.grid.d)));
            }
            if !s.value.is_finite() || s.value < 0.0 {
                return Err(err(&format!("{path}[{i}].value"), "values must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    pub fn mu_field(&self, grid: &GridSpec) -> Result<DensityField, ConfigError> {
        let segs = match &self.mu {
            MuSpec::Preset(p) => {
                let a = match p {
                    Preset::Benchmark => 1.0,
                    Preset::Small => 0.5,
                };
                vec![Segment { lo: vec![-a; grid.dim()], hi: vec![a; grid.dim()], value: 2.0 }]
            }
            MuSpec::Segments(s) => {
                self.check_segments("mu.segments", s)?;
                s.clone()
            }
        };
        let field = SpaceField::from_fn(grid, |x| {
            segs.iter().rev().find(|s| s.contains(x)).map_or(0.0, |s| s.value)
        });
        DensityField::new(field).map_err(|e| err("mu", e.to_string()))
    }

    /// Capacity `f` and the insulated set it implies.
    pub fn f_field(&self, grid: &GridSpec) -> Result<(SpaceField, Option<NodeMask>), ConfigError> {
        match &self.f {
            FSpec::Constant(c) => {
                if !(c.is_finite() && *c >= 0.0) {
                    return Err(err("f.constant", "f must be finite and nonnegative"));
                }
                Ok((SpaceField::from_fn(grid, |_| *c), None))
            }
            FSpec::OneMinusIndicator(g) => {
                self.check_segments("f.one_minus_indicator", std::slice::from_ref(g))?;
                let mask = NodeMask(grid.nodes().map(|x| g.contains(&x)).collect());
                let f = SpaceField::from_fn(grid, |x| if g.contains(x) { 0.0 } else { 1.0 });
                Ok((f, if mask.is_empty() { None } else { Some(mask) }))
            }
            FSpec::Piecewise(p) => {
                self.check_segments("f.piecewise.pieces", &p.pieces)?;
                if !(p.background.is_finite() && p.background >= 0.0) {
                    return Err(err("f.piecewise.background", "f must be finite and nonnegative"));
                }
                let f = SpaceField::from_fn(grid, |x| {
                    p.pieces.iter().rev().find(|s| s.contains(x)).map_or(p.background, |s| s.value)
                });
                Ok((f, None))
            }
        }
    }

    /// Checks every field the mode uses and builds the problem data.
    pub fn setup(&self, mode: Mode) -> Result<Setup, ConfigError> {
        if !(self.s > 0.0 && self.s < 1.0) {
            return Err(err("s", format!("s must lie in (0, 1), got {}", self.s)));
        }
        if mode.needs_potentials() && self.grid.d == 1 && self.s >= 0.5 {
            return Err(err(
                "s",
                format!("transience violated: d = 1 needs s < 1/2 for the Riesz potentials, got s = {}", self.s),
            ));
        }
        let grid = self.grid_spec()?;
        if self.snapshots < 2 {
            return Err(err("snapshots", "need at least 2 snapshots"));
        }
        let mu = self.mu_field(&grid)?;
        let (f, insulated) = self.f_field(&grid)?;
        let mut data = ProblemData::new(mu, f, self.s, self.dt, self.horizon).map_err(|e| {
            let msg = e.to_string();
            if msg.contains("horizon") {
                err("T", msg)
            } else {
                err("dt", msg)
            }
        })?;
        if let Some(g) = insulated {
            data = data.with_insulated(g);
        }
        data.validate_freezing().map_err(|e| err("f", e.to_string()))?;
        let melting = match mode {
            Mode::Melt => true,
            Mode::Mc => self.mc.kind == StefanType::Melting,
            _ => false,
        };
        if melting {
            if data.insulated.is_some() {
                return Err(err("f", "insulated sets apply to freezing runs only"));
            }
            data.validate_melting().map_err(|e| err("mu", e.to_string()))?;
        }
        if mode == Mode::Mc || (mode == Mode::Validate && self.validate.mc) {
            self.check_mc()?;
        }
        Ok(Setup { grid, data })
    }

    pub fn mc_dt(&self) -> f64 {
        self.mc.dt.unwrap_or(self.dt / 4.0)
    }

    fn check_mc(&self) -> Result<(), ConfigError> {
        if self.mc.particles == 0 {
            return Err(err("mc.N", "need at least one particle"));
        }
        let ratio = self.dt / self.mc_dt();
        if !(ratio >= 1.0 && (ratio - ratio.round()).abs() <= 1e-9 * ratio) {
            return Err(err("mc.dt", format!("the simulation step must divide dt = {}", self.dt)));
        }
        for (i, &t) in self.mc.probes.iter().enumerate() {
            let k = t / self.dt;
            if !(t >= 0.0 && t <= self.horizon && (k - k.round()).abs() <= 1e-9 * k.max(1.0)) {
                return Err(err(&format!("mc.probes[{i}]"), format!("{t} is not a time slice in [0, T]")));
            }
        }
        if self.mc.workers == Some(0) {
            return Err(err("mc.workers", "need at least one worker"));
        }
        Ok(())
    }

    /// Start point of the exit-law run, padded to two coordinates.
    pub fn exit_start(&self) -> Result<[f64; 2], ConfigError> {
        let x = &self.exit_law.x0;
        if x.len() > self.grid.d {
            return Err(err("exit_law.x0", format!("at most {} coordinates", self.grid.d)));
        }
        let mut p = [0.0; 2];
        p[..x.len()].copy_from_slice(x);
        if !(self.exit_law.r > 0.0) || p[0].hypot(p[1]) >= self.exit_law.r {
            return Err(err("exit_law", "need r > 0 and |x0| < r"));
        }
        if !(self.exit_law.dt > 0.0) {
            return Err(err("exit_law.dt", "must be positive"));
        }
        Ok(p)
    }

    pub fn check_tail(&self) -> Result<(), ConfigError> {
        let t = &self.tail;
        if !(t.radii[0] > 0.0 && t.radii[1] > t.radii[0]) {
            return Err(err("tail.radii", "need 0 < r1 < r2"));
        }
        if t.radii[1] >= self.grid.half_width {
            return Err(err("tail.radii", "the larger ball must fit inside the grid box"));
        }
        if !(t.dt > 0.0) || t.horizons.iter().any(|h| !(*h > 0.0)) {
            return Err(err("tail", "dt and horizons must be positive"));
        }
        Ok(())
    }
}
