//! Run configuration (TOML), experiment presets and validation.

use crate::error::{IbError, Result};
use crate::fluid::{FluidParams, SolverOptions};
use crate::geom::{ellipse_points, max_spacing, Vec2};
use crate::mesh::GridSpec;
use crate::rbfgeom::{default_epsilon, RbfConfig};
use crate::stepper::{LinkPolicy, Method};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    #[serde(default = "one")]
    pub lx: f64,
    #[serde(default = "one")]
    pub ly: f64,
}

fn one() -> f64 {
    1.0
}

impl GridConfig {
    pub fn square(n: usize) -> Self {
        GridConfig { nx: n, ny: n, lx: 1.0, ly: 1.0 }
    }

    pub fn spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.nx, self.ny, self.lx, self.ly)
    }
}

/// Background flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Flow {
    /// No body force.
    #[default]
    None,
    /// Constant body force driving a parabolic profile of peak `u_max`.
    Poiseuille,
}

/// Initial velocity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Initial {
    #[default]
    Rest,
    /// The analytic parabola `4 u_max y (Ly - y) / Ly²`.
    Parabola,
    /// The discrete steady state of the Poiseuille problem.
    DiscreteSteady,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidConfig {
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_u_max")]
    pub u_max: f64,
    #[serde(default)]
    pub flow: Flow,
    #[serde(default)]
    pub initial: Initial,
}

fn default_rho() -> f64 {
    1.0
}
fn default_mu() -> f64 {
    8.0
}
fn default_u_max() -> f64 {
    5.0
}

impl Default for FluidConfig {
    fn default() -> Self {
        FluidConfig { rho: 1.0, mu: 8.0, u_max: 5.0, flow: Flow::None, initial: Initial::Rest }
    }
}

impl FluidConfig {
    pub fn params(&self, ly: f64) -> FluidParams {
        let body_force = match self.flow {
            Flow::None => [0.0, 0.0],
            Flow::Poiseuille => FluidParams::poiseuille_force(self.mu, self.u_max, ly),
        };
        FluidParams { rho: self.rho, mu: self.mu, body_force }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
}

impl TimeConfig {
    /// Number of steps to take; `t_end` is rounded to the nearest step.
    pub fn n_steps(&self) -> u64 {
        match (self.steps, self.t_end) {
            (Some(n), _) => n,
            (None, Some(t)) => (t / self.dt).round() as u64,
            (None, None) => 0,
        }
    }
}

/// Membrane discretization and stiffness, shared by all platelets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureConfig {
    #[serde(default = "default_n_s")]
    pub n_s: usize,
    #[serde(default = "default_n_d")]
    pub n_d: usize,
    /// Shape parameter; 1.2 for `n_d ≤ 50` and 2.0 above when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub k_t: f64,
    pub k_b: f64,
}

fn default_n_s() -> usize {
    50
}
fn default_n_d() -> usize {
    25
}

impl StructureConfig {
    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or_else(|| default_epsilon(self.n_d))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateletSpec {
    pub center: [f64; 2],
    pub a: f64,
    pub b: f64,
    /// Rotation of the major axis from the x-axis, radians.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub angle: f64,
    /// Rest shape is a circle of this radius when set, else the initial ellipse.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rest_radius: Option<f64>,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

impl PlateletSpec {
    /// Initial points at parameter values `2πk/n`.
    pub fn initial_points(&self, n: usize) -> Vec<Vec2> {
        let c = Vec2::new(self.center[0], self.center[1]);
        ellipse_points(Vec2::ZERO, self.a, self.b, n).into_iter().map(|p| c + p.rotate(self.angle)).collect()
    }

    pub fn rest_points(&self, n: usize) -> Vec<Vec2> {
        match self.rest_radius {
            Some(r) => {
                let c = Vec2::new(self.center[0], self.center[1]);
                ellipse_points(Vec2::ZERO, r, r, n).into_iter().map(|p| c + p.rotate(self.angle)).collect()
            }
            None => self.initial_points(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Output directory; relative paths resolve against the output root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Snapshot every this many steps (0 disables periodic snapshots); the final state is
    /// always written when snapshots are on.
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: u64,
    #[serde(default = "default_true")]
    pub snapshots: bool,
    /// Write a series row every this many steps (0 disables).
    #[serde(default = "default_series_every")]
    pub series_every: u64,
    #[serde(default)]
    pub track_energy: bool,
    #[serde(default)]
    pub track_area: bool,
    /// Remove platelets whose centroid passes this x-coordinate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_x: Option<f64>,
}

fn default_snapshot_every() -> u64 {
    100
}
fn default_series_every() -> u64 {
    100
}
fn default_true() -> bool {
    true
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: None,
            snapshot_every: 100,
            snapshots: true,
            series_every: 100,
            track_energy: false,
            track_area: false,
            exit_x: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    pub grid: GridConfig,
    #[serde(default)]
    pub fluid: FluidConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub solver: SolverOptions,
    pub structure: StructureConfig,
    #[serde(default)]
    pub platelets: Vec<PlateletSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub links: Option<LinkPolicy>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_name() -> String {
    "run".to_string()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| IbError::Config(vec![e.to_string()]))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig always serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn rbf_config(&self) -> Result<RbfConfig> {
        RbfConfig::new(self.structure.n_d, self.structure.n_s, self.structure.epsilon())
    }

    /// Number of tracked points per platelet.
    pub fn tracked_points(&self) -> usize {
        match self.method {
            Method::PlIb => self.structure.n_s,
            Method::RbfIb => self.structure.n_d,
        }
    }

    /// Checks everything and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let grid = match self.grid.spec() {
            Ok(g) => Some(g),
            Err(e) => {
                errs.push(format!("grid: {e}"));
                None
            }
        };
        if !(self.fluid.u_max > 0.0 && self.fluid.u_max.is_finite()) {
            errs.push(format!("fluid.u_max must be positive (got {})", self.fluid.u_max));
        }
        errs.extend(self.fluid.params(self.grid.ly).validate());
        if !(self.time.dt > 0.0 && self.time.dt.is_finite()) {
            errs.push(format!("time.dt must be positive (got {})", self.time.dt));
        }
        match (self.time.t_end, self.time.steps) {
            (Some(_), Some(_)) => errs.push("time: give t_end or steps, not both".into()),
            (None, None) => errs.push("time: one of t_end or steps is required".into()),
            (Some(t), None) if !(t >= 0.0 && t.is_finite()) => {
                errs.push(format!("time.t_end must be non-negative (got {t})"))
            }
            _ => {}
        }
        if !(self.solver.rel_tol > 0.0 && self.solver.rel_tol < 1.0) {
            errs.push(format!("solver.rel_tol must lie in (0, 1) (got {})", self.solver.rel_tol));
        }
        if self.solver.max_iter == 0 {
            errs.push("solver.max_iter must be positive".into());
        }
        let s = &self.structure;
        if !(s.k_t >= 0.0 && s.k_t.is_finite()) {
            errs.push(format!("structure.k_t must be non-negative (got {})", s.k_t));
        }
        if !(s.k_b >= 0.0 && s.k_b.is_finite()) {
            errs.push(format!("structure.k_b must be non-negative (got {})", s.k_b));
        }
        if s.n_s < 3 {
            errs.push(format!("structure.n_s must be at least 3 (got {})", s.n_s));
        }
        if self.method == Method::RbfIb {
            let c = RbfConfig { n_d: s.n_d, n_s: s.n_s, epsilon: s.epsilon() };
            errs.extend(c.validate().into_iter().map(|e| format!("structure: {e}")));
            if s.n_d >= s.n_s {
                errs.push(format!("structure: n_d = {} must be below n_s = {}", s.n_d, s.n_s));
            }
        }
        for (k, p) in self.platelets.iter().enumerate() {
            if !(p.a > 0.0 && p.b > 0.0) {
                errs.push(format!("platelets[{k}]: radii must be positive"));
            }
            if let Some(r) = p.rest_radius {
                if !(r > 0.0) {
                    errs.push(format!("platelets[{k}].rest_radius must be positive"));
                }
            }
            if let Some(g) = grid {
                let ext = (p.a * p.angle.sin()).hypot(p.b * p.angle.cos());
                let y = p.center[1];
                if !(y - ext > 0.0 && y + ext < g.ly) {
                    errs.push(format!("platelets[{k}] at {:?} crosses a wall", p.center));
                }
            }
        }
        if let Some(l) = &self.links {
            errs.extend(l.validate());
        }
        if self.output.exit_x.is_some_and(|x| !x.is_finite()) {
            errs.push("output.exit_x must be finite".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(IbError::Config(errs))
        }
    }

    /// Non-fatal findings, such as sample sites more than half a cell apart.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let Ok(g) = self.grid.spec() else { return out };
        for (k, p) in self.platelets.iter().enumerate() {
            let sp = max_spacing(&p.initial_points(self.structure.n_s)).max(max_spacing(&p.rest_points(self.structure.n_s)));
            if sp > 0.5 * g.h {
                out.push(format!(
                    "platelets[{k}]: sample spacing {:.3} h exceeds 0.5 h; fluid may leak between points",
                    sp / g.h
                ));
            }
        }
        out
    }
}

/// Stiffness used for the ellipse-to-circle test.
pub const FSI_K_T: f64 = 1.0e4;
pub const FSI_K_B: f64 = 1.0;
/// Stiffness used for platelet-like shapes.
pub const PLATELET_K_T: f64 = 1.0e4;
pub const PLATELET_K_B: f64 = 1.0;
/// Cohesion stiffness and bind radius for the aggregation scenario.
pub const AGGREGATION_K_C: f64 = 1.0e5;
pub const AGGREGATION_BIND_RADIUS: f64 = 0.03;

/// Ellipse `a = 2r, b = r/2` (r = 0.1) centred in the unit square, relaxing to a circle of
/// radius `r`, fluid initially at rest.
pub fn fsi_preset(method: Method, n: usize, n_s: usize, n_d: usize, dt: f64) -> RunConfig {
    let r = 0.1;
    RunConfig {
        name: format!("fsi-{method}-{n}"),
        method,
        seed: 0,
        grid: GridConfig::square(n),
        fluid: FluidConfig::default(),
        time: TimeConfig { dt, t_end: Some(2.0), steps: None },
        solver: SolverOptions::default(),
        structure: StructureConfig { n_s, n_d, epsilon: None, k_t: FSI_K_T, k_b: FSI_K_B },
        platelets: vec![PlateletSpec { center: [0.5, 0.5], a: 2.0 * r, b: 0.5 * r, angle: 0.0, rest_radius: Some(r) }],
        links: None,
        output: OutputConfig::default(),
    }
}

/// Poiseuille start-up from the analytic parabola, fluid only.
pub fn fluid_preset(n: usize, dt: f64) -> RunConfig {
    RunConfig {
        name: format!("fluid-{n}"),
        method: Method::PlIb,
        seed: 0,
        grid: GridConfig::square(n),
        fluid: FluidConfig { flow: Flow::Poiseuille, initial: Initial::Parabola, ..FluidConfig::default() },
        time: TimeConfig { dt, t_end: Some(1.0), steps: None },
        solver: SolverOptions::default(),
        structure: StructureConfig { n_s: 50, n_d: 25, epsilon: None, k_t: 0.0, k_b: 0.0 },
        platelets: Vec::new(),
        links: None,
        output: OutputConfig::default(),
    }
}

/// `count` platelet ellipses (`a = 0.1, b = 0.025`, keeping their shape) in Poiseuille flow at
/// the left end of a `[0, 2] × [0, 1]` channel, removed past `x = 1.9`. Centres lie on a lattice
/// with a small seeded jitter.
pub fn platelet_preset(method: Method, nx: usize, count: usize, dt: f64, seed: u64) -> RunConfig {
    let (a, b) = (0.1, 0.025);
    let rows = 10usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut platelets = Vec::with_capacity(count);
    for k in 0..count {
        let (c, r) = (k / rows, k % rows);
        let x = 0.15 + 0.24 * c as f64 + rng.random_range(-0.01..0.01);
        let y = 0.05 + 0.09 * r as f64 + 0.045 + rng.random_range(-0.008..0.008);
        platelets.push(PlateletSpec { center: [x, y], a, b, angle: 0.0, rest_radius: None });
    }
    RunConfig {
        name: format!("platelets-{method}-{count}"),
        method,
        seed,
        grid: GridConfig { nx, ny: nx / 2, lx: 2.0, ly: 1.0 },
        fluid: FluidConfig { flow: Flow::Poiseuille, initial: Initial::DiscreteSteady, ..FluidConfig::default() },
        time: TimeConfig { dt, t_end: None, steps: Some(10_000) },
        solver: SolverOptions::default(),
        structure: StructureConfig { n_s: 100, n_d: 25, epsilon: None, k_t: PLATELET_K_T, k_b: PLATELET_K_B },
        platelets,
        links: None,
        output: OutputConfig { exit_x: Some(1.9), ..OutputConfig::default() },
    }
}

/// Shape-keeping platelets in Poiseuille flow on the unit square, used for stability searches.
pub fn platelet_stability_preset(method: Method, n: usize, dt: f64) -> RunConfig {
    let (a, b) = (0.1, 0.025);
    let centers = [[0.3, 0.3], [0.5, 0.5], [0.7, 0.7]];
    RunConfig {
        name: format!("platelet-stability-{method}-{n}"),
        method,
        seed: 0,
        grid: GridConfig::square(n),
        fluid: FluidConfig { flow: Flow::Poiseuille, initial: Initial::DiscreteSteady, ..FluidConfig::default() },
        time: TimeConfig { dt, t_end: Some(0.5), steps: None },
        solver: SolverOptions::default(),
        structure: StructureConfig { n_s: 100, n_d: 25, epsilon: None, k_t: PLATELET_K_T, k_b: PLATELET_K_B },
        platelets: centers
            .iter()
            .map(|&center| PlateletSpec { center, a, b, angle: 0.0, rest_radius: None })
            .collect(),
        links: None,
        output: OutputConfig::default(),
    }
}

/// Eight platelets forming an aggregate on the adhesive band `0.4 ≤ x ≤ 0.7` of the lower wall.
pub fn aggregation_preset() -> RunConfig {
    let centers = [
        [0.5, 0.02],
        [0.64, 0.02],
        [0.78, 0.02],
        [0.55, 0.07],
        [0.68, 0.07],
        [0.4, 0.045],
        [0.23, 0.045],
        [0.65, 0.14],
    ];
    RunConfig {
        name: "aggregation".into(),
        method: Method::RbfIb,
        seed: 0,
        grid: GridConfig { nx: 128, ny: 64, lx: 2.0, ly: 1.0 },
        fluid: FluidConfig { flow: Flow::Poiseuille, initial: Initial::DiscreteSteady, ..FluidConfig::default() },
        time: TimeConfig { dt: 1e-4, t_end: Some(2.4), steps: None },
        solver: SolverOptions::default(),
        structure: StructureConfig { n_s: 100, n_d: 50, epsilon: None, k_t: PLATELET_K_T, k_b: PLATELET_K_B },
        platelets: centers
            .iter()
            .map(|&center| PlateletSpec { center, a: 0.06, b: 0.015, angle: 0.0, rest_radius: None })
            .collect(),
        links: Some(LinkPolicy {
            bind_radius: AGGREGATION_BIND_RADIUS,
            max_links_per_platelet: 10,
            max_links_per_partner: 3,
            wall_band: [0.4, 0.7],
            break_strain: 1.0,
            k_c: AGGREGATION_K_C,
            allow_crossing: true,
        }),
        output: OutputConfig { exit_x: Some(1.9), ..OutputConfig::default() },
    }
}

/// Presets addressable by name from the command line.
pub fn named_preset(name: &str) -> Option<RunConfig> {
    Some(match name {
        "fsi-pl" => fsi_preset(Method::PlIb, 32, 50, 25, 2e-4),
        "fsi-rbf" => fsi_preset(Method::RbfIb, 32, 50, 25, 2e-4),
        "fluid" => fluid_preset(32, 5e-3),
        "platelets-pl" => platelet_preset(Method::PlIb, 128, 15, 1e-4, 0),
        "platelets-rbf" => platelet_preset(Method::RbfIb, 128, 15, 1e-4, 0),
        "aggregation" => aggregation_preset(),
        _ => return None,
    })
}

pub const PRESET_NAMES: [&str; 6] = ["fsi-pl", "fsi-rbf", "fluid", "platelets-pl", "platelets-rbf", "aggregation"];

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESET_NAMES {
            let c = named_preset(name).unwrap();
            c.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            let back = RunConfig::from_toml(&c.to_toml()).unwrap();
            assert_eq!(back, c, "{name}");
        }
        for count in [15, 30, 60] {
            platelet_preset(Method::RbfIb, 128, count, 1e-4, 7).validate().unwrap();
        }
    }

    #[test]
    fn negative_viscosity_is_named() {
        let mut c = fsi_preset(Method::PlIb, 32, 50, 25, 2e-4);
        c.fluid.mu = -1.0;
        c.time.dt = 0.0;
        let Err(IbError::Config(errs)) = c.validate() else { panic!("expected config error") };
        assert!(errs.iter().any(|e| e.contains("fluid.mu")));
        assert!(errs.iter().any(|e| e.contains("time.dt")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = fsi_preset(Method::PlIb, 32, 50, 25, 2e-4).to_toml();
        text.push_str("\nbogus = 1\n");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn defaults_fill_in() {
        let text = r#"
method = "rbf-ib"
[grid]
nx = 32
ny = 32
[time]
dt = 1e-4
steps = 10
[structure]
k_t = 1.0
k_b = 0.0
"#;
        let c = RunConfig::from_toml(text).unwrap();
        assert_eq!((c.fluid.rho, c.fluid.mu, c.fluid.u_max), (1.0, 8.0, 5.0));
        assert_eq!((c.structure.n_s, c.structure.n_d, c.structure.epsilon()), (50, 25, 1.2));
        assert_eq!(c.output.snapshot_every, 100);
        assert_eq!(c.time.n_steps(), 10);
        c.validate().unwrap();
    }

    #[test]
    fn coarse_sampling_warns() {
        let mut c = fsi_preset(Method::PlIb, 128, 50, 25, 1e-4);
        assert!(!c.warnings().is_empty());
        c.structure.n_s = 400;
        assert!(c.warnings().is_empty());
    }

    #[test]
    fn platelet_preset_is_seeded() {
        let a = platelet_preset(Method::PlIb, 128, 30, 1e-4, 3);
        let b = platelet_preset(Method::PlIb, 128, 30, 1e-4, 3);
        let c = platelet_preset(Method::PlIb, 128, 30, 1e-4, 4);
        assert_eq!(a, b);
        assert_ne!(a.platelets, c.platelets);
    }

    proptest! {
        #[test]
        fn config_round_trip(dt in 1e-6f64..1e-2, mu in 0.1f64..100.0, nd in 8usize..40, k in 0.0f64..1e4, x in 0.2f64..0.8) {
            let mut c = fsi_preset(Method::RbfIb, 32, 80, nd, dt);
            c.fluid.mu = mu;
            c.structure.k_t = k;
            c.platelets[0].center[0] = x;
            c.structure.epsilon = Some(mu / 10.0);
            let back = RunConfig::from_toml(&c.to_toml()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
