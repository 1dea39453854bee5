//! Building a [`Simulation`] from a [`RunConfig`] and driving it to the end time.

use crate::config::{Initial, RunConfig};
use crate::error::{IbError, Result};
use crate::fluid::{FluidSolver, SolverStats};
use crate::geom::Vec2;
use crate::mesh::FluidState;
use crate::metrics::{area_fit_markers, area_operators, area_with, profile_counters, Profile};
use crate::rbfgeom::{build_operators, RbfOperators};
use crate::snapshot::SnapshotFile;
use crate::stepper::{Counters, Method, Platelet, PlateletPl, PlateletRbf, Simulation};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

/// Builds the initial state described by `cfg`. The config is validated first.
pub fn build_simulation(cfg: &RunConfig) -> Result<Simulation> {
    cfg.validate()?;
    let grid = cfg.grid.spec()?;
    let params = cfg.fluid.params(grid.ly);
    let solver = FluidSolver::new(grid, params, cfg.solver)?;
    let (u_max, ly) = (cfg.fluid.u_max, grid.ly);
    let fluid = match cfg.fluid.initial {
        Initial::Rest => FluidState::zeros(&grid),
        Initial::Parabola => FluidState::from_fn(&grid, |_, y| 4.0 * u_max * y * (ly - y) / (ly * ly), |_, _| 0.0),
        Initial::DiscreteSteady => solver.steady_channel_flow(),
    };
    let s = &cfg.structure;
    let ops = match cfg.method {
        Method::RbfIb if !cfg.platelets.is_empty() => Some(Arc::new(build_operators(&cfg.rbf_config()?)?)),
        _ => None,
    };
    let n = cfg.tracked_points();
    let mut platelets = Vec::with_capacity(cfg.platelets.len());
    for (k, spec) in cfg.platelets.iter().enumerate() {
        let x = spec.initial_points(n);
        let rest = spec.rest_points(n);
        let p = match &ops {
            None => Platelet::Pl(PlateletPl::new(k as u64, x, &rest, s.k_t, s.k_b)?),
            Some(ops) => Platelet::Rbf(PlateletRbf::new(k as u64, x, &rest, ops.clone(), s.k_t, s.k_b)?),
        };
        platelets.push((p, rest));
    }
    let mut sim = Simulation::new(solver, fluid, platelets, cfg.time.dt, u_max)?;
    sim.policy = cfg.links;
    sim.exit_x = cfg.output.exit_x;
    sim.track_energy = cfg.output.track_energy;
    Ok(sim)
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    BlowUp { step: u64, time: f64, reason: String },
    SolverFailure { step: u64, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub method: Method,
    pub status: RunStatus,
    pub steps: u64,
    pub time: f64,
    pub platelets: usize,
    pub links: usize,
    pub counters: Counters,
    pub solver: SolverStats,
    pub profile: Profile,
    pub warnings: Vec<String>,
}

/// One row of the per-run series CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub step: u64,
    pub time: f64,
    pub max_velocity: f64,
    pub kinetic: f64,
    /// Per-step energy change; empty unless energy tracking is on.
    pub energy_change: Option<f64>,
    /// Mean enclosed area over platelets; empty unless area tracking is on.
    pub area_mean: Option<f64>,
    pub platelets: usize,
    pub links: usize,
    pub pressure_iterations: u64,
}

/// Area of each platelet by the resampling procedure, reusing one set of operators.
pub struct AreaProbe {
    ops: Option<RbfOperators>,
}

impl AreaProbe {
    pub fn new(tracked_points: usize) -> Result<Self> {
        let fit = area_fit_markers(&vec![Vec2::ZERO; tracked_points]).len();
        if fit < 8 {
            return Ok(AreaProbe { ops: None });
        }
        Ok(AreaProbe { ops: Some(area_operators(fit)?) })
    }

    pub fn area(&self, p: &Platelet) -> Result<f64> {
        let ops = self
            .ops
            .as_ref()
            .ok_or_else(|| IbError::DegenerateGeometry("too few markers for the area fit".into()))?;
        area_with(ops, &area_fit_markers(p.tracked()))
    }
}

pub struct RunOutput {
    pub summary: RunSummary,
    pub sim: Simulation,
    pub series: Vec<SeriesRow>,
}

/// Runs `cfg` to its end, calling `observe` after every completed step. Snapshots and the
/// series CSV go to `out_dir` when given. Blow-ups and solver failures end the run and are
/// reported in the summary status; other errors are returned.
pub fn execute(cfg: &RunConfig, out_dir: Option<&Path>, mut observe: impl FnMut(&Simulation)) -> Result<RunOutput> {
    let mut sim = build_simulation(cfg)?;
    let warnings = cfg.warnings();
    let area = if cfg.output.track_area { Some(AreaProbe::new(cfg.tracked_points())?) } else { None };
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join("config.toml"), cfg.to_toml())?;
    }
    let snap = |sim: &Simulation| -> Result<()> {
        if let (Some(d), true) = (out_dir, cfg.output.snapshots) {
            SnapshotFile::capture(sim)?.write(&d.join(format!("snapshot_{:08}.json", sim.step)))?;
        }
        Ok(())
    };
    let row = |sim: &Simulation| -> Result<SeriesRow> {
        let area_mean = match (&area, sim.platelets.is_empty()) {
            (Some(a), false) => {
                let mut s = 0.0;
                for p in &sim.platelets {
                    s += a.area(p)?;
                }
                Some(s / sim.platelets.len() as f64)
            }
            _ => None,
        };
        Ok(SeriesRow {
            step: sim.step,
            time: sim.time,
            max_velocity: sim.fluid.max_velocity(),
            kinetic: 0.5 * sim.solver.params.rho * sim.fluid.velocity_sum_sq(&sim.grid),
            energy_change: sim.last_energy_change,
            area_mean,
            platelets: sim.platelets.len(),
            links: sim.links.len(),
            pressure_iterations: sim.solver.stats.pressure_iterations,
        })
    };

    let mut series = vec![row(&sim)?];
    snap(&sim)?;
    let n = cfg.time.n_steps();
    let mut status = RunStatus::Completed;
    for _ in 0..n {
        match sim.step() {
            Ok(()) => {}
            Err(IbError::BlowUp { step, time, reason }) => {
                status = RunStatus::BlowUp { step, time, reason };
                break;
            }
            Err(e @ IbError::SolverDiverged { .. }) => {
                status = RunStatus::SolverFailure { step: sim.step + 1, message: e.to_string() };
                break;
            }
            Err(e) => return Err(e),
        }
        observe(&sim);
        let every = cfg.output.series_every;
        if every > 0 && (sim.step % every == 0 || sim.step == n) {
            series.push(row(&sim)?);
        }
        let every = cfg.output.snapshot_every;
        if every > 0 && sim.step % every == 0 && sim.step != n {
            snap(&sim)?;
        }
    }
    snap(&sim)?;

    let summary = RunSummary {
        name: cfg.name.clone(),
        method: cfg.method,
        status,
        steps: sim.step,
        time: sim.time,
        platelets: sim.platelets.len(),
        links: sim.links.len(),
        counters: sim.counters,
        solver: sim.solver.stats,
        profile: profile_counters(&sim.counters, &sim.solver.stats),
        warnings,
    };
    if let Some(d) = out_dir {
        let mut w = csv::Writer::from_path(d.join("series.csv")).map_err(|e| IbError::Io(e.to_string()))?;
        for r in &series {
            w.serialize(r).map_err(|e| IbError::Io(e.to_string()))?;
        }
        w.flush()?;
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(d.join("summary.json"), json)?;
    }
    Ok(RunOutput { summary, sim, series })
}

/// Runs `cfg` and returns its summary.
pub fn run_simulation(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunSummary> {
    Ok(execute(cfg, out_dir, |_| {})?.summary)
}
