//! Error norms, convergence rates, structure and area measurements, energy bookkeeping, the
//! stability search and run profiling.

use crate::error::{IbError, Result};
use crate::geom::Vec2;
use crate::mesh::{Field, FluidState, GridSpec, Layout};
use crate::rbfgeom::{build_operators, default_epsilon, Nodes, RbfConfig, RbfOperators};
use crate::stepper::Counters;
use crate::fluid::SolverStats;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

/// Refinement factor between a run grid and a finer gold grid.
fn nesting_factor(run: &GridSpec, gold: &GridSpec) -> Result<usize> {
    let r = gold.nx / run.nx.max(1);
    let nested = r >= 1
        && r.is_power_of_two()
        && gold.nx == r * run.nx
        && gold.ny == r * run.ny
        && (gold.lx - run.lx).abs() <= 1e-12 * run.lx
        && (gold.ly - run.ly).abs() <= 1e-12 * run.ly;
    if !nested {
        return Err(IbError::InvalidGrid(format!(
            "{}x{} is not nested in {}x{}",
            run.nx, run.ny, gold.nx, gold.ny
        )));
    }
    Ok(r)
}

/// Restricts a gold state onto a coarser nested grid. Each coarse face value is the plain mean
/// of the `r` fine face values lying along it.
pub fn coarsen(gold: &FluidState, gold_grid: &GridSpec, run_grid: &GridSpec) -> Result<FluidState> {
    gold.check(gold_grid)?;
    let r = nesting_factor(run_grid, gold_grid)?;
    let mut out = FluidState::zeros(run_grid);
    for j in 0..run_grid.ny {
        for i in 0..run_grid.nx {
            let s: f64 = (0..r).map(|k| gold.u.at(i * r, j * r + k)).sum();
            out.u.set(i, j, s / r as f64);
        }
    }
    for j in 0..=run_grid.ny {
        for i in 0..run_grid.nx {
            let s: f64 = (0..r).map(|k| gold.v.at(i * r + k, j * r)).sum();
            out.v.set(i, j, s / r as f64);
        }
    }
    for j in 0..run_grid.ny {
        for i in 0..run_grid.nx {
            let mut s = 0.0;
            for a in 0..r {
                for b in 0..r {
                    s += gold.p.at(i * r + a, j * r + b);
                }
            }
            out.p.set(i, j, s / (r * r) as f64);
        }
    }
    Ok(out)
}

/// Velocity error of a run against a nested gold run, as `(e_2, e_inf)`.
///
/// `f_i` is the magnitude of the velocity difference at cell `i`, with each component averaged
/// from its two faces to the cell centre. `e_2 = sqrt(Σ f_i² h²)` and `e_inf = max f_i`.
pub fn velocity_error(
    run: &FluidState,
    run_grid: &GridSpec,
    gold: &FluidState,
    gold_grid: &GridSpec,
) -> Result<(f64, f64)> {
    run.check(run_grid)?;
    let c = coarsen(gold, gold_grid, run_grid)?;
    let nx = run_grid.nx;
    let h2 = run_grid.h * run_grid.h;
    let (mut sum, mut max) = (0.0_f64, 0.0_f64);
    for j in 0..run_grid.ny {
        for i in 0..nx {
            let du = 0.5
                * ((run.u.at(i, j) - c.u.at(i, j)) + (run.u.at((i + 1) % nx, j) - c.u.at((i + 1) % nx, j)));
            let dv = 0.5 * ((run.v.at(i, j) - c.v.at(i, j)) + (run.v.at(i, j + 1) - c.v.at(i, j + 1)));
            let f = du.hypot(dv);
            sum += f * f * h2;
            max = max.max(f);
        }
    }
    Ok((sum.sqrt(), max))
}

/// Observed order between successive refinements: `log2(e_coarse / e_fine)`.
pub fn convergence_rate(e_coarse: f64, e_fine: f64) -> f64 {
    (e_coarse / e_fine).log2()
}

/// Deviation of consecutive marker distances from the chord of an ideal circle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChordStats {
    pub s_inf: f64,
    /// `(1/N) sqrt(Σ δ_i²)`.
    pub s_2: f64,
    /// `(1/N) sqrt(Σ |δ_i|)`, the unsquared variant.
    pub s_2_literal: f64,
}

impl ChordStats {
    /// Errors against gold statistics: `|s - s^e|` for each entry.
    pub fn error_against(&self, gold: &ChordStats) -> ChordStats {
        ChordStats {
            s_inf: (self.s_inf - gold.s_inf).abs(),
            s_2: (self.s_2 - gold.s_2).abs(),
            s_2_literal: (self.s_2_literal - gold.s_2_literal).abs(),
        }
    }
}

/// Chord statistics of closed-curve markers against a circle of radius `r_target` sampled at
/// the same count.
pub fn chord_metric(markers: &[Vec2], r_target: f64) -> Result<ChordStats> {
    let n = markers.len();
    if n < 3 {
        return Err(IbError::DegenerateGeometry(format!("chord metric needs 3 markers, got {n}")));
    }
    let c = 2.0 * r_target * (0.5 * TAU / n as f64).sin();
    let (mut inf, mut sq, mut abs) = (0.0_f64, 0.0, 0.0);
    for i in 0..n {
        let d = (markers[(i + 1) % n] - markers[i]).norm() - c;
        inf = inf.max(d.abs());
        sq += d * d;
        abs += d.abs();
    }
    Ok(ChordStats { s_inf: inf, s_2: sq.sqrt() / n as f64, s_2_literal: abs.sqrt() / n as f64 })
}

/// Number of points the area procedure resamples the curve at.
pub const AREA_SAMPLES: usize = 400;
/// Largest marker subset fitted by the area procedure.
pub const AREA_MAX_FIT: usize = 50;

/// Smallest subset the area fit accepts from a strided subsample.
const AREA_MIN_FIT: usize = 16;

/// Markers used for the area fit: all of them if there are at most [`AREA_MAX_FIT`], else
/// every `s`-th one for the smallest stride `s` dividing the count that brings it under the cap.
/// Counts without such a divisor leaving at least 16 markers are fitted whole.
pub fn area_fit_markers(markers: &[Vec2]) -> Vec<Vec2> {
    let n = markers.len();
    if n <= AREA_MAX_FIT {
        return markers.to_vec();
    }
    match (2..=n).find(|s| n.is_multiple_of(*s) && n / s <= AREA_MAX_FIT) {
        Some(stride) if n / stride >= AREA_MIN_FIT => markers.iter().step_by(stride).copied().collect(),
        _ => markers.to_vec(),
    }
}

/// Operators for an area fit on `n` markers. Fits up to [`AREA_MAX_FIT`] use the default shape
/// parameter; larger ones, or any that come out ill-conditioned, raise `ε` until the
/// interpolation matrix is usable.
pub fn area_operators(n: usize) -> Result<RbfOperators> {
    let mut eps = default_epsilon(n.min(AREA_MAX_FIT)) * (n as f64 / AREA_MAX_FIT as f64).max(1.0);
    let mut last = None;
    for _ in 0..12 {
        match build_operators(&RbfConfig::new(n, AREA_SAMPLES, eps)?) {
            Ok(ops) => return Ok(ops),
            Err(e @ IbError::IllConditioned { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
        eps *= 1.25;
    }
    Err(last.expect("at least one attempt"))
}

/// Enclosed area of a closed curve. The markers are fitted with a periodic multiquadric
/// interpolant, resampled at [`AREA_SAMPLES`] points, and `½ ∮ (x y' - y x') dλ` is summed
/// with the trapezoid rule.
pub fn enclosed_area(markers: &[Vec2]) -> Result<f64> {
    if markers.len() < 8 {
        return Err(IbError::DegenerateGeometry(format!(
            "area needs at least 8 markers, got {}",
            markers.len()
        )));
    }
    let fit = area_fit_markers(markers);
    area_with(&area_operators(fit.len())?, &fit)
}

/// Area procedure with prebuilt operators (`n_s` should be [`AREA_SAMPLES`]).
pub fn area_with(ops: &RbfOperators, markers: &[Vec2]) -> Result<f64> {
    let x = ops.evaluate(markers)?;
    let dx = ops.differentiate(markers, 1, Nodes::Sample)?;
    let dq = TAU / x.len() as f64;
    Ok(0.5 * x.iter().zip(&dx).map(|(p, d)| p.x * d.y - p.y * d.x).sum::<f64>() * dq)
}

/// Relative area change in percent, positive for a loss.
pub fn area_loss_percent(area0: f64, area: f64) -> f64 {
    100.0 * (area0 - area) / area0
}

/// Exact area of the test ellipse and its target circle.
pub fn reference_area(r: f64) -> f64 {
    PI * r * r
}

/// Per-step energy change given the structure power `Σ F·Ẋ dq` already summed:
/// `ρ Σ|u^{n+1}|² h² - ρ Σ|u^n|² h² - Δt Σ F·Ẋ dq`.
pub fn energy_change_from_parts(
    u_n: &FluidState,
    u_np1: &FluidState,
    power: f64,
    dt: f64,
    rho: f64,
    grid: &GridSpec,
) -> f64 {
    rho * (u_np1.velocity_sum_sq(grid) - u_n.velocity_sum_sq(grid)) - dt * power
}

/// Per-step energy change. `f_s` are forces at the sample sites, `u_d` velocities at the
/// tracked points; with `ops` the sample velocities are `E_s u_d`, without it the tracked
/// points are the sample sites.
#[allow(clippy::too_many_arguments)]
pub fn energy_change(
    u_n: &FluidState,
    u_np1: &FluidState,
    f_s: &[Vec2],
    u_d: &[Vec2],
    ops: Option<&RbfOperators>,
    dt: f64,
    rho: f64,
    grid: &GridSpec,
) -> Result<f64> {
    let u_s = match ops {
        Some(o) => o.evaluate(u_d)?,
        None => u_d.to_vec(),
    };
    if u_s.len() != f_s.len() {
        return Err(IbError::SizeMismatch(format!("{} forces, {} velocities", f_s.len(), u_s.len())));
    }
    let dq = if f_s.is_empty() { 0.0 } else { TAU / f_s.len() as f64 };
    let power = f_s.iter().zip(&u_s).map(|(f, u)| f.dot(*u)).sum::<f64>() * dq;
    Ok(energy_change_from_parts(u_n, u_np1, power, dt, rho, grid))
}

/// Outcome of a stability search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityResult {
    /// Largest step that ran to completion; `None` if the first one failed.
    pub max_stable_dt: Option<f64>,
    /// First step that blew up; `None` if the search ran out of trials.
    pub first_unstable_dt: Option<f64>,
    pub failure: Option<String>,
    pub trials: usize,
}

/// Tries `dt_start`, `dt_start + increment`, ... until `run` reports an instability or
/// `max_trials` is reached. Blow-ups and diverged solves count as instability; other errors are
/// returned.
pub fn stability_search(
    dt_start: f64,
    increment: f64,
    max_trials: usize,
    mut run: impl FnMut(f64) -> Result<()>,
) -> Result<StabilityResult> {
    if !(dt_start > 0.0 && increment > 0.0) {
        return Err(IbError::Config(vec!["stability search needs positive dt_start and increment".into()]));
    }
    let mut out = StabilityResult { max_stable_dt: None, first_unstable_dt: None, failure: None, trials: 0 };
    for k in 0..max_trials {
        // integer multiples keep the ladder free of accumulated rounding
        let dt = dt_start + k as f64 * increment;
        out.trials += 1;
        match run(dt) {
            Ok(()) => out.max_stable_dt = Some(dt),
            Err(e @ (IbError::BlowUp { .. } | IbError::SolverDiverged { .. })) => {
                out.first_unstable_dt = Some(dt);
                out.failure = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub steps: u64,
    pub fluid_fraction: f64,
    pub mean_pressure_iterations: f64,
    pub seconds_per_step: f64,
}

/// Summarises run counters. Two projections are done per step.
pub fn profile_counters(counters: &Counters, stats: &SolverStats) -> Profile {
    if counters.steps == 0 {
        return Profile::default();
    }
    let steps = counters.steps as f64;
    Profile {
        steps: counters.steps,
        fluid_fraction: if counters.step_seconds > 0.0 {
            counters.fluid_seconds / counters.step_seconds
        } else {
            0.0
        },
        mean_pressure_iterations: stats.pressure_iterations as f64 / steps,
        seconds_per_step: counters.step_seconds / steps,
    }
}

/// Largest value of `|u|` along the vertical line nearest to `x`, over rows with centre in
/// `[y0, y1]`, using cell-centred speeds.
pub fn max_speed_in_column(state: &FluidState, grid: &GridSpec, x: f64, y0: f64, y1: f64) -> f64 {
    let nx = grid.nx;
    let i = ((x / grid.h).floor() as isize).rem_euclid(nx as isize) as usize;
    let mut m = 0.0_f64;
    for j in 0..grid.ny {
        let y = (j as f64 + 0.5) * grid.h;
        if y < y0 || y > y1 {
            continue;
        }
        let u = 0.5 * (state.u.at(i, j) + state.u.at((i + 1) % nx, j));
        let v = 0.5 * (state.v.at(i, j) + state.v.at(i, j + 1));
        m = m.max(u.hypot(v));
    }
    m
}

/// Cell-centred x-velocity profile averaged along x.
pub fn mean_u_profile(u: &Field, grid: &GridSpec) -> Vec<f64> {
    debug_assert_eq!(u.layout, Layout::UFace);
    (0..grid.ny).map(|j| (0..grid.nx).map(|i| u.at(i, j)).sum::<f64>() / grid.nx as f64).collect()
}
