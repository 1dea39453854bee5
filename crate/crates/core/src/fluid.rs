//! Fractional-step incompressible Navier–Stokes on the MAC grid.
//!
//! `half_step` is backward Euler over `dt/2`, `full_step` is Crank–Nicolson over `dt` with the
//! advection evaluated at the mid-step velocity. Both share the operator `I - (dt/2) ν Δ`, so the
//! implicit viscous solves differ only in their right-hand sides. Advection is explicit.
//!
//! Linear systems go through either Jacobi-preconditioned CG or a direct solver that takes a DFT
//! in the periodic direction and solves one tridiagonal system per Fourier mode.

use crate::error::{IbError, Result};
use crate::mesh::{
    advect_into, divergence_into, gradient_into, laplacian_into, Field, FluidState, ForceDensity,
    GridSpec, Layout,
};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidParams {
    pub rho: f64,
    pub mu: f64,
    /// Uniform background force density, added to the spread force in every step.
    #[serde(default)]
    pub body_force: [f64; 2],
}

impl FluidParams {
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            out.push(format!("fluid.rho must be positive (got {})", self.rho));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            out.push(format!("fluid.mu must be positive (got {})", self.mu));
        }
        if !self.body_force.iter().all(|f| f.is_finite()) {
            out.push("fluid.body_force must be finite".to_string());
        }
        out
    }

    pub fn nu(&self) -> f64 {
        self.mu / self.rho
    }

    /// Body force that holds `u = 4 u_max y (Ly - y) / Ly²` steady.
    pub fn poiseuille_force(mu: f64, u_max: f64, ly: f64) -> [f64; 2] {
        [8.0 * mu * u_max / (ly * ly), 0.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMethod {
    #[default]
    Pcg,
    Fft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOptions {
    #[serde(default)]
    pub method: SolverMethod,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_rel_tol() -> f64 {
    1e-9
}

fn default_max_iter() -> usize {
    20_000
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { method: SolverMethod::Pcg, rel_tol: 1e-9, max_iter: 20_000 }
    }
}

/// Cumulative solver counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub pressure_solves: u64,
    pub pressure_iterations: u64,
    pub velocity_solves: u64,
    pub velocity_iterations: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Half,
    Full,
}

/// Warm-start slots, one per (stage, unknown).
#[derive(Debug, Clone)]
struct WarmStart {
    phi: [Field; 2],
    u: [Field; 2],
    v: [Field; 2],
}

pub struct FluidSolver {
    pub grid: GridSpec,
    pub params: FluidParams,
    pub opts: SolverOptions,
    /// Iterations used by the most recent pressure solve (0 for the direct path).
    pub last_iterations: usize,
    pub stats: SolverStats,
    direct: DirectSolver,
    warm: WarmStart,
}

impl FluidSolver {
    pub fn new(grid: GridSpec, params: FluidParams, opts: SolverOptions) -> Result<Self> {
        let problems = params.validate();
        if !problems.is_empty() {
            return Err(IbError::Config(problems));
        }
        if !(opts.rel_tol > 0.0 && opts.rel_tol < 1.0) {
            return Err(IbError::Config(vec![format!(
                "solver.rel_tol must lie in (0, 1) (got {})",
                opts.rel_tol
            )]));
        }
        let z = |l| Field::zeros(&grid, l);
        Ok(FluidSolver {
            grid,
            params,
            opts,
            last_iterations: 0,
            stats: SolverStats::default(),
            direct: DirectSolver::new(&grid),
            warm: WarmStart {
                phi: [z(Layout::Center), z(Layout::Center)],
                u: [z(Layout::UFace), z(Layout::UFace)],
                v: [z(Layout::VFace), z(Layout::VFace)],
            },
        })
    }

    /// Backward-Euler half step from `state` with force density `f` (body force added here).
    pub fn half_step(&mut self, state: &FluidState, f: &ForceDensity, dt: f64) -> Result<FluidState> {
        state.check(&self.grid)?;
        let g = self.grid;
        let h2 = 0.5 * dt;
        let inv_rho = 1.0 / self.params.rho;
        let bf = self.params.body_force;
        let mut au = Field::zeros(&g, Layout::UFace);
        let mut av = Field::zeros(&g, Layout::VFace);
        advect_into(&state.u, &state.v, &g, &mut au, &mut av);
        let mut ru = state.u.clone();
        for k in 0..ru.data.len() {
            ru.data[k] += h2 * (-au.data[k] + (f.fx.data[k] + bf[0]) * inv_rho);
        }
        let mut rv = state.v.clone();
        for j in 1..g.ny {
            for i in 0..g.nx {
                let k = g.idx(i, j);
                rv.data[k] += h2 * (-av.data[k] + (f.fy.data[k] + bf[1]) * inv_rho);
            }
        }
        self.advance(ru, rv, dt, h2, Stage::Half)
    }

    /// Crank–Nicolson full step: advection at `state_half`, viscous term averaged between `t^n`
    /// and `t^{n+1}`.
    pub fn full_step(
        &mut self,
        state_n: &FluidState,
        state_half: &FluidState,
        f: &ForceDensity,
        dt: f64,
    ) -> Result<FluidState> {
        state_n.check(&self.grid)?;
        state_half.check(&self.grid)?;
        let g = self.grid;
        let inv_rho = 1.0 / self.params.rho;
        let half_nu = 0.5 * self.params.nu();
        let bf = self.params.body_force;
        let mut au = Field::zeros(&g, Layout::UFace);
        let mut av = Field::zeros(&g, Layout::VFace);
        advect_into(&state_half.u, &state_half.v, &g, &mut au, &mut av);
        let mut lu = Field::zeros(&g, Layout::UFace);
        let mut lv = Field::zeros(&g, Layout::VFace);
        laplacian_into(&state_n.u, &g, &mut lu);
        laplacian_into(&state_n.v, &g, &mut lv);
        let mut ru = state_n.u.clone();
        for k in 0..ru.data.len() {
            ru.data[k] +=
                dt * (-au.data[k] + half_nu * lu.data[k] + (f.fx.data[k] + bf[0]) * inv_rho);
        }
        let mut rv = state_n.v.clone();
        for j in 1..g.ny {
            for i in 0..g.nx {
                let k = g.idx(i, j);
                rv.data[k] +=
                    dt * (-av.data[k] + half_nu * lv.data[k] + (f.fy.data[k] + bf[1]) * inv_rho);
            }
        }
        self.advance(ru, rv, dt, dt, Stage::Full)
    }

    fn advance(&mut self, ru: Field, rv: Field, dt: f64, dt_sub: f64, stage: Stage) -> Result<FluidState> {
        let beta = 0.5 * dt * self.params.nu();
        let s = stage as usize;
        let u = self.solve_helmholtz_slot(&ru, beta, Slot::U(s))?;
        let v = self.solve_helmholtz_slot(&rv, beta, Slot::V(s))?;
        let (u, v, phi) = self.project_slot(u, v, Some(s))?;
        let p = phi.scaled(self.params.rho / dt_sub);
        Ok(FluidState { u, v, p })
    }

    /// Projects `state` onto discretely divergence-free fields. Returns the corrected state and
    /// the potential `φ` (zero mean) with `u = u* - ∇φ`; `state.p` is replaced by `φ`.
    pub fn project(&mut self, state: &FluidState) -> Result<(FluidState, Field)> {
        state.check(&self.grid)?;
        let (u, v, phi) = self.project_slot(state.u.clone(), state.v.clone(), None)?;
        Ok((FluidState { u, v, p: phi.clone() }, phi))
    }

    fn project_slot(
        &mut self,
        mut u: Field,
        mut v: Field,
        slot: Option<usize>,
    ) -> Result<(Field, Field, Field)> {
        let g = self.grid;
        let mut div = Field::zeros(&g, Layout::Center);
        divergence_into(&u, &v, &g, &mut div);
        let phi = self.solve_poisson_slot(&div, slot)?;
        let mut gx = Field::zeros(&g, Layout::UFace);
        let mut gy = Field::zeros(&g, Layout::VFace);
        gradient_into(&phi, &g, &mut gx, &mut gy);
        u.data.iter_mut().zip(&gx.data).for_each(|(a, b)| *a -= b);
        v.data.iter_mut().zip(&gy.data).for_each(|(a, b)| *a -= b);
        Ok((u, v, phi))
    }

    /// Solves `Δφ = rhs` with Neumann walls; the result has zero mean.
    pub fn solve_poisson(&mut self, rhs: &Field) -> Result<Field> {
        self.solve_poisson_slot(rhs, None)
    }

    fn solve_poisson_slot(&mut self, rhs: &Field, slot: Option<usize>) -> Result<Field> {
        let g = self.grid;
        let mut b = rhs.clone();
        remove_mean(&mut b.data);
        self.stats.pressure_solves += 1;
        let phi = match self.opts.method {
            SolverMethod::Fft => {
                self.last_iterations = 0;
                self.direct.solve(&b, 0.0, -1.0)
            }
            SolverMethod::Pcg => {
                // CG on the positive semi-definite system (-Δ) φ = -rhs.
                b.data.iter_mut().for_each(|x| *x = -*x);
                let mut x = match slot {
                    Some(s) => self.warm.phi[s].clone(),
                    None => Field::zeros(&g, Layout::Center),
                };
                let inv_h2 = 1.0 / (g.h * g.h);
                let mut inv_diag = vec![0.25 / inv_h2; b.data.len()];
                for i in 0..g.nx {
                    inv_diag[g.idx(i, 0)] = 1.0 / (3.0 * inv_h2);
                    inv_diag[g.idx(i, g.ny - 1)] = 1.0 / (3.0 * inv_h2);
                }
                let its = pcg(
                    |p, out| {
                        laplacian_into(p, &g, out);
                        out.data.iter_mut().for_each(|x| *x = -*x);
                    },
                    &inv_diag,
                    &b,
                    &mut x,
                    self.opts.rel_tol,
                    self.opts.max_iter,
                )?;
                self.last_iterations = its;
                self.stats.pressure_iterations += its as u64;
                remove_mean(&mut x.data);
                if let Some(s) = slot {
                    self.warm.phi[s] = x.clone();
                }
                x
            }
        };
        Ok(phi)
    }

    /// Solves `(I - β Δ) x = rhs` for a u- or v-layout field (wall rows of v stay zero).
    pub fn solve_helmholtz(&mut self, rhs: &Field, beta: f64) -> Result<Field> {
        let slot = match rhs.layout {
            Layout::UFace => Slot::UCold,
            Layout::VFace => Slot::VCold,
            Layout::Center => {
                return Err(IbError::SizeMismatch(
                    "helmholtz solve expects a velocity layout".to_string(),
                ))
            }
        };
        self.solve_helmholtz_slot(rhs, beta, slot)
    }

    fn solve_helmholtz_slot(&mut self, rhs: &Field, beta: f64, slot: Slot) -> Result<Field> {
        let g = self.grid;
        let layout = rhs.layout;
        self.stats.velocity_solves += 1;
        if beta == 0.0 {
            return Ok(rhs.clone());
        }
        match self.opts.method {
            SolverMethod::Fft => Ok(self.direct.solve(rhs, 1.0, beta)),
            SolverMethod::Pcg => {
                let mut x = match slot {
                    Slot::U(s) => self.warm.u[s].clone(),
                    Slot::V(s) => self.warm.v[s].clone(),
                    Slot::UCold | Slot::VCold => rhs.clone(),
                };
                let c = beta / (g.h * g.h);
                let mut inv_diag = vec![1.0 / (1.0 + 4.0 * c); rhs.data.len()];
                match layout {
                    Layout::UFace => {
                        for i in 0..g.nx {
                            inv_diag[g.idx(i, 0)] = 1.0 / (1.0 + 5.0 * c);
                            inv_diag[g.idx(i, g.ny - 1)] = 1.0 / (1.0 + 5.0 * c);
                        }
                    }
                    _ => {
                        for i in 0..g.nx {
                            inv_diag[g.idx(i, 0)] = 1.0;
                            inv_diag[g.idx(i, g.ny)] = 1.0;
                            x.data[g.idx(i, 0)] = 0.0;
                            x.data[g.idx(i, g.ny)] = 0.0;
                        }
                    }
                }
                let its = pcg(
                    |p, out| {
                        laplacian_into(p, &g, out);
                        for (o, pv) in out.data.iter_mut().zip(&p.data) {
                            *o = pv - beta * *o;
                        }
                    },
                    &inv_diag,
                    rhs,
                    &mut x,
                    self.opts.rel_tol,
                    self.opts.max_iter,
                )?;
                self.stats.velocity_iterations += its as u64;
                match slot {
                    Slot::U(s) => self.warm.u[s] = x.clone(),
                    Slot::V(s) => self.warm.v[s] = x.clone(),
                    _ => {}
                }
                Ok(x)
            }
        }
    }

    /// Steady discrete Poiseuille profile for the configured body force: solves `-ν Δu = f_x/ρ`.
    pub fn steady_channel_flow(&self) -> FluidState {
        let g = self.grid;
        let rhs = Field::from_fn(&g, Layout::UFace, |_, _| -self.params.body_force[0] / self.params.mu);
        let u = self.direct.solve(&rhs, 0.0, -1.0);
        let mut s = FluidState::zeros(&g);
        s.u = u;
        s
    }
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    U(usize),
    V(usize),
    UCold,
    VCold,
}

/// Returns a reason if the state has blown up: non-finite values or a velocity beyond
/// `100 × u_max`.
pub fn blow_up_reason(state: &FluidState, u_max: f64) -> Option<String> {
    if !state.u.is_finite() || !state.v.is_finite() {
        return Some("non-finite velocity".to_string());
    }
    let m = state.max_velocity();
    if m > 100.0 * u_max {
        return Some(format!("max |u| = {m:.3e} exceeds 100 × u_max"));
    }
    None
}

fn remove_mean(x: &mut [f64]) {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= mean);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradients. Stops when `‖b - A x‖₂ ≤ rel_tol ‖b‖₂`.
fn pcg(
    apply: impl Fn(&Field, &mut Field),
    inv_diag: &[f64],
    b: &Field,
    x: &mut Field,
    rel_tol: f64,
    max_iter: usize,
) -> Result<usize> {
    let bnorm = dot(&b.data, &b.data).sqrt();
    if bnorm == 0.0 {
        x.fill(0.0);
        return Ok(0);
    }
    let tol = rel_tol * bnorm;
    let mut r = b.clone();
    let mut ap = b.clone();
    apply(x, &mut ap);
    r.data.iter_mut().zip(&ap.data).for_each(|(ri, a)| *ri -= a);
    let mut rnorm = dot(&r.data, &r.data).sqrt();
    if rnorm <= tol {
        return Ok(0);
    }
    let mut z = r.clone();
    z.data.iter_mut().zip(inv_diag).for_each(|(zi, d)| *zi *= d);
    let mut p = z.clone();
    let mut rz = dot(&r.data, &z.data);
    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p.data, &ap.data);
        if !(pap > 0.0) {
            return Err(IbError::SolverDiverged { iterations: it, residual: rnorm / bnorm });
        }
        let alpha = rz / pap;
        for k in 0..x.data.len() {
            x.data[k] += alpha * p.data[k];
            r.data[k] -= alpha * ap.data[k];
        }
        rnorm = dot(&r.data, &r.data).sqrt();
        if !rnorm.is_finite() {
            return Err(IbError::SolverDiverged { iterations: it, residual: f64::NAN });
        }
        if rnorm <= tol {
            return Ok(it);
        }
        for k in 0..z.data.len() {
            z.data[k] = r.data[k] * inv_diag[k];
        }
        let rz_new = dot(&r.data, &z.data);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..p.data.len() {
            p.data[k] = z.data[k] + beta * p.data[k];
        }
    }
    Err(IbError::SolverDiverged { iterations: max_iter, residual: rnorm / bnorm })
}

/// Direct solver for `(α I + β' ...)`: `(α I - β Δ) x = b` with the boundary treatment of the
/// field layout. A DFT along x decouples the Fourier modes; each mode is a real tridiagonal
/// system in y.
struct DirectSolver {
    grid: GridSpec,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// Eigenvalues of the periodic second difference in x.
    lambda_x: Vec<f64>,
}

impl DirectSolver {
    fn new(grid: &GridSpec) -> Self {
        let mut planner = FftPlanner::new();
        let nx = grid.nx;
        let h2 = grid.h * grid.h;
        let lambda_x = (0..nx)
            .map(|m| {
                let s = (std::f64::consts::PI * m as f64 / nx as f64).sin();
                -4.0 * s * s / h2
            })
            .collect();
        DirectSolver {
            grid: *grid,
            forward: planner.plan_fft_forward(nx),
            inverse: planner.plan_fft_inverse(nx),
            lambda_x,
        }
    }

    fn solve(&self, b: &Field, alpha: f64, beta: f64) -> Field {
        let g = &self.grid;
        let nx = g.nx;
        let layout = b.layout;
        let rows = g.rows(layout);
        let (j0, j1) = match layout {
            Layout::VFace => (1, g.ny),
            _ => (0, g.ny),
        };
        let n = j1 - j0;
        let mut buf: Vec<Complex<f64>> = b.data.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.forward.process(&mut buf);

        let inv_h2 = 1.0 / (g.h * g.h);
        let off = -beta * inv_h2;
        let end_extra = match layout {
            Layout::Center => -1.0,
            Layout::UFace => 1.0,
            Layout::VFace => 0.0,
        };
        let mut diag = vec![0.0; n];
        let mut col = vec![Complex::new(0.0, 0.0); n];
        let mut cp = vec![0.0; n];
        for m in 0..nx {
            let d0 = alpha - beta * self.lambda_x[m] + 2.0 * beta * inv_h2;
            for k in 0..n {
                diag[k] = d0;
                col[k] = buf[(j0 + k) * nx + m];
            }
            diag[0] += end_extra * beta * inv_h2;
            diag[n - 1] += end_extra * beta * inv_h2;
            let singular = layout == Layout::Center && m == 0 && alpha == 0.0;
            if singular {
                // Pin x_0 = 0 and march the first n-1 equations; the last one is implied by
                // the compatibility of the right-hand side.
                let mut x = vec![Complex::new(0.0, 0.0); n];
                for k in 0..n - 1 {
                    let prev = if k == 0 { Complex::new(0.0, 0.0) } else { x[k - 1] * off };
                    x[k + 1] = (col[k] - prev - x[k] * diag[k]) / off;
                }
                let mean = x.iter().sum::<Complex<f64>>() / n as f64;
                for k in 0..n {
                    col[k] = x[k] - mean;
                }
            } else {
                thomas(off, &diag, &mut col, &mut cp);
            }
            for k in 0..n {
                buf[(j0 + k) * nx + m] = col[k];
            }
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / nx as f64;
        let mut out = Field::zeros(g, layout);
        for j in j0..j1 {
            for i in 0..nx {
                out.data[j * nx + i] = buf[j * nx + i].re * scale;
            }
        }
        debug_assert_eq!(out.data.len(), nx * rows);
        out
    }
}

/// Thomas algorithm for a symmetric tridiagonal matrix with constant off-diagonal `off`.
fn thomas(off: f64, diag: &[f64], d: &mut [Complex<f64>], cp: &mut [f64]) {
    let n = diag.len();
    cp[0] = off / diag[0];
    d[0] /= diag[0];
    for k in 1..n {
        let denom = diag[k] - off * cp[k - 1];
        cp[k] = off / denom;
        let prev = d[k - 1];
        d[k] = (d[k] - prev * off) / denom;
    }
    for k in (0..n - 1).rev() {
        let next = d[k + 1];
        d[k] -= next * cp[k];
    }
}
