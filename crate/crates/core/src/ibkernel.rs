//! Cosine regularized delta, force spreading and velocity interpolation.
//!
//! Lagrangian x-coordinates may be unwrapped; they are reduced modulo `Lx` only here. Stencil
//! rows that fall outside the walls are dropped without renormalisation. Spreading writes into
//! the wall rows of `fy` as well, so the total transmitted force is exact, but the fluid never
//! reads them.

use crate::error::{IbError, Result};
use crate::geom::Vec2;
use crate::mesh::{Field, FluidState, ForceDensity, GridSpec, Layout};
use std::f64::consts::FRAC_PI_2;

/// One-dimensional kernel `(1 + cos(π r / 2)) / 4` on `|r| ≤ 2`.
#[inline]
pub fn phi(r: f64) -> f64 {
    if r.abs() >= 2.0 {
        0.0
    } else {
        0.25 * (1.0 + (FRAC_PI_2 * r).cos())
    }
}

/// Two-dimensional delta `φ(x/h) φ(y/h) / h²`.
pub fn delta_h(x: f64, y: f64, h: f64) -> f64 {
    phi(x / h) * phi(y / h) / (h * h)
}

/// First grid index and the four weights along one axis, for samples at `(k + offset) h`.
#[inline]
fn stencil(coord: f64, h: f64, offset: f64) -> (i64, [f64; 4]) {
    let s = coord / h - offset;
    let i0 = s.floor() as i64 - 1;
    let mut w = [0.0; 4];
    for (m, wm) in w.iter_mut().enumerate() {
        *wm = phi(s - (i0 + m as i64) as f64);
    }
    (i0, w)
}

fn layout_offsets(layout: Layout) -> (f64, f64) {
    match layout {
        Layout::UFace => (0.0, 0.5),
        Layout::VFace => (0.5, 0.0),
        Layout::Center => (0.5, 0.5),
    }
}

fn check_points(points: &[Vec2]) -> Result<()> {
    if let Some(k) = points.iter().position(|p| !p.is_finite()) {
        return Err(IbError::DegenerateGeometry(format!("point {k} is not finite")));
    }
    Ok(())
}

/// Visits the (index, weight) pairs of the stencil of `p` on `layout`, with weight φφ.
#[inline]
fn for_stencil(grid: &GridSpec, layout: Layout, p: Vec2, mut f: impl FnMut(usize, f64)) {
    let (ox, oy) = layout_offsets(layout);
    let rows = grid.rows(layout) as i64;
    let nx = grid.nx as i64;
    let x = p.x.rem_euclid(grid.lx);
    let (i0, wx) = stencil(x, grid.h, ox);
    let (j0, wy) = stencil(p.y, grid.h, oy);
    for (b, &wyb) in wy.iter().enumerate() {
        let j = j0 + b as i64;
        if j < 0 || j >= rows || wyb == 0.0 {
            continue;
        }
        for (a, &wxa) in wx.iter().enumerate() {
            let i = (i0 + a as i64).rem_euclid(nx);
            f((j * nx + i) as usize, wxa * wyb);
        }
    }
}

/// `f_g = Σ_q F_q δ_h(x_g - X_q) dq` on the u- and v-faces.
pub fn spread(points: &[Vec2], forces: &[Vec2], dq: f64, grid: &GridSpec) -> Result<ForceDensity> {
    let mut out = ForceDensity::zeros(grid);
    spread_into(points, forces, dq, grid, &mut out)?;
    Ok(out)
}

/// Accumulating form of [`spread`]. Points are visited in order, so results are deterministic.
pub fn spread_into(
    points: &[Vec2],
    forces: &[Vec2],
    dq: f64,
    grid: &GridSpec,
    out: &mut ForceDensity,
) -> Result<()> {
    if points.len() != forces.len() {
        return Err(IbError::SizeMismatch(format!(
            "spread: {} points but {} forces",
            points.len(),
            forces.len()
        )));
    }
    check_points(points)?;
    let scale = dq / (grid.h * grid.h);
    for (p, f) in points.iter().zip(forces) {
        let (fx, fy) = (f.x * scale, f.y * scale);
        for_stencil(grid, Layout::UFace, *p, |k, w| out.fx.data[k] += fx * w);
        for_stencil(grid, Layout::VFace, *p, |k, w| out.fy.data[k] += fy * w);
    }
    Ok(())
}

/// Interpolates a single face field at `p`.
pub fn interpolate_field(field: &Field, grid: &GridSpec, p: Vec2) -> f64 {
    let mut acc = 0.0;
    for_stencil(grid, field.layout, p, |k, w| acc += field.data[k] * w);
    acc
}

/// `U_q = Σ_g u_g δ_h(x_g - X_q) h²`.
pub fn interpolate(state: &FluidState, points: &[Vec2], grid: &GridSpec) -> Result<Vec<Vec2>> {
    state.check(grid)?;
    check_points(points)?;
    Ok(points
        .iter()
        .map(|&p| Vec2::new(interpolate_field(&state.u, grid, p), interpolate_field(&state.v, grid, p)))
        .collect())
}
