//! Staggered (MAC) grid, field storage and second-order finite-difference operators.
//!
//! Layout on an `nx × ny` grid of square cells of width `h`:
//!
//! * `u` lives on vertical faces, `u[i,j]` at `(i h, (j+½) h)`, `nx × ny` values, periodic in x.
//! * `v` lives on horizontal faces, `v[i,j]` at `((i+½) h, j h)`, `nx × (ny+1)` values. Rows
//!   `j = 0` and `j = ny` sit on the walls and are pinned to zero.
//! * cell-centred scalars (pressure, divergence) at `((i+½) h, (j+½) h)`, `nx × ny` values.
//!
//! No-slip for `u` uses reflected ghost rows (`u_ghost = -u_interior`), so the wall-averaged
//! tangential velocity is exactly zero. Cell-centred fields use mirrored (Neumann) ghosts.

use crate::error::{IbError, Result};
use crate::geom::Vec2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    UFace,
    VFace,
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub h: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        let mut problems = Vec::new();
        for (name, n) in [("nx", nx), ("ny", ny)] {
            if n < 8 || !n.is_power_of_two() {
                problems.push(format!("{name} = {n} must be a power of two >= 8"));
            }
        }
        if !(lx > 0.0 && ly > 0.0) {
            problems.push(format!("domain lengths must be positive (lx = {lx}, ly = {ly})"));
        } else {
            let (hx, hy) = (lx / nx as f64, ly / ny as f64);
            if (hx - hy).abs() > 1e-12 * hx.max(hy) {
                problems.push(format!("cells must be square (lx/nx = {hx}, ly/ny = {hy})"));
            }
        }
        if !problems.is_empty() {
            return Err(IbError::InvalidGrid(problems.join("; ")));
        }
        Ok(GridSpec { nx, ny, lx, ly, h: lx / nx as f64 })
    }

    /// `n × n` grid on the unit square.
    pub fn unit_square(n: usize) -> Result<Self> {
        Self::new(n, n, 1.0, 1.0)
    }

    #[inline]
    pub fn rows(&self, layout: Layout) -> usize {
        match layout {
            Layout::VFace => self.ny + 1,
            Layout::UFace | Layout::Center => self.ny,
        }
    }

    #[inline]
    pub fn len(&self, layout: Layout) -> usize {
        self.nx * self.rows(layout)
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Physical location of sample `(i, j)` of a field with the given layout.
    pub fn position(&self, layout: Layout, i: usize, j: usize) -> Vec2 {
        let h = self.h;
        match layout {
            Layout::UFace => Vec2::new(i as f64 * h, (j as f64 + 0.5) * h),
            Layout::VFace => Vec2::new((i as f64 + 0.5) * h, j as f64 * h),
            Layout::Center => Vec2::new((i as f64 + 0.5) * h, (j as f64 + 0.5) * h),
        }
    }

    #[inline]
    pub(crate) fn left(&self, i: usize) -> usize {
        if i == 0 {
            self.nx - 1
        } else {
            i - 1
        }
    }

    #[inline]
    pub(crate) fn right(&self, i: usize) -> usize {
        if i + 1 == self.nx {
            0
        } else {
            i + 1
        }
    }
}

/// A scalar field stored row-major (`j * nx + i`) in one contiguous buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub layout: Layout,
    pub nx: usize,
    pub rows: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: &GridSpec, layout: Layout) -> Self {
        Field { layout, nx: grid.nx, rows: grid.rows(layout), data: vec![0.0; grid.len(layout)] }
    }

    /// Samples `f(x, y)` at every location of the layout. Wall rows of a v-field are left at zero.
    pub fn from_fn(grid: &GridSpec, layout: Layout, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut field = Field::zeros(grid, layout);
        for j in 0..field.rows {
            if layout == Layout::VFace && (j == 0 || j == grid.ny) {
                continue;
            }
            for i in 0..grid.nx {
                let p = grid.position(layout, i, j);
                field.data[grid.idx(i, j)] = f(p.x, p.y);
            }
        }
        field
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.nx + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[j * self.nx + i] = value;
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Field {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|x| *x *= s);
        out
    }

    fn check(&self, grid: &GridSpec, layout: Layout, what: &str) -> Result<()> {
        if self.layout != layout || self.nx != grid.nx || self.data.len() != grid.len(layout) {
            return Err(IbError::SizeMismatch(format!(
                "{what}: expected {:?} field with {} samples, got {:?} with {}",
                layout,
                grid.len(layout),
                self.layout,
                self.data.len()
            )));
        }
        Ok(())
    }
}

/// Velocity and pressure on the staggered grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidState {
    pub u: Field,
    pub v: Field,
    pub p: Field,
}

impl FluidState {
    pub fn zeros(grid: &GridSpec) -> Self {
        FluidState {
            u: Field::zeros(grid, Layout::UFace),
            v: Field::zeros(grid, Layout::VFace),
            p: Field::zeros(grid, Layout::Center),
        }
    }

    pub fn from_fn(
        grid: &GridSpec,
        fu: impl Fn(f64, f64) -> f64,
        fv: impl Fn(f64, f64) -> f64,
    ) -> Self {
        FluidState {
            u: Field::from_fn(grid, Layout::UFace, fu),
            v: Field::from_fn(grid, Layout::VFace, fv),
            p: Field::zeros(grid, Layout::Center),
        }
    }

    pub fn check(&self, grid: &GridSpec) -> Result<()> {
        self.u.check(grid, Layout::UFace, "u")?;
        self.v.check(grid, Layout::VFace, "v")?;
        self.p.check(grid, Layout::Center, "p")
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite() && self.p.is_finite()
    }

    pub fn max_velocity(&self) -> f64 {
        self.u.max_abs().max(self.v.max_abs())
    }

    /// `Σ (u² + v²) h²` over all velocity samples.
    pub fn velocity_sum_sq(&self, grid: &GridSpec) -> f64 {
        (self.u.sum_sq() + self.v.sum_sq()) * grid.h * grid.h
    }
}

/// Eulerian force density with components co-located with `u` and `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceDensity {
    pub fx: Field,
    pub fy: Field,
}

impl ForceDensity {
    pub fn zeros(grid: &GridSpec) -> Self {
        ForceDensity { fx: Field::zeros(grid, Layout::UFace), fy: Field::zeros(grid, Layout::VFace) }
    }

    /// Adds a spatially uniform body force (zero on the pinned wall rows of `fy`).
    pub fn add_uniform(&mut self, grid: &GridSpec, f: [f64; 2]) {
        self.fx.data.iter_mut().for_each(|x| *x += f[0]);
        for j in 1..grid.ny {
            for i in 0..grid.nx {
                self.fy.data[grid.idx(i, j)] += f[1];
            }
        }
    }
}

/// Cell-centred MAC divergence `(u_{i+1} - u_i + v_{j+1} - v_j) / h`.
pub fn divergence(u: &Field, v: &Field, grid: &GridSpec) -> Result<Field> {
    u.check(grid, Layout::UFace, "divergence u")?;
    v.check(grid, Layout::VFace, "divergence v")?;
    let mut out = Field::zeros(grid, Layout::Center);
    divergence_into(u, v, grid, &mut out);
    Ok(out)
}

pub(crate) fn divergence_into(u: &Field, v: &Field, grid: &GridSpec, out: &mut Field) {
    let nx = grid.nx;
    let inv_h = 1.0 / grid.h;
    for j in 0..grid.ny {
        let row = j * nx;
        for i in 0..nx {
            let ip = grid.right(i);
            out.data[row + i] = (u.data[row + ip] - u.data[row + i] + v.data[row + nx + i]
                - v.data[row + i])
                * inv_h;
        }
    }
}

/// Discrete gradient of a cell-centred field onto the faces; wall faces get zero.
pub fn gradient(phi: &Field, grid: &GridSpec) -> Result<(Field, Field)> {
    phi.check(grid, Layout::Center, "gradient")?;
    let mut gx = Field::zeros(grid, Layout::UFace);
    let mut gy = Field::zeros(grid, Layout::VFace);
    gradient_into(phi, grid, &mut gx, &mut gy);
    Ok((gx, gy))
}

pub(crate) fn gradient_into(phi: &Field, grid: &GridSpec, gx: &mut Field, gy: &mut Field) {
    let nx = grid.nx;
    let inv_h = 1.0 / grid.h;
    for j in 0..grid.ny {
        let row = j * nx;
        for i in 0..nx {
            let im = grid.left(i);
            gx.data[row + i] = (phi.data[row + i] - phi.data[row + im]) * inv_h;
        }
    }
    for i in 0..nx {
        gy.data[i] = 0.0;
        gy.data[grid.ny * nx + i] = 0.0;
    }
    for j in 1..grid.ny {
        let row = j * nx;
        for i in 0..nx {
            gy.data[row + i] = (phi.data[row + i] - phi.data[row - nx + i]) * inv_h;
        }
    }
}

/// Five-point Laplacian with the boundary treatment implied by the field's layout.
pub fn laplacian(field: &Field, grid: &GridSpec) -> Result<Field> {
    field.check(grid, field.layout, "laplacian")?;
    let mut out = Field::zeros(grid, field.layout);
    laplacian_into(field, grid, &mut out);
    Ok(out)
}

pub(crate) fn laplacian_into(field: &Field, grid: &GridSpec, out: &mut Field) {
    let nx = grid.nx;
    let ny = grid.ny;
    let inv_h2 = 1.0 / (grid.h * grid.h);
    let d = &field.data;
    match field.layout {
        Layout::UFace | Layout::Center => {
            // Ghost value below row 0 / above row ny-1: -u (no-slip) or +p (Neumann).
            let sign = if field.layout == Layout::UFace { -1.0 } else { 1.0 };
            for j in 0..ny {
                let row = j * nx;
                for i in 0..nx {
                    let c = d[row + i];
                    let down = if j == 0 { sign * c } else { d[row - nx + i] };
                    let up = if j + 1 == ny { sign * c } else { d[row + nx + i] };
                    let l = d[row + grid.left(i)];
                    let r = d[row + grid.right(i)];
                    out.data[row + i] = (l + r + down + up - 4.0 * c) * inv_h2;
                }
            }
        }
        Layout::VFace => {
            for i in 0..nx {
                out.data[i] = 0.0;
                out.data[ny * nx + i] = 0.0;
            }
            for j in 1..ny {
                let row = j * nx;
                for i in 0..nx {
                    let c = d[row + i];
                    out.data[row + i] = (d[row + grid.left(i)]
                        + d[row + grid.right(i)]
                        + d[row - nx + i]
                        + d[row + nx + i]
                        - 4.0 * c)
                        * inv_h2;
                }
            }
        }
    }
}

/// Centred-difference advection `(u·∇)u` on the faces, in advective form. Cross-velocities are
/// averaged from the four surrounding faces of the other component.
pub fn advect(u: &Field, v: &Field, grid: &GridSpec) -> Result<(Field, Field)> {
    u.check(grid, Layout::UFace, "advect u")?;
    v.check(grid, Layout::VFace, "advect v")?;
    let mut au = Field::zeros(grid, Layout::UFace);
    let mut av = Field::zeros(grid, Layout::VFace);
    advect_into(u, v, grid, &mut au, &mut av);
    Ok((au, av))
}

pub(crate) fn advect_into(u: &Field, v: &Field, grid: &GridSpec, au: &mut Field, av: &mut Field) {
    let nx = grid.nx;
    let ny = grid.ny;
    let inv_2h = 0.5 / grid.h;
    let ud = &u.data;
    let vd = &v.data;
    for j in 0..ny {
        let row = j * nx;
        for i in 0..nx {
            let im = grid.left(i);
            let ip = grid.right(i);
            let c = ud[row + i];
            let down = if j == 0 { -c } else { ud[row - nx + i] };
            let up = if j + 1 == ny { -c } else { ud[row + nx + i] };
            let dudx = (ud[row + ip] - ud[row + im]) * inv_2h;
            let dudy = (up - down) * inv_2h;
            let vbar = 0.25 * (vd[row + im] + vd[row + i] + vd[row + nx + im] + vd[row + nx + i]);
            au.data[row + i] = c * dudx + vbar * dudy;
        }
    }
    for i in 0..nx {
        av.data[i] = 0.0;
        av.data[ny * nx + i] = 0.0;
    }
    for j in 1..ny {
        let row = j * nx;
        for i in 0..nx {
            let im = grid.left(i);
            let ip = grid.right(i);
            let c = vd[row + i];
            let dvdx = (vd[row + ip] - vd[row + im]) * inv_2h;
            let dvdy = (vd[row + nx + i] - vd[row - nx + i]) * inv_2h;
            let ubar = 0.25 * (ud[row - nx + i] + ud[row - nx + ip] + ud[row + i] + ud[row + ip]);
            av.data[row + i] = ubar * dvdx + c * dvdy;
        }
    }
}
