//! Tension, bending and cohesion forces.
//!
//! Both membrane models use the same constitutive law, tension `∂/∂λ (T τ̂)` with
//! `T = k_t (‖∂X/∂λ‖ - l0)` plus bending `-k_b (∂⁴X/∂λ⁴ - ∂⁴X⁰/∂λ⁴)`. The RBF model takes the
//! λ-derivatives with the precomputed differentiation matrices; the piecewise-linear model uses
//! centred differences on the uniform parameter grid.

use crate::error::{IbError, Result};
use crate::geom::Vec2;
use crate::rbfgeom::{Nodes, RbfOperators};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

const MIN_TANGENT: f64 = 1e-12;

/// Stiffnesses plus the rest quantities captured from a reference shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticParams {
    pub k_t: f64,
    pub k_b: f64,
    /// Rest tangent length: per data site (RBF) or per edge `i+½` (PL).
    pub l0: Vec<f64>,
    /// Fourth λ-derivative of the reference shape at the force points.
    pub ref_bend: Vec<Vec2>,
}

fn check_stiffness(k_t: f64, k_b: f64) -> Result<()> {
    if !(k_t > 0.0 && k_b > 0.0 && k_t.is_finite() && k_b.is_finite()) {
        return Err(IbError::Config(vec![format!(
            "stiffnesses must be positive (k_t = {k_t}, k_b = {k_b})"
        )]));
    }
    Ok(())
}

impl ElasticParams {
    /// Rest state of an RBF membrane whose reference data sites are `x_ref`.
    pub fn rbf(k_t: f64, k_b: f64, x_ref: &[Vec2], ops: &RbfOperators) -> Result<Self> {
        check_stiffness(k_t, k_b)?;
        let tau = ops.differentiate(x_ref, 1, Nodes::Data)?;
        let l0: Vec<f64> = tau.iter().map(|t| t.norm()).collect();
        if l0.iter().any(|&l| l < MIN_TANGENT) {
            return Err(IbError::DegenerateGeometry("reference shape has a zero tangent".into()));
        }
        Ok(ElasticParams { k_t, k_b, l0, ref_bend: ops.differentiate(x_ref, 4, Nodes::Sample)? })
    }

    /// Rest state of a piecewise-linear membrane whose reference IB points are `x_ref`.
    pub fn pl(k_t: f64, k_b: f64, x_ref: &[Vec2]) -> Result<Self> {
        check_stiffness(k_t, k_b)?;
        let n = x_ref.len();
        if n < 5 {
            return Err(IbError::DegenerateGeometry(format!("{n} IB points is too few")));
        }
        let l0: Vec<f64> = (0..n).map(|i| edge_tangent(x_ref, i).norm()).collect();
        if l0.iter().any(|&l| l < MIN_TANGENT) {
            return Err(IbError::DegenerateGeometry("reference shape has coincident points".into()));
        }
        Ok(ElasticParams { k_t, k_b, l0, ref_bend: fourth_difference(x_ref) })
    }
}

/// Tension plus bending at the sample sites of an RBF membrane with data sites `x_d`.
pub fn rbf_forces(x_d: &[Vec2], ops: &RbfOperators, params: &ElasticParams) -> Result<Vec<Vec2>> {
    if params.l0.len() != x_d.len() || params.ref_bend.len() != ops.config.n_s {
        return Err(IbError::SizeMismatch(format!(
            "rbf_forces: {} data sites, {} rest lengths, {} reference bends for n_s = {}",
            x_d.len(),
            params.l0.len(),
            params.ref_bend.len(),
            ops.config.n_s
        )));
    }
    let tau = ops.differentiate(x_d, 1, Nodes::Data)?;
    let mut tension = Vec::with_capacity(tau.len());
    for (k, (t, &l0)) in tau.iter().zip(&params.l0).enumerate() {
        let norm = t.norm();
        if !(norm >= MIN_TANGENT) {
            return Err(IbError::DegenerateGeometry(format!(
                "tangent at data site {k} has length {norm:.3e}"
            )));
        }
        tension.push(*t * (params.k_t * (norm - l0) / norm));
    }
    let mut f = ops.differentiate(&tension, 1, Nodes::Sample)?;
    let bend = ops.differentiate(x_d, 4, Nodes::Sample)?;
    for ((fi, b), b0) in f.iter_mut().zip(&bend).zip(&params.ref_bend) {
        *fi -= (*b - *b0) * params.k_b;
    }
    Ok(f)
}

/// `(X_{i+1} - X_i) / Δλ` on a closed curve.
#[inline]
fn edge_tangent(x: &[Vec2], i: usize) -> Vec2 {
    let n = x.len();
    (x[(i + 1) % n] - x[i]) * (n as f64 / TAU)
}

/// `(X_{i-2} - 4X_{i-1} + 6X_i - 4X_{i+1} + X_{i+2}) / Δλ⁴` on a closed curve.
pub fn fourth_difference(x: &[Vec2]) -> Vec<Vec2> {
    let n = x.len();
    let dl = TAU / n as f64;
    let inv = 1.0 / (dl * dl * dl * dl);
    (0..n)
        .map(|i| {
            let at = |o: isize| x[(i as isize + o).rem_euclid(n as isize) as usize];
            (at(-2) + at(2) - (at(-1) + at(1)) * 4.0 + at(0) * 6.0) * inv
        })
        .collect()
}

/// Tension (springs between neighbouring points) plus bending for a piecewise-linear membrane.
pub fn pl_forces(x: &[Vec2], params: &ElasticParams) -> Result<Vec<Vec2>> {
    let n = x.len();
    if params.l0.len() != n || params.ref_bend.len() != n {
        return Err(IbError::SizeMismatch(format!(
            "pl_forces: {n} points but {} rest lengths and {} reference bends",
            params.l0.len(),
            params.ref_bend.len()
        )));
    }
    let dl = TAU / n as f64;
    // edge tension vectors T_{i+½} τ̂_{i+½}
    let mut edge = Vec::with_capacity(n);
    for i in 0..n {
        let t = edge_tangent(x, i);
        let norm = t.norm();
        if !(norm >= MIN_TANGENT) {
            return Err(IbError::DegenerateGeometry(format!("IB points {i} and {} coincide", (i + 1) % n)));
        }
        edge.push(t * (params.k_t * (norm - params.l0[i]) / norm));
    }
    let bend = fourth_difference(x);
    Ok((0..n)
        .map(|i| {
            (edge[i] - edge[(i + n - 1) % n]) * (1.0 / dl) - (bend[i] - params.ref_bend[i]) * params.k_b
        })
        .collect())
}

/// Identifies a sample site by platelet id and sample index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteRef {
    pub platelet: u64,
    pub sample: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LinkEnd {
    Site(SiteRef),
    Wall(Vec2),
}

/// Cohesion spring between a sample site and another site or a fixed wall anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub a: SiteRef,
    pub b: LinkEnd,
    pub k_c: f64,
    pub l0: f64,
}

impl Link {
    pub fn validate(&self) -> Result<()> {
        if let LinkEnd::Site(b) = self.b {
            if b == self.a {
                return Err(IbError::DegenerateGeometry("link endpoints coincide".into()));
            }
        }
        if !(self.k_c >= 0.0 && self.l0 >= 0.0) {
            return Err(IbError::Config(vec![format!(
                "link stiffness and rest length must be non-negative (k_c = {}, l0 = {})",
                self.k_c, self.l0
            )]));
        }
        Ok(())
    }
}

/// Linear spring force `F_A = K_C (‖d‖ - l0) d / ‖d‖` with `d = X_B - X_A`, and `F_B = -F_A`.
pub fn cohesion_force(k_c: f64, l0: f64, x_a: Vec2, x_b: Vec2) -> Result<(Vec2, Vec2)> {
    let d = x_b - x_a;
    let len = d.norm();
    if !(len > 0.0) {
        return Err(IbError::DegenerateGeometry("cohesion link of zero length".into()));
    }
    let f_a = d * (k_c * (len - l0) / len);
    Ok((f_a, -f_a))
}
