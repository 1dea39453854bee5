//! Multiquadric RBF interpolation on the circle.
//!
//! A closed curve is parameterised by `λ ∈ (0, 2π]`. The kernel between two parameter values is
//! the MQ of their chordal distance on the unit circle, `ψ(λ) = √(1 + ε²(2 - 2 cos λ))`. With
//! equally spaced data nodes the interpolation matrix is symmetric circulant, so its inverse is
//! applied through its eigenvalues once, at build time. Afterwards every operator is a plain dense matrix.

use crate::error::{IbError, Result};
use crate::geom::Vec2;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use twofloat::TwoFloat;

/// `√(1 + (ε r)²)`.
#[inline]
pub fn mq_kernel(r: f64, epsilon: f64) -> f64 {
    (1.0 + (epsilon * r) * (epsilon * r)).sqrt()
}

/// `ψ` and its first four λ-derivatives at parameter offset `lambda`.
pub fn mq_circle_derivatives(lambda: f64, epsilon: f64) -> [f64; 5] {
    let beta = 2.0 * epsilon * epsilon;
    let (s, c) = lambda.sin_cos();
    let g = 1.0 + beta - beta * c;
    let g1 = beta * s;
    let g2 = beta * c;
    let g3 = -beta * s;
    let g4 = -beta * c;
    let r = g.sqrt();
    let gm12 = 1.0 / r;
    let gm32 = gm12 / g;
    let gm52 = gm32 / g;
    let gm72 = gm52 / g;
    [
        r,
        0.5 * gm12 * g1,
        -0.25 * gm32 * g1 * g1 + 0.5 * gm12 * g2,
        0.375 * gm52 * g1 * g1 * g1 - 0.75 * gm32 * g1 * g2 + 0.5 * gm12 * g3,
        -(15.0 / 16.0) * gm72 * g1.powi(4) + 2.25 * gm52 * g1 * g1 * g2 - 0.75 * gm32 * g2 * g2
            - gm32 * g1 * g3
            + 0.5 * gm12 * g4,
    ]
}

/// Shape parameter used when none is configured.
pub fn default_epsilon(n_d: usize) -> f64 {
    if n_d <= 50 {
        1.2
    } else {
        2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbfConfig {
    pub n_d: usize,
    pub n_s: usize,
    pub epsilon: f64,
}

impl RbfConfig {
    pub fn new(n_d: usize, n_s: usize, epsilon: f64) -> Result<Self> {
        let c = RbfConfig { n_d, n_s, epsilon };
        let problems = c.validate();
        if problems.is_empty() {
            Ok(c)
        } else {
            Err(IbError::Config(problems))
        }
    }

    pub fn with_default_epsilon(n_d: usize, n_s: usize) -> Result<Self> {
        Self::new(n_d, n_s, default_epsilon(n_d))
    }

    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_d < 8 {
            out.push(format!("n_d = {} must be at least 8", self.n_d));
        }
        if self.n_s < self.n_d {
            out.push(format!("n_s = {} must be at least n_d = {}", self.n_s, self.n_d));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            out.push(format!("epsilon must be positive (got {})", self.epsilon));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildPath {
    Circulant,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nodes {
    Data,
    Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbfOperators {
    pub config: RbfConfig,
    /// `N_s × N_d`, data values to sample values.
    pub e_s: DMatrix<f64>,
    pub d_d1: DMatrix<f64>,
    pub d_d4: DMatrix<f64>,
    pub d_s1: DMatrix<f64>,
    pub d_s4: DMatrix<f64>,
    /// `max |μ| / min |μ|` over the eigenvalues of the interpolation matrix.
    pub cond_estimate: f64,
    /// Largest row sum over the differentiation matrices, i.e. how far they are from
    /// annihilating constants.
    pub constant_residual: f64,
}

pub fn nodes(n: usize) -> Vec<f64> {
    (0..n).map(|k| TAU * k as f64 / n as f64).collect()
}

/// `ψ^{(order)}(λ_i - λ_k)` for nodes `i` of `n_i` and `k` of `n_k`. The offset is reduced
/// with exact integer arithmetic to `[0, π]`, using that even derivatives of ψ are even and odd
/// ones odd. Equal (or opposite) offsets therefore give bitwise equal (or opposite) values, which
/// keeps the assembled interpolation matrix exactly symmetric and circulant.
fn kernel_at(i: usize, n_i: usize, k: usize, n_k: usize, eps: f64, order: usize) -> f64 {
    let den = (n_i * n_k) as i64;
    let mut num = ((i * n_k) as i64 - (k * n_i) as i64).rem_euclid(den);
    let mut sign = 1.0;
    if order % 2 == 1 && 2 * num == den {
        return 0.0;
    }
    if 2 * num > den {
        num = den - num;
        if order % 2 == 1 {
            sign = -1.0;
        }
    }
    sign * mq_circle_derivatives(TAU * num as f64 / den as f64, eps)[order]
}

/// Kernel-derivative matrix `B^n_{ik} = ψ^{(n)}(λ_i - λ^d_k)`.
fn kernel_matrix(n_at: usize, n_d: usize, eps: f64, order: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_at, n_d, |i, k| kernel_at(i, n_at, k, n_d, eps, order))
}

/// Taylor series of cos (`odd = false`) or sin (`odd = true`) for `|x| ≤ π/4`.
fn dd_taylor(x: TwoFloat, odd: bool) -> TwoFloat {
    let x2 = x * x;
    let (mut term, mut n) = if odd { (x, 1u32) } else { (TwoFloat::from(1.0), 0u32) };
    let mut sum = term;
    for _ in 0..20 {
        term = -term * x2 / f64::from((n + 1) * (n + 2));
        n += 2;
        sum += term;
    }
    sum
}

/// `cos(2π num / den)` in double-double precision, reducing the angle exactly before the series.
fn dd_cos_turns(num: i64, den: i64) -> TwoFloat {
    let (mut num, den) = (8 * num.rem_euclid(den), 8 * den);
    if 2 * num > den {
        num = den - num;
    }
    let mut sign = 1.0;
    if 4 * num > den {
        num = den / 2 - num;
        sign = -1.0;
    }
    let odd = 8 * num > den;
    if odd {
        num = den / 4 - num;
    }
    let x = twofloat::consts::TAU * (num as f64) / (den as f64);
    dd_taylor(x, odd) * sign
}

/// `cos(2π s / n)` for `s = 0..n`, in double-double precision.
fn cos_table(n: usize) -> Vec<TwoFloat> {
    (0..n).map(|s| dd_cos_turns(s as i64, n as i64)).collect()
}

fn circulant_eigenvalues_dd(config: &RbfConfig) -> Vec<TwoFloat> {
    let n = config.n_d;
    let cos = cos_table(n);
    let a: Vec<f64> =
        (0..n).map(|k| kernel_at(k, n, 0, n, config.epsilon, 0)).collect();
    (0..n)
        .map(|m| {
            a.iter()
                .enumerate()
                .fold(TwoFloat::from(0.0), |acc, (k, &ak)| acc + cos[(m * k) % n] * ak)
        })
        .collect()
}

/// Eigenvalues of the symmetric circulant interpolation matrix (DFT of its first column).
pub fn circulant_eigenvalues(config: &RbfConfig) -> Vec<f64> {
    circulant_eigenvalues_dd(config).iter().map(|m| m.hi()).collect()
}

pub fn build_operators(config: &RbfConfig) -> Result<RbfOperators> {
    build_operators_with(config, BuildPath::Circulant)
}

/// Builds all operators. Both paths carry the solve in double-double arithmetic: the
/// interpolation matrix has condition numbers up to ~1e11 for the default shape parameters,
/// and a plain double solve loses that many digits.
pub fn build_operators_with(config: &RbfConfig, path: BuildPath) -> Result<RbfOperators> {
    let problems = config.validate();
    if !problems.is_empty() {
        return Err(IbError::Config(problems));
    }
    let eps = config.epsilon;
    let (n, ns) = (config.n_d, config.n_s);
    let mu = circulant_eigenvalues_dd(config);
    let max = mu.iter().fold(0.0f64, |m, x| m.max(x.hi().abs()));
    let min = mu.iter().fold(f64::INFINITY, |m, x| m.min(x.hi().abs()));
    if min < 1e-12 * max {
        return Err(IbError::IllConditioned { ratio: min / max });
    }
    let solve_right: Box<dyn Fn(&DMatrix<f64>) -> Result<DMatrix<f64>>> = match path {
        BuildPath::Circulant => {
            // A⁻¹ is circulant too; its first column is the inverse DFT of 1/μ.
            let cos = cos_table(n);
            let c: Vec<TwoFloat> = (0..n)
                .map(|t| {
                    let s = (0..n).fold(TwoFloat::from(0.0), |acc, m| acc + cos[(m * t) % n] / mu[m]);
                    s / n as f64
                })
                .collect();
            Box::new(move |b: &DMatrix<f64>| {
                // row i of B A⁻¹ is A⁻¹ b_i because A is symmetric
                let mut out = DMatrix::zeros(b.nrows(), n);
                for i in 0..b.nrows() {
                    for k in 0..n {
                        let mut acc = TwoFloat::from(0.0);
                        for j in 0..n {
                            acc += c[(k + n - j) % n] * b[(i, j)];
                        }
                        out[(i, k)] = acc.hi();
                    }
                }
                Ok(out)
            })
        }
        BuildPath::Dense => {
            let a = kernel_matrix(n, n, eps, 0);
            let lu = a.clone().lu();
            Box::new(move |b: &DMatrix<f64>| {
                // LU solve followed by iterative refinement with double-double residuals
                let rhs = b.transpose();
                let singular = || IbError::IllConditioned { ratio: 0.0 };
                let mut x = lu.solve(&rhs).ok_or_else(singular)?;
                for _ in 0..4 {
                    let r = DMatrix::from_fn(n, rhs.ncols(), |row, col| {
                        let mut acc = TwoFloat::from(rhs[(row, col)]);
                        for k in 0..n {
                            acc -= TwoFloat::new_mul(a[(row, k)], x[(k, col)]);
                        }
                        acc.hi()
                    });
                    x += lu.solve(&r).ok_or_else(singular)?;
                }
                Ok(x.transpose())
            })
        }
    };
    let e_s = solve_right(&kernel_matrix(ns, n, eps, 0))?;
    let d_d1 = solve_right(&kernel_matrix(n, n, eps, 1))?;
    let d_d4 = solve_right(&kernel_matrix(n, n, eps, 4))?;
    let d_s1 = solve_right(&kernel_matrix(ns, n, eps, 1))?;
    let d_s4 = solve_right(&kernel_matrix(ns, n, eps, 4))?;
    let constant_residual = [&d_d1, &d_d4, &d_s1, &d_s4]
        .iter()
        .flat_map(|m| m.row_iter().map(|r| r.sum().abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    Ok(RbfOperators {
        config: *config,
        e_s,
        d_d1,
        d_d4,
        d_s1,
        d_s4,
        cond_estimate: max / min,
        constant_residual,
    })
}

fn apply(m: &DMatrix<f64>, values: &[Vec2]) -> Result<Vec<Vec2>> {
    if values.len() != m.ncols() {
        return Err(IbError::SizeMismatch(format!(
            "operator expects {} data values, got {}",
            m.ncols(),
            values.len()
        )));
    }
    let mut out = vec![Vec2::ZERO; m.nrows()];
    for (k, v) in values.iter().enumerate() {
        let col = m.column(k);
        for (o, &w) in out.iter_mut().zip(col.iter()) {
            o.x += w * v.x;
            o.y += w * v.y;
        }
    }
    Ok(out)
}

impl RbfOperators {
    /// Values of the interpolant at the sample nodes.
    pub fn evaluate(&self, values: &[Vec2]) -> Result<Vec<Vec2>> {
        apply(&self.e_s, values)
    }

    /// λ-derivative of order 1 or 4 at the data or sample nodes.
    pub fn differentiate(&self, values: &[Vec2], order: u8, at: Nodes) -> Result<Vec<Vec2>> {
        let m = match (order, at) {
            (1, Nodes::Data) => &self.d_d1,
            (4, Nodes::Data) => &self.d_d4,
            (1, Nodes::Sample) => &self.d_s1,
            (4, Nodes::Sample) => &self.d_s4,
            _ => {
                return Err(IbError::SizeMismatch(format!(
                    "derivative order {order} is not available (use 1 or 4)"
                )))
            }
        };
        apply(m, values)
    }
}
