//! RK2 immersed-boundary time stepping for both membrane models, plus platelet lifecycle and
//! cohesion-link management.
//!
//! One step, for either model:
//!
//! 1. interpolate `u^n` at the tracked points and advance them half a step;
//! 2. generate sample sites from the half-step tracked points (once per step, RBF only);
//! 3. evaluate elastic and cohesion forces at the sample sites;
//! 4. spread them with `dq = 2π/N_s`;
//! 5. fluid half step;
//! 6. interpolate `u^{n+½}` at the half-step tracked points and advance them a full step;
//! 7. fluid full step.
//!
//! For the piecewise-linear model the tracked points are the sample sites. Lagrangian
//! x-coordinates are kept unwrapped; the delta kernel reduces them modulo `Lx`.

use crate::error::{IbError, Result};
use crate::fluid::{blow_up_reason, FluidSolver};
use crate::forces::{cohesion_force, pl_forces, rbf_forces, ElasticParams, Link, LinkEnd, SiteRef};
use crate::geom::{centroid, max_spacing, Vec2};
use crate::ibkernel::{interpolate, spread_into};
use crate::mesh::{FluidState, ForceDensity, GridSpec};
use crate::rbfgeom::{Nodes, RbfOperators};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::TAU;
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    PlIb,
    RbfIb,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::PlIb => "pl-ib",
            Method::RbfIb => "rbf-ib",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlateletPl {
    pub id: u64,
    pub x: Vec<Vec2>,
    pub params: ElasticParams,
    pub activated: bool,
}

impl PlateletPl {
    pub fn new(id: u64, x: Vec<Vec2>, reference: &[Vec2], k_t: f64, k_b: f64) -> Result<Self> {
        if x.len() != reference.len() {
            return Err(IbError::SizeMismatch(format!(
                "{} IB points but {} reference points",
                x.len(),
                reference.len()
            )));
        }
        Ok(PlateletPl { id, params: ElasticParams::pl(k_t, k_b, reference)?, x, activated: false })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlateletRbf {
    pub id: u64,
    pub x_d: Vec<Vec2>,
    pub ops: Arc<RbfOperators>,
    pub params: ElasticParams,
    pub activated: bool,
}

impl PlateletRbf {
    pub fn new(
        id: u64,
        x_d: Vec<Vec2>,
        reference: &[Vec2],
        ops: Arc<RbfOperators>,
        k_t: f64,
        k_b: f64,
    ) -> Result<Self> {
        if x_d.len() != ops.config.n_d || reference.len() != ops.config.n_d {
            return Err(IbError::SizeMismatch(format!(
                "{} data sites and {} reference sites for n_d = {}",
                x_d.len(),
                reference.len(),
                ops.config.n_d
            )));
        }
        if ops.config.n_d >= ops.config.n_s {
            return Err(IbError::Config(vec![format!(
                "RBF platelets need n_d < n_s (got {} and {})",
                ops.config.n_d, ops.config.n_s
            )]));
        }
        let params = ElasticParams::rbf(k_t, k_b, reference, &ops)?;
        Ok(PlateletRbf { id, x_d, ops, params, activated: false })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Platelet {
    Pl(PlateletPl),
    Rbf(PlateletRbf),
}

impl Platelet {
    pub fn id(&self) -> u64 {
        match self {
            Platelet::Pl(p) => p.id,
            Platelet::Rbf(p) => p.id,
        }
    }

    pub fn method(&self) -> Method {
        match self {
            Platelet::Pl(_) => Method::PlIb,
            Platelet::Rbf(_) => Method::RbfIb,
        }
    }

    pub fn activated(&self) -> bool {
        match self {
            Platelet::Pl(p) => p.activated,
            Platelet::Rbf(p) => p.activated,
        }
    }

    pub fn set_activated(&mut self, on: bool) {
        match self {
            Platelet::Pl(p) => p.activated = on,
            Platelet::Rbf(p) => p.activated = on,
        }
    }

    /// Points moved by the fluid: IB points (PL) or data sites (RBF).
    pub fn tracked(&self) -> &[Vec2] {
        match self {
            Platelet::Pl(p) => &p.x,
            Platelet::Rbf(p) => &p.x_d,
        }
    }

    fn tracked_mut(&mut self) -> &mut Vec<Vec2> {
        match self {
            Platelet::Pl(p) => &mut p.x,
            Platelet::Rbf(p) => &mut p.x_d,
        }
    }

    pub fn params(&self) -> &ElasticParams {
        match self {
            Platelet::Pl(p) => &p.params,
            Platelet::Rbf(p) => &p.params,
        }
    }

    pub fn n_samples(&self) -> usize {
        match self {
            Platelet::Pl(p) => p.x.len(),
            Platelet::Rbf(p) => p.ops.config.n_s,
        }
    }

    pub fn dq(&self) -> f64 {
        TAU / self.n_samples() as f64
    }

    /// Sample sites for tracked positions `x`.
    pub fn sample_sites_at(&self, x: &[Vec2]) -> Result<Vec<Vec2>> {
        match self {
            Platelet::Pl(_) => Ok(x.to_vec()),
            Platelet::Rbf(p) => p.ops.evaluate(x),
        }
    }

    pub fn sample_sites(&self) -> Result<Vec<Vec2>> {
        self.sample_sites_at(self.tracked())
    }

    /// Tension plus bending at the sample sites for tracked positions `x`.
    pub fn elastic_forces_at(&self, x: &[Vec2]) -> Result<Vec<Vec2>> {
        match self {
            Platelet::Pl(p) => pl_forces(x, &p.params),
            Platelet::Rbf(p) => rbf_forces(x, &p.ops, &p.params),
        }
    }

    /// Maps tracked-point velocities to sample-site velocities.
    pub fn sample_velocities(&self, u: &[Vec2]) -> Result<Vec<Vec2>> {
        self.sample_sites_at(u)
    }

    pub fn centroid(&self) -> Result<Vec2> {
        Ok(centroid(&self.sample_sites()?))
    }

    /// Elastic potential relative to the rest shape: stretching energy
    /// `½ k_t ∫ (‖τ‖ - l0)² dλ` plus bending energy `½ k_b ∫ |∂²(X - X⁰)|² dλ`, the latter written
    /// as `½ k_b ∫ (X - X⁰)·∂⁴(X - X⁰) dλ` so that it only needs the stored operators.
    pub fn potential_energy(&self, reference: &[Vec2]) -> Result<f64> {
        let x = self.tracked();
        let par = self.params();
        match self {
            Platelet::Pl(_) => {
                let n = x.len();
                let dl = TAU / n as f64;
                let mut e = 0.0;
                for i in 0..n {
                    let t = (x[(i + 1) % n] - x[i]) * (1.0 / dl);
                    e += 0.5 * par.k_t * (t.norm() - par.l0[i]).powi(2) * dl;
                }
                let d: Vec<Vec2> = x.iter().zip(reference).map(|(a, b)| *a - *b).collect();
                let b4 = crate::forces::fourth_difference(&d);
                e += 0.5 * par.k_b * d.iter().zip(&b4).map(|(a, b)| a.dot(*b)).sum::<f64>() * dl;
                Ok(e)
            }
            Platelet::Rbf(p) => {
                let nd = x.len();
                let tau = p.ops.differentiate(x, 1, Nodes::Data)?;
                let mut e = 0.0;
                for (t, l0) in tau.iter().zip(&par.l0) {
                    e += 0.5 * par.k_t * (t.norm() - l0).powi(2) * TAU / nd as f64;
                }
                let xs = p.ops.evaluate(x)?;
                let xs0 = p.ops.evaluate(reference)?;
                let b = p.ops.differentiate(x, 4, Nodes::Sample)?;
                let dq = self.dq();
                for i in 0..xs.len() {
                    e += 0.5 * par.k_b * (xs[i] - xs0[i]).dot(b[i] - par.ref_bend[i]) * dq;
                }
                Ok(e)
            }
        }
    }
}

/// Rules for activation and for forming and breaking cohesion links.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkPolicy {
    pub bind_radius: f64,
    #[serde(default = "default_max_links")]
    pub max_links_per_platelet: usize,
    /// Links a platelet may hold with any single partner (another platelet, or the wall).
    #[serde(default = "default_max_per_partner")]
    pub max_links_per_partner: usize,
    #[serde(default = "default_wall_band")]
    pub wall_band: [f64; 2],
    #[serde(default = "default_break_strain")]
    pub break_strain: f64,
    pub k_c: f64,
    #[serde(default = "default_true")]
    pub allow_crossing: bool,
}

fn default_max_links() -> usize {
    10
}

fn default_max_per_partner() -> usize {
    3
}

fn default_wall_band() -> [f64; 2] {
    [0.4, 0.7]
}

fn default_break_strain() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl LinkPolicy {
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.bind_radius > 0.0) {
            out.push(format!("links.bind_radius must be positive (got {})", self.bind_radius));
        }
        if !(self.wall_band[0] <= self.wall_band[1]) {
            out.push(format!("links.wall_band {:?} is empty", self.wall_band));
        }
        if !(self.break_strain >= 0.0) {
            out.push(format!("links.break_strain must be non-negative (got {})", self.break_strain));
        }
        if self.max_links_per_partner == 0 && self.max_links_per_platelet > 0 {
            out.push("links.max_links_per_partner must be at least 1".into());
        }
        if !(self.k_c >= 0.0) {
            out.push(format!("links.k_c must be non-negative (got {})", self.k_c));
        }
        out
    }

    /// Closest point of the adhesive band on `y = 0` to `p` (x taken modulo `lx`).
    fn wall_foot(&self, p: Vec2, lx: f64) -> Vec2 {
        let xw = p.x.rem_euclid(lx);
        Vec2::new(p.x - xw + xw.clamp(self.wall_band[0], self.wall_band[1]), 0.0)
    }
}

/// Per-run operation counters. Diagnostics (energy, link scans, snapshots) are kept out of the
/// scheme counters so those reflect the time-stepping structure only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub steps: u64,
    pub interpolated_points: u64,
    pub spread_points: u64,
    pub evaluate_calls: u64,
    pub link_evaluate_calls: u64,
    pub fluid_seconds: f64,
    pub step_seconds: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LinkUpdate {
    pub activated: usize,
    pub formed: usize,
    pub broken: usize,
}

pub struct Simulation {
    pub grid: GridSpec,
    pub solver: FluidSolver,
    pub fluid: FluidState,
    pub platelets: Vec<Platelet>,
    /// Reference shapes (tracked-point layout), keyed like `platelets`.
    pub references: Vec<Vec<Vec2>>,
    pub links: Vec<Link>,
    pub policy: Option<LinkPolicy>,
    pub dt: f64,
    pub time: f64,
    pub step: u64,
    /// Velocity scale for the blow-up sentinel.
    pub u_max: f64,
    /// When false the structure is passive: forces are computed but not spread.
    pub spread_forces: bool,
    /// Platelets whose centroid passes this x-coordinate are removed.
    pub exit_x: Option<f64>,
    pub track_energy: bool,
    pub last_energy_change: Option<f64>,
    pub counters: Counters,
}

impl Simulation {
    pub fn new(
        solver: FluidSolver,
        fluid: FluidState,
        platelets: Vec<(Platelet, Vec<Vec2>)>,
        dt: f64,
        u_max: f64,
    ) -> Result<Self> {
        let grid = solver.grid;
        fluid.check(&grid)?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(IbError::Config(vec![format!("dt must be positive (got {dt})")]));
        }
        if let Some(first) = platelets.first() {
            let m = first.0.method();
            if platelets.iter().any(|p| p.0.method() != m) {
                return Err(IbError::WrongBackend("platelets must all use the same method".into()));
            }
        }
        let mut ids = HashSet::new();
        for (p, r) in &platelets {
            if !ids.insert(p.id()) {
                return Err(IbError::Config(vec![format!("duplicate platelet id {}", p.id())]));
            }
            if r.len() != p.tracked().len() {
                return Err(IbError::SizeMismatch("reference shape size".into()));
            }
        }
        let (platelets, references) = platelets.into_iter().unzip();
        Ok(Simulation {
            grid,
            solver,
            fluid,
            platelets,
            references,
            links: Vec::new(),
            policy: None,
            dt,
            time: 0.0,
            step: 0,
            u_max,
            spread_forces: true,
            exit_x: None,
            track_energy: false,
            last_energy_change: None,
            counters: Counters::default(),
        })
    }

    pub fn method(&self) -> Option<Method> {
        self.platelets.first().map(|p| p.method())
    }

    /// Advances one step with whichever method the platelets use, then updates links and
    /// removes exited platelets.
    pub fn step(&mut self) -> Result<()> {
        let (step, time) = (self.step, self.time);
        self.advance().map_err(|e| e.at_step(step, time))?;
        if self.policy.is_some() {
            self.update_links()?;
        }
        if let Some(x) = self.exit_x {
            self.remove_exited(x)?;
        }
        Ok(())
    }

    /// One piecewise-linear IB step. Fails if any platelet uses the RBF model.
    pub fn pl_ib_step(&mut self) -> Result<()> {
        if self.platelets.iter().any(|p| p.method() != Method::PlIb) {
            return Err(IbError::WrongBackend("pl_ib_step called with RBF platelets".into()));
        }
        self.step()
    }

    /// One RBF IB step. Fails if any platelet uses the piecewise-linear model.
    pub fn rbf_ib_step(&mut self) -> Result<()> {
        if self.platelets.iter().any(|p| p.method() != Method::RbfIb) {
            return Err(IbError::WrongBackend("rbf_ib_step called with PL platelets".into()));
        }
        self.step()
    }

    fn platelet_index(&self) -> HashMap<u64, usize> {
        self.platelets.iter().enumerate().map(|(k, p)| (p.id(), k)).collect()
    }

    /// Elastic plus cohesion forces at the given sample sites.
    fn total_forces(&self, x: &[Vec<Vec2>], samples: &[Vec<Vec2>]) -> Result<Vec<Vec<Vec2>>> {
        let mut forces = Vec::with_capacity(self.platelets.len());
        for (p, xp) in self.platelets.iter().zip(x) {
            forces.push(p.elastic_forces_at(xp)?);
        }
        if !self.links.is_empty() {
            let index = self.platelet_index();
            for link in &self.links {
                let ia = index[&link.a.platelet];
                let xa = samples[ia][link.a.sample];
                let xb = match link.b {
                    LinkEnd::Site(s) => samples[index[&s.platelet]][s.sample],
                    LinkEnd::Wall(w) => w,
                };
                let (fa, fb) = cohesion_force(link.k_c, link.l0, xa, xb)?;
                forces[ia][link.a.sample] += fa;
                if let LinkEnd::Site(s) = link.b {
                    forces[index[&s.platelet]][s.sample] += fb;
                }
            }
        }
        Ok(forces)
    }

    fn advance(&mut self) -> Result<()> {
        let start = Instant::now();
        let g = self.grid;
        let dt = self.dt;
        let n = self.platelets.len();

        // 1. half-advance the tracked points with u^n
        let mut x_half = Vec::with_capacity(n);
        for p in &self.platelets {
            let u = interpolate(&self.fluid, p.tracked(), &g)?;
            self.counters.interpolated_points += u.len() as u64;
            x_half.push(p.tracked().iter().zip(&u).map(|(x, u)| *x + *u * (0.5 * dt)).collect::<Vec<_>>());
        }
        // 2. sample sites, generated once
        let mut samples = Vec::with_capacity(n);
        for (p, xh) in self.platelets.iter().zip(&x_half) {
            if p.method() == Method::RbfIb {
                self.counters.evaluate_calls += 1;
            }
            samples.push(p.sample_sites_at(xh)?);
        }
        // 3. forces at the sample sites
        let forces = self.total_forces(&x_half, &samples)?;
        // 4. spread
        let mut f = ForceDensity::zeros(&g);
        if self.spread_forces {
            for ((p, s), fp) in self.platelets.iter().zip(&samples).zip(&forces) {
                spread_into(s, fp, p.dq(), &g, &mut f)?;
                self.counters.spread_points += s.len() as u64;
            }
        }
        // 5. fluid half step
        let t = Instant::now();
        let half = self.solver.half_step(&self.fluid, &f, dt)?;
        let mut fluid_secs = t.elapsed().as_secs_f64();
        // 6. full-advance with u^{n+1/2} at the half-step positions
        let mut x_new = Vec::with_capacity(n);
        let mut u_half = Vec::with_capacity(n);
        for (p, xh) in self.platelets.iter().zip(&x_half) {
            let u = interpolate(&half, xh, &g)?;
            self.counters.interpolated_points += u.len() as u64;
            x_new.push(p.tracked().iter().zip(&u).map(|(x, u)| *x + *u * dt).collect::<Vec<_>>());
            u_half.push(u);
        }
        // 7. fluid full step
        let t = Instant::now();
        let new = self.solver.full_step(&self.fluid, &half, &f, dt)?;
        fluid_secs += t.elapsed().as_secs_f64();

        let step = self.step + 1;
        let time = step as f64 * dt;
        if let Some(reason) = blow_up_reason(&new, self.u_max) {
            return Err(IbError::BlowUp { step, time, reason });
        }
        if x_new.iter().flatten().any(|p| !p.is_finite()) {
            return Err(IbError::BlowUp { step, time, reason: "non-finite Lagrangian position".into() });
        }

        if self.track_energy {
            let old = std::mem::replace(&mut self.fluid, new);
            let mut samples_new = Vec::with_capacity(n);
            for (p, xn) in self.platelets.iter().zip(&x_new) {
                samples_new.push(p.sample_sites_at(xn)?);
            }
            let f_new = self.total_forces(&x_new, &samples_new)?;
            let mut power = 0.0;
            for ((p, fp), up) in self.platelets.iter().zip(&f_new).zip(&u_half) {
                let us = p.sample_velocities(up)?;
                power += fp.iter().zip(&us).map(|(a, b)| a.dot(*b)).sum::<f64>() * p.dq();
            }
            self.last_energy_change = Some(crate::metrics::energy_change_from_parts(
                &old,
                &self.fluid,
                power,
                dt,
                self.solver.params.rho,
                &g,
            ));
        } else {
            self.fluid = new;
        }
        for (p, xn) in self.platelets.iter_mut().zip(x_new) {
            *p.tracked_mut() = xn;
        }
        self.step = step;
        self.time = time;
        self.counters.steps += 1;
        self.counters.fluid_seconds += fluid_secs;
        self.counters.step_seconds += start.elapsed().as_secs_f64();
        Ok(())
    }

    /// Sample sites of every platelet at the current positions.
    pub fn all_sample_sites(&self) -> Result<Vec<Vec<Vec2>>> {
        self.platelets.iter().map(|p| p.sample_sites()).collect()
    }

    /// Activation, link breaking and link formation, in that order.
    pub fn update_links(&mut self) -> Result<LinkUpdate> {
        let Some(policy) = self.policy else {
            return Ok(LinkUpdate::default());
        };
        let samples = self.all_sample_sites()?;
        self.counters.link_evaluate_calls +=
            self.platelets.iter().filter(|p| p.method() == Method::RbfIb).count() as u64;
        let index = self.platelet_index();
        let lx = self.grid.lx;
        let r = policy.bind_radius;
        let site = |s: SiteRef| samples[index[&s.platelet]][s.sample];
        let mut out = LinkUpdate::default();

        // breaking
        let before = self.links.len();
        self.links.retain(|l| {
            let xb = match l.b {
                LinkEnd::Site(s) => site(s),
                LinkEnd::Wall(w) => w,
            };
            (xb - site(l.a)).norm() <= (1.0 + policy.break_strain) * l.l0
        });
        out.broken = before - self.links.len();

        // spatial hash of all sample sites, bucketed at the bind radius
        let key = |p: Vec2| ((p.x / r).floor() as i64, (p.y / r).floor() as i64);
        let mut buckets: BTreeMap<(i64, i64), Vec<(usize, usize)>> = BTreeMap::new();
        for (k, s) in samples.iter().enumerate() {
            for (j, p) in s.iter().enumerate() {
                buckets.entry(key(*p)).or_default().push((k, j));
            }
        }
        let neighbours = |p: Vec2| {
            let (bx, by) = key(p);
            let mut v = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    if let Some(b) = buckets.get(&(bx + dx, by + dy)) {
                        v.extend_from_slice(b);
                    }
                }
            }
            v.sort_unstable();
            v
        };
        let near_wall = |p: Vec2| (p - policy.wall_foot(p, lx)).norm() <= r;

        // activation spreads outward from the adhesive band through activated platelets
        loop {
            let mut changed = false;
            for k in 0..self.platelets.len() {
                if self.platelets[k].activated() {
                    continue;
                }
                let hit = samples[k].iter().any(|&p| {
                    near_wall(p)
                        || neighbours(p).iter().any(|&(q, j)| {
                            q != k && self.platelets[q].activated() && (samples[q][j] - p).norm() <= r
                        })
                });
                if hit {
                    self.platelets[k].set_activated(true);
                    out.activated += 1;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }

        // formation
        let mut count: HashMap<u64, usize> = HashMap::new();
        let mut pair: HashMap<(u64, Option<u64>), usize> = HashMap::new();
        let mut used: HashSet<SiteRef> = HashSet::new();
        for l in &self.links {
            *count.entry(l.a.platelet).or_default() += 1;
            used.insert(l.a);
            match l.b {
                LinkEnd::Site(s) => {
                    *count.entry(s.platelet).or_default() += 1;
                    used.insert(s);
                    *pair.entry((l.a.platelet, Some(s.platelet))).or_default() += 1;
                    *pair.entry((s.platelet, Some(l.a.platelet))).or_default() += 1;
                }
                LinkEnd::Wall(_) => *pair.entry((l.a.platelet, None)).or_default() += 1,
            }
        }
        let per = policy.max_links_per_partner;
        let mut order: Vec<usize> = (0..self.platelets.len()).collect();
        order.sort_by_key(|&k| self.platelets[k].id());
        for &k in &order {
            let pk = &self.platelets[k];
            if !pk.activated() {
                continue;
            }
            let id = pk.id();
            for (j, &p) in samples[k].iter().enumerate() {
                if count.get(&id).copied().unwrap_or(0) >= policy.max_links_per_platelet {
                    break;
                }
                let me = SiteRef { platelet: id, sample: j };
                if used.contains(&me) {
                    continue;
                }
                let mut best: Option<(f64, LinkEnd)> = None;
                let foot = policy.wall_foot(p, lx);
                let dw = (p - foot).norm();
                if dw <= r && dw > 0.0 && pair.get(&(id, None)).copied().unwrap_or(0) < per {
                    best = Some((dw, LinkEnd::Wall(foot)));
                }
                for (q, i) in neighbours(p) {
                    let pq = &self.platelets[q];
                    if q == k || !pq.activated() {
                        continue;
                    }
                    let other = SiteRef { platelet: pq.id(), sample: i };
                    if used.contains(&other)
                        || pair.get(&(id, Some(other.platelet))).copied().unwrap_or(0) >= per
                        || count.get(&other.platelet).copied().unwrap_or(0) >= policy.max_links_per_platelet
                    {
                        continue;
                    }
                    let d = (samples[q][i] - p).norm();
                    if d <= r && d > 0.0 && best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, LinkEnd::Site(other)));
                    }
                }
                if let Some((d, end)) = best {
                    let link = Link { a: me, b: end, k_c: policy.k_c, l0: d };
                    link.validate()?;
                    self.links.push(link);
                    used.insert(me);
                    *count.entry(id).or_default() += 1;
                    match end {
                        LinkEnd::Site(s) => {
                            used.insert(s);
                            *count.entry(s.platelet).or_default() += 1;
                            *pair.entry((id, Some(s.platelet))).or_default() += 1;
                            *pair.entry((s.platelet, Some(id))).or_default() += 1;
                        }
                        LinkEnd::Wall(_) => *pair.entry((id, None)).or_default() += 1,
                    }
                    out.formed += 1;
                }
            }
        }
        Ok(out)
    }

    /// Removes platelets whose centroid lies beyond `x_exit`, together with their links.
    /// Returns the removed ids.
    pub fn remove_exited(&mut self, x_exit: f64) -> Result<Vec<u64>> {
        let mut gone = Vec::new();
        for p in &self.platelets {
            if p.centroid()?.x > x_exit {
                gone.push(p.id());
            }
        }
        if gone.is_empty() {
            return Ok(gone);
        }
        let keep: Vec<bool> = self.platelets.iter().map(|p| !gone.contains(&p.id())).collect();
        let mut k = 0;
        self.platelets.retain(|_| {
            k += 1;
            keep[k - 1]
        });
        let mut k = 0;
        self.references.retain(|_| {
            k += 1;
            keep[k - 1]
        });
        self.links.retain(|l| {
            !gone.contains(&l.a.platelet)
                && !matches!(l.b, LinkEnd::Site(s) if gone.contains(&s.platelet))
        });
        Ok(gone)
    }

    /// Total elastic potential of all platelets relative to their reference shapes.
    pub fn potential_energy(&self) -> Result<f64> {
        let mut e = 0.0;
        for (p, r) in self.platelets.iter().zip(&self.references) {
            e += p.potential_energy(r)?;
        }
        Ok(e)
    }

    /// Largest neighbour distance between sample sites over all platelets, in grid cells.
    pub fn max_sample_spacing_cells(&self) -> Result<f64> {
        let mut m: f64 = 0.0;
        for s in self.all_sample_sites()? {
            m = m.max(max_spacing(&s));
        }
        Ok(m / self.grid.h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fluid::{FluidParams, SolverMethod, SolverOptions};
    use crate::geom::ellipse_points;
    use crate::rbfgeom::{build_operators, RbfConfig};

    fn solver(n: usize, body: bool) -> FluidSolver {
        let g = GridSpec::unit_square(n).unwrap();
        let mut p = FluidParams { rho: 1.0, mu: 8.0, body_force: [0.0, 0.0] };
        if body {
            p.body_force = FluidParams::poiseuille_force(8.0, 5.0, 1.0);
        }
        FluidSolver::new(g, p, SolverOptions { method: SolverMethod::Fft, ..Default::default() })
            .unwrap()
    }

    fn rbf_platelet(id: u64, c: Vec2, a: f64, b: f64, n_d: usize, n_s: usize) -> (Platelet, Vec<Vec2>) {
        let ops = Arc::new(build_operators(&RbfConfig::new(n_d, n_s, 1.2).unwrap()).unwrap());
        let x = ellipse_points(c, a, b, n_d);
        (Platelet::Rbf(PlateletRbf::new(id, x.clone(), &x, ops, 1e3, 1e-2).unwrap()), x)
    }

    fn pl_platelet(id: u64, c: Vec2, a: f64, b: f64, n: usize) -> (Platelet, Vec<Vec2>) {
        let x = ellipse_points(c, a, b, n);
        (Platelet::Pl(PlateletPl::new(id, x.clone(), &x, 1e3, 1e-2).unwrap()), x)
    }

    #[test]
    fn rest_state_is_a_fixed_point() {
        for p in [
            pl_platelet(0, Vec2::new(0.5, 0.5), 0.1, 0.1, 50),
            rbf_platelet(0, Vec2::new(0.5, 0.5), 0.1, 0.1, 25, 50),
        ] {
            let s = solver(32, false);
            let fluid = FluidState::zeros(&s.grid);
            let before = p.0.clone();
            let mut sim = Simulation::new(s, fluid, vec![p], 1e-4, 5.0).unwrap();
            for _ in 0..3 {
                sim.step().unwrap();
            }
            assert_eq!(sim.fluid.max_velocity(), 0.0);
            assert_eq!(sim.platelets[0], before);
        }
    }

    #[test]
    fn rbf_step_counts_match_the_scheme() {
        let s = solver(32, false);
        let fluid = FluidState::zeros(&s.grid);
        let mut sim =
            Simulation::new(s, fluid, vec![rbf_platelet(0, Vec2::new(0.5, 0.5), 0.2, 0.05, 25, 50)], 1e-4, 5.0)
                .unwrap();
        sim.rbf_ib_step().unwrap();
        assert_eq!(sim.counters.interpolated_points, 2 * 25);
        assert_eq!(sim.counters.spread_points, 50);
        assert_eq!(sim.counters.evaluate_calls, 1);
        assert!(sim.pl_ib_step().is_err());
    }

    #[test]
    fn pl_step_counts_match_the_scheme() {
        let s = solver(32, false);
        let fluid = FluidState::zeros(&s.grid);
        let mut sim =
            Simulation::new(s, fluid, vec![pl_platelet(0, Vec2::new(0.5, 0.5), 0.2, 0.05, 50)], 1e-4, 5.0).unwrap();
        sim.pl_ib_step().unwrap();
        assert_eq!(sim.counters.interpolated_points, 2 * 50);
        assert_eq!(sim.counters.spread_points, 50);
        assert_eq!(sim.counters.evaluate_calls, 0);
        assert!(sim.rbf_ib_step().is_err());
    }

    #[test]
    fn passive_points_follow_the_interpolated_velocity() {
        let s = solver(32, true);
        let fluid = s.steady_channel_flow();
        let g = s.grid;
        let (p, r) = pl_platelet(0, Vec2::new(0.3, 0.4), 0.1, 0.03, 50);
        let mut sim = Simulation::new(s, fluid.clone(), vec![(p, r)], 1e-3, 5.0).unwrap();
        sim.spread_forces = false;
        // independent midpoint integrator in the same (steady) field
        let mut x = sim.platelets[0].tracked().to_vec();
        for _ in 0..20 {
            sim.step().unwrap();
            let u = interpolate(&fluid, &x, &g).unwrap();
            let xh: Vec<Vec2> = x.iter().zip(&u).map(|(a, b)| *a + *b * 0.5e-3).collect();
            let uh = interpolate(&fluid, &xh, &g).unwrap();
            x = x.iter().zip(&uh).map(|(a, b)| *a + *b * 1e-3).collect();
        }
        for (a, b) in sim.platelets[0].tracked().iter().zip(&x) {
            assert!((*a - *b).norm() < 1e-12);
        }
        assert!(sim.platelets[0].centroid().unwrap().x > 0.3 + 20.0 * 1e-3 * 3.0);
    }

    #[test]
    fn mixed_methods_are_rejected() {
        let s = solver(16, false);
        let fluid = FluidState::zeros(&s.grid);
        let res = Simulation::new(
            s,
            fluid,
            vec![pl_platelet(0, Vec2::new(0.3, 0.5), 0.1, 0.1, 40), rbf_platelet(1, Vec2::new(0.7, 0.5), 0.1, 0.1, 12, 40)],
            1e-4,
            5.0,
        );
        assert!(res.is_err());
    }

    fn link_sim(platelets: Vec<(Platelet, Vec<Vec2>)>, policy: LinkPolicy) -> Simulation {
        let s = solver(32, false);
        let fluid = FluidState::zeros(&s.grid);
        let mut sim = Simulation::new(s, fluid, platelets, 1e-4, 5.0).unwrap();
        sim.policy = Some(policy);
        sim
    }

    fn policy(r: f64) -> LinkPolicy {
        LinkPolicy {
            bind_radius: r,
            max_links_per_platelet: 10,
            max_links_per_partner: 3,
            wall_band: [0.4, 0.7],
            break_strain: 1.0,
            k_c: 1.0,
            allow_crossing: true,
        }
    }

    #[test]
    fn isolated_platelets_form_no_links() {
        let mut sim = link_sim(
            vec![pl_platelet(0, Vec2::new(0.3, 0.5), 0.05, 0.05, 40), pl_platelet(1, Vec2::new(0.7, 0.5), 0.05, 0.05, 40)],
            policy(0.02),
        );
        let u = sim.update_links().unwrap();
        assert_eq!(u.formed, 0);
        assert!(sim.links.is_empty());
        assert!(!sim.platelets[0].activated());
    }

    #[test]
    fn single_wall_link_at_half_radius() {
        // a circle whose lowest point sits at 0.5 r above the band
        let r = 0.02;
        let c = Vec2::new(0.55, 0.5 * r + 0.05);
        let mut sim = link_sim(vec![pl_platelet(0, c, 0.05, 0.05, 8)], policy(r));
        sim.platelets[0].set_activated(true);
        let u = sim.update_links().unwrap();
        // only the lowest point (index 6 of 8) is within reach of the wall
        let wall: Vec<&Link> = sim.links.iter().filter(|l| matches!(l.b, LinkEnd::Wall(_))).collect();
        assert_eq!(u.formed, 1);
        assert_eq!(wall.len(), 1);
        assert_eq!(wall[0].a.sample, 6);
        assert!((wall[0].l0 - 0.5 * r).abs() < 1e-12);
    }

    #[test]
    fn link_cap_is_respected() {
        // a flat platelet on the band with five small neighbours just above it: 3 wall links plus
        // up to 3 per neighbour would exceed 10
        let mut ps = vec![pl_platelet(0, Vec2::new(0.55, 0.012), 0.1, 0.01, 100)];
        for k in 0..5 {
            ps.push(pl_platelet(k + 1, Vec2::new(0.47 + 0.04 * k as f64, 0.035), 0.015, 0.01, 24));
        }
        let mut sim = link_sim(ps, policy(0.03));
        sim.update_links().unwrap();
        let held = |sim: &Simulation| {
            sim.links
                .iter()
                .filter(|l| l.a.platelet == 0 || matches!(l.b, LinkEnd::Site(s) if s.platelet == 0))
                .count()
        };
        assert!(sim.platelets.iter().all(|p| p.activated()));
        assert_eq!(held(&sim), 10);
        sim.update_links().unwrap();
        assert_eq!(held(&sim), 10);
    }

    #[test]
    fn wall_links_are_limited_per_partner() {
        let mut sim = link_sim(vec![pl_platelet(0, Vec2::new(0.55, 0.012), 0.1, 0.01, 100)], policy(0.03));
        sim.update_links().unwrap();
        assert_eq!(sim.links.len(), 3);
        assert!(sim.links.iter().all(|l| matches!(l.b, LinkEnd::Wall(_))));
    }

    #[test]
    fn activation_cascades_and_links_form_between_platelets() {
        let mut sim = link_sim(
            vec![
                pl_platelet(0, Vec2::new(0.55, 0.012), 0.1, 0.01, 100),
                pl_platelet(1, Vec2::new(0.55, 0.045), 0.1, 0.01, 100),
            ],
            policy(0.03),
        );
        let u = sim.update_links().unwrap();
        assert_eq!(u.activated, 2);
        assert!(sim
            .links
            .iter()
            .any(|l| matches!(l.b, LinkEnd::Site(s) if s.platelet != l.a.platelet)));
        for l in &sim.links {
            if let LinkEnd::Site(s) = l.b {
                assert_ne!(s.platelet, l.a.platelet);
            }
        }
    }

    #[test]
    fn stretched_links_break() {
        let mut sim = link_sim(vec![pl_platelet(0, Vec2::new(0.55, 0.012), 0.1, 0.01, 100)], policy(0.03));
        sim.update_links().unwrap();
        let n = sim.links.len();
        assert!(n > 0);
        for p in sim.platelets[0].tracked_mut() {
            p.y += 0.2;
        }
        let u = sim.update_links().unwrap();
        assert_eq!(u.broken, n);
        assert!(sim.links.is_empty());
    }

    #[test]
    fn exited_platelets_are_removed_with_their_links() {
        let mut sim = link_sim(
            vec![pl_platelet(0, Vec2::new(1.89, 0.5), 0.05, 0.05, 40), pl_platelet(1, Vec2::new(1.91, 0.5), 0.05, 0.05, 40)],
            policy(0.02),
        );
        let a = SiteRef { platelet: 1, sample: 0 };
        sim.links.push(Link { a, b: LinkEnd::Site(SiteRef { platelet: 0, sample: 3 }), k_c: 1.0, l0: 0.1 });
        sim.links.push(Link { a, b: LinkEnd::Wall(Vec2::new(0.5, 0.0)), k_c: 1.0, l0: 0.1 });
        let gone = sim.remove_exited(1.9).unwrap();
        assert_eq!(gone, vec![1]);
        assert_eq!(sim.platelets.len(), 1);
        assert_eq!(sim.platelets[0].id(), 0);
        assert!(sim.links.is_empty());
    }

    #[test]
    fn runs_are_bitwise_deterministic() {
        let run = || {
            let s = solver(32, true);
            let fluid = FluidState::zeros(&s.grid);
            let mut sim = Simulation::new(
                s,
                fluid,
                vec![rbf_platelet(0, Vec2::new(0.5, 0.5), 0.2, 0.05, 25, 50)],
                2e-4,
                5.0,
            )
            .unwrap();
            for _ in 0..10 {
                sim.step().unwrap();
            }
            (sim.fluid.u.data.clone(), sim.platelets[0].tracked().to_vec())
        };
        assert_eq!(run(), run());
    }
}
