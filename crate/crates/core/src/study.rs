//! Multi-run studies: refinement ladders, area loss, energy series, stability searches and
//! timings. Each study writes one CSV report. Member runs are stored under
//! `runs/<config hash>/` and reused when their files are already present.

use crate::config::{fluid_preset, fsi_preset, named_preset, platelet_preset, RunConfig};
use crate::error::{IbError, Result};
use crate::metrics::{
    area_loss_percent, chord_metric, convergence_rate, stability_search, velocity_error, ChordStats,
};
use crate::run::{build_simulation, execute, RunStatus, RunSummary, SeriesRow};
use crate::snapshot::SnapshotFile;
use crate::stepper::Method;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    FluidConvergence,
    FsiConvergence,
    Area,
    Energy,
    Stability,
    Timing,
}

impl StudyKind {
    pub const ALL: [StudyKind; 6] = [
        StudyKind::FluidConvergence,
        StudyKind::FsiConvergence,
        StudyKind::Area,
        StudyKind::Energy,
        StudyKind::Stability,
        StudyKind::Timing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StudyKind::FluidConvergence => "fluid-convergence",
            StudyKind::FsiConvergence => "fsi-convergence",
            StudyKind::Area => "area",
            StudyKind::Energy => "energy",
            StudyKind::Stability => "stability",
            StudyKind::Timing => "timing",
        }
    }

    /// Base config used when none is given.
    pub fn default_base(self) -> RunConfig {
        match self {
            StudyKind::FluidConvergence => fluid_preset(32, 5e-3),
            StudyKind::FsiConvergence | StudyKind::Stability => fsi_preset(Method::PlIb, 32, 50, 25, 2e-4),
            StudyKind::Area | StudyKind::Energy => fsi_preset(Method::RbfIb, 32, 50, 25, 2e-4),
            StudyKind::Timing => named_preset("platelets-pl").expect("preset exists"),
        }
    }
}

impl fmt::Display for StudyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StudyKind {
    type Err = IbError;

    fn from_str(s: &str) -> Result<Self> {
        StudyKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = StudyKind::ALL.iter().map(|k| k.name()).collect();
            IbError::Config(vec![format!("unknown study '{s}' (expected one of {})", names.join(", "))])
        })
    }
}

/// One rung of a refinement ladder. `n` is the number of cells across the channel height; the
/// base aspect ratio sets the other direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub n: usize,
    pub n_s: usize,
    pub dt: f64,
}

impl Level {
    pub const fn new(n: usize, n_s: usize, dt: f64) -> Self {
        Level { n, n_s, dt }
    }
}

/// How a study picks the RBF data-site count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSites {
    Fixed(usize),
    /// `N_s / 4`.
    QuarterOfSamples,
}

impl DataSites {
    pub fn resolve(self, n_s: usize) -> usize {
        match self {
            DataSites::Fixed(n) => n,
            DataSites::QuarterOfSamples => n_s / 4,
        }
    }

    fn label(self) -> String {
        match self {
            DataSites::Fixed(n) => n.to_string(),
            DataSites::QuarterOfSamples => "n_s/4".into(),
        }
    }
}

/// Parameters of a study. [`StudyPlan::paper`] gives the ladders of the published experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyPlan {
    pub ladder: Vec<Level>,
    pub gold: Option<Level>,
    /// Data-site rules; RBF members are run once per entry. Empty means the base value.
    pub data_sites: Vec<DataSites>,
    pub methods: Vec<Method>,
    pub platelets: Vec<usize>,
    /// Overrides the base end time (ignored when `steps` is set).
    pub t_end: Option<f64>,
    pub steps: Option<u64>,
    pub dt_start: f64,
    pub dt_increment: f64,
    pub max_trials: usize,
}

impl StudyPlan {
    pub fn paper(kind: StudyKind) -> Self {
        let fsi = vec![Level::new(32, 50, 2e-4), Level::new(64, 100, 1e-4), Level::new(128, 200, 5e-5)];
        let base = StudyPlan {
            ladder: fsi.clone(),
            gold: None,
            data_sites: Vec::new(),
            methods: Vec::new(),
            platelets: Vec::new(),
            t_end: None,
            steps: None,
            dt_start: 1e-4,
            dt_increment: 1e-4,
            max_trials: 60,
        };
        match kind {
            StudyKind::FluidConvergence => StudyPlan {
                ladder: vec![Level::new(32, 0, 5e-3), Level::new(64, 0, 2.5e-3), Level::new(128, 0, 1.25e-3)],
                gold: Some(Level::new(256, 0, 6.25e-4)),
                ..base
            },
            StudyKind::FsiConvergence => StudyPlan { gold: Some(Level::new(256, 400, 2.5e-5)), ..base },
            StudyKind::Area => StudyPlan {
                ladder: [fsi, vec![Level::new(256, 400, 2.5e-5)]].concat(),
                data_sites: vec![DataSites::Fixed(25), DataSites::Fixed(50), DataSites::QuarterOfSamples],
                methods: vec![Method::RbfIb],
                ..base
            },
            StudyKind::Energy => StudyPlan {
                ladder: vec![Level::new(32, 50, 2e-4), Level::new(64, 100, 1e-4)],
                data_sites: vec![DataSites::Fixed(50)],
                ..base
            },
            StudyKind::Stability => StudyPlan {
                ladder: vec![Level::new(32, 50, 0.0), Level::new(64, 100, 0.0)],
                methods: vec![Method::PlIb, Method::RbfIb],
                ..base
            },
            StudyKind::Timing => StudyPlan {
                ladder: vec![Level::new(64, 100, 1e-4)],
                methods: vec![Method::PlIb, Method::RbfIb],
                platelets: vec![15, 30, 60],
                steps: Some(10_000),
                ..base
            },
        }
    }
}

/// Short hex key identifying a config.
pub fn config_hash(cfg: &RunConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml().as_bytes());
    format!("{digest:x}")[..16].to_string()
}

/// A finished member run: its summary, final state and series.
#[derive(Debug, Clone)]
pub struct MemberRun {
    pub config: RunConfig,
    pub summary: RunSummary,
    pub last: SnapshotFile,
    pub series: Vec<SeriesRow>,
    pub reused: bool,
}

impl MemberRun {
    pub fn status_text(&self) -> String {
        status_text(&self.summary.status)
    }

    pub fn completed(&self) -> bool {
        self.summary.status == RunStatus::Completed
    }
}

pub fn status_text(s: &RunStatus) -> String {
    match s {
        RunStatus::Completed => "ok".into(),
        RunStatus::BlowUp { step, time, reason } => format!("blow-up at step {step} (t = {time:.6}): {reason}"),
        RunStatus::SolverFailure { step, message } => format!("solver failure at step {step}: {message}"),
    }
}

/// Executes member runs, storing each under `<root>/runs/<hash>/` when a root is given.
pub struct Runner {
    root: Option<PathBuf>,
    pub executed: usize,
    pub reused: usize,
    /// Prints one line per member run to stderr.
    pub verbose: bool,
}

impl Runner {
    pub fn new(root: Option<&Path>) -> Self {
        Runner { root: root.map(Path::to_path_buf), executed: 0, reused: 0, verbose: false }
    }

    pub fn run_dir(&self, cfg: &RunConfig) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join("runs").join(config_hash(cfg)))
    }

    fn load(dir: &Path, cfg: &RunConfig) -> Option<MemberRun> {
        let stored = RunConfig::load(&dir.join("config.toml")).ok()?;
        if &stored != cfg {
            return None;
        }
        let summary: RunSummary = serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).ok()?).ok()?;
        let last = SnapshotFile::read(&dir.join("final.json")).ok()?;
        let mut r = csv::Reader::from_path(dir.join("series.csv")).ok()?;
        let series = r.deserialize().collect::<std::result::Result<Vec<SeriesRow>, _>>().ok()?;
        Some(MemberRun { config: cfg.clone(), summary, last, series, reused: true })
    }

    pub fn run(&mut self, cfg: &RunConfig) -> Result<MemberRun> {
        let mut cfg = cfg.clone();
        cfg.output.snapshots = false;
        cfg.output.dir = None;
        let dir = self.run_dir(&cfg);
        if let Some(m) = dir.as_deref().and_then(|d| Self::load(d, &cfg)) {
            self.reused += 1;
            if self.verbose {
                eprintln!("reused {} ({})", cfg.name, m.status_text());
            }
            return Ok(m);
        }
        let out = execute(&cfg, dir.as_deref(), |_| {})?;
        let last = SnapshotFile::capture(&out.sim)?;
        if let Some(d) = &dir {
            last.write(&d.join("final.json"))?;
        }
        self.executed += 1;
        let m = MemberRun { config: cfg, summary: out.summary, last, series: out.series, reused: false };
        if self.verbose {
            eprintln!("ran {} in {:.1} s ({})", m.config.name, m.summary.counters.step_seconds, m.status_text());
        }
        Ok(m)
    }
}

/// Copies `base` onto `level`: grid, sample count and time step.
pub fn at_level(base: &RunConfig, level: Level) -> RunConfig {
    let mut c = base.clone();
    let aspect = base.grid.lx / base.grid.ly;
    c.grid.ny = level.n;
    c.grid.nx = (level.n as f64 * aspect).round() as usize;
    if level.n_s > 0 {
        c.structure.n_s = level.n_s;
    }
    if level.dt > 0.0 {
        c.time.dt = level.dt;
    }
    c.name = format!("{}-{}x{}", base_name(base), c.grid.nx, c.grid.ny);
    c
}

fn base_name(c: &RunConfig) -> String {
    let is_size = |t: &str| {
        t.parse::<usize>().is_ok()
            || t.split_once('x').is_some_and(|(a, b)| a.parse::<usize>().is_ok() && b.parse::<usize>().is_ok())
    };
    c.name.split('-').take_while(|t| !is_size(t)).collect::<Vec<_>>().join("-")
}

fn grid_label(c: &RunConfig) -> String {
    format!("{}x{}", c.grid.nx, c.grid.ny)
}

fn with_method(base: &RunConfig, m: Method) -> RunConfig {
    let mut c = base.clone();
    c.method = m;
    c
}

fn apply_time(c: &mut RunConfig, plan: &StudyPlan) {
    if let Some(n) = plan.steps {
        c.time.steps = Some(n);
        c.time.t_end = None;
    } else if let Some(t) = plan.t_end {
        c.time.t_end = Some(t);
        c.time.steps = None;
    }
}

fn rate(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) if a > 0.0 && b > 0.0 => Some(convergence_rate(a, b)),
        _ => None,
    }
}

fn error_status(e: &IbError) -> String {
    format!("error: {e}")
}

/// Row of the fluid-only refinement report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidRow {
    pub grid: String,
    pub dt: f64,
    pub l2_error: Option<f64>,
    pub l2_rate: Option<f64>,
    pub linf_error: Option<f64>,
    pub linf_rate: Option<f64>,
    pub status: String,
}

/// Row of the FSI refinement report: velocity errors against the gold run, and marker errors
/// `|s - s^e|` from the chord statistics. The gold row carries its own statistics only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FsiRow {
    pub role: String,
    pub grid: String,
    pub n_s: usize,
    pub n_d: Option<usize>,
    pub dt: f64,
    pub vel_l2_error: Option<f64>,
    pub vel_l2_rate: Option<f64>,
    pub vel_linf_error: Option<f64>,
    pub vel_linf_rate: Option<f64>,
    pub pos_l2_error: Option<f64>,
    pub pos_l2_rate: Option<f64>,
    pub pos_linf_error: Option<f64>,
    pub pos_linf_rate: Option<f64>,
    pub s_2: Option<f64>,
    pub s_inf: Option<f64>,
    pub s_2_literal: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaRow {
    pub method: Method,
    pub data_sites: String,
    pub n_s: usize,
    pub n_d: Option<usize>,
    pub grid: String,
    pub dt: f64,
    pub initial_area: Option<f64>,
    pub final_area: Option<f64>,
    pub area_loss_percent: Option<f64>,
    pub status: String,
}

/// One step of an energy series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub grid: String,
    pub n_d: usize,
    pub step: u64,
    pub time: f64,
    pub energy_change: Option<f64>,
    pub kinetic: f64,
}

/// Per-run reduction of an energy series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySummary {
    pub grid: String,
    pub n_d: usize,
    pub dt: f64,
    /// `|elastic potential|` at t = 0.
    pub initial_potential: f64,
    pub peak_abs_change: f64,
    pub peak_time: f64,
    /// Largest per-step change after `t = 1`.
    pub max_change_after_1: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub scenario: String,
    pub method: Method,
    pub grid: String,
    pub n_s: usize,
    pub n_d: Option<usize>,
    pub dt_start: f64,
    pub dt_increment: f64,
    pub max_stable_dt: Option<f64>,
    pub first_unstable_dt: Option<f64>,
    /// RBF-IB rows: this method's limit over the PL-IB limit on the same grid.
    pub ratio_to_pl: Option<f64>,
    pub trials: usize,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: Method,
    pub platelets: usize,
    pub grid: String,
    pub n_s: usize,
    pub n_d: Option<usize>,
    pub dt: f64,
    pub steps: u64,
    pub seconds_per_step: Option<f64>,
    pub fluid_fraction: Option<f64>,
    pub mean_pressure_iterations: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StudyReport {
    FluidConvergence(Vec<FluidRow>),
    FsiConvergence(Vec<FsiRow>),
    Area(Vec<AreaRow>),
    Energy { series: Vec<EnergyRow>, summaries: Vec<EnergySummary> },
    Stability(Vec<StabilityRow>),
    Timing(Vec<TimingRow>),
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    let io = |e: csv::Error| IbError::Io(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

impl StudyReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        match self {
            StudyReport::FluidConvergence(r) => write_csv(path, r),
            StudyReport::FsiConvergence(r) => write_csv(path, r),
            StudyReport::Area(r) => write_csv(path, r),
            StudyReport::Energy { series, .. } => write_csv(path, series),
            StudyReport::Stability(r) => write_csv(path, r),
            StudyReport::Timing(r) => write_csv(path, r),
        }
    }
}

/// Runs a study from `base` following `plan`. With `root`, member runs go to `root/runs/` and
/// the report to `root/<study>.csv`. Member failures become rows; the study continues.
pub fn run_study(kind: StudyKind, base: &RunConfig, plan: &StudyPlan, root: Option<&Path>) -> Result<StudyReport> {
    let mut runner = Runner::new(root);
    run_study_with(kind, base, plan, &mut runner, root)
}

pub fn run_study_with(
    kind: StudyKind,
    base: &RunConfig,
    plan: &StudyPlan,
    runner: &mut Runner,
    root: Option<&Path>,
) -> Result<StudyReport> {
    base.validate()?;
    let report = match kind {
        StudyKind::FluidConvergence => StudyReport::FluidConvergence(fluid_convergence(base, plan, runner)?),
        StudyKind::FsiConvergence => StudyReport::FsiConvergence(fsi_convergence(base, plan, runner)?),
        StudyKind::Area => StudyReport::Area(area_study(base, plan, runner)?),
        StudyKind::Energy => {
            let (series, summaries) = energy_study(base, plan, runner)?;
            StudyReport::Energy { series, summaries }
        }
        StudyKind::Stability => StudyReport::Stability(stability_study(base, plan)?),
        StudyKind::Timing => StudyReport::Timing(timing_study(base, plan, runner)?),
    };
    if let Some(r) = root {
        report.write_csv(&r.join(format!("{kind}.csv")))?;
    }
    Ok(report)
}

fn gold_run(base: &RunConfig, plan: &StudyPlan, runner: &mut Runner) -> Result<MemberRun> {
    let level = plan.gold.ok_or_else(|| IbError::Config(vec!["study needs a gold level".into()]))?;
    let mut c = at_level(base, level);
    apply_time(&mut c, plan);
    c.name = format!("{}-gold", c.name);
    let g = runner.run(&c)?;
    if !g.completed() {
        return Err(IbError::Config(vec![format!("gold run did not complete: {}", g.status_text())]));
    }
    Ok(g)
}

fn fluid_convergence(base: &RunConfig, plan: &StudyPlan, runner: &mut Runner) -> Result<Vec<FluidRow>> {
    let gold = gold_run(base, plan, runner)?;
    let (gg, gs) = gold.last.fluid_state()?;
    let mut rows: Vec<FluidRow> = Vec::new();
    for &level in &plan.ladder {
        let mut c = at_level(base, level);
        apply_time(&mut c, plan);
        let mut row =
            FluidRow { grid: grid_label(&c), dt: c.time.dt, l2_error: None, l2_rate: None, linf_error: None, linf_rate: None, status: String::new() };
        let measured = runner.run(&c).and_then(|m| {
            row.status = m.status_text();
            if !m.completed() {
                return Ok(None);
            }
            let (rg, rs) = m.last.fluid_state()?;
            velocity_error(&rs, &rg, &gs, &gg).map(Some)
        });
        match measured {
            Ok(Some((e2, einf))) => {
                row.l2_error = Some(e2);
                row.linf_error = Some(einf);
            }
            Ok(None) => {}
            Err(e) => row.status = error_status(&e),
        }
        if let Some(prev) = rows.last() {
            row.l2_rate = rate(prev.l2_error, row.l2_error);
            row.linf_rate = rate(prev.linf_error, row.linf_error);
        }
        rows.push(row);
    }
    Ok(rows)
}

fn target_radius(base: &RunConfig) -> Result<f64> {
    base.platelets
        .first()
        .and_then(|p| p.rest_radius)
        .ok_or_else(|| IbError::Config(vec!["study needs a platelet with a circular rest shape".into()]))
}

fn markers(m: &MemberRun) -> Result<&[[f64; 2]]> {
    m.last
        .platelets
        .first()
        .map(|p| p.samples.as_slice())
        .ok_or_else(|| IbError::DegenerateGeometry("run has no platelet".into()))
}

fn chord_of(m: &MemberRun, r: f64) -> Result<ChordStats> {
    let pts: Vec<_> = markers(m)?.iter().map(|&[x, y]| crate::Vec2::new(x, y)).collect();
    chord_metric(&pts, r)
}

fn rbf_n_d(c: &RunConfig) -> Option<usize> {
    (c.method == Method::RbfIb).then_some(c.structure.n_d)
}

fn fsi_convergence(base: &RunConfig, plan: &StudyPlan, runner: &mut Runner) -> Result<Vec<FsiRow>> {
    let r = target_radius(base)?;
    let gold = gold_run(base, plan, runner)?;
    let (gg, gs) = gold.last.fluid_state()?;
    let gold_chord = chord_of(&gold, r)?;
    let mut rows: Vec<FsiRow> = Vec::new();
    for &level in &plan.ladder {
        let mut c = at_level(base, level);
        apply_time(&mut c, plan);
        let mut row = FsiRow {
            role: "level".into(),
            grid: grid_label(&c),
            n_s: c.structure.n_s,
            n_d: rbf_n_d(&c),
            dt: c.time.dt,
            vel_l2_error: None,
            vel_l2_rate: None,
            vel_linf_error: None,
            vel_linf_rate: None,
            pos_l2_error: None,
            pos_l2_rate: None,
            pos_linf_error: None,
            pos_linf_rate: None,
            s_2: None,
            s_inf: None,
            s_2_literal: None,
            status: String::new(),
        };
        let measured = runner.run(&c).and_then(|m| {
            row.status = m.status_text();
            if !m.completed() {
                return Ok(None);
            }
            let (rg, rs) = m.last.fluid_state()?;
            Ok(Some((velocity_error(&rs, &rg, &gs, &gg)?, chord_of(&m, r)?)))
        });
        match measured {
            Ok(Some(((e2, einf), s))) => {
                let e = s.error_against(&gold_chord);
                row.vel_l2_error = Some(e2);
                row.vel_linf_error = Some(einf);
                row.pos_l2_error = Some(e.s_2);
                row.pos_linf_error = Some(e.s_inf);
                row.s_2 = Some(s.s_2);
                row.s_inf = Some(s.s_inf);
                row.s_2_literal = Some(s.s_2_literal);
            }
            Ok(None) => {}
            Err(e) => row.status = error_status(&e),
        }
        if let Some(prev) = rows.last() {
            row.vel_l2_rate = rate(prev.vel_l2_error, row.vel_l2_error);
            row.vel_linf_rate = rate(prev.vel_linf_error, row.vel_linf_error);
            row.pos_l2_rate = rate(prev.pos_l2_error, row.pos_l2_error);
            row.pos_linf_rate = rate(prev.pos_linf_error, row.pos_linf_error);
        }
        rows.push(row);
    }
    rows.push(FsiRow {
        role: "gold".into(),
        grid: grid_label(&gold.config),
        n_s: gold.config.structure.n_s,
        n_d: rbf_n_d(&gold.config),
        dt: gold.config.time.dt,
        vel_l2_error: None,
        vel_l2_rate: None,
        vel_linf_error: None,
        vel_linf_rate: None,
        pos_l2_error: None,
        pos_l2_rate: None,
        pos_linf_error: None,
        pos_linf_rate: None,
        s_2: Some(gold_chord.s_2),
        s_inf: Some(gold_chord.s_inf),
        s_2_literal: Some(gold_chord.s_2_literal),
        status: gold.status_text(),
    });
    Ok(rows)
}

fn methods_or_base(plan: &StudyPlan, base: &RunConfig) -> Vec<Method> {
    if plan.methods.is_empty() {
        vec![base.method]
    } else {
        plan.methods.clone()
    }
}

/// `(label, n_d)` choices for one method and sample count; PL-IB has a single choice.
fn data_site_choices(plan: &StudyPlan, base: &RunConfig, method: Method, n_s: usize) -> Vec<(String, usize)> {
    match method {
        Method::PlIb => vec![("-".into(), base.structure.n_d)],
        Method::RbfIb if plan.data_sites.is_empty() => vec![(base.structure.n_d.to_string(), base.structure.n_d)],
        Method::RbfIb => plan.data_sites.iter().map(|d| (d.label(), d.resolve(n_s))).collect(),
    }
}

fn area_study(base: &RunConfig, plan: &StudyPlan, runner: &mut Runner) -> Result<Vec<AreaRow>> {
    let mut rows = Vec::new();
    for method in methods_or_base(plan, base) {
        for &level in &plan.ladder {
            let mut c = at_level(&with_method(base, method), level);
            apply_time(&mut c, plan);
            c.output.track_area = true;
            for (label, n_d) in data_site_choices(plan, base, method, c.structure.n_s) {
                c.structure.n_d = n_d;
                let mut row = AreaRow {
                    method,
                    data_sites: label,
                    n_s: c.structure.n_s,
                    n_d: rbf_n_d(&c),
                    grid: grid_label(&c),
                    dt: c.time.dt,
                    initial_area: None,
                    final_area: None,
                    area_loss_percent: None,
                    status: String::new(),
                };
                match runner.run(&c) {
                    Ok(m) => {
                        row.status = m.status_text();
                        row.initial_area = m.series.first().and_then(|s| s.area_mean);
                        if m.completed() {
                            row.final_area = m.series.last().and_then(|s| s.area_mean);
                        }
                        if let (Some(a0), Some(a1)) = (row.initial_area, row.final_area) {
                            row.area_loss_percent = Some(area_loss_percent(a0, a1));
                        }
                    }
                    Err(e) => row.status = error_status(&e),
                }
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

fn energy_study(base: &RunConfig, plan: &StudyPlan, runner: &mut Runner) -> Result<(Vec<EnergyRow>, Vec<EnergySummary>)> {
    let (mut series, mut summaries) = (Vec::new(), Vec::new());
    for &level in &plan.ladder {
        let mut c = at_level(base, level);
        apply_time(&mut c, plan);
        c.output.track_energy = true;
        c.output.series_every = 1;
        for (_, n_d) in data_site_choices(plan, base, c.method, c.structure.n_s) {
            // data sites must stay fewer than sample sites
            c.structure.n_d = if c.method == Method::RbfIb && n_d >= c.structure.n_s { c.structure.n_s / 2 } else { n_d };
            let grid = grid_label(&c);
            let mut summary = EnergySummary {
                grid: grid.clone(),
                n_d: c.structure.n_d,
                dt: c.time.dt,
                initial_potential: f64::NAN,
                peak_abs_change: 0.0,
                peak_time: 0.0,
                max_change_after_1: None,
                status: String::new(),
            };
            let run = build_simulation(&c).and_then(|s| s.potential_energy()).and_then(|pe| Ok((pe, runner.run(&c)?)));
            match run {
                Ok((pe, m)) => {
                    summary.initial_potential = pe.abs();
                    summary.status = m.status_text();
                    for r in m.series.iter().skip(1) {
                        if let Some(e) = r.energy_change {
                            if e.abs() > summary.peak_abs_change {
                                summary.peak_abs_change = e.abs();
                                summary.peak_time = r.time;
                            }
                            if r.time > 1.0 {
                                summary.max_change_after_1 = Some(summary.max_change_after_1.map_or(e, |x: f64| x.max(e)));
                            }
                        }
                        series.push(EnergyRow {
                            grid: grid.clone(),
                            n_d: c.structure.n_d,
                            step: r.step,
                            time: r.time,
                            energy_change: r.energy_change,
                            kinetic: r.kinetic,
                        });
                    }
                }
                Err(e) => summary.status = error_status(&e),
            }
            summaries.push(summary);
        }
    }
    Ok((series, summaries))
}

/// Runs `cfg` to its end time; blow-ups and solver failures come back as errors.
fn run_to_end(cfg: &RunConfig) -> Result<()> {
    let mut sim = build_simulation(cfg)?;
    for _ in 0..cfg.time.n_steps() {
        sim.step()?;
    }
    Ok(())
}

fn stability_study(base: &RunConfig, plan: &StudyPlan) -> Result<Vec<StabilityRow>> {
    let scenario = base_name(base);
    let mut rows: Vec<StabilityRow> = Vec::new();
    for &level in &plan.ladder {
        let mut pl_limit = None;
        for method in methods_or_base(plan, base) {
            let mut c = at_level(&with_method(base, method), level);
            apply_time(&mut c, plan);
            let mut row = StabilityRow {
                scenario: scenario.clone(),
                method,
                grid: grid_label(&c),
                n_s: c.structure.n_s,
                n_d: rbf_n_d(&c),
                dt_start: plan.dt_start,
                dt_increment: plan.dt_increment,
                max_stable_dt: None,
                first_unstable_dt: None,
                ratio_to_pl: None,
                trials: 0,
                failure: None,
            };
            let searched = stability_search(plan.dt_start, plan.dt_increment, plan.max_trials, |dt| {
                let mut t = c.clone();
                t.time.dt = dt;
                run_to_end(&t)
            });
            match searched {
                Ok(s) => {
                    row.max_stable_dt = s.max_stable_dt;
                    row.first_unstable_dt = s.first_unstable_dt;
                    row.trials = s.trials;
                    row.failure = s.failure;
                }
                Err(e) => row.failure = Some(error_status(&e)),
            }
            match method {
                Method::PlIb => pl_limit = row.max_stable_dt,
                Method::RbfIb => {
                    if let (Some(r), Some(p)) = (row.max_stable_dt, pl_limit) {
                        row.ratio_to_pl = Some(r / p);
                    }
                }
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

fn timing_study(base: &RunConfig, plan: &StudyPlan, runner: &mut Runner) -> Result<Vec<TimingRow>> {
    let mut rows = Vec::new();
    for &level in &plan.ladder {
        for &count in &plan.platelets {
            for method in methods_or_base(plan, base) {
                let mut c = platelet_preset(method, base.grid.nx, count, base.time.dt, base.seed);
                c.fluid = base.fluid;
                c.solver = base.solver;
                c.structure = base.structure;
                c.grid = base.grid;
                // a fixed platelet count over the whole run: no removal at the outlet
                c.output.exit_x = None;
                c.output.series_every = 0;
                let mut c = at_level(&c, level);
                c.name = format!("timing-{method}-{count}-{}", grid_label(&c));
                apply_time(&mut c, plan);
                let mut row = TimingRow {
                    method,
                    platelets: count,
                    grid: grid_label(&c),
                    n_s: c.structure.n_s,
                    n_d: rbf_n_d(&c),
                    dt: c.time.dt,
                    steps: c.time.n_steps(),
                    seconds_per_step: None,
                    fluid_fraction: None,
                    mean_pressure_iterations: None,
                    status: String::new(),
                };
                match runner.run(&c) {
                    Ok(m) => {
                        row.status = m.status_text();
                        let p = m.summary.profile;
                        row.steps = p.steps;
                        row.seconds_per_step = Some(p.seconds_per_step);
                        row.fluid_fraction = Some(p.fluid_fraction);
                        row.mean_pressure_iterations = Some(p.mean_pressure_iterations);
                    }
                    Err(e) => row.status = error_status(&e),
                }
                rows.push(row);
            }
        }
    }
    Ok(rows)
}
