//! Acceptance criteria 1-10. Each test prints one `criterion N: PASS|FAIL` line.
//!
//! Criteria 1 and 9 run by default. The others take minutes to hours and are ignored; run them
//! with `cargo test --release --test acceptance -- --ignored --nocapture`. Member runs and
//! study reports are kept under `$IBRBF_OUTPUT_ROOT` (default: the cargo target tmp dir) and
//! reused by later tests, so the FSI gold runs are computed once.

use ibrbf::config::{aggregation_preset, fluid_preset, fsi_preset, platelet_preset, platelet_stability_preset, RunConfig};
use ibrbf::fluid::{FluidSolver, SolverMethod, SolverOptions};
use ibrbf::forces::{cohesion_force, LinkEnd};
use ibrbf::geom::ellipse_points;
use ibrbf::ibkernel::{interpolate, phi, spread};
use ibrbf::mesh::{divergence, FluidState, GridSpec};
use ibrbf::metrics::{max_speed_in_column, reference_area};
use ibrbf::rbfgeom::{build_operators, build_operators_with, nodes, BuildPath, Nodes, RbfConfig};
use ibrbf::run::{build_simulation, execute, RunStatus};
use ibrbf::snapshot::SnapshotFile;
use ibrbf::stepper::{Method, Simulation};
use ibrbf::study::{run_study, DataSites, Level, StudyKind, StudyPlan, StudyReport};
use ibrbf::Vec2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

static SERIAL: Mutex<()> = Mutex::new(());

/// One test at a time: runs share output directories and the timing criteria need the CPU.
fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn root() -> PathBuf {
    std::env::var_os("IBRBF_OUTPUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} - {detail}", if pass { "PASS" } else { "FAIL" });
    println!("{line}");
    let dir = root();
    std::fs::create_dir_all(&dir).unwrap();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(dir.join("verdicts.txt")).unwrap();
    writeln!(f, "{line}").unwrap();
    assert!(pass, "{line}");
}

fn fft(mut c: RunConfig) -> RunConfig {
    c.solver.method = SolverMethod::Fft;
    c
}

fn within(x: f64, lo: f64, hi: f64) -> bool {
    x >= lo && x <= hi
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("none".into(), |x| format!("{x:.4e}"))
}

#[test]
fn criterion_01_fluid_convergence() {
    let _g = serial();
    let t = Instant::now();
    let base = fft(fluid_preset(32, 5e-3));
    let report = run_study(StudyKind::FluidConvergence, &base, &StudyPlan::paper(StudyKind::FluidConvergence), Some(&root().join("fluid-convergence"))).unwrap();
    let StudyReport::FluidConvergence(rows) = report else { panic!("wrong report") };
    let secs = t.elapsed().as_secs_f64();
    let e32 = rows[0].l2_error.unwrap_or(f64::NAN);
    let (p1, p2) = (rows[1].l2_rate.unwrap_or(f64::NAN), rows[2].l2_rate.unwrap_or(f64::NAN));
    let pass = rows.iter().all(|r| r.status == "ok")
        && within(p1, 2.07 - 0.4, 2.07 + 0.4)
        && within(p2, 2.32 - 0.4, 2.32 + 0.4)
        && within(e32, 6.4090e-3 / 3.0, 6.4090e-3 * 3.0)
        && secs < 600.0;
    verdict(1, pass, &format!("L2(32) = {e32:.4e} (paper 6.4090e-03), rates {p1:.3}, {p2:.3} (paper 2.07, 2.32), {secs:.0} s"));
}

fn fsi_plan() -> StudyPlan {
    StudyPlan::paper(StudyKind::FsiConvergence)
}

#[test]
#[ignore = "about 25 min: 256x256 gold run"]
fn criterion_02_pl_fsi_convergence() {
    let _g = serial();
    let t = Instant::now();
    let base = fft(fsi_preset(Method::PlIb, 32, 50, 25, 2e-4));
    let report = run_study(StudyKind::FsiConvergence, &base, &fsi_plan(), Some(&root().join("fsi"))).unwrap();
    let StudyReport::FsiConvergence(rows) = report else { panic!("wrong report") };
    let secs = t.elapsed().as_secs_f64();
    for r in &rows {
        println!(
            "  {} {} N_s={} dt={:e}: vel L2 {} ({}) Linf {} ({}), pos L2 {} ({}) Linf {} ({}) [{}]",
            r.role, r.grid, r.n_s, r.dt, fmt(r.vel_l2_error), fmt(r.vel_l2_rate), fmt(r.vel_linf_error), fmt(r.vel_linf_rate),
            fmt(r.pos_l2_error), fmt(r.pos_l2_rate), fmt(r.pos_linf_error), fmt(r.pos_linf_rate), r.status
        );
    }
    let (p1, p2) = (rows[1].vel_l2_rate.unwrap_or(f64::NAN), rows[2].vel_l2_rate.unwrap_or(f64::NAN));
    let pass = within(p1, 1.4, 2.4) && within(p2, 0.7, 2.3) && p2 < p1 && secs < 7200.0;
    verdict(2, pass, &format!("velocity L2 rates {p1:.2}, {p2:.2} (need [1.4, 2.4], [0.7, 2.3], decreasing; paper 3.45, 1.93), {secs:.0} s"));
}

#[test]
#[ignore = "about 25 min: two 256x256 gold runs (one shared with criterion 2)"]
fn criterion_03_rbf_structure_accuracy() {
    let _g = serial();
    let gold_s2 = |method: Method| {
        let base = fft(fsi_preset(method, 32, 50, 25, 2e-4));
        let report = run_study(StudyKind::FsiConvergence, &base, &fsi_plan(), Some(&root().join("fsi"))).unwrap();
        let StudyReport::FsiConvergence(rows) = report else { panic!("wrong report") };
        let gold = rows.iter().find(|r| r.role == "gold").unwrap();
        (gold.s_2.unwrap(), gold.s_inf.unwrap())
    };
    let (pl, pl_inf) = gold_s2(Method::PlIb);
    let (rbf, rbf_inf) = gold_s2(Method::RbfIb);
    let ratio = pl / rbf;
    verdict(
        3,
        ratio >= 5.0,
        &format!("256x256 gold s_2: PL {pl:.4e}, RBF (N_d = 25) {rbf:.4e}, ratio {ratio:.1} (need >= 5; paper 11.7); s_inf PL {pl_inf:.3e}, RBF {rbf_inf:.3e}"),
    );
}

#[test]
#[ignore = "about 10 min"]
fn criterion_04_area_conservation() {
    let _g = serial();
    let base = fft(fsi_preset(Method::RbfIb, 32, 50, 25, 2e-4));
    let plan = StudyPlan {
        ladder: vec![Level::new(64, 100, 1e-4), Level::new(128, 200, 5e-5)],
        data_sites: vec![DataSites::Fixed(25), DataSites::Fixed(50)],
        ..StudyPlan::paper(StudyKind::Area)
    };
    let StudyReport::Area(rows) = run_study(StudyKind::Area, &base, &plan, Some(&root().join("area"))).unwrap() else { panic!() };
    let exact = reference_area(0.1);
    let mut pass = rows.iter().all(|r| r.status == "ok");
    let mut parts = Vec::new();
    for r in &rows {
        let a0 = r.initial_area.unwrap_or(f64::NAN);
        let rel0 = ((a0 - exact) / exact).abs();
        let loss = r.area_loss_percent.unwrap_or(f64::NAN);
        pass &= rel0 <= 1e-7;
        if r.grid == "64x64" {
            pass &= loss.abs() <= 0.015;
        }
        parts.push(format!("{} N_d={}: initial rel err {rel0:.1e}, loss {loss:.4}%", r.grid, r.data_sites));
    }
    for nd in ["25", "50"] {
        let loss = |g: &str| rows.iter().find(|r| r.grid == g && r.data_sites == nd).and_then(|r| r.area_loss_percent).unwrap_or(f64::NAN);
        pass &= loss("128x128").abs() < loss("64x64").abs();
    }
    verdict(4, pass, &format!("{} (need |loss| <= 0.015% on 64x64, decreasing to 128x128; paper 0.0047-0.0049%)", parts.join("; ")));
}

#[test]
#[ignore = "about 10 min"]
fn criterion_05_stability_ratios() {
    let _g = serial();
    let plan = |ladder| StudyPlan { ladder, ..StudyPlan::paper(StudyKind::Stability) };
    let ratio_of = |base: RunConfig, level: Level, dir: &str| {
        let StudyReport::Stability(rows) = run_study(StudyKind::Stability, &base, &plan(vec![level]), Some(&root().join(dir))).unwrap() else {
            panic!()
        };
        let lim = |m: Method| rows.iter().find(|r| r.method == m).and_then(|r| r.max_stable_dt);
        (lim(Method::PlIb), lim(Method::RbfIb), rows.iter().find_map(|r| r.ratio_to_pl).unwrap_or(0.0))
    };
    let fsi = fft(fsi_preset(Method::PlIb, 32, 50, 25, 2e-4));
    let (p32, r32, q32) = ratio_of(fsi.clone(), Level::new(32, 50, 0.0), "stability-fsi-32");
    let (p64, r64, q64) = ratio_of(fsi, Level::new(64, 100, 0.0), "stability-fsi-64");
    let (pp, rp, qp) = ratio_of(fft(platelet_stability_preset(Method::PlIb, 64, 1e-4)), Level::new(64, 100, 0.0), "stability-platelet-64");
    let pass = q32 >= 3.0 && q64 >= 1.5 && qp >= 3.0;
    verdict(
        5,
        pass,
        &format!(
            "max stable dt PL/RBF: FSI 32x32 {}/{} ratio {q32:.2} (need 3); FSI 64x64 {}/{} ratio {q64:.2} (need 1.5); platelets 64x64 {}/{} ratio {qp:.2} (need 3)",
            fmt(p32), fmt(r32), fmt(p64), fmt(r64), fmt(pp), fmt(rp)
        ),
    );
}

#[test]
#[ignore = "about 5 min"]
fn criterion_06_energy() {
    let _g = serial();
    let base = fft(fsi_preset(Method::RbfIb, 32, 50, 25, 2e-4));
    let StudyReport::Energy { series, summaries } =
        run_study(StudyKind::Energy, &base, &StudyPlan::paper(StudyKind::Energy), Some(&root().join("energy"))).unwrap()
    else {
        panic!()
    };
    let mut pass = summaries.len() == 2;
    let mut parts = Vec::new();
    for s in &summaries {
        let late = s.max_change_after_1.unwrap_or(f64::INFINITY);
        let bound = 1e-10 * s.initial_potential;
        // decay: the tail of the series is small next to the spike
        let tail = series
            .iter()
            .filter(|r| r.grid == s.grid && r.time > 1.5)
            .filter_map(|r| r.energy_change)
            .fold(0.0f64, |m, e| m.max(e.abs()));
        let spike_then_decay = s.peak_time < 0.5 && tail < 1e-3 * s.peak_abs_change;
        pass &= s.status == "ok" && late <= bound && spike_then_decay;
        parts.push(format!(
            "{} N_d={}: peak |E| {:.3e} at t={:.4}, max E for t>1 {late:.3e} (bound {bound:.3e}), tail/peak {:.1e}",
            s.grid, s.n_d, s.peak_abs_change, s.peak_time, tail / s.peak_abs_change
        ));
    }
    verdict(6, pass, &parts.join("; "));
}

fn timing() -> Vec<ibrbf::study::TimingRow> {
    let base = platelet_preset(Method::PlIb, 128, 15, 1e-4, 0);
    assert_eq!(base.solver.method, SolverMethod::Pcg);
    let StudyReport::Timing(rows) = run_study(StudyKind::Timing, &base, &StudyPlan::paper(StudyKind::Timing), Some(&root().join("timing"))).unwrap()
    else {
        panic!()
    };
    rows
}

#[test]
#[ignore = "about 75 min: the timing study, shared with criterion 8"]
fn criterion_07_pressure_iterations() {
    let _g = serial();
    let rows = timing();
    let it = |m: Method| rows.iter().find(|r| r.method == m && r.platelets == 60).and_then(|r| r.mean_pressure_iterations).unwrap_or(f64::NAN);
    let (pl, rbf) = (it(Method::PlIb), it(Method::RbfIb));
    let ratio = rbf / pl;
    verdict(
        7,
        rbf <= pl,
        &format!("60 platelets, 128x64, PCG: mean pressure iterations per step PL {pl:.2}, RBF {rbf:.2}, RBF/PL {ratio:.4} ({:.1}% fewer; paper 10-30%)", 100.0 * (1.0 - ratio)),
    );
}

#[test]
#[ignore = "about 75 min: the timing study"]
fn criterion_08_scaling_shape() {
    let _g = serial();
    let t = Instant::now();
    let rows = timing();
    let secs = t.elapsed().as_secs_f64();
    let sps = |m: Method, n: usize| rows.iter().find(|r| r.method == m && r.platelets == n).and_then(|r| r.seconds_per_step).unwrap_or(f64::NAN);
    let mut pass = rows.iter().all(|r| r.status == "ok") && secs < 4.0 * 3600.0;
    let mut gaps = Vec::new();
    let mut parts = Vec::new();
    for n in [15, 30, 60] {
        let (pl, rbf) = (sps(Method::PlIb, n), sps(Method::RbfIb, n));
        pass &= rbf < pl;
        gaps.push(pl - rbf);
        parts.push(format!("N_p={n}: PL {:.2} ms, RBF {:.2} ms", 1e3 * pl, 1e3 * rbf));
    }
    pass &= gaps.windows(2).all(|w| w[1] > w[0]);
    verdict(8, pass, &format!("{}; gaps {:?} ms (need RBF below PL and a widening gap)", parts.join(", "), gaps.iter().map(|g| (g * 1e5).round() / 100.0).collect::<Vec<_>>()));
}

fn random_state(grid: &GridSpec, rng: &mut ChaCha8Rng) -> FluidState {
    let mut s = FluidState::zeros(grid);
    s.u.data.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    let (nx, ny) = (grid.nx, grid.ny);
    for j in 1..ny {
        for i in 0..nx {
            s.v.set(i, j, rng.random_range(-1.0..1.0));
        }
    }
    s
}

fn rest_simulation(method: Method) -> Simulation {
    let mut c = fft(fsi_preset(method, 32, 60, 20, 2e-4));
    c.platelets[0].rest_radius = None;
    build_simulation(&c).unwrap()
}

#[test]
fn criterion_09_property_suites() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    // delta partition of unity
    let pou = (0..1000).all(|_| {
        let r: f64 = rng.random_range(0.0..1.0);
        ((-2..=2).map(|j| phi(r - j as f64)).sum::<f64>() - 1.0).abs() <= 1e-14
    });
    check("partition of unity", pou);

    // spread/interpolate adjointness and force conservation
    let grid = GridSpec::unit_square(32).unwrap();
    let mut adjoint = true;
    let mut conserved = true;
    for _ in 0..10 {
        let n = 40;
        let pts: Vec<Vec2> = (0..n).map(|_| Vec2::new(rng.random_range(0.0..1.0), rng.random_range(0.15..0.85))).collect();
        let f: Vec<Vec2> = (0..n).map(|_| Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let dq = std::f64::consts::TAU / n as f64;
        let u = random_state(&grid, &mut rng);
        let g = spread(&pts, &f, dq, &grid).unwrap();
        let h2 = grid.h * grid.h;
        let lhs = (g.fx.data.iter().zip(&u.u.data).map(|(a, b)| a * b).sum::<f64>()
            + g.fy.data.iter().zip(&u.v.data).map(|(a, b)| a * b).sum::<f64>())
            * h2;
        let ui = interpolate(&u, &pts, &grid).unwrap();
        let rhs = f.iter().zip(&ui).map(|(a, b)| a.dot(*b)).sum::<f64>() * dq;
        adjoint &= (lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs());
        let tot = Vec2::new(g.fx.data.iter().sum::<f64>() * h2, g.fy.data.iter().sum::<f64>() * h2);
        let want = f.iter().fold(Vec2::ZERO, |s, &x| s + x) * dq;
        conserved &= (tot - want).norm() <= 1e-12;
    }
    check("spread/interpolate adjointness", adjoint);
    check("force conservation", conserved);

    // projection: divergence bound and idempotence
    let mut solver = FluidSolver::new(grid, fluid_preset(32, 5e-3).fluid.params(1.0), SolverOptions::default()).unwrap();
    let s = random_state(&grid, &mut rng);
    let div0 = divergence(&s.u, &s.v, &grid).unwrap().max_abs();
    let (p1, _) = solver.project(&s).unwrap();
    let div1 = divergence(&p1.u, &p1.v, &grid).unwrap().max_abs();
    let (p2, _) = solver.project(&p1).unwrap();
    let idem = p1.u.data.iter().zip(&p2.u.data).chain(p1.v.data.iter().zip(&p2.v.data)).all(|(a, b)| (a - b).abs() <= 1e-7);
    check("projection divergence bound", div1 <= 1e-7 * div0);
    check("projection idempotence", idem);

    // RBF identity at coincident nodes
    let ops = build_operators(&RbfConfig::new(25, 100, 1.2).unwrap()).unwrap();
    let ident = (0..25).all(|k| (0..25).all(|j| (ops.e_s[(4 * k, j)] - if j == k { 1.0 } else { 0.0 }).abs() <= 1e-10));
    check("evaluation identity at coincident nodes", ident);

    // circle derivatives: first and fourth derivatives of (cos, sin)
    let ops = build_operators(&RbfConfig::new(27, 100, 1.2).unwrap()).unwrap();
    let circle: Vec<Vec2> = nodes(27).iter().map(|&l| Vec2::new(l.cos(), l.sin())).collect();
    let mut d1 = 0.0f64;
    let mut d4 = 0.0f64;
    for (at, lam) in [(Nodes::Data, nodes(27)), (Nodes::Sample, nodes(100))] {
        let t1 = ops.differentiate(&circle, 1, at).unwrap();
        let t4 = ops.differentiate(&circle, 4, at).unwrap();
        for (k, l) in lam.iter().enumerate() {
            d1 = d1.max((t1[k] - Vec2::new(-l.sin(), l.cos())).norm());
            d4 = d4.max((t4[k] - Vec2::new(l.cos(), l.sin())).norm());
        }
    }
    check("first derivative accuracy", d1 <= 1e-6);
    check("fourth derivative accuracy", d4 <= 1e-4);

    // zero-force rest states stay exactly at rest
    for method in [Method::PlIb, Method::RbfIb] {
        let mut sim = rest_simulation(method);
        let x0 = sim.platelets[0].tracked().to_vec();
        for _ in 0..5 {
            sim.step().unwrap();
        }
        let still = sim.fluid.u.data.iter().chain(&sim.fluid.v.data).all(|&x| x == 0.0) && sim.platelets[0].tracked() == x0.as_slice();
        check(&format!("{method} rest state"), still);
    }

    // cohesion antisymmetry, bitwise
    let anti = (0..1000).all(|_| {
        let a = Vec2::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let b = Vec2::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let (fa, fb) = cohesion_force(rng.random_range(1.0..1e5), rng.random_range(0.0..0.1), a, b).unwrap();
        fa.x == -fb.x && fa.y == -fb.y
    });
    check("cohesion antisymmetry", anti);

    // circulant and dense operator builds agree
    let mut agree = true;
    for (nd, ns) in [(25, 100), (50, 200), (27, 100)] {
        let cfg = RbfConfig::new(nd, ns, 1.2).unwrap();
        let a = build_operators_with(&cfg, BuildPath::Circulant).unwrap();
        let b = build_operators_with(&cfg, BuildPath::Dense).unwrap();
        for (x, y) in [(&a.e_s, &b.e_s), (&a.d_d1, &b.d_d1), (&a.d_d4, &b.d_d4), (&a.d_s1, &b.d_s1), (&a.d_s4, &b.d_s4)] {
            agree &= (x - y).amax() <= 1e-10 * (1.0 + y.amax());
        }
    }
    check("circulant and dense builds agree", agree);

    // bitwise determinism of whole runs
    for method in [Method::PlIb, Method::RbfIb] {
        let mut c = fsi_preset(method, 16, 40, 12, 2e-4);
        c.time.t_end = Some(0.01);
        let once = || SnapshotFile::capture(&execute(&c, None, |_| {}).unwrap().sim).unwrap().to_json();
        check(&format!("{method} determinism"), once() == once());
    }

    let secs = t.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    verdict(9, pass, &format!("{} in {secs:.1} s{}", if failures.is_empty() { "all property checks hold" } else { "failed checks" }, if failures.is_empty() { String::new() } else { format!(": {}", failures.join(", ")) }));
}

#[test]
#[ignore = "about 2 min"]
fn criterion_10_aggregation() {
    let _g = serial();
    let cfg = fft(aggregation_preset());
    let unperturbed = build_simulation(&cfg).unwrap().fluid;
    let out = execute(&cfg, None, |_| {}).unwrap();
    let sim = &out.sim;
    let completed = out.summary.status == RunStatus::Completed;
    let wall_links = |id: u64| sim.links.iter().filter(|l| l.a.platelet == id && matches!(l.b, LinkEnd::Wall(_))).count();
    let near_wall: Vec<usize> = (0..3).map(wall_links).collect();
    let inter = sim.links.iter().filter(|l| matches!(l.b, LinkEnd::Site(_))).count();

    // the aggregate: every platelet holding a link
    let linked: Vec<_> = sim
        .platelets
        .iter()
        .filter(|p| sim.links.iter().any(|l| l.a.platelet == p.id() || matches!(l.b, LinkEnd::Site(s) if s.platelet == p.id())))
        .collect();
    let top = linked.iter().flat_map(|p| p.sample_sites().unwrap()).map(|q| q.y).fold(0.0, f64::max);
    let xc = linked.iter().map(|p| p.centroid().unwrap().x).sum::<f64>() / linked.len().max(1) as f64;
    let g = sim.grid;
    // first cell centre at least one cell above the aggregate
    let j = ((top + g.h) / g.h).ceil() as usize;
    let y = (j as f64 + 0.5) * g.h;
    let speed = max_speed_in_column(&sim.fluid, &g, xc, y - 1e-9, y + 1e-9);
    let base = max_speed_in_column(&unperturbed, &g, xc, y - 1e-9, y + 1e-9);
    let diverted = speed > base;

    let pass = completed && near_wall.iter().all(|&n| n > 0) && inter > 0 && diverted;
    verdict(
        10,
        pass,
        &format!(
            "{}; wall links of the three wall platelets {near_wall:?}; {inter} inter-platelet links; {} platelets in the aggregate, top y = {top:.4}; \
             speed above it at (x, y) = ({xc:.3}, {y:.4}) is {speed:.4} vs unperturbed {base:.4}",
            ibrbf::study::status_text(&out.summary.status),
            linked.len()
        ),
    );
}

#[test]
fn ellipse_area_matches_the_exact_value() {
    // supporting check for criterion 4: the area procedure on the initial ellipse
    let pts = ellipse_points(Vec2::new(0.5, 0.5), 0.2, 0.05, 25);
    let a = ibrbf::metrics::enclosed_area(&pts).unwrap();
    assert!(((a - reference_area(0.1)) / reference_area(0.1)).abs() <= 1e-7);
}
