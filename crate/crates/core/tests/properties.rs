//! Invariants of the measurement layer under randomised inputs.

use ibrbf::config::{fsi_preset, RunConfig};
use ibrbf::fluid::SolverMethod;
use ibrbf::geom::ellipse_points;
use ibrbf::mesh::{FluidState, GridSpec};
use ibrbf::metrics::{chord_metric, convergence_rate, enclosed_area, velocity_error};
use ibrbf::run::execute;
use ibrbf::snapshot::SnapshotFile;
use ibrbf::stepper::Method;
use ibrbf::Vec2;
use proptest::prelude::*;
use std::f64::consts::{PI, TAU};

fn field(grid: &GridSpec, a: f64, b: f64) -> FluidState {
    FluidState::from_fn(grid, move |x, y| a * (TAU * x).sin() * y * (1.0 - y), move |x, y| b * (TAU * x).cos() * (PI * y).sin())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn area_is_rigid_motion_invariant(
        a in 0.05f64..0.2, ratio in 0.2f64..1.0, cx in 0.2f64..0.8, cy in 0.2f64..0.8,
        dx in -0.3f64..0.3, dy in -0.3f64..0.3, angle in 0.0f64..TAU, n in 20usize..120,
    ) {
        let pts = ellipse_points(Vec2::new(cx, cy), a, a * ratio, n);
        let moved: Vec<Vec2> = pts.iter().map(|&p| (p - Vec2::new(cx, cy)).rotate(angle) + Vec2::new(cx + dx, cy + dy)).collect();
        let (s, t) = (enclosed_area(&pts).unwrap(), enclosed_area(&moved).unwrap());
        prop_assert!((s - t).abs() <= 1e-12 * s.max(1e-3), "{} vs {}", s, t);
        prop_assert!(s > 0.0);
    }

    #[test]
    fn chord_metric_is_nonnegative_and_zero_on_the_ideal_circle(r in 0.05f64..0.3, n in 8usize..400, noise in 0.0f64..1e-3) {
        let ideal: Vec<Vec2> = (0..n).map(|k| Vec2::new((TAU * k as f64 / n as f64).cos(), (TAU * k as f64 / n as f64).sin()) * r).collect();
        let s = chord_metric(&ideal, r).unwrap();
        prop_assert!(s.s_inf < 1e-14 && s.s_2 < 1e-14);
        let bumped: Vec<Vec2> = ideal.iter().enumerate().map(|(k, &p)| p * (1.0 + noise * (k as f64).sin())).collect();
        let t = chord_metric(&bumped, r).unwrap();
        prop_assert!(t.s_inf >= 0.0 && t.s_2 >= 0.0 && t.s_2_literal >= 0.0);
        prop_assert!(t.s_2 <= t.s_inf + 1e-15);
    }

    #[test]
    fn velocity_error_vanishes_only_for_identical_fields(a in -3.0f64..3.0, b in -3.0f64..3.0, c in 1e-6f64..1.0) {
        let gold_grid = GridSpec::unit_square(32).unwrap();
        let run_grid = GridSpec::unit_square(16).unwrap();
        let gold = field(&gold_grid, a, b);
        let same = field(&run_grid, a, b);
        let (e2, einf) = velocity_error(&same, &run_grid, &gold, &gold_grid).unwrap();
        // restriction error of a smooth field, not zero but small
        prop_assert!(e2 >= 0.0 && einf >= e2 * 0.0);
        let mut shifted = same.clone();
        shifted.u.data.iter_mut().for_each(|x| *x += c);
        let (f2, finf) = velocity_error(&shifted, &run_grid, &gold, &gold_grid).unwrap();
        prop_assert!(f2 > 0.0 && finf > 0.0);
        // repeat evaluation is bitwise stable
        prop_assert_eq!(velocity_error(&shifted, &run_grid, &gold, &gold_grid).unwrap(), (f2, finf));
        let (z2, zinf) = velocity_error(&gold, &gold_grid, &gold, &gold_grid).unwrap();
        prop_assert_eq!((z2, zinf), (0.0, 0.0));
    }

    #[test]
    fn rates_invert_powers_of_two(e in 1e-9f64..1.0, p in -1.0f64..6.0) {
        prop_assert!((convergence_rate(e * 2f64.powf(p), e) - p).abs() < 1e-10);
    }

    #[test]
    fn config_survives_toml_with_random_values(dt in 1e-6f64..1e-2, mu in 0.1f64..20.0, k_t in 1.0f64..1e6, n_d in 8usize..40) {
        let mut c = fsi_preset(Method::RbfIb, 32, 80, n_d, dt);
        c.fluid.mu = mu;
        c.structure.k_t = k_t;
        prop_assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}

#[test]
fn snapshots_round_trip_through_json() {
    let mut c = fsi_preset(Method::RbfIb, 16, 40, 12, 2e-4);
    c.time.t_end = Some(0.002);
    c.solver.method = SolverMethod::Fft;
    let out = execute(&c, None, |_| {}).unwrap();
    let snap = SnapshotFile::capture(&out.sim).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    snap.write(&path).unwrap();
    let back = SnapshotFile::read(&path).unwrap();
    assert_eq!(back, snap);
    assert_eq!(back.to_json(), snap.to_json());
    let (grid, state) = back.fluid_state().unwrap();
    assert_eq!(state, out.sim.fluid);
    assert_eq!(grid, out.sim.grid);
}
