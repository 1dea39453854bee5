use clap::{Parser, Subcommand};
use ibrbf::config::{named_preset, RunConfig, PRESET_NAMES};
use ibrbf::run::{run_simulation, RunStatus};
use ibrbf::study::{run_study, status_text, StudyKind, StudyPlan, StudyReport};
use ibrbf::IbError;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Environment variable naming the directory under which outputs are written.
const OUTPUT_ROOT_VAR: &str = "IBRBF_OUTPUT_ROOT";

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_BLOW_UP: u8 = 3;
const EXIT_SOLVER: u8 = 4;

#[derive(Parser)]
#[command(name = "ibrbf", version, about = "Immersed boundary simulations with piecewise-linear and RBF platelets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation from a TOML config file or a preset name.
    Run {
        config: String,
        /// Output directory (default: $IBRBF_OUTPUT_ROOT/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a study and write its CSV report.
    Study {
        /// fluid-convergence, fsi-convergence, area, energy, stability or timing.
        name: String,
        /// Base config file or preset name (default: the study's own base).
        #[arg(long)]
        base: Option<String>,
        /// TOML file overriding fields of the study plan (ladders, data sites, methods, counts).
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Output directory (default: $IBRBF_OUTPUT_ROOT/study-<name>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config file without running it.
    Validate { config: String },
    /// Print a preset as TOML, or list presets when no name is given.
    Preset { name: Option<String> },
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("output"))
}

fn load_config(arg: &str) -> Result<RunConfig, IbError> {
    let path = Path::new(arg);
    if path.exists() {
        return RunConfig::load(path);
    }
    named_preset(arg).ok_or_else(|| {
        IbError::Config(vec![format!("'{arg}' is neither a config file nor a preset ({})", PRESET_NAMES.join(", "))])
    })
}

fn config_exit(e: &IbError) -> ExitCode {
    eprintln!("{e}");
    ExitCode::from(EXIT_CONFIG)
}

fn cmd_run(config: &str, out: Option<PathBuf>) -> ExitCode {
    let cfg = match load_config(config).and_then(|c| c.validate().map(|_| c)) {
        Ok(c) => c,
        Err(e) => return config_exit(&e),
    };
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    let dir = out.or_else(|| cfg.output.dir.clone()).unwrap_or_else(|| output_root().join(&cfg.name));
    let summary = match run_simulation(&cfg, Some(&dir)) {
        Ok(s) => s,
        Err(e @ IbError::Config(_)) => return config_exit(&e),
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    };
    let p = summary.profile;
    println!(
        "{}: {} after {} steps (t = {:.6}), {} platelets, {} links, {:.3e} s/step, fluid {:.1}%, {:.1} pressure iterations/step",
        summary.name,
        status_text(&summary.status),
        summary.steps,
        summary.time,
        summary.platelets,
        summary.links,
        p.seconds_per_step,
        100.0 * p.fluid_fraction,
        p.mean_pressure_iterations
    );
    println!("outputs in {}", dir.display());
    match summary.status {
        RunStatus::Completed => ExitCode::SUCCESS,
        RunStatus::BlowUp { .. } => ExitCode::from(EXIT_BLOW_UP),
        RunStatus::SolverFailure { .. } => ExitCode::from(EXIT_SOLVER),
    }
}

fn print_report(report: &StudyReport) {
    let show = |rows: Vec<String>| rows.iter().for_each(|r| println!("{r}"));
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4e}"));
    let r2 = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    match report {
        StudyReport::FluidConvergence(rows) => show(
            rows.iter()
                .map(|r| format!("{} dt={} L2={} ({}) Linf={} ({}) {}", r.grid, r.dt, opt(r.l2_error), r2(r.l2_rate), opt(r.linf_error), r2(r.linf_rate), r.status))
                .collect(),
        ),
        StudyReport::FsiConvergence(rows) => show(
            rows.iter()
                .map(|r| {
                    format!(
                        "{} {} N_s={} dt={} vel L2={} ({}) Linf={} ({}) pos L2={} ({}) Linf={} ({}) s_2={} s_inf={} {}",
                        r.role, r.grid, r.n_s, r.dt, opt(r.vel_l2_error), r2(r.vel_l2_rate), opt(r.vel_linf_error), r2(r.vel_linf_rate),
                        opt(r.pos_l2_error), r2(r.pos_l2_rate), opt(r.pos_linf_error), r2(r.pos_linf_rate), opt(r.s_2), opt(r.s_inf), r.status
                    )
                })
                .collect(),
        ),
        StudyReport::Area(rows) => show(
            rows.iter()
                .map(|r| format!("{} N_d={} N_s={} {} dt={} loss={}% {}", r.method, r.data_sites, r.n_s, r.grid, r.dt, opt(r.area_loss_percent), r.status))
                .collect(),
        ),
        StudyReport::Energy { summaries, .. } => show(
            summaries
                .iter()
                .map(|s| {
                    format!(
                        "{} N_d={} dt={} |PE0|={:.4e} peak |E|={:.4e} at t={:.4} max E(t>1)={} {}",
                        s.grid, s.n_d, s.dt, s.initial_potential, s.peak_abs_change, s.peak_time, opt(s.max_change_after_1), s.status
                    )
                })
                .collect(),
        ),
        StudyReport::Stability(rows) => show(
            rows.iter()
                .map(|r| format!("{} {} {} max dt={} ratio={} ({} trials)", r.scenario, r.method, r.grid, opt(r.max_stable_dt), r2(r.ratio_to_pl), r.trials))
                .collect(),
        ),
        StudyReport::Timing(rows) => show(
            rows.iter()
                .map(|r| {
                    format!(
                        "{} N_p={} {} {} s/step fluid={} iterations={} {}",
                        r.method, r.platelets, r.grid, opt(r.seconds_per_step), r2(r.fluid_fraction), r2(r.mean_pressure_iterations), r.status
                    )
                })
                .collect(),
        ),
    }
}

/// Fields given in `text` replace those of the study's default plan.
fn overlay_plan(kind: StudyKind, text: &str) -> Result<StudyPlan, String> {
    let mut plan = toml::Table::try_from(StudyPlan::paper(kind)).map_err(|e| e.to_string())?;
    let given: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
    plan.extend(given);
    plan.try_into().map_err(|e: toml::de::Error| e.to_string())
}

fn cmd_study(name: &str, base: Option<String>, plan: Option<PathBuf>, out: Option<PathBuf>) -> ExitCode {
    let kind: StudyKind = match name.parse() {
        Ok(k) => k,
        Err(e) => return config_exit(&e),
    };
    let base = match base.as_deref().map(load_config).unwrap_or_else(|| Ok(kind.default_base())) {
        Ok(c) => c,
        Err(e) => return config_exit(&e),
    };
    let plan = match plan {
        None => StudyPlan::paper(kind),
        Some(p) => match std::fs::read_to_string(&p).map_err(|e| e.to_string()).and_then(|t| overlay_plan(kind, &t)) {
            Ok(plan) => plan,
            Err(e) => return config_exit(&IbError::Config(vec![format!("{}: {e}", p.display())])),
        },
    };
    let dir = out.unwrap_or_else(|| output_root().join(format!("study-{kind}")));
    match run_study(kind, &base, &plan, Some(&dir)) {
        Ok(report) => {
            print_report(&report);
            println!("report written to {}", dir.join(format!("{kind}.csv")).display());
            ExitCode::SUCCESS
        }
        Err(e @ IbError::Config(_)) => config_exit(&e),
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn cmd_validate(config: &str) -> ExitCode {
    match load_config(config).and_then(|c| c.validate().map(|_| c)) {
        Ok(c) => {
            for w in c.warnings() {
                println!("warning: {w}");
            }
            println!("{}: ok", c.name);
            ExitCode::SUCCESS
        }
        Err(e) => config_exit(&e),
    }
}

fn cmd_preset(name: Option<String>) -> ExitCode {
    match name {
        None => {
            PRESET_NAMES.iter().for_each(|n| println!("{n}"));
            ExitCode::SUCCESS
        }
        Some(n) => match named_preset(&n) {
            Some(c) => {
                print!("{}", c.to_toml());
                ExitCode::SUCCESS
            }
            None => config_exit(&IbError::Config(vec![format!("unknown preset '{n}'")])),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out } => cmd_run(&config, out),
        Command::Study { name, base, plan, out } => cmd_study(&name, base, plan, out),
        Command::Validate { config } => cmd_validate(&config),
        Command::Preset { name } => cmd_preset(name),
    }
}
