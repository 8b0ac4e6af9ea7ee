use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ergodic_smp::adjoint::{extend_to_infinite, solve_adjoint_finite, write_pathwise_csv, Terminal};
use ergodic_smp::config::{load_config, RunConfig};
use ergodic_smp::cost::ergodic_report;
use ergodic_smp::duality::{verify_duality_finite, DualityInputs};
use ergodic_smp::exec;
use ergodic_smp::forward::{fit_moment_bound, simulate_state, write_binary, write_csv, Forcing, InitialCondition, MomentBoundFit, TimeGrid};
use ergodic_smp::model::ModelSpec;
use ergodic_smp::report::write_json;
use ergodic_smp::smp::{
    candidate_battery, check_sufficiency, evaluate_variational_inequality, optimize_control, write_trace_csv, SmpVerdict,
    SufficiencyVerdict,
};
use ergodic_smp::verify::{run_suite, Suite};

#[derive(Parser)]
#[command(name = "ergosmp", version, about = "Stochastic maximum principle toolkit for ergodic control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Problem config (TOML).
    #[arg(long)]
    model: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.paths`.
    #[arg(long)]
    paths: Option<usize>,
    /// Overrides `run.dt`.
    #[arg(long)]
    dt: Option<f64>,
    /// Overrides `run.horizon`.
    #[arg(long = "T")]
    horizon: Option<f64>,
    /// Output directory; defaults to `run.out_dir`, then the working directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Caps the worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Paths written to pathwise CSV files.
    #[arg(long, default_value_t = 16)]
    csv_paths: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Eta {
    Zero,
    One,
    State,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the state under the configured control.
    Simulate(Common),
    /// Ergodic-cost checkpoints of the configured control.
    Cost(Common),
    /// Solve the adjoint on `[0, T + buffer]` with zero terminal data.
    Adjoint(Common),
    /// Check the finite-horizon duality identity.
    DualityCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "one")]
        eta: Eta,
        /// Start time of the dual process.
        #[arg(long, default_value_t = 0.0)]
        t0: f64,
    },
    /// Variational inequality against the candidate battery.
    SmpCheck(Common),
    /// Convexity and minimality checks.
    Sufficiency(Common),
    /// Adjoint-gradient descent from the configured control.
    Optimize {
        #[command(flatten)]
        common: Common,
        /// Overrides `run.iterations`.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Run a self-check suite.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

/// A loaded problem with command-line overrides applied.
struct Setup {
    model: ModelSpec,
    run: RunConfig,
    seed: u64,
    out: PathBuf,
    csv_paths: usize,
}

fn setup(c: &Common) -> Result<Setup> {
    let (model, mut run) = load_config(&c.model)?;
    if c.seed.is_some() {
        run.seed = c.seed;
    }
    if let Some(p) = c.paths {
        run.paths = p;
    }
    if let Some(dt) = c.dt {
        run.dt = dt;
    }
    if let Some(t) = c.horizon {
        run.horizon = t;
    }
    run.validate(&model)?;
    let seed = run.seed()?;
    let out = c
        .out
        .clone()
        .or_else(|| run.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(Setup {
        model,
        run,
        seed,
        out,
        csv_paths: c.csv_paths,
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn json<T: Serialize>(s: &Setup, name: &str, kind: &str, report: &T) -> Result<()> {
    write_json(&s.out.join(name), kind, report)?;
    println!("wrote {}", s.out.join(name).display());
    Ok(())
}

#[derive(Serialize)]
struct SimulateSummary {
    grid: TimeGrid,
    paths: usize,
    seed: u64,
    control_id: String,
    moment_bound: MomentBoundFit,
}

#[derive(Serialize)]
struct AdjointSummary {
    horizon: f64,
    buffer: f64,
    paths: usize,
    seed: u64,
    /// `(t, slope of p on x, mean q)` at the checkpoints.
    profile: Vec<(f64, f64, Vec<f64>)>,
    sup_p_second_moment: f64,
}

/// Exit status of a successful run.
enum Outcome {
    Pass,
    Fail,
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Simulate(c) => with(&c, |s| {
            let law = s.run.control.build(&s.model)?;
            let ens = simulate_state(&s.model, &law, &s.run.x0(&s.model), s.run.grid()?, s.run.paths, s.seed)?;
            write_csv(&ens, s.csv_paths, create(&s.out, "paths.csv")?)?;
            write_binary(&ens, create(&s.out, "ensemble.bin")?)?;
            let summary = SimulateSummary {
                grid: ens.grid,
                paths: ens.paths,
                seed: ens.seed,
                control_id: ens.control_id.clone(),
                moment_bound: fit_moment_bound(&s.model, &ens, &law, 2)?,
            };
            json(s, "simulate.json", "simulate", &summary)?;
            Ok(Outcome::Pass)
        }),
        Command::Cost(c) => with(&c, |s| {
            let law = s.run.control.build(&s.model)?;
            let ens = simulate_state(&s.model, &law, &s.run.x0(&s.model), s.run.grid()?, s.run.paths, s.seed)?;
            let r = ergodic_report(&s.model, &ens, &law, s.run.window)?;
            println!("tail of J_T/T: [{:.6}, {:.6}] ± {:.6}", r.tail_min, r.tail_max, r.tail_ci);
            json(s, "cost.json", "ergodic_cost", &r)?;
            Ok(Outcome::Pass)
        }),
        Command::Adjoint(c) => with(&c, |s| {
            let law = s.run.control.build(&s.model)?;
            let x0 = s.run.x0(&s.model);
            let (ens, sol, report_steps) = if s.run.buffer > 0.0 {
                let inf = extend_to_infinite(
                    &s.model,
                    &law,
                    &x0,
                    s.run.horizon,
                    s.run.buffer,
                    s.run.dt,
                    s.run.paths,
                    s.seed,
                    s.run.basis()?,
                )?;
                (inf.ensemble, inf.solution, inf.report_steps)
            } else {
                let grid = s.run.grid()?;
                let ens = simulate_state(&s.model, &law, &x0, grid, s.run.paths, s.seed)?;
                let sol = solve_adjoint_finite(&s.model, &ens, &law, s.run.basis()?, Terminal::Zero)?;
                (ens, sol, grid.steps)
            };
            write_pathwise_csv(&sol, &ens, s.csv_paths, create(&s.out, "adjoint.csv")?)?;
            let stride = (report_steps / 20).max(1);
            let profile = (0..=report_steps)
                .step_by(stride)
                .map(|k| (ens.grid.time(k), sol.slope_on_state(&ens, k), sol.mean_q(&ens, k)))
                .collect();
            let summary = AdjointSummary {
                horizon: s.run.horizon,
                buffer: s.run.buffer,
                paths: s.run.paths,
                seed: s.seed,
                profile,
                sup_p_second_moment: sol.sup_p_second_moment,
            };
            json(s, "adjoint.json", "adjoint", &summary)?;
            Ok(Outcome::Pass)
        }),
        Command::DualityCheck { common, eta, t0 } => with(&common, |s| {
            let law = s.run.control.build(&s.model)?;
            let n = s.model.state_dim();
            let inputs = DualityInputs {
                t: t0,
                eta: match eta {
                    Eta::Zero => InitialCondition::Zero,
                    Eta::One => InitialCondition::Constant { value: vec![1.0; n] },
                    Eta::State => InitialCondition::State,
                },
                gamma: Forcing::Zero,
                rho: vec![Forcing::Zero; s.model.noise_dim()],
            };
            let r = verify_duality_finite(
                &s.model,
                &law,
                &s.run.x0(&s.model),
                &inputs,
                Terminal::Zero,
                s.run.grid()?,
                s.run.paths,
                s.seed,
                s.run.basis()?,
            )?;
            println!("lhs {:.6}  rhs {:.6}  rel_residual {:.3e}", r.lhs, r.rhs, r.rel_residual);
            json(s, "duality.json", "duality", &r)?;
            Ok(if r.rel_residual < s.run.duality_threshold {
                Outcome::Pass
            } else {
                Outcome::Fail
            })
        }),
        Command::SmpCheck(c) => with(&c, |s| {
            let law = s.run.control.build(&s.model)?;
            let battery = candidate_battery(&s.model, &law, s.run.battery_gains, s.seed);
            let reports = evaluate_variational_inequality(&s.model, &law, &battery, &s.run.smp_settings(&s.model)?)?;
            for r in &reports {
                println!("{:<12} tail_min {:>10.5}  tol {:.4}  {:?}", r.direction, r.tail_min, r.tolerance, r.verdict);
            }
            json(s, "smp.json", "smp", &reports)?;
            Ok(if reports.iter().all(|r| r.verdict == SmpVerdict::Consistent) {
                Outcome::Pass
            } else {
                Outcome::Fail
            })
        }),
        Command::Sufficiency(c) => with(&c, |s| {
            let law = s.run.control.build(&s.model)?;
            let battery = candidate_battery(&s.model, &law, s.run.battery_gains, s.seed);
            let r = check_sufficiency(&s.model, &law, &battery, &s.run.smp_settings(&s.model)?, s.run.probes)?;
            println!(
                "convexity_min_eigen {:.6}  minimality_tail {:.5}  {:?}",
                r.convexity_min_eigen, r.minimality_tail, r.verdict
            );
            json(s, "sufficiency.json", "sufficiency", &r)?;
            Ok(if r.verdict == SufficiencyVerdict::Certified {
                Outcome::Pass
            } else {
                Outcome::Fail
            })
        }),
        Command::Optimize { common, iters } => with(&common, |s| {
            let law = s.run.control.build(&s.model)?;
            let mut settings = s.run.optimize_settings(&s.model)?;
            if let Some(k) = iters {
                settings.iterations = k;
            }
            let r = optimize_control(&s.model, &law, &settings)?;
            write_trace_csv(&r, create(&s.out, "trace.csv")?)?;
            let last = r.trace.iter().rev().find(|t| t.accepted).expect("initial row is accepted");
            println!(
                "status {:?}  best iteration {}  params {:?}  tail [{:.6}, {:.6}]",
                r.status, r.best_iteration, last.params, r.best_cost.tail_min, r.best_cost.tail_max
            );
            json(s, "optimize.json", "optimize", &r)?;
            Ok(Outcome::Pass)
        }),
        Command::Verify { common, suite } => {
            let suite: Suite = suite.parse()?;
            with(&common, |s| {
                let r = run_suite(&s.model, suite, s.seed);
                for c in &r.checks {
                    println!("{} {:<28} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
                }
                json(s, "verify.json", "verify", &r)?;
                Ok(if r.pass { Outcome::Pass } else { Outcome::Fail })
            })
        }
    }
}

fn with(c: &Common, f: impl FnOnce(&Setup) -> Result<Outcome> + Send) -> Result<Outcome> {
    if c.workers == Some(0) {
        bail!("--workers must be at least 1");
    }
    let s = setup(c)?;
    exec::with_workers(c.workers, || f(&s))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
