use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use tidecal::kriging::{Basis, Kernel};
use tidecal::optimize::{Nsga2Config, ObjectiveSpec};
use tidecal::workbench::{Algo, CalibrateOptions, Project, PROJECT_ENV};
use tidecal::{Error, Scenario};

#[derive(Parser)]
#[command(
    name = "tidecal",
    version,
    about = "Surrogate-assisted calibration workbench"
)]
struct Cli {
    /// Project directory.
    #[arg(long, global = true, env = PROJECT_ENV, default_value = ".")]
    project: PathBuf,
    /// Master seed; overrides the one stored in the project.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a project from a scenario file (or the built-in scenario).
    Init {
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Synthesize noisy observations from the scenario's true parameters.
    SynthObs,
    /// Draw the Latin hypercube design.
    Design {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: Option<u64>,
    },
    /// Run the forward model on every design point.
    Evaluate,
    /// Fit one kriging model per station.
    Fit {
        #[arg(long, default_value = "matern52")]
        kernel: Kernel,
        #[arg(long, default_value = "constant")]
        basis: Basis,
    },
    /// Validate the surrogates on fresh forward-model runs.
    Validate {
        #[arg(long, default_value_t = 10)]
        n_test: usize,
    },
    /// Sobol indices of the surrogate mean RMSE.
    Sobol {
        #[arg(long, default_value_t = 4096)]
        n_mc: usize,
        #[arg(long)]
        second_order: bool,
    },
    /// Principal components of the station error table.
    Pca,
    /// Per-station quantiles and scatter data.
    Stats,
    /// Minimize a goal on the surrogates.
    Calibrate {
        /// mean, std, max or station:<id>
        #[arg(long)]
        goal: ObjectiveSpec,
        #[arg(long, default_value = "both")]
        algo: Algo,
        #[arg(long, default_value_t = 10)]
        n_starts: usize,
    },
    /// Pareto front of two or three objectives.
    Pareto {
        /// Comma-separated: mean, std, max, station:<id>, bias:<id>, nash:<id>
        #[arg(long, value_delimiter = ',', required = true)]
        objectives: Vec<ObjectiveSpec>,
        #[arg(long, default_value_t = 100)]
        pop: usize,
        #[arg(long, default_value_t = 150)]
        gens: usize,
    },
    /// Re-evaluate calibrated optima with the forward model.
    CheckOptimum {
        #[arg(long, default_value_t = tidecal::optimize::DEFAULT_GAP_TOLERANCE)]
        tolerance: f64,
    },
    /// Write report.json from every current stage.
    Report,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Scenario(_) => 1,
        Error::Stage(_) => 3,
        _ => 2,
    }
}

fn execute(cli: Cli) -> tidecal::Result<()> {
    let dir = &cli.project;
    if let Command::Init { scenario } = &cli.command {
        let scenario = scenario.as_deref().map(Scenario::load).transpose()?;
        let p = Project::init(dir, scenario, cli.seed)?;
        println!(
            "initialized {} (master seed {})",
            dir.display(),
            p.master_seed()
        );
        return Ok(());
    }
    let mut p = Project::open(dir)?;
    if let Some(seed) = cli.seed {
        p.set_master_seed(seed)?;
    }
    p.set_workers(cli.workers.map(|w| w as usize))?;
    match cli.command {
        Command::Init { .. } => unreachable!(),
        Command::SynthObs => {
            p.synth_obs()?;
            println!("observations.csv written");
        }
        Command::Design { n } => {
            let n = p.design(n.map(|n| n as usize))?;
            println!("design.csv: {n} points");
        }
        Command::Evaluate => {
            p.evaluate()?;
            println!("errors_rmse.csv, errors_bias.csv, errors_nash.csv written");
        }
        Command::Fit { kernel, basis } => {
            p.fit(kernel, basis)?;
            println!("models/ written");
        }
        Command::Validate { n_test } => {
            let v = p.validate(n_test)?;
            for s in &v.stations {
                println!(
                    "station {}: mse {:.3e} r2 {}",
                    s.station,
                    s.mse,
                    fmt_r2(s.r2)
                );
            }
            println!("mean rmse: mse {:.3e} r2 {}", v.mean_mse, fmt_r2(v.mean_r2));
        }
        Command::Sobol { n_mc, second_order } => {
            let s = p.sobol(n_mc, second_order)?;
            for (i, name) in s.names.iter().enumerate() {
                println!("{name:>6}  S {:.4}  ST {:.4}", s.first[i], s.total[i]);
            }
            println!("significant: {}", s.significant.join(", "));
        }
        Command::Pca => {
            let r = p.pca()?;
            let shown: Vec<String> = r
                .explained_ratio
                .iter()
                .map(|v| format!("{v:.3}"))
                .collect();
            println!("explained variance ratios: {}", shown.join(" "));
        }
        Command::Stats => {
            p.stats()?;
            println!("quantiles.csv, scatter.csv written");
        }
        Command::Calibrate {
            goal,
            algo,
            n_starts,
        } => {
            let opts = CalibrateOptions {
                n_starts,
                ..CalibrateOptions::new(goal, algo)
            };
            let r = p.calibrate(&opts)?;
            for run in &r.runs {
                println!(
                    "{}: best {:.6} ({} evaluations)",
                    run.algo, run.run.best_f, run.run.evals
                );
            }
            println!("best x: {:?}", r.best_x);
        }
        Command::Pareto {
            objectives,
            pop,
            gens,
        } => {
            let cfg = Nsga2Config {
                pop,
                gens,
                ..Default::default()
            };
            let f = p.pareto(&objectives, &cfg)?;
            println!("{}: {} points", f.file, f.n_points);
        }
        Command::CheckOptimum { tolerance } => {
            for r in p.check_optimum(tolerance)? {
                let verdict = if r.check.passed { "ok" } else { "FAILED" };
                println!(
                    "{}: surrogate {:.6} forward {:.6} rel_gap {:.4} {verdict}",
                    r.goal, r.check.f_hat, r.check.f_true, r.check.rel_gap
                );
            }
        }
        Command::Report => {
            let r = p.report()?;
            let stages: Vec<&str> = r.completed_stages.iter().map(|s| s.name()).collect();
            println!("report.json: {}", stages.join(", "));
        }
    }
    Ok(())
}

fn fmt_r2(r2: Option<f64>) -> String {
    r2.map_or_else(|| "undefined".into(), |v| format!("{v:.5}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
