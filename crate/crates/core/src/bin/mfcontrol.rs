use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mfcontrol::config::{parse_config, RunConfig};
use mfcontrol::experiment::{robustness_sweep, run_experiment, sparsity_report, write_sweep, ReferenceCache};
use mfcontrol::grid::{GridField, PolicyField};
use mfcontrol::nag::Method;
use mfcontrol::problem::validate_derivatives;
use mfcontrol::riccati::{solve_cs_riccati, DEFAULT_DT_ODE};

/// Mean-field control solver.
#[derive(Parser)]
#[command(name = "mfcontrol", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a feedback policy and write report/policy artifacts.
    Run {
        config: PathBuf,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Write the last adjoint field.
        #[arg(long)]
        dump_adjoint: bool,
        /// Write the final particle trajectories (large).
        #[arg(long)]
        dump_trajectories: bool,
    },
    /// Evaluate a frozen policy on perturbed initial laws.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Per-slice fraction of nodes where the policy vanishes.
    Sparsity {
        policy: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
    },
    /// Check the problem's analytic derivatives against finite differences.
    Validate {
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Solve the flocking Riccati equation and print `t,a` samples.
    Riccati {
        #[arg(long, default_value_t = 1.0)]
        k: f64,
        #[arg(long, default_value_t = 0.1)]
        gamma1: f64,
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
        #[arg(long, default_value_t = DEFAULT_DT_ODE)]
        dt: f64,
    },
}

const EXIT_CONFIG: u8 = 2;

fn load(path: &PathBuf) -> Result<RunConfig, ExitCode> {
    parse_config(path).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(EXIT_CONFIG)
    })
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("MFCONTROL_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring MFCONTROL_THREADS={v}"),
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, method, output, dump_adjoint, dump_trajectories } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(m) = method {
                match Method::parse(&m) {
                    Some(m) => cfg.method = m,
                    None => {
                        eprintln!("error: unknown method `{m}` (fipde, ipde, emreg)");
                        return ExitCode::from(EXIT_CONFIG);
                    }
                }
            }
            if let Some(o) = output {
                cfg.output = o;
            }
            cfg.dump_adjoint |= dump_adjoint;
            cfg.dump_trajectories |= dump_trajectories;
            if let Err(e) = cfg.solver_config() {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_CONFIG);
            }
            run_experiment(&cfg).map(|r| {
                for w in &r.warnings {
                    eprintln!("warning: {w}");
                }
                println!(
                    "{} {}: J = {:.8} after {} iterations; artifacts in {}",
                    cfg.problem.name(),
                    cfg.method.as_str(),
                    r.final_cost(),
                    r.records.len() - 1,
                    cfg.output.display()
                );
            })
        }
        Command::Sweep { config, policy, output } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(o) = output {
                cfg.output = o;
            }
            (|| {
                let grid = cfg.space_time_grid()?;
                let f = GridField::read_csv_file(&policy)?;
                let f = GridField::from_values(grid, f.components(), f.into_values())?;
                let mut cache = ReferenceCache::new(Some(cfg.output.join("sweep_cache")));
                let cells = robustness_sweep(&cfg, &PolicyField(f), &mut cache)?;
                write_sweep(&cfg.output, &cells, cfg.sweep.steps)?;
                let finite: Vec<f64> = cells.iter().map(|c| c.rel_gap).filter(|g| g.is_finite()).collect();
                let worst = finite.iter().copied().fold(0.0, f64::max);
                println!("{} cells, worst relative gap {worst:.4e}", cells.len());
                Ok(())
            })()
        }
        Command::Sparsity { policy, threshold } => GridField::read_csv_file(&policy).map(|f| {
            let p = PolicyField(f);
            println!("j,t,zero_fraction");
            for (j, z) in sparsity_report(&p, threshold).iter().enumerate() {
                println!("{j},{},{z}", p.grid().time(j));
            }
        }),
        Command::Validate { config, samples, step } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match cfg.problem.build().and_then(|p| validate_derivatives(p.as_ref(), samples, step, cfg.seed)) {
                Ok(report) => {
                    for c in &report.checks {
                        println!("{:<22} {:.3e}{}", c.name, c.max_rel_error, if c.flagged { "  FLAGGED" } else { "" });
                    }
                    if !report.all_clear() {
                        return ExitCode::FAILURE;
                    }
                    Ok(())
                }
                Err(e) => Err(e),
            }
        }
        Command::Riccati { k, gamma1, horizon, dt } => {
            solve_cs_riccati(k, gamma1, horizon, dt).and_then(|s| s.write_csv(std::io::stdout().lock()))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
