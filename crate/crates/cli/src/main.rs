use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use picard_rom::coupling::{enumerate_paths, path_weight, DependenceGraph};
use picard_rom::driver::Criterion;
use picard_rom::harness::{
    compare_criteria, reference_report, run_accelerated, run_bench, run_unreferenced, write_comparison, write_json, write_outputs,
    ExperimentConfig, HarnessError,
};
use picard_rom::problems::ProblemSpec;

#[derive(Parser)]
#[command(name = "picard-rom", version, about = "Reduced-order accelerated Picard iterations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plain Picard reference solution.
    Reference(Common),
    /// Accelerated run compared against the reference.
    Run(Common),
    /// Every configured criterion with and without validation.
    CompareCriteria(Common),
    /// Timed repetitions of reference and accelerated runs.
    Bench(Common),
    /// Print the decreasing paths d_{i,j} of a uniform dependence graph.
    Paths(PathsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum RomChoice {
    None,
    #[value(name = "1")]
    First,
    #[value(name = "2")]
    Second,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Residual,
    Upper,
    Asymptotic,
    Propagation,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Residual => Criterion::Residual,
            CriterionArg::Upper => Criterion::UpperBound,
            CriterionArg::Asymptotic => Criterion::Asymptotic,
            CriterionArg::Propagation => Criterion::Propagation,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML); flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Problem with default parameters: rd, thermal or scalar.
    #[arg(long)]
    problem: Option<String>,
    #[arg(long, value_enum)]
    rom: Option<RomChoice>,
    #[arg(long)]
    nb: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long = "eps-rb")]
    eps_rb: Option<f64>,
    #[arg(long, value_enum)]
    criterion: Option<CriterionArg>,
    #[arg(long = "no-validation")]
    no_validation: bool,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_max: Option<usize>,
    /// Run benchmark repetitions in parallel.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct PathsArgs {
    /// Number of auxiliary systems.
    #[arg(long, default_value_t = 4)]
    systems: usize,
    /// Uniform coupling constant used for the path weights.
    #[arg(long, default_value_t = 0.5)]
    kappa: f64,
}

impl Common {
    fn experiment(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(name) = &self.problem {
            config.problem = ProblemSpec::by_name(name)?;
        }
        if let Some(rom) = self.rom {
            config.run.rom_set = match rom {
                RomChoice::None => vec![],
                RomChoice::First => vec![1],
                RomChoice::Second => vec![2],
                RomChoice::Both => vec![1, 2],
            };
        }
        if let Some(v) = self.nb {
            config.run.n_b = v;
        }
        if let Some(v) = self.eps {
            config.run.eps = v;
        }
        if let Some(v) = self.eps_rb {
            config.run.eps_rb = v;
        }
        if let Some(c) = self.criterion {
            config.run.criterion = c.into();
        }
        if self.no_validation {
            config.run.validation_loop = false;
        }
        if let Some(v) = self.reps {
            config.repetitions = v;
        }
        if let Some(v) = &self.out {
            config.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.k_max {
            config.run.k_max = v;
        }
        if self.parallel {
            config.parallel = true;
        }
        config.validate()?;
        Ok(config)
    }
}

fn summary(label: &str, report: &picard_rom::driver::RunReport) {
    println!(
        "{label}: {} converged={} iterations={} fom={:?} rom={:?} rejected={} validations={}/{} err={:e}{}",
        report.problem,
        report.converged,
        report.iterations,
        report.fom_solves,
        report.rom_solves,
        report.rejected_steps,
        report.validations,
        report.validation_failures,
        report.final_err,
        report
            .error_vs_reference
            .map(|e| format!(" error_vs_reference={e:e}"))
            .unwrap_or_default()
    );
}

fn exit_for(converged: bool) -> ExitCode {
    if converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::Reference(args) => {
            let config = args.experiment()?;
            let report = reference_report(&config)?;
            write_outputs(&config.problem, &report, &config.output_dir, "reference")?;
            summary("reference", &report);
            Ok(exit_for(report.converged))
        }
        Command::Run(args) => {
            let config = args.experiment()?;
            let reference = reference_report(&config)?;
            let report = if reference.converged {
                run_accelerated(&config, Some(&reference))?
            } else {
                log::warn!("reference did not converge; skipping the error comparison");
                run_unreferenced(&config)?
            };
            write_outputs(&config.problem, &report, &config.output_dir, "run")?;
            summary("run", &report);
            Ok(exit_for(report.converged))
        }
        Command::CompareCriteria(args) => {
            let config = args.experiment()?;
            let rows = compare_criteria(&config)?;
            fs::create_dir_all(&config.output_dir).map_err(|source| HarnessError::Io {
                path: config.output_dir.clone(),
                source,
            })?;
            let path = config.output_dir.join("criteria.csv");
            let mut buf = Vec::new();
            write_comparison(&rows, &mut buf).expect("writing to memory");
            fs::write(&path, &buf).map_err(|source| HarnessError::Io { path, source })?;
            io::stdout().write_all(&buf).ok();
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench(args) => {
            let config = args.experiment()?;
            let result = run_bench(&config)?;
            fs::create_dir_all(&config.output_dir).map_err(|source| HarnessError::Io {
                path: config.output_dir.clone(),
                source,
            })?;
            write_json(&result, &config.output_dir.join("bench.json"))?;
            let s = &result.summary;
            println!(
                "reference mean {:.4}s [{:.4}, {:.4}] median {:.4}s [{:.4}, {:.4}]",
                s.baseline.mean,
                s.baseline.mean_ci.0,
                s.baseline.mean_ci.1,
                s.baseline.median,
                s.baseline.median_ci.0,
                s.baseline.median_ci.1
            );
            println!(
                "accelerated mean {:.4}s [{:.4}, {:.4}] median {:.4}s [{:.4}, {:.4}]",
                s.samples.mean,
                s.samples.mean_ci.0,
                s.samples.mean_ci.1,
                s.samples.median,
                s.samples.median_ci.0,
                s.samples.median_ci.1
            );
            println!(
                "speedup {:.1}% (means), {:.1}% (medians), significant: {}",
                s.speedup_pct, s.speedup_median_pct, s.significant
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Paths(args) => {
            let graph = DependenceGraph::uniform(args.systems, args.kappa, 1.0)?;
            for j in 1..=args.systems {
                for i in 0..j {
                    let paths = enumerate_paths(&graph, i, j)?;
                    println!("d_{{{i},{j}}}: {} path(s)", paths.len());
                    for path in &paths {
                        println!("  {path}  weight {:e}", path_weight(&graph, path));
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(HarnessError::MaxIterationsExceeded(k)) => {
            eprintln!("error: no convergence within {k} iterations");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
