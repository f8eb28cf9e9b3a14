//! Experiment runner: configuration files, reference and accelerated runs,
//! criteria comparison, trace/report emission and runtime statistics.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, StudentsT};
use thiserror::Error;

use crate::coupling::CouplingError;
use crate::driver::{accelerated_run, CoupledProblem, Criterion, DriverError, RunConfig, RunReport, StepEvent};
use crate::problems::{make_coupled_problem, ProblemError, ProblemSpec, ThermalFlowSurrogate};

/// Minimum number of runtime samples accepted by [`bench_stats`].
pub const MIN_SAMPLES: usize = 5;

/// Header of every trace CSV.
pub const TRACE_HEADER: &str = "k,err,delta_k,step_norm,event,l_est,x_hash";

/// Header of the criteria comparison CSV.
pub const COMPARISON_HEADER: &str =
    "criterion,validation,iterations,fom_iterations,true_error,estimate,validations,validation_failures,rejected_steps";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialization error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error("reference run did not converge within {0} iterations")]
    MaxIterationsExceeded(usize),
    #[error("need at least {needed} samples, got {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("invalid experiment: {0}")]
    InvalidConfig(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Contents of an experiment file.
///
/// ```toml
/// repetitions = 5
/// output_dir = "out"
/// criteria = ["residual", "propagation"]
/// reference_eps = 1e-8
///
/// [problem]
/// kind = "thermal"
/// nx = 16
/// # ... remaining problem parameters
///
/// [run]
/// eps = 1e-8
/// n_b = 5
/// rom_set = [1]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub repetitions: usize,
    pub output_dir: PathBuf,
    /// Criteria compared by [`compare_criteria`].
    pub criteria: Vec<Criterion>,
    /// Tolerance of the reference run; `run.eps` when absent.
    pub reference_eps: Option<f64>,
    /// Seed for the order of benchmark repetitions.
    pub seed: u64,
    /// Run benchmark repetitions on separate threads.
    pub parallel: bool,
    pub problem: ProblemSpec,
    pub run: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            repetitions: 1,
            output_dir: PathBuf::from("out"),
            criteria: Criterion::ALL.to_vec(),
            reference_eps: None,
            seed: 0,
            parallel: false,
            problem: ProblemSpec::Thermal(ThermalFlowSurrogate::default()),
            run: RunConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String, HarnessError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        fs::write(path, self.to_toml_string()?).map_err(io_err(path))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.repetitions == 0 {
            return Err(HarnessError::InvalidConfig("repetitions must be at least 1".into()));
        }
        if let Some(e) = self.reference_eps {
            if !(e > 0.0 && e.is_finite()) {
                return Err(HarnessError::InvalidConfig(format!("reference_eps must be positive, got {e}")));
            }
        }
        Ok(())
    }

    /// Plain Picard settings used for the reference solution.
    pub fn reference_run_config(&self) -> RunConfig {
        RunConfig {
            eps: self.reference_eps.unwrap_or(self.run.eps),
            rom_set: Vec::new(),
            validation_loop: false,
            ..self.run.clone()
        }
    }
}

/// Plain Picard iteration with every system solved by the full model.
pub fn run_reference(config: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    let problem = make_coupled_problem(&config.problem)?;
    reference_with(problem.as_ref(), config)
}

/// Like [`run_reference`] but returns the report even without convergence.
pub fn reference_report(config: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    let problem = make_coupled_problem(&config.problem)?;
    Ok(accelerated_run(problem.as_ref(), &config.reference_run_config())?)
}

/// Accelerated run without a reference comparison.
pub fn run_unreferenced(config: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    let problem = make_coupled_problem(&config.problem)?;
    Ok(accelerated_run(problem.as_ref(), &config.run)?)
}

fn reference_with(problem: &dyn CoupledProblem, config: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    let run = config.reference_run_config();
    let report = accelerated_run(problem, &run)?;
    if !report.converged {
        return Err(HarnessError::MaxIterationsExceeded(run.k_max));
    }
    Ok(report)
}

/// Accelerated run; the distance to `reference` (computed when absent) is
/// stored in `error_vs_reference`.
pub fn run_accelerated(config: &ExperimentConfig, reference: Option<&RunReport>) -> Result<RunReport, HarnessError> {
    let problem = make_coupled_problem(&config.problem)?;
    let owned;
    let reference = match reference {
        Some(r) => r,
        None => {
            owned = reference_with(problem.as_ref(), config)?;
            &owned
        }
    };
    let mut report = accelerated_run(problem.as_ref(), &config.run)?;
    report.error_vs_reference = Some(report.final_state.distance(&reference.final_state));
    Ok(report)
}

/// Writes `<stem>_report.json`, `<stem>_trace.csv` and one
/// `<stem>_<field>.txt` per field. Returns the written paths.
pub fn write_outputs(spec: &ProblemSpec, report: &RunReport, dir: &Path, stem: &str) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();

    let json = dir.join(format!("{stem}_report.json"));
    write_json(report, &json)?;
    written.push(json);

    let trace = dir.join(format!("{stem}_trace.csv"));
    emit_trace(report, &trace)?;
    written.push(trace);

    let problem = make_coupled_problem(spec)?;
    for field in problem.fields(&report.final_state) {
        let path = dir.join(format!("{stem}_{}.txt", field.name));
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        field.write_to(&mut w).and_then(|_| w.flush()).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), HarnessError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.flush().map_err(io_err(path))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:e}")).unwrap_or_default()
}

/// Trace as CSV, one row per trace entry in order.
pub fn emit_trace(report: &RunReport, path: &Path) -> Result<(), HarnessError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_trace(report, &mut w).map_err(io_err(path))
}

pub fn write_trace<W: Write>(report: &RunReport, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for e in &report.trace {
        writeln!(
            w,
            "{},{:e},{},{:e},{},{},{:016x}",
            e.k,
            e.err,
            fmt_opt(e.delta_k),
            e.step_norm,
            e.event.as_str(),
            fmt_opt(e.l_est),
            e.x_hash
        )?;
    }
    w.flush()
}

/// One row of a trace CSV read back.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub err: f64,
    pub delta_k: Option<f64>,
    pub step_norm: f64,
    pub event: String,
    pub l_est: Option<f64>,
    pub x_hash: u64,
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRow>, HarnessError> {
    let bad = |line: usize, what: &str| HarnessError::InvalidConfig(format!("trace line {line}: {what}"));
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    let opt = |s: &str| -> Result<Option<f64>, std::num::ParseFloatError> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some)
        }
    };
    lines
        .enumerate()
        .map(|(n, line)| {
            let n = n + 2;
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 7 {
                return Err(bad(n, "expected 7 columns"));
            }
            let num = |_| bad(n, "malformed number");
            Ok(TraceRow {
                k: cols[0].parse().map_err(|_| bad(n, "malformed k"))?,
                err: cols[1].parse().map_err(num)?,
                delta_k: opt(cols[2]).map_err(num)?,
                step_norm: cols[3].parse().map_err(num)?,
                event: cols[4].to_string(),
                l_est: opt(cols[5]).map_err(num)?,
                x_hash: u64::from_str_radix(cols[6], 16).map_err(|_| bad(n, "malformed hash"))?,
            })
        })
        .collect()
}

/// One cell of the criteria comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub criterion: Criterion,
    pub validation: bool,
    pub iterations: usize,
    /// Iterations that used the full model for the ROM-treated systems.
    pub fom_iterations: usize,
    pub true_error: f64,
    pub estimate: f64,
    pub validations: usize,
    pub validation_failures: usize,
    pub rejected_steps: usize,
}

/// Runs every listed criterion with and without the validation loop
/// against a shared reference solution.
pub fn compare_criteria(config: &ExperimentConfig) -> Result<Vec<ComparisonRow>, HarnessError> {
    if config.criteria.len() < 2 {
        return Err(HarnessError::InvalidConfig("comparison needs at least two criteria".into()));
    }
    let problem = make_coupled_problem(&config.problem)?;
    let reference = reference_with(problem.as_ref(), config)?;
    let mut rows = Vec::new();
    for validation in [true, false] {
        for &criterion in &config.criteria {
            let run = RunConfig {
                criterion,
                validation_loop: validation,
                ..config.run.clone()
            };
            let report = accelerated_run(problem.as_ref(), &run)?;
            let fom_iterations = report
                .trace
                .iter()
                .filter(|e| matches!(e.event, StepEvent::Fom | StepEvent::Refine))
                .count();
            rows.push(ComparisonRow {
                criterion,
                validation,
                iterations: report.iterations,
                fom_iterations,
                true_error: report.final_state.distance(&reference.final_state),
                estimate: report.final_estimate,
                validations: report.validations,
                validation_failures: report.validation_failures,
                rejected_steps: report.rejected_steps,
            });
        }
    }
    Ok(rows)
}

pub fn write_comparison<W: Write>(rows: &[ComparisonRow], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "{COMPARISON_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:e},{:e},{},{},{}",
            r.criterion,
            if r.validation { "with" } else { "without" },
            r.iterations,
            r.fom_iterations,
            r.true_error,
            r.estimate,
            r.validations,
            r.validation_failures,
            r.rejected_steps
        )?;
    }
    w.flush()
}

/// Location and spread of one set of runtimes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub std_dev: f64,
    /// 95% Student-t interval for the mean.
    pub mean_ci: (f64, f64),
    /// 95% order-statistic interval for the median.
    pub median_ci: (f64, f64),
    /// One-sided 95% bounds on the mean, `(lower, upper)`.
    pub mean_one_sided: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsSummary {
    pub samples: SampleStats,
    pub baseline: SampleStats,
    /// `100·(1 − mean/baseline mean)`.
    pub speedup_pct: f64,
    /// `100·(1 − median/baseline median)`.
    pub speedup_median_pct: f64,
    /// The one-sided 95% intervals of the two means do not overlap.
    pub significant: bool,
}

fn t_quantile(dof: usize, p: f64) -> f64 {
    StudentsT::new(0.0, 1.0, dof as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(p)
}

/// 1-based ranks `(l, u)` of the order statistics bracketing the median with
/// at least 95% coverage; `(1, n)` when no tighter pair qualifies.
pub fn median_ci_ranks(n: usize) -> (usize, usize) {
    let bin = Binomial::new(0.5, n as u64).expect("valid binomial");
    let mut l = 1;
    // P(X_(l) ≤ m ≤ X_(n−l+1)) = 1 − 2·P(B ≤ l − 1)
    while l < n / 2 && 2.0 * bin.cdf(l as u64) <= 0.05 {
        l += 1;
    }
    (l, n + 1 - l)
}

pub fn sample_stats(samples: &[f64]) -> Result<SampleStats, HarnessError> {
    let n = samples.len();
    if n < MIN_SAMPLES {
        return Err(HarnessError::TooFewSamples {
            needed: MIN_SAMPLES,
            found: n,
        });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let var = sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std_dev = var.sqrt();
    let se = std_dev / (n as f64).sqrt();
    let half = t_quantile(n - 1, 0.975) * se;
    let one = t_quantile(n - 1, 0.95) * se;
    let (l, u) = median_ci_ranks(n);
    Ok(SampleStats {
        n,
        mean,
        median,
        std_dev,
        mean_ci: (mean - half, mean + half),
        median_ci: (sorted[l - 1], sorted[u - 1]),
        mean_one_sided: (mean - one, mean + one),
    })
}

/// Statistics of `samples` and their speedup over `baseline`.
pub fn bench_stats(samples: &[f64], baseline: &[f64]) -> Result<StatsSummary, HarnessError> {
    let s = sample_stats(samples)?;
    let b = sample_stats(baseline)?;
    Ok(StatsSummary {
        speedup_pct: 100.0 * (1.0 - s.mean / b.mean),
        speedup_median_pct: 100.0 * (1.0 - s.median / b.median),
        significant: s.mean_one_sided.1 < b.mean_one_sided.0,
        samples: s,
        baseline: b,
    })
}

/// Wall-clock times and summary of a benchmark.
#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub reference_times: Vec<f64>,
    pub accelerated_times: Vec<f64>,
    pub summary: StatsSummary,
}

#[derive(Clone, Copy)]
enum BenchKind {
    Reference,
    Accelerated,
}

fn timed_run(problem: &dyn CoupledProblem, run: &RunConfig) -> Result<f64, HarnessError> {
    let start = Instant::now();
    let report = accelerated_run(problem, run)?;
    let secs = start.elapsed().as_secs_f64();
    if !report.converged {
        return Err(HarnessError::MaxIterationsExceeded(run.k_max));
    }
    Ok(secs)
}

/// Times `repetitions` reference and accelerated runs each, interleaved in
/// an order shuffled by `seed`.
pub fn run_bench(config: &ExperimentConfig) -> Result<BenchResult, HarnessError> {
    config.validate()?;
    let reference = config.reference_run_config();
    let mut jobs: Vec<BenchKind> = (0..config.repetitions)
        .flat_map(|_| [BenchKind::Reference, BenchKind::Accelerated])
        .collect();
    jobs.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));

    let run_job = |kind: BenchKind| -> Result<(BenchKind, f64), HarnessError> {
        let problem = make_coupled_problem(&config.problem)?;
        let run = match kind {
            BenchKind::Reference => &reference,
            BenchKind::Accelerated => &config.run,
        };
        Ok((kind, timed_run(problem.as_ref(), run)?))
    };
    let results: Vec<Result<(BenchKind, f64), HarnessError>> = if config.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs.iter().map(|&kind| scope.spawn(move || run_job(kind))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("benchmark thread panicked"))
                .collect()
        })
    } else {
        jobs.iter().map(|&kind| run_job(kind)).collect()
    };

    let mut reference_times = Vec::new();
    let mut accelerated_times = Vec::new();
    for r in results {
        match r? {
            (BenchKind::Reference, t) => reference_times.push(t),
            (BenchKind::Accelerated, t) => accelerated_times.push(t),
        }
    }
    let summary = bench_stats(&accelerated_times, &reference_times)?;
    Ok(BenchResult {
        reference_times,
        accelerated_times,
        summary,
    })
}
