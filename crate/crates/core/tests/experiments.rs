use std::fs;

use picard_rom::driver::{accelerated_run, propagation_bound, Criterion, RunConfig};
use picard_rom::harness::{
    bench_stats, compare_criteria, emit_trace, parse_trace, reference_report, run_accelerated, run_reference,
    write_comparison, write_outputs, ExperimentConfig, COMPARISON_HEADER, TRACE_HEADER,
};
use picard_rom::problems::{Grid2D, ProblemSpec, ReactionDiffusionPair, ScalarToy, ThermalFlowSurrogate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

fn small_rd() -> ProblemSpec {
    let mut pair = ReactionDiffusionPair::demo();
    pair.grid = Grid2D::unit_square(16).unwrap();
    ProblemSpec::Rd(pair)
}

fn rd_config() -> ExperimentConfig {
    ExperimentConfig {
        problem: small_rd(),
        run: RunConfig {
            eps: 1e-8,
            rom_set: vec![1, 2],
            ..RunConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn golden_headers() {
    let golden = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/headers.txt")).unwrap();
    let mut lines = golden.lines();
    assert_eq!(lines.next(), Some(TRACE_HEADER));
    assert_eq!(lines.next(), Some(COMPARISON_HEADER));
}

#[test]
fn trace_file_replays_propagated_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = rd_config();
    let report = run_accelerated(&config, None).unwrap();
    assert!(report.converged);
    let path = dir.path().join("trace.csv");
    emit_trace(&report, &path).unwrap();
    let rows = parse_trace(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(rows.len(), report.trace.len());

    let mut err = f64::INFINITY;
    let mut prev_hash = None;
    let mut roms = 0;
    for row in &rows {
        match row.event.as_str() {
            "FOM" => err = row.delta_k.unwrap_or(f64::INFINITY),
            "ROM" => {
                err = propagation_bound(row.l_est.unwrap(), &[err, row.delta_k.unwrap()]);
                roms += 1;
            }
            "refine" => err = propagation_bound(row.l_est.unwrap(), &[err, 0.0]),
            "reject" => assert_eq!(Some(row.x_hash), prev_hash, "rejected step moved the iterate"),
            "validate" => {
                assert_eq!(Some(row.x_hash), prev_hash);
                if row.err.is_infinite() {
                    err = f64::INFINITY;
                }
            }
            other => panic!("unknown event {other}"),
        }
        assert_eq!(row.err.to_bits(), err.to_bits(), "row {}: {} vs {}", row.k, row.err, err);
        prev_hash = Some(row.x_hash);
    }
    assert!(roms > 0);
}

#[test]
fn config_round_trip_reproduces_run() {
    let mut config = rd_config();
    config.criteria = vec![Criterion::Residual, Criterion::Propagation];
    config.reference_eps = Some(1e-10);
    config.run.residual_tol = Some(3e-9);
    let text = config.to_toml_string().unwrap();
    let back = ExperimentConfig::from_toml_str(&text).unwrap();
    assert_eq!(back, config);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("experiment.toml");
    config.save(&path).unwrap();
    let loaded = ExperimentConfig::load(&path).unwrap();
    let a = run_accelerated(&config, None).unwrap();
    let b = run_accelerated(&loaded, None).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.final_state, b.final_state);
}

#[test]
fn unknown_keys_rejected() {
    assert!(ExperimentConfig::from_toml_str("repetitons = 3\n").is_err());
    assert!(ExperimentConfig::from_toml_str("[run]\nepsilon = 1e-8\n").is_err());
}

#[test]
fn scalar_config_file() {
    let text = r#"
        repetitions = 2
        output_dir = "results"

        [problem]
        kind = "scalar"
        l = 0.5
        offset = 1.0
        dim = 3
        x0 = 0.0

        [run]
        eps = 1e-10
        rom_set = []
    "#;
    let config = ExperimentConfig::from_toml_str(text).unwrap();
    let report = run_reference(&config).unwrap();
    // fixed point of x ↦ 0.5x + 1
    for v in report.final_state.iter() {
        assert!((v - 2.0).abs() < 1e-9);
    }
}

#[test]
fn rd_reference_counts_match_iterations() {
    let mut config = rd_config();
    config.run.eps = 1e-8;
    let report = run_reference(&config).unwrap();
    assert_eq!(report.fom_solves, vec![report.iterations; 2]);
    assert_eq!(report.rom_solves, vec![0, 0]);
}

#[test]
fn thermal_reference_converges() {
    let start = std::time::Instant::now();
    let config = ExperimentConfig {
        problem: ProblemSpec::Thermal(ThermalFlowSurrogate::default()),
        ..ExperimentConfig::default()
    };
    let report = run_reference(&config).unwrap();
    assert!(report.converged);
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn criteria_identical_without_reduced_systems() {
    let config = ExperimentConfig {
        problem: ProblemSpec::Scalar(ScalarToy::default()),
        run: RunConfig {
            rom_set: vec![],
            ..RunConfig::default()
        },
        criteria: Criterion::ALL.to_vec(),
        ..ExperimentConfig::default()
    };
    let rows = compare_criteria(&config).unwrap();
    assert_eq!(rows.len(), 8);
    for validation in [true, false] {
        let cells: Vec<_> = rows.iter().filter(|r| r.validation == validation).collect();
        for r in &cells {
            assert_eq!(r.iterations, cells[0].iterations);
            assert_eq!(r.true_error, 0.0);
        }
    }
    let mut buf = Vec::new();
    write_comparison(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 9);
    assert!(text.lines().skip(1).all(|l| l.split(',').count() == COMPARISON_HEADER.split(',').count()));
}

#[test]
fn outputs_written() {
    let dir = tempfile::tempdir().unwrap();
    let config = rd_config();
    let report = reference_report(&config).unwrap();
    let files = write_outputs(&config.problem, &report, dir.path(), "ref").unwrap();
    let names: Vec<String> = files
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["ref_report.json", "ref_trace.csv", "ref_y1.txt", "ref_y2.txt"]);
    let dump = fs::read_to_string(dir.path().join("ref_y1.txt")).unwrap();
    let mut lines = dump.lines();
    let header: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
    assert_eq!(&header[..2], ["16", "16"]);
    assert_eq!(lines.count(), 256);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ref_report.json")).unwrap()).unwrap();
    assert_eq!(json["iterations"], report.iterations);
}

fn normal_samples(rng: &mut ChaCha8Rng, n: usize, mean: f64, sd: f64) -> Vec<f64> {
    let dist = Normal::new(mean, sd).unwrap();
    (0..n).map(|_| dist.inverse_cdf(rng.gen_range(1e-12..1.0))).collect()
}

#[test]
fn mean_interval_coverage() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let baseline = normal_samples(&mut rng, 30, 80.0, 1.0);
    let mut hits = 0;
    for _ in 0..1000 {
        let s = normal_samples(&mut rng, 30, 100.0, 1.0);
        let st = bench_stats(&s, &baseline).unwrap();
        if st.samples.mean_ci.0 <= 100.0 && 100.0 <= st.samples.mean_ci.1 {
            hits += 1;
        }
    }
    assert!((930..=970).contains(&hits), "coverage {hits}/1000");
}

#[test]
fn normal_speedup_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rom = normal_samples(&mut rng, 30, 80.0, 1.0);
    let fom = normal_samples(&mut rng, 30, 100.0, 1.0);
    let st = bench_stats(&rom, &fom).unwrap();
    assert!((st.speedup_pct - 20.0).abs() < 1.0, "{}", st.speedup_pct);
    assert!(st.significant);
    // half-width t_{0.975,29} s/√30 with the sample s
    let t = StudentsT::new(0.0, 1.0, 29.0).unwrap().inverse_cdf(0.975);
    let half = 0.5 * (st.samples.mean_ci.1 - st.samples.mean_ci.0);
    assert!((half - t * st.samples.std_dev / 30f64.sqrt()).abs() < 1e-12);
    assert!((half - 0.37).abs() < 0.1, "{half}");
}

#[test]
fn accelerated_scalar_matches_closed_form() {
    let toy = ScalarToy::default();
    let report = accelerated_run(&toy, &RunConfig::default()).unwrap();
    assert!(report.converged);
    assert!(report.final_state[0].abs() < 1e-7);
}
