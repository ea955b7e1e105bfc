use fsiv::harness::{
    fixture_csv_string, generate_replication, ingest_csv, parse_csv, render_report, run_fit, run_study,
    write_fixture_csv, HarnessError, IngestError, ReportFormat, StudyConfig, StudyKind, StudyReport, CSV_METRICS,
    SCHEMA_VERSION,
};
use fsiv::horseshoe::ChainConfig;
use fsiv::simgen::RegimeSpec;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn quick(kind: StudyKind, seed: u64, reps: usize) -> StudyConfig {
    let mut cfg = StudyConfig::new(kind, seed);
    cfg.reps = reps;
    cfg.chain = ChainConfig {
        n_iter: 600,
        n_burn: 100,
        ..ChainConfig::default()
    };
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fixture_csv_round_trips(
        (p, n, values) in (1usize..6, 2usize..20).prop_flat_map(|(p, n)| {
            (Just(p), Just(n), prop::collection::vec(-1e6f64..1e6, (p + 2) * n))
        })
    ) {
        let y = DVector::from_column_slice(&values[..n]);
        let x = DVector::from_column_slice(&values[n..2 * n]);
        let z = DMatrix::from_row_slice(p, n, &values[2 * n..]);
        let text = fixture_csv_string(&y, &x, &z).unwrap();
        let back = parse_csv(text.as_bytes()).unwrap();
        prop_assert_eq!(back.n(), n);
        prop_assert_eq!(back.p(), p);
        prop_assert_eq!(back.y, y);
        prop_assert_eq!(back.x, x);
        prop_assert_eq!(back.z, z);
    }
}

#[test]
fn columns_are_found_by_name() {
    let text = "z1,x,z2,y\n1,2,3,4\n5,6,7,9\n";
    let data = parse_csv(text.as_bytes()).unwrap();
    assert_eq!(data.y.as_slice(), &[4.0, 9.0]);
    assert_eq!(data.x.as_slice(), &[2.0, 6.0]);
    assert_eq!(data.instrument_names, vec!["z1", "z2"]);
    assert_eq!(data.z.row(1).iter().copied().collect::<Vec<_>>(), vec![3.0, 7.0]);
}

#[test]
fn malformed_inputs_map_to_data_errors() {
    let cases: [&[u8]; 5] = [
        b"x,z1\n1,2\n3,4\n",
        b"y,x,z1\n1,2,abc\n3,4,5\n",
        b"y,x,z1\n1,2,3\n",
        b"y,x,z1\n1,2,3\n4,5\n",
        b"y,x,z1\n1,2,NaN\n4,5,6\n",
    ];
    for bytes in cases {
        let err = parse_csv(bytes).unwrap_err();
        assert_eq!(HarnessError::from(err).exit_code(), 3);
    }
    match parse_csv(b"y,x,z1\n1,2,abc\n3,4,5\n") {
        Err(IngestError::NonNumericCell { line, column, value }) => {
            assert_eq!((line, column, value.as_str()), (2, 3, "abc"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(parse_csv(b"x,z1\n1,2\n3,4\n"), Err(IngestError::MissingColumn(c)) if c == "y"));
    let missing = ingest_csv(std::path::Path::new("/nonexistent/data.csv")).unwrap_err();
    assert!(matches!(missing, IngestError::Io { .. }));
}

#[test]
fn invalid_configs_exit_with_code_two() {
    let mut cfg = quick(StudyKind::RmseRegime1, 1, 0);
    assert_eq!(run_study(&cfg).unwrap_err().exit_code(), 2);
    cfg.reps = 1;
    cfg.methods.clear();
    assert_eq!(run_study(&cfg).unwrap_err().exit_code(), 2);
    let mut cfg = quick(StudyKind::RmseRegime1, 1, 1);
    cfg.prior.c = -1.0;
    assert_eq!(run_study(&cfg).unwrap_err().exit_code(), 2);
}

#[test]
fn small_rmse_study_reports_every_method() {
    let cfg = quick(StudyKind::RmseRegime1, 3, 4);
    let report = run_study(&cfg).unwrap();
    assert_eq!(report.schema, SCHEMA_VERSION);
    assert_eq!(report.per_method.len(), 3);
    for m in &report.per_method {
        assert_eq!(m.replications_ok + m.failures, 4);
        assert!(m.rmse_mean.unwrap() > 0.0);
        assert!(m.coverage.is_none());
    }
    // One paired difference per unordered pair of methods.
    assert_eq!(report.paired_differences.len(), 3);
    assert_eq!(report.replications.len(), 12);

    let csv = render_report(&report, ReportFormat::Csv).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * CSV_METRICS.len());
    let json = render_report(&report, ReportFormat::Json).unwrap();
    let back: StudyReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
}

#[test]
fn studies_are_reproducible_from_the_seed() {
    let cfg = quick(StudyKind::IvCoverage, 9, 3);
    let a = run_study(&cfg).unwrap();
    let b = run_study(&cfg).unwrap();
    assert_eq!(a.per_method, b.per_method);
    assert_eq!(a.replications, b.replications);
    assert_eq!(a.input_hash, b.input_hash);
    let c = run_study(&quick(StudyKind::IvCoverage, 10, 3)).unwrap();
    assert_ne!(a.replications, c.replications);
    assert_ne!(a.input_hash, c.input_hash);
    assert_eq!(a.coverage_comparisons.len(), 1);
}

#[test]
fn fit_on_exported_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fixture.csv");
    let sim = generate_replication(&RegimeSpec::iv_study(1), 0).unwrap();
    write_fixture_csv(&path, sim.data.y.as_ref().unwrap(), &sim.data.x, &sim.data.z).unwrap();
    let data = ingest_csv(&path).unwrap();
    assert_eq!(data.z, sim.data.z);
    let raw = std::fs::read(&path).unwrap();
    let cfg = quick(StudyKind::FitCsv, 1, 1);
    let report = run_fit(&cfg, &data, Some(&raw)).unwrap();
    assert_eq!(report.fits.len(), 1);
    let fit = &report.fits[0];
    assert_eq!((fit.n, fit.p), (data.n(), data.p()));
    assert!(fit.beta.q025 <= fit.beta.mean && fit.beta.mean <= fit.beta.q975);
    assert!(fit.xi_sq.mean > 0.0);
    // The hash covers the data bytes.
    let other = run_fit(&cfg, &data, Some(b"different")).unwrap();
    assert_ne!(report.input_hash, other.input_hash);
}
