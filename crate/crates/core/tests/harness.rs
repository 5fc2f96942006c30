use std::path::Path;
use std::time::Instant;

use paric::harness::{
    compare, histogram, jsd, metrics_csv, outcome_divergence, reevaluate, run_arms, run_experiment, write_outputs, Arm,
    ExperimentConfig, Progress, RecordFile, RunRecord, Stat, Summary, RECORD_FILE,
};
use paric::saliency::Aggregation;
use proptest::prelude::*;

/// 200 training images, 3 classifier epochs, one trial.
fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.train_count = 200;
    cfg.dataset.val_count = 40;
    cfg.dataset.test_count = 60;
    cfg.classifier.epochs = 3;
    cfg.adapter.epochs = 5;
    cfg.k_samples = 8;
    cfg.trials = 1;
    cfg
}

const QUIET: Progress = Progress { quiet: true };

#[test]
fn default_config_matches_documented_defaults() {
    let cfg = ExperimentConfig::default();
    assert_eq!(cfg.k_samples, 50);
    assert_eq!(cfg.trials, 5);
    assert_eq!(cfg.method, Aggregation::Mean);
    assert_eq!(cfg.lambda, 0.5);
    assert_eq!(cfg.bins, 20);
    cfg.validate().unwrap();
}

#[test]
fn config_parsing_is_strict_and_defaulted() {
    let p = Path::new("inline.json");
    let cfg = ExperimentConfig::from_json(r#"{"k_samples": 7, "method": "median"}"#, p).unwrap();
    assert_eq!(cfg.k_samples, 7);
    assert_eq!(cfg.method, Aggregation::Median);
    assert_eq!(cfg.trials, 5);

    let err = ExperimentConfig::from_json(r#"{"k_sample": 7}"#, p).unwrap_err().to_string();
    assert!(err.contains("k_sample"), "{err}");
    let err = ExperimentConfig::from_json(r#"{"classifier": {"epoch": 2}}"#, p).unwrap_err().to_string();
    assert!(err.contains("epoch"), "{err}");
    let err = ExperimentConfig::from_json(r#"{"method": "mode"}"#, p).unwrap_err().to_string();
    assert!(err.contains("mode"), "{err}");
}

#[test]
fn invalid_configs_name_the_field() {
    let p = Path::new("inline.json");
    for (json, field) in [
        (r#"{"k_samples": 0}"#, "k_samples"),
        (r#"{"trials": 0}"#, "trials"),
        (r#"{"lambda": -1}"#, "lambda"),
        (r#"{"bins": 0}"#, "bins"),
        (r#"{"classifier": {"epochs": 0}}"#, "classifier.epochs"),
        (r#"{"adapter": {"epochs": 0}}"#, "adapter.epochs"),
        (r#"{"dataset": {"height": 16, "width": 16}}"#, "dataset.height"),
    ] {
        let err = ExperimentConfig::from_json(json, p).unwrap_err().to_string();
        assert!(err.contains(field), "{json}: {err}");
    }
}

#[test]
fn trial_seeds_are_distinct() {
    let cfg = ExperimentConfig::default();
    let seeds: std::collections::BTreeSet<u64> = (0..5).map(|t| cfg.trial_seed(t)).collect();
    assert_eq!(seeds.len(), 5);
}

#[test]
fn stat_uses_population_std() {
    let s = Stat::of(&[1.0, 3.0]);
    assert_eq!(s.mean, 2.0);
    assert_eq!(s.std, 1.0);
    assert_eq!(Stat::of(&[4.0]).std, 0.0);
}

#[test]
fn divergence_examples() {
    let ln2 = std::f64::consts::LN_2;
    let a = [0.1, 0.5, 0.5, 0.93];
    assert_eq!(outcome_divergence(&a, &a, 20).unwrap(), 0.0);
    assert!((outcome_divergence(&[0.0; 5], &[1.0; 5], 20).unwrap() - ln2).abs() < 1e-15);
    assert!((jsd(&[0.5, 0.5], &[1.0, 0.0]) - 0.21576155433883565).abs() < 1e-12);
    assert!(outcome_divergence(&[], &a, 20).is_err());
    assert!(outcome_divergence(&a, &[1.5], 20).is_err());
    assert_eq!(histogram(&[1.0, 0.0, 0.5], 2), vec![1.0 / 3.0, 2.0 / 3.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn divergence_is_symmetric_and_bounded(
        a in prop::collection::vec(0.0f64..=1.0, 1..40),
        b in prop::collection::vec(0.0f64..=1.0, 1..40),
        bins in 1usize..30,
    ) {
        let ab = outcome_divergence(&a, &b, bins).unwrap();
        let ba = outcome_divergence(&b, &a, bins).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&ab));
    }
}

fn assert_records_match(a: &RunRecord, b: &RunRecord) {
    assert_eq!(a.arm, b.arm);
    assert_eq!(a.summary, b.summary);
    for (x, y) in a.trials.iter().zip(&b.trials) {
        assert_eq!(x.metrics, y.metrics);
        assert_eq!(x.seed, y.seed);
        assert_eq!(x.final_loss, y.final_loss);
    }
}

#[test]
fn smoke_run_is_complete_fast_and_deterministic() {
    let cfg = tiny();
    let t = Instant::now();
    let r = run_experiment(&cfg).unwrap();
    assert!(t.elapsed().as_secs() < 60);
    assert_eq!(r.arm, Arm::ParicMean);
    assert_eq!(r.k_samples, 8);
    assert_eq!(r.trials.len(), 1);
    let row = &r.trials[0];
    assert_eq!(row.metrics.per_class_accuracy.len(), 2);
    assert!((0.0..=1.0).contains(&row.metrics.overall_accuracy));
    assert!((0.0..=std::f64::consts::LN_2).contains(&row.metrics.outcome_divergence));
    assert!((0.0..=1.0).contains(&row.metrics.localization));
    assert!(row.adapter_heldout.is_some());
    assert!(row.wall_clock_s > 0.0);
    r.verify().unwrap();

    assert_records_match(&run_experiment(&cfg).unwrap(), &r);
}

#[test]
fn mean_and_median_share_everything_but_the_reference() {
    let cfg = tiny();
    let rec = run_arms(&cfg, &[Arm::ParicMean, Arm::ParicMedian], None, QUIET).unwrap();
    let (mean, median) = (rec.run(Arm::ParicMean).unwrap(), rec.run(Arm::ParicMedian).unwrap());
    assert_eq!(mean.trials[0].seed, median.trials[0].seed);
    assert_eq!(mean.trials[0].adapter_heldout, median.trials[0].adapter_heldout);
    assert_ne!(mean.trials[0].final_loss.att, median.trials[0].final_loss.att);

    let mut median_cfg = cfg.clone();
    median_cfg.method = Aggregation::Median;
    assert_records_match(&run_experiment(&median_cfg).unwrap(), median);
}

#[test]
fn summaries_recompute_from_rows() {
    let mut cfg = tiny();
    cfg.trials = 2;
    cfg.k_samples = 2;
    let rec = run_arms(&cfg, &[Arm::Baseline, Arm::Deterministic], None, QUIET).unwrap();
    for run in &rec.runs {
        assert!(run.summary == Summary::of(&run.trials));
        run.verify().unwrap();
    }
    let base = rec.run(Arm::Baseline).unwrap();
    assert_eq!(base.lambda, 0.0);
    assert!(base.trials.iter().all(|t| t.adapter_heldout.is_none()));

    let mut tampered = base.clone();
    tampered.summary.overall_accuracy.mean += 1e-6;
    assert!(tampered.verify().is_err());
}

#[test]
fn compare_writes_outputs_that_reload_and_reevaluate() {
    let mut cfg = tiny();
    cfg.k_samples = 3;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let rec = compare(&cfg, Some(out), QUIET).unwrap();
    write_outputs(out, &rec).unwrap();

    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,lambda,k_samples,trials,acc_class0_mean,acc_class0_std,acc_class1_mean,acc_class1_std,\
         overall_mean,overall_std,divergence_mean,divergence_std,localization_mean,localization_std"
    );
    let methods: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["baseline", "deterministic", "paric-mean", "paric-median"]);
    assert_eq!(csv, metrics_csv(&rec).unwrap());

    for arm in Arm::ALL {
        assert!(out.join(format!("checkpoints/classifier_{}_t0.paric", arm.name())).is_file());
        assert!(out.join(format!("losses/{}_t0.csv", arm.name())).is_file());
    }
    assert!(out.join("checkpoints/encoder.paric").is_file());
    assert!(out.join("refs/t0/paric-mean/key.txt").is_file());
    let losses = std::fs::read_to_string(out.join("losses/paric-mean_t0.csv")).unwrap();
    assert!(losses.starts_with("epoch,cls,att,total,lambda"));
    assert_eq!(losses.lines().count(), 1 + cfg.classifier.epochs);

    let loaded = RecordFile::load(&out.join(RECORD_FILE)).unwrap();
    assert_eq!(loaded.runs.len(), 4);
    assert_eq!(loaded.config, cfg);
    let again = reevaluate(out).unwrap();
    for (a, b) in again.runs.iter().zip(&loaded.runs) {
        assert_eq!(a.summary.overall_accuracy, b.summary.overall_accuracy);
        assert!((a.summary.localization.mean - b.summary.localization.mean).abs() <= 1e-12);
    }

    // A second run reuses the cached reference maps and reproduces the record.
    let rerun = compare(&cfg, Some(out), QUIET).unwrap();
    assert_eq!(metrics_csv(&rerun).unwrap(), csv);
}

#[test]
fn tampered_record_is_rejected_on_load() {
    let mut cfg = tiny();
    cfg.classifier.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    let rec = run_arms(&cfg, &[Arm::Baseline], Some(dir.path()), QUIET).unwrap();
    write_outputs(dir.path(), &rec).unwrap();
    let path = dir.path().join(RECORD_FILE);
    let mut json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    json["runs"][0]["summary"]["overall_accuracy"]["mean"] = serde_json::json!(0.123);
    std::fs::write(&path, json.to_string()).unwrap();
    assert!(RecordFile::load(&path).is_err());
}
