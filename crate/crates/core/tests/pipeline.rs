use noduleclip_core::data_ingest::load_manifest;
use noduleclip_core::evaluate::{metrics_report, EvaluationConfig};
use noduleclip_core::infer::calibrated_ensemble;
use noduleclip_core::model::ModelBundle;
use noduleclip_core::synth::{generate, write_cohort, SynthConfig};
use noduleclip_core::train::{predict_samples, run_cv, Dataset, TrainConfig};

fn cohort_config() -> SynthConfig {
    SynthConfig {
        n_patients: 12,
        seed: 5,
        prevalence: 0.5,
        ..SynthConfig::default()
    }
}

#[test]
fn cohort_on_disk_matches_in_memory() {
    let cohort = generate(&cohort_config()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    write_cohort(tmp.path(), &cohort).unwrap();
    let manifest = load_manifest(&tmp.path().join("manifest.csv")).unwrap();
    assert_eq!(manifest.records, cohort.manifest.records);

    let disk = Dataset::load(&manifest, tmp.path()).unwrap();
    let memory = Dataset::from_synthetic(&cohort).unwrap();
    assert_eq!(disk.len(), memory.len());
    let bundle = ModelBundle::toy(3).unwrap();
    let all: Vec<usize> = (0..disk.len()).collect();
    let a = predict_samples(&bundle, &disk, &all, 0).unwrap();
    let b = predict_samples(&bundle, &memory, &all, 0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn cross_validation_to_calibrated_metrics() {
    let cohort = generate(&cohort_config()).unwrap();
    let data = Dataset::from_synthetic(&cohort).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        folds: 3,
        batch_size: 4,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let cv = run_cv(&cohort.manifest, &data, &cfg, &ModelBundle::toy(0).unwrap(), &mut std::io::sink()).unwrap();
    assert_eq!(cv.folds.len(), 3);

    let all: Vec<usize> = (0..data.len()).collect();
    let per_fold: Vec<_> = cv
        .folds
        .iter()
        .map(|f| predict_samples(&f.outcome.checkpoint.bundle, &data, &all, f.split.fold_index).unwrap())
        .collect();
    let calibrators: Vec<_> = cv.folds.iter().map(|f| f.calibrator).collect();
    let risks = calibrated_ensemble(&per_fold, &calibrators).unwrap();
    assert_eq!(risks.len(), 12);
    assert!(risks.iter().all(|r| (0.0..=1.0).contains(&r.probability)));

    let labels = cohort.manifest.patient_labels();
    let scores: Vec<f64> = risks.iter().map(|r| r.probability).collect();
    let y: Vec<u8> = risks.iter().map(|r| labels[&r.patient_id]).collect();
    let report = metrics_report(
        &scores,
        &y,
        &EvaluationConfig {
            bootstrap_draws: 100,
            ..EvaluationConfig::default()
        },
    )
    .unwrap();
    assert_eq!(report.n, 12);
    assert!(report.auroc_ci.lower <= report.auroc_ci.upper);
    assert!(report.auprc_ci.lower <= report.auprc_ci.upper);
}
