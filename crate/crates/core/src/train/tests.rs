use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::semantics::Feature;
use crate::synth::{generate, SynthConfig};

fn set(margin: &str, consistency: &str, necrosis: Option<&str>) -> SemanticFeatureSet {
    let mut s = SemanticFeatureSet::new();
    s.set_margins([margin]).unwrap();
    s.set_class(Feature::Consistency, consistency).unwrap();
    s.set_diameter(Feature::LongestAxialDiameter, 7.5).unwrap();
    if let Some(n) = necrosis {
        s.set_class(Feature::Necrosis, n).unwrap();
    }
    s
}

#[test]
fn identical_sets_give_uniform_weights() {
    let sets = vec![set("Smooth", "Solid", Some("Absent")); 7];
    assert!(build_sampler(&sets).unwrap().as_slice().iter().all(|w| (w - 1.0).abs() < 1e-12));
    assert!(build_sampler(&[]).is_err());
}

#[test]
fn unique_rare_value_is_upweighted() {
    let mut sets = vec![set("Smooth", "Solid", Some("Absent")); 99];
    sets.push(set("Smooth", "Solid", Some("Present")));
    let w = build_sampler(&sets).unwrap();
    let w = w.as_slice();
    assert!(w[..99].iter().all(|&x| w[99] > x));
    assert!((w.iter().sum::<f64>() / 100.0 - 1.0).abs() < 1e-9);
}

#[test]
fn sampler_matches_enumeration() {
    let sets = vec![
        set("Smooth", "Solid", None),
        set("Spiculated", "Solid", None),
        set("Smooth", "Part-solid", Some("Present")),
        SemanticFeatureSet::new(),
    ];
    // Counts: Smooth 2, Spiculated 1, Solid 2, Part-solid 1, Necrosis=Present 1.
    let raw = [
        (1.0 / 2.0 + 1.0 / 2.0) / 2.0,
        (1.0 / 1.0 + 1.0 / 2.0) / 2.0,
        (1.0 / 2.0 + 1.0 / 1.0 + 1.0 / 1.0) / 3.0,
    ];
    let fill = raw.iter().sum::<f64>() / 3.0;
    let all = [raw[0], raw[1], raw[2], fill];
    let mean = all.iter().sum::<f64>() / 4.0;
    let w = build_sampler(&sets).unwrap();
    for (a, b) in w.as_slice().iter().zip(all) {
        assert!((a - b / mean).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn sampler_weights_have_unit_mean(picks in proptest::collection::vec((0usize..5, 0usize..3, 0usize..3), 1..40)) {
        let margins = ["Smooth", "Lobulated", "Spiculated", "Ill-defined", "Notched"];
        let cons = ["Solid", "Part-solid", "Pure ground glass"];
        let nec = [None, Some("Present"), Some("Absent")];
        let sets: Vec<_> = picks.iter().map(|&(m, c, n)| set(margins[m], cons[c], nec[n])).collect();
        let w = build_sampler(&sets).unwrap();
        let w = w.as_slice();
        prop_assert!(w.iter().all(|x| x.is_finite() && *x > 0.0));
        prop_assert!((w.iter().sum::<f64>() / w.len() as f64 - 1.0).abs() < 1e-9);
    }
}

#[test]
fn decay_excludes_biases_norms_embeddings_and_temperature() {
    assert!(decays("lora.visual.0.q.A", ParamKind::Adapter));
    assert!(decays("mil.attention_v.weight", ParamKind::Mil));
    assert!(decays("head.image.weight", ParamKind::RiskHead));
    assert!(!decays("head.image.bias", ParamKind::RiskHead));
    assert!(!decays("visual.ln_post.weight", ParamKind::Base));
    assert!(!decays("visual.positional_embedding", ParamKind::Base));
    assert!(!decays("logit.log_tau", ParamKind::Temperature));
}

#[test]
fn adamw_first_step_oracle() {
    let mut bundle = ModelBundle::toy(1).unwrap();
    let w = bundle.params().position("head.image.weight").unwrap();
    let b = bundle.params().position("head.image.bias").unwrap();
    let (pw, pb) = ((**bundle.params().value(w)).clone(), (**bundle.params().value(b)).clone());
    let gw = Matrix::from_elem(pw.dim(), 0.5);
    let gb = Matrix::from_elem(pb.dim(), -2.0);
    let mut opt = AdamW::new([0.9, 0.999], 1e-8, 0.1);
    opt.update(&mut bundle, vec![(w, gw), (b, gb)], 1e-2);
    // After bias correction the first step is lr · g / (|g| + eps).
    let step_w = 1e-2 * 0.5 / (0.5 + 1e-8);
    let step_b = 1e-2 * -2.0 / (2.0 + 1e-8);
    for (new, old) in bundle.params().value(w).iter().zip(pw.iter()) {
        assert!((new - (old * (1.0 - 1e-3) - step_w)).abs() < 1e-14);
    }
    for (new, old) in bundle.params().value(b).iter().zip(pb.iter()) {
        assert!((new - (old - step_b)).abs() < 1e-14);
    }
}

#[test]
fn cv_summary_statistics() {
    let v = [0.8, 0.9, 0.85, 0.95, 0.7];
    let s = CvSummary::from_values(v.iter().map(|x| Some(*x)).collect());
    let m = 4.2 / 5.0;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
    assert!((s.mean.unwrap() - m).abs() < 1e-12);
    assert!((s.std.unwrap() - var.sqrt()).abs() < 1e-12);
    let s = CvSummary::from_values(vec![Some(0.5), None]);
    assert_eq!((s.mean, s.std), (Some(0.5), None));
}

fn tiny() -> (CohortManifest, Dataset, FoldSplit) {
    let cohort = generate(&SynthConfig {
        n_patients: 10,
        seed: 4,
        prevalence: 0.5,
        ..SynthConfig::default()
    })
    .unwrap();
    let data = Dataset::from_synthetic(&cohort).unwrap();
    let split = make_patient_folds_with(&cohort.manifest, 3, 0, true).unwrap().remove(0);
    (cohort.manifest, data, split)
}

fn quick() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        epochs: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_returns_initialization() {
    let (_, data, split) = tiny();
    let init = ModelBundle::toy(3).unwrap();
    let mut log = Vec::new();
    let out = train_fold(&split, &TrainConfig { epochs: 0, ..quick() }, &init, &data, &mut log).unwrap();
    assert_eq!(out.checkpoint.info.epoch, 0);
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.checkpoint.bundle.params().fingerprint(|_| true), init.params().fingerprint(|_| true));
    let labels: BTreeSet<u8> = data.indices_for(&split.val_patients).iter().map(|&i| data.sample(i).label).collect();
    assert_eq!(out.checkpoint.info.val_auroc.is_some(), labels.len() == 2);
    let line: LogRecord = serde_json::from_slice(log.split(|&b| b == b'\n').next().unwrap()).unwrap();
    assert!(matches!(line, LogRecord::Epoch { epoch: 0, .. }));
}

#[test]
fn training_is_deterministic_and_keeps_base() {
    let (_, data, split) = tiny();
    let init = ModelBundle::toy(3).unwrap();
    let base = init.base_fingerprint();
    let mut log_a = Vec::new();
    let mut log_b = Vec::new();
    let cfg = TrainConfig { epochs: 2, ..quick() };
    let a = train_fold(&split, &cfg, &init, &data, &mut log_a).unwrap();
    let b = train_fold(&split, &cfg, &init, &data, &mut log_b).unwrap();
    assert_eq!(log_a, log_b);
    let all = |c: &Checkpoint| c.bundle.params().fingerprint(|_| true);
    assert_eq!(all(&a.checkpoint), all(&b.checkpoint));
    assert_eq!(a.checkpoint.bundle.base_fingerprint(), base);
    let steps = std::str::from_utf8(&log_a)
        .unwrap()
        .lines()
        .filter(|l| l.contains("\"kind\":\"step\""))
        .count();
    assert_eq!(steps, 2 * split.train_patients.len().div_ceil(4));
    // Training moved the trainable tensors of the last epoch.
    let last = train_fold(&split, &TrainConfig { epochs: 1, ..quick() }, &init, &data, &mut Vec::new()).unwrap();
    if last.checkpoint.info.epoch == 1 {
        assert_ne!(all(&last.checkpoint), init.params().fingerprint(|_| true));
    }
}

#[test]
fn checkpoint_round_trip_reproduces_val_auroc() {
    let (_, data, split) = tiny();
    let init = ModelBundle::toy(3).unwrap();
    let out = train_fold(&split, &quick(), &init, &data, &mut std::io::sink()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.checkpoint.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back.info, out.checkpoint.info);
    let val = data.indices_for(&split.val_patients);
    let labels = patient_labels(&data);
    let again = patient_auroc(&predict_samples(&back.bundle, &data, &val, 0).unwrap(), &labels).unwrap();
    match (again, out.checkpoint.info.val_auroc) {
        (Some(a), Some(b)) => assert!((a - b).abs() < 1e-6),
        (a, b) => assert_eq!(a, b),
    }
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let (_, data, split) = tiny();
    let mut init = ModelBundle::toy(3).unwrap();
    let w = init.params().get("head.text.weight").unwrap().dim();
    init.params_mut().set("head.text.weight", Matrix::from_elem(w, f64::NAN)).unwrap();
    let err = train_fold(&split, &quick(), &init, &data, &mut std::io::sink());
    // Validation only runs the image branch, so the first step is the first to see the NaN.
    match err {
        Err(Error::NonFiniteLoss { step, epoch, ce_image, ce_text, .. }) => {
            assert_eq!((step, epoch), (1, 1));
            assert!(ce_image.is_finite() && ce_text.is_nan());
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn run_cv_produces_one_checkpoint_per_fold() {
    let (manifest, data, _) = tiny();
    let init = ModelBundle::toy(3).unwrap();
    let cfg = TrainConfig { epochs: 0, folds: 5, ..quick() };
    let cv = run_cv(&manifest, &data, &cfg, &init, &mut std::io::sink()).unwrap();
    assert_eq!(cv.folds.len(), 5);
    let idx: BTreeSet<usize> = cv.folds.iter().map(|f| f.outcome.checkpoint.info.fold_index.unwrap()).collect();
    assert_eq!(idx, (0..5).collect());
    let vals: Vec<Option<f64>> = cv.folds.iter().map(|f| f.outcome.checkpoint.info.val_auroc).collect();
    assert_eq!(cv.summary, CvSummary::from_values(vals));
    let too_many = TrainConfig { folds: 11, ..cfg };
    assert!(run_cv(&manifest, &data, &too_many, &init, &mut std::io::sink()).is_err());
}
