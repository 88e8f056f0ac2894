use ndarray::{array, Array1, Array2, Array4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::autodiff::Graph;
use crate::preprocess::PlaneId;

fn random_stack(seed: u64, size: usize) -> ViewStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ViewStack {
        views: Array4::from_shape_simple_fn((9, 3, size, size), || rng.random_range(-2.0f32..2.0)),
        plane_ids: PlaneId::ALL.to_vec(),
    }
}

fn gaussian(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Matrix {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn with_mode(mode: TuningMode, seed: u64) -> ModelBundle {
    let mut cfg = ModelConfig::toy();
    cfg.tuning = mode;
    ModelBundle::new(cfg, BaseSource::Random { seed }, TokenizerSpec::Toy).unwrap()
}

fn randomize(bundle: &mut ModelBundle, kinds: &[ParamKind], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..bundle.params().len())
        .filter(|&i| kinds.contains(&bundle.params().specs()[i].kind))
        .collect();
    for i in idx {
        let m = bundle.params_mut().value_mut(i);
        m.mapv_inplace(|_| 0.3 * rng.sample::<f64, _>(StandardNormal));
    }
}

/// Gram–Schmidt on rows; counts directions whose residual norm exceeds
/// `tol` relative to the largest row norm.
fn numerical_rank(m: &Matrix, tol: f64) -> usize {
    let scale = m.rows().into_iter().map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max);
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for row in m.rows() {
        let mut r = row.to_owned();
        for q in &basis {
            let c = r.dot(q);
            r = r - q * c;
        }
        let n = r.dot(&r).sqrt();
        if n > tol * scale {
            basis.push(r / n);
        }
    }
    basis.len()
}

#[test]
fn lora_zero_b_is_bitwise_base() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = gaussian((5, 6), &mut rng);
    let w = gaussian((4, 6), &mut rng);
    let bias = Array1::from_vec(vec![0.5, -1.0, 2.0, 0.0]);
    let ad = LoraAdapter {
        a: gaussian((2, 6), &mut rng),
        b: Array2::zeros((4, 2)),
        scale: 1.0,
        dropout: 0.25,
    };
    let mut base = x.dot(&w.t());
    base += &bias;
    let y = lora_forward(&x, &w, Some(&bias), &ad, None).unwrap();
    assert_eq!(y, base);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(2);
    let y_train = lora_forward(&x, &w, Some(&bias), &ad, Some(&mut drop_rng)).unwrap();
    assert_eq!(y_train, base);
}

#[test]
fn lora_rank_one_outer_product() {
    let x = array![[1.0, 2.0, 3.0], [0.0, -1.0, 4.0]];
    let e = array![[0.5, -1.0, 2.0]];
    let f = array![[1.0], [3.0]];
    let ad = LoraAdapter {
        a: e.clone(),
        b: f.clone(),
        scale: 1.0,
        dropout: 0.0,
    };
    let y = lora_forward(&x, &Array2::zeros((2, 3)), None, &ad, None).unwrap();
    for i in 0..2 {
        let ex: f64 = (0..3).map(|j| e[[0, j]] * x[[i, j]]).sum();
        for k in 0..2 {
            assert!((y[[i, k]] - f[[k, 0]] * ex).abs() < 1e-15);
        }
    }
}

#[test]
fn lora_delta_has_rank_at_most_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = gaussian((12, 10), &mut rng);
    let w = gaussian((8, 10), &mut rng);
    let ad = LoraAdapter {
        a: gaussian((2, 10), &mut rng),
        b: gaussian((8, 2), &mut rng),
        scale: 1.0,
        dropout: 0.0,
    };
    let delta = lora_forward(&x, &w, None, &ad, None).unwrap() - x.dot(&w.t());
    assert_eq!(numerical_rank(&delta, 1e-5), 2);
    assert!(numerical_rank(&x, 1e-5) > 2);
}

#[test]
fn lora_shape_mismatch_rejected() {
    let ad = LoraAdapter {
        a: Array2::zeros((2, 5)),
        b: Array2::zeros((4, 2)),
        scale: 1.0,
        dropout: 0.0,
    };
    assert!(lora_forward(&Array2::zeros((1, 6)), &Array2::zeros((4, 6)), None, &ad, None).is_err());
}

#[test]
fn graph_adapter_matches_value_level() {
    let mut bundle = ModelBundle::toy(4).unwrap();
    randomize(&mut bundle, &[ParamKind::Adapter], 5);
    let width = bundle.config().encoder.vision.width;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = gaussian((7, width), &mut rng);
    let mut g = Graph::new();
    let mut b = network::Binder::new(bundle.params());
    let xv = g.constant(x.clone());
    let cfg = *bundle.config();
    let y = network::lora_linear(
        &mut g,
        &mut b,
        &cfg.lora,
        xv,
        "visual.transformer.resblocks.1.attn.k_proj",
        "lora.visual.1.k",
        None,
    )
    .unwrap();
    let w = bundle.params().get("visual.transformer.resblocks.1.attn.k_proj.weight").unwrap();
    let bias = bundle.params().get("visual.transformer.resblocks.1.attn.k_proj.bias").unwrap().row(0).to_owned();
    let ad = bundle.adapter("visual", 1, "k").unwrap();
    let expect = lora_forward(&x, w, Some(&bias), &ad, None).unwrap();
    let diff = (g.value(y) - &expect).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn fresh_adapters_are_neutral() {
    let lora = with_mode(TuningMode::Lora, 11);
    let probe = with_mode(TuningMode::Probe, 11);
    assert_eq!(lora.base_fingerprint(), probe.base_fingerprint());
    let stack = random_stack(12, 224);
    assert_eq!(lora.encode_views(&stack).unwrap(), probe.encode_views(&stack).unwrap());
    let ids = lora.tokenize("A solid nodule with spiculated margins.");
    assert_eq!(lora.encode_text(&ids).unwrap(), probe.encode_text(&ids).unwrap());
}

#[test]
fn view_encoding_contracts() {
    let bundle = ModelBundle::toy(13).unwrap();
    let mut stack = random_stack(14, 224);
    let f = bundle.encode_views(&stack).unwrap();
    assert_eq!(f.dim(), (9, bundle.config().encoder.vision.width));
    assert_eq!(bundle.encode_views(&stack).unwrap(), f);

    let first = stack.views.slice(ndarray::s![0, .., .., ..]).to_owned();
    for v in 1..9 {
        stack.views.slice_mut(ndarray::s![v, .., .., ..]).assign(&first);
    }
    let same = bundle.encode_views(&stack).unwrap();
    for v in 1..9 {
        assert_eq!(same.row(v), same.row(0));
    }

    let short = ViewStack {
        views: stack.views.slice(ndarray::s![0..8, .., .., ..]).to_owned(),
        plane_ids: PlaneId::ALL[..8].to_vec(),
    };
    assert!(bundle.encode_views(&short).is_err());
    assert!(bundle.encode_views(&random_stack(1, 64)).is_err());
}

#[test]
fn batched_views_match_single() {
    let bundle = ModelBundle::toy(15).unwrap();
    let a = random_stack(16, 224);
    let b = random_stack(17, 224);
    let both = bundle.encode_views_batch(&[&a, &b]).unwrap();
    let fa = bundle.encode_views(&a).unwrap();
    let fb = bundle.encode_views(&b).unwrap();
    let diff_a = (&both.slice(ndarray::s![0..9, ..]) - &fa).mapv(f64::abs).sum();
    let diff_b = (&both.slice(ndarray::s![9..18, ..]) - &fb).mapv(f64::abs).sum();
    assert!(diff_a < 1e-9 && diff_b < 1e-9);
}

#[test]
fn mil_identical_views_average() {
    let bundle = ModelBundle::toy(18).unwrap();
    let w = bundle.config().encoder.vision.width;
    let row = Array1::from_shape_fn(w, |i| (i as f64 * 0.37).sin());
    let feats = Array2::from_shape_fn((9, w), |(_, j)| row[j]);
    let (pooled, weights) = bundle.mil_aggregate(&feats).unwrap();
    for &x in weights.iter() {
        assert!((x - 1.0 / 9.0).abs() < 1e-15);
    }
    for j in 0..w {
        assert!((pooled[j] - row[j]).abs() < 1e-12);
    }
    assert!(bundle.mil_aggregate(&feats.slice(ndarray::s![0..8, ..]).to_owned()).is_err());
}

#[test]
fn mil_saturates_on_dominant_score() {
    let mut bundle = ModelBundle::toy(19).unwrap();
    let w = bundle.config().encoder.vision.width;
    let h = bundle.config().mil.hidden;
    let mut v = Array2::zeros((h, w));
    v[[0, 0]] = 50.0;
    bundle.params_mut().set("mil.attention_v.weight", v).unwrap();
    bundle.params_mut().set("mil.attention_v.bias", Array2::zeros((1, h))).unwrap();
    let mut sw = Array2::zeros((1, h));
    sw[[0, 0]] = 1000.0;
    bundle.params_mut().set("mil.attention_w.weight", sw).unwrap();
    let mut feats = Array2::from_shape_fn((9, w), |(i, j)| ((i * 7 + j) as f64).cos() * 0.1);
    feats.column_mut(0).fill(0.0);
    feats[[3, 0]] = 1.0;
    let (pooled, weights) = bundle.mil_aggregate(&feats).unwrap();
    assert!(weights[3] > 0.999);
    for j in 0..w {
        assert!((pooled[j] - feats[[3, j]]).abs() < 1e-2);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn mil_weights_form_simplex_and_pool_in_hull(seed in 0u64..10_000) {
        let mut bundle = ModelBundle::toy(20).unwrap();
        randomize(&mut bundle, &[ParamKind::Mil], seed);
        let w = bundle.config().encoder.vision.width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = gaussian((9, w), &mut rng) * 3.0;
        let (pooled, weights) = bundle.mil_aggregate(&feats).unwrap();
        prop_assert!((weights.sum() - 1.0).abs() < 1e-6);
        prop_assert!(weights.iter().all(|&x| x >= 0.0));
        for j in 0..w {
            let col = feats.column(j);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(pooled[j] >= lo - 1e-9 && pooled[j] <= hi + 1e-9);
        }
    }
}

#[test]
fn text_encoding_contracts() {
    let bundle = ModelBundle::toy(21).unwrap();
    let ctx = bundle.config().encoder.text.context_length;
    let ids = bundle.tokenize("The nodule demonstrates smooth margins.");
    let a = bundle.encode_text(&ids).unwrap();
    assert_eq!(a.len(), bundle.config().encoder.text.width);
    assert_eq!(bundle.encode_text(&ids).unwrap(), a);

    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let long: Vec<u32> = (0..2 * ctx).map(|_| rng.random_range(3..4096)).collect();
    let mut prefix = long[..ctx - 1].to_vec();
    prefix.push(bundle.tokenizer().eot());
    assert_eq!(bundle.encode_text(&long).unwrap(), bundle.encode_text(&prefix).unwrap());

    assert!(bundle.encode_text(&[1, 4096, 2]).is_err());
}

#[test]
fn projection_contracts() {
    let mut bundle = ModelBundle::toy(23).unwrap();
    randomize(&mut bundle, &[ParamKind::Projection], 24);
    let w = bundle.config().encoder.vision.width;
    let zero = bundle.project(Branch::Image, &Array1::zeros(w)).unwrap();
    assert_eq!(zero.len(), 256);
    let bias = bundle.params().get("proj.image.out.bias").unwrap().row(0).to_owned();
    assert_eq!(zero, bias);

    bundle.params_mut().set("proj.text.out.bias", Array2::zeros((1, 256))).unwrap();
    let tw = bundle.config().encoder.text.width;
    let x = Array1::from_shape_fn(tw, |i| (i as f64).sin());
    let y = Array1::from_shape_fn(tw, |i| (i as f64 * 0.5).cos());
    let lhs = bundle.project(Branch::Text, &(&x * 2.0 - &y * 0.5)).unwrap();
    let rhs = bundle.project(Branch::Text, &x).unwrap() * 2.0 - bundle.project(Branch::Text, &y).unwrap() * 0.5;
    assert!((&lhs - &rhs).mapv(f64::abs).sum() < 1e-10);
    assert!(bundle.project(Branch::Text, &Array1::zeros(tw + 1)).is_err());
}

#[test]
fn risk_head_contracts() {
    let mut bundle = ModelBundle::toy(25).unwrap();
    bundle.params_mut().set("head.image.weight", Array2::zeros((2, 256))).unwrap();
    let f = Array1::from_elem(256, 0.7);
    let l = bundle.predict_risk(Branch::Image, &f).unwrap();
    assert_eq!(l, [0.0, 0.0]);
    assert_eq!(ModelBundle::malignancy_probability(l), 0.5);
    let p = ModelBundle::malignancy_probability([0.3, 1.1]);
    assert!((ModelBundle::malignancy_probability([5.3, 6.1]) - p).abs() < 1e-15);
    assert!(ModelBundle::malignancy_probability([0.3, 1.2]) > p);
    assert!(bundle.predict_risk(Branch::Image, &Array1::zeros(3)).is_err());
}

#[test]
fn zeroed_head_gives_half_probability() {
    let mut bundle = ModelBundle::toy(26).unwrap();
    bundle.params_mut().set("head.image.weight", Array2::zeros((2, 256))).unwrap();
    let stack = random_stack(27, 224);
    let out = bundle.image_outputs(&[&stack]).unwrap();
    assert_eq!(out[0].probability, 0.5);
    assert_eq!(out[0].embedding.len(), 256);
    assert!((out[0].mil_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn pretrained_fraction_is_about_four_per_mille() {
    let cfg = ModelConfig::pretrained_compatible();
    let specs = layout(&cfg);
    let (trainable, total) = params::count_params(&specs);
    // Adapters 3·r·(d+d) per layer, attention pooling, two projections,
    // two risk heads and the temperature.
    let adapters = 3 * 2 * (12 * (768 + 768) + 12 * (512 + 512));
    let mil = 768 * 128 + 128 + 128 + 1;
    let proj = (768 * 256 + 256) + (512 * 256 + 256);
    let heads = 2 * (256 * 2 + 2);
    assert_eq!(trainable, adapters + mil + proj + heads + 1);
    assert_eq!(trainable, 612_102);
    let frac = trainable_fraction(&specs);
    assert!(frac < 0.01);
    assert!(frac > 0.004 / 3.0 && frac < 0.004 * 3.0);
    assert_eq!(total - trainable, 87_456_000 + 63_165_952);
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let mut bundle = ModelBundle::toy(28).unwrap();
    randomize(
        &mut bundle,
        &[ParamKind::Adapter, ParamKind::Mil, ParamKind::Projection, ParamKind::RiskHead, ParamKind::Temperature],
        29,
    );
    let info = CheckpointInfo {
        fold_index: Some(2),
        epoch: 7,
        val_auroc: Some(0.8125),
        rng_state: None,
    };
    bundle.save_checkpoint(dir.path(), &info).unwrap();
    let (back, info_back) = ModelBundle::load_checkpoint(dir.path()).unwrap();
    assert_eq!(info_back, info);
    for (i, s) in bundle.params().specs().iter().enumerate() {
        assert_eq!(**bundle.params().value(i), **back.params().value(i), "{}", s.name);
    }
    let stack = random_stack(30, 224);
    assert_eq!(bundle.image_outputs(&[&stack]).unwrap(), back.image_outputs(&[&stack]).unwrap());
}

#[test]
fn checkpoint_rejects_foreign_base() {
    let dir = tempfile::tempdir().unwrap();
    ModelBundle::toy(31).unwrap().save_checkpoint(dir.path(), &CheckpointInfo::default()).unwrap();
    let meta = dir.path().join(CHECKPOINT_META);
    let text = std::fs::read_to_string(&meta).unwrap().replace("seed = 31", "seed = 32");
    std::fs::write(&meta, text).unwrap();
    assert!(ModelBundle::load_checkpoint(dir.path()).is_err());
}

#[test]
fn pretrained_archive_loads_with_fused_attention() {
    let source = ModelBundle::toy(33).unwrap();
    let cfg = *source.config();
    let mut tensors = Vec::new();
    for (i, s) in source.params().specs().iter().enumerate() {
        if s.kind != ParamKind::Base || s.name.contains(".attn.k_proj") || s.name.contains(".attn.v_proj") {
            continue;
        }
        let fuse = |what: &str| {
            let prefix = s.name.split(".attn.").next().unwrap();
            let mut data = Vec::new();
            for t in ["q", "k", "v"] {
                data.extend(source.params().get(&format!("{prefix}.attn.{t}_proj.{what}")).unwrap().iter().copied());
            }
            (format!("{prefix}.attn.in_proj_{what}"), data)
        };
        let (name, data, shape) = if s.name.ends_with(".attn.q_proj.weight") {
            let (n, d) = fuse("weight");
            (n, d, vec![3 * s.shape.0, s.shape.1])
        } else if s.name.ends_with(".attn.q_proj.bias") {
            let (n, d) = fuse("bias");
            (n, d, vec![3 * s.shape.1])
        } else if s.name == "visual.conv1.weight" {
            let p = cfg.encoder.vision.patch_size;
            (s.name.clone(), source.params().value(i).iter().copied().collect(), vec![s.shape.0, 3, p, p])
        } else {
            (s.name.clone(), source.params().value(i).iter().copied().collect(), vec![s.shape.0, s.shape.1])
        };
        tensors.push(archive::Tensor { name, shape, data });
    }
    tensors.push(archive::Tensor {
        name: "text_projection".into(),
        shape: vec![32, 32],
        data: vec![0.0; 1024],
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ncta");
    archive::save_archive(&path, &tensors, archive::DType::F64).unwrap();
    let loaded = ModelBundle::new(
        cfg,
        BaseSource::Archive {
            path: path.clone(),
            seed: 33,
        },
        TokenizerSpec::Toy,
    )
    .unwrap();
    assert_eq!(loaded.base_fingerprint(), source.base_fingerprint());

    tensors.retain(|t| t.name != "ln_final.weight");
    archive::save_archive(&path, &tensors, archive::DType::F64).unwrap();
    assert!(ModelBundle::new(cfg, BaseSource::Archive { path, seed: 33 }, TokenizerSpec::Toy).is_err());
}
