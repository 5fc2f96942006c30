use paric::biasgen::{self, DatasetSpec};
use paric::diffcore::{Graph, Tensor};
use paric::encoders::{EncoderConfig, FrozenEncoder, ProbAdapter};
use paric::harness::DEFAULT_ENCODER_NAME;
use paric::mapio;
use paric::saliency::{
    aggregate, deterministic_map, export_reference, gradcam, gradcam_raw, reference_pipeline, resize_map, similarity,
    Aggregation, Guidance, SaliencyMap,
};
use paric::seed;
use proptest::prelude::*;

fn map(values: Vec<f64>, shape: &[usize]) -> SaliencyMap {
    SaliencyMap {
        values: Tensor::new(shape.to_vec(), values).unwrap(),
        sample_index: 0,
    }
}

fn sim(a: Vec<f64>, b: Vec<f64>) -> f64 {
    let mut g = Graph::new();
    let (a, b) = (g.constant(Tensor::vector(a)), g.constant(Tensor::vector(b)));
    let s = similarity(&mut g, a, b).unwrap();
    g.value(s).item()
}

#[test]
fn similarity_examples() {
    assert_eq!(sim(vec![0.0; 4], vec![1.0, 2.0, 3.0, 4.0]), 0.0);
    assert_eq!(sim(vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]), 1.0);
    assert_eq!(sim(vec![1.0, 2.0, 0.0, -1.0], vec![0.0, 1.0, 1.0, 1.0]), 1.0);
    let mut g = Graph::new();
    let (a, b) = (g.constant(Tensor::vector(vec![1.0; 3])), g.constant(Tensor::vector(vec![1.0; 4])));
    assert!(similarity(&mut g, a, b).is_err());
}

#[test]
fn gradcam_without_retained_gradient_is_a_contract_error() {
    let mut g = Graph::new();
    let f = g.constant(Tensor::ones(&[2, 2, 3]));
    let s = g.sum(f);
    let _ = g.backward(s, &[]);
    let err = gradcam(&g, f, 0).unwrap_err();
    assert!(err.to_string().contains("feature map gradient not retained"), "{err}");
}

#[test]
fn constant_score_gives_all_zero_map() {
    let mut g = Graph::new();
    let f = g.leaf(Tensor::full(&[3, 3, 2], 0.5), true);
    let zero = g.scale(f, 0.0);
    let s = g.sum(zero);
    g.backward(s, &[f]).unwrap();
    let m = gradcam(&g, f, 3).unwrap();
    assert_eq!(m.sample_index, 3);
    assert!(m.values.data().iter().all(|&v| v == 0.0));
}

#[test]
fn channel_weights_match_finite_differences() {
    // Nonlinear score: s = Σ softplus(F ⊙ per-channel mix).
    let f0: Vec<f64> = (0..4 * 3 * 3).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect();
    let f0 = Tensor::new(vec![4, 3, 3], f0).unwrap();
    let mix: Vec<f64> = (0..12).flat_map(|_| [0.7, -1.2, 0.4]).collect();
    let mix = Tensor::new(vec![4, 3, 3], mix).unwrap();
    let score = |g: &mut Graph, f| {
        let m = g.constant(mix.clone());
        let p = g.mul(f, m).unwrap();
        let sp = g.softplus(p);
        g.sum(sp)
    };
    let mut g = Graph::new();
    let f = g.leaf(f0.clone(), true);
    let s = score(&mut g, f);
    g.backward(s, &[f]).unwrap();
    let (weights, _) = gradcam_raw(&g, f).unwrap();

    let eps = 1e-5;
    for c in 0..3 {
        let mut acc = 0.0;
        for i in 0..12 {
            let idx = i * 3 + c;
            let eval = |d: f64| {
                let mut t = f0.clone();
                t.data_mut()[idx] += d;
                let mut g = Graph::new();
                let f = g.constant(t);
                let s = score(&mut g, f);
                g.value(s).item()
            };
            acc += (eval(eps) - eval(-eps)) / (2.0 * eps);
        }
        let numeric = acc / 12.0;
        assert!((weights[c] - numeric).abs() / numeric.abs().max(1.0) <= 1e-4);
    }
}

#[test]
fn aggregation_examples() {
    let series = [0.1, 0.1, 0.9];
    let maps: Vec<_> = series.iter().map(|&v| map(vec![v], &[1, 1])).collect();
    let med = aggregate(&maps, Aggregation::Median).unwrap();
    assert_eq!(med.values.data(), &[0.1]);
    let mean = aggregate(&maps, Aggregation::Mean).unwrap();
    assert!((mean.values.data()[0] - 1.1 / 3.0).abs() < 1e-12);

    let single = map(vec![0.2, 0.4, 0.6, 0.8], &[2, 2]);
    for method in [Aggregation::Mean, Aggregation::Median] {
        let r = aggregate(std::slice::from_ref(&single), method).unwrap();
        assert_eq!(r.values, single.values);
        assert!(r.uncertainty.data().iter().all(|&v| v == 0.0));
        assert_eq!(r.k_samples, 1);
        let four = aggregate(&vec![single.clone(); 4], method).unwrap();
        assert_eq!(four.values, single.values);
        assert!(four.uncertainty.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn aggregation_contract_errors() {
    assert!(aggregate(&[], Aggregation::Mean).is_err());
    let a = map(vec![0.0; 4], &[2, 2]);
    let b = map(vec![0.0; 6], &[2, 3]);
    assert!(aggregate(&[a, b], Aggregation::Median).is_err());
}

#[test]
fn aggregation_names_parse() {
    assert_eq!("mean".parse::<Aggregation>().unwrap(), Aggregation::Mean);
    assert_eq!("median".parse::<Aggregation>().unwrap(), Aggregation::Median);
    assert!("mode".parse::<Aggregation>().is_err());
}

#[test]
fn resize_keeps_constant_maps_constant() {
    let m = Tensor::full(&[16, 16], 0.25);
    let r = resize_map(&m, 32, 32).unwrap();
    assert_eq!(r.shape(), &[32, 32]);
    assert!(r.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
}

fn fixture() -> (FrozenEncoder, biasgen::Dataset) {
    let enc = FrozenEncoder::shared(DEFAULT_ENCODER_NAME, &EncoderConfig::default()).unwrap();
    let ds = biasgen::generate(&DatasetSpec {
        train_count: 4,
        val_count: 1,
        test_count: 1,
        ..DatasetSpec::default()
    })
    .unwrap();
    (enc, ds)
}

fn adapters(dropout: f64) -> (ProbAdapter, ProbAdapter) {
    let mut rng = seed::stream(21, "adapters", 0);
    (
        ProbAdapter::new(16, 64, dropout, 0.5, &mut rng).unwrap(),
        ProbAdapter::new(16, 64, dropout, 0.5, &mut rng).unwrap(),
    )
}

#[test]
fn sampled_reference_is_valid_and_reproducible() {
    let (enc, ds) = fixture();
    let (ai, at) = adapters(0.1);
    let guidance = Guidance {
        encoder: &enc,
        image_adapter: &ai,
        text_adapter: &at,
    };
    let s = &ds.train[0];
    let run = |seed_value| {
        let mut rng = seed::stream(seed_value, "ref", 0);
        reference_pipeline(&guidance, &s.image, &ds.prompts, s.label, 50, Aggregation::Median, &mut rng).unwrap()
    };
    let r = run(1);
    assert_eq!(r.values.shape(), &[16, 16]);
    assert_eq!(r.k_samples, 50);
    assert!(r.values.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(r.values.max_value() > 0.0);
    assert!(r.uncertainty.data().iter().all(|&v| v >= 0.0));
    assert!(r.uncertainty.max_value() > 0.0);
    assert_eq!(run(1), r);
    assert_ne!(run(2), r);
}

#[test]
fn sample_maps_do_not_depend_on_k() {
    let (enc, ds) = fixture();
    let (ai, at) = adapters(0.1);
    let guidance = Guidance {
        encoder: &enc,
        image_adapter: &ai,
        text_adapter: &at,
    };
    let x = &ds.train[1];
    let few = guidance.sample_maps(&x.image, &x.prompt, 3, &mut seed::stream(5, "k", 0)).unwrap();
    let many = guidance.sample_maps(&x.image, &x.prompt, 9, &mut seed::stream(5, "k", 0)).unwrap();
    assert_eq!(few[..], many[..3]);
}

#[test]
fn floored_adapters_nearly_reproduce_one_map() {
    let (enc, ds) = fixture();
    let (mut ai, mut at) = adapters(0.0);
    ai.floor_scale();
    at.floor_scale();
    let guidance = Guidance {
        encoder: &enc,
        image_adapter: &ai,
        text_adapter: &at,
    };
    let x = &ds.train[2];
    let maps = guidance.sample_maps(&x.image, &x.prompt, 10, &mut seed::stream(8, "floor", 0)).unwrap();
    let mut worst: f64 = 0.0;
    for a in &maps {
        for b in &maps {
            for (u, v) in a.values.data().iter().zip(b.values.data()) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    // Residual spread comes from GGD noise at the 1e-3 scale floor, so the
    // maps agree to a few parts in a thousand rather than exactly.
    assert!(worst <= 5e-3, "{worst}");
    let r = aggregate(&maps, Aggregation::Mean).unwrap();
    assert!(r.uncertainty.max_value() <= 5e-3, "{}", r.uncertainty.max_value());
}

#[test]
fn deterministic_map_is_normalised() {
    let (enc, ds) = fixture();
    let s = &ds.train[3];
    let m = deterministic_map(&enc, &s.image, &s.prompt).unwrap();
    assert_eq!(m.values, deterministic_map(&enc, &s.image, &s.prompt).unwrap().values);
    assert!((m.values.max_value() - 1.0).abs() < 1e-12);
    assert_eq!(m.values.min_value(), 0.0);
}

#[test]
fn reference_export_writes_all_formats() {
    let (enc, ds) = fixture();
    let s = &ds.train[0];
    let m = deterministic_map(&enc, &s.image, &s.prompt).unwrap();
    let mut other = m.clone();
    other.values = other.values.map(|v| v * 0.5);
    let r = aggregate(&[m, other], Aggregation::Mean).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_reference(&dir.path().join("img0"), &r).unwrap();
    for name in ["img0_ref", "img0_unc"] {
        for ext in ["pgm", "png", "pmap"] {
            assert!(dir.path().join(format!("{name}.{ext}")).is_file(), "{name}.{ext}");
        }
    }
    let back = mapio::read_pmap(&dir.path().join("img0_unc.pmap")).unwrap();
    assert_eq!(back, r.uncertainty);
}

fn maps_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..8).prop_flat_map(|k| prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), k))
}

proptest! {
    #[test]
    fn aggregate_stays_in_unit_interval(raw in maps_strategy(), median in any::<bool>()) {
        let maps: Vec<_> = raw.into_iter().map(|v| map(v, &[2, 3])).collect();
        let method = if median { Aggregation::Median } else { Aggregation::Mean };
        let r = aggregate(&maps, method).unwrap();
        prop_assert!(r.values.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(r.uncertainty.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn uncertainty_is_zero_exactly_where_maps_agree(raw in maps_strategy()) {
        let maps: Vec<_> = raw.iter().cloned().map(|v| map(v, &[2, 3])).collect();
        let r = aggregate(&maps, Aggregation::Mean).unwrap();
        for p in 0..6 {
            let agree = raw.iter().all(|m| m[p] == raw[0][p]);
            prop_assert_eq!(agree, r.uncertainty.data()[p] == 0.0);
        }
    }

    #[test]
    fn mean_is_linear_before_clamping(raw in maps_strategy(), a in 0.0f64..1.0) {
        let maps: Vec<_> = raw.iter().cloned().map(|v| map(v, &[2, 3])).collect();
        let scaled: Vec<_> = raw.iter().map(|v| map(v.iter().map(|x| a * x).collect(), &[2, 3])).collect();
        let r = aggregate(&maps, Aggregation::Mean).unwrap();
        let rs = aggregate(&scaled, Aggregation::Mean).unwrap();
        for (x, y) in r.values.data().iter().zip(rs.values.data()) {
            prop_assert!((a * x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradcam_maps_are_non_negative_and_normalised(
        f in prop::collection::vec(-2.0f64..2.0, 3 * 4 * 2),
        w in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let mut g = Graph::new();
        let fv = g.leaf(Tensor::new(vec![3, 4, 2], f).unwrap(), true);
        let per_pixel: Vec<f64> = (0..12).flat_map(|_| w.clone()).collect();
        let wv = g.constant(Tensor::new(vec![3, 4, 2], per_pixel).unwrap());
        let p = g.mul(fv, wv).unwrap();
        let e = g.exp(p);
        let s = g.sum(e);
        g.backward(s, &[fv]).unwrap();
        let (_, raw) = gradcam_raw(&g, fv).unwrap();
        prop_assert!(raw.data().iter().all(|&v| v >= 0.0));
        let m = gradcam(&g, fv, 0).unwrap();
        prop_assert!(m.values.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
