use paric::classifier::{attention_loss, cross_entropy, ClassifierState};
use paric::diffcore::{Graph, Tensor};
use paric::seed;
use proptest::prelude::*;
use rand::Rng;

fn state(classes: usize, h: usize, w: usize, seed_value: u64) -> ClassifierState {
    let mut rng = seed::stream(seed_value, "classifier", 0);
    ClassifierState::new(classes, h, w, [4, 4], &mut rng).unwrap()
}

fn random(shape: &[usize], seed_value: u64) -> Tensor {
    let mut rng = seed::stream(seed_value, "tensor", 0);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Smooth fixture image: a diagonal ramp per channel.
fn fixture_image(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                data.push(((i + 2 * j + 3 * c) % 7) as f64 / 6.0);
            }
        }
    }
    Tensor::new(vec![h, w, 3], data).unwrap()
}

#[test]
fn outputs_are_distributions() {
    let s = state(3, 8, 8, 1);
    for k in 0..10 {
        let (p, a) = s.forward_classify(&random(&[8, 8, 3], k)).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        assert!((a.sum() - 1.0).abs() <= 1e-9);
        assert!(a.data().iter().all(|&v| v >= 0.0));
        assert_eq!(a.shape(), &[8, 8]);
    }
}

#[test]
fn zero_attention_head_gives_uniform_attention() {
    let mut s = state(2, 6, 5, 2);
    let mut ps = paric::nn::ParamSet::new();
    for (name, t) in s.params().iter() {
        let t = if name.starts_with("att.") { Tensor::zeros(t.shape()) } else { t.clone() };
        ps.push(name, t);
    }
    s.set_params(ps).unwrap();
    let (_, a) = s.forward_classify(&random(&[6, 5, 3], 3)).unwrap();
    assert!(a.data().iter().all(|v| (v - 1.0 / 30.0).abs() < 1e-15));
}

#[test]
fn wrong_input_shape_is_rejected() {
    let s = state(2, 8, 8, 3);
    assert!(s.forward_classify(&Tensor::zeros(&[8, 8, 1])).is_err());
    assert!(s.forward_classify(&Tensor::zeros(&[4, 8, 3])).is_err());
}

// Regression values recorded from the first run on the fixture.
const GOLDEN_PROBS: [f64; 3] = [0.4171919555238713, 0.2914829770319023, 0.2913250674442264];
/// `(cls, att, total)` at `λ = 0.5`.
const GOLDEN_BREAKDOWN: [f64; 3] = [1.2327736727290488, 0.5307731413712676, 1.4981602434146826];

#[test]
fn golden_fixture() {
    let s = state(3, 8, 8, 42);
    let x = fixture_image(8, 8);
    let (p, _) = s.forward_classify(&x).unwrap();
    let a_ref = Tensor::new(vec![4, 4], (0..16).map(|i| (i % 5) as f64 / 4.0).collect()).unwrap();
    let b = s.total_loss(&x, 1, &a_ref, 0.5).unwrap();
    for (a, g) in p.iter().zip(GOLDEN_PROBS) {
        assert!((a - g).abs() <= 1e-12, "{p:?}");
    }
    for (a, g) in [b.cls, b.att, b.total].iter().zip(GOLDEN_BREAKDOWN) {
        assert!((a - g).abs() <= 1e-12, "{b:?}");
    }
    assert_eq!(b.lambda, 0.5);
}

fn att_loss(a_theta: &[f64], a_ref: &[f64], shape: &[usize]) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(shape.to_vec(), a_theta.to_vec()).unwrap());
    let l = attention_loss(&mut g, a, &Tensor::new(shape.to_vec(), a_ref.to_vec()).unwrap()).unwrap();
    g.value(l).item()
}

#[test]
fn attention_loss_examples() {
    let a = [0.4, 0.1, 0.2, 0.3];
    assert_eq!(att_loss(&a, &[1.0; 4], &[2, 2]), 0.0);
    assert!((att_loss(&a, &[0.0; 4], &[2, 2]) - 1.0).abs() < 1e-15);
    assert!((att_loss(&a, &[1.0, 0.0, 0.0, 1.0], &[2, 2]) - 0.3).abs() < 1e-15);
}

#[test]
fn attention_loss_rejects_non_map_attention() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::ones(&[4]));
    assert!(attention_loss(&mut g, a, &Tensor::ones(&[2, 2])).is_err());
}

fn ce(probs: &[f64], y: usize) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(Tensor::vector(probs.to_vec()));
    let l = cross_entropy(&mut g, p, y).unwrap();
    g.value(l).item()
}

#[test]
fn cross_entropy_examples() {
    for y in 0..3 {
        assert!((ce(&[1.0 / 3.0; 3], y) - 3f64.ln()).abs() < 1e-12);
    }
    assert_eq!(ce(&[0.0, 1.0], 1), 0.0);
    assert!((ce(&[0.7, 0.2, 0.1], 1) + 0.2f64.ln()).abs() < 1e-12);
    assert!((ce(&[1.0, 0.0], 1) + 1e-12f64.ln()).abs() < 1e-9);
    let mut g = Graph::new();
    let p = g.constant(Tensor::vector(vec![0.5, 0.5]));
    assert!(cross_entropy(&mut g, p, 2).is_err());
}

#[test]
fn total_loss_degenerate_cases() {
    let s = state(2, 8, 8, 5);
    let x = random(&[8, 8, 3], 6);
    let a_ref = random(&[8, 8], 7);
    let b = s.total_loss(&x, 0, &a_ref, 0.0).unwrap();
    assert_eq!(b.total.to_bits(), b.cls.to_bits());
    let b = s.total_loss(&x, 0, &Tensor::ones(&[8, 8]), 1.0).unwrap();
    assert_eq!(b.att, 0.0);
    assert_eq!(b.total, b.cls);
    assert!(s.total_loss(&x, 0, &a_ref, -1.0).is_err());
}

#[test]
fn two_steps_on_a_fixed_batch_descend() {
    let mut descents = 0;
    for trial in 0..100 {
        let mut s = state(2, 8, 8, 100 + trial);
        let xs: Vec<Tensor> = (0..4).map(|i| random(&[8, 8, 3], 1000 * trial + i)).collect();
        let refs: Vec<Tensor> = (0..4).map(|i| random(&[8, 8], 2000 * trial + i)).collect();
        let batch: Vec<_> = (0..4).map(|i| (&xs[i], i % 2, &refs[i])).collect();
        let first = s.train_step(&batch, 0.5, 1e-3).unwrap();
        let second = s.train_step(&batch, 0.5, 1e-3).unwrap();
        if second.total <= first.total {
            descents += 1;
        }
    }
    assert!(descents >= 95, "{descents}/100");
}

#[test]
fn zero_learning_rate_leaves_weights_bitwise() {
    let mut s = state(2, 8, 8, 9);
    let before = s.params().clone();
    let x = random(&[8, 8, 3], 10);
    let r = random(&[8, 8], 11);
    s.train_step(&[(&x, 1, &r)], 0.5, 0.0).unwrap();
    assert_eq!(s.params(), &before);
}

#[test]
fn empty_batch_is_rejected() {
    let mut s = state(2, 8, 8, 12);
    assert!(s.train_step(&[], 0.5, 1e-3).is_err());
}

#[test]
fn batch_gradient_matches_finite_differences() {
    let mut s = state(2, 6, 6, 13);
    // Offset biases so no ReLU sits exactly on its kink.
    let mut shifted = paric::nn::ParamSet::new();
    for (n, t) in s.params().iter() {
        shifted.push(n, if n.ends_with(".b") { t.map(|v| v + 0.05) } else { t.clone() });
    }
    s.set_params(shifted).unwrap();
    let xs: Vec<Tensor> = (0..3).map(|i| random(&[6, 6, 3], 20 + i)).collect();
    let refs: Vec<Tensor> = (0..3).map(|i| random(&[3, 3], 30 + i)).collect();
    let batch: Vec<_> = (0..3).map(|i| (&xs[i], i % 2, &refs[i])).collect();
    let (loss, grads) = s.batch_gradients(&batch, 0.7).unwrap();

    let mean_total = |st: &ClassifierState| -> f64 {
        batch.iter().map(|&(x, y, r)| st.total_loss(x, y, r, 0.7).unwrap().total).sum::<f64>() / 3.0
    };
    assert!((mean_total(&s) - loss.total).abs() < 1e-12);
    let eps = 1e-5;
    let names: Vec<String> = s.params().iter().map(|(n, _)| n.to_string()).collect();
    let mut worst: f64 = 0.0;
    for (pi, name) in names.iter().enumerate() {
        let numel = s.params().get(name).unwrap().numel();
        for k in 0..numel {
            let eval = |d: f64| {
                let mut ps = paric::nn::ParamSet::new();
                for (n, t) in s.params().iter() {
                    let mut t = t.clone();
                    if n == name {
                        t.data_mut()[k] += d;
                    }
                    ps.push(n, t);
                }
                let mut probe = s.clone();
                probe.set_params(ps).unwrap();
                mean_total(&probe)
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let analytic = grads[pi][k];
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(1.0));
        }
    }
    assert!(worst <= 1e-4, "{worst}");
}

#[test]
fn attention_stays_on_the_simplex_during_training() {
    let mut s = state(2, 8, 8, 14);
    let xs: Vec<Tensor> = (0..6).map(|i| random(&[8, 8, 3], 40 + i)).collect();
    let refs: Vec<Tensor> = (0..6).map(|i| random(&[8, 8], 50 + i)).collect();
    let batch: Vec<_> = (0..6).map(|i| (&xs[i], i % 2, &refs[i])).collect();
    for _ in 0..20 {
        s.train_step(&batch, 0.5, 1e-2).unwrap();
        let (_, a) = s.forward_classify(&xs[0]).unwrap();
        assert!((a.sum() - 1.0).abs() <= 1e-9);
        assert!(a.data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn checkpoint_round_trip() {
    let s = state(3, 8, 8, 15);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.paric");
    s.save(&path).unwrap();
    let mut other = state(3, 8, 8, 16);
    other.load_weights(&path).unwrap();
    assert_eq!(other.params(), s.params());
    let mut wrong = state(4, 8, 8, 16);
    assert!(wrong.load_weights(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_loss_is_bounded_and_matches_bracket_form(
        logits in prop::collection::vec(-4.0f64..4.0, 12),
        a_ref in prop::collection::vec(0.0f64..=1.0, 12),
    ) {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let a: Vec<f64> = e.iter().map(|v| v / z).collect();
        let l = att_loss(&a, &a_ref, &[3, 4]);
        let bracket: f64 = a.iter().zip(&a_ref).map(|(x, r)| (1.0 - r) * x).sum();
        prop_assert!((l - bracket).abs() <= 1e-15);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&l));
    }

    #[test]
    fn attention_loss_grows_with_mass_on_unpermitted_pixels(
        a in prop::collection::vec(0.0f64..1.0, 6),
        a_ref in prop::collection::vec(0.0f64..0.99, 6),
        pixel in 0usize..6,
        bump in 1e-3f64..0.5,
    ) {
        let base = att_loss(&a, &a_ref, &[2, 3]);
        let mut more = a.clone();
        more[pixel] += bump;
        prop_assert!(att_loss(&more, &a_ref, &[2, 3]) > base);
    }
}
