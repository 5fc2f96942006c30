use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn relu_forward() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn conv2d_ones_sliding_window() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[3, 3, 1]));
    let w = g.constant(Tensor::ones(&[2, 2, 1, 1]));
    let y = g.conv2d(x, w, None, 0).unwrap();
    assert_eq!(g.shape(y), &[2, 2, 1]);
    assert_eq!(g.value(y).data(), &[4.0; 4]);
}

#[test]
fn conv2d_padding_matches_manual_sum() {
    // 3x3 ones kernel over a 3x3 ones image with pad 1 counts in-bounds neighbours.
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[3, 3, 1]));
    let w = g.constant(Tensor::ones(&[3, 3, 1, 1]));
    let y = g.conv2d(x, w, None, 1).unwrap();
    assert_eq!(
        g.value(y).data(),
        &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
    );
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
    assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    let err = g.matmul(a, a).unwrap_err().to_string();
    assert!(err.contains("matmul"), "{err}");
}

#[test]
fn conv_kernel_larger_than_padded_input_is_rejected() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[2, 2, 1]));
    let w = g.constant(Tensor::ones(&[5, 5, 1, 1]));
    assert!(g.conv2d(x, w, None, 1).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[2, 3, 4], 0.3));
    let s = g.sum(x);
    g.backward(s, &[]).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_of_self_dot() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let s = g.dot(x, x).unwrap();
    g.backward(s, &[]).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(Tensor::ones(&[3]));
    let y = g.relu(x);
    assert!(g.backward(y, &[]).is_err());
}

#[test]
fn backward_rejects_empty_graph() {
    let mut g = Graph::new();
    let mut other = Graph::new();
    let v = other.constant(Tensor::scalar(1.0));
    assert!(g.backward(v, &[]).is_err());
}

#[test]
fn retained_interior_node_gets_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
    let h = g.scale(x, 2.0);
    let r = g.relu(h);
    let s = g.sum(r);
    g.backward(s, &[h]).unwrap();
    assert_eq!(g.grad(h).unwrap().data(), &[1.0, 0.0, 1.0]);
    assert!(g.grad(r).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 0.0, 2.0]);
}

#[test]
fn gradients_accumulate_across_paths() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![3.0]));
    let a = g.mul(x, x).unwrap();
    let b = g.add(a, x).unwrap();
    let s = g.sum(b);
    g.backward(s, &[]).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[7.0]);
}

#[test]
fn mean_relu_matvec_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
    let x = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let err = grad_check(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let r = g.relu(h);
            Ok(g.mean(r))
        },
        &[w, x],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn grad_check_of_sum_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[3, 5], -2.0, 2.0);
    let err = grad_check(|g, v| Ok(g.sum(v[0])), &[x], 1e-5).unwrap();
    assert!(err <= 1e-10, "{err}");
}

#[test]
fn grad_check_rejects_bad_eps() {
    let x = Tensor::scalar(1.0);
    assert!(grad_check(|g, v| Ok(g.sum(v[0])), std::slice::from_ref(&x), 0.0).is_err());
    assert!(grad_check(|g, v| Ok(g.sum(v[0])), &[x], 0.1).is_err());
}

#[test]
fn grad_check_reports_non_finite_output() {
    let x = Tensor::vector(vec![1.0]);
    let res = grad_check(
        |g, v| {
            let l = g.scale(v[0], 1e308);
            let e = g.exp(l);
            Ok(g.sum(e))
        },
        &[x],
        1e-5,
    );
    assert!(res.is_err());
}

#[test]
fn relu_gradient_is_zero_at_and_below_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![-3.0, -1e-300, 0.0, 1e-300, 2.0]));
    let r = g.relu(x);
    let s = g.sum(r);
    g.backward(s, &[]).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn log_is_clamped() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.0, 1.0]));
    let l = g.log(x);
    assert_eq!(g.value(l).data()[0], LOG_CLAMP.ln());
    let s = g.sum(l);
    g.backward(s, &[]).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn bilinear_resize_of_constant_is_constant() {
    for &(h, w, oh, ow) in &[(4, 4, 8, 8), (8, 8, 3, 5), (5, 7, 5, 7), (1, 1, 6, 2)] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[h, w], 0.37));
        let y = g.bilinear_resize(x, oh, ow).unwrap();
        assert_eq!(g.shape(y), &[oh, ow]);
        for &v in g.value(y).data() {
            assert!((v - 0.37).abs() < 1e-15);
        }
    }
}

#[test]
fn spatial_softmax_sums_to_one_per_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&mut rng, &[3, 4, 2], -3.0, 3.0));
    let y = g.spatial_softmax(x).unwrap();
    let d = g.value(y).data();
    for ch in 0..2 {
        let s: f64 = d.iter().skip(ch).step_by(2).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn matmul_vector_forms() {
    let mut g = Graph::new();
    let m = g.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let v = g.constant(Tensor::vector(vec![1.0, 1.0]));
    let u = g.constant(Tensor::vector(vec![1.0, 0.0, -1.0]));
    let row = g.matmul(v, m).unwrap();
    assert_eq!(g.value(row).data(), &[5.0, 7.0, 9.0]);
    assert_eq!(g.shape(row), &[3]);
    let col = g.matmul(m, u).unwrap();
    assert_eq!(g.value(col).data(), &[-2.0, -2.0]);
}

#[test]
fn concat_slice_reshape() {
    let mut g = Graph::new();
    let a = g.param(Tensor::vector(vec![1.0, 2.0]));
    let b = g.param(Tensor::vector(vec![3.0]));
    let c = g.concat(&[a, b]).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
    let s = g.slice(c, 1, 3).unwrap();
    assert_eq!(g.value(s).data(), &[2.0, 3.0]);
    let r = g.reshape(s, &[1, 2]).unwrap();
    let w = g.constant(Tensor::new(vec![1, 2], vec![10.0, 100.0]).unwrap());
    let p = g.mul(r, w).unwrap();
    let l = g.sum(p);
    g.backward(l, &[]).unwrap();
    assert_eq!(g.grad(a).unwrap().data(), &[0.0, 10.0]);
    assert_eq!(g.grad(b).unwrap().data(), &[100.0]);
}

#[test]
fn linearity_of_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = rand_tensor(&mut rng, &[6], -1.0, 1.0);
    let (ca, cb) = (0.7, -1.9);
    let f = |g: &mut Graph, x: Var| -> Result<Var> {
        let e = g.exp(x);
        Ok(g.sum(e))
    };
    let h = |g: &mut Graph, x: Var| -> Result<Var> {
        let s = g.softplus(x);
        let q = g.mul(s, s)?;
        Ok(g.mean(q))
    };
    let grad_of = |which: u8| -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let out = match which {
            0 => f(&mut g, x).unwrap(),
            1 => h(&mut g, x).unwrap(),
            _ => {
                let a = f(&mut g, x).unwrap();
                let b = h(&mut g, x).unwrap();
                let a = g.scale(a, ca);
                let b = g.scale(b, cb);
                g.add(a, b).unwrap()
            }
        };
        g.backward(out, &[]).unwrap();
        g.grad(x).unwrap().data().to_vec()
    };
    let (gf, gh, gc) = (grad_of(0), grad_of(1), grad_of(2));
    for k in 0..gf.len() {
        assert!((gc[k] - (ca * gf[k] + cb * gh[k])).abs() <= 1e-12);
    }
}

/// One random instance of every differentiable op, checked against
/// central differences.
fn op_instance(rng: &mut ChaCha8Rng, op: usize) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>) {
    let pos = |rng: &mut ChaCha8Rng, s: &[usize]| rand_tensor(rng, s, 0.3, 2.0);
    let any = |rng: &mut ChaCha8Rng, s: &[usize]| rand_tensor(rng, s, -1.5, 1.5);
    // A fixed random projection turns vector outputs into a scalar so every
    // output component contributes.
    fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = g.shape(v).to_vec();
        let w = g.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
        let p = g.mul(v, w)?;
        Ok(g.sum(p))
    }
    match op {
        0 => (vec![any(rng, &[3, 4]), any(rng, &[3, 4])], Box::new(|g, v| { let y = g.add(v[0], v[1])?; project(g, y, 1) })),
        1 => (vec![any(rng, &[5]), any(rng, &[5])], Box::new(|g, v| { let y = g.sub(v[0], v[1])?; project(g, y, 2) })),
        2 => (vec![any(rng, &[2, 3]), any(rng, &[1])], Box::new(|g, v| { let y = g.mul(v[0], v[1])?; project(g, y, 3) })),
        3 => (vec![any(rng, &[4]), pos(rng, &[4])], Box::new(|g, v| { let y = g.div(v[0], v[1])?; project(g, y, 4) })),
        4 => (vec![pos(rng, &[4]), any(rng, &[4])], Box::new(|g, v| { let y = g.pow(v[0], v[1])?; project(g, y, 5) })),
        5 => (vec![any(rng, &[3, 4]), any(rng, &[4, 2])], Box::new(|g, v| { let y = g.matmul(v[0], v[1])?; project(g, y, 6) })),
        6 => (vec![any(rng, &[5, 5, 2]), any(rng, &[3, 3, 2, 3]), any(rng, &[3])], Box::new(|g, v| { let y = g.conv2d(v[0], v[1], Some(v[2]), 1)?; project(g, y, 7) })),
        7 => (vec![any(rng, &[6])], Box::new(|g, v| { let y = g.relu(v[0]); project(g, y, 8) })),
        8 => (vec![any(rng, &[6])], Box::new(|g, v| { let y = g.exp(v[0]); project(g, y, 9) })),
        9 => (vec![pos(rng, &[6])], Box::new(|g, v| { let y = g.log(v[0]); project(g, y, 10) })),
        10 => (vec![pos(rng, &[6])], Box::new(|g, v| { let y = g.pow_scalar(v[0], 1.7); project(g, y, 11) })),
        11 => (vec![any(rng, &[3, 2])], Box::new(|g, v| { let y = g.sum_axis(v[0], 0)?; project(g, y, 12) })),
        12 => (vec![any(rng, &[2, 3, 2])], Box::new(|g, v| { let y = g.mean_axis(v[0], 1)?; project(g, y, 13) })),
        13 => (vec![any(rng, &[3, 4])], Box::new(|g, v| { let y = g.softmax(v[0])?; project(g, y, 14) })),
        14 => (vec![any(rng, &[3, 3, 2])], Box::new(|g, v| { let y = g.spatial_softmax(v[0])?; project(g, y, 15) })),
        15 => (vec![any(rng, &[5]), any(rng, &[5])], Box::new(|g, v| g.dot(v[0], v[1]))),
        16 => (vec![any(rng, &[6])], Box::new(|g, v| { let y = g.abs(v[0]); project(g, y, 16) })),
        17 => (vec![any(rng, &[6])], Box::new(|g, v| Ok(g.max(v[0])))),
        18 => (vec![any(rng, &[6])], Box::new(|g, v| Ok(g.min(v[0])))),
        19 => (vec![any(rng, &[3, 4, 2])], Box::new(|g, v| { let y = g.bilinear_resize(v[0], 5, 3)?; project(g, y, 17) })),
        20 => (vec![any(rng, &[2, 2]), any(rng, &[1, 2])], Box::new(|g, v| { let y = g.concat(&[v[0], v[1]])?; project(g, y, 18) })),
        21 => (vec![any(rng, &[6])], Box::new(|g, v| { let y = g.softplus(v[0]); project(g, y, 19) })),
        22 => (vec![pos(rng, &[5])], Box::new(|g, v| { let y = g.ln_gamma(v[0]); project(g, y, 20) })),
        23 => (vec![any(rng, &[6])], Box::new(|g, v| { let y = g.slice(v[0], 1, 4)?; project(g, y, 21) })),
        _ => (vec![any(rng, &[4])], Box::new(|g, v| Ok(g.mean(v[0])))),
    }
}

pub(crate) const OP_COUNT: usize = 25;

#[test]
fn every_op_matches_finite_differences_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for op in 0..OP_COUNT {
        for trial in 0..50 {
            let (inputs, f) = op_instance(&mut rng, op);
            let err = grad_check(|g, v| f(g, v), &inputs, 1e-5).unwrap();
            assert!(err <= 1e-4, "op {op} trial {trial}: rel err {err}");
        }
    }
}
