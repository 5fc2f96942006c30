//! Named parameter sets and the Adam optimizer.

use rand::Rng;

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered collection of named weight tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    /// Places every tensor on the graph, in order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors().map(|t| g.leaf(t.clone(), trainable)).collect()
    }

    /// Collects the gradients of previously bound vars, in order.
    pub fn grads(&self, g: &Graph, vars: &[Var]) -> Vec<Vec<f64>> {
        vars.iter()
            .zip(self.tensors())
            .map(|(&v, t)| {
                g.grad(v)
                    .map(|gt| gt.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    }

    /// Checks that `other` has the same names and shapes, in the same order.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in self.iter().zip(other.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::Format(format!(
                    "tensor `{n2}` {:?} does not match expected `{n1}` {:?}",
                    t2.shape(),
                    t1.shape()
                )));
            }
        }
        Ok(())
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }
}

/// Adds per-sample gradients into a running total.
pub fn accumulate(total: &mut [Vec<f64>], grads: &[Vec<f64>]) {
    for (t, g) in total.iter_mut().zip(grads) {
        for (a, b) in t.iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// He-style uniform initialisation with bound `sqrt(6 / fan_in)`.
pub fn he_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    uniform(rng, shape, bound)
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.numel()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    /// First and second moment buffers, for checkpointing.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }
}
