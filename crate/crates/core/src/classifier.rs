//! Attention-pooling image classifier and its losses.
//!
//! Two 3×3 conv layers (ReLU) produce features; a 1×1 conv gives attention
//! logits that a spatial softmax turns into `A_θ`, a distribution over
//! pixels. The image representation is the `A_θ`-weighted sum of features,
//! followed by a linear class head and softmax. Because the pooled features
//! depend on `A_θ`, the attention penalty trains the same map the classifier
//! actually uses as evidence weighting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{self, accumulate, Adam, ParamSet};
use crate::saliency::resize_map;
use crate::seed::RandomStream;

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_LR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub att: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Graph handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub probs: Var,
    /// `[H, W]` spatial attention.
    pub attention: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierState {
    num_classes: usize,
    height: usize,
    width: usize,
    params: ParamSet,
    optimizer: Adam,
}

impl ClassifierState {
    /// Seeded initialisation for `[height, width, 3]` inputs.
    pub fn new(num_classes: usize, height: usize, width: usize, channels: [usize; 2], rng: &mut RandomStream) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::contract("ClassifierState::new", "need at least two classes"));
        }
        if height == 0 || width == 0 || channels.contains(&0) {
            return Err(Error::contract("ClassifierState::new", "dimensions must be positive"));
        }
        let [c1, c2] = channels;
        let mut params = ParamSet::new();
        params.push("conv1.w", nn::he_uniform(rng, &[3, 3, 3, c1], 27));
        params.push("conv1.b", Tensor::zeros(&[c1]));
        params.push("conv2.w", nn::he_uniform(rng, &[3, 3, c1, c2], 9 * c1));
        params.push("conv2.b", Tensor::zeros(&[c2]));
        params.push("att.w", nn::uniform(rng, &[1, 1, c2, 1], 0.1));
        params.push("att.b", Tensor::zeros(&[1]));
        params.push("head.w", nn::he_uniform(rng, &[c2, num_classes], c2));
        params.push("head.b", Tensor::zeros(&[num_classes]));
        let optimizer = Adam::new(&params);
        Ok(ClassifierState {
            num_classes,
            height,
            width,
            params,
            optimizer,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Replaces the weights (same layout) and resets the optimizer.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        self.params.check_layout(&params)?;
        self.optimizer = Adam::new(&params);
        self.params = params;
        Ok(())
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params)
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        self.set_params(checkpoint::load(path)?)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = [self.height, self.width, 3];
        if x.shape() != want {
            return Err(Error::contract(
                "forward_classify",
                format!("image shape {:?} does not match classifier input {want:?}", x.shape()),
            ));
        }
        Ok(())
    }

    /// Forward pass on the graph with bound weights `w`.
    pub fn forward_graph(&self, g: &mut Graph, w: &[Var], x: &Tensor) -> Result<ForwardVars> {
        self.check_input(x)?;
        let xv = g.constant(x.clone());
        let h = g.conv2d(xv, w[0], Some(w[1]), 1)?;
        let h = g.relu(h);
        let h = g.conv2d(h, w[2], Some(w[3]), 1)?;
        let feat = g.relu(h);
        let logits = g.conv2d(feat, w[4], Some(w[5]), 0)?;
        let a = g.spatial_softmax(logits)?;
        let hw = self.height * self.width;
        let a_flat = g.reshape(a, &[hw])?;
        let c = g.shape(feat)[2];
        let feat_flat = g.reshape(feat, &[hw, c])?;
        let pooled = g.matmul(a_flat, feat_flat)?;
        let z = g.matmul(pooled, w[6])?;
        let z = g.add(z, w[7])?;
        let probs = g.softmax(z)?;
        let attention = g.reshape(a, &[self.height, self.width])?;
        Ok(ForwardVars { probs, attention })
    }

    /// Class probabilities and the `[H, W]` attention map.
    pub fn forward_classify(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut g = Graph::new();
        let w = self.params.bind(&mut g, false);
        let f = self.forward_graph(&mut g, &w, x)?;
        Ok((g.value(f.probs).data().to_vec(), g.value(f.attention).clone()))
    }

    /// `(cls, att, total)` on the graph for one labelled example.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        w: &[Var],
        x: &Tensor,
        y: usize,
        a_ref: &Tensor,
        lambda: f64,
    ) -> Result<(Var, Var, Var)> {
        let f = self.forward_graph(g, w, x)?;
        let cls = cross_entropy(g, f.probs, y)?;
        let att = attention_loss(g, f.attention, a_ref)?;
        let total = combine(g, cls, att, lambda)?;
        Ok((cls, att, total))
    }

    pub fn total_loss(&self, x: &Tensor, y: usize, a_ref: &Tensor, lambda: f64) -> Result<LossBreakdown> {
        check_lambda(lambda)?;
        let mut g = Graph::new();
        let w = self.params.bind(&mut g, false);
        let (cls, att, total) = self.loss_graph(&mut g, &w, x, y, a_ref, lambda)?;
        Ok(LossBreakdown {
            cls: g.value(cls).item(),
            att: g.value(att).item(),
            total: g.value(total).item(),
            lambda,
        })
    }

    /// Batch-mean loss and gradients with respect to every weight.
    pub fn batch_gradients(
        &self,
        batch: &[(&Tensor, usize, &Tensor)],
        lambda: f64,
    ) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::contract("train_step", "empty batch"));
        }
        check_lambda(lambda)?;
        let n = batch.len() as f64;
        let mut grads: Vec<Vec<f64>> = self.params.tensors().map(|t| vec![0.0; t.numel()]).collect();
        let (mut cls_sum, mut att_sum) = (0.0, 0.0);
        for &(x, y, a_ref) in batch {
            let mut g = Graph::new();
            let w = self.params.bind(&mut g, true);
            let (cls, att, total) = self.loss_graph(&mut g, &w, x, y, a_ref, lambda)?;
            cls_sum += g.value(cls).item();
            att_sum += g.value(att).item();
            let scaled = g.scale(total, 1.0 / n);
            g.backward(scaled, &[])?;
            accumulate(&mut grads, &self.params.grads(&g, &w));
        }
        let (cls, att) = (cls_sum / n, att_sum / n);
        Ok((
            LossBreakdown {
                cls,
                att,
                total: cls + lambda * att,
                lambda,
            },
            grads,
        ))
    }

    /// One Adam update on the batch-mean total loss. Returns the batch-mean
    /// breakdown before the update.
    pub fn train_step(&mut self, batch: &[(&Tensor, usize, &Tensor)], lambda: f64, lr: f64) -> Result<LossBreakdown> {
        let (loss, grads) = self.batch_gradients(batch, lambda)?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric("classifier loss is not finite".into()));
        }
        self.optimizer.update(&mut self.params, &grads, lr);
        Ok(loss)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::contract("total_loss", format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

/// `cls + λ·att`.
pub fn combine(g: &mut Graph, cls: Var, att: Var, lambda: f64) -> Result<Var> {
    let weighted = g.scale(att, lambda);
    g.add(cls, weighted)
}

/// `Σ |(1 − A_ref) · A_θ|`. `A_ref` is a constant, bilinearly resized to the
/// attention resolution when needed.
pub fn attention_loss(g: &mut Graph, a_theta: Var, a_ref: &Tensor) -> Result<Var> {
    let shape = g.shape(a_theta).to_vec();
    let (h, w) = match *shape.as_slice() {
        [h, w] => (h, w),
        ref s => return Err(Error::contract("attention_loss", format!("attention must be [H, W], got {s:?}"))),
    };
    let r = resize_map(a_ref, h, w)?;
    if r.shape() != shape.as_slice() {
        return Err(Error::contract(
            "attention_loss",
            format!("reference {:?} does not match attention {shape:?}", r.shape()),
        ));
    }
    let permit = g.constant(r.map(|v| 1.0 - v));
    let prod = g.mul(permit, a_theta)?;
    let prod = g.abs(prod);
    Ok(g.sum(prod))
}

/// `−log(max(p_y, 1e-12))`.
pub fn cross_entropy(g: &mut Graph, probs: Var, y: usize) -> Result<Var> {
    let n = g.shape(probs).iter().product::<usize>();
    if y >= n {
        return Err(Error::contract("cross_entropy", format!("label {y} out of range for {n} classes")));
    }
    let py = g.slice(probs, y, y + 1)?;
    let lp = g.log(py);
    let lp = g.sum(lp);
    Ok(g.neg(lp))
}
