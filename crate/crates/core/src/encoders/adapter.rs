//! Probabilistic adapters: a two-layer perceptron mapping a deterministic
//! embedding to per-dimension GGD parameters, with Monte Carlo dropout after
//! the hidden layer.
//!
//! The adapter training objective is a surrogate: GGD negative
//! log-likelihood of each embedding under its own modality's distribution
//! (intra) plus, weighted by `lambda_cross`, under the other modality's
//! distribution (cross).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::frozen::FrozenEncoder;
use super::prompt::Prompt;
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::ggd::{self, GgdParams};
use crate::nn::{self, accumulate, Adam, ParamSet};
use crate::seed::{self, RandomStream};

pub const ALPHA_FLOOR: f64 = 1e-3;
pub const BETA_FLOOR: f64 = 0.2;
pub const DEFAULT_DROPOUT: f64 = 0.1;

/// Graph handles for one adapter evaluation.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub mu: Var,
    pub alpha: Var,
    pub beta: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbAdapter {
    dim: usize,
    hidden: usize,
    dropout_rate: f64,
    params: ParamSet,
}

impl ProbAdapter {
    /// Seeded initialisation. The scale and shape output biases start at
    /// `alpha ≈ init_alpha` and `beta ≈ 2`.
    pub fn new(dim: usize, hidden: usize, dropout_rate: f64, init_alpha: f64, rng: &mut RandomStream) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::contract("ProbAdapter::new", "dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::contract("ProbAdapter::new", format!("dropout rate {dropout_rate} not in [0, 1)")));
        }
        if !(init_alpha > ALPHA_FLOOR) {
            return Err(Error::contract("ProbAdapter::new", "initial alpha must exceed the floor"));
        }
        let mut params = ParamSet::new();
        params.push("fc1.w", nn::he_uniform(rng, &[dim, hidden], dim));
        params.push("fc1.b", Tensor::zeros(&[hidden]));
        params.push("fc2.w", nn::uniform(rng, &[hidden, 3 * dim], 0.1 / (hidden as f64).sqrt()));
        let mut b = vec![0.0; 3 * dim];
        let raw_alpha = inverse_softplus(init_alpha - ALPHA_FLOOR);
        let raw_beta = inverse_softplus(2.0 - BETA_FLOOR);
        b[dim..2 * dim].fill(raw_alpha);
        b[2 * dim..].fill(raw_beta);
        params.push("fc2.b", Tensor::vector(b));
        Ok(ProbAdapter {
            dim,
            hidden,
            dropout_rate,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract("set_dropout_rate", format!("dropout rate {rate} not in [0, 1)")));
        }
        self.dropout_rate = rate;
        Ok(())
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        self.params.check_layout(&params)?;
        self.params = params;
        Ok(())
    }

    /// Pins the scale output to the floor: the `raw_alpha` weights are zeroed
    /// and their biases pushed far negative, so `alpha = 1e-3 + softplus(-60)`.
    pub fn floor_scale(&mut self) {
        let d = self.dim;
        let mut ps = ParamSet::new();
        for (name, t) in self.params.iter() {
            let mut t = t.clone();
            match name {
                "fc2.w" => {
                    let cols = 3 * d;
                    for (i, v) in t.data_mut().iter_mut().enumerate() {
                        if (d..2 * d).contains(&(i % cols)) {
                            *v = 0.0;
                        }
                    }
                }
                "fc2.b" => t.data_mut()[d..2 * d].fill(-60.0),
                _ => {}
            }
            ps.push(name, t);
        }
        self.params = ps;
    }

    fn dropout_mask(&self, rng: &mut RandomStream) -> Tensor {
        let keep = 1.0 - self.dropout_rate;
        let data = (0..self.hidden)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        Tensor::vector(data)
    }

    /// Adapter on the graph with the given bound weights. A dropout mask is
    /// drawn from `rng` only when `mc_dropout` is set and the rate is positive.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        w: &[Var],
        z: Var,
        mc_dropout: bool,
        rng: &mut RandomStream,
    ) -> Result<AdapterVars> {
        if g.shape(z) != [self.dim] {
            return Err(Error::contract(
                "adapt",
                format!("embedding shape {:?} does not match adapter dim {}", g.shape(z), self.dim),
            ));
        }
        let h = g.matmul(z, w[0])?;
        let h = g.add(h, w[1])?;
        let mut h = g.relu(h);
        if mc_dropout && self.dropout_rate > 0.0 {
            let m = g.constant(self.dropout_mask(rng));
            h = g.mul(h, m)?;
        }
        let o = g.matmul(h, w[2])?;
        let o = g.add(o, w[3])?;
        let d = self.dim;
        let mu = g.slice(o, 0, d)?;
        let ra = g.slice(o, d, 2 * d)?;
        let rb = g.slice(o, 2 * d, 3 * d)?;
        let alpha = g.softplus(ra);
        let alpha = g.add_scalar(alpha, ALPHA_FLOOR);
        let beta = g.softplus(rb);
        let beta = g.add_scalar(beta, BETA_FLOOR);
        Ok(AdapterVars { mu, alpha, beta })
    }

    /// Adapter on the graph with its weights entering as constants.
    pub fn forward(&self, g: &mut Graph, z: Var, mc_dropout: bool, rng: &mut RandomStream) -> Result<AdapterVars> {
        let w = self.params.bind(g, false);
        self.forward_with(g, &w, z, mc_dropout, rng)
    }

    /// GGD parameters for a deterministic embedding.
    pub fn adapt(&self, z: &[f64], mc_dropout: bool, rng: &mut RandomStream) -> Result<GgdParams> {
        if z.len() != self.dim {
            return Err(Error::contract(
                "adapt",
                format!("embedding has {} entries, adapter expects {}", z.len(), self.dim),
            ));
        }
        let mut g = Graph::new();
        let zv = g.constant(Tensor::vector(z.to_vec()));
        let v = self.forward(&mut g, zv, mc_dropout, rng)?;
        GgdParams::new(
            g.value(v.mu).data().to_vec(),
            g.value(v.alpha).data().to_vec(),
            g.value(v.beta).data().to_vec(),
        )
    }
}

fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterTrainConfig {
    pub hidden: usize,
    pub dropout_rate: f64,
    pub init_alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_cross: f64,
}

impl Default for AdapterTrainConfig {
    fn default() -> Self {
        AdapterTrainConfig {
            hidden: 64,
            dropout_rate: DEFAULT_DROPOUT,
            init_alpha: 1.0,
            epochs: 30,
            batch_size: 32,
            lr: 3e-3,
            lambda_cross: 1.0,
        }
    }
}

impl AdapterTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("adapter.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("adapter.batch_size", "must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(Error::config("adapter.hidden", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("adapter.dropout_rate", "must lie in [0, 1)"));
        }
        if !(self.init_alpha > ALPHA_FLOOR) || !self.init_alpha.is_finite() {
            return Err(Error::config("adapter.init_alpha", "must exceed 1e-3"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("adapter.lr", "must be finite and non-negative"));
        }
        if !(self.lambda_cross >= 0.0) || !self.lambda_cross.is_finite() {
            return Err(Error::config("adapter.lambda_cross", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Precomputed frozen embeddings of one matched image/prompt pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPair {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
}

/// Embeds `(image, prompt)` pairs with the frozen encoder. Prompts are
/// embedded once per distinct text.
pub fn embed_pairs(enc: &FrozenEncoder, pairs: &[(&Tensor, &Prompt)]) -> Result<Vec<EmbeddingPair>> {
    let mut text_cache: Vec<(String, Vec<f64>)> = Vec::new();
    pairs
        .iter()
        .map(|(x, p)| {
            let (zi, _) = enc.encode_image(x)?;
            let key = p.text();
            let zt = match text_cache.iter().find(|(k, _)| *k == key) {
                Some((_, z)) => z.clone(),
                None => {
                    let z = enc.encode_text(p)?;
                    text_cache.push((key, z.clone()));
                    z
                }
            };
            Ok(EmbeddingPair { image: zi, text: zt })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterTrainLog {
    /// Held-out loss before any update.
    pub initial_heldout: f64,
    pub epochs: Vec<AdapterEpoch>,
    pub frozen_fingerprint: String,
}

impl AdapterTrainLog {
    pub fn final_heldout(&self) -> f64 {
        self.epochs.last().map_or(self.initial_heldout, |e| e.heldout_loss)
    }

    /// Fractional held-out loss drop relative to the initial value.
    pub fn relative_improvement(&self) -> f64 {
        (self.initial_heldout - self.final_heldout()) / self.initial_heldout.abs()
    }
}

/// Per-pair loss terms: `(intra, cross)`.
fn pair_loss(
    g: &mut Graph,
    ai: &ProbAdapter,
    at: &ProbAdapter,
    wi: &[Var],
    wt: &[Var],
    pair: &EmbeddingPair,
    mc_dropout: bool,
    rng: &mut RandomStream,
) -> Result<(Var, Var)> {
    let zi = g.constant(Tensor::vector(pair.image.clone()));
    let zt = g.constant(Tensor::vector(pair.text.clone()));
    let oi = ai.forward_with(g, wi, zi, mc_dropout, rng)?;
    let ot = at.forward_with(g, wt, zt, mc_dropout, rng)?;
    let ii = ggd::ggd_nll_graph(g, oi.mu, oi.alpha, oi.beta, zi)?;
    let tt = ggd::ggd_nll_graph(g, ot.mu, ot.alpha, ot.beta, zt)?;
    let it = ggd::ggd_nll_graph(g, oi.mu, oi.alpha, oi.beta, zt)?;
    let ti = ggd::ggd_nll_graph(g, ot.mu, ot.alpha, ot.beta, zi)?;
    let intra = g.add(ii, tt)?;
    let cross = g.add(it, ti)?;
    Ok((intra, cross))
}

/// Mean deterministic (no dropout) loss over a set of pairs.
pub fn adapter_loss(
    ai: &ProbAdapter,
    at: &ProbAdapter,
    pairs: &[EmbeddingPair],
    lambda_cross: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::contract("adapter_loss", "empty pairs"));
    }
    let mut rng = seed::stream(0, "unused", 0);
    let mut total = 0.0;
    for p in pairs {
        let mut g = Graph::new();
        let wi = ai.params.bind(&mut g, false);
        let wt = at.params.bind(&mut g, false);
        let (intra, cross) = pair_loss(&mut g, ai, at, &wi, &wt, p, false, &mut rng)?;
        total += g.value(intra).item() + lambda_cross * g.value(cross).item();
    }
    Ok(total / pairs.len() as f64)
}

/// Trains both adapters jointly on matched pairs with Adam; dropout is active
/// during training. `heldout` (may be empty) is scored without dropout after
/// every epoch. The frozen encoder fingerprint is checked before and after.
pub fn train_adapters(
    ai: &mut ProbAdapter,
    at: &mut ProbAdapter,
    encoder: &FrozenEncoder,
    train: &[EmbeddingPair],
    heldout: &[EmbeddingPair],
    cfg: &AdapterTrainConfig,
    rng: &mut RandomStream,
) -> Result<AdapterTrainLog> {
    if train.is_empty() {
        return Err(Error::contract("train_adapters", "empty pairs"));
    }
    cfg.validate()?;
    if ai.dim != at.dim {
        return Err(Error::contract("train_adapters", "image and text adapters differ in dimension"));
    }
    let before = encoder.fingerprint();
    let score = |ai: &ProbAdapter, at: &ProbAdapter| -> Result<f64> {
        if heldout.is_empty() {
            Ok(f64::NAN)
        } else {
            adapter_loss(ai, at, heldout, cfg.lambda_cross)
        }
    };
    let initial_heldout = score(ai, at)?;

    let n_i = ai.params.len();
    let mut joint = ParamSet::new();
    for (n, t) in ai.params.iter() {
        joint.push(format!("image.{n}"), t.clone());
    }
    for (n, t) in at.params.iter() {
        joint.push(format!("text.{n}"), t.clone());
    }
    let mut opt = Adam::new(&joint);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut total: Vec<Vec<f64>> = joint.tensors().map(|t| vec![0.0; t.numel()]).collect();
            for &i in batch {
                let mut g = Graph::new();
                let w = joint.bind(&mut g, true);
                let (wi, wt) = w.split_at(n_i);
                let (intra, cross) = pair_loss(&mut g, ai, at, wi, wt, &train[i], true, rng)?;
                let c = g.scale(cross, cfg.lambda_cross);
                let l = g.add(intra, c)?;
                epoch_loss += g.value(l).item();
                let l = g.scale(l, 1.0 / batch.len() as f64);
                g.backward(l, &[])?;
                accumulate(&mut total, &joint.grads(&g, &w));
            }
            opt.update(&mut joint, &total, cfg.lr);
        }
        split_joint(&joint, n_i, ai, at)?;
        let l = epoch_loss / train.len() as f64;
        if !l.is_finite() {
            return Err(Error::Numeric(format!("adapter loss diverged at epoch {epoch}")));
        }
        epochs.push(AdapterEpoch {
            epoch,
            train_loss: l,
            heldout_loss: score(ai, at)?,
        });
    }
    let after = encoder.fingerprint();
    assert_eq!(before, after, "frozen encoder weights changed during adapter training");
    Ok(AdapterTrainLog {
        initial_heldout,
        epochs,
        frozen_fingerprint: after,
    })
}

fn split_joint(joint: &ParamSet, n_i: usize, ai: &mut ProbAdapter, at: &mut ProbAdapter) -> Result<()> {
    let mut pi = ParamSet::new();
    let mut pt = ParamSet::new();
    for (k, (n, t)) in joint.iter().enumerate() {
        if k < n_i {
            pi.push(n.trim_start_matches("image."), t.clone());
        } else {
            pt.push(n.trim_start_matches("text."), t.clone());
        }
    }
    ai.set_params(pi)?;
    at.set_params(pt)
}
