//! Frozen stand-in image and text encoders.
//!
//! The image branch is three 3×3 conv layers with ReLU; the last conv output
//! is the feature map `F` that Grad-CAM reads. A global-average-pool plus
//! linear head maps `F` to the embedding. The text branch averages token
//! embeddings (a bag of words) and runs a two-layer perceptron.
//!
//! Weights come from a deterministic pretraining run keyed by a name: a short
//! zero-shot-style alignment of both branches on an unbiased synthetic corpus
//! (glyph shape paired with its prompt, background texture independent of the
//! shape). After construction the weights never change.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::prompt::{Prompt, VOCAB_SIZE};
use crate::biasgen::{self, DatasetSpec, GLYPH_NAMES};
use crate::checkpoint;
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{self, accumulate, Adam, ParamSet};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    /// Output channels of the three conv layers.
    pub channels: [usize; 3],
    /// Number of 2× average-pool downsamplings, applied after the first and
    /// then the second conv layer (0..=2). The feature map has resolution
    /// `height / 2^pools`.
    pub pools: usize,
    pub embed_dim: usize,
    pub token_dim: usize,
    pub text_hidden: usize,
    /// Pretraining corpus size, epochs, batch size and learning rate.
    pub pretrain_samples: usize,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            height: 32,
            width: 32,
            channels: [8, 8, 16],
            pools: 1,
            embed_dim: 16,
            token_dim: 16,
            text_hidden: 32,
            pretrain_samples: 1200,
            pretrain_epochs: 6,
            pretrain_batch: 16,
            pretrain_lr: 3e-3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pools > 2 {
            return Err(Error::config("encoder.pools", "at most 2 downsamplings"));
        }
        let step = 1 << self.pools;
        if self.height == 0 || self.width == 0 || self.height % step != 0 || self.width % step != 0 {
            return Err(Error::config("encoder.height", format!("input size must be a positive multiple of {step}")));
        }
        if self.channels.contains(&0) || self.embed_dim == 0 || self.token_dim == 0 || self.text_hidden == 0 {
            return Err(Error::config("encoder.channels", "layer widths must be positive"));
        }
        if self.pretrain_batch == 0 || self.pretrain_samples == 0 {
            return Err(Error::config("encoder.pretrain_batch", "must be at least 1"));
        }
        Ok(())
    }
}

/// Identifier of the layer whose output is the Grad-CAM feature map.
pub const FEATURE_TAP: &str = "conv3";

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoder {
    name: String,
    config: EncoderConfig,
    image: ParamSet,
    text: ParamSet,
}

fn conv_names(i: usize) -> (String, String) {
    (format!("image.conv{i}.w"), format!("image.conv{i}.b"))
}

impl FrozenEncoder {
    /// Seeded random weights, before pretraining.
    pub fn initial(name: &str, config: &EncoderConfig) -> Self {
        let mut rng = seed::stream(seed::derive_seed(0, name, 0), "encoder-init", 0);
        let mut image = ParamSet::new();
        let mut cin = 3;
        for (i, &cout) in config.channels.iter().enumerate() {
            let (w, b) = conv_names(i + 1);
            image.push(w, nn::he_uniform(&mut rng, &[3, 3, cin, cout], 9 * cin));
            image.push(b, Tensor::zeros(&[cout]));
            cin = cout;
        }
        image.push("image.head.w", nn::he_uniform(&mut rng, &[cin, config.embed_dim], cin));
        image.push("image.head.b", Tensor::zeros(&[config.embed_dim]));

        let mut text = ParamSet::new();
        text.push("text.embed", nn::uniform(&mut rng, &[VOCAB_SIZE, config.token_dim], 1.0));
        text.push("text.fc1.w", nn::he_uniform(&mut rng, &[config.token_dim, config.text_hidden], config.token_dim));
        text.push("text.fc1.b", Tensor::zeros(&[config.text_hidden]));
        text.push("text.fc2.w", nn::he_uniform(&mut rng, &[config.text_hidden, config.embed_dim], config.text_hidden));
        text.push("text.fc2.b", Tensor::zeros(&[config.embed_dim]));

        FrozenEncoder {
            name: name.to_string(),
            config: config.clone(),
            image,
            text,
        }
    }

    /// Initial weights followed by the deterministic pretraining run.
    pub fn pretrained(name: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut enc = Self::initial(name, config);
        enc.pretrain()?;
        Ok(enc)
    }

    /// Process-wide memoised [`pretrained`](Self::pretrained).
    pub fn shared(name: &str, config: &EncoderConfig) -> Result<Self> {
        static CACHE: OnceLock<Mutex<HashMap<String, FrozenEncoder>>> = OnceLock::new();
        let key = format!("{name}|{}", serde_json::to_string(config).expect("config serialises"));
        let cache = CACHE.get_or_init(Default::default);
        if let Some(e) = cache.lock().expect("encoder cache").get(&key) {
            return Ok(e.clone());
        }
        let enc = Self::pretrained(name, config)?;
        cache.lock().expect("encoder cache").insert(key, enc.clone());
        Ok(enc)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// All frozen weights, image branch first.
    pub fn weights(&self) -> ParamSet {
        let mut all = ParamSet::new();
        for (n, t) in self.image.iter().chain(self.text.iter()) {
            all.push(n, t.clone());
        }
        all
    }

    /// SHA-256 over the serialized frozen weights.
    pub fn fingerprint(&self) -> String {
        checkpoint::fingerprint(&self.weights())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(path, &self.weights())
    }

    /// Restores weights saved by [`save`](Self::save) for the given config.
    pub fn load(name: &str, config: &EncoderConfig, path: &std::path::Path) -> Result<Self> {
        let mut enc = Self::initial(name, config);
        let all = checkpoint::load(path)?;
        enc.weights().check_layout(&all)?;
        let n_image = enc.image.len();
        let mut image = ParamSet::new();
        let mut text = ParamSet::new();
        for (i, (n, t)) in all.iter().enumerate() {
            if i < n_image {
                image.push(n, t.clone());
            } else {
                text.push(n, t.clone());
            }
        }
        enc.image = image;
        enc.text = text;
        Ok(enc)
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let want = [self.config.height, self.config.width, 3];
        if x.shape() != want {
            return Err(Error::contract(
                "encode_image",
                format!("image shape {:?} does not match encoder input {want:?}", x.shape()),
            ));
        }
        Ok(())
    }

    /// Conv trunk on the graph; returns the feature map `[H, W, C]`.
    fn trunk(&self, g: &mut Graph, x: Var, p: &[Var]) -> Result<Var> {
        let mut h = x;
        for layer in 0..3 {
            let c = g.conv2d(h, p[2 * layer], Some(p[2 * layer + 1]), 1)?;
            h = g.relu(c);
            if layer < self.config.pools {
                // Half-pixel bilinear downsampling by 2 is a 2×2 average pool.
                let s = g.shape(h).to_vec();
                h = g.bilinear_resize(h, s[0] / 2, s[1] / 2)?;
            }
        }
        Ok(h)
    }

    /// Global-average-pool + linear head from a feature map var to the
    /// embedding var.
    fn head_with(g: &mut Graph, feat: Var, w: Var, b: Var) -> Result<Var> {
        let s = g.shape(feat).to_vec();
        let flat = g.reshape(feat, &[s[0] * s[1], s[2]])?;
        let pooled = g.mean_axis(flat, 0)?;
        let z = g.matmul(pooled, w)?;
        g.add(z, b)
    }

    /// Embedding head applied to a feature map already on the graph. Head
    /// weights enter as constants.
    pub fn image_head(&self, g: &mut Graph, feat: Var) -> Result<Var> {
        let w = g.constant(self.image.get("image.head.w").expect("head weight").clone());
        let b = g.constant(self.image.get("image.head.b").expect("head bias").clone());
        Self::head_with(g, feat, w, b)
    }

    /// Feature map `F` (`[H, W, C']`) of an `[H, W, 3]` image in [0, 1].
    pub fn feature_map(&self, x: &Tensor) -> Result<Tensor> {
        self.check_image(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let p = self.image.bind(&mut g, false);
        let f = self.trunk(&mut g, xv, &p)?;
        Ok(g.value(f).clone())
    }

    /// Deterministic embedding `z_I` and feature map `F`.
    pub fn encode_image(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let f = self.feature_map(x)?;
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let z = self.image_head(&mut g, fv)?;
        Ok((g.value(z).data().to_vec(), f))
    }

    fn bag_of_tokens(tokens: &[u32]) -> Tensor {
        let mut bag = vec![0.0; VOCAB_SIZE];
        let n = tokens.len().max(1) as f64;
        for &t in tokens {
            bag[t as usize] += 1.0 / n;
        }
        Tensor::vector(bag)
    }

    fn text_graph(g: &mut Graph, tokens: &[u32], p: &[Var]) -> Result<Var> {
        let bag = g.constant(Self::bag_of_tokens(tokens));
        let e = g.matmul(bag, p[0])?;
        let h = g.matmul(e, p[1])?;
        let h = g.add(h, p[2])?;
        let h = g.relu(h);
        let z = g.matmul(h, p[3])?;
        g.add(z, p[4])
    }

    /// Deterministic text embedding `z_T`.
    pub fn encode_text(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        if prompt.category.trim().is_empty() {
            return Err(Error::contract("encode_text", "empty category"));
        }
        let mut g = Graph::new();
        let p = self.text.bind(&mut g, false);
        let z = Self::text_graph(&mut g, &prompt.token_ids, &p)?;
        Ok(g.value(z).data().to_vec())
    }

    /// Aligns both branches on an unbiased corpus: softmax over
    /// `z_I · z_T(c)` for every glyph prompt `c`, cross-entropy on the true
    /// glyph.
    fn pretrain(&mut self) -> Result<()> {
        let cfg = &self.config;
        let base = seed::derive_seed(0, &self.name, 1);
        let n_classes = GLYPH_NAMES.len();
        let spec = DatasetSpec {
            num_classes: n_classes,
            height: cfg.height,
            width: cfg.width,
            // With four textures, 1/4 makes the background independent of the glyph.
            correlation: 1.0 / n_classes as f64,
            test_correlation: 1.0 / n_classes as f64,
            class_priors: None,
            train_count: cfg.pretrain_samples,
            val_count: 1,
            test_count: 1,
            seed: base,
            mask_included: false,
        };
        let prompts: Vec<Prompt> = GLYPH_NAMES
            .iter()
            .map(|n| Prompt::for_category(n))
            .collect::<Result<_>>()?;
        let corpus: Vec<_> = (0..cfg.pretrain_samples)
            .map(|i| biasgen::generate_sample(&spec, biasgen::Split::Train, i, &prompts))
            .collect();

        let mut params = self.weights();
        let n_image = self.image.len();
        let mut opt = Adam::new(&params);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut rng = seed::stream(base, "pretrain-order", 0);
        for _epoch in 0..cfg.pretrain_epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.pretrain_batch) {
                let mut total: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.numel()]).collect();
                for &i in batch {
                    let s = &corpus[i];
                    let mut g = Graph::new();
                    let vars = params.bind(&mut g, true);
                    let (pi, pt) = vars.split_at(n_image);
                    let x = g.constant(s.image.clone());
                    let f = self.trunk(&mut g, x, pi)?;
                    let zi = Self::head_with(&mut g, f, pi[6], pi[7])?;
                    let mut logits = Vec::with_capacity(n_classes);
                    for p in &prompts {
                        let zt = Self::text_graph(&mut g, &p.token_ids, pt)?;
                        logits.push(g.dot(zi, zt)?);
                    }
                    let logits = g.concat(&logits)?;
                    let probs = g.softmax(logits)?;
                    let onehot = g.constant(one_hot(s.label, n_classes));
                    let py = g.dot(probs, onehot)?;
                    let lp = g.log(py);
                    let loss = g.scale(lp, -1.0 / batch.len() as f64);
                    g.backward(loss, &[])?;
                    accumulate(&mut total, &params.grads(&g, &vars));
                }
                opt.update(&mut params, &total, cfg.pretrain_lr);
            }
        }

        let mut image = ParamSet::new();
        let mut text = ParamSet::new();
        for (i, (n, t)) in params.iter().enumerate() {
            if i < n_image {
                image.push(n, t.clone());
            } else {
                text.push(n, t.clone());
            }
        }
        self.image = image;
        self.text = text;
        Ok(())
    }
}

pub(crate) fn one_hot(k: usize, n: usize) -> Tensor {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    Tensor::vector(v)
}
