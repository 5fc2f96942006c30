//! Grad-CAM saliency per sampled embedding pair, and aggregation of the K
//! maps into a reference attention map with a per-pixel uncertainty map.
//!
//! Every map is min-max normalised to [0, 1] before aggregation. A map whose
//! range is below 1e-12 normalises to all zeros.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::encoders::{FrozenEncoder, Prompt, ProbAdapter};
use crate::error::{Error, Result};
use crate::ggd::{self, GgdParams};
use crate::mapio;
use crate::seed::{self, RandomStream};

const FLAT_RANGE: f64 = 1e-12;

/// One normalised Grad-CAM map `[H', W']`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub values: Tensor,
    pub sample_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Median,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Median => "median",
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "median" => Ok(Aggregation::Median),
            _ => Err(Error::config("method", format!("unknown aggregation `{s}` (expected mean or median)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceAttention {
    pub values: Tensor,
    /// Per-pixel population standard deviation of the K normalised maps.
    pub uncertainty: Tensor,
    pub method: Aggregation,
    pub k_samples: usize,
}

/// `z_I · z_T` on the graph.
pub fn similarity(g: &mut Graph, z_image: Var, z_text: Var) -> Result<Var> {
    g.dot(z_image, z_text)
}

/// Min-max normalisation to [0, 1]; flat maps become zeros.
pub fn normalize_minmax(t: &Tensor) -> Tensor {
    let (lo, hi) = (t.min_value(), t.max_value());
    if hi - lo < FLAT_RANGE {
        return Tensor::zeros(t.shape());
    }
    t.map(|v| (v - lo) / (hi - lo))
}

/// Channel weights `w_c` (spatial mean of `∂s/∂F`) and the unnormalised map
/// `relu(Σ_c w_c F_c)`. Requires `backward` to have retained `feature`.
pub fn gradcam_raw(g: &Graph, feature: Var) -> Result<(Vec<f64>, Tensor)> {
    let grad = g
        .grad(feature)
        .ok_or_else(|| Error::contract("gradcam", "feature map gradient not retained"))?;
    let f = g.value(feature);
    let (h, w, c) = match *f.shape() {
        [h, w, c] => (h, w, c),
        ref s => return Err(Error::contract("gradcam", format!("feature map must be [H, W, C], got {s:?}"))),
    };
    let hw = (h * w) as f64;
    let mut weights = vec![0.0; c];
    for (i, &d) in grad.data().iter().enumerate() {
        weights[i % c] += d;
    }
    for v in &mut weights {
        *v /= hw;
    }
    let map = f
        .data()
        .chunks_exact(c)
        .map(|px| px.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>().max(0.0))
        .collect();
    Ok((weights, Tensor::new(vec![h, w], map)?))
}

/// Normalised Grad-CAM map for the score whose backward pass retained `feature`.
pub fn gradcam(g: &Graph, feature: Var, sample_index: usize) -> Result<SaliencyMap> {
    let (_, raw) = gradcam_raw(g, feature)?;
    Ok(SaliencyMap {
        values: normalize_minmax(&raw),
        sample_index,
    })
}

/// Per-pixel mean or median of K maps, plus the population standard
/// deviation. Even K takes the average of the two middle order statistics.
pub fn aggregate(maps: &[SaliencyMap], method: Aggregation) -> Result<ReferenceAttention> {
    let first = maps.first().ok_or_else(|| Error::contract("aggregate", "no saliency maps"))?;
    let shape = first.values.shape().to_vec();
    if let Some(m) = maps.iter().find(|m| m.values.shape() != shape.as_slice()) {
        return Err(Error::contract(
            "aggregate",
            format!("map shape {:?} differs from {:?}", m.values.shape(), shape),
        ));
    }
    let k = maps.len();
    let n = first.values.numel();
    let mut values = Vec::with_capacity(n);
    let mut spread = Vec::with_capacity(n);
    let mut column = vec![0.0; k];
    for i in 0..n {
        for (slot, m) in column.iter_mut().zip(maps) {
            *slot = m.values.data()[i];
        }
        let mean = column.iter().sum::<f64>() / k as f64;
        let var = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
        let centre = match method {
            Aggregation::Mean => mean,
            Aggregation::Median => {
                column.sort_by(f64::total_cmp);
                if k % 2 == 1 {
                    column[k / 2]
                } else {
                    0.5 * (column[k / 2 - 1] + column[k / 2])
                }
            }
        };
        values.push(centre.clamp(0.0, 1.0));
        spread.push(var.sqrt());
    }
    Ok(ReferenceAttention {
        values: Tensor::new(shape.clone(), values)?,
        uncertainty: Tensor::new(shape, spread)?,
        method,
        k_samples: k,
    })
}

/// Bilinear resize of an `[H, W]` map (half-pixel centres, clamped edges).
pub fn resize_map(map: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    if map.shape() == [height, width] {
        return Ok(map.clone());
    }
    let mut g = Graph::new();
    let v = g.constant(map.clone());
    let r = g.bilinear_resize(v, height, width)?;
    Ok(g.value(r).clone())
}

/// Frozen encoder plus the two probabilistic adapters.
#[derive(Clone, Debug)]
pub struct Guidance<'a> {
    pub encoder: &'a FrozenEncoder,
    pub image_adapter: &'a ProbAdapter,
    pub text_adapter: &'a ProbAdapter,
}

impl Guidance<'_> {
    /// K normalised Grad-CAM maps for the true-class prompt. Each sample `k`
    /// draws fresh dropout masks and GGD noise for both modalities from its
    /// own stream derived from one draw of `rng`, so the maps do not depend
    /// on evaluation order.
    pub fn sample_maps(
        &self,
        x: &Tensor,
        prompt: &Prompt,
        k_samples: usize,
        rng: &mut RandomStream,
    ) -> Result<Vec<SaliencyMap>> {
        if k_samples == 0 {
            return Err(Error::contract("reference_pipeline", "K must be at least 1"));
        }
        let feature = self.encoder.feature_map(x)?;
        let z_text = self.encoder.encode_text(prompt)?;
        let base: u64 = rng.random();
        (0..k_samples)
            .map(|k| {
                let mut rk = seed::stream(base, "saliency-sample", k as u64);
                let mut g = Graph::new();
                let f = g.leaf(feature.clone(), true);
                let zi = self.encoder.image_head(&mut g, f)?;
                let oi = self.image_adapter.forward(&mut g, zi, true, &mut rk)?;
                let pi = params_of(&g, oi.mu, oi.alpha, oi.beta)?;
                let noise_i = ggd::ggd_noise(&pi, &mut rk);
                let si = ggd::reparameterized_sample(&mut g, oi.mu, oi.alpha, oi.beta, &noise_i)?;
                let pt = self.text_adapter.adapt(&z_text, true, &mut rk)?;
                let st = g.constant(Tensor::vector(ggd::ggd_sample(&pt, &mut rk)));
                let s = similarity(&mut g, si, st)?;
                g.backward(s, &[f])?;
                gradcam(&g, f, k)
            })
            .collect()
    }

    /// Sampled maps aggregated into the reference attention.
    pub fn reference(
        &self,
        x: &Tensor,
        prompt: &Prompt,
        k_samples: usize,
        method: Aggregation,
        rng: &mut RandomStream,
    ) -> Result<ReferenceAttention> {
        aggregate(&self.sample_maps(x, prompt, k_samples, rng)?, method)
    }
}

fn params_of(g: &Graph, mu: Var, alpha: Var, beta: Var) -> Result<GgdParams> {
    GgdParams::new(
        g.value(mu).data().to_vec(),
        g.value(alpha).data().to_vec(),
        g.value(beta).data().to_vec(),
    )
}

/// Reference attention for `x` from the prompt of `true_class`.
pub fn reference_pipeline(
    guidance: &Guidance<'_>,
    x: &Tensor,
    prompts: &[Prompt],
    true_class: usize,
    k_samples: usize,
    method: Aggregation,
    rng: &mut RandomStream,
) -> Result<ReferenceAttention> {
    let prompt = prompts.get(true_class).ok_or_else(|| {
        Error::contract(
            "reference_pipeline",
            format!("class {true_class} has no prompt ({} prompts)", prompts.len()),
        )
    })?;
    guidance.reference(x, prompt, k_samples, method, rng)
}

/// Deterministic map from the frozen encoder alone: Grad-CAM of
/// `Ψ_I(x) · Ψ_T(prompt)` with no adapters and no sampling.
pub fn deterministic_map(encoder: &FrozenEncoder, x: &Tensor, prompt: &Prompt) -> Result<SaliencyMap> {
    let feature = encoder.feature_map(x)?;
    let z_text = encoder.encode_text(prompt)?;
    let mut g = Graph::new();
    let f = g.leaf(feature, true);
    let zi = encoder.image_head(&mut g, f)?;
    let zt = g.constant(Tensor::vector(z_text));
    let s = similarity(&mut g, zi, zt)?;
    g.backward(s, &[f])?;
    gradcam(&g, f, 0)
}

/// Deterministic map wrapped as a K=1 reference attention.
pub fn deterministic_reference(encoder: &FrozenEncoder, x: &Tensor, prompt: &Prompt) -> Result<ReferenceAttention> {
    aggregate(&[deterministic_map(encoder, x, prompt)?], Aggregation::Mean)
}

/// Writes the reference map and its uncertainty as `<stem>_ref.*` and
/// `<stem>_unc.*`. The uncertainty is rescaled to [0, 1] for the 8-bit
/// formats; the raw dump keeps the original values.
pub fn export_reference(stem: &Path, r: &ReferenceAttention) -> Result<()> {
    let name = stem.file_name().and_then(|s| s.to_str()).unwrap_or("map");
    let dir = stem.parent().unwrap_or(Path::new("."));
    mapio::export_map(&dir.join(format!("{name}_ref")), &r.values)?;
    let unc = dir.join(format!("{name}_unc"));
    let peak = r.uncertainty.max_value();
    let scaled = if peak > 0.0 { r.uncertainty.map(|v| v / peak) } else { r.uncertainty.clone() };
    mapio::write_pgm(&unc.with_extension("pgm"), &scaled)?;
    mapio::write_png(&unc.with_extension("png"), &scaled)?;
    mapio::write_pmap(&unc.with_extension("pmap"), &r.uncertainty)
}
