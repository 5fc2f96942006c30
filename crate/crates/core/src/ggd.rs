//! Generalized Gaussian embedding distributions.
//!
//! Each embedding dimension `i` is independent with density
//!
//! ```text
//! p(z) = β / (2 α Γ(1/β)) · exp(−(|z − μ| / α)^β)
//! ```
//!
//! `β = 2` is a Gaussian with `σ = α/√2`, `β = 1` a Laplace with scale `α`.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use statrs::function::gamma::ln_gamma;

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Per-dimension location `mu`, scale `alpha` and shape `beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct GgdParams {
    mu: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl GgdParams {
    pub fn new(mu: Vec<f64>, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if mu.is_empty() || mu.len() != alpha.len() || mu.len() != beta.len() {
            return Err(Error::contract(
                "ggd_params",
                format!(
                    "dimension mismatch: mu {}, alpha {}, beta {}",
                    mu.len(),
                    alpha.len(),
                    beta.len()
                ),
            ));
        }
        if let Some(i) = alpha.iter().position(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::contract("ggd_params", format!("alpha[{i}] = {} is not positive", alpha[i])));
        }
        if let Some(i) = beta.iter().position(|&b| !(b > 0.0 && b.is_finite())) {
            return Err(Error::contract("ggd_params", format!("beta[{i}] = {} is not positive", beta[i])));
        }
        if let Some(i) = mu.iter().position(|m| !m.is_finite()) {
            return Err(Error::contract("ggd_params", format!("mu[{i}] is not finite")));
        }
        Ok(GgdParams { mu, alpha, beta })
    }

    /// Same `alpha` and `beta` in every dimension.
    pub fn isotropic(mu: Vec<f64>, alpha: f64, beta: f64) -> Result<Self> {
        let d = mu.len();
        Self::new(mu, vec![alpha; d], vec![beta; d])
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }
}

/// Log of the per-dimension normalising constant `β / (2 α Γ(1/β))`.
pub fn log_normalizer(alpha: f64, beta: f64) -> f64 {
    beta.ln() - std::f64::consts::LN_2 - alpha.ln() - ln_gamma(1.0 / beta)
}

/// Normalised log-density summed over independent dimensions.
pub fn ggd_logpdf(p: &GgdParams, z: &[f64]) -> Result<f64> {
    if z.len() != p.dim() {
        return Err(Error::contract(
            "ggd_logpdf",
            format!("point has dimension {}, params have {}", z.len(), p.dim()),
        ));
    }
    Ok(z.iter()
        .enumerate()
        .map(|(i, &zi)| {
            let (a, b) = (p.alpha[i], p.beta[i]);
            log_normalizer(a, b) - ((zi - p.mu[i]).abs() / a).powf(b)
        })
        .sum())
}

/// Negative log-likelihood value, `−ggd_logpdf`.
pub fn ggd_nll(p: &GgdParams, target: &[f64]) -> Result<f64> {
    ggd_logpdf(p, target).map(|v| -v)
}

/// Mean and per-dimension variance `α² Γ(3/β) / Γ(1/β)`.
pub fn ggd_moments(p: &GgdParams) -> (Vec<f64>, Vec<f64>) {
    let var = p
        .alpha
        .iter()
        .zip(&p.beta)
        .map(|(&a, &b)| a * a * (ln_gamma(3.0 / b) - ln_gamma(1.0 / b)).exp())
        .collect();
    (p.mu.clone(), var)
}

/// Raw noise behind one draw: `z = μ + α · sign · gamma^(1/β)`.
///
/// Keeping the noise separate lets callers rebuild the draw on a graph and
/// differentiate it with respect to `(μ, α, β)` with the noise held fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct GgdNoise {
    pub sign: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl GgdNoise {
    pub fn apply(&self, p: &GgdParams) -> Vec<f64> {
        (0..p.dim())
            .map(|i| p.mu[i] + p.alpha[i] * self.sign[i] * self.gamma[i].powf(1.0 / p.beta[i]))
            .collect()
    }
}

/// Draws the noise for one sample. Gamma shapes are `1/β` per dimension.
pub fn ggd_noise<R: Rng + ?Sized>(p: &GgdParams, rng: &mut R) -> GgdNoise {
    let mut sign = Vec::with_capacity(p.dim());
    let mut gamma = Vec::with_capacity(p.dim());
    for &b in &p.beta {
        sign.push(if rng.random::<bool>() { 1.0 } else { -1.0 });
        gamma.push(sample_gamma(1.0 / b, rng));
    }
    GgdNoise { sign, gamma }
}

pub fn ggd_sample<R: Rng + ?Sized>(p: &GgdParams, rng: &mut R) -> Vec<f64> {
    ggd_noise(p, rng).apply(p)
}

/// Rebuilds a draw on the graph: `μ + α ⊙ sign ⊙ gamma^(1/β)`.
pub fn reparameterized_sample(
    g: &mut Graph,
    mu: Var,
    alpha: Var,
    beta: Var,
    noise: &GgdNoise,
) -> Result<Var> {
    let gamma = g.constant(Tensor::vector(noise.gamma.clone()));
    let sign = g.constant(Tensor::vector(noise.sign.clone()));
    let inv_beta = g.pow_scalar(beta, -1.0);
    let radius = g.pow(gamma, inv_beta)?;
    let step = g.mul(alpha, radius)?;
    let step = g.mul(step, sign)?;
    g.add(mu, step)
}

/// Differentiable negative log-likelihood of `target` under the GGD with
/// parameters held on the graph.
pub fn ggd_nll_graph(g: &mut Graph, mu: Var, alpha: Var, beta: Var, target: Var) -> Result<Var> {
    let diff = g.sub(target, mu)?;
    let dist = g.abs(diff);
    let ratio = g.div(dist, alpha)?;
    let kernel = g.pow(ratio, beta)?;

    let log_beta = g.log(beta);
    let log_alpha = g.log(alpha);
    let inv_beta = g.pow_scalar(beta, -1.0);
    let lg = g.ln_gamma(inv_beta);
    // −log normaliser = log α + ln Γ(1/β) + ln 2 − log β
    let neg_norm = g.add(log_alpha, lg)?;
    let neg_norm = g.sub(neg_norm, log_beta)?;
    let neg_norm = g.add_scalar(neg_norm, std::f64::consts::LN_2);

    let per_dim = g.add(kernel, neg_norm)?;
    Ok(g.sum(per_dim))
}

/// Gamma(shape, 1) draw.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    Gamma::new(shape, 1.0).expect("positive finite shape").sample(rng)
}
