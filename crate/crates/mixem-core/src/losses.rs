//! E-step training objectives (forward and reverse KL), prior densities, and
//! the Monte-Carlo ELBO estimator used for validation and model selection.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::ParamVector;
use crate::flow::{std_normal_logpdf, ConditionalFlow};
use crate::forward_op::ForwardOperator;
use crate::noise_model::{loglik, loglik_grad_f, NoiseParams};
use crate::{Error, Result};

/// A prior over the parameters of interest: density, score, and sampling.
pub trait Prior {
    fn dim(&self) -> usize;
    fn log_pdf(&self, x: &[f64]) -> f64;
    fn grad_log_pdf(&self, x: &[f64]) -> Vec<f64>;
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64>;
}

/// Smoothed uniform box prior: logistic boundary factors with steepness
/// `lambda`, normalized once per dimension by quadrature. Finite and smooth
/// everywhere, which the reverse KL needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub lambda: f64,
    log_z: Vec<f64>,
}

impl PriorBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, lambda: f64) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::DimMismatch("prior box lo/hi lengths differ".into()));
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| l >= h) {
            return Err(Error::InvalidParam("prior box needs lo < hi componentwise".into()));
        }
        if !(lambda > 0.0) {
            return Err(Error::InvalidParam("prior box smoothness must be positive".into()));
        }
        let log_z = lo
            .iter()
            .zip(hi.iter())
            .map(|(&l, &h)| Self::log_normalizer(l, h, lambda))
            .collect();
        Ok(PriorBox { lo, hi, lambda, log_z })
    }

    /// log ∫ σ(λ(x−lo))·σ(λ(hi−x)) dx by Simpson quadrature; the integrand
    /// decays like e^{−λ·dist} outside the box.
    fn log_normalizer(lo: f64, hi: f64, lambda: f64) -> f64 {
        let pad = 40.0 / lambda;
        let (a, b) = (lo - pad, hi + pad);
        let n = 40_000; // even
        let h = (b - a) / n as f64;
        let f = |x: f64| (log_sigmoid(lambda * (x - lo)) + log_sigmoid(lambda * (hi - x))).exp();
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        (acc * h / 3.0).ln()
    }
}

#[inline]
fn log_sigmoid(t: f64) -> f64 {
    // -softplus(-t), stable on both tails.
    if t > 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl Prior for PriorBox {
    fn dim(&self) -> usize {
        self.lo.len()
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        x.iter()
            .enumerate()
            .map(|(j, &xj)| {
                log_sigmoid(self.lambda * (xj - self.lo[j]))
                    + log_sigmoid(self.lambda * (self.hi[j] - xj))
                    - self.log_z[j]
            })
            .sum()
    }

    fn grad_log_pdf(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, &xj)| {
                self.lambda * sigmoid(-self.lambda * (xj - self.lo[j]))
                    - self.lambda * sigmoid(-self.lambda * (self.hi[j] - xj))
            })
            .collect()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.lo
            .iter()
            .zip(self.hi.iter())
            .map(|(&l, &h)| rng.gen_range(l..h))
            .collect()
    }
}

/// Isotropic Gaussian prior, used by the conjugate linear-Gaussian toys.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl GaussianPrior {
    pub fn standard(dim: usize) -> Self {
        GaussianPrior { mean: vec![0.0; dim], std: 1.0 }
    }
}

impl Prior for GaussianPrior {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        let z: Vec<f64> = x.iter().zip(self.mean.iter()).map(|(xj, m)| (xj - m) / self.std).collect();
        std_normal_logpdf(&z) - self.dim() as f64 * self.std.ln()
    }

    fn grad_log_pdf(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter())
            .map(|(xj, m)| -(xj - m) / (self.std * self.std))
            .collect()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.mean
            .iter()
            .map(|m| m + self.std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// Forward KL objective: mean over joint-sample pairs of `−log q(x | y)`.
pub fn forward_kl_loss(flow: &ConditionalFlow, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<f64> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::DimMismatch("forward KL batch: xs/ys length mismatch or empty".into()));
    }
    let mut acc = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        acc -= flow.log_density(y, x)?;
    }
    Ok(acc / xs.len() as f64)
}

/// Forward KL loss and its exact gradient with respect to the flow params.
pub fn forward_kl_grad(
    flow: &ConditionalFlow,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
) -> Result<(f64, ParamVector)> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::DimMismatch("forward KL batch: xs/ys length mismatch or empty".into()));
    }
    let scale = 1.0 / xs.len() as f64;
    let mut grad = flow.params.zeros_like();
    let mut loss = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        let (z, logdet_inv, cache) = flow.pull_cached(y, x)?;
        loss -= (std_normal_logpdf(&z) + logdet_inv) * scale;
        // d(−log p_Z(z))/dz = z; d loss/d logdet_inv = −1 (scaled by 1/B).
        let gz: Vec<f64> = z.iter().map(|v| v * scale).collect();
        flow.pull_backward(&cache, &gz, -scale, &mut grad);
    }
    grad.check_finite()?;
    Ok((loss, grad))
}

/// Reverse KL objective with explicit latent draws `zs[i][k]` per observation
/// (common random numbers make the loss a deterministic function of the flow
/// parameters, which the finite-difference contract relies on).
pub fn reverse_kl_loss_with_latents(
    flow: &ConditionalFlow,
    ys: &[Vec<f64>],
    theta: NoiseParams,
    prior: &dyn Prior,
    op: &ForwardOperator,
    zs: &[Vec<Vec<f64>>],
) -> Result<f64> {
    let total: usize = zs.iter().map(|z| z.len()).sum();
    let mut acc = 0.0;
    for (y, z_draws) in ys.iter().zip(zs.iter()) {
        for z in z_draws {
            let (x, logdet) = flow.push(y, z)?;
            let f = op.eval(&x)?;
            acc -= loglik(y, &f, theta)? + prior.log_pdf(&x) + logdet;
        }
    }
    Ok(acc / total as f64)
}

/// Reverse KL loss and gradient; the gradient flows through the push map, the
/// forward operator, the likelihood, and the prior (reparameterization).
pub fn reverse_kl_grad_with_latents(
    flow: &ConditionalFlow,
    ys: &[Vec<f64>],
    theta: NoiseParams,
    prior: &dyn Prior,
    op: &ForwardOperator,
    zs: &[Vec<Vec<f64>>],
) -> Result<(f64, ParamVector)> {
    let total: usize = zs.iter().map(|z| z.len()).sum();
    let scale = 1.0 / total as f64;
    let mut grad = flow.params.zeros_like();
    let mut loss = 0.0;
    for (y, z_draws) in ys.iter().zip(zs.iter()) {
        for z in z_draws {
            let (x, logdet, cache) = flow.push_cached(y, z)?;
            let (f, op_cache) = op.eval_cached(&x)?;
            loss -= (loglik(y, &f, theta)? + prior.log_pdf(&x) + logdet) * scale;
            let g_f = loglik_grad_f(y, &f, theta);
            let mut gx = op.vjp(&op_cache, &g_f);
            for (gxj, gp) in gx.iter_mut().zip(prior.grad_log_pdf(&x)) {
                *gxj = -(*gxj + gp) * scale;
            }
            flow.push_backward(&cache, &gx, -scale, &mut grad);
        }
    }
    grad.check_finite()?;
    Ok((loss, grad))
}

/// Draw `m` latents per observation.
pub fn draw_latents<R: Rng + ?Sized>(
    dim: usize,
    n_obs: usize,
    m: usize,
    rng: &mut R,
) -> Vec<Vec<Vec<f64>>> {
    (0..n_obs)
        .map(|_| {
            (0..m)
                .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
                .collect()
        })
        .collect()
}

/// Reverse KL loss with `m` fresh latent draws per observation.
pub fn reverse_kl_loss<R: Rng + ?Sized>(
    flow: &ConditionalFlow,
    ys: &[Vec<f64>],
    theta: NoiseParams,
    prior: &dyn Prior,
    op: &ForwardOperator,
    m: usize,
    rng: &mut R,
) -> Result<f64> {
    let zs = draw_latents(flow.dim(), ys.len(), m, rng);
    reverse_kl_loss_with_latents(flow, ys, theta, prior, op, &zs)
}

/// Monte-Carlo ELBO estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub value: f64,
    pub m: usize,
    pub std_error: f64,
}

/// ELBO `E_q[log p(x, y | θ)] − E_q[log q(x)]` estimated with `m` posterior
/// draws; the standard error comes from the sample variance.
pub fn elbo<R: Rng + ?Sized>(
    flow: &ConditionalFlow,
    y: &[f64],
    theta: NoiseParams,
    prior: &dyn Prior,
    op: &ForwardOperator,
    m: usize,
    rng: &mut R,
) -> Result<ElboEstimate> {
    if m == 0 {
        return Err(Error::InvalidParam("elbo needs m >= 1 samples".into()));
    }
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..m {
        let z: Vec<f64> = (0..flow.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let (x, logdet) = flow.push(y, &z)?;
        // log q(x | y) via the latent that generated x (exact by the change
        // of variables; avoids a redundant pull).
        let log_q = std_normal_logpdf(&z) - logdet;
        let f = op.eval(&x)?;
        let term = loglik(y, &f, theta)? + prior.log_pdf(&x) - log_q;
        sum += term;
        sumsq += term * term;
    }
    let mean = sum / m as f64;
    let var = (sumsq / m as f64 - mean * mean).max(0.0);
    let std_error = if m > 1 { (var / (m - 1) as f64).sqrt() } else { f64::INFINITY };
    Ok(ElboEstimate { value: mean, m, std_error })
}
