//! Mixed additive/multiplicative Gaussian noise model: sampling, exact
//! likelihood, and the analytic inner EM that updates `(a, b)`.
//!
//! Observations follow `y = f + a·ξ₁ + b·(f ⊙ ξ₂)` with `f = F(x)` and
//! independent standard normal `ξ₁, ξ₂`, i.e. per coordinate
//! `y_j ~ N(f_j, a² + b²f_j²)`. Treating the additive part as a hidden
//! Gaussian variable yields closed-form E- and M-steps for `(a, b)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Variance floor before divisions; `f_j = 0` with `a = 0` is singular.
const VAR_FLOOR: f64 = 1e-30;

const LN_2PI: f64 = 1.837877066409345483560659472811; // ln(2π)

/// Noise standard deviations `(a, b)`: additive and multiplicative parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub a: f64,
    pub b: f64,
}

impl NoiseParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) || a < 0.0 || b < 0.0 {
            return Err(Error::InvalidParam(format!(
                "noise params must be finite and non-negative, got ({a}, {b})"
            )));
        }
        if a + b <= 0.0 {
            return Err(Error::InvalidParam(
                "degenerate zero-noise model (a = b = 0)".into(),
            ));
        }
        Ok(NoiseParams { a, b })
    }

    /// Per-coordinate variance `a² + b²f²`, floored away from zero.
    #[inline]
    pub fn variance(&self, f: f64) -> f64 {
        let v = self.a * self.a + self.b * self.b * f * f;
        if v < VAR_FLOOR {
            log::warn!("variance clamp fired (a={}, b={}, f={f})", self.a, self.b);
            VAR_FLOOR
        } else {
            v
        }
    }
}

/// Diagonal Gaussian posterior of the hidden additive-noise variable.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerPosterior {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Aligned posterior samples, repeated observations, and cached forward
/// evaluations that the inner EM consumes.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
    pub f_xs: Vec<Vec<f64>>,
}

impl PairBatch {
    pub fn new(xs: Vec<Vec<f64>>, ys: Vec<Vec<f64>>, f_xs: Vec<Vec<f64>>) -> Result<Self> {
        if xs.len() != ys.len() || xs.len() != f_xs.len() {
            return Err(Error::DimMismatch(format!(
                "pair batch lengths differ: xs {}, ys {}, f_xs {}",
                xs.len(),
                ys.len(),
                f_xs.len()
            )));
        }
        if xs.is_empty() {
            return Err(Error::InvalidParam("pair batch is empty".into()));
        }
        Ok(PairBatch { xs, ys, f_xs })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Output dimension n.
    pub fn out_dim(&self) -> usize {
        self.ys[0].len()
    }
}

/// Draw `f + a·ξ₁ + b·(f ⊙ ξ₂)`.
pub fn sample_noisy<R: Rng + ?Sized>(f_x: &[f64], theta: NoiseParams, rng: &mut R) -> Vec<f64> {
    f_x.iter()
        .map(|&f| {
            let xi1: f64 = rng.sample(StandardNormal);
            let xi2: f64 = rng.sample(StandardNormal);
            f + theta.a * xi1 + theta.b * f * xi2
        })
        .collect()
}

/// Exact log-likelihood `log N(y | f, diag(a² + b²f²))`.
pub fn loglik(y: &[f64], f_x: &[f64], theta: NoiseParams) -> Result<f64> {
    if y.len() != f_x.len() {
        return Err(Error::DimMismatch(format!(
            "loglik: y has length {}, f_x {}",
            y.len(),
            f_x.len()
        )));
    }
    let mut acc = 0.0;
    for (&yj, &fj) in y.iter().zip(f_x.iter()) {
        let v = theta.variance(fj);
        let r = yj - fj;
        acc += -0.5 * (LN_2PI + v.ln()) - r * r / (2.0 * v);
    }
    if !acc.is_finite() {
        return Err(Error::NonFinite("loglik".into()));
    }
    Ok(acc)
}

/// Gradient of [`loglik`] with respect to `f_x` (used by the reverse-KL loss,
/// where the gradient flows through the forward operator).
pub fn loglik_grad_f(y: &[f64], f_x: &[f64], theta: NoiseParams) -> Vec<f64> {
    let b2 = theta.b * theta.b;
    y.iter()
        .zip(f_x.iter())
        .map(|(&yj, &fj)| {
            let v = theta.variance(fj);
            let r = yj - fj;
            // d/df [-½ln v - r²/(2v)] with v = a² + b²f².
            -b2 * fj / v + r / v + r * r * b2 * fj / (v * v)
        })
        .collect()
}

/// Closed-form conditional of the hidden additive noise given `(x, y)`:
/// mean `a²(y−f)/(a²+b²f²)`, variance `a²b²f²/(a²+b²f²)` per coordinate.
pub fn inner_e_step(y: &[f64], f_x: &[f64], theta: NoiseParams) -> Result<InnerPosterior> {
    if y.len() != f_x.len() {
        return Err(Error::DimMismatch("inner_e_step: y/f_x lengths differ".into()));
    }
    let a2 = theta.a * theta.a;
    let b2 = theta.b * theta.b;
    let mut mean = Vec::with_capacity(y.len());
    let mut var = Vec::with_capacity(y.len());
    for (&yj, &fj) in y.iter().zip(f_x.iter()) {
        let v = theta.variance(fj);
        mean.push(a2 * (yj - fj) / v);
        var.push(a2 * b2 * fj * fj / v);
    }
    Ok(InnerPosterior { mean, var })
}

/// The batch statistics `(c₁, c₂)` of the inner M-step; both are ≤ 0.
pub fn compute_c(batch: &PairBatch, theta: NoiseParams) -> Result<(f64, f64)> {
    let k = batch.len() as f64;
    let a2 = theta.a * theta.a;
    let b2 = theta.b * theta.b;
    let b4 = b2 * b2;
    let mut c1 = 0.0;
    let mut c2 = 0.0;
    for (y, f) in batch.ys.iter().zip(batch.f_xs.iter()) {
        for (&yj, &fj) in y.iter().zip(f.iter()) {
            let f2 = fj * fj;
            let v = theta.variance(fj);
            let r = yj - fj;
            c1 -= r * r * b4 * f2 / (v * v) + a2 * b2 / v;
            c2 -= (a2 * r / v).powi(2) + a2 * b2 * f2 / v;
        }
    }
    c1 /= k;
    c2 /= k;
    if !(c1.is_finite() && c2.is_finite()) {
        return Err(Error::NonFinite("compute_c".into()));
    }
    Ok((c1, c2))
}

/// Closed-form maximizer of the inner M-step: `a'² = −c₂/n`, `b'² = −c₁/n`.
pub fn inner_m_update(c1: f64, c2: f64, n: usize) -> Result<NoiseParams> {
    if c1 > 0.0 || c2 > 0.0 {
        return Err(Error::InvalidParam(format!(
            "inner_m_update needs non-positive c values, got c1={c1}, c2={c2}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidParam("inner_m_update: n must be >= 1".into()));
    }
    let nf = n as f64;
    NoiseParams::new((-c2 / nf).sqrt(), (-c1 / nf).sqrt())
}

/// Iterate `compute_c` + `inner_m_update` for `steps` rounds. Returns the
/// final parameters and the trace including the starting point.
pub fn inner_em(
    batch: &PairBatch,
    theta0: NoiseParams,
    steps: usize,
) -> Result<(NoiseParams, Vec<NoiseParams>)> {
    if steps == 0 {
        return Err(Error::InvalidParam("inner_em: steps must be >= 1".into()));
    }
    let n = batch.out_dim();
    let mut theta = theta0;
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(theta);
    for _ in 0..steps {
        let (c1, c2) = compute_c(batch, theta)?;
        theta = inner_m_update(c1, c2, n)?;
        trace.push(theta);
    }
    Ok((theta, trace))
}

/// Discretized M-step objective `(1/K) Σ_i log p(ỹ_i | x_i, θ)`; the surface
/// the inner EM maximizes, used as the brute-force oracle in tests.
pub fn q_objective(batch: &PairBatch, theta: NoiseParams) -> Result<f64> {
    let mut acc = 0.0;
    for (y, f) in batch.ys.iter().zip(batch.f_xs.iter()) {
        acc += loglik(y, f, theta)?;
    }
    Ok(acc / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn theta(a: f64, b: f64) -> NoiseParams {
        NoiseParams::new(a, b).unwrap()
    }

    #[test]
    fn rejects_degenerate_params() {
        assert!(NoiseParams::new(0.0, 0.0).is_err());
        assert!(NoiseParams::new(-1.0, 0.5).is_err());
        assert!(NoiseParams::new(f64::NAN, 0.5).is_err());
        assert!(NoiseParams::new(0.0, 0.5).is_ok());
    }

    #[test]
    fn sample_noisy_additive_only_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = vec![0.7, -0.3, 1.1];
        let th = theta(0.2, 0.0);
        let n = 40_000;
        let mut sums = vec![0.0; 3];
        let mut sq = vec![0.0; 3];
        for _ in 0..n {
            let y = sample_noisy(&f, th, &mut rng);
            for j in 0..3 {
                let r = y[j] - f[j];
                sums[j] += r;
                sq[j] += r * r;
            }
        }
        for j in 0..3 {
            let var = sq[j] / n as f64 - (sums[j] / n as f64).powi(2);
            assert!((var - 0.04).abs() < 0.003, "var {var}");
        }
    }

    #[test]
    fn sample_noisy_zero_signal_is_pure_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = vec![0.0, 0.0];
        let th = theta(0.5, 3.0);
        let n = 40_000;
        let mut sq = 0.0;
        for _ in 0..n {
            let y = sample_noisy(&f, th, &mut rng);
            sq += y[0] * y[0];
        }
        let var = sq / n as f64;
        assert!((var - 0.25).abs() < 0.01, "var {var}");
    }

    /// Hand-computed moment check: f=(1,2), θ=(0.1,0.5), per-coordinate
    /// variance ≈ (0.01+0.25, 0.01+1.0) within 3σ of Monte-Carlo error.
    #[test]
    fn sample_noisy_mixed_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = vec![1.0, 2.0];
        let th = theta(0.1, 0.5);
        let n = 100_000;
        let mut sq = vec![0.0; 2];
        for _ in 0..n {
            let y = sample_noisy(&f, th, &mut rng);
            for j in 0..2 {
                sq[j] += (y[j] - f[j]).powi(2);
            }
        }
        let expect = [0.01 + 0.25, 0.01 + 1.0];
        for j in 0..2 {
            let var = sq[j] / n as f64;
            // Var of the variance estimator is 2v²/n for Gaussian data.
            let mc_sigma = (2.0 * expect[j] * expect[j] / n as f64).sqrt();
            assert!((var - expect[j]).abs() < 3.0 * mc_sigma, "var {var} vs {}", expect[j]);
        }
    }

    #[test]
    fn loglik_zero_residual() {
        let f = vec![0.5, 1.5];
        let th = theta(0.3, 0.2);
        let got = loglik(&f, &f, th).unwrap();
        let expect: f64 = f
            .iter()
            .map(|&fj| -0.5 * (2.0 * std::f64::consts::PI * th.variance(fj)).ln())
            .sum();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn loglik_hand_case() {
        // n=1, f=1, a=b=1, y=2: v=2, loglik = -½log(4π) - ¼.
        let got = loglik(&[2.0], &[1.0], theta(1.0, 1.0)).unwrap();
        let expect = -0.5 * (4.0 * std::f64::consts::PI).ln() - 0.25;
        assert!((got - expect).abs() < 1e-12);
    }

    /// 1-D quadrature oracle: the density integrates to 1 over y.
    #[test]
    fn loglik_density_normalizes() {
        let th = theta(0.3, 0.7);
        let f = [0.8];
        let sd = th.variance(0.8).sqrt();
        let (lo, hi) = (0.8 - 10.0 * sd, 0.8 + 10.0 * sd);
        let steps = 200_000;
        let h = (hi - lo) / steps as f64;
        let mut integral = 0.0;
        for i in 0..=steps {
            let y = lo + i as f64 * h;
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            integral += w * loglik(&[y], &f, th).unwrap().exp();
        }
        integral *= h;
        assert!((integral - 1.0).abs() < 1e-8, "integral {integral}");
    }

    #[test]
    fn loglik_b_zero_is_isotropic_gaussian() {
        let th = theta(0.4, 0.0);
        let y = [1.0, -0.5, 0.2];
        let f = [0.8, -0.3, 0.0];
        let got = loglik(&y, &f, th).unwrap();
        let expect: f64 = y
            .iter()
            .zip(f.iter())
            .map(|(&yj, &fj)| {
                let v: f64 = 0.16;
                -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (yj - fj).powi(2) / (2.0 * v)
            })
            .sum();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn inner_e_step_b_zero_limit() {
        let th = theta(0.5, 0.0);
        let y = [1.0, 2.0];
        let f = [0.6, 1.0];
        let post = inner_e_step(&y, &f, th).unwrap();
        assert!((post.mean[0] - 0.4).abs() < 1e-12);
        assert!((post.mean[1] - 1.0).abs() < 1e-12);
        assert!(post.var.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inner_e_step_hand_case() {
        // f=1, a=b=1, y=2 -> mean 0.5, var 0.5.
        let post = inner_e_step(&[2.0], &[1.0], theta(1.0, 1.0)).unwrap();
        assert!((post.mean[0] - 0.5).abs() < 1e-12);
        assert!((post.var[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn inner_e_step_zero_residual_has_zero_mean() {
        let f = [0.7, -0.2];
        let post = inner_e_step(&f, &f, theta(0.2, 0.6)).unwrap();
        assert!(post.mean.iter().all(|&m| m == 0.0));
    }

    /// Numerical Bayes oracle in 1-D: p(v | x, y) ∝ N(y | f+v, b²f²)·N(v | 0, a²).
    /// Trapezoid over v, compare closed-form mean/var to 1e-6.
    #[test]
    fn inner_e_step_matches_numerical_bayes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let a = rng.gen_range(0.1..1.0);
            let b = rng.gen_range(0.1..1.0);
            let f = rng.gen_range(0.2..2.0);
            let y = f + rng.gen_range(-1.0..1.0);
            let th = theta(a, b);
            let post = inner_e_step(&[y], &[f], th).unwrap();

            let steps = 100_000;
            let (lo, hi) = (-10.0 * a, 10.0 * a);
            let h = (hi - lo) / steps as f64;
            let (mut z0, mut z1, mut z2) = (0.0, 0.0, 0.0);
            for i in 0..=steps {
                let v = lo + i as f64 * h;
                let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
                let log_p = -(y - f - v).powi(2) / (2.0 * b * b * f * f) - v * v / (2.0 * a * a);
                let p = w * log_p.exp();
                z0 += p;
                z1 += p * v;
                z2 += p * v * v;
            }
            let mean = z1 / z0;
            let var = z2 / z0 - mean * mean;
            assert!((mean - post.mean[0]).abs() < 1e-6, "mean {mean} vs {}", post.mean[0]);
            assert!((var - post.var[0]).abs() < 1e-6, "var {var} vs {}", post.var[0]);
        }
    }

    fn single_pair_batch(x: f64, y: f64, f: f64) -> PairBatch {
        PairBatch::new(vec![vec![x]], vec![vec![y]], vec![vec![f]]).unwrap()
    }

    #[test]
    fn compute_c_hand_case() {
        // K=1, n=1, f=1, a=b=1, y=2: both c values are -(¼+½) = -0.75.
        let batch = single_pair_batch(0.0, 2.0, 1.0);
        let (c1, c2) = compute_c(&batch, theta(1.0, 1.0)).unwrap();
        assert!((c1 + 0.75).abs() < 1e-12, "c1 {c1}");
        assert!((c2 + 0.75).abs() < 1e-12, "c2 {c2}");
    }

    /// The simplified c₁ against the un-simplified four-term expression it
    /// was collapsed from (independent arithmetic route).
    #[test]
    fn compute_c1_matches_unsimplified_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let a = rng.gen_range(0.05..1.5);
            let b = rng.gen_range(0.05..1.5);
            let f = rng.gen_range(0.2..2.0);
            let y = f + rng.gen_range(-1.0..1.0);
            let th = theta(a, b);
            let batch = single_pair_batch(0.0, y, f);
            let (c1, _) = compute_c(&batch, th).unwrap();

            let (a2, b2, f2) = (a * a, b * b, f * f);
            let v = a2 + b2 * f2;
            let r = y - f;
            let ev = a2 * r / v; // E[v_j]
            let ev2 = ev * ev + a2 * b2 * f2 / v; // E[v_j²]
            let c1_raw = -(r * r - 2.0 * ev * r + ev2) / f2;
            assert!((c1 - c1_raw).abs() < 1e-10, "{c1} vs {c1_raw}");
        }
    }

    #[test]
    fn compute_c_degenerate_limits() {
        let batch = single_pair_batch(0.0, 2.0, 1.0);
        let (_, c2) = compute_c(&batch, theta(0.0, 1.0)).unwrap();
        assert_eq!(c2, 0.0);
        let (c1, _) = compute_c(&batch, theta(1.0, 0.0)).unwrap();
        assert_eq!(c1, 0.0);
    }

    #[test]
    fn compute_c_always_nonpositive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let th = theta(rng.gen_range(0.0..2.0), rng.gen_range(0.001..2.0));
            let k = rng.gen_range(1..6);
            let n = rng.gen_range(1..5);
            let f_xs: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let ys: Vec<Vec<f64>> = f_xs
                .iter()
                .map(|f| f.iter().map(|&v| v + rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let xs = vec![vec![0.0]; k];
            let batch = PairBatch::new(xs, ys, f_xs).unwrap();
            let (c1, c2) = compute_c(&batch, th).unwrap();
            assert!(c1 <= 0.0 && c2 <= 0.0, "c1={c1} c2={c2}");
        }
    }

    #[test]
    fn inner_m_update_hand_case() {
        let th = inner_m_update(-0.75, -0.75, 1).unwrap();
        assert!((th.a - 0.75_f64.sqrt()).abs() < 1e-12);
        assert!((th.b - 0.75_f64.sqrt()).abs() < 1e-12);
        assert!((inner_m_update(-1.0, -4.0, 4).unwrap().b - 0.5).abs() < 1e-12);
        assert_eq!(inner_m_update(-1.0, 0.0, 1).unwrap().a, 0.0);
        assert!(inner_m_update(0.5, -1.0, 1).is_err());
    }

    #[test]
    fn inner_em_fixed_point_has_constant_trace() {
        let batch = single_pair_batch(0.0, 2.0, 1.0);
        // Find the fixed point by iterating long enough, then restart there.
        let (fixed, _) = inner_em(&batch, theta(1.0, 1.0), 200).unwrap();
        let (_, trace) = inner_em(&batch, fixed, 5).unwrap();
        for th in &trace {
            assert!((th.a - fixed.a).abs() < 1e-9 && (th.b - fixed.b).abs() < 1e-9);
        }
    }

    #[test]
    fn inner_em_monotone_in_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let k = rng.gen_range(2..8);
            let n = rng.gen_range(1..6);
            let f_xs: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..n).map(|_| rng.gen_range(0.1..2.0)).collect())
                .collect();
            let ys: Vec<Vec<f64>> = f_xs
                .iter()
                .map(|f| f.iter().map(|&v| v + rng.gen_range(-0.5..0.5)).collect())
                .collect();
            let batch = PairBatch::new(vec![vec![0.0]; k], ys, f_xs).unwrap();
            let th0 = theta(rng.gen_range(0.05..1.0), rng.gen_range(0.05..1.0));
            let (_, trace) = inner_em(&batch, th0, 15).unwrap();
            let qs: Vec<f64> = trace.iter().map(|&t| q_objective(&batch, t).unwrap()).collect();
            for w in qs.windows(2) {
                assert!(w[1] >= w[0] - 1e-10, "q decreased: {} -> {}", w[0], w[1]);
            }
        }
    }

    /// Monte-Carlo consistency: exact hidden-noise draws at the true (a,b)
    /// should be recovered within 10% relative error.
    #[test]
    fn inner_em_recovers_truth_from_exact_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let truth = theta(0.1, 0.3);
        let (k, n) = (5000, 20);
        let mut f_xs = Vec::with_capacity(k);
        let mut ys = Vec::with_capacity(k);
        for _ in 0..k {
            let f: Vec<f64> = (0..n).map(|_| rng.gen_range(0.3..1.5)).collect();
            let y = sample_noisy(&f, truth, &mut rng);
            f_xs.push(f);
            ys.push(y);
        }
        let batch = PairBatch::new(vec![vec![0.0]; k], ys, f_xs).unwrap();
        let (est, _) = inner_em(&batch, theta(1.0, 1.0), 100).unwrap();
        assert!((est.a - truth.a).abs() / truth.a < 0.1, "a {} vs {}", est.a, truth.a);
        assert!((est.b - truth.b).abs() / truth.b < 0.1, "b {} vs {}", est.b, truth.b);
    }

    #[test]
    fn q_objective_mean_semantics() {
        let th = theta(0.5, 0.5);
        let batch = single_pair_batch(0.0, 1.2, 0.9);
        let q1 = q_objective(&batch, th).unwrap();
        // Duplicating the single pair leaves the mean unchanged.
        let doubled = PairBatch::new(
            vec![vec![0.0]; 2],
            vec![vec![1.2]; 2],
            vec![vec![0.9]; 2],
        )
        .unwrap();
        let q2 = q_objective(&doubled, th).unwrap();
        assert!((q1 - q2).abs() < 1e-12);
    }

    #[test]
    fn q_objective_permutation_invariant() {
        let th = theta(0.4, 0.3);
        let b1 = PairBatch::new(
            vec![vec![0.0], vec![1.0]],
            vec![vec![1.0], vec![0.5]],
            vec![vec![0.8], vec![0.4]],
        )
        .unwrap();
        let b2 = PairBatch::new(
            vec![vec![1.0], vec![0.0]],
            vec![vec![0.5], vec![1.0]],
            vec![vec![0.4], vec![0.8]],
        )
        .unwrap();
        assert!((q_objective(&b1, th).unwrap() - q_objective(&b2, th).unwrap()).abs() < 1e-12);
    }

    /// Scale equivariance: y→λy, f→λf, a→λa, b fixed shifts loglik by
    /// −n·log λ and scales the inner posterior mean by λ, var by λ².
    #[test]
    fn scale_equivariance() {
        let lam = 2.5;
        let th = theta(0.3, 0.4);
        let th_s = theta(0.3 * lam, 0.4);
        let y = [1.0, 0.5];
        let f = [0.8, 0.6];
        let ys: Vec<f64> = y.iter().map(|v| v * lam).collect();
        let fs: Vec<f64> = f.iter().map(|v| v * lam).collect();
        let l0 = loglik(&y, &f, th).unwrap();
        let l1 = loglik(&ys, &fs, th_s).unwrap();
        assert!((l1 - (l0 - 2.0 * lam.ln())).abs() < 1e-10);
        let p0 = inner_e_step(&y, &f, th).unwrap();
        let p1 = inner_e_step(&ys, &fs, th_s).unwrap();
        for j in 0..2 {
            assert!((p1.mean[j] - lam * p0.mean[j]).abs() < 1e-10);
            assert!((p1.var[j] - lam * lam * p0.var[j]).abs() < 1e-10);
        }
    }
}
