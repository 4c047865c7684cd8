//! Forward operators `F: R^d -> R^n`: analytic test operators, random
//! dense-net surrogates with probe-based output recalibration, and synthetic
//! measurement generation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{Activation, DenseNet, NetCache};
use crate::noise_model::{sample_noisy, NoiseParams};
use crate::{Error, Result};

/// A forward operator. Immutable after construction; evaluation is pure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ForwardOperator {
    /// `F(x) = A x`, row-major `n x d` matrix.
    Linear { d: usize, n: usize, matrix: Vec<f64> },
    /// Smooth toy: `F(x) = A x + c + amp · sin(freq · (A x + c))`.
    AffineSine {
        d: usize,
        n: usize,
        matrix: Vec<f64>,
        bias: Vec<f64>,
        amp: f64,
        freq: f64,
    },
    /// Componentwise square `F(x) = x ⊙ x` (n = d); a minimal operator with a
    /// multimodal posterior.
    Square { d: usize },
    /// Dense-net surrogate with per-coordinate affine output recalibration.
    Surrogate {
        net: DenseNet,
        params: Vec<f64>,
        out_scale: Vec<f64>,
        out_shift: Vec<f64>,
        checksum: String,
    },
}

impl ForwardOperator {
    pub fn linear(n: usize, d: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != n * d {
            return Err(Error::DimMismatch(format!(
                "linear operator matrix has {} entries, expected {}",
                matrix.len(),
                n * d
            )));
        }
        Ok(ForwardOperator::Linear { d, n, matrix })
    }

    pub fn identity(d: usize) -> Self {
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            m[i * d + i] = 1.0;
        }
        ForwardOperator::Linear { d, n: d, matrix: m }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ForwardOperator::Linear { d, .. } => *d,
            ForwardOperator::AffineSine { d, .. } => *d,
            ForwardOperator::Square { d } => *d,
            ForwardOperator::Surrogate { net, .. } => net.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            ForwardOperator::Linear { n, .. } => *n,
            ForwardOperator::AffineSine { n, .. } => *n,
            ForwardOperator::Square { d } => *d,
            ForwardOperator::Surrogate { net, .. } => net.output_dim(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimMismatch(format!(
                "operator input has length {}, expected {}",
                x.len(),
                self.input_dim()
            )));
        }
        match self {
            ForwardOperator::Linear { d, n, matrix } => Ok(matvec(matrix, x, *n, *d)),
            ForwardOperator::AffineSine { d, n, matrix, bias, amp, freq } => {
                let mut u = matvec(matrix, x, *n, *d);
                for (uj, bj) in u.iter_mut().zip(bias.iter()) {
                    *uj += bj;
                    *uj += amp * (freq * *uj).sin();
                }
                Ok(u)
            }
            ForwardOperator::Square { .. } => Ok(x.iter().map(|v| v * v).collect()),
            ForwardOperator::Surrogate { net, params, out_scale, out_shift, .. } => {
                let raw = net.eval(params, x)?;
                Ok(raw
                    .iter()
                    .zip(out_scale.iter().zip(out_shift.iter()))
                    .map(|(r, (s, t))| r * s + t)
                    .collect())
            }
        }
    }

    /// Forward pass keeping what the vector-Jacobian product needs.
    pub fn eval_cached(&self, x: &[f64]) -> Result<(Vec<f64>, OpCache)> {
        match self {
            ForwardOperator::Surrogate { net, params, out_scale, out_shift, .. } => {
                let (raw, cache) = net.eval_cached(params, x)?;
                let out = raw
                    .iter()
                    .zip(out_scale.iter().zip(out_shift.iter()))
                    .map(|(r, (s, t))| r * s + t)
                    .collect();
                Ok((out, OpCache::Net(Box::new(cache))))
            }
            ForwardOperator::AffineSine { d, n, matrix, bias, amp, freq } => {
                let mut pre = matvec(matrix, x, *n, *d);
                for (uj, bj) in pre.iter_mut().zip(bias.iter()) {
                    *uj += bj;
                }
                let out = pre.iter().map(|&u| u + amp * (freq * u).sin()).collect();
                Ok((out, OpCache::Pre(pre)))
            }
            _ => Ok((self.eval(x)?, OpCache::Input(x.to_vec()))),
        }
    }

    /// Vector-Jacobian product: `g ↦ (∂F/∂x)ᵀ g` at the cached point.
    pub fn vjp(&self, cache: &OpCache, grad_out: &[f64]) -> Vec<f64> {
        match (self, cache) {
            (ForwardOperator::Linear { d, n, matrix }, _) => {
                let mut gx = vec![0.0; *d];
                for j in 0..*n {
                    let row = &matrix[j * d..(j + 1) * d];
                    for (gi, wi) in gx.iter_mut().zip(row.iter()) {
                        *gi += grad_out[j] * wi;
                    }
                }
                gx
            }
            (
                ForwardOperator::AffineSine { d, n, matrix, amp, freq, .. },
                OpCache::Pre(pre),
            ) => {
                // dF_j/du_j = 1 + amp·freq·cos(freq·u_j), then back through A.
                let gu: Vec<f64> = grad_out
                    .iter()
                    .zip(pre.iter())
                    .map(|(g, &u)| g * (1.0 + amp * freq * (freq * u).cos()))
                    .collect();
                let mut gx = vec![0.0; *d];
                for j in 0..*n {
                    let row = &matrix[j * d..(j + 1) * d];
                    for (gi, wi) in gx.iter_mut().zip(row.iter()) {
                        *gi += gu[j] * wi;
                    }
                }
                gx
            }
            (ForwardOperator::Square { .. }, OpCache::Input(x)) => grad_out
                .iter()
                .zip(x.iter())
                .map(|(g, xi)| 2.0 * xi * g)
                .collect(),
            (
                ForwardOperator::Surrogate { net, params, out_scale, .. },
                OpCache::Net(net_cache),
            ) => {
                let g_raw: Vec<f64> = grad_out
                    .iter()
                    .zip(out_scale.iter())
                    .map(|(g, s)| g * s)
                    .collect();
                let mut scratch = vec![0.0; net.param_len()];
                net.backward(params, net_cache, &g_raw, &mut scratch)
            }
            _ => unreachable!("cache kind does not match operator kind"),
        }
    }
}

/// Cached forward-pass state for [`ForwardOperator::vjp`].
#[derive(Debug, Clone)]
pub enum OpCache {
    Input(Vec<f64>),
    Pre(Vec<f64>),
    Net(Box<NetCache>),
}

fn matvec(matrix: &[f64], x: &[f64], n: usize, d: usize) -> Vec<f64> {
    (0..n)
        .map(|j| {
            matrix[j * d..(j + 1) * d]
                .iter()
                .zip(x.iter())
                .map(|(m, xi)| m * xi)
                .sum()
        })
        .collect()
}

fn checksum_of(params: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in params {
        hasher.update(v.to_le_bytes());
    }
    format!("{:x}", hasher.finalize())
}

/// Random smooth tanh surrogate whose outputs are recalibrated per coordinate
/// to roughly [0, 1] over the prior box, estimated from 10⁴ probe points.
pub fn make_random_surrogate(
    d: usize,
    n: usize,
    widths: &[usize],
    prior_box: (&[f64], &[f64]),
    seed: u64,
) -> Result<ForwardOperator> {
    if widths.is_empty() {
        return Err(Error::InvalidParam("surrogate needs at least one hidden width".into()));
    }
    let (lo, hi) = prior_box;
    if lo.len() != d || hi.len() != d {
        return Err(Error::DimMismatch("prior box dims do not match d".into()));
    }
    let mut all_widths = Vec::with_capacity(widths.len() + 2);
    all_widths.push(d);
    all_widths.extend_from_slice(widths);
    all_widths.push(n);
    let net = DenseNet::new(all_widths.clone(), Activation::Tanh);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0; net.param_len()];
    let mut offset = 0;
    for w in all_widths.windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        let scale = (2.0 / (n_in + n_out) as f64).sqrt() * 1.5;
        for p in params[offset..offset + n_in * n_out].iter_mut() {
            *p = rng.gen_range(-scale..scale);
        }
        for p in params[offset + n_in * n_out..offset + n_in * n_out + n_out].iter_mut() {
            *p = rng.gen_range(-0.3..0.3);
        }
        offset += n_in * n_out + n_out;
    }

    // Probe the prior box and map each output coordinate to [0, 1].
    let probes = 10_000;
    let mut mins = vec![f64::INFINITY; n];
    let mut maxs = vec![f64::NEG_INFINITY; n];
    for _ in 0..probes {
        let x: Vec<f64> = (0..d).map(|j| rng.gen_range(lo[j]..hi[j])).collect();
        let out = net.eval(&params, &x)?;
        for j in 0..n {
            mins[j] = mins[j].min(out[j]);
            maxs[j] = maxs[j].max(out[j]);
        }
    }
    let mut out_scale = vec![0.0; n];
    let mut out_shift = vec![0.0; n];
    for j in 0..n {
        let span = (maxs[j] - mins[j]).max(1e-6);
        out_scale[j] = 1.0 / span;
        out_shift[j] = -mins[j] / span;
    }
    let checksum = checksum_of(&params);
    Ok(ForwardOperator::Surrogate { net, params, out_scale, out_shift, checksum })
}

pub fn save_surrogate(op: &ForwardOperator, path: &Path) -> Result<()> {
    if !matches!(op, ForwardOperator::Surrogate { .. }) {
        return Err(Error::InvalidParam("only surrogate operators are saved to file".into()));
    }
    let text = serde_json::to_string_pretty(op)
        .map_err(|e| Error::Parse(format!("serialize surrogate: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_surrogate(path: &Path) -> Result<ForwardOperator> {
    let text = std::fs::read_to_string(path)?;
    let op: ForwardOperator = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    match &op {
        ForwardOperator::Surrogate { net, params, out_scale, out_shift, checksum } => {
            if params.len() != net.param_len() {
                return Err(Error::Parse(format!(
                    "{}: surrogate has {} params but widths {:?} want {}",
                    path.display(),
                    params.len(),
                    net.widths,
                    net.param_len()
                )));
            }
            if out_scale.len() != net.output_dim() || out_shift.len() != net.output_dim() {
                return Err(Error::Parse(format!(
                    "{}: output recalibration length mismatch",
                    path.display()
                )));
            }
            let got = checksum_of(params);
            if &got != checksum {
                return Err(Error::Parse(format!(
                    "{}: weight checksum mismatch (file {checksum}, computed {got})",
                    path.display()
                )));
            }
        }
        _ => {
            return Err(Error::Parse(format!(
                "{}: file does not contain a surrogate operator",
                path.display()
            )))
        }
    }
    Ok(op)
}

/// Ground truth stored alongside synthetic measurements.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub xs: Vec<Vec<f64>>,
    pub theta: NoiseParams,
}

/// Observations plus problem metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub ys: Vec<Vec<f64>>,
    pub d: usize,
    pub n: usize,
    pub prior_lo: Vec<f64>,
    pub prior_hi: Vec<f64>,
    pub truth: Option<GroundTruth>,
    pub seed: u64,
}

impl MeasurementSet {
    pub fn num_measurements(&self) -> usize {
        self.ys.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Parse(format!("serialize measurements: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

/// Draw `x_i` uniform on the prior box and observe `y_i` under the mixed
/// noise model at `theta_true`. Bit-reproducible for a fixed seed.
pub fn simulate_measurements(
    op: &ForwardOperator,
    theta_true: NoiseParams,
    prior_box: (&[f64], &[f64]),
    n_measurements: usize,
    seed: u64,
) -> Result<MeasurementSet> {
    if n_measurements == 0 {
        return Err(Error::InvalidParam("need at least one measurement".into()));
    }
    let (lo, hi) = prior_box;
    let d = op.input_dim();
    if lo.len() != d || hi.len() != d {
        return Err(Error::DimMismatch("prior box dims do not match operator".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n_measurements);
    let mut ys = Vec::with_capacity(n_measurements);
    for _ in 0..n_measurements {
        let x: Vec<f64> = (0..d).map(|j| rng.gen_range(lo[j]..hi[j])).collect();
        let y = sample_noisy(&op.eval(&x)?, theta_true, &mut rng);
        xs.push(x);
        ys.push(y);
    }
    Ok(MeasurementSet {
        ys,
        d,
        n: op.output_dim(),
        prior_lo: lo.to_vec(),
        prior_hi: hi.to_vec(),
        truth: Some(GroundTruth { xs, theta: theta_true }),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::central_diff_grad;
    use rand::Rng;

    fn unit_box(d: usize) -> (Vec<f64>, Vec<f64>) {
        (vec![-1.0; d], vec![1.0; d])
    }

    #[test]
    fn identity_and_zero_linear() {
        let id = ForwardOperator::identity(3);
        assert_eq!(id.eval(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
        let zero = ForwardOperator::linear(2, 3, vec![0.0; 6]).unwrap();
        assert_eq!(zero.eval(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let id = ForwardOperator::identity(3);
        assert!(id.eval(&[1.0]).is_err());
    }

    #[test]
    fn surrogate_roundtrip_is_identical() {
        let (lo, hi) = unit_box(3);
        let op = make_random_surrogate(3, 5, &[16], (&lo, &hi), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("surrogate.json");
        save_surrogate(&op, &path).unwrap();
        let loaded = load_surrogate(&path).unwrap();
        let x = [0.3, -0.7, 0.1];
        assert_eq!(op.eval(&x).unwrap(), loaded.eval(&x).unwrap());
    }

    #[test]
    fn corrupted_surrogate_is_rejected() {
        let (lo, hi) = unit_box(2);
        let op = make_random_surrogate(2, 3, &[8], (&lo, &hi), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("surrogate.json");
        save_surrogate(&op, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // Flip a weight without updating the checksum.
        let corrupted = text.replacen("0.", "1.", 1);
        std::fs::write(&path, corrupted).unwrap();
        assert!(load_surrogate(&path).is_err());
    }

    #[test]
    fn paper_shaped_surrogates() {
        let (lo, hi) = unit_box(3);
        let photomask = make_random_surrogate(3, 23, &[32, 32], (&lo, &hi), 0).unwrap();
        assert_eq!((photomask.input_dim(), photomask.output_dim()), (3, 23));
        let (lo, hi) = (vec![0.0; 7], vec![1.0; 7]);
        let grating = make_random_surrogate(7, 77, &[32, 32], (&lo, &hi), 0).unwrap();
        assert_eq!((grating.input_dim(), grating.output_dim()), (7, 77));
    }

    #[test]
    fn surrogate_determinism_and_probe_statistics() {
        let (lo, hi) = unit_box(4);
        let a = make_random_surrogate(4, 6, &[24], (&lo, &hi), 9).unwrap();
        let b = make_random_surrogate(4, 6, &[24], (&lo, &hi), 9).unwrap();
        let x = [0.1, 0.2, -0.3, 0.9];
        assert_eq!(a.eval(&x).unwrap(), b.eval(&x).unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let probes = 5000;
        let mut inside = 0usize;
        let mut sums = vec![0.0; 6];
        let mut sq = vec![0.0; 6];
        for _ in 0..probes {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let out = a.eval(&x).unwrap();
            if out.iter().all(|&v| (-0.2..=1.2).contains(&v)) {
                inside += 1;
            }
            for j in 0..6 {
                sums[j] += out[j];
                sq[j] += out[j] * out[j];
            }
        }
        assert!(inside as f64 / probes as f64 >= 0.99);
        for j in 0..6 {
            let mean = sums[j] / probes as f64;
            let std = (sq[j] / probes as f64 - mean * mean).sqrt();
            assert!(std > 1e-3, "coordinate {j} nearly constant: std {std}");
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let (lo, hi) = unit_box(3);
        let ops = vec![
            ForwardOperator::linear(4, 3, (0..12).map(|i| 0.1 * i as f64 - 0.5).collect())
                .unwrap(),
            ForwardOperator::AffineSine {
                d: 3,
                n: 2,
                matrix: vec![0.5, -0.3, 0.2, 0.1, 0.7, -0.6],
                bias: vec![0.1, -0.2],
                amp: 0.4,
                freq: 2.0,
            },
            ForwardOperator::Square { d: 3 },
            make_random_surrogate(3, 4, &[8], (&lo, &hi), 5).unwrap(),
        ];
        let x = [0.3, -0.4, 0.8];
        let g = [1.0, -0.5, 0.25, 2.0];
        for op in &ops {
            let n = op.output_dim();
            let (_, cache) = op.eval_cached(&x).unwrap();
            let gx = op.vjp(&cache, &g[..n]);
            let scalar = |xv: &[f64]| -> f64 {
                op.eval(xv)
                    .unwrap()
                    .iter()
                    .zip(g.iter())
                    .map(|(o, gi)| o * gi)
                    .sum()
            };
            let fd = central_diff_grad(&scalar, &x, 1e-6);
            for (a, b) in gx.iter().zip(fd.iter()) {
                assert!((a - b).abs() < 1e-6 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn simulate_measurements_is_bit_reproducible() {
        let op = ForwardOperator::identity(2);
        let th = NoiseParams::new(0.1, 0.2).unwrap();
        let (lo, hi) = unit_box(2);
        let a = simulate_measurements(&op, th, (&lo, &hi), 5, 3).unwrap();
        let b = simulate_measurements(&op, th, (&lo, &hi), 5, 3).unwrap();
        assert_eq!(a.ys, b.ys);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn additive_only_residual_variance() {
        let op = ForwardOperator::identity(3);
        let th = NoiseParams::new(0.25, 0.0).unwrap();
        let (lo, hi) = unit_box(3);
        let ms = simulate_measurements(&op, th, (&lo, &hi), 20_000, 8).unwrap();
        let truth = ms.truth.as_ref().unwrap();
        let mut sq = vec![0.0; 3];
        for (y, x) in ms.ys.iter().zip(truth.xs.iter()) {
            let f = op.eval(x).unwrap();
            for j in 0..3 {
                sq[j] += (y[j] - f[j]).powi(2);
            }
        }
        for s in sq {
            let var = s / ms.ys.len() as f64;
            assert!((var - 0.0625).abs() < 0.003, "var {var}");
        }
    }

    #[test]
    fn measurement_roundtrip() {
        let op = ForwardOperator::identity(2);
        let th = NoiseParams::new(0.1, 0.3).unwrap();
        let (lo, hi) = unit_box(2);
        let ms = simulate_measurements(&op, th, (&lo, &hi), 3, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meas.json");
        ms.save(&path).unwrap();
        let loaded = MeasurementSet::load(&path).unwrap();
        assert_eq!(ms.ys, loaded.ys);
        assert_eq!(ms.prior_lo, loaded.prior_lo);
    }
}
