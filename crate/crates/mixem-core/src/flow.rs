//! Conditional normalizing flow built from affine coupling blocks:
//! `T(y, ·): R^d -> R^d` invertible for every condition `y`, with exact
//! log-det Jacobian and exact hand-derived backprop through both directions.
//!
//! Each block splits the flow argument into an active and a passive half,
//! feeds `(passive ⊕ y)` to a scale net and a shift net, and maps the active
//! half through `u ↦ u·exp(s) + t`. Scale outputs are clamped via
//! `s ← s_max·tanh(s/s_max)`. The final layer of every subnetwork is
//! zero-initialized so a fresh flow is the identity map.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, DenseNet, NetCache, ParamVector, Segment};
use crate::{Error, Result};

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Flow architecture. Defaults: 6 blocks, two hidden layers of width 64,
/// tanh activations, scale clamp `s_max = 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    pub cond_dim: usize,
    pub num_blocks: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub s_max: f64,
}

impl FlowConfig {
    pub fn new(dim: usize, cond_dim: usize) -> Self {
        FlowConfig {
            dim,
            cond_dim,
            num_blocks: 6,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            s_max: 2.0,
        }
    }
}

/// One affine coupling block. `active`/`passive` partition `0..dim`; both
/// subnetworks map `(passive ⊕ y)` to the active dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CouplingBlock {
    active: Vec<usize>,
    passive: Vec<usize>,
    scale: DenseNet,
    shift: DenseNet,
}

/// Conditional affine-coupling flow with parameters in a flat [`ParamVector`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionalFlow {
    pub cfg: FlowConfig,
    blocks: Vec<CouplingBlock>,
    pub params: ParamVector,
}

/// Per-block forward state kept for the backward passes.
#[derive(Debug, Clone)]
struct BlockCache {
    scale_cache: NetCache,
    shift_cache: NetCache,
    s_raw: Vec<f64>,
    s: Vec<f64>,
    /// Active values on the latent (z) side of the block.
    act_z: Vec<f64>,
}

/// Forward state of one push or pull; feed back into the matching backward.
#[derive(Debug, Clone)]
pub struct FlowCache {
    blocks: Vec<BlockCache>,
}

impl ConditionalFlow {
    /// Build a flow with random hidden layers and zeroed final layers
    /// (identity initialization).
    pub fn new(cfg: FlowConfig, seed: u64) -> Self {
        let half = (cfg.dim + 1) / 2;
        let mut blocks = Vec::new();
        let mut segments = Vec::new();
        for b in 0..cfg.num_blocks {
            let (active, passive): (Vec<usize>, Vec<usize>) = if b % 2 == 0 {
                ((0..half).collect(), (half..cfg.dim).collect())
            } else {
                ((half..cfg.dim).collect(), (0..half).collect())
            };
            if active.is_empty() {
                continue; // degenerate half for odd dim; the block is identity
            }
            let mut widths = Vec::with_capacity(cfg.hidden.len() + 2);
            widths.push(passive.len() + cfg.cond_dim);
            widths.extend_from_slice(&cfg.hidden);
            widths.push(active.len());
            let scale = DenseNet::new(widths.clone(), cfg.activation);
            let shift = DenseNet::new(widths, cfg.activation);
            segments.push(Segment::new(format!("block{b}.scale"), scale.param_len()));
            segments.push(Segment::new(format!("block{b}.shift"), shift.param_len()));
            blocks.push(CouplingBlock { active, passive, scale, shift });
        }
        let mut params = ParamVector::zeros(segments);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Xavier-style init for all but each net's final layer, which stays
        // zero so the fresh flow is the identity.
        let mut offset = 0;
        for block in &blocks {
            for net in [&block.scale, &block.shift] {
                let n_layers = net.widths.len() - 1;
                for l in 0..n_layers {
                    let (n_in, n_out) = (net.widths[l], net.widths[l + 1]);
                    let count = n_in * n_out + n_out;
                    if l + 1 < n_layers {
                        let scale = (1.0 / (n_in.max(1)) as f64).sqrt();
                        for p in params.values_mut()[offset..offset + n_in * n_out].iter_mut() {
                            *p = rng.gen_range(-scale..scale);
                        }
                    }
                    offset += count;
                }
            }
        }
        ConditionalFlow { cfg, blocks, params }
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn clamp_s(&self, raw: f64) -> f64 {
        self.cfg.s_max * (raw / self.cfg.s_max).tanh()
    }

    fn clamp_s_deriv(&self, raw: f64) -> f64 {
        let t = (raw / self.cfg.s_max).tanh();
        1.0 - t * t
    }

    fn block_params(&self, idx: usize) -> (&[f64], &[f64]) {
        // Blocks were laid out consecutively as (scale, shift) pairs.
        let mut offset = 0;
        for (i, block) in self.blocks.iter().enumerate() {
            let s_len = block.scale.param_len();
            let t_len = block.shift.param_len();
            if i == idx {
                let v = self.params.values();
                return (&v[offset..offset + s_len], &v[offset + s_len..offset + s_len + t_len]);
            }
            offset += s_len + t_len;
        }
        unreachable!("block index out of range")
    }

    fn check_args(&self, y: &[f64], v: &[f64]) -> Result<()> {
        if v.len() != self.cfg.dim {
            return Err(Error::DimMismatch(format!(
                "flow argument has length {}, expected {}",
                v.len(),
                self.cfg.dim
            )));
        }
        if y.len() != self.cfg.cond_dim {
            return Err(Error::DimMismatch(format!(
                "condition has length {}, expected {}",
                y.len(),
                self.cfg.cond_dim
            )));
        }
        Ok(())
    }

    /// `T(y, z)` with `logdet = log|det ∇_z T(y, z)|`.
    pub fn push(&self, y: &[f64], z: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (x, logdet, _) = self.push_cached(y, z)?;
        Ok((x, logdet))
    }

    pub fn push_cached(&self, y: &[f64], z: &[f64]) -> Result<(Vec<f64>, f64, FlowCache)> {
        self.check_args(y, z)?;
        let mut v = z.to_vec();
        let mut logdet = 0.0;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (p_scale, p_shift) = self.block_params(i);
            let mut net_in = Vec::with_capacity(block.passive.len() + y.len());
            net_in.extend(block.passive.iter().map(|&j| v[j]));
            net_in.extend_from_slice(y);
            let (s_raw, scale_cache) = block.scale.eval_cached(p_scale, &net_in)?;
            let (t, shift_cache) = block.shift.eval_cached(p_shift, &net_in)?;
            let s: Vec<f64> = s_raw.iter().map(|&r| self.clamp_s(r)).collect();
            let act_z: Vec<f64> = block.active.iter().map(|&j| v[j]).collect();
            for (k, &j) in block.active.iter().enumerate() {
                v[j] = act_z[k] * s[k].exp() + t[k];
                logdet += s[k];
            }
            caches.push(BlockCache { scale_cache, shift_cache, s_raw, s, act_z });
        }
        if v.iter().any(|a| !a.is_finite()) || !logdet.is_finite() {
            return Err(Error::NonFinite("flow push".into()));
        }
        Ok((v, logdet, FlowCache { blocks: caches }))
    }

    /// Backprop through `push`. `grad_x` is the loss gradient w.r.t. the
    /// output, `grad_logdet` w.r.t. the accumulated logdet. Parameter
    /// gradients accumulate into `grad`; the return value is the gradient
    /// w.r.t. `z`.
    pub fn push_backward(
        &self,
        cache: &FlowCache,
        grad_x: &[f64],
        grad_logdet: f64,
        grad: &mut ParamVector,
    ) -> Vec<f64> {
        let mut g = grad_x.to_vec();
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[i];
            let (p_scale, p_shift) = self.block_params(i);
            let g_a: Vec<f64> = block.active.iter().map(|&j| g[j]).collect();
            // grad w.r.t. clamped s: through x_a = z_a·e^s + t and the logdet sum.
            let grad_s_raw: Vec<f64> = (0..g_a.len())
                .map(|k| {
                    let gs = g_a[k] * bc.act_z[k] * bc.s[k].exp() + grad_logdet;
                    gs * self.clamp_s_deriv(bc.s_raw[k])
                })
                .collect();
            let gin = self.block_nets_backward(i, block, bc, &grad_s_raw, &g_a, p_scale, p_shift, grad);
            for (k, &j) in block.active.iter().enumerate() {
                g[j] = g_a[k] * bc.s[k].exp();
            }
            for (k, &j) in block.passive.iter().enumerate() {
                g[j] += gin[k];
            }
        }
        g
    }

    /// Exact inverse of [`Self::push`]; returns `(z, logdet_inv)` with
    /// `logdet_inv = −logdet` at the corresponding pair.
    pub fn pull(&self, y: &[f64], x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (z, logdet_inv, _) = self.pull_cached(y, x)?;
        Ok((z, logdet_inv))
    }

    pub fn pull_cached(&self, y: &[f64], x: &[f64]) -> Result<(Vec<f64>, f64, FlowCache)> {
        self.check_args(y, x)?;
        let mut v = x.to_vec();
        let mut logdet_inv = 0.0;
        let mut caches: Vec<Option<BlockCache>> = (0..self.blocks.len()).map(|_| None).collect();
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let (p_scale, p_shift) = self.block_params(i);
            let mut net_in = Vec::with_capacity(block.passive.len() + y.len());
            net_in.extend(block.passive.iter().map(|&j| v[j]));
            net_in.extend_from_slice(y);
            let (s_raw, scale_cache) = block.scale.eval_cached(p_scale, &net_in)?;
            let (t, shift_cache) = block.shift.eval_cached(p_shift, &net_in)?;
            let s: Vec<f64> = s_raw.iter().map(|&r| self.clamp_s(r)).collect();
            let mut act_z = Vec::with_capacity(block.active.len());
            for (k, &j) in block.active.iter().enumerate() {
                let u = (v[j] - t[k]) * (-s[k]).exp();
                v[j] = u;
                act_z.push(u);
                logdet_inv -= s[k];
            }
            caches[i] = Some(BlockCache { scale_cache, shift_cache, s_raw, s, act_z });
        }
        if v.iter().any(|a| !a.is_finite()) || !logdet_inv.is_finite() {
            return Err(Error::NonFinite("flow pull".into()));
        }
        let blocks = caches.into_iter().map(|c| c.unwrap()).collect();
        Ok((v, logdet_inv, FlowCache { blocks }))
    }

    /// Backprop through `pull`. `grad_z` is the loss gradient w.r.t. the
    /// recovered latent, `grad_logdet_inv` w.r.t. `logdet_inv`. Returns the
    /// gradient w.r.t. `x`.
    pub fn pull_backward(
        &self,
        cache: &FlowCache,
        grad_z: &[f64],
        grad_logdet_inv: f64,
        grad: &mut ParamVector,
    ) -> Vec<f64> {
        // pull applied blocks in reverse order, so backprop runs forward.
        let mut g = grad_z.to_vec();
        for (i, block) in self.blocks.iter().enumerate() {
            let bc = &cache.blocks[i];
            let (p_scale, p_shift) = self.block_params(i);
            let g_a: Vec<f64> = block.active.iter().map(|&j| g[j]).collect();
            // z_a = (x_a − t)·e^{−s}: ∂z_a/∂s = −z_a, ∂logdet_inv/∂s = −1.
            let grad_s_raw: Vec<f64> = (0..g_a.len())
                .map(|k| {
                    let gs = -g_a[k] * bc.act_z[k] - grad_logdet_inv;
                    gs * self.clamp_s_deriv(bc.s_raw[k])
                })
                .collect();
            let grad_t: Vec<f64> = (0..g_a.len()).map(|k| -g_a[k] * (-bc.s[k]).exp()).collect();
            let gin =
                self.block_nets_backward(i, block, bc, &grad_s_raw, &grad_t, p_scale, p_shift, grad);
            for (k, &j) in block.active.iter().enumerate() {
                g[j] = g_a[k] * (-bc.s[k]).exp();
            }
            for (k, &j) in block.passive.iter().enumerate() {
                g[j] += gin[k];
            }
        }
        g
    }

    /// Shared net backprop: scale net with `grad_s_raw`, shift net with
    /// `grad_t`; returns the summed input gradient truncated to the passive
    /// slots (condition gradients are discarded).
    #[allow(clippy::too_many_arguments)]
    fn block_nets_backward(
        &self,
        idx: usize,
        block: &CouplingBlock,
        bc: &BlockCache,
        grad_s_raw: &[f64],
        grad_t: &[f64],
        p_scale: &[f64],
        p_shift: &[f64],
        grad: &mut ParamVector,
    ) -> Vec<f64> {
        let b_orig = self.block_index_name(idx);
        let r_scale = grad.segment_range(&format!("{b_orig}.scale")).unwrap();
        let r_shift = grad.segment_range(&format!("{b_orig}.shift")).unwrap();
        let gv = grad.values_mut();
        let mut gin_scale = {
            let gseg = &mut gv[r_scale];
            block.scale.backward(p_scale, &bc.scale_cache, grad_s_raw, gseg)
        };
        let gin_shift = {
            let gseg = &mut gv[r_shift];
            block.shift.backward(p_shift, &bc.shift_cache, grad_t, gseg)
        };
        for (a, b) in gin_scale.iter_mut().zip(gin_shift.iter()) {
            *a += b;
        }
        gin_scale.truncate(block.passive.len());
        gin_scale
    }

    fn block_index_name(&self, idx: usize) -> String {
        // Segment names carry the original block number, which may skip the
        // identity blocks dropped for odd dims.
        let name = &self.params.segments()[2 * idx].name;
        name.trim_end_matches(".scale").to_string()
    }

    /// `m` i.i.d. posterior draws: pushes of standard-normal latents.
    pub fn sample_posterior<R: Rng + ?Sized>(
        &self,
        y: &[f64],
        m: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        (0..m)
            .map(|_| {
                let z: Vec<f64> =
                    (0..self.cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
                Ok(self.push(y, &z)?.0)
            })
            .collect()
    }

    /// `log q(x | y)` by the change-of-variables formula.
    pub fn log_density(&self, y: &[f64], x: &[f64]) -> Result<f64> {
        let (z, logdet_inv) = self.pull(y, x)?;
        Ok(std_normal_logpdf(&z) + logdet_inv)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Parse(format!("serialize flow: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let flow: ConditionalFlow = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        flow.params.check_finite()?;
        Ok(flow)
    }
}

/// Standard normal log-density on R^d.
pub fn std_normal_logpdf(z: &[f64]) -> f64 {
    -0.5 * (z.len() as f64 * LN_2PI + z.iter().map(|v| v * v).sum::<f64>())
}
