//! The outer EM loop: flow E-steps alternating with analytic inner-EM
//! M-steps, plus the fixed-grid baseline and ELBO-based model selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamState, ParamVector};
use crate::flow::{ConditionalFlow, FlowConfig};
use crate::forward_op::ForwardOperator;
use crate::losses::{
    draw_latents, elbo, forward_kl_grad, reverse_kl_grad_with_latents, Prior,
};
use crate::noise_model::{inner_em, sample_noisy, NoiseParams, PairBatch};
use crate::{Error, Result};

/// Which KL direction the E-step optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Forward,
    Reverse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmConfig {
    /// Outer EM iterations (R).
    pub outer_iters: usize,
    /// Optimizer steps per E-step (P).
    pub e_steps: usize,
    /// Inner EM steps per M-step (L).
    pub inner_steps: usize,
    /// Total posterior samples feeding the M-step (K).
    pub k_samples: usize,
    pub loss: LossKind,
    /// Monte-Carlo samples for each validation ELBO.
    pub m_elbo: usize,
    /// Validate every this many outer iterations.
    pub validate_every: usize,
    pub lr: f64,
    /// Joint-sample batch size per forward-KL gradient step.
    pub batch_size: usize,
    /// Latent draws per observation per reverse-KL gradient step.
    pub m_latent: usize,
    /// Global gradient-norm clip; tames reverse-KL spikes.
    pub grad_clip: f64,
    pub seed: u64,
}

impl EmConfig {
    /// Full-scale defaults (R=5000, K=2000).
    pub fn full_scale(loss: LossKind, seed: u64) -> Self {
        EmConfig {
            outer_iters: 5000,
            e_steps: 10,
            inner_steps: 20,
            k_samples: 2000,
            loss,
            m_elbo: 2000,
            validate_every: 1,
            lr: 1e-3,
            batch_size: 64,
            m_latent: 1,
            grad_clip: 10.0,
            seed,
        }
    }

    /// Desk-scale defaults for quick runs and tests (R=300, K=500).
    pub fn desk_scale(loss: LossKind, seed: u64) -> Self {
        EmConfig {
            outer_iters: 300,
            k_samples: 500,
            m_elbo: 500,
            ..Self::full_scale(loss, seed)
        }
    }

    pub fn validate(&self, n_measurements: usize) -> Result<()> {
        if self.outer_iters == 0 || self.e_steps == 0 || self.inner_steps == 0 {
            return Err(Error::InvalidParam("R, P, L must all be >= 1".into()));
        }
        if self.k_samples < n_measurements {
            return Err(Error::InvalidParam(format!(
                "K = {} must be >= N = {}",
                self.k_samples, n_measurements
            )));
        }
        if self.validate_every == 0 || self.m_elbo == 0 || self.batch_size == 0 || self.m_latent == 0
        {
            return Err(Error::InvalidParam("validation and batch sizes must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::InvalidParam("lr and grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// One validated point of the run: iteration, θ, and validation ELBO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iter: usize,
    pub a: f64,
    pub b: f64,
    pub elbo: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub iter: usize,
    pub params: ParamVector,
    pub theta: NoiseParams,
    pub elbo: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmState {
    pub flow: ConditionalFlow,
    pub theta: NoiseParams,
    pub trace: Vec<TracePoint>,
    pub best: BestSnapshot,
    pub seed: u64,
}

/// Over-estimate of θ from the pooled spread of the measurements: the run
/// starts "from above" so early posteriors are too wide rather than too
/// narrow.
pub fn init_theta(ys: &[Vec<f64>], factor: f64) -> Result<NoiseParams> {
    if ys.is_empty() || ys[0].is_empty() {
        return Err(Error::DimMismatch("init_theta needs nonempty measurements".into()));
    }
    if !(factor > 1.0) {
        return Err(Error::InvalidParam("init_theta factor must be > 1".into()));
    }
    let all: Vec<f64> = ys.iter().flatten().copied().collect();
    let m = all.len() as f64;
    let mean = all.iter().sum::<f64>() / m;
    let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    let std = var.sqrt();
    let mean_abs = all.iter().map(|v| v.abs()).sum::<f64>() / m;
    let clamp = |v: f64| v.clamp(1e-4, 10.0);
    let a0 = clamp(factor * std);
    let b0 = clamp(if mean_abs > 0.0 { factor * std / mean_abs } else { 0.0 });
    NoiseParams::new(a0, b0)
}

/// Repeat each measurement index so the total count is `k`, spreading any
/// remainder round-robin over the first measurements.
pub(crate) fn repeat_indices(n: usize, k: usize) -> Vec<usize> {
    let base = k / n;
    let extra = k % n;
    let mut out = Vec::with_capacity(k);
    for i in 0..n {
        let reps = base + usize::from(i < extra);
        out.extend(std::iter::repeat(i).take(reps));
    }
    out
}

fn clip_grad(grad: &mut ParamVector, max_norm: f64) {
    let norm = grad.values().iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grad.values_mut() {
            *g *= s;
        }
    }
}

/// Mean validation ELBO over all measurements, with its own RNG stream so
/// model selection stays independent of training randomness.
pub fn validation_elbo(
    flow: &ConditionalFlow,
    ys: &[Vec<f64>],
    theta: NoiseParams,
    prior: &dyn Prior,
    op: &ForwardOperator,
    m: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for y in ys {
        acc += elbo(flow, y, theta, prior, op, m, &mut rng)?.value;
    }
    Ok(acc / ys.len() as f64)
}

fn validation_seed(base: u64, iter: usize) -> u64 {
    base ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(iter as u64 + 1)
}

/// One E-step optimizer step; returns the loss.
fn e_step_once(
    flow: &mut ConditionalFlow,
    adam: &mut AdamState,
    ys: &[Vec<f64>],
    theta: NoiseParams,
    prior: &dyn Prior,
    op: &ForwardOperator,
    cfg: &EmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (loss, mut grad) = match cfg.loss {
        LossKind::Forward => {
            let mut xs = Vec::with_capacity(cfg.batch_size);
            let mut ys_sim = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let x = prior.sample(rng);
                let f = op.eval(&x)?;
                ys_sim.push(sample_noisy(&f, theta, rng));
                xs.push(x);
            }
            forward_kl_grad(flow, &xs, &ys_sim)?
        }
        LossKind::Reverse => {
            let zs = draw_latents(flow.dim(), ys.len(), cfg.m_latent, rng);
            reverse_kl_grad_with_latents(flow, ys, theta, prior, op, &zs)?
        }
    };
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite E-step loss {loss}")));
    }
    clip_grad(&mut grad, cfg.grad_clip);
    adam.step(flow.params.values_mut(), grad.values())?;
    Ok(loss)
}

/// M-step posterior batch: push latents through the flow for the repeated
/// measurement vector ỹ.
fn m_step_batch(
    flow: &ConditionalFlow,
    ys: &[Vec<f64>],
    op: &ForwardOperator,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch> {
    let idx = repeat_indices(ys.len(), k);
    let mut xs = Vec::with_capacity(k);
    let mut y_rep = Vec::with_capacity(k);
    let mut f_xs = Vec::with_capacity(k);
    for &i in &idx {
        let z: Vec<f64> = (0..flow.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let (x, _) = flow.push(&ys[i], &z)?;
        f_xs.push(op.eval(&x)?);
        y_rep.push(ys[i].clone());
        xs.push(x);
    }
    PairBatch::new(xs, y_rep, f_xs)
}

/// The outer EM loop. Warm-starts from the given flow and θ; the flow is
/// never re-initialized between iterations.
pub fn run_em(
    ys: &[Vec<f64>],
    flow: ConditionalFlow,
    theta0: NoiseParams,
    prior: &dyn Prior,
    op: &ForwardOperator,
    cfg: &EmConfig,
) -> Result<EmState> {
    if ys.is_empty() {
        return Err(Error::DimMismatch("run_em needs at least one measurement".into()));
    }
    cfg.validate(ys.len())?;
    let mut flow = flow;
    let mut theta = theta0;
    let mut adam = AdamState::new(flow.params.len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::new();
    let mut best: Option<BestSnapshot> = None;

    for r in 0..cfg.outer_iters {
        for _ in 0..cfg.e_steps {
            e_step_once(&mut flow, &mut adam, ys, theta, prior, op, cfg, &mut rng)
                .map_err(|e| Error::Numerical(format!("outer iteration {r}: {e}")))?;
        }
        let batch = m_step_batch(&flow, ys, op, cfg.k_samples, &mut rng)?;
        theta = inner_em(&batch, theta, cfg.inner_steps)?.0;
        if !(theta.a.is_finite() && theta.b.is_finite()) {
            return Err(Error::Numerical(format!("non-finite theta at outer iteration {r}")));
        }
        if r % cfg.validate_every == 0 || r + 1 == cfg.outer_iters {
            let e = validation_elbo(
                &flow,
                ys,
                theta,
                prior,
                op,
                cfg.m_elbo,
                validation_seed(cfg.seed, r),
            )?;
            trace.push(TracePoint { iter: r, a: theta.a, b: theta.b, elbo: e });
            if best.as_ref().map_or(true, |b| e > b.elbo) {
                best = Some(BestSnapshot { iter: r, params: flow.params.clone(), theta, elbo: e });
            }
        }
    }
    Ok(EmState { flow, theta, trace, best: best.expect("at least one validation"), seed: cfg.seed })
}

/// Re-evaluate a snapshot's validation ELBO with the stream it was recorded
/// under.
pub fn snapshot_elbo(
    state: &EmState,
    ys: &[Vec<f64>],
    prior: &dyn Prior,
    op: &ForwardOperator,
    m_elbo: usize,
) -> Result<f64> {
    let mut flow = state.flow.clone();
    flow.params = state.best.params.clone();
    validation_elbo(
        &flow,
        ys,
        state.best.theta,
        prior,
        op,
        m_elbo,
        validation_seed(state.seed, state.best.iter),
    )
}

/// gridCNF baseline: one fresh flow per (a, b) grid point at fixed θ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    pub a_grid: Vec<f64>,
    pub b_grid: Vec<f64>,
    /// Optimizer steps per grid point.
    pub steps: usize,
}

impl GridConfig {
    pub fn equispaced(a_range: (f64, f64), na: usize, b_range: (f64, f64), nb: usize, steps: usize) -> Self {
        let lin = |(lo, hi): (f64, f64), n: usize| -> Vec<f64> {
            if n == 1 {
                vec![lo]
            } else {
                (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
            }
        };
        GridConfig { a_grid: lin(a_range, na), b_grid: lin(b_range, nb), steps }
    }

    pub fn validate(&self) -> Result<()> {
        for g in [&self.a_grid, &self.b_grid] {
            if g.is_empty() {
                return Err(Error::InvalidParam("grid axes must be nonempty".into()));
            }
            if g.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidParam("grid axes must be strictly increasing".into()));
            }
        }
        if self.steps == 0 {
            return Err(Error::InvalidParam("grid steps must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        Self::equispaced((0.001, 0.03), 8, (0.01, 0.2), 8, 1200)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub a: f64,
    pub b: f64,
    pub elbo: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridResult {
    pub best_theta: NoiseParams,
    pub best_flow: ConditionalFlow,
    pub table: Vec<GridCell>,
}

/// Train one flow per grid point and keep the ELBO-maximizing one.
pub fn run_grid(
    ys: &[Vec<f64>],
    flow_cfg: &FlowConfig,
    prior: &dyn Prior,
    op: &ForwardOperator,
    grid: &GridConfig,
    cfg: &EmConfig,
) -> Result<GridResult> {
    if ys.is_empty() {
        return Err(Error::DimMismatch("run_grid needs at least one measurement".into()));
    }
    grid.validate()?;
    let mut table = Vec::with_capacity(grid.a_grid.len() * grid.b_grid.len());
    let mut best: Option<(NoiseParams, ConditionalFlow, f64)> = None;
    for (ia, &a) in grid.a_grid.iter().enumerate() {
        for (ib, &b) in grid.b_grid.iter().enumerate() {
            let cell = ia * grid.b_grid.len() + ib;
            let theta = NoiseParams::new(a, b)?;
            let cell_seed = cfg.seed.wrapping_add(cell as u64);
            let mut flow = ConditionalFlow::new(flow_cfg.clone(), cell_seed);
            let mut adam = AdamState::new(flow.params.len(), cfg.lr);
            let mut rng = ChaCha8Rng::seed_from_u64(cell_seed);
            for _ in 0..grid.steps {
                e_step_once(&mut flow, &mut adam, ys, theta, prior, op, cfg, &mut rng).map_err(
                    |e| Error::Numerical(format!("grid cell ({a}, {b}): {e}")),
                )?;
            }
            let e = validation_elbo(&flow, ys, theta, prior, op, cfg.m_elbo, validation_seed(cell_seed, 0))?;
            table.push(GridCell { a, b, elbo: e });
            if best.as_ref().map_or(true, |(_, _, be)| e > *be) {
                best = Some((theta, flow, e));
            }
        }
    }
    let (best_theta, best_flow, _) = best.expect("nonempty grid");
    Ok(GridResult { best_theta, best_flow, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_op::simulate_measurements;
    use crate::losses::PriorBox;

    #[test]
    fn repeat_indices_divisible_and_remainder() {
        assert_eq!(repeat_indices(2, 6), vec![0, 0, 0, 1, 1, 1]);
        let r = repeat_indices(3, 7);
        assert_eq!(r.len(), 7);
        assert_eq!(r.iter().filter(|&&i| i == 0).count(), 3);
        assert_eq!(r.iter().filter(|&&i| i == 1).count(), 2);
        assert_eq!(r.iter().filter(|&&i| i == 2).count(), 2);
    }

    #[test]
    fn init_theta_zero_spread_hits_floor() {
        let ys = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let t = init_theta(&ys, 5.0).unwrap();
        assert_eq!(t.a, 1e-4);
        assert_eq!(t.b, 1e-4);
    }

    #[test]
    fn init_theta_deterministic() {
        let ys = vec![vec![0.3, 0.9], vec![-0.1, 0.5]];
        assert_eq!(init_theta(&ys, 5.0).unwrap(), init_theta(&ys, 5.0).unwrap());
    }

    #[test]
    fn init_theta_rejects_small_factor() {
        assert!(init_theta(&[vec![1.0]], 1.0).is_err());
    }

    #[test]
    fn init_theta_dominates_truth_on_simulated_set() {
        // Shapes and θ_true from the small simulated setup (d=3, n=23).
        let op = crate::forward_op::make_random_surrogate(
            3,
            23,
            &[32, 32],
            (&[-1.0; 3], &[1.0; 3]),
            7,
        )
        .unwrap();
        let truth = NoiseParams::new(0.005, 0.1).unwrap();
        let ms = simulate_measurements(&op, truth, (&[-1.0; 3], &[1.0; 3]), 8, 11).unwrap();
        let t0 = init_theta(&ms.ys, 5.0).unwrap();
        assert!(t0.a > truth.a && t0.b > truth.b, "{t0:?} not above {truth:?}");
    }

    #[test]
    fn config_validation_rejects_k_below_n() {
        let mut cfg = EmConfig::desk_scale(LossKind::Forward, 0);
        cfg.k_samples = 3;
        assert!(cfg.validate(8).is_err());
        assert!(cfg.validate(3).is_ok());
    }

    #[test]
    fn grid_config_rejects_non_increasing_axes() {
        let mut g = GridConfig::default();
        assert!(g.validate().is_ok());
        assert_eq!(g.a_grid.len(), 8);
        assert_eq!(g.b_grid.len(), 8);
        assert!((g.a_grid[0] - 0.001).abs() < 1e-15);
        assert!((g.a_grid[7] - 0.03).abs() < 1e-15);
        g.a_grid = vec![0.2, 0.1];
        assert!(g.validate().is_err());
    }

    #[test]
    fn single_point_grid_is_fixed_theta_training() {
        let op = ForwardOperator::identity(1);
        let prior = PriorBox::new(vec![-1.0], vec![1.0], 50.0).unwrap();
        let ys = vec![vec![0.2]];
        let grid = GridConfig { a_grid: vec![0.3], b_grid: vec![0.1], steps: 5 };
        let mut cfg = EmConfig::desk_scale(LossKind::Forward, 4);
        cfg.m_elbo = 50;
        let mut fc = FlowConfig::new(1, 1);
        fc.hidden = vec![8];
        fc.num_blocks = 2;
        let out = run_grid(&ys, &fc, &prior, &op, &grid, &cfg).unwrap();
        assert_eq!(out.table.len(), 1);
        assert_eq!(out.best_theta, NoiseParams::new(0.3, 0.1).unwrap());
    }

    #[test]
    fn grid_table_covers_full_grid() {
        let op = ForwardOperator::identity(1);
        let prior = PriorBox::new(vec![-1.0], vec![1.0], 50.0).unwrap();
        let ys = vec![vec![0.1]];
        let grid = GridConfig::equispaced((0.1, 0.3), 2, (0.05, 0.2), 3, 2);
        let mut cfg = EmConfig::desk_scale(LossKind::Forward, 5);
        cfg.m_elbo = 20;
        let mut fc = FlowConfig::new(1, 1);
        fc.hidden = vec![8];
        fc.num_blocks = 2;
        let out = run_grid(&ys, &fc, &prior, &op, &grid, &cfg).unwrap();
        assert_eq!(out.table.len(), 6);
        let best = out.table.iter().map(|c| c.elbo).fold(f64::NEG_INFINITY, f64::max);
        let sel = out
            .table
            .iter()
            .find(|c| c.a == out.best_theta.a && c.b == out.best_theta.b)
            .unwrap();
        assert_eq!(sel.elbo, best);
    }

    #[test]
    fn run_em_rejects_empty_measurements() {
        let op = ForwardOperator::identity(1);
        let prior = PriorBox::new(vec![-1.0], vec![1.0], 50.0).unwrap();
        let flow = ConditionalFlow::new(FlowConfig::new(1, 1), 0);
        let cfg = EmConfig::desk_scale(LossKind::Forward, 0);
        let theta = NoiseParams::new(0.1, 0.1).unwrap();
        assert!(run_em(&[], flow, theta, &prior, &op, &cfg).is_err());
    }
}
