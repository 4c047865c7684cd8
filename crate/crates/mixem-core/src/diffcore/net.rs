use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Hidden-layer activation. The output layer is always identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed in terms of the pre-activation value.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Dense feed-forward network descriptor. Parameters live in an external flat
/// slice laid out layer by layer as row-major weights followed by biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseNet {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct NetCache {
    input: Vec<f64>,
    /// Pre-activation values per layer.
    pre: Vec<Vec<f64>>,
    /// Post-activation values per hidden layer (output layer omitted).
    post: Vec<Vec<f64>>,
}

impl DenseNet {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        DenseNet { widths, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Total parameter count: per layer `in*out` weights plus `out` biases.
    pub fn param_len(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn eval(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval_cached(params, input)?.0)
    }

    /// Forward pass keeping the per-layer values needed by [`Self::backward`].
    pub fn eval_cached(&self, params: &[f64], input: &[f64]) -> Result<(Vec<f64>, NetCache)> {
        if input.len() != self.widths[0] {
            return Err(Error::DimMismatch(format!(
                "net input has length {}, expected {}",
                input.len(),
                self.widths[0]
            )));
        }
        if params.len() != self.param_len() {
            return Err(Error::DimMismatch(format!(
                "net params have length {}, expected {}",
                params.len(),
                self.param_len()
            )));
        }
        let n_layers = self.widths.len() - 1;
        let mut pre = Vec::with_capacity(n_layers);
        let mut post = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut act = input.to_vec();
        let mut offset = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let w = &params[offset..offset + n_in * n_out];
            let b = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let mut z = vec![0.0; n_out];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut acc = b[o];
                for (wi, ai) in row.iter().zip(act.iter()) {
                    acc += wi * ai;
                }
                z[o] = acc;
            }
            pre.push(z.clone());
            if l + 1 < n_layers {
                for v in z.iter_mut() {
                    *v = self.activation.apply(*v);
                }
                post.push(z.clone());
            }
            act = z;
        }
        for v in &act {
            if !v.is_finite() {
                return Err(Error::NonFinite("net output".into()));
            }
        }
        let cache = NetCache { input: input.to_vec(), pre, post };
        Ok((act, cache))
    }

    /// Backward pass. Accumulates parameter gradients into `grad_params`
    /// (same layout as the forward `params`) and returns the gradient with
    /// respect to the input.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &NetCache,
        grad_output: &[f64],
        grad_params: &mut [f64],
    ) -> Vec<f64> {
        let n_layers = self.widths.len() - 1;
        assert_eq!(grad_output.len(), self.output_dim());
        assert_eq!(grad_params.len(), self.param_len());

        // Offsets of each layer's parameter block.
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for l in 0..n_layers {
            offsets.push(offset);
            offset += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }

        // g holds the gradient w.r.t. the current layer's pre-activation.
        let mut g = grad_output.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            if l + 1 < n_layers {
                for (gi, pi) in g.iter_mut().zip(cache.pre[l].iter()) {
                    *gi *= self.activation.derivative(*pi);
                }
            }
            let layer_in: &[f64] = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            let off = offsets[l];
            let gw = &mut grad_params[off..off + n_in * n_out + n_out];
            for o in 0..n_out {
                let go = g[o];
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                for (ri, ai) in row.iter_mut().zip(layer_in.iter()) {
                    *ri += go * ai;
                }
            }
            for o in 0..n_out {
                gw[n_in * n_out + o] += g[o];
            }
            // Gradient w.r.t. this layer's input: Wᵀ g.
            let w = &params[off..off + n_in * n_out];
            let mut gin = vec![0.0; n_in];
            for o in 0..n_out {
                let go = g[o];
                let row = &w[o * n_in..(o + 1) * n_in];
                for (gi, wi) in gin.iter_mut().zip(row.iter()) {
                    *gi += go * wi;
                }
            }
            g = gin;
        }
        g
    }
}
