//! Parameterized building blocks on top of [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::graph::{Conv3dSpec, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid init bound");
    let data = (0..len).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

/// Fully connected layer `y = x W + b` on `[m, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            group,
            uniform_tensor(rng, &[in_dim, out_dim], bound),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, group: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), group, Tensor::zeros(&[in_dim, out_dim]));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Row-wise layer normalization with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), group, Tensor::full(&[dim], 1.0));
        let shift = store.add(format!("{name}.shift"), group, Tensor::zeros(&[dim]));
        Self { gain, shift, eps: 1e-5 }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let n = g.layer_norm_rows(x, self.eps);
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        let scaled = g.mul_row(n, gain);
        g.add_row(scaled, shift)
    }
}

/// Cubic-kernel 3D convolution with per-channel bias on `[C, D, H, W]` inputs.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv3dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv3d {
    /// He-uniform initialization suited to ReLU networks.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            group,
            uniform_tensor(rng, &[out_channels, in_channels, kernel, kernel, kernel], bound),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            spec: Conv3dSpec {
                stride,
                pad: kernel / 2,
            },
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.conv3d(x, w, self.spec);
        g.add_channel(y, b)
    }

    /// Scales the weights in place; residual branches start near identity this way.
    pub fn scale_weights(&self, store: &mut ParamStore, s: f64) {
        store.value_mut(self.weight).scale_assign(s);
    }
}

/// Pre-norm Transformer encoder block: multi-head self-attention followed by
/// a GELU feed-forward network, each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Optional outputs captured during a block's forward pass.
#[derive(Clone, Debug, Default)]
pub struct BlockTrace {
    /// One `[T, T]` attention matrix per head.
    pub attention: Vec<Tensor>,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), group, dim),
            query: Linear::new(store, &format!("{name}.query"), group, dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), group, dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), group, dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), group, dim, dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), group, dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), group, dim, ff_dim, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), group, ff_dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        self.forward_traced(g, x, None, false)
    }

    /// Forward pass. With `identity_attention`, each token attends only to
    /// itself (a test hook that removes inter-token mixing).
    pub fn forward_traced(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        mut trace: Option<&mut BlockTrace>,
        identity_attention: bool,
    ) -> Var {
        let h = self.norm1.forward(g, x);
        let q = self.query.forward(g, h);
        let k = self.key.forward(g, h);
        let v = self.value.forward(g, h);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let start = head * head_dim;
            let vh = g.slice_cols(v, start, head_dim);
            if identity_attention {
                outs.push(vh);
                continue;
            }
            let qh = g.slice_cols(q, start, head_dim);
            let kh = g.slice_cols(k, start, head_dim);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            if let Some(t) = trace.as_deref_mut() {
                t.attention.push(g.value(attn).clone());
            }
            outs.push(g.matmul(attn, vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let attended = self.out.forward(g, merged);
        let x = g.add(x, attended);
        let h = self.norm2.forward(g, x);
        let h = self.ff1.forward(g, h);
        let h = g.gelu(h);
        let h = self.ff2.forward(g, h);
        g.add(x, h)
    }
}
