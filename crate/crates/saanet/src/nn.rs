//! Small neural-net building blocks on top of the tensor primitives.

use rand_chacha::ChaCha8Rng;

use crate::config::defaults;
use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// Anything that owns trainable tensors.
pub trait Params {
    /// Appends `(qualified_name, tensor)` pairs in a stable order.
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>);

    fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.numel()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map `y = x·W + b` with weight layout `[in×out]`.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Uniform ±1/√in init, zero bias.
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: Tensor::uniform(vec![d_in, d_out], -bound, bound, rng).requiring_grad(),
            bias: bias.then(|| Tensor::zeros(vec![d_out]).requiring_grad()),
        }
    }

    /// All-zero init (used for offset/logit projections so training starts
    /// from the reference point with uniform attention).
    pub fn zeroed(d_in: usize, d_out: usize, bias: bool) -> Self {
        Linear {
            weight: Tensor::zeros(vec![d_in, d_out]).requiring_grad(),
            bias: bias.then(|| Tensor::zeros(vec![d_out]).requiring_grad()),
        }
    }

    pub fn forward(&self, x: &Tensor, tape: &Tape) -> Result<Tensor> {
        let y = x.matmul(&self.weight, tape)?;
        match &self.bias {
            Some(b) => y.add(b, tape),
            None => Ok(y),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Params for Linear {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

/// Layer normalization over the last axis, with learned scale and shift.
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::ones(vec![dim]).requiring_grad(),
            beta: Tensor::zeros(vec![dim]).requiring_grad(),
            eps: defaults::LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor, tape: &Tape) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, self.eps, tape)
    }
}

impl Params for LayerNorm {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "gamma"), self.gamma.clone()));
        out.push((join(prefix, "beta"), self.beta.clone()));
    }
}

/// Two-layer feed-forward block with GELU, expansion per `defaults::MLP_RATIO`.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = dim * defaults::MLP_RATIO;
        Mlp {
            fc1: Linear::new(dim, hidden, true, rng),
            fc2: Linear::new(hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, x: &Tensor, tape: &Tape) -> Result<Tensor> {
        let h = self.fc1.forward(x, tape)?.gelu(tape)?;
        self.fc2.forward(&h, tape)
    }
}

impl Params for Mlp {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.fc1.visit_params(&join(prefix, "fc1"), out);
        self.fc2.visit_params(&join(prefix, "fc2"), out);
    }
}

/// Convolution layer wrapper holding weight, optional bias, and geometry.
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl Conv2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (c_in / groups) * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv2d {
            weight: Tensor::uniform(vec![c_out, c_in / groups, kernel, kernel], -bound, bound, rng)
                .requiring_grad(),
            bias: bias.then(|| Tensor::zeros(vec![c_out]).requiring_grad()),
            stride,
            padding,
            groups,
        }
    }

    pub fn forward(&self, x: &Tensor, tape: &Tape) -> Result<Tensor> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.stride, self.padding, self.groups, tape)
    }
}

impl Params for Conv2d {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

/// Flattens a `[C×H×W]` map into `[H·W×C]` tokens (row-major spatial order).
pub fn map_to_tokens(map: &Tensor, tape: &Tape) -> Result<Tensor> {
    let s = map.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    map.reshape(vec![c, h * w], tape)?.transpose2d(tape)
}

/// Inverse of [`map_to_tokens`].
pub fn tokens_to_map(tokens: &Tensor, h: usize, w: usize, tape: &Tape) -> Result<Tensor> {
    let c = tokens.shape()[1];
    tokens.transpose2d(tape)?.reshape(vec![c, h, w], tape)
}
