//! The two attention operators: global self-attention and deformable
//! attention, plus the depthwise-conv positional encoding.
//!
//! Layout conventions (shared with the scalar-loop oracle in [`crate::oracle`]):
//! - Offset projection output columns: `[level][head][point][x,y]` — a
//!   level's block is contiguous, so it can be sliced per level.
//! - Logit projection output columns: `[head][level][point]` — a head's
//!   block is contiguous, so softmax normalizes jointly over all
//!   `levels × points` samples of that head.
//! - Offsets are in pixel units of the sampled level; reference points are
//!   normalized to `[0,1]²` and map to level pixels via `u·W − 0.5`
//!   (pixel centers sit at `(i+0.5)/W`).

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, Linear, Params};
use crate::tensor::{Tape, Tensor};

/// Shared attention hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Sampled keys per head per level (deformable only).
    pub k_points: usize,
    pub dropout_rate: f64,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.k_points == 0 {
            return Err(Error::Config("k_points must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0,1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Per-query 2-d anchor locations in normalized `[0,1]²` scene space, with
/// the pyramid level each query came from.
#[derive(Debug, Clone)]
pub struct ReferencePoints {
    points: Vec<(f64, f64)>,
    levels: Vec<usize>,
}

impl ReferencePoints {
    pub fn new(points: Vec<(f64, f64)>, levels: Vec<usize>) -> Result<Self> {
        if points.len() != levels.len() {
            return Err(Error::Contract(format!(
                "{} points vs {} level ids",
                points.len(),
                levels.len()
            )));
        }
        for &(x, y) in &points {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(Error::Contract(format!("reference point ({x}, {y}) outside [0,1]²")));
            }
        }
        Ok(ReferencePoints { points, levels })
    }

    /// One point per cell of an `h×w` grid, at normalized pixel centers,
    /// row-major (y outer, x inner) — the token order of `map_to_tokens`.
    pub fn grid(h: usize, w: usize, level: usize) -> Self {
        let mut points = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                points.push(((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64));
            }
        }
        ReferencePoints {
            levels: vec![level; points.len()],
            points,
        }
    }

    pub fn concat(parts: &[ReferencePoints]) -> Self {
        let mut points = Vec::new();
        let mut levels = Vec::new();
        for p in parts {
            points.extend_from_slice(&p.points);
            levels.extend_from_slice(&p.levels);
        }
        ReferencePoints { points, levels }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }
}

/// Multi-head global self-attention (all-pairs).
pub struct GlobalAttention {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    cfg: AttentionConfig,
}

impl GlobalAttention {
    pub fn new(cfg: AttentionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(GlobalAttention {
            w_q: Linear::new(d, d, true, rng),
            w_k: Linear::new(d, d, true, rng),
            w_v: Linear::new(d, d, true, rng),
            w_o: Linear::new(d, d, true, rng),
            cfg,
        })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    /// Self-attention over one token set.
    pub fn forward(&self, z: &Tensor, tape: &Tape) -> Result<Tensor> {
        Ok(self.attend(z, z, tape)?.0)
    }

    /// Cross-attention: queries from `q_src` `[M×d]`, keys/values from
    /// `kv_src` `[N×d]`. Returns the output and each head's attention rows
    /// (`[M×N]`, softmax-normalized, pre-dropout).
    pub fn attend(&self, q_src: &Tensor, kv_src: &Tensor, tape: &Tape) -> Result<(Tensor, Vec<Tensor>)> {
        let d = self.cfg.d_model;
        if q_src.shape().len() != 2 || q_src.shape()[1] != d {
            return Err(Error::shape("attend", q_src.shape(), &[0, d]));
        }
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.w_q.forward(q_src, tape)?;
        let k = self.w_k.forward(kv_src, tape)?;
        let v = self.w_v.forward(kv_src, tape)?;
        let mut head_outs = Vec::with_capacity(self.cfg.n_heads);
        let mut head_probs = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = q.narrow(1, h * dh, dh, tape)?;
            let kh = k.narrow(1, h * dh, dh, tape)?;
            let vh = v.narrow(1, h * dh, dh, tape)?;
            let logits = qh
                .matmul(&kh.transpose2d(tape)?, tape)?
                .scalar_mul(scale, tape)?;
            let probs = logits.softmax_axis(1, tape)?;
            head_probs.push(probs.clone());
            let probs = probs.dropout(self.cfg.dropout_rate, tape)?;
            head_outs.push(probs.matmul(&vh, tape)?);
        }
        let concat = Tensor::concat(&head_outs, 1, tape)?;
        Ok((self.w_o.forward(&concat, tape)?, head_probs))
    }
}

impl Params for GlobalAttention {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.w_q.visit_params(&join(prefix, "w_q"), out);
        self.w_k.visit_params(&join(prefix, "w_k"), out);
        self.w_v.visit_params(&join(prefix, "w_v"), out);
        self.w_o.visit_params(&join(prefix, "w_o"), out);
    }
}

/// Snapshot of the learned sampling geometry of one forward pass.
pub struct DeformableCapture {
    /// `[N × (L·heads·K·2)]`, columns `[level][head][point][x,y]`, pixel units.
    pub offsets: Tensor,
    /// `[N·heads × L·K]`, rows query-major then head, columns `[level][point]`.
    pub probs: Tensor,
}

/// Multi-head, multi-level deformable attention.
///
/// Offset and logit projections start at zero so the initial pass samples
/// exactly at the reference point with uniform attention.
pub struct DeformableAttention {
    pub w_offset: Linear,
    pub w_logit: Linear,
    /// Per-head value projection, bias-free: head `h` uses the `[d×dh]`
    /// column block `h·dh..(h+1)·dh`.
    pub w_value: Linear,
    pub w_out: Linear,
    cfg: AttentionConfig,
    n_levels: usize,
}

impl DeformableAttention {
    pub fn new(cfg: AttentionConfig, n_levels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if n_levels == 0 {
            return Err(Error::Config("deformable attention needs ≥ 1 level".into()));
        }
        let d = cfg.d_model;
        let samples = cfg.n_heads * n_levels * cfg.k_points;
        Ok(DeformableAttention {
            w_offset: Linear::zeroed(d, samples * 2, true),
            w_logit: Linear::zeroed(d, samples, true),
            w_value: Linear::new(d, d, false, rng),
            w_out: Linear::new(d, d, true, rng),
            cfg,
            n_levels,
        })
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    pub fn forward(
        &self,
        z: &Tensor,
        refs: &ReferencePoints,
        levels: &[Tensor],
        tape: &Tape,
    ) -> Result<Tensor> {
        Ok(self.forward_capture(z, refs, levels, tape)?.0)
    }

    /// Forward pass that also returns the sampling offsets and attention
    /// weights for analysis and visualization.
    pub fn forward_capture(
        &self,
        z: &Tensor,
        refs: &ReferencePoints,
        levels: &[Tensor],
        tape: &Tape,
    ) -> Result<(Tensor, DeformableCapture)> {
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = self.cfg.head_dim();
        let k = self.cfg.k_points;
        let l_levels = self.n_levels;
        if z.shape().len() != 2 || z.shape()[1] != d {
            return Err(Error::shape("deformable_attention", z.shape(), &[0, d]));
        }
        let n = z.shape()[0];
        if refs.len() != n {
            return Err(Error::Contract(format!(
                "{} reference points for {} queries",
                refs.len(),
                n
            )));
        }
        if levels.len() != l_levels {
            return Err(Error::Contract(format!(
                "{} value levels, configured for {}",
                levels.len(),
                l_levels
            )));
        }
        for lvl in levels {
            let s = lvl.shape();
            if s.len() != 3 || s[0] != d {
                return Err(Error::shape("deformable_attention level", s, &[d, 0, 0]));
            }
        }

        let offsets = self.w_offset.forward(z, tape)?; // [N, L·heads·K·2]
        let logits = self.w_logit.forward(z, tape)?; // [N, heads·L·K]
        let probs = logits
            .reshape(vec![n * heads, l_levels * k], tape)?
            .softmax_axis(1, tape)?;
        let capture = DeformableCapture {
            offsets: offsets.detached(),
            probs: probs.detached(),
        };
        let probs = probs.dropout(self.cfg.dropout_rate, tape)?;
        // [N, heads, L·K] view for per-head slicing.
        let probs3 = probs.reshape(vec![n, heads, l_levels * k], tape)?;

        // Project each level's value map once, up front; sampling commutes
        // with the (linear, bias-free) value projection.
        let mut value_maps = Vec::with_capacity(l_levels);
        for lvl in levels {
            let s = lvl.shape();
            let (h_l, w_l) = (s[1], s[2]);
            let flat = crate::nn::map_to_tokens(lvl, tape)?; // [N_l, d]
            let proj = self.w_value.forward(&flat, tape)?;
            value_maps.push((crate::nn::tokens_to_map(&proj, h_l, w_l, tape)?, h_l, w_l));
        }

        // head_acc[h] accumulates Σ_levels Σ_k A·value, shape [N, dh].
        let mut head_acc: Vec<Option<Tensor>> = vec![None; heads];
        for (l, (vmap, h_l, w_l)) in value_maps.iter().enumerate() {
            // Reference points in this level's pixel frame, one row per (q, k).
            let mut ref_pix = Vec::with_capacity(n * k * 2);
            for &(u, v) in refs.points() {
                let px = u * *w_l as f64 - 0.5;
                let py = v * *h_l as f64 - 0.5;
                for _ in 0..k {
                    ref_pix.push(px);
                    ref_pix.push(py);
                }
            }
            let ref_pix = Tensor::from_vec(vec![n * k, 2], ref_pix)?;
            for h in 0..heads {
                // Offset columns for (level l, head h): contiguous K·2 block.
                let off = offsets
                    .narrow(1, ((l * heads) + h) * k * 2, k * 2, tape)?
                    .reshape(vec![n * k, 2], tape)?;
                let locs = ref_pix.add(&off, tape)?;
                let vmap_h = vmap.narrow(0, h * dh, dh, tape)?;
                let sampled = vmap_h.bilinear_sample_many(&locs, tape)?; // [N·K, dh]
                let p_h = probs3
                    .narrow(1, h, 1, tape)?
                    .reshape(vec![n, l_levels * k], tape)?
                    .narrow(1, l * k, k, tape)?; // [N, K]
                let weighted = sampled
                    .reshape(vec![n, k, dh], tape)?
                    .mul(&p_h.repeat_interleave_last(dh, tape)?.reshape(vec![n, k, dh], tape)?, tape)?
                    .sum_axis(1, tape)?; // [N, dh]
                head_acc[h] = Some(match head_acc[h].take() {
                    Some(acc) => acc.add(&weighted, tape)?,
                    None => weighted,
                });
            }
        }
        let heads_out: Vec<Tensor> = head_acc.into_iter().map(|t| t.unwrap()).collect();
        let concat = Tensor::concat(&heads_out, 1, tape)?;
        Ok((self.w_out.forward(&concat, tape)?, capture))
    }
}

impl Params for DeformableAttention {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.w_offset.visit_params(&join(prefix, "w_offset"), out);
        self.w_logit.visit_params(&join(prefix, "w_logit"), out);
        self.w_value.visit_params(&join(prefix, "w_value"), out);
        self.w_out.visit_params(&join(prefix, "w_out"), out);
    }
}

/// Positional information via a 3×3 stride-1 depthwise convolution added to
/// the input: `x + dwconv(x)`.
pub struct ConvPositionalEncoding {
    pub conv: Conv2d,
}

impl ConvPositionalEncoding {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv = Conv2d::new(channels, channels, 3, 1, 1, channels, false, rng);
        let std = crate::config::defaults::CPE_INIT_STD;
        let w = Tensor::randn(vec![channels, 1, 3, 3], std, rng);
        conv.weight.set_data(&w.to_vec());
        ConvPositionalEncoding { conv }
    }

    pub fn forward(&self, x: &Tensor, tape: &Tape) -> Result<Tensor> {
        x.add(&self.conv.forward(x, tape)?, tape)
    }
}

impl Params for ConvPositionalEncoding {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv.visit_params(&join(prefix, "conv"), out);
    }
}
