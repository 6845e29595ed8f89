//! Multi-level feature fusion: project the backbone pyramid to a common
//! width, flatten into one token set, tag with scale-level embeddings and
//! positional encoding, and fuse with deformable-attention encoder layers
//! that sample from every level.

use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, ConvPositionalEncoding, DeformableAttention, ReferencePoints};
use crate::config::{defaults, FusionConfig};
use crate::error::{Error, Result};
use crate::nn::{join, map_to_tokens, tokens_to_map, LayerNorm, Linear, Mlp, Params};
use crate::tensor::{Tape, Tensor};

/// Extent bookkeeping for one pyramid level inside the flattened token set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSpan {
    pub start: usize,
    pub len: usize,
    pub h: usize,
    pub w: usize,
}

/// The flattened multi-level token set: levels concatenated in order
/// (1/8, 1/16, 1/32), each span row-major within its grid.
pub struct FeaturePyramid {
    pub tokens: Tensor,
    spans: Vec<LevelSpan>,
}

impl FeaturePyramid {
    pub fn new(tokens: Tensor, spans: Vec<LevelSpan>) -> Result<Self> {
        let mut expected = 0;
        for s in &spans {
            if s.start != expected || s.len != s.h * s.w {
                return Err(Error::Contract(format!("level spans do not partition tokens: {spans:?}")));
            }
            expected += s.len;
        }
        if tokens.shape().len() != 2 || tokens.shape()[0] != expected {
            return Err(Error::Contract(format!(
                "token tensor {:?} does not match span total {}",
                tokens.shape(),
                expected
            )));
        }
        Ok(FeaturePyramid { tokens, spans })
    }

    pub fn spans(&self) -> &[LevelSpan] {
        &self.spans
    }

    pub fn n_levels(&self) -> usize {
        self.spans.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Same spans, new token contents.
    pub fn with_tokens(&self, tokens: Tensor) -> Result<Self> {
        FeaturePyramid::new(tokens, self.spans.clone())
    }

    /// One level's tokens restored to their `[d×H_l×W_l]` map.
    pub fn level_map(&self, level: usize, tape: &Tape) -> Result<Tensor> {
        let span = self
            .spans
            .get(level)
            .ok_or_else(|| Error::Contract(format!("level {level} out of range")))?;
        let rows = self.tokens.narrow(0, span.start, span.len, tape)?;
        tokens_to_map(&rows, span.h, span.w, tape)
    }

    /// Reference points for every token: its own normalized grid location.
    pub fn reference_points(&self) -> ReferencePoints {
        let grids: Vec<ReferencePoints> = self
            .spans
            .iter()
            .enumerate()
            .map(|(l, s)| ReferencePoints::grid(s.h, s.w, l))
            .collect();
        ReferencePoints::concat(&grids)
    }
}

/// Per-level linear projection to the common fusion width.
pub struct PyramidProjector {
    projections: Vec<Linear>,
}

impl PyramidProjector {
    pub fn new(level_channels: &[usize], d_fuse: usize, rng: &mut ChaCha8Rng) -> Self {
        PyramidProjector {
            projections: level_channels
                .iter()
                .map(|&c| Linear::new(c, d_fuse, true, rng))
                .collect(),
        }
    }

    /// Projects each level to the common width, flattens row-major, and
    /// concatenates in level order.
    pub fn project_and_flatten(&self, levels: &[Tensor], tape: &Tape) -> Result<FeaturePyramid> {
        if levels.len() != self.projections.len() {
            return Err(Error::Contract(format!(
                "{} levels for {} projections",
                levels.len(),
                self.projections.len()
            )));
        }
        let mut parts = Vec::with_capacity(levels.len());
        let mut spans = Vec::with_capacity(levels.len());
        let mut start = 0;
        for (map, proj) in levels.iter().zip(&self.projections) {
            let s = map.shape();
            let (h, w) = (s[1], s[2]);
            let tokens = proj.forward(&map_to_tokens(map, tape)?, tape)?;
            spans.push(LevelSpan {
                start,
                len: h * w,
                h,
                w,
            });
            start += h * w;
            parts.push(tokens);
        }
        FeaturePyramid::new(Tensor::concat(&parts, 0, tape)?, spans)
    }
}

impl Params for PyramidProjector {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, p) in self.projections.iter().enumerate() {
            p.visit_params(&join(prefix, &format!("level{i}")), out);
        }
    }
}

struct FusionLayer {
    norm1: LayerNorm,
    attn: DeformableAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

/// The fusion module: scale-level embedding + positional encoding, then
/// deformable encoder layers sampling across all levels.
pub struct FeatureFusion {
    scale_embed: Tensor,
    cpe: ConvPositionalEncoding,
    layers: Vec<FusionLayer>,
    cfg: FusionConfig,
}

impl FeatureFusion {
    pub fn new(cfg: FusionConfig, n_levels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let attn_cfg = AttentionConfig {
            d_model: cfg.d_fuse,
            n_heads: cfg.n_heads,
            k_points: cfg.k_points,
            dropout_rate: cfg.dropout_rate,
        };
        let layers = (0..cfg.n_layers)
            .map(|_| {
                Ok(FusionLayer {
                    norm1: LayerNorm::new(cfg.d_fuse),
                    attn: DeformableAttention::new(attn_cfg, n_levels, rng)?,
                    norm2: LayerNorm::new(cfg.d_fuse),
                    mlp: Mlp::new(cfg.d_fuse, rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureFusion {
            scale_embed: Tensor::randn(vec![n_levels, cfg.d_fuse], defaults::EMBED_INIT_STD, rng)
                .requiring_grad(),
            cpe: ConvPositionalEncoding::new(cfg.d_fuse, rng),
            layers,
            cfg,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    /// Adds the per-level scale embedding and (per-level) positional
    /// encoding. Exposed separately so the embedding step is testable.
    pub fn embed(&self, pyr: &FeaturePyramid, tape: &Tape) -> Result<FeaturePyramid> {
        let level_ids: Vec<usize> = pyr
            .spans()
            .iter()
            .enumerate()
            .flat_map(|(l, s)| std::iter::repeat(l).take(s.len))
            .collect();
        let scale_rows = Tensor::embedding_lookup(&self.scale_embed, &level_ids, tape)?;
        let tagged = pyr.tokens.add(&scale_rows, tape)?;
        let tagged = pyr.with_tokens(tagged)?;
        let mut parts = Vec::with_capacity(tagged.n_levels());
        for l in 0..tagged.n_levels() {
            let map = tagged.level_map(l, tape)?;
            let encoded = self.cpe.forward(&map, tape)?;
            parts.push(map_to_tokens(&encoded, tape)?);
        }
        pyr.with_tokens(Tensor::concat(&parts, 0, tape)?)
    }

    /// Full fusion: embedding step, then the deformable encoder stack.
    /// Token count and span structure are preserved.
    pub fn fuse(&self, pyr: &FeaturePyramid, tape: &Tape) -> Result<FeaturePyramid> {
        let refs = pyr.reference_points();
        let mut current = self.embed(pyr, tape)?;
        for layer in &self.layers {
            let z = &current.tokens;
            let zn = layer.norm1.forward(z, tape)?;
            let normed = current.with_tokens(zn)?;
            let value_maps: Vec<Tensor> = (0..normed.n_levels())
                .map(|l| normed.level_map(l, tape))
                .collect::<Result<_>>()?;
            let branch = layer.attn.forward(&normed.tokens, &refs, &value_maps, tape)?;
            let z = z.add(&branch, tape)?;
            let z = z.add(&layer.mlp.forward(&layer.norm2.forward(&z, tape)?, tape)?, tape)?;
            current = current.with_tokens(z)?;
        }
        Ok(current)
    }
}

impl Params for FeatureFusion {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "scale_embed"), self.scale_embed.clone()));
        self.cpe.visit_params(&join(prefix, "cpe"), out);
        for (i, layer) in self.layers.iter().enumerate() {
            let lp = join(prefix, &format!("layer{i}"));
            layer.norm1.visit_params(&join(&lp, "norm1"), out);
            layer.attn.visit_params(&join(&lp, "attn"), out);
            layer.norm2.visit_params(&join(&lp, "norm2"), out);
            layer.mlp.visit_params(&join(&lp, "mlp"), out);
        }
    }
}
