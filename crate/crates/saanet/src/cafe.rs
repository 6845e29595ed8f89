//! Count-attentive feature enhancement: a single learnable count query
//! cross-attends to the fused tokens through a small decoder stack, regresses
//! the total count, and the last layer's cross-attention rows re-calibrate
//! the feature tokens head-by-head.

use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, GlobalAttention};
use crate::config::{defaults, CafeConfig};
use crate::error::{Error, Result};
use crate::fusion::FeaturePyramid;
use crate::nn::{join, LayerNorm, Linear, Mlp, Params};
use crate::tensor::{Tape, Tensor};

/// Per-head attention row of the count query over all tokens,
/// `[n_heads × N]`; every row is nonnegative and sums to one.
pub struct RecalibrationMap {
    pub weights: Tensor,
}

impl RecalibrationMap {
    pub fn new(weights: Tensor) -> Result<Self> {
        let map = RecalibrationMap { weights };
        map.validate()?;
        Ok(map)
    }

    pub fn n_heads(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn n_tokens(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.weights.shape();
        if s.len() != 2 {
            return Err(Error::shape("recalibration map", s, &[0, 0]));
        }
        let d = self.weights.to_vec();
        for (h, row) in d.chunks(s[1]).enumerate() {
            if row.iter().any(|&x| x < 0.0) {
                return Err(Error::Contract(format!("recalibration row {h} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("recalibration row {h} sums to {sum}, not 1")));
            }
        }
        Ok(())
    }

    /// Scales every token's head-`h` channel group by that token's attention
    /// value under head `h`, rescaled by the token count so a uniform row is
    /// the identity. Differentiable through both the tokens and the map.
    pub fn recalibrate(&self, pyr: &FeaturePyramid, tape: &Tape) -> Result<FeaturePyramid> {
        let heads = self.n_heads();
        let n = self.n_tokens();
        let d = pyr.width();
        if pyr.n_tokens() != n {
            return Err(Error::Contract(format!(
                "recalibration map covers {n} tokens, pyramid has {}",
                pyr.n_tokens()
            )));
        }
        if d % heads != 0 {
            return Err(Error::Config(format!("feature width {d} not divisible by {heads} heads")));
        }
        let scale = self
            .weights
            .transpose2d(tape)? // [N × heads]
            .scalar_mul(n as f64, tape)?
            .repeat_interleave_last(d / heads, tape)?; // [N × d]
        pyr.with_tokens(pyr.tokens.mul(&scale, tape)?)
    }

    /// One `[n_heads × H_l × W_l]` grid per pyramid level: each head's
    /// attention row restored to the level's spatial layout.
    pub fn level_grids(&self, pyr: &FeaturePyramid, tape: &Tape) -> Result<Vec<Tensor>> {
        if pyr.n_tokens() != self.n_tokens() {
            return Err(Error::Contract(format!(
                "recalibration map covers {} tokens, pyramid has {}",
                self.n_tokens(),
                pyr.n_tokens()
            )));
        }
        pyr.spans()
            .iter()
            .map(|s| {
                self.weights
                    .narrow(1, s.start, s.len, tape)?
                    .reshape(vec![self.n_heads(), s.h, s.w], tape)
            })
            .collect()
    }
}

struct CafeLayer {
    norm1: LayerNorm,
    self_attn: GlobalAttention,
    norm2: LayerNorm,
    cross_attn: GlobalAttention,
    norm3: LayerNorm,
    mlp: Mlp,
}

/// The count-query decoder: `n_layers` of (self-attention, cross-attention
/// over the fused tokens, MLP) applied to one learned query, followed by a
/// nonnegative count head.
pub struct CafeDecoder {
    query: Tensor,
    norm_mem: LayerNorm,
    layers: Vec<CafeLayer>,
    norm_final: LayerNorm,
    count_head: Linear,
    cfg: CafeConfig,
}

impl CafeDecoder {
    pub fn new(cfg: CafeConfig, d_fuse: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate(d_fuse)?;
        let attn_cfg = AttentionConfig {
            d_model: d_fuse,
            n_heads: cfg.n_heads,
            k_points: 1,
            dropout_rate: cfg.dropout_rate,
        };
        let layers = (0..cfg.n_layers)
            .map(|_| {
                Ok(CafeLayer {
                    norm1: LayerNorm::new(d_fuse),
                    self_attn: GlobalAttention::new(attn_cfg, rng)?,
                    norm2: LayerNorm::new(d_fuse),
                    cross_attn: GlobalAttention::new(attn_cfg, rng)?,
                    norm3: LayerNorm::new(d_fuse),
                    mlp: Mlp::new(d_fuse, rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CafeDecoder {
            query: Tensor::randn(vec![1, d_fuse], defaults::EMBED_INIT_STD, rng).requiring_grad(),
            norm_mem: LayerNorm::new(d_fuse),
            layers,
            norm_final: LayerNorm::new(d_fuse),
            count_head: Linear::new(d_fuse, 1, true, rng),
            cfg,
        })
    }

    pub fn config(&self) -> &CafeConfig {
        &self.cfg
    }

    /// Runs the decoder over the pyramid. Returns the nonnegative scalar
    /// count prediction and the last layer's cross-attention rows; both stay
    /// on the tape, so gradients flow through count and recalibration alike.
    pub fn decode_count(&self, pyr: &FeaturePyramid, tape: &Tape) -> Result<(Tensor, RecalibrationMap)> {
        let memory = self.norm_mem.forward(&pyr.tokens, tape)?;
        let mut q = self.query.clone();
        let mut last_probs = None;
        for layer in &self.layers {
            q = q.add(&layer.self_attn.forward(&layer.norm1.forward(&q, tape)?, tape)?, tape)?;
            let (cross, probs) = layer
                .cross_attn
                .attend(&layer.norm2.forward(&q, tape)?, &memory, tape)?;
            q = q.add(&cross, tape)?;
            q = q.add(&layer.mlp.forward(&layer.norm3.forward(&q, tape)?, tape)?, tape)?;
            last_probs = Some(probs);
        }
        let probs = last_probs.expect("decoder has at least one layer");
        let recal = RecalibrationMap::new(Tensor::concat(&probs, 0, tape)?)?;
        let count = self
            .count_head
            .forward(&self.norm_final.forward(&q, tape)?, tape)?
            .softplus(tape)?
            .reshape(vec![], tape)?;
        Ok((count, recal))
    }
}

impl Params for CafeDecoder {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "query"), self.query.clone()));
        self.norm_mem.visit_params(&join(prefix, "norm_mem"), out);
        for (i, layer) in self.layers.iter().enumerate() {
            let lp = join(prefix, &format!("layer{i}"));
            layer.norm1.visit_params(&join(&lp, "norm1"), out);
            layer.self_attn.visit_params(&join(&lp, "self_attn"), out);
            layer.norm2.visit_params(&join(&lp, "norm2"), out);
            layer.cross_attn.visit_params(&join(&lp, "cross_attn"), out);
            layer.norm3.visit_params(&join(&lp, "norm3"), out);
            layer.mlp.visit_params(&join(&lp, "mlp"), out);
        }
        self.norm_final.visit_params(&join(prefix, "norm_final"), out);
        self.count_head.visit_params(&join(prefix, "count_head"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::LevelSpan;
    use crate::oracle;
    use rand::SeedableRng;

    fn toy_pyramid(n_override: Option<(usize, Vec<LevelSpan>)>, d: usize, rng: &mut ChaCha8Rng) -> FeaturePyramid {
        let (n, spans) = n_override.unwrap_or((
            84,
            vec![
                LevelSpan { start: 0, len: 64, h: 8, w: 8 },
                LevelSpan { start: 64, len: 16, h: 4, w: 4 },
                LevelSpan { start: 80, len: 4, h: 2, w: 2 },
            ],
        ));
        FeaturePyramid::new(Tensor::uniform(vec![n, d], -1.0, 1.0, rng), spans).unwrap()
    }

    #[test]
    fn zeroed_decoder_counts_softplus_of_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = CafeDecoder::new(CafeConfig::toy(), 32, &mut rng).unwrap();
        for (_, p) in dec.params() {
            p.set_data(&vec![0.0; p.numel()]);
        }
        let pyr = toy_pyramid(None, 32, &mut rng);
        let tape = Tape::inference();
        let (count_a, recal) = dec.decode_count(&pyr, &tape).unwrap();
        let (count_b, _) = dec.decode_count(&pyr, &tape).unwrap();
        // The zero embedding maps to softplus(0) = ln 2 deterministically.
        assert_eq!(count_a.to_vec(), vec![2.0_f64.ln()]);
        assert_eq!(count_a.to_vec(), count_b.to_vec());
        // Zeroed projections give uniform attention rows.
        for row in recal.weights.to_vec().chunks(84) {
            for &p in row {
                assert!((p - 1.0 / 84.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn recal_shape_and_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = CafeDecoder::new(CafeConfig::toy(), 32, &mut rng).unwrap();
        let pyr = toy_pyramid(None, 32, &mut rng);
        let tape = Tape::inference();
        let (count, recal) = dec.decode_count(&pyr, &tape).unwrap();
        assert_eq!(recal.weights.shape(), &[4, 84]);
        assert!(recal.validate().is_ok());
        assert!(count.to_vec()[0] >= 0.0);
        assert!(count.to_vec()[0].is_finite());
    }

    #[test]
    fn uniform_recalibration_is_identity() {
        // 64 tokens: 1/64 is a power of two, so scaling by 64·(1/64) = 1.0 is
        // exact and the output must be bit-identical to the input.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spans = vec![LevelSpan { start: 0, len: 64, h: 8, w: 8 }];
        let pyr = toy_pyramid(Some((64, spans)), 32, &mut rng);
        let recal = RecalibrationMap::new(Tensor::from_vec(vec![4, 64], vec![1.0 / 64.0; 256]).unwrap()).unwrap();
        let tape = Tape::inference();
        let out = recal.recalibrate(&pyr, &tape).unwrap();
        assert_eq!(out.tokens.to_vec(), pyr.tokens.to_vec());
    }

    #[test]
    fn concentrated_recalibration_keeps_one_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spans = vec![LevelSpan { start: 0, len: 4, h: 2, w: 2 }];
        let pyr = toy_pyramid(Some((4, spans)), 8, &mut rng);
        let mut w = vec![0.0; 2 * 4];
        w[2] = 1.0; // head 0 → token 2
        w[4 + 2] = 1.0; // head 1 → token 2
        let recal = RecalibrationMap::new(Tensor::from_vec(vec![2, 4], w).unwrap()).unwrap();
        let tape = Tape::inference();
        let out = recal.recalibrate(&pyr, &tape).unwrap().tokens.to_vec();
        let input = pyr.tokens.to_vec();
        for t in 0..4 {
            for c in 0..8 {
                let expect = if t == 2 { input[t * 8 + c] * 4.0 } else { 0.0 };
                assert_eq!(out[t * 8 + c], expect, "token {t} channel {c}");
            }
        }
    }

    #[test]
    fn recalibration_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pyr = toy_pyramid(None, 32, &mut rng);
        let dec = CafeDecoder::new(CafeConfig::toy(), 32, &mut rng).unwrap();
        let tape = Tape::inference();
        let (_, recal) = dec.decode_count(&pyr, &tape).unwrap();
        let out = recal.recalibrate(&pyr, &tape).unwrap();
        let reference = oracle::recalibrate(
            &pyr.tokens.to_vec(),
            84,
            32,
            4,
            &recal.weights.to_vec(),
            84.0,
        );
        for (a, b) in out.tokens.to_vec().iter().zip(reference) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn recalibration_is_positively_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pyr = toy_pyramid(None, 32, &mut rng);
        let dec = CafeDecoder::new(CafeConfig::toy(), 32, &mut rng).unwrap();
        let tape = Tape::inference();
        let (_, recal) = dec.decode_count(&pyr, &tape).unwrap();
        let alpha = 2.5;
        let scaled = pyr.with_tokens(pyr.tokens.scalar_mul(alpha, &tape).unwrap()).unwrap();
        let a = recal.recalibrate(&scaled, &tape).unwrap().tokens.to_vec();
        let b = recal.recalibrate(&pyr, &tape).unwrap().tokens.to_vec();
        for (x, y) in a.iter().zip(b) {
            assert!((x - alpha * y).abs() < 1e-9);
        }
    }

    #[test]
    fn indivisible_channels_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spans = vec![LevelSpan { start: 0, len: 4, h: 2, w: 2 }];
        let pyr = toy_pyramid(Some((4, spans)), 10, &mut rng);
        let recal = RecalibrationMap::new(Tensor::from_vec(vec![4, 4], vec![0.25; 16]).unwrap()).unwrap();
        let tape = Tape::inference();
        assert!(matches!(recal.recalibrate(&pyr, &tape), Err(Error::Config(_))));
    }

    #[test]
    fn level_grids_restore_spatial_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pyr = toy_pyramid(None, 32, &mut rng);
        let dec = CafeDecoder::new(CafeConfig::toy(), 32, &mut rng).unwrap();
        let tape = Tape::inference();
        let (_, recal) = dec.decode_count(&pyr, &tape).unwrap();
        let grids = recal.level_grids(&pyr, &tape).unwrap();
        assert_eq!(grids.len(), 3);
        assert_eq!(grids[0].shape(), &[4, 8, 8]);
        assert_eq!(grids[1].shape(), &[4, 4, 4]);
        assert_eq!(grids[2].shape(), &[4, 2, 2]);
        // Grid values are the original rows, re-shaped.
        let flat = recal.weights.to_vec();
        let g1 = grids[1].to_vec();
        for h in 0..4 {
            for i in 0..16 {
                assert_eq!(g1[h * 16 + i], flat[h * 84 + 64 + i]);
            }
        }
    }
}
