//! Density regression head: three convolutions take the fused 1/8-resolution
//! feature map down to a single nonnegative density channel whose integral is
//! the predicted count.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, Params};
use crate::tensor::{Tape, Tensor};

/// Nonnegative `[1×(H/8)×(W/8)]` density grid; the count is its total mass.
pub struct DensityMap {
    pub values: Tensor,
}

impl DensityMap {
    pub fn new(values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::shape("density map", s, &[1, 0, 0]));
        }
        Ok(DensityMap { values })
    }

    /// Differentiable total count `‖D‖₁` (the values are nonnegative, so the
    /// plain sum is the L1 mass).
    pub fn count(&self, tape: &Tape) -> Result<Tensor> {
        self.values.sum_all(tape)
    }

    pub fn count_value(&self) -> f64 {
        self.values.to_vec().iter().sum()
    }
}

/// `d → d/2 → d/4 → 1` convolution stack (3×3, 3×3, 1×1) with GELU between
/// layers and a final ReLU for nonnegativity.
pub struct DensityHead {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    d_in: usize,
}

impl DensityHead {
    pub fn new(d_in: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if d_in % 4 != 0 {
            return Err(Error::Config(format!("density head width {d_in} must be divisible by 4")));
        }
        Ok(DensityHead {
            conv1: Conv2d::new(d_in, d_in / 2, 3, 1, 1, 1, true, rng),
            conv2: Conv2d::new(d_in / 2, d_in / 4, 3, 1, 1, 1, true, rng),
            conv3: Conv2d::new(d_in / 4, 1, 1, 1, 0, 1, true, rng),
            d_in,
        })
    }

    pub fn forward(&self, map: &Tensor, tape: &Tape) -> Result<DensityMap> {
        let s = map.shape();
        if s.len() != 3 || s[0] != self.d_in {
            return Err(Error::shape("density head", s, &[self.d_in, 0, 0]));
        }
        let x = self.conv1.forward(map, tape)?.gelu(tape)?;
        let x = self.conv2.forward(&x, tape)?.gelu(tape)?;
        DensityMap::new(self.conv3.forward(&x, tape)?.relu(tape)?)
    }
}

impl Params for DensityHead {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv1.visit_params(&join(prefix, "conv1"), out);
        self.conv2.visit_params(&join(prefix, "conv2"), out);
        self.conv3.visit_params(&join(prefix, "conv3"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_params;
    use rand::SeedableRng;

    #[test]
    fn zero_weights_give_zero_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = DensityHead::new(32, &mut rng).unwrap();
        for (_, p) in head.params() {
            p.set_data(&vec![0.0; p.numel()]);
        }
        let tape = Tape::inference();
        let x = Tensor::uniform(vec![32, 8, 8], -1.0, 1.0, &mut rng);
        let d = head.forward(&x, &tape).unwrap();
        assert!(d.values.to_vec().iter().all(|&v| v == 0.0));
        assert_eq!(d.count_value(), 0.0);
    }

    #[test]
    fn density_grid_is_an_eighth_of_the_input() {
        // A 64×64 image's stage-2 features live on an 8×8 grid.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = DensityHead::new(32, &mut rng).unwrap();
        let tape = Tape::inference();
        let x = Tensor::uniform(vec![32, 8, 8], -1.0, 1.0, &mut rng);
        let d = head.forward(&x, &tape).unwrap();
        assert_eq!(d.values.shape(), &[1, 8, 8]);
        assert!(d.values.to_vec().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = DensityHead::new(8, &mut rng).unwrap();
        let x = Tensor::uniform(vec![8, 3, 3], -1.0, 1.0, &mut rng);
        let report = grad_check_params(
            |tape| head.forward(&x, tape)?.values.sum_all(tape),
            &head.params(),
            1e-5,
            1e-4,
            6,
            &mut rng,
        )
        .unwrap();
        assert!(report.pass, "max relative deviation {}", report.max_rel);
    }
}
