//! Training targets and the composite counting loss
//! `ℓ = ℓ_D(D, D*) + ℓ_Q(C, C*)`.

use crate::config::defaults;
use crate::error::{Error, Result};
use crate::head::DensityMap;
use crate::tensor::{Tape, Tensor};

/// Downsampling factor between image pixels and the annotation/density grid.
pub const DENSITY_STRIDE: usize = 8;

/// Gaussian kernels are rendered within this many sigmas of the center and
/// renormalized, so border truncation never loses mass.
const KERNEL_RADIUS_SIGMAS: f64 = 4.0;

/// Point annotations plus their rendered density target.
pub struct GroundTruth {
    /// Head positions in image pixel coordinates.
    pub points: Vec<(f64, f64)>,
    /// `[1×(H/8)×(W/8)]` annotation map `D*`; sums to the point count.
    pub map: Tensor,
    /// True count `C*` (the number of points).
    pub count: f64,
}

/// Renders point annotations into a density target on the 1/8 grid: one
/// Gaussian of width `sigma` (in grid cells) per point, each renormalized to
/// unit mass so `Σ D* = C*` regardless of border clipping.
pub fn render_annotation_map(points: &[(f64, f64)], height: usize, width: usize, sigma: f64) -> Result<GroundTruth> {
    if height % DENSITY_STRIDE != 0 || width % DENSITY_STRIDE != 0 {
        return Err(Error::Config(format!(
            "image extent {width}×{height} not divisible by the density stride {DENSITY_STRIDE}"
        )));
    }
    if sigma <= 0.0 {
        return Err(Error::Config(format!("kernel width {sigma} must be positive")));
    }
    let (gh, gw) = (height / DENSITY_STRIDE, width / DENSITY_STRIDE);
    let mut map = vec![0.0; gh * gw];
    let radius = (KERNEL_RADIUS_SIGMAS * sigma).ceil() as isize;
    for (i, &(x, y)) in points.iter().enumerate() {
        if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
            return Err(Error::Contract(format!(
                "point {i} at ({x}, {y}) lies outside the {width}×{height} image"
            )));
        }
        // Pixel-center-aligned position on the coarse grid.
        let gx = (x + 0.5) / DENSITY_STRIDE as f64 - 0.5;
        let gy = (y + 0.5) / DENSITY_STRIDE as f64 - 0.5;
        let (cx, cy) = (gx.round() as isize, gy.round() as isize);
        let mut weights = Vec::new();
        let mut total = 0.0;
        for iy in (cy - radius).max(0)..=(cy + radius).min(gh as isize - 1) {
            for ix in (cx - radius).max(0)..=(cx + radius).min(gw as isize - 1) {
                let dx = ix as f64 - gx;
                let dy = iy as f64 - gy;
                let w = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                weights.push((iy as usize * gw + ix as usize, w));
                total += w;
            }
        }
        for (idx, w) in weights {
            map[idx] += w / total;
        }
    }
    Ok(GroundTruth {
        points: points.to_vec(),
        map: Tensor::from_vec(vec![1, gh, gw], map)?,
        count: points.len() as f64,
    })
}

/// Pluggable density-map loss `ℓ_D`, so alternative formulations (e.g.
/// transport-based ones) can slot in without touching the training loop.
pub trait DensityLoss {
    fn loss(&self, pred: &DensityMap, gt: &GroundTruth, tape: &Tape) -> Result<Tensor>;
}

/// Default `ℓ_D`: mean per-pixel squared error plus `λ·|ΣD − C*|`, tying
/// local shape and global mass to the target.
pub struct PixelCountLoss {
    pub count_weight: f64,
}

impl Default for PixelCountLoss {
    fn default() -> Self {
        PixelCountLoss {
            count_weight: defaults::DENSITY_COUNT_WEIGHT,
        }
    }
}

impl DensityLoss for PixelCountLoss {
    fn loss(&self, pred: &DensityMap, gt: &GroundTruth, tape: &Tape) -> Result<Tensor> {
        if pred.values.shape() != gt.map.shape() {
            return Err(Error::shape("density loss", pred.values.shape(), gt.map.shape()));
        }
        let diff = pred.values.sub(&gt.map, tape)?;
        let pixel = diff.mul(&diff, tape)?.mean_all(tape)?;
        let mass_gap = pred
            .values
            .sum_all(tape)?
            .sub(&Tensor::scalar(gt.count), tape)?
            .abs(tape)?
            .scalar_mul(self.count_weight, tape)?;
        pixel.add(&mass_gap, tape)
    }
}

/// Composite loss. `count_pred` is the decoder's count when that branch is
/// enabled; the query term `λ_Q·|C − C*|` (λ_Q = [`defaults::COUNT_LOSS_WEIGHT`])
/// is added only then.
pub fn total_loss(
    pred: &DensityMap,
    gt: &GroundTruth,
    count_pred: Option<&Tensor>,
    density_loss: &dyn DensityLoss,
    tape: &Tape,
) -> Result<Tensor> {
    let mut loss = density_loss.loss(pred, gt, tape)?;
    if let Some(c) = count_pred {
        let query = c
            .sub(&Tensor::scalar(gt.count), tape)?
            .abs(tape)?
            .scalar_mul(defaults::COUNT_LOSS_WEIGHT, tape)?;
        loss = loss.add(&query, tape)?;
    }
    Ok(loss)
}
