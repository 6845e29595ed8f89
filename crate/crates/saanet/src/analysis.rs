//! Offset–scale analysis: do the learned sampling offsets of the
//! 1/8-resolution deformable block grow with the rendered head size?

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::attention::DeformableCapture;
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::loss::DENSITY_STRIDE;
use crate::model::Saanet;
use crate::tensor::Tape;

/// One annotated head paired with the mean sampling-offset magnitude of the
/// feature-grid cell it falls in.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OffsetSample {
    pub box_size: f64,
    pub offset_magnitude: f64,
}

/// Least-squares line through the (box size, offset magnitude) samples, with
/// a two-sided t-test on the slope.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Full analysis artifact (the JSON the CLI writes).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub fit: SlopeFit,
    pub samples: Vec<OffsetSample>,
}

/// Ordinary least squares y = a + b·x with a two-sided t-test of b = 0.
pub fn fit_slope(samples: &[(f64, f64)]) -> Result<SlopeFit> {
    let n = samples.len();
    if n < 3 {
        return Err(Error::Contract(format!("slope test needs ≥ 3 samples, got {n}")));
    }
    let nf = n as f64;
    let mx = samples.iter().map(|s| s.0).sum::<f64>() / nf;
    let my = samples.iter().map(|s| s.1).sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in samples {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::Contract("slope test needs variation in box size".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = samples
        .iter()
        .map(|&(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let df = nf - 2.0;
    let se = (sse / df / sxx).sqrt();
    let p_value = if se == 0.0 {
        // A perfect fit: the slope is either exactly zero or unmistakable.
        if slope == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        let t = slope / se;
        let dist = StudentsT::new(0.0, 1.0, df)
            .map_err(|e| Error::Contract(format!("t-distribution setup failed: {e}")))?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(SlopeFit {
        slope,
        intercept,
        p_value,
        n,
    })
}

/// Pairs every annotated head with the mean offset magnitude (in pixels of
/// the 1/8 grid) of the grid cell containing it.
///
/// The capture's offsets are `[N × (heads·K·2)]` rows over an `h×w` grid in
/// row-major order — the single-level layout produced by backbone blocks.
pub fn capture_samples(
    capture: &DeformableCapture,
    grid_h: usize,
    grid_w: usize,
    points: &[(f64, f64)],
    box_sizes: &[f64],
) -> Result<Vec<OffsetSample>> {
    let shape = capture.offsets.shape();
    if shape.len() != 2 || shape[0] != grid_h * grid_w {
        return Err(Error::Contract(format!(
            "capture covers {:?} queries, grid is {grid_h}×{grid_w}",
            shape
        )));
    }
    if points.len() != box_sizes.len() {
        return Err(Error::Contract(format!(
            "{} points with {} box sizes",
            points.len(),
            box_sizes.len()
        )));
    }
    let pairs = shape[1] / 2;
    let offsets = capture.offsets.to_vec();
    let mut samples = Vec::with_capacity(points.len());
    for (&(x, y), &size) in points.iter().zip(box_sizes) {
        let gx = ((x + 0.5) / DENSITY_STRIDE as f64 - 0.5).round().clamp(0.0, grid_w as f64 - 1.0) as usize;
        let gy = ((y + 0.5) / DENSITY_STRIDE as f64 - 0.5).round().clamp(0.0, grid_h as f64 - 1.0) as usize;
        let row = &offsets[(gy * grid_w + gx) * pairs * 2..(gy * grid_w + gx + 1) * pairs * 2];
        let mean_mag = row
            .chunks(2)
            .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
            .sum::<f64>()
            / pairs as f64;
        samples.push(OffsetSample {
            box_size: size,
            offset_magnitude: mean_mag,
        });
    }
    Ok(samples)
}

/// Runs the model over the scenes, collects (box size, offset magnitude)
/// pairs from the 1/8-scale capture, and fits the slope.
pub fn offset_scale_analysis(model: &Saanet, scenes: &[Scene]) -> Result<AnalysisReport> {
    let tape = Tape::inference();
    let mut samples = Vec::new();
    for scene in scenes {
        let (_, capture) = model.forward_capture(&scene.image, &tape)?;
        let capture = capture.ok_or_else(|| {
            Error::Contract("backbone produced no deformable capture at the 1/8 scale".into())
        })?;
        let (gh, gw) = (
            scene.height() / DENSITY_STRIDE,
            scene.width() / DENSITY_STRIDE,
        );
        samples.extend(capture_samples(
            &capture,
            gh,
            gw,
            &scene.points,
            &scene.box_sizes,
        )?);
    }
    let fit = fit_slope(&samples.iter().map(|s| (s.box_size, s.offset_magnitude)).collect::<Vec<_>>())?;
    Ok(AnalysisReport { fit, samples })
}
