//! Synthetic crowd scenes: bright head blobs whose rendered size grows
//! linearly with image depth (a perspective proxy), over a noisy background.

pub mod annotations;
pub mod ppm;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::SceneConfig;
use crate::error::{Error, Result};
use crate::loss::{render_annotation_map, GroundTruth};
use crate::tensor::Tensor;

/// Attempts per point before placement is declared infeasible.
const PLACEMENT_RETRIES: usize = 200;
/// Blob brightness range.
const HEAD_BRIGHTNESS: (f64, f64) = (0.6, 1.0);
/// Per-channel tint range, so heads are not gray.
const HEAD_TINT: (f64, f64) = (0.5, 1.0);
/// Background base intensity.
const BACKGROUND_LEVEL: f64 = 0.15;

/// One synthetic scene: image, head positions, and their rendered box sizes.
pub struct Scene {
    /// `[3×H×W]` image with values in `[0, 1]`.
    pub image: Tensor,
    /// Head centers in pixel coordinates.
    pub points: Vec<(f64, f64)>,
    /// Rendered box side length (pixels) per head.
    pub box_sizes: Vec<f64>,
    pub seed: u64,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// The density target for this scene's annotations.
    pub fn ground_truth(&self, sigma: f64) -> Result<GroundTruth> {
        render_annotation_map(&self.points, self.height(), self.width(), sigma)
    }
}

/// Head box side at a given row: grows linearly toward the bottom.
fn head_size(cfg: &SceneConfig, y: f64) -> f64 {
    cfg.base_head_size + cfg.perspective_gradient * (y / cfg.height as f64)
}

/// Generates one scene deterministically from its seed.
///
/// Points are rejection-sampled so no two heads sit closer than half their
/// combined size; after a bounded number of retries the scene is declared
/// infeasible. With probability `negative_fraction` the scene is a negative
/// sample: zero heads, clutter only.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);

    let count = if rng.gen::<f64>() < cfg.negative_fraction {
        0
    } else {
        rng.gen_range(cfg.count_min..=cfg.count_max)
    };

    let mut points: Vec<(f64, f64)> = Vec::with_capacity(count);
    let mut sizes: Vec<f64> = Vec::with_capacity(count);
    for i in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let y = rng.gen_range(0.0..h as f64);
            let s = head_size(cfg, y);
            let half = s / 2.0;
            if 2.0 * half >= w as f64 || 2.0 * half >= h as f64 {
                continue;
            }
            let x = rng.gen_range(half..w as f64 - half);
            let y = y.clamp(half, h as f64 - half - f64::EPSILON * h as f64);
            let ok = points.iter().zip(&sizes).all(|(&(px, py), &ps)| {
                let d2 = (px - x) * (px - x) + (py - y) * (py - y);
                let min = (ps + s) / 2.0;
                d2 >= min * min
            });
            if ok {
                points.push((x, y));
                sizes.push(head_size(cfg, y));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Contract(format!(
                "could not place head {i} of {count} after {PLACEMENT_RETRIES} attempts \
                 in a {w}×{h} scene (min size {}, max size {}); lower the count or the head size",
                head_size(cfg, 0.0),
                head_size(cfg, h as f64),
            )));
        }
    }

    // Background: base level plus clutter noise, per pixel and channel.
    let mut img = vec![0.0; 3 * h * w];
    for v in img.iter_mut() {
        *v = BACKGROUND_LEVEL + cfg.clutter * crate::tensor::gauss(&mut rng);
    }

    // Heads: tinted Gaussian blobs; σ = s/4 keeps ~95% of the blob inside
    // the s×s box.
    for (&(x, y), &s) in points.iter().zip(&sizes) {
        let brightness = rng.gen_range(HEAD_BRIGHTNESS.0..HEAD_BRIGHTNESS.1);
        let tint = [
            rng.gen_range(HEAD_TINT.0..HEAD_TINT.1),
            rng.gen_range(HEAD_TINT.0..HEAD_TINT.1),
            rng.gen_range(HEAD_TINT.0..HEAD_TINT.1),
        ];
        let sigma = s / 4.0;
        let radius = (2.0 * sigma).ceil() as isize;
        let (cx, cy) = (x.round() as isize, y.round() as isize);
        for iy in (cy - radius).max(0)..=(cy + radius).min(h as isize - 1) {
            for ix in (cx - radius).max(0)..=(cx + radius).min(w as isize - 1) {
                let dx = ix as f64 - x;
                let dy = iy as f64 - y;
                let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                for (c, t) in tint.iter().enumerate() {
                    img[(c * h + iy as usize) * w + ix as usize] += brightness * t * g;
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    Ok(Scene {
        image: Tensor::from_vec(vec![3, h, w], img)?,
        points,
        box_sizes: sizes,
        seed,
    })
}

/// Generates `n` scenes with consecutive derived seeds.
pub fn generate_dataset(cfg: &SceneConfig, base_seed: u64, n: usize) -> Result<Vec<Scene>> {
    (0..n)
        .map(|i| generate_scene(cfg, base_seed.wrapping_add(i as u64)))
        .collect()
}

/// Pearson correlation coefficient of two equal-length samples.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_range_yields_clutter_only_scene() {
        let cfg = SceneConfig {
            count_min: 0,
            count_max: 0,
            ..SceneConfig::toy()
        };
        let scene = generate_scene(&cfg, 5).unwrap();
        assert!(scene.points.is_empty());
        assert!(scene.box_sizes.is_empty());
        // Clutter still fills the background.
        let d = scene.image.to_vec();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d.len() as f64;
        assert!(var > 0.0);
        assert!(d.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn same_seed_reproduces_the_scene_bit_for_bit() {
        let cfg = SceneConfig::toy();
        let a = generate_scene(&cfg, 42).unwrap();
        let b = generate_scene(&cfg, 42).unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(a.box_sizes, b.box_sizes);
        assert_eq!(a.image.to_vec(), b.image.to_vec());
        let c = generate_scene(&cfg, 43).unwrap();
        assert_ne!(a.image.to_vec(), c.image.to_vec());
    }

    #[test]
    fn head_size_tracks_depth() {
        let cfg = SceneConfig::toy();
        let mut ys = Vec::new();
        let mut sizes = Vec::new();
        let mut seed = 0;
        while ys.len() < 200 {
            let scene = generate_scene(&cfg, seed).unwrap();
            ys.extend(scene.points.iter().map(|p| p.1));
            sizes.extend(scene.box_sizes.iter().copied());
            seed += 1;
        }
        let r = pearson(&ys[..200], &sizes[..200]);
        assert!(r > 0.9, "Pearson r = {r}");
    }

    #[test]
    fn infeasible_placement_reports_diagnostics() {
        let cfg = SceneConfig {
            count_min: 500,
            count_max: 500,
            ..SceneConfig::toy()
        };
        let Err(err) = generate_scene(&cfg, 0) else {
            panic!("500 heads cannot fit a 64×64 scene");
        };
        let msg = err.to_string();
        assert!(msg.contains("attempts"), "{msg}");
        assert!(msg.contains("64×64"), "{msg}");
    }

    #[test]
    fn annotations_align_with_ground_truth_mass() {
        let scene = generate_scene(&SceneConfig::toy(), 9).unwrap();
        let gt = scene.ground_truth(1.0).unwrap();
        let mass: f64 = gt.map.to_vec().iter().sum();
        assert!((mass - scene.points.len() as f64).abs() < 1e-3);
        assert_eq!(gt.map.shape(), &[1, 8, 8]);
    }

    #[test]
    fn dataset_uses_distinct_derived_seeds() {
        let scenes = generate_dataset(&SceneConfig::toy(), 100, 3).unwrap();
        assert_eq!(scenes.len(), 3);
        assert_eq!(scenes[0].seed, 100);
        assert_eq!(scenes[2].seed, 102);
        assert_ne!(scenes[0].image.to_vec(), scenes[1].image.to_vec());
    }
}
