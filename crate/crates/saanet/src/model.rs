//! The full counting network: hierarchical deformable backbone, optional
//! multi-level fusion, optional count-query decoder with feature
//! recalibration, and the density head. The two optional branches are the
//! ablation toggles.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::DeformableCapture;
use crate::backbone::Deformer;
use crate::cafe::{CafeDecoder, RecalibrationMap};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::{FeatureFusion, FeaturePyramid, PyramidProjector};
use crate::head::{DensityHead, DensityMap};
use crate::nn::{join, Params};
use crate::tensor::{read_saat, write_saat, Tape, Tensor};

/// Everything one forward pass produces.
pub struct ModelOutput {
    pub density: DensityMap,
    /// Decoder count prediction (present when the count branch is enabled).
    pub count: Option<Tensor>,
    /// Last-layer cross-attention rows (present with the count branch).
    pub recalibration: Option<RecalibrationMap>,
    /// Fused token pyramid, after recalibration if any.
    pub pyramid: FeaturePyramid,
}

impl ModelOutput {
    /// The scalar inference count: the density map's total mass.
    pub fn predicted_count(&self) -> f64 {
        self.density.count_value()
    }
}

/// Backbone + fusion + count decoder + density head.
pub struct Saanet {
    pub backbone: Deformer,
    pub projector: PyramidProjector,
    pub fusion: Option<FeatureFusion>,
    pub cafe: Option<CafeDecoder>,
    pub head: DensityHead,
    cfg: ModelConfig,
}

impl Saanet {
    pub fn new(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let backbone = Deformer::new(cfg.backbone.clone(), rng)?;
        let level_channels: Vec<usize> = cfg.backbone.channels[1..].to_vec();
        let projector = PyramidProjector::new(&level_channels, cfg.fusion.d_fuse, rng);
        let fusion = if cfg.use_mff {
            Some(FeatureFusion::new(cfg.fusion.clone(), level_channels.len(), rng)?)
        } else {
            None
        };
        let cafe = if cfg.use_cafe {
            Some(CafeDecoder::new(cfg.cafe.clone(), cfg.fusion.d_fuse, rng)?)
        } else {
            None
        };
        let head = DensityHead::new(cfg.fusion.d_fuse, rng)?;
        Ok(Saanet {
            backbone,
            projector,
            fusion,
            cafe,
            head,
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn forward(&self, image: &Tensor, tape: &Tape) -> Result<ModelOutput> {
        Ok(self.forward_capture(image, tape)?.0)
    }

    /// Forward pass that also surfaces the backbone's analysis capture (the
    /// sampling geometry of the last deformable block at 1/8 resolution).
    pub fn forward_capture(
        &self,
        image: &Tensor,
        tape: &Tape,
    ) -> Result<(ModelOutput, Option<DeformableCapture>)> {
        let (mut stages, capture) = self.backbone.forward_stages_capture(image, tape)?;
        let f4 = stages.pop().expect("backbone yields four stages");
        let f3 = stages.pop().expect("backbone yields four stages");
        let f2 = stages.pop().expect("backbone yields four stages");
        let mut pyr = self.projector.project_and_flatten(&[f2, f3, f4], tape)?;
        if let Some(fusion) = &self.fusion {
            pyr = fusion.fuse(&pyr, tape)?;
        }
        let (count, recal) = match &self.cafe {
            Some(cafe) => {
                let (count, recal) = cafe.decode_count(&pyr, tape)?;
                pyr = recal.recalibrate(&pyr, tape)?;
                (Some(count), Some(recal))
            }
            None => (None, None),
        };
        let f2_map = pyr.level_map(0, tape)?;
        let density = self.head.forward(&f2_map, tape)?;
        Ok((
            ModelOutput {
                density,
                count,
                recalibration: recal,
                pyramid: pyr,
            },
            capture,
        ))
    }
}

impl Params for Saanet {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.backbone.visit_params(&join(prefix, "backbone"), out);
        self.projector.visit_params(&join(prefix, "projector"), out);
        if let Some(f) = &self.fusion {
            f.visit_params(&join(prefix, "fusion"), out);
        }
        if let Some(c) = &self.cafe {
            c.visit_params(&join(prefix, "cafe"), out);
        }
        self.head.visit_params(&join(prefix, "head"), out);
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    model: ModelConfig,
    params: Vec<ManifestEntry>,
}

/// File name of the checkpoint manifest inside a checkpoint directory.
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes the model configuration and every parameter (as one tensor file
/// each) into `dir`, creating it if needed.
pub fn save_checkpoint(model: &Saanet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (i, (name, p)) in model.params().into_iter().enumerate() {
        let file = format!("param_{i:04}.saat");
        let mut w = BufWriter::new(fs::File::create(dir.join(&file))?);
        write_saat(&mut w, &p)?;
        entries.push(ManifestEntry {
            name,
            file,
            shape: p.shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        model: model.config().clone(),
        params: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Rebuilds a model from a checkpoint directory. The manifest must cover the
/// reconstructed model's parameters exactly.
pub fn load_checkpoint(dir: &Path) -> Result<Saanet> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    // The seed is irrelevant: every parameter is overwritten below.
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let model = Saanet::new(manifest.model.clone(), &mut rng)?;
    let params = model.params();
    if params.len() != manifest.params.len() {
        return Err(Error::Contract(format!(
            "checkpoint holds {} parameters, model has {}",
            manifest.params.len(),
            params.len()
        )));
    }
    for ((name, p), entry) in params.into_iter().zip(&manifest.params) {
        if name != entry.name {
            return Err(Error::Contract(format!(
                "checkpoint parameter {} does not match model parameter {name}",
                entry.name
            )));
        }
        let mut r = BufReader::new(fs::File::open(dir.join(&entry.file))?);
        let t = read_saat(&mut r)?;
        if t.shape() != p.shape() || t.shape() != &entry.shape[..] {
            return Err(Error::Contract(format!(
                "checkpoint parameter {name}: stored shape {:?} does not match model shape {:?}",
                t.shape(),
                p.shape()
            )));
        }
        p.set_data(&t.to_vec());
    }
    Ok(model)
}
