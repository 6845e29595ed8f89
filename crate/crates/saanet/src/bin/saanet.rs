//! Command-line front end: synthesize scenes, train, evaluate, and export
//! the analysis artifacts.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use saanet::analysis::offset_scale_analysis;
use saanet::config::{defaults, ModelConfig, RunConfig};
use saanet::data::{annotations::write_annotations, generate_dataset, ppm::write_ppm, Scene};
use saanet::error::{Error, Result};
use saanet::model::{load_checkpoint, save_checkpoint, Saanet};
use saanet::tensor::{write_saat, Tape};
use saanet::train::{evaluate, train};

#[derive(Parser)]
#[command(name = "saanet", about = "Scene-adaptive attention crowd counting at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (JSON). Defaults to the built-in toy recipe.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Use the desk-scale toy model (default).
    #[arg(long, conflicts_with = "full")]
    toy: bool,
    /// Use the full-width tiny model instead of the toy variant.
    #[arg(long)]
    full: bool,
}

impl CommonArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => serde_json::from_str::<RunConfig>(&fs::read_to_string(path)?)?,
            None => {
                let mut cfg = RunConfig::toy();
                if self.full {
                    cfg.model = ModelConfig::full_tiny();
                }
                cfg
            }
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/eval scenes as PPM images with CSV annotations.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train a model and write a checkpoint plus the loss curve.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint directory to write (default: <out>/checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the eval scenes; writes metrics.json and
    /// per-scene density maps.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint directory to read (default: <out>/checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Regress sampling-offset magnitude against rendered head size.
    AnalyzeOffsets {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Dump the count query's attention over each pyramid level as tensors.
    DumpAttn {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn train_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    generate_dataset(&cfg.scene, cfg.seed, cfg.train_scenes)
}

fn eval_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    generate_dataset(
        &cfg.scene,
        cfg.seed.wrapping_add(defaults::EVAL_SEED_OFFSET),
        cfg.eval_scenes,
    )
}

fn checkpoint_dir(out: &Path, flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| out.join("checkpoint"))
}

fn write_scene_set(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, scene) in scenes.iter().enumerate() {
        write_ppm(&dir.join(format!("scene_{i:04}.ppm")), &scene.image)?;
        write_annotations(
            &dir.join(format!("scene_{i:04}.csv")),
            &scene.points,
            Some(&scene.box_sizes),
        )?;
    }
    Ok(())
}

fn load_model(dir: &Path) -> Result<Saanet> {
    load_checkpoint(dir).map_err(|e| match e {
        Error::Io(io) => Error::Contract(format!(
            "no checkpoint at {}: {io} (run `saanet train` first or pass --checkpoint)",
            dir.display()
        )),
        other => other,
    })
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Generate { common } => {
            let cfg = common.run_config()?;
            write_scene_set(&common.out.join("train"), &train_scenes(&cfg)?)?;
            write_scene_set(&common.out.join("eval"), &eval_scenes(&cfg)?)?;
            println!(
                "wrote {} train / {} eval scenes to {}",
                cfg.train_scenes,
                cfg.eval_scenes,
                common.out.display()
            );
        }
        Command::Train { common, checkpoint } => {
            let cfg = common.run_config()?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let model = Saanet::new(cfg.model.clone(), &mut rng)?;
            let scenes = train_scenes(&cfg)?;
            let report = train(&model, &scenes, &cfg.optim, cfg.epochs)?;
            fs::create_dir_all(&common.out)?;
            let ckpt = checkpoint_dir(&common.out, checkpoint);
            save_checkpoint(&model, &ckpt)?;
            fs::write(
                common.out.join("loss_curve.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            println!(
                "trained {} epochs over {} scenes; loss {:.6} -> {:.6}; checkpoint at {}",
                cfg.epochs,
                scenes.len(),
                report.initial_loss(),
                report.final_loss(),
                ckpt.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.run_config()?;
            let model = load_model(&checkpoint_dir(&common.out, checkpoint))?;
            let scenes = eval_scenes(&cfg)?;
            let report = evaluate(&model, &scenes)?;
            fs::create_dir_all(&common.out)?;
            fs::write(common.out.join("metrics.json"), report.metrics.to_json()?)?;
            for (i, d) in report.densities.iter().enumerate() {
                let path = common.out.join(format!("density_{i:04}.saat"));
                let mut w = BufWriter::new(fs::File::create(path)?);
                write_saat(&mut w, &d.values)?;
            }
            println!("{}", report.metrics.to_json()?);
        }
        Command::AnalyzeOffsets { common, checkpoint } => {
            let cfg = common.run_config()?;
            let model = load_model(&checkpoint_dir(&common.out, checkpoint))?;
            let scenes = eval_scenes(&cfg)?;
            let report = offset_scale_analysis(&model, &scenes)?;
            fs::create_dir_all(&common.out)?;
            fs::write(
                common.out.join("analysis.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            println!(
                "offset–scale slope {:.4} (p = {:.4}, n = {})",
                report.fit.slope, report.fit.p_value, report.fit.n
            );
        }
        Command::DumpAttn { common, checkpoint } => {
            let cfg = common.run_config()?;
            let model = load_model(&checkpoint_dir(&common.out, checkpoint))?;
            let scenes = eval_scenes(&cfg)?;
            let scene = scenes
                .first()
                .ok_or_else(|| Error::Contract("need at least one eval scene".into()))?;
            let tape = Tape::inference();
            let out = model.forward(&scene.image, &tape)?;
            let recal = out.recalibration.ok_or_else(|| {
                Error::Config("this model was built without the count decoder; nothing to dump".into())
            })?;
            fs::create_dir_all(&common.out)?;
            for (l, grid) in recal.level_grids(&out.pyramid, &tape)?.iter().enumerate() {
                let path = common.out.join(format!("attn_level{l}.saat"));
                let mut w = BufWriter::new(fs::File::create(path)?);
                write_saat(&mut w, grid)?;
            }
            println!("wrote attention grids for {} levels to {}", out.pyramid.n_levels(), common.out.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
