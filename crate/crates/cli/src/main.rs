//! `bevnext` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bevnext_core::bvnx;
use bevnext_core::depth_crf::{map_labeling, modulate, patch_colors};
use bevnext_core::harness::bench::{time_stage, BenchFixture, BenchStage};
use bevnext_core::harness::pipeline::upscale;
use bevnext_core::harness::{gen_scene, load_weights, run_pipeline, save_weights, DumpOptions, Model, Scene, SceneConfig};
use bevnext_core::{DepthBins, Error, Result, RgbImage};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bevnext", version, about = "Desk-scale multi-camera BEV 3D detection pipeline")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-camera scene.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a freshly initialized weight bundle for a config.
    InitWeights {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the full pipeline on a scene and write detections.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write a color-mapped depth argmax image per camera.
        #[arg(long)]
        dump_depth: bool,
        /// Write the BEV heatmap (max over classes).
        #[arg(long)]
        dump_heatmap: bool,
    },
    /// CRF-modulate depth logits for one image and write the argmax raster.
    CrfDemo {
        #[arg(long)]
        image: PathBuf,
        /// `[K, H', W']` logits tensor.
        #[arg(long)]
        logits: PathBuf,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
        /// Kernel weights, bandwidths and depth range come from here.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Time pipeline stages on a generated scene.
    Bench {
        /// crf, pool, fusion or decoder; all stages when omitted.
        #[arg(long)]
        stage: Option<String>,
        #[arg(long, default_value_t = 10)]
        repeat: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<SceneConfig> {
    match path {
        Some(p) => SceneConfig::load(p),
        None => Ok(SceneConfig::default()),
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let scene = gen_scene(&cfg)?;
            scene.save(&out)?;
            std::fs::write(out.join("scene.cfg"), cfg.to_text())?;
            let objects = scene.current().boxes.len();
            println!("wrote {} frames x {} cameras, {objects} objects, to {}", scene.frames.len(), scene.cameras(), out.display());
        }
        Command::InitWeights { config, out, seed } => {
            let cfg = load_config(config.as_deref())?;
            let model = Model::init(&cfg, seed.unwrap_or(cfg.seed));
            save_weights(&model, &out)?;
            println!("wrote {} tensors to {}", model.to_bundle().len(), out.display());
        }
        Command::Run { config, weights, scene, out, dump_depth, dump_heatmap } => {
            let cfg = load_config(config.as_deref())?;
            let model = load_weights(&weights, &cfg)?;
            let scene = Scene::load(&scene)?;
            let output = run_pipeline(&scene, &cfg, &model)?;
            let paths = output.write(&out, &cfg, DumpOptions { depth: dump_depth, heatmap: dump_heatmap })?;
            println!("detections: {}", output.detections.len());
            println!("coverage: {:.6}", output.coverage);
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Command::CrfDemo { image, logits, iters, out, config } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.crf.iterations = iters;
            cfg.crf.validate()?;
            let image = RgbImage::read_ppm(&image)?;
            let logits = bvnx::read_tensor(&logits)?;
            let (k, h, w) = logits.chw()?;
            if image.width % w != 0 || image.width / w != image.height / h.max(1) || image.height % h != 0 {
                return Err(Error::shape("image size per logit cell", image.width / w * w, image.width));
            }
            let stride = image.width / w;
            let bins = DepthBins::uniform(k, cfg.depth_min, cfg.depth_max)?;
            let colors = patch_colors(&image, stride)?;
            let q = modulate(&logits, &colors, &bins, &cfg.crf)?;
            upscale(&map_labeling(&q).to_image(k), stride).write_ppm(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Bench { stage, repeat, config } => {
            let cfg = load_config(config.as_deref())?;
            let stages = match stage {
                Some(s) => vec![s.parse::<BenchStage>()?],
                None => BenchStage::ALL.to_vec(),
            };
            if repeat == 0 {
                return Err(Error::Config("repeat must be at least 1".into()));
            }
            let fixture = BenchFixture::new(&cfg)?;
            for st in stages {
                println!("{}", time_stage(&fixture, st, repeat)?);
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        2
    } else if e.is_shape() {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.threads {
        Some(0) => Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(cli.command)),
            Err(e) => Err(Error::Invalid(format!("cannot start thread pool: {e}"))),
        },
        None => execute(cli.command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
