//! Command-line interface for relightable surfel scene reconstruction.
//!
//! Exit codes: 0 success, 2 usage errors (from argument parsing), 1 runtime
//! failures with a diagnostic naming the failing stage.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use relight_core::fixture::{self, FixtureOptions};
use relight_core::io::dataset::{load_dataset, LoadOptions};
use relight_core::io::{pfm, scene_io, write_png};
use relight_core::metrics::eval_metrics;
use relight_core::pipeline::{self, azimuth_rotation, RenderBuffers, ShadingModel};
use relight_core::rasterizer::RenderOptions;
use relight_core::scene::{init_from_points, init_random_in_bbox, mlp_forward, LightModel};
use relight_core::sh::{project_envmap, EnvLight};
use relight_core::trainer::{camera_extent, checkpoint, views_from_dataset, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "relight", version, about = "Relightable surfel scene reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a scene from a dataset directory.
    Train {
        /// Dataset directory (cameras.json, split.json, images, masks).
        #[arg(long)]
        dataset: PathBuf,
        /// JSON config mirroring the training configuration; absent fields
        /// take defaults, all of which are echoed at startup.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the checkpoint and the training log.
        #[arg(long)]
        out: PathBuf,
        /// Divide all iteration counts (desk-scale runs).
        #[arg(long)]
        divisor: Option<u64>,
        /// Resume from an existing checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Invert the nonzero-=-marked mask convention.
        #[arg(long, default_value_t = false)]
        invert_masks: bool,
    },
    /// Render a trained scene from a dataset camera under a trained light.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory providing the cameras.
        #[arg(long)]
        dataset: PathBuf,
        /// Camera index into cameras.json.
        #[arg(long)]
        camera_index: usize,
        /// Training-image index whose learned light to use (position in
        /// the train split).
        #[arg(long)]
        image_index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render under an arbitrary environment, with optional rotation.
    Relight {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        camera_index: usize,
        /// Equirectangular PFM environment map to project and use.
        #[arg(long, conflicts_with = "image_index")]
        envmap: Option<PathBuf>,
        /// Trained light index (position in the train split).
        #[arg(long)]
        image_index: Option<usize>,
        /// Rotate the environment about the up axis, degrees.
        #[arg(long, default_value_t = 0.0)]
        rotate_deg: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the shadow map for a scene, light, and camera.
    Shadow {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        camera_index: usize,
        #[arg(long, conflicts_with = "image_index")]
        envmap: Option<PathBuf>,
        #[arg(long)]
        image_index: Option<usize>,
        /// Output PFM (single channel); a PNG is written alongside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked metrics over directories of rendered and target images.
    Eval {
        #[arg(long)]
        renders: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        /// Optional JSON output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Project an equirectangular PFM environment map onto SH coefficients.
    ProjectEnv {
        #[arg(long)]
        envmap: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a trained light as an equirectangular PFM.
    ExportEnv {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Trained light index (position in the train split).
        #[arg(long)]
        image_index: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Divide by pi for the engine-scale convention.
        #[arg(long, default_value_t = false)]
        divide_pi: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic fixture dataset.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        views: usize,
        #[arg(long, default_value_t = 64)]
        size: u32,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            dataset,
            config,
            out,
            divisor,
            resume,
            invert_masks,
        } => train(dataset, config, out, divisor, resume, invert_masks),
        Command::Render {
            checkpoint,
            dataset,
            camera_index,
            image_index,
            out,
        } => render(checkpoint, dataset, camera_index, image_index, out),
        Command::Relight {
            checkpoint,
            dataset,
            camera_index,
            envmap,
            image_index,
            rotate_deg,
            out,
        } => relight_cmd(
            checkpoint,
            dataset,
            camera_index,
            envmap,
            image_index,
            rotate_deg,
            out,
        ),
        Command::Shadow {
            checkpoint,
            dataset,
            camera_index,
            envmap,
            image_index,
            out,
        } => shadow(checkpoint, dataset, camera_index, envmap, image_index, out),
        Command::Eval {
            renders,
            targets,
            masks,
            out,
        } => eval(renders, targets, masks, out),
        Command::ProjectEnv { envmap, out } => project_env(envmap, out),
        Command::ExportEnv {
            checkpoint,
            image_index,
            width,
            height,
            divide_pi,
            out,
        } => export_env(checkpoint, image_index, width, height, divide_pi, out),
        Command::Fixtures {
            out,
            seed,
            views,
            size,
        } => {
            let opts = FixtureOptions {
                seed,
                views,
                size,
                ..FixtureOptions::default()
            };
            fixture::generate(&out, &opts).context("fixture generation")?;
            println!("fixture dataset written to {}", out.display());
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    match path {
        Some(p) => {
            let file = File::open(p).with_context(|| format!("open config {}", p.display()))?;
            Ok(serde_json::from_reader(file).context("parse config")?)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn train(
    dataset_dir: PathBuf,
    config_path: Option<PathBuf>,
    out: PathBuf,
    divisor: Option<u64>,
    resume: Option<PathBuf>,
    invert_masks: bool,
) -> anyhow::Result<()> {
    let mut config = load_config(config_path.as_deref()).context("config")?;
    if let Some(d) = divisor {
        config.desk_scale_divisor = d;
    }
    let ds = load_dataset(&dataset_dir, &LoadOptions { invert_masks }).context("dataset")?;
    let views = views_from_dataset(&ds);
    println!(
        "dataset: {} views ({} train / {} test), scene extent {:.3}",
        ds.views.len(),
        ds.train.len(),
        ds.test.len(),
        config
            .scene_extent
            .unwrap_or_else(|| camera_extent(&views)),
    );
    // Every default (published or not) is visible up front.
    println!(
        "config: {}",
        serde_json::to_string(&config).context("echo config")?
    );

    let mut trainer = match resume {
        Some(dir) => checkpoint::load_checkpoint(&dir, views).context("resume checkpoint")?,
        None => {
            let surfels = match &ds.points {
                Some(points) => init_from_points(points, config.seed),
                None => {
                    let extent = camera_extent(&views);
                    init_random_in_bbox(
                        nalgebra::Vector3::new(-extent, -extent, -extent) * 0.5,
                        nalgebra::Vector3::new(extent, extent, extent) * 0.5,
                        2000,
                        config.seed,
                    )
                }
            };
            println!("initialized {} surfels", surfels.len());
            let model = LightModel::init(ds.train.len(), config.seed);
            Trainer::new(surfels, model, views, config).context("trainer init")?
        }
    };

    std::fs::create_dir_all(&out).context("create output dir")?;
    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).context("create log")?);
    let total = trainer.config.schedule().total_iters;
    let t0 = std::time::Instant::now();
    while trainer.iter < total {
        let report = trainer.step().context("training step")?;
        serde_json::to_writer(&mut log, &report)?;
        writeln!(log)?;
        if report.step % 500 == 0 || report.step + 1 == total {
            println!(
                "step {:>6}/{} stage {} surfels {} total {:.5} ({:.1?})",
                report.step,
                total,
                report.stage,
                report.surfel_count,
                report.total,
                t0.elapsed()
            );
        }
    }
    log.flush()?;
    checkpoint::save_checkpoint(&out, &trainer).context("save checkpoint")?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn load_scene_and_model(
    dir: &Path,
) -> anyhow::Result<(Vec<relight_core::scene::Surfel>, LightModel)> {
    let surfels = scene_io::load_scene(dir).context("load scene")?;
    let model = scene_io::load_light_model(dir).context("load light model")?;
    Ok((surfels, model))
}

fn camera_at(dataset_dir: &Path, index: usize) -> anyhow::Result<relight_core::scene::Camera> {
    let ds = load_dataset(dataset_dir, &LoadOptions::default()).context("dataset")?;
    let view = ds
        .views
        .get(index)
        .with_context(|| format!("camera index {index} out of range"))?;
    Ok(view.camera.clone())
}

fn write_buffers(dir: &Path, prefix: &str, buffers: &RenderBuffers) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    pfm::write_pfm(&dir.join(format!("{prefix}_color.pfm")), &buffers.color)?;
    pfm::write_pfm(&dir.join(format!("{prefix}_albedo.pfm")), &buffers.albedo)?;
    pfm::write_pfm(&dir.join(format!("{prefix}_normal.pfm")), &buffers.normal)?;
    pfm::write_pfm(&dir.join(format!("{prefix}_depth.pfm")), &buffers.depth)?;
    pfm::write_pfm(
        &dir.join(format!("{prefix}_irradiance.pfm")),
        &buffers.irradiance,
    )?;
    write_png(&dir.join(format!("{prefix}_color.png")), &buffers.color)?;
    Ok(())
}

fn render(
    checkpoint: PathBuf,
    dataset: PathBuf,
    camera_index: usize,
    image_index: usize,
    out: PathBuf,
) -> anyhow::Result<()> {
    let (surfels, model) = load_scene_and_model(&checkpoint)?;
    let cam = camera_at(&dataset, camera_index)?;
    let light = mlp_forward(&model, image_index).context("light lookup")?;
    let buffers = pipeline::render_scene(
        &surfels,
        &light,
        &cam,
        &RenderOptions::default(),
        ShadingModel::Shadowed,
    )
    .context("render")?;
    write_buffers(&out, &format!("render_{camera_index:03}"), &buffers)?;
    println!("buffers written to {}", out.display());
    Ok(())
}

fn resolve_light(
    model: &LightModel,
    envmap: Option<&Path>,
    image_index: Option<usize>,
) -> anyhow::Result<EnvLight> {
    match (envmap, image_index) {
        (Some(path), None) => {
            let map = pfm::read_pfm(path).context("read envmap")?;
            Ok(project_envmap(&map).context("project envmap")?)
        }
        (None, Some(idx)) => Ok(mlp_forward(model, idx).context("light lookup")?),
        _ => bail!("usage: exactly one of --envmap or --image-index is required"),
    }
}

fn relight_cmd(
    checkpoint: PathBuf,
    dataset: PathBuf,
    camera_index: usize,
    envmap: Option<PathBuf>,
    image_index: Option<usize>,
    rotate_deg: f64,
    out: PathBuf,
) -> anyhow::Result<()> {
    let (surfels, model) = load_scene_and_model(&checkpoint)?;
    let cam = camera_at(&dataset, camera_index)?;
    let light = resolve_light(&model, envmap.as_deref(), image_index)?;
    let rotation = (rotate_deg != 0.0).then(|| azimuth_rotation(rotate_deg));
    let result = pipeline::relight(
        &surfels,
        &light,
        rotation.as_ref(),
        &cam,
        &RenderOptions::default(),
    )
    .context("relight")?;
    write_buffers(&out, &format!("relight_{camera_index:03}"), &result.buffers)?;
    pfm::write_pfm(
        &out.join(format!("relight_{camera_index:03}_shadow.pfm")),
        &result.shadow_map,
    )?;
    write_png(
        &out.join(format!("relight_{camera_index:03}_shadow.png")),
        &result.shadow_map,
    )?;
    println!("relit buffers written to {}", out.display());
    Ok(())
}

fn shadow(
    checkpoint: PathBuf,
    dataset: PathBuf,
    camera_index: usize,
    envmap: Option<PathBuf>,
    image_index: Option<usize>,
    out: PathBuf,
) -> anyhow::Result<()> {
    let (surfels, model) = load_scene_and_model(&checkpoint)?;
    let cam = camera_at(&dataset, camera_index)?;
    let light = resolve_light(&model, envmap.as_deref(), image_index)?;
    let result = pipeline::relight(&surfels, &light, None, &cam, &RenderOptions::default())
        .context("shadow render")?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    pfm::write_pfm(&out, &result.shadow_map).context("write shadow map")?;
    write_png(&out.with_extension("png"), &result.shadow_map)?;
    println!("shadow map written to {}", out.display());
    Ok(())
}

fn eval(
    renders: PathBuf,
    targets: PathBuf,
    masks: PathBuf,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut names: Vec<String> = std::fs::read_dir(&renders)
        .context("read renders dir")?
        .filter_map(|e| e.ok())
        .filter(|e| {
            matches!(
                e.path().extension().and_then(|x| x.to_str()),
                Some("pfm") | Some("png")
            )
        })
        .map(|e| e.file_name().to_string_lossy().to_string())
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no renderable images found in {}", renders.display());
    }

    #[derive(serde::Serialize)]
    struct Row {
        name: String,
        mse: String,
        mae: String,
        psnr: String,
        ssim: String,
    }
    println!(
        "{:<30} {:>12} {:>12} {:>12} {:>12}",
        "image", "MSE", "MAE", "PSNR", "SSIM"
    );
    // Parallel over images; `names` is sorted so the collected rows (and
    // the printed table) keep a deterministic order.
    let rows = names
        .par_iter()
        .map(|name| -> anyhow::Result<Row> {
            let rendered = relight_core::io::read_image(&renders.join(name))
                .with_context(|| format!("render {name}"))?;
            let target_path =
                find_matching(&targets, name).with_context(|| format!("target for {name}"))?;
            let target = relight_core::io::read_image(&target_path)?;
            let mask_path =
                find_matching(&masks, name).with_context(|| format!("mask for {name}"))?;
            let mask = relight_core::io::read_mask(&mask_path, false)?;
            let report = eval_metrics(&rendered, &target, &mask)
                .with_context(|| format!("metrics for {name}"))?;
            // Fixed 6-decimal formatting keeps the output byte-stable.
            Ok(Row {
                name: name.clone(),
                mse: format!("{:.6}", report.mse),
                mae: format!("{:.6}", report.mae),
                psnr: format!("{:.6}", report.psnr),
                ssim: format!("{:.6}", report.ssim),
            })
        })
        .collect::<anyhow::Result<Vec<Row>>>()?;
    for row in &rows {
        println!(
            "{:<30} {:>12} {:>12} {:>12} {:>12}",
            row.name, row.mse, row.mae, row.psnr, row.ssim
        );
    }
    if let Some(path) = out {
        serde_json::to_writer_pretty(
            BufWriter::new(File::create(&path).context("create eval output")?),
            &rows,
        )?;
        println!("metrics table written to {}", path.display());
    }
    Ok(())
}

/// Match a render file to its target/mask by stem, allowing extension swaps
/// and a seg_ prefix for fixture-style mask names.
fn find_matching(dir: &Path, name: &str) -> anyhow::Result<PathBuf> {
    let stem = Path::new(name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(name);
    for candidate_stem in [stem.to_string(), format!("seg_{stem}")] {
        for ext in ["pfm", "png"] {
            let candidate = dir.join(format!("{candidate_stem}.{ext}"));
            if candidate.exists() {
                return Ok(candidate);
            }
        }
    }
    bail!("no file matching {stem} in {}", dir.display())
}

fn project_env(envmap: PathBuf, out: PathBuf) -> anyhow::Result<()> {
    let map = pfm::read_pfm(&envmap).context("read envmap")?;
    let light = project_envmap(&map).context("project")?;
    #[derive(serde::Serialize)]
    struct Out {
        format_version: u32,
        sh_degree: u32,
        /// 3 channels x 9 coefficients, channel-major.
        coeffs: Vec<f64>,
    }
    let payload = Out {
        format_version: 1,
        sh_degree: 2,
        coeffs: light.to_flat().to_vec(),
    };
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    serde_json::to_writer_pretty(
        BufWriter::new(File::create(&out).context("create output")?),
        &payload,
    )?;
    println!("SH coefficients written to {}", out.display());
    Ok(())
}

fn export_env(
    checkpoint: PathBuf,
    image_index: usize,
    width: usize,
    height: usize,
    divide_pi: bool,
    out: PathBuf,
) -> anyhow::Result<()> {
    let model = scene_io::load_light_model(&checkpoint).context("load light model")?;
    let mut light = mlp_forward(&model, image_index).context("light lookup")?;
    // Training folds the diffuse 1/pi into the learned light scale; this
    // flag emits the engine-scale convention instead.
    if divide_pi {
        light = light.scaled(1.0 / std::f64::consts::PI);
    }
    let (map, clamped) = light.render_equirect(width, height);
    if clamped > 0 {
        println!("clamped {clamped} negative samples to zero at export");
    }
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    pfm::write_pfm(&out, &map).context("write envmap")?;
    println!("environment map written to {}", out.display());
    Ok(())
}
