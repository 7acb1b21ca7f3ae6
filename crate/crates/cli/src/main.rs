use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::info;

use phieat::backbone::{BackboneConfig, ParamSet};
use phieat::config::RunConfig;
use phieat::evalsuite::{self, embed_dataset, embed_images, parse_protocols, plot, select_material, similarity_map};
use phieat::image::Image;
use phieat::synthgen::{generate_dataset, LoadedDataset, Manifest};
use phieat::trainer::{load_encoder, train, EncoderChoice, TrainOptions};
use phieat::verify::{run_checks, Fault};
use phieat::DType;

#[derive(Parser)]
#[command(name = "phieat", version, about = "Material-aware self-supervised features on procedural renders")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; omitted keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// One seed for data, training and evaluation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; relative data and checkpoint paths resolve against it.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Comma-separated `key=value` config overrides.
    #[arg(long, global = true)]
    overrides: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the dataset and selection scenes.
    Gen {
        #[arg(long, default_value = "data")]
        data: PathBuf,
    },
    /// Train student and teacher; writes checkpoints and metrics.jsonl.
    Train {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Continue from the last checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long, hide = true)]
        stop_after: Option<u64>,
    },
    /// Embed the dataset and write report.json.
    Eval {
        #[arg(long, default_value = "checkpoints/last.safetensors")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Any of knn, select, robust, segment.
        #[arg(long, default_value = "knn,select,robust,segment")]
        protocols: String,
        /// Write heatmaps, selection masks and segment maps under plots/.
        #[arg(long)]
        plot: bool,
        /// Evaluate a freshly initialized backbone instead of a checkpoint.
        #[arg(long)]
        random_init: bool,
        /// Use the student weights of a training checkpoint.
        #[arg(long)]
        student: bool,
    },
    /// Similarity heatmap and selection mask for one query pixel.
    Select {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        query_x: usize,
        #[arg(long)]
        query_y: usize,
        #[arg(long, default_value = "checkpoints/last.safetensors")]
        checkpoint: PathBuf,
        #[arg(long)]
        random_init: bool,
    },
    /// Gradient checks, Sinkhorn invariants, schedules and loss unit values.
    Verify {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

/// Bad invocation or configuration; exits with code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<phieat::Error>() {
        Some(phieat::Error::Config(_) | phieat::Error::InvalidArgument(_)) => 2,
        _ => 1,
    }
}

fn resolve(out: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(list) = &common.overrides {
        cfg.apply_overrides(list)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("PHIEAT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Usage(format!("PHIEAT_THREADS must be a positive integer, got `{raw}`")))?;
    // candle sizes its own worker pool from this variable
    std::env::set_var("RAYON_NUM_THREADS", n.to_string());
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

/// Loads the dataset at `dir`, rendering it first when no manifest exists.
fn ensure_dataset(cfg: &RunConfig, dir: &Path) -> anyhow::Result<LoadedDataset> {
    if !dir.join("manifest.json").exists() {
        info!("no dataset at {}, generating", dir.display());
        generate_dataset(&cfg.dataset, dir)?;
    }
    Ok(LoadedDataset::load(dir)?)
}

fn encoder(cfg: &RunConfig, checkpoint: &Path, random_init: bool, student: bool) -> anyhow::Result<(BackboneConfig, ParamSet)> {
    if random_init {
        let bb = cfg.train.backbone.clone();
        let params = ParamSet::init(&bb, cfg.train.seed, DType::F32)?;
        return Ok((bb, params));
    }
    if !checkpoint.exists() {
        return Err(Usage(format!("checkpoint not found: {}", checkpoint.display())).into());
    }
    let choice = if student { EncoderChoice::Student } else { EncoderChoice::Teacher };
    Ok(load_encoder(checkpoint, choice)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen(cfg: &RunConfig, out: &Path, data: &Path) -> anyhow::Result<()> {
    let manifest: Manifest = generate_dataset(&cfg.dataset, &resolve(out, data))?;
    println!(
        "{} samples, {} scenes, manifest {}",
        manifest.samples.len(),
        manifest.scenes.len(),
        manifest.hash()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path, data: &Path, resume: bool, stop_after: Option<u64>) -> anyhow::Result<()> {
    let data = ensure_dataset(cfg, &resolve(out, data))?;
    std::fs::write(out.join("config.toml"), cfg.to_flat_string()?)?;
    let options = TrainOptions { resume, stop_after };
    let outcome = train(&cfg.train, &data, out, &options)?;
    if let Some(last) = outcome.metrics.last() {
        println!(
            "step {} total {:.4} image {:.4} patch {:.4} koleo {:.4} contrast {:.4}",
            last.step, last.total, last.image, last.patch, last.koleo, last.contrast
        );
    }
    println!("checkpoint {}", outcome.checkpoint.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    data: &Path,
    protocols: &str,
    plot_figures: bool,
    random_init: bool,
    student: bool,
) -> anyhow::Result<()> {
    let protocols = parse_protocols(protocols)?;
    let (bb, params) = encoder(cfg, &resolve(out, checkpoint), random_init, student)?;
    let data = ensure_dataset(cfg, &resolve(out, data))?;
    let archive = embed_dataset(&data, &params, &bb)?;
    let plots = plot_figures.then(|| out.join("plots"));
    let report = evalsuite::evaluate(&archive, &protocols, &cfg.eval, plots.as_deref())?;
    write_json(&out.join("report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_select(cfg: &RunConfig, out: &Path, image: &Path, qx: usize, qy: usize, checkpoint: &Path, random_init: bool) -> anyhow::Result<()> {
    let (bb, params) = encoder(cfg, &resolve(out, checkpoint), random_init, false)?;
    let mut img = Image::load_png(image)?;
    if qx >= img.width || qy >= img.height {
        return Err(Usage(format!("query ({qx}, {qy}) outside {}x{} image", img.width, img.height)).into());
    }
    let (mut px, mut py) = (qx, qy);
    if img.width % bb.patch_size != 0 || img.height % bb.patch_size != 0 {
        px = qx * bb.image_size / img.width;
        py = qy * bb.image_size / img.height;
        img = img.resize(bb.image_size, bb.image_size);
    }
    let (_, patches, grid) = embed_images(&[&img], &params, &bb)?;
    let query = (py / bb.patch_size) * grid.1 + px / bb.patch_size;
    let map = similarity_map(&patches[0], bb.embed_dim, query)?;
    let mask = select_material(&map, cfg.eval.threshold);
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let heatmap_path = out.join(format!("{stem}.heatmap.png"));
    let mask_path = out.join(format!("{stem}.mask.png"));
    plot::save(&plot::heatmap_image(&map, grid, bb.patch_size, Some(query)), &heatmap_path)?;
    plot::save(&plot::mask_image(&mask, grid, bb.patch_size), &mask_path)?;
    let selected = mask.iter().filter(|&&m| m).count();
    println!(
        "query patch {query}, selected {selected}/{} patches, wrote {} and {}",
        mask.len(),
        heatmap_path.display(),
        mask_path.display()
    );
    Ok(())
}

fn cmd_verify(inject_fault: bool) -> anyhow::Result<()> {
    let fault = inject_fault.then_some(Fault::BrokenGradient);
    let results = run_checks(fault);
    for r in &results {
        println!(
            "{} {} {} ({:.1}s)",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail,
            r.seconds
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        anyhow::bail!("failed checks: {}", failed.join(", "))
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    set_threads()?;
    if let Command::Verify { inject_fault } = cli.command {
        return cmd_verify(inject_fault);
    }
    let cfg = load_config(&cli.common)?;
    let out = &cli.common.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cli.command {
        Command::Gen { data } => cmd_gen(&cfg, out, &data),
        Command::Train { data, resume, stop_after } => cmd_train(&cfg, out, &data, resume, stop_after),
        Command::Eval {
            checkpoint,
            data,
            protocols,
            plot,
            random_init,
            student,
        } => cmd_eval(&cfg, out, &checkpoint, &data, &protocols, plot, random_init, student),
        Command::Select {
            image,
            query_x,
            query_y,
            checkpoint,
            random_init,
        } => cmd_select(&cfg, out, &image, query_x, query_y, &checkpoint, random_init),
        Command::Verify { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_errors_map_to_usage_code() {
        let e: anyhow::Error = phieat::Error::Config("unknown config key `x`".into()).into();
        assert_eq!(exit_code(&e), 2);
        let e: anyhow::Error = Usage("checkpoint not found".into()).into();
        assert_eq!(exit_code(&e), 2);
        let e: anyhow::Error = phieat::Error::Numeric("nan".into()).into();
        assert_eq!(exit_code(&e), 1);
    }

    #[test]
    fn relative_paths_resolve_against_out() {
        assert_eq!(resolve(Path::new("o"), Path::new("data")), PathBuf::from("o/data"));
        assert_eq!(resolve(Path::new("o"), Path::new("/abs")), PathBuf::from("/abs"));
    }
}
