use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use featsplat::diffcore::Tensor;
use featsplat::error::{Error, Result};
use featsplat::optim::{load_checkpoint, save_checkpoint, train, MetricsRow, Model, TrainConfig};
use featsplat::workbench::config::apply_config_text;
use featsplat::workbench::image_io::write_gray_png;
use featsplat::workbench::{
    evaluate_ground_truth, evaluate_model, gen_scene, gradient_suite, interpolate_pose, load_cameras, load_config,
    load_dataset, save_dataset, set_key, write_image, RigSpec,
};

const CHECKPOINT: &str = "model.ckpt";

#[derive(Parser)]
#[command(name = "featsplat", version, about = "Feature-aware Gaussian splatting from a few views")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory
    Gen(GenArgs),
    /// Train on a dataset, writing a checkpoint and metrics.csv
    Train(TrainArgs),
    /// Render one view of a trained model
    Render(RenderArgs),
    /// Score held-out views and write metrics.json
    Eval(EvalArgs),
    /// Run the finite-difference gradient checks
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    gaussians: usize,
    #[arg(long, default_value_t = 12)]
    views: usize,
    #[arg(long, default_value_t = 3)]
    train_views: usize,
    /// Image width and height in pixels
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory (default: <data>/run)
    #[arg(long)]
    out: Option<PathBuf>,
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses the global pool
    #[arg(long)]
    threads: Option<usize>,
    /// features or sh
    #[arg(long)]
    color: Option<String>,
    /// Attention neighbors per point
    #[arg(long)]
    neighbors: Option<usize>,
    /// variance or mean
    #[arg(long)]
    fusion: Option<String>,
    /// Disable neighbor interaction (same as --neighbors 0)
    #[arg(long)]
    no_interaction: bool,
    #[arg(long)]
    no_densify: bool,
    #[arg(long)]
    lambda_depth: Option<f64>,
    #[arg(long)]
    lambda_smooth: Option<f64>,
    /// Any config key, as key=value; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print a progress line every this many iterations
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct RenderArgs {
    /// Checkpoint file or training output directory
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset whose cameras.json supplies the poses
    #[arg(long)]
    data: PathBuf,
    /// Camera index in cameras.json
    #[arg(long, conflicts_with = "sweep", required_unless_present = "sweep")]
    camera: Option<usize>,
    /// Position in [0, 1] along the camera sequence
    #[arg(long)]
    sweep: Option<f64>,
    /// Output image (.png or .ppm)
    #[arg(long)]
    out: PathBuf,
    /// Output depth PNG (default: <out stem>_depth.png)
    #[arg(long)]
    depth: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file or training output directory
    #[arg(long, required_unless_present = "ground_truth")]
    checkpoint: Option<PathBuf>,
    /// Score the dataset's ground-truth scene instead of a model
    #[arg(long, conflicts_with = "checkpoint")]
    ground_truth: bool,
    /// Also score the training views
    #[arg(long)]
    include_train: bool,
    /// Report path (default: next to the checkpoint, or in the dataset)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT)
    } else {
        p.to_path_buf()
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let rig = RigSpec { views: a.views, train_views: a.train_views, size: a.size, ..RigSpec::default() };
    let (scene, data) = gen_scene(a.seed, a.gaussians, &rig)?;
    save_dataset(&a.out, &data, Some((&scene, &rig)))?;
    println!(
        "wrote {} views ({} train, {} test) and {} initial points to {}",
        data.views.len(),
        data.train.len(),
        data.test.len(),
        data.init_points.len(),
        a.out.display()
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        load_config(path, &mut cfg)?;
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    let mut push = |k: &'static str, v: Option<String>| {
        if let Some(v) = v {
            flags.push((k, v));
        }
    };
    push("iters", a.iters.map(|v| v.to_string()));
    push("seed", a.seed.map(|v| v.to_string()));
    push("threads", a.threads.map(|v| v.to_string()));
    push("color", a.color.clone());
    push("neighbors", a.neighbors.map(|v| v.to_string()));
    push("fusion", a.fusion.clone());
    push("lambda_depth", a.lambda_depth.map(|v| v.to_string()));
    push("lambda_smooth", a.lambda_smooth.map(|v| v.to_string()));
    push("neighbors", a.no_interaction.then(|| "0".to_string()));
    push("densify", a.no_densify.then(|| "false".to_string()));
    for (k, v) in flags {
        set_key(&mut cfg, k, &v)?;
    }
    let overrides: String = a.set.iter().map(|s| format!("{s}\n")).collect();
    apply_config_text(&mut cfg, &overrides, Path::new("--set"))?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let (data, _) = load_dataset(&a.data)?;
    let out = a.out.clone().unwrap_or_else(|| a.data.join("run"));
    fs::create_dir_all(&out)?;
    let mut csv = fs::File::create(out.join("metrics.csv"))?;
    writeln!(csv, "{}", MetricsRow::CSV_HEADER)?;
    let every = a.log_every.max(1);
    let iters = cfg.iters;
    let model = train(cfg.clone(), data.train_data::<f32>(), |row| {
        writeln!(csv, "{}", row.csv())?;
        if row.iter % every == 0 || row.iter == iters {
            eprintln!(
                "iter {:>6}  loss {:.5}  train psnr {:.2}  points {}",
                row.iter, row.loss.total, row.train_psnr, row.points
            );
        }
        Ok(())
    })?;
    csv.flush()?;
    let ckpt = out.join(CHECKPOINT);
    save_checkpoint(&ckpt, &model, &cfg)?;
    println!("wrote {} and {}", ckpt.display(), out.join("metrics.csv").display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model<f32>, TrainConfig)> {
    load_checkpoint(&checkpoint_path(path))
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let (model, cfg) = load_model(&a.checkpoint)?;
    let cams = load_cameras(&a.data.join("cameras.json"))?;
    let cam = match (a.camera, a.sweep) {
        (Some(i), _) => cams
            .get(i)
            .cloned()
            .ok_or_else(|| Error::Config(format!("camera {i} out of range ({} cameras)", cams.len())))?,
        (None, Some(t)) => interpolate_pose(&cams, t)?,
        (None, None) => return Err(Error::Config("pass --camera or --sweep".into())),
    };
    let r = model.render(&cam, &cfg.raster)?;
    let (h, w) = (r.height, r.width);
    let img = Tensor::new(&[h, w, 3], r.image.iter().map(|&v| v as f64).collect())?;
    write_image(&a.out, &img)?;

    // expected depth where the splats cover the pixel, normalized to the
    // visible range; uncovered pixels stay black
    let depth: Vec<f64> = r
        .depth
        .iter()
        .zip(&r.weight)
        .map(|(&d, &wt)| if wt > 1e-3 { d as f64 / wt as f64 } else { f64::NAN })
        .collect();
    let (lo, hi) = depth.iter().filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let gray: Vec<f64> = depth.iter().map(|&v| if v.is_finite() { 1.0 - (v - lo) / span } else { 0.0 }).collect();
    let depth_out = a.depth.clone().unwrap_or_else(|| {
        let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "render".into());
        a.out.with_file_name(format!("{stem}_depth.png"))
    });
    write_gray_png(&depth_out, &Tensor::new(&[h, w], gray)?)?;
    println!("wrote {} and {}", a.out.display(), depth_out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (data, meta) = load_dataset(&a.data)?;
    let mut views = data.test.clone();
    if a.include_train {
        views.extend(&data.train);
        views.sort_unstable();
    }
    let (report, default_out) = if a.ground_truth {
        let gt = meta
            .ground_truth
            .as_ref()
            .ok_or_else(|| Error::Scene(format!("{} has no ground-truth scene", a.data.display())))?;
        let cams = data.views.iter().map(|v| v.camera.clone()).collect();
        let scene = gt.to_scene(cams, meta.seed.unwrap_or(0))?;
        (evaluate_ground_truth(&scene, &data, &views)?, a.data.join("metrics.json"))
    } else {
        let path = checkpoint_path(a.checkpoint.as_deref().expect("clap requires a checkpoint"));
        let (model, cfg) = load_model(&path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (evaluate_model(&model, &cfg.raster, &data, &views)?, dir.join("metrics.json"))
    };
    print!("{}", report.table());
    let out = a.out.unwrap_or(default_out);
    report.write(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let results = gradient_suite(a.seed)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Render(a) => cmd_render(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
