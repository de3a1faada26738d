use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dasnet_core::config::RunConfig;
use dasnet_core::data::{detection_dump_json, load_dataset, read_detection_dump, read_manifest, save_dataset, synth_dataset, DepthImage};
use dasnet_core::decode::kmeans_anchors;
use dasnet_core::metrics::evaluate;
use dasnet_core::pointcloud::{colorize, deproject, overlay, write_ply, BranchColoring};
use dasnet_core::selfcheck::gradcheck_suite;
use dasnet_core::train::fit;
use dasnet_core::{DaSNet, Error, Intrinsics, ParamStore, Prediction};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "dasnet", version, about = "Fruit detection, instance segmentation and branch segmentation")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training, model and synthesis seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model weights file.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a manifest, writing checkpoints and a report.
    Train(TrainArgs),
    /// Score predictions against an annotated manifest.
    Eval(EvalArgs),
    /// Write detection dumps and overlay images.
    Infer(InferArgs),
    /// Generate a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Fuse an RGB-D frame with predictions into a colored PLY.
    Pointcloud(PointcloudArgs),
    /// Finite-difference check of every operator and the full model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Replace the configured anchors with k-means priors of the training boxes.
    #[arg(long)]
    fit_anchors: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory of `<image stem>.json` dumps to score instead of running the model.
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    min_f1: Option<f64>,
    #[arg(long)]
    min_instance_miou: Option<f64>,
    #[arg(long)]
    min_branch_miou: Option<f64>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Annotated manifest whose images are processed.
    #[arg(long, conflicts_with = "images")]
    data: Option<PathBuf>,
    /// Image files.
    images: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    count: usize,
}

#[derive(Args, Debug)]
struct PointcloudArgs {
    #[arg(long)]
    rgb: PathBuf,
    /// 16-bit depth image aligned with the RGB frame.
    #[arg(long)]
    depth: PathBuf,
    /// Detection dump to use instead of running the model.
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Keep the camera color of branch points instead of the unified brown.
    #[arg(long)]
    branch_original_color: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random parameters probed in the full-model check.
    #[arg(long, default_value_t = 120)]
    probes: usize,
}

/// Failure with the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl ToString) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.to_string(),
        }
    }

    fn check(message: impl ToString) -> Self {
        Self {
            code: EXIT_CHECK,
            message: message.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { EXIT_CONFIG } else { EXIT_RUNTIME };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}

fn load_config(cli: &Cli) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(Failure::config)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.model.seed = seed;
    }
    cfg.validate().map_err(Failure::config)?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &str) -> std::result::Result<PathBuf, Failure> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn load_model(cli: &Cli, cfg: &RunConfig) -> std::result::Result<(DaSNet, ParamStore), Failure> {
    let path = cli.weights.as_ref().ok_or_else(|| Failure::config("--weights is required"))?;
    let (model, mut store) = DaSNet::build(&cfg.model)?;
    store.load(path)?;
    Ok((model, store))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

fn run(cli: Cli) -> Outcome {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Train(a) => train(&cli, cfg, a),
        Command::Eval(a) => eval(&cli, &cfg, a),
        Command::Infer(a) => infer(&cli, &cfg, a),
        Command::Synth(a) => synth(&cli, &cfg, a),
        Command::Pointcloud(a) => pointcloud(&cli, &cfg, a),
        Command::Gradcheck(a) => gradcheck(&cfg, a, cli.seed.unwrap_or(0)),
    }
}

fn train(cli: &Cli, mut cfg: RunConfig, a: &TrainArgs) -> Outcome {
    let train = load_dataset(&a.train)?;
    let val = match &a.val {
        Some(p) => load_dataset(p)?,
        None => Vec::new(),
    };
    if a.fit_anchors {
        let sizes: Vec<(f64, f64)> = train
            .iter()
            .flat_map(|i| i.instances.iter().map(|x| (x.bbox.w, x.bbox.h)))
            .collect();
        cfg.model.anchors = kmeans_anchors(&sizes, 6, 100)?;
        log::info!("fitted anchors {:?}", cfg.model.anchors);
    }
    let dir = out_dir(cli, "runs/train")?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    let (model, mut store) = DaSNet::build(&cfg.model)?;
    if let Some(w) = &cli.weights {
        store.load(w)?;
    }
    let report = fit(&model, &mut store, &train, &val, &cfg, Some(&dir))?;
    store.save(&dir.join("model.weights"))?;
    write(&dir.join("report.json"), &report.to_json())?;
    println!("parameters: {}", report.parameter_count);
    println!("weights bytes: {}", report.weights_bytes);
    if let Some(best) = &report.best_validation {
        println!("best epoch: {}", report.best_epoch.unwrap_or(0));
        print!("{}", best.to_table());
    }
    Ok(())
}

fn eval(cli: &Cli, cfg: &RunConfig, a: &EvalArgs) -> Outcome {
    let gts = load_dataset(&a.data)?;
    let preds: Vec<Prediction> = match &a.detections {
        Some(dir) => read_manifest(&a.data)?
            .iter()
            .map(|rec| read_detection_dump(&dir.join(format!("{}.json", stem(&rec.image)))))
            .collect::<dasnet_core::Result<_>>()?,
        None => {
            let (model, store) = load_model(cli, cfg)?;
            let images: Vec<_> = gts.iter().map(|g| &g.rgb).collect();
            model.predict_images(&store, &images, &cfg.eval, cfg.train.batch)?
        }
    };
    let report = evaluate(&preds, &gts, cfg.eval.match_iou)?;
    print!("{}", report.to_table());
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("eval.json"), &report.to_json())?;
    }
    let checks = [
        ("F1", report.f1, a.min_f1),
        ("instance MIoU", report.instance_miou, a.min_instance_miou),
        ("branch MIoU", report.semantic_miou_branch, a.min_branch_miou),
    ];
    for (name, value, min) in checks {
        if let Some(min) = min {
            if value < min {
                return Err(Failure::check(format!("{name} {value:.4} below {min}")));
            }
        }
    }
    Ok(())
}

fn infer(cli: &Cli, cfg: &RunConfig, a: &InferArgs) -> Outcome {
    let paths: Vec<PathBuf> = match &a.data {
        Some(manifest) => {
            let base = manifest.parent().unwrap_or(Path::new("."));
            read_manifest(manifest)?.iter().map(|r| base.join(&r.image)).collect()
        }
        None if a.images.is_empty() => return Err(Failure::config("give image paths or --data")),
        None => a.images.clone(),
    };
    let (model, store) = load_model(cli, cfg)?;
    let dir = out_dir(cli, "runs/infer")?;
    for path in &paths {
        let rgb = image::open(path)
            .map_err(|e| Error::Image {
                path: path.clone(),
                source: e,
            })?
            .into_rgb8();
        let pred = model.predict_images(&store, &[&rgb], &cfg.eval, 1)?.remove(0);
        let name = stem(path);
        write(&dir.join(format!("{name}.json")), &detection_dump_json(&pred))?;
        let shown = overlay(&rgb, &pred.detections, &pred.branch_map, 0.5);
        let png = dir.join(format!("{name}_overlay.png"));
        shown.save(&png).map_err(|e| Error::Image {
            path: png.clone(),
            source: e,
        })?;
        log::info!("{}: {} detections", path.display(), pred.detections.len());
    }
    Ok(())
}

fn synth(cli: &Cli, cfg: &RunConfig, a: &SynthArgs) -> Outcome {
    let dir = out_dir(cli, "runs/synth")?;
    let images = synth_dataset(cfg.train.seed, a.count, &cfg.synth);
    let manifest = save_dataset(&dir, &images)?;
    println!("{}", manifest.display());
    Ok(())
}

fn pointcloud(cli: &Cli, cfg: &RunConfig, a: &PointcloudArgs) -> Outcome {
    if a.stride == 0 {
        return Err(Failure::config("--stride must be positive"));
    }
    let rgb = image::open(&a.rgb)
        .map_err(|e| Error::Image {
            path: a.rgb.clone(),
            source: e,
        })?
        .into_rgb8();
    let depth: DepthImage = image::open(&a.depth)
        .map_err(|e| Error::Image {
            path: a.depth.clone(),
            source: e,
        })?
        .into_luma16();
    if depth.dimensions() != rgb.dimensions() {
        return Err(Failure::config("depth and RGB frames differ in size"));
    }
    let pred = match &a.detections {
        Some(p) => read_detection_dump(p)?.rescaled(rgb.width() as usize, rgb.height() as usize),
        None => {
            let (model, store) = load_model(cli, cfg)?;
            model.predict_images(&store, &[&rgb], &cfg.eval, 1)?.remove(0)
        }
    };
    let coloring = if a.branch_original_color {
        BranchColoring::Original
    } else {
        BranchColoring::Unified
    };
    let points = deproject(&depth, &Intrinsics::from(&cfg.camera), a.stride);
    let cloud = colorize(&points, &pred.detections, &pred.branch_map, pred.width, coloring, Some(&rgb));
    let dir = out_dir(cli, "runs/pointcloud")?;
    let path = dir.join(format!("{}.ply", stem(&a.rgb)));
    write_ply(&cloud, &path)?;
    println!("{} points -> {}", cloud.len(), path.display());
    Ok(())
}

fn gradcheck(cfg: &RunConfig, a: &GradcheckArgs, seed: u64) -> Outcome {
    let results = gradcheck_suite(&cfg.model, a.probes, seed)?;
    let mut worst = 0.0f64;
    let mut failed = 0;
    for r in &results {
        worst = worst.max(r.report.max_relative_error);
        let verdict = if r.passed() { "ok" } else { "FAILED" };
        println!(
            "{:<40} {:>4} params  max rel err {:.3e} (tol {:.0e}, {} kink retries) {verdict}",
            r.name,
            r.report.checked(),
            r.report.max_relative_error,
            r.tolerance,
            r.report.kink_retries
        );
        failed += usize::from(!r.passed());
    }
    println!("max relative error: {worst:.3e}");
    if failed > 0 {
        return Err(Failure::check(format!("{failed} gradient checks failed")));
    }
    Ok(())
}
