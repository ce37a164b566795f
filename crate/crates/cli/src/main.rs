//! `rmipn` command-line tool: synthetic data, label generation, training,
//! inference, evaluation, debug renders and the two-mode ablation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

use rmipn_core::dataio::{self, image, render, SynthConfig};
use rmipn_core::evalkit;
use rmipn_core::geometry::Polygon;
use rmipn_core::labelgen::{LabelMaps, ShrinkPolicy};
use rmipn_core::model::Mode;
use rmipn_core::pipeline::{self, AblationConfig, TrainConfig};
use rmipn_core::postprocess::{DetectionResult, PostParams};

#[derive(Debug, Parser)]
#[command(name = "rmipn", version, about = "Segmentation-based scene text detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render training label maps for every image into `.rmlb` files.
    Labelgen(LabelgenArgs),
    /// Write seeded synthetic images with annotations.
    Synth(SynthArgs),
    /// Train a model on a directory of images and annotations.
    Train(TrainArgs),
    /// Detect text in one image and write the polygons as JSON.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Render label maps or a detection overlay as PGM/PPM images.
    Viz(VizArgs),
    /// Train baseline and full model on one split and compare them.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct LabelgenArgs {
    /// Directory of `.ppm` images.
    #[arg(long)]
    images: PathBuf,
    /// Directory of `.txt` annotations named after the images.
    #[arg(long)]
    annots: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.4)]
    shrink_ratio: f64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    count: usize,
    /// Side length of the square images.
    #[arg(long)]
    size: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train_out")]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "rmipn", value_parser = ["baseline", "rmipn"])]
    mode: String,
    /// Base channel width of the network.
    #[arg(long, default_value_t = 16)]
    channels: usize,
}

#[derive(Debug, Args)]
struct PostArgs {
    #[arg(long, default_value_t = 0.3)]
    bin_thresh: f64,
    #[arg(long, default_value_t = 0.5)]
    box_thresh: f64,
    #[arg(long, default_value_t = 1.5)]
    unclip: f64,
}

impl PostArgs {
    fn params(&self) -> PostParams {
        PostParams {
            bin_thresh: self.bin_thresh,
            box_score_thresh: self.box_thresh,
            unclip_ratio: self.unclip,
            ..PostParams::default()
        }
    }
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out_json: PathBuf,
    #[command(flatten)]
    post: PostArgs,
    /// Also write the probability map as a PGM.
    #[arg(long)]
    prob_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of predictions, `<id>.json` detection results or `<id>.txt` annotations.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of `<id>.txt` ground-truth annotations.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Directory for `eval.txt` and `per_image.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["labels", "result"]))]
struct VizArgs {
    /// `.rmlb` label file; writes one PGM per plane.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Detection JSON; writes the polygons drawn over `--image`.
    #[arg(long, requires = "image")]
    result: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    /// Share of images held out for evaluation.
    #[arg(long, default_value_t = 0.25)]
    holdout: f64,
    #[command(flatten)]
    post: PostArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => return usage_error(e),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Help and version go to stdout with status 0. A missing flag also prints
/// the subcommand's full help.
fn usage_error(e: clap::Error) -> ExitCode {
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                return ExitCode::from(2);
            }
            ExitCode::SUCCESS
        }
        ErrorKind::MissingRequiredArgument => {
            let _ = e.print();
            let sub = std::env::args().nth(1).unwrap_or_default();
            let mut cmd = Cli::command();
            if let Some(sc) = cmd.find_subcommand_mut(&sub) {
                let mut sc = sc.clone().bin_name(format!("rmipn {sub}"));
                eprintln!("\n{}", sc.render_help());
            }
            ExitCode::from(2)
        }
        _ => {
            let _ = e.print();
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Labelgen(a) => labelgen(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Viz(a) => viz(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn labelgen(a: LabelgenArgs) -> Result<()> {
    let policy = ShrinkPolicy::new(a.shrink_ratio, ShrinkPolicy::default().unclip_ratio)?;
    let images = dataio::list_images(&a.images)?;
    if images.is_empty() {
        bail!("empty dataset: no images in {}", a.images.display());
    }
    create_dir(&a.out)?;
    let mut warnings = 0;
    for path in &images {
        let id = dataio::image_id(path);
        let img = dataio::read_ppm(&dataio::read_file(path)?).with_context(|| path.display().to_string())?;
        let ann = dataio::read_annotation_file(&a.annots.join(format!("{id}.txt")), &id)?;
        let (maps, w) = LabelMaps::generate(&ann.polygons, img.dims, &policy);
        warnings += w.len();
        dataio::write_atomic(&a.out.join(format!("{id}.rmlb")), &maps.to_rmlb_bytes())?;
    }
    println!("labelgen: {} label files in {} ({warnings} warnings)", images.len(), a.out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig { height: a.size, width: a.size, ..SynthConfig::default() };
    let written = dataio::write_synth_dataset(&a.out, a.count, a.seed, &cfg)?;
    println!("synth: {} samples of {}x{} in {} (seed {})", written.len(), a.size, a.size, a.out.display(), a.seed);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        lr: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        mode: a.mode.parse::<Mode>()?,
        base_channels: a.channels,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let trained = pipeline::train(&a.data, &cfg, &a.out)?;
    let r = &trained.report;
    println!(
        "train: {} epochs on {} samples, best loss {:.6} at epoch {}, reduction {:.1}%, checkpoint {}",
        r.history.len(),
        r.samples,
        r.best_loss,
        r.best_epoch,
        100.0 * r.loss_reduction(),
        a.out.join(pipeline::CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let post = a.post.params();
    post.validate()?;
    let (model, mut params) = pipeline::load_model(&a.ckpt)?;
    let img = dataio::read_ppm(&dataio::read_file(&a.image)?).with_context(|| a.image.display().to_string())?;
    let inf = pipeline::infer(&model, &mut params, &img, &post)?;
    dataio::write_atomic(&a.out_json, inf.result.to_json().as_bytes())?;
    if let Some(p) = &a.prob_out {
        dataio::write_atomic(p, &image::pgm_bytes(&render::prob_render(&inf.prob)))?;
    }
    println!("infer: {} detections in {}", inf.result.detections.len(), a.out_json.display());
    Ok(())
}

/// Polygons per image id from `.json` results or `.txt` annotations.
fn read_polygon_dir(dir: &Path, allow_json: bool) -> Result<BTreeMap<String, Vec<Polygon>>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    let mut paths: Vec<PathBuf> = entries.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    paths.sort();
    for p in paths {
        let id = dataio::image_id(&p);
        let polys = match p.extension().and_then(|x| x.to_str()) {
            Some("txt") => dataio::read_annotation_file(&p, &id)?.polygons,
            Some("json") if allow_json => {
                let text = String::from_utf8(dataio::read_file(&p)?)
                    .with_context(|| format!("{} is not UTF-8", p.display()))?;
                DetectionResult::from_json(&text).with_context(|| p.display().to_string())?.polygons()
            }
            _ => continue,
        };
        if out.insert(id.clone(), polys).is_some() {
            bail!("{}: more than one prediction file for image {id}", dir.display());
        }
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<()> {
    let preds = read_polygon_dir(&a.pred, true)?;
    let gts = read_polygon_dir(&a.gt, false)?;
    let report = evalkit::evaluate(&preds, &gts, a.iou)?;
    if let Some(out) = &a.out {
        create_dir(out)?;
        dataio::write_atomic(&out.join("eval.txt"), report.to_text().as_bytes())?;
        dataio::write_atomic(&out.join("per_image.csv"), report.per_image_csv().as_bytes())?;
    }
    println!(
        "recall={:.4} precision={:.4} fmeasure={:.4} matched={} gt={} predictions={}",
        report.recall, report.precision, report.fmeasure, report.matched, report.gt_count, report.pred_count
    );
    Ok(())
}

fn viz(a: VizArgs) -> Result<()> {
    create_dir(&a.out)?;
    if let Some(labels) = &a.labels {
        let maps =
            LabelMaps::from_rmlb_bytes(&dataio::read_file(labels)?).with_context(|| labels.display().to_string())?;
        let stem = dataio::image_id(labels);
        let renders = render::label_renders(&maps);
        for (name, img) in &renders {
            dataio::write_atomic(&a.out.join(format!("{stem}_{name}.pgm")), &image::pgm_bytes(img))?;
        }
        println!("viz: {} plane renders of {stem} in {}", renders.len(), a.out.display());
    }
    if let (Some(result), Some(image_path)) = (&a.result, &a.image) {
        let text = String::from_utf8(dataio::read_file(result)?)
            .with_context(|| format!("{} is not UTF-8", result.display()))?;
        let det = DetectionResult::from_json(&text).with_context(|| result.display().to_string())?;
        let img =
            dataio::read_ppm(&dataio::read_file(image_path)?).with_context(|| image_path.display().to_string())?;
        if det.dims != img.dims {
            bail!(
                "result is for a {}x{} image but {} is {}x{}",
                det.dims.width,
                det.dims.height,
                image_path.display(),
                img.dims.width,
                img.dims.height
            );
        }
        let stem = dataio::image_id(result);
        let path = a.out.join(format!("{stem}_overlay.ppm"));
        dataio::write_atomic(&path, &image::ppm_bytes(&render::overlay(&img, &det.polygons(), [0, 255, 0])))?;
        println!("viz: overlay of {} detections in {}", det.detections.len(), path.display());
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let post = a.post.params();
    post.validate()?;
    let cfg = AblationConfig {
        train: TrainConfig {
            lr: a.lr,
            batch_size: a.batch,
            epochs: a.epochs,
            seed: a.seed,
            base_channels: a.channels,
            ..TrainConfig::default()
        },
        holdout: a.holdout,
        post,
        ..AblationConfig::default()
    };
    cfg.train.validate()?;
    let ab = pipeline::ablation_run(&a.data, &cfg, &a.out)?;
    let f: Vec<String> = ab.rows.iter().map(|r| format!("{} F={:.2}", r.mode, 100.0 * r.eval.fmeasure)).collect();
    println!(
        "ablate: {} train / {} test images, {}, table in {}",
        ab.train_ids.len(),
        ab.test_ids.len(),
        f.join(", "),
        a.out.join("ablation.txt").display()
    );
    Ok(())
}
