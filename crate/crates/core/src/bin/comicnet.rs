use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use comicnet::anchors::{cluster_anchors, AnchorSet};
use comicnet::checkpoint::{self, Checkpoint};
use comicnet::data::detections::{group_by_image, load_jsonl, save_jsonl, DetectionRecord};
use comicnet::data::render::render_detections;
use comicnet::data::splits::DEFAULT_RATIOS;
use comicnet::data::synth::{generate_synthetic_dataset, write_dataset, ANNOTATION_FILE};
use comicnet::data::vgg::load_vgg_dataset;
use comicnet::data::{load_rgb, make_splits, AnnotatedPage, DatasetManifest, Split};
use comicnet::eval::{evaluate, format_csv, format_table, match_to_ground_truth, Metrics, TableRow};
use comicnet::geometry::{Label, NETWORK_SIZE};
use comicnet::network::{HeadMode, Network, NetworkConfig};
use comicnet::pipeline::{detect_image, network_space_dims, prepare_sample, DetectOptions};
use comicnet::train::{train_with, Sample, TrainOptions, TrainSchedule};
use comicnet::Error;

#[derive(Parser)]
#[command(name = "comicnet", version, about = "Panel and character detection for comic pages")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic annotated dataset.
    Synth(SynthArgs),
    /// Cluster ground-truth box shapes into anchor priors.
    Anchors(AnchorsArgs),
    /// Train a detector.
    Train(TrainArgs),
    /// Run a trained detector over images.
    Detect(DetectArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Draw detections onto their images.
    Render(RenderArgs),
}

#[derive(Args)]
struct DatasetArgs {
    /// VGG Image Annotator JSON file.
    #[arg(long)]
    annotations: PathBuf,
    /// Directory holding the annotated images (defaults to the annotation file's directory).
    #[arg(long)]
    images: Option<PathBuf>,
    /// Use only the first N pages (in annotation order).
    #[arg(long)]
    limit: Option<usize>,
}

impl DatasetArgs {
    fn load(&self) -> anyhow::Result<Vec<AnnotatedPage>> {
        let dir = match &self.images {
            Some(d) => d.clone(),
            None => self.annotations.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        let ds = load_vgg_dataset(&self.annotations, &dir)?;
        for (file, msg) in &ds.page_errors {
            warn!("skipping {file}: {msg}");
        }
        if ds.stats.dropped_label_count() + ds.stats.dropped_shape_count() > 0 {
            info!(
                "ignored {} regions with other labels and {} non-rectangular regions",
                ds.stats.dropped_label_count(),
                ds.stats.dropped_shape_count()
            );
        }
        let mut pages = ds.pages;
        if let Some(n) = self.limit {
            pages.truncate(n);
        }
        if pages.is_empty() {
            return Err(Error::Dataset(format!("no usable pages in {}", self.annotations.display())).into());
        }
        Ok(pages)
    }
}

#[derive(Args)]
struct SplitSelect {
    /// Split manifest written by `train`.
    #[arg(long, requires = "split")]
    splits: Option<PathBuf>,
    /// Restrict to one split of the manifest.
    #[arg(long, requires = "splits")]
    split: Option<Split>,
}

impl SplitSelect {
    fn apply(&self, pages: Vec<AnnotatedPage>) -> anyhow::Result<Vec<AnnotatedPage>> {
        let (Some(path), Some(split)) = (&self.splits, self.split) else { return Ok(pages) };
        let manifest = DatasetManifest::load(path)?;
        let keep = manifest.pages(split);
        Ok(pages.into_iter().filter(|p| keep.contains(&p.image_id)).collect())
    }
}

#[derive(Args)]
struct NetArgs {
    /// Side of the square network input in pixels (multiple of 32).
    #[arg(long, default_value_t = NETWORK_SIZE as usize)]
    input_size: usize,
    /// Anchor boxes predicted per grid cell.
    #[arg(long, default_value_t = 3)]
    boxes_per_cell: usize,
    /// Number of class scores per box.
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Class head activation: sigmoid or softmax.
    #[arg(long, default_value_t = HeadMode::Sigmoid)]
    head: HeadMode,
    /// Channel width multiplier applied to every convolution.
    #[arg(long, default_value_t = 1.0)]
    width_multiplier: f64,
    /// Anchor JSON from `anchors` (defaults to the standard nine priors scaled to the input size).
    #[arg(long)]
    anchors: Option<PathBuf>,
}

impl NetArgs {
    fn config(&self) -> anyhow::Result<NetworkConfig> {
        if self.classes < Label::ALL.len() {
            return Err(Error::Config(format!("at least {} classes are needed for panels and characters", Label::ALL.len())).into());
        }
        let anchors = match &self.anchors {
            Some(p) => AnchorSet::load(p)?,
            None => AnchorSet::default_nine().scaled(self.input_size as f64 / f64::from(NETWORK_SIZE)),
        };
        if anchors.per_scale_count() != self.boxes_per_cell {
            return Err(Error::Config(format!(
                "{} anchors do not give {} boxes per cell at three scales",
                anchors.len(),
                self.boxes_per_cell
            ))
            .into());
        }
        let cfg = NetworkConfig {
            input_size: self.input_size,
            num_classes: self.classes,
            boxes_per_cell: self.boxes_per_cell,
            head_mode: self.head,
            width_multiplier: self.width_multiplier,
            anchors,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for images and annotations.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pages: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 480)]
    width: u32,
    #[arg(long, default_value_t = 640)]
    height: u32,
}

#[derive(Args)]
struct AnchorsArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Number of anchors (a multiple of 3).
    #[arg(long, default_value_t = 9)]
    k: usize,
    /// Network input side the anchors are expressed in.
    #[arg(long, default_value_t = NETWORK_SIZE as usize)]
    input_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    net: NetArgs,
    /// Output directory for the checkpoint, loss history and splits.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 70_000)]
    iterations: usize,
    /// Learning rate before the phase boundary.
    #[arg(long, default_value_t = 1e-3)]
    lr1: f64,
    /// Learning rate from the phase boundary on.
    #[arg(long, default_value_t = 1e-4)]
    lr2: f64,
    /// Iteration at which the learning rate drops (default: 60% of --iterations).
    #[arg(long)]
    phase_boundary: Option<usize>,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    /// Seed for weight initialization, split assignment and sample order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train and validate on every selected page instead of a 60/20/20 split.
    #[arg(long)]
    no_split: bool,
    /// Write an intermediate checkpoint every N iterations.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Initialize from another checkpoint, copying every array whose name and shape match.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Annotation file naming the pages to process.
    #[arg(long, conflicts_with = "inputs")]
    annotations: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    select: SplitSelect,
    /// Image files to process instead of an annotation file.
    inputs: Vec<PathBuf>,
    /// Keep boxes whose objectness is strictly above this.
    #[arg(long, default_value_t = 0.70)]
    obj_threshold: f64,
    /// Suppress same-class boxes overlapping a better one by more than this IoU.
    #[arg(long, default_value_t = 0.5)]
    nms_iou: f64,
    /// Output JSON-lines file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    select: SplitSelect,
    /// A detection counts when its IoU with a same-class ground truth is strictly above this.
    #[arg(long, default_value_t = 0.80)]
    iou_match: f64,
    #[arg(long, default_value = "comicnet")]
    method: String,
    #[arg(long)]
    dataset: Option<String>,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    detections: PathBuf,
    /// Directory containing the images named by the detections' image ids.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

fn run_synth(a: &SynthArgs) -> anyhow::Result<()> {
    let pages = generate_synthetic_dataset(a.pages, a.seed, (a.width, a.height))?;
    write_dataset(&pages, &a.out)?;
    let boxes: usize = pages.iter().map(|p| p.gts.len()).sum();
    println!("wrote {} pages with {boxes} boxes to {}", pages.len(), a.out.join(ANNOTATION_FILE).display());
    Ok(())
}

fn run_anchors(a: &AnchorsArgs) -> anyhow::Result<()> {
    let pages = a.data.load()?;
    let dims = network_space_dims(&pages, a.input_size);
    let anchors = cluster_anchors(&dims, a.k, a.seed)?;
    anchors.save(&a.out)?;
    let text: Vec<String> = anchors.all().iter().map(|x| format!("({:.1}, {:.1})", x.w, x.h)).collect();
    println!("{} anchors from {} boxes: {}", anchors.len(), dims.len(), text.join(" "));
    Ok(())
}

fn samples(pages: &[AnnotatedPage], cfg: &NetworkConfig) -> anyhow::Result<Vec<Sample>> {
    pages.iter().map(|p| prepare_sample(p, cfg).with_context(|| format!("preparing {}", p.image_id))).collect()
}

fn run_train(a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = a.net.config()?;
    let pages = a.data.load()?;
    std::fs::create_dir_all(&a.out)?;
    let (train_pages, val_pages): (Vec<AnnotatedPage>, Vec<AnnotatedPage>) = if a.no_split {
        (pages.clone(), pages)
    } else {
        let ids: Vec<String> = pages.iter().map(|p| p.image_id.clone()).collect();
        let manifest = make_splits(&a.data.annotations.display().to_string(), &ids, DEFAULT_RATIOS, a.seed)?;
        manifest.save(&a.out.join("splits.json"))?;
        let pick = |split: Split| pages.iter().filter(|p| manifest.pages(split).contains(&p.image_id)).cloned().collect();
        (pick(Split::Train), pick(Split::Val))
    };
    let train_set = samples(&train_pages, &cfg)?;
    let val_set = samples(&val_pages, &cfg)?;
    let collisions: usize = train_set.iter().map(|s| s.targets.collisions).sum();
    if collisions > 0 {
        warn!("{collisions} ground-truth boxes share a grid slot with another box and were overwritten");
    }

    let schedule = TrainSchedule {
        total_iterations: a.iterations,
        phase_boundary: a.phase_boundary.unwrap_or(a.iterations * 3 / 5),
        lr_phase1: a.lr1,
        lr_phase2: a.lr2,
        batch_size: a.batch_size,
        ..TrainSchedule::paper()
    };
    schedule.validate()?;
    let mut net = Network::<f32>::build(cfg.clone(), a.seed)?;
    if let Some(init) = &a.init {
        let report = checkpoint::import_weights(&mut net, &Checkpoint::read(init)?);
        println!("initialized {} arrays from {}", report.copied.len(), init.display());
    }
    cfg.anchors.save(&a.out.join("anchors.json"))?;

    let out = a.out.clone();
    let mut save_every = |iteration: usize, net: &Network<f32>| checkpoint::save(net, &out.join(format!("model-{iteration:06}.ckpt")));
    let opts = TrainOptions { checkpoint_every: a.checkpoint_every, on_checkpoint: Some(&mut save_every), ..TrainOptions::seeded(a.seed) };
    info!("training on {} pages, validating on {}", train_set.len(), val_set.len());
    let history = train_with(&mut net, &train_set, &val_set, &schedule, opts)?;
    history.write_csv(&a.out.join("loss.csv"))?;
    checkpoint::save(&net, &a.out.join("model.ckpt"))?;
    let window = (a.iterations / 20).max(1);
    println!(
        "trained {} iterations: train loss {:.5} -> {:.5}, validation loss {}",
        a.iterations,
        history.initial_train_loss(window),
        history.final_train_loss(window),
        history.final_val_loss().map_or("n/a".into(), |v| format!("{v:.5}"))
    );
    Ok(())
}

fn check_unit(name: &str, v: f64) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")).into());
    }
    Ok(())
}

fn run_detect(a: &DetectArgs) -> anyhow::Result<()> {
    check_unit("--obj-threshold", a.obj_threshold)?;
    check_unit("--nms-iou", a.nms_iou)?;
    let net = checkpoint::load(&a.checkpoint)?;
    let inputs: Vec<(String, PathBuf)> = if let Some(ann) = &a.annotations {
        let data = DatasetArgs { annotations: ann.clone(), images: a.images.clone(), limit: a.limit };
        a.select
            .apply(data.load()?)?
            .into_iter()
            .map(|p| match p.image {
                comicnet::data::PageImage::File(path) => Ok((p.image_id, path)),
                comicnet::data::PageImage::Loaded(_) => bail!("annotated pages are always read from disk"),
            })
            .collect::<anyhow::Result<_>>()?
    } else if !a.inputs.is_empty() {
        a.inputs.iter().map(|p| (p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(), p.clone())).collect()
    } else {
        return Err(Error::Config("give image files or --annotations".into()).into());
    };
    let opts = DetectOptions { obj_threshold: a.obj_threshold, nms_iou: a.nms_iou };
    let mut records = Vec::new();
    for (id, path) in &inputs {
        let img = load_rgb(path)?;
        let dets = detect_image(&net, &img, &opts)?;
        info!("{id}: {} detections", dets.len());
        records.extend(dets.iter().map(|d| DetectionRecord::new(id, d)));
    }
    save_jsonl(&a.out, &records)?;
    println!("wrote {} detections for {} images to {}", records.len(), inputs.len(), a.out.display());
    Ok(())
}

fn run_eval(a: &EvalArgs) -> anyhow::Result<()> {
    check_unit("--iou-match", a.iou_match)?;
    let pages = a.select.apply(a.data.load()?)?;
    let by_image = group_by_image(&load_jsonl(&a.detections)?);
    let results: Vec<_> = pages
        .iter()
        .map(|p| match_to_ground_truth(by_image.get(&p.image_id).map_or(&[][..], Vec::as_slice), &p.gts, a.iou_match))
        .collect();
    let report = evaluate(&results)?;
    let dataset = a.dataset.clone().unwrap_or_else(|| {
        a.data.annotations.parent().and_then(Path::file_name).map_or("dataset".into(), |s| s.to_string_lossy().into_owned())
    });
    let row = |suffix: &str, m: &Metrics| TableRow { method: a.method.clone(), dataset: format!("{dataset}{suffix}"), metrics: *m };
    let mut rows: Vec<TableRow> = Label::ALL.iter().map(|&l| row(&format!(" ({l})"), report.class(l))).collect();
    rows.push(row(" (all)", &report.overall));
    print!("{}", format_table(&rows));
    if let Some(p) = &a.csv {
        std::fs::write(p, format_csv(&rows))?;
    }
    if let Some(p) = &a.json {
        std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn run_render(a: &RenderArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&a.out_dir)?;
    let by_image = group_by_image(&load_jsonl(&a.detections)?);
    for (id, dets) in &by_image {
        let img = load_rgb(&a.images.join(id))?;
        let boxes: Vec<_> = dets.iter().map(|d| d.labeled()).collect();
        let stem = Path::new(id).file_stem().map_or(id.clone(), |s| s.to_string_lossy().into_owned());
        render_detections(&img, &boxes, &a.out_dir.join(format!("{stem}.png")))?;
    }
    println!("rendered {} images into {}", by_image.len(), a.out_dir.display());
    Ok(())
}

/// Exit status per failure class.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::DegenerateBox { .. } | Error::Anchors(_) | Error::Shape(_)) => 2,
        Some(Error::MissingFile(_)) => 3,
        Some(Error::Divergence { .. } | Error::NonFinite(_)) => 4,
        Some(Error::Parse { .. } | Error::Json(_) | Error::Dataset(_) | Error::Checkpoint(_)) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Anchors(a) => run_anchors(a),
        Command::Train(a) => run_train(a),
        Command::Detect(a) => run_detect(a),
        Command::Eval(a) => run_eval(a),
        Command::Render(a) => run_render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
            eprintln!("comicnet: error: {}", chain.join(": "));
            ExitCode::from(exit_code(&e))
        }
    }
}
