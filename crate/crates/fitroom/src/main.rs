use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fitroom::annotations::{
    bbox_polygon_warnings, parse_annotations, preprocess, rasterize, CategoryTable,
};
use fitroom::compositor::{composite, CompositeJob};
use fitroom::error::Error;
use fitroom::eval::{asdr, correspond_items, evaluate_map, Detection, IouBasis};
use fitroom::nst::{
    load_extractor, optimize_with, save_extractor, FeatureExtractor, NstConfig, TrajectoryPoint,
};
use fitroom::pipeline::{run_pipeline, RunManifest};
use fitroom::raster::{BinaryMask, ImageTensor};

/// Virtual-fitting-room toolkit: annotation handling, detection
/// metrics, neural style transfer, and mask-guided compositing.
#[derive(Parser)]
#[command(name = "fitroom", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BasisArg {
    Box,
    Mask,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate an annotation file; report bbox/polygon
    /// mismatches as warnings.
    Validate {
        /// Annotation JSON (bare array or `{"annotations": [...]}`).
        #[arg(long)]
        annotations: PathBuf,
        /// Category table as `id<TAB>name` lines; defaults to the
        /// built-in 13-category fashion table.
        #[arg(long)]
        categories: Option<PathBuf>,
        /// Treat bbox/polygon mismatch warnings as errors.
        #[arg(long)]
        strict: bool,
    },
    /// Rasterize the polygons of one image/category pair to a 1-bit
    /// mask PNG in the preprocessed 256x256 frame (or a raw frame with
    /// --width/--height).
    Rasterize {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        categories: Option<PathBuf>,
        #[arg(long)]
        image_id: i64,
        #[arg(long)]
        category: u32,
        /// Original image width, required to map into the padded frame.
        #[arg(long)]
        width: usize,
        /// Original image height.
        #[arg(long)]
        height: usize,
        /// Side of the square output frame.
        #[arg(long, default_value_t = 256)]
        target: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score predictions against ground truth and print per-category AP
    /// and the mean AP.
    EvalMap {
        /// Predicted detections (JSON array).
        #[arg(long)]
        predictions: PathBuf,
        /// Ground-truth detections (JSON array).
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, value_enum, default_value = "box")]
        basis: BasisArg,
        /// Optional JSON report destination.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compute the average score decay rate between detections before
    /// and after restyling.
    EvalAsdr {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
    },
    /// Run style transfer on a content/style image pair, writing
    /// snapshots, a loss trajectory CSV, and the final image.
    StyleTransfer {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        /// Extractor weight file; omitted means a seeded reference
        /// extractor.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Optimization config JSON; omitted means defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed for the reference extractor when --weights is absent.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Side of the square working frame images are resized into.
        #[arg(long, default_value_t = 256)]
        target: usize,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Blend a stylized image into the original under a mask.
    Composite {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        stylized: PathBuf,
        /// 1-bit mask PNG selecting the stylized region.
        #[arg(long)]
        mask: PathBuf,
        /// Box-blur passes applied to the mask edge; 0 is a hard cut.
        #[arg(long, default_value_t = 0)]
        feather: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Execute a full manifest-driven run: preprocess, per-category
    /// style transfer, and composite.
    Run {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write a seeded reference extractor weight file.
    InitWeights {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
}

fn read_bytes(path: &PathBuf) -> fitroom::Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_detections(path: &PathBuf) -> fitroom::Result<Vec<Detection>> {
    let bytes = read_bytes(path)?;
    let mut dets: Vec<Detection> = serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        offset: 0,
        line: e.line(),
        msg: format!("{}: {e}", path.display()),
    })?;
    for d in &mut dets {
        d.validate()?;
        if let Some(png) = &d.mask_png {
            let resolved = if png.is_absolute() {
                png.clone()
            } else {
                path.parent().unwrap_or_else(|| std::path::Path::new(".")).join(png)
            };
            d.mask = Some(BinaryMask::load_png(&resolved)?);
        }
    }
    Ok(dets)
}

fn load_table(path: &Option<PathBuf>) -> fitroom::Result<CategoryTable> {
    match path {
        Some(p) => CategoryTable::load(p),
        None => Ok(CategoryTable::modanet_default()),
    }
}

fn cmd_validate(
    annotations: &PathBuf,
    categories: &Option<PathBuf>,
    strict: bool,
) -> fitroom::Result<()> {
    let table = load_table(categories)?;
    let records = parse_annotations(&read_bytes(annotations)?, &table)?;
    let warnings = bbox_polygon_warnings(&records);
    for (id, msg) in &warnings {
        eprintln!("warning: annotation {id}: {msg}");
    }
    if strict && !warnings.is_empty() {
        return Err(Error::domain(format!(
            "{} bbox/polygon mismatch(es) in strict mode",
            warnings.len()
        )));
    }
    println!("{} annotations valid ({} warnings)", records.len(), warnings.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_rasterize(
    annotations: &PathBuf,
    categories: &Option<PathBuf>,
    image_id: i64,
    category: u32,
    width: usize,
    height: usize,
    target: usize,
    output: &PathBuf,
) -> fitroom::Result<()> {
    let table = load_table(categories)?;
    let records = parse_annotations(&read_bytes(annotations)?, &table)?;
    let blank = ImageTensor::zeros(height, width);
    let (_, pad) = preprocess(&blank, target)?;
    let polygons: Vec<_> = records
        .iter()
        .filter(|r| r.image_id == image_id && r.category_id == category)
        .flat_map(|r| r.segmentation.iter())
        .map(|p| pad.map_polygon(p))
        .collect();
    if polygons.is_empty() {
        return Err(Error::domain(format!(
            "no polygons for image {image_id}, category {category}"
        )));
    }
    let mask = rasterize(&polygons, target, target);
    mask.save_png(output)?;
    println!("wrote {} ({} set pixels)", output.display(), mask.popcount());
    Ok(())
}

fn cmd_eval_map(
    predictions: &PathBuf,
    ground_truth: &PathBuf,
    iou: f64,
    basis: BasisArg,
    report: &Option<PathBuf>,
) -> fitroom::Result<()> {
    if !(0.0 < iou && iou <= 1.0) {
        return Err(Error::domain(format!("iou threshold {iou} outside (0, 1]")));
    }
    let preds = read_detections(predictions)?;
    let gts = read_detections(ground_truth)?;
    let basis = match basis {
        BasisArg::Box => IouBasis::Box,
        BasisArg::Mask => IouBasis::Mask,
    };
    let rep = evaluate_map(&preds, &gts, iou, basis)?;
    for (cat, ap) in &rep.per_category_ap {
        println!("AP[{cat}] = {ap:.4}");
    }
    for cat in &rep.skipped_categories {
        eprintln!("warning: category {cat} has predictions but no ground truth; excluded");
    }
    println!("mAP = {:.2}", rep.mean_ap);
    if let Some(path) = report {
        let text = serde_json::to_string_pretty(&rep).expect("report serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_eval_asdr(before: &PathBuf, after: &PathBuf) -> fitroom::Result<()> {
    let b = read_detections(before)?;
    let a = read_detections(after)?;
    let pairs = correspond_items(&b, &a);
    let value = asdr(&pairs)?;
    println!("ASDR = {value:.4} ({} matched items)", pairs.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_style_transfer(
    content: &PathBuf,
    style: &PathBuf,
    weights: &Option<PathBuf>,
    config: &Option<PathBuf>,
    seed: u64,
    target: usize,
    output_dir: &PathBuf,
) -> fitroom::Result<()> {
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let (content_img, _) = preprocess(&ImageTensor::load_png(content)?, target)?;
    let (style_img, _) = preprocess(&ImageTensor::load_png(style)?, target)?;
    let ex = match weights {
        Some(path) => load_extractor(path)?,
        None => FeatureExtractor::reference(seed),
    };
    let cfg = match config {
        Some(path) => {
            let bytes = read_bytes(path)?;
            serde_json::from_slice::<NstConfig>(&bytes).map_err(|e| Error::Parse {
                offset: 0,
                line: e.line(),
                msg: format!("config: {e}"),
            })?
        }
        None => NstConfig::default_for(&ex),
    };

    let csv_path = output_dir.join("loss.csv");
    let csv = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut csv = std::io::BufWriter::new(csv);
    writeln!(csv, "iter,total,content,style,tv").map_err(|e| Error::io(&csv_path, e))?;

    let mut on_snapshot = |done: usize, img: &ImageTensor| {
        let path = output_dir.join(format!("snap_{done:06}.png"));
        img.save_png(&path)
    };
    let mut on_point = |p: TrajectoryPoint| {
        writeln!(
            csv,
            "{},{:.12e},{:.12e},{:.12e},{:.12e}",
            p.iteration, p.loss.total, p.loss.content, p.loss.style, p.loss.tv
        )
        .map_err(|e| Error::io(&csv_path, e))
    };
    // Partial outputs (snapshots written so far, CSV rows flushed below)
    // are kept even when the run aborts on a non-finite loss.
    let outcome = optimize_with(
        &content_img,
        &style_img,
        &ex,
        &cfg,
        &mut on_snapshot,
        &mut on_point,
    );
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    drop(csv);
    let final_img = outcome?;
    let final_path = output_dir.join("final.png");
    final_img.save_png(&final_path)?;
    println!("wrote {}", final_path.display());
    Ok(())
}

fn cmd_composite(
    original: &PathBuf,
    stylized: &PathBuf,
    mask: &PathBuf,
    feather: usize,
    output: &PathBuf,
) -> fitroom::Result<()> {
    let job = CompositeJob {
        original: ImageTensor::load_png(original)?,
        stylized: ImageTensor::load_png(stylized)?,
        mask: BinaryMask::load_png(mask)?,
        feather_radius: feather,
    };
    let out = composite(&job)?;
    out.save_png(output)?;
    println!("wrote {}", output.display());
    Ok(())
}

fn cmd_run(manifest: &PathBuf) -> fitroom::Result<()> {
    let manifest = RunManifest::load(manifest)?;
    let out = run_pipeline(&manifest)?;
    println!("wrote {}", out.preprocessed.display());
    for (cat, path) in &out.per_category {
        println!("wrote {} (category {cat})", path.display());
    }
    println!("wrote {}", out.before_detections.display());
    println!("wrote {}", out.after_detections.display());
    println!("wrote {}", out.composite.display());
    Ok(())
}

fn cmd_init_weights(seed: u64, output: &PathBuf) -> fitroom::Result<()> {
    let ex = FeatureExtractor::reference(seed);
    save_extractor(&ex, output)?;
    println!("wrote {}", output.display());
    Ok(())
}

fn run(cli: &Cli) -> fitroom::Result<()> {
    match &cli.command {
        Command::Validate { annotations, categories, strict } => {
            cmd_validate(annotations, categories, *strict)
        }
        Command::Rasterize {
            annotations,
            categories,
            image_id,
            category,
            width,
            height,
            target,
            output,
        } => cmd_rasterize(
            annotations, categories, *image_id, *category, *width, *height, *target, output,
        ),
        Command::EvalMap { predictions, ground_truth, iou, basis, report } => {
            cmd_eval_map(predictions, ground_truth, *iou, *basis, report)
        }
        Command::EvalAsdr { before, after } => cmd_eval_asdr(before, after),
        Command::StyleTransfer { content, style, weights, config, seed, target, output_dir } => {
            cmd_style_transfer(content, style, weights, config, *seed, *target, output_dir)
        }
        Command::Composite { original, stylized, mask, feather, output } => {
            cmd_composite(original, stylized, mask, *feather, output)
        }
        Command::Run { manifest } => cmd_run(manifest),
        Command::InitWeights { seed, output } => cmd_init_weights(*seed, output),
    }
}

/// Exit codes: 0 success, 1 validation or domain error, 2 I/O error.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Image { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
