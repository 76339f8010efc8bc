//! Command-line front end: synthesis, training, enhancement, evaluation,
//! gradient checking and ablation runs.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::color;
use crate::error::{Error, Result};
use crate::imageio::{
    self, read_checkpoint, read_manifest, write_checkpoint, write_manifest, DatasetManifest,
    ManifestEntry,
};
use crate::model::Model;
use crate::quality::{evaluate_pairs, MetricReport};
use crate::scene;
use crate::train::{self, load_pairs, Pair, TrainOptions, Trainer};
use crate::verify::{self, SuiteOptions, Variant};
use crate::watersim::{build_dataset, dataset_manifest_path, DatasetOptions, WaterType};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "uwcnn", version, about = "Underwater image synthesis and CNN enhancement")]
pub struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize degraded/ground-truth pairs from clean RGB-D sources.
    Synth(SynthArgs),
    /// Train a network on a paired manifest.
    Train(TrainArgs),
    /// Enhance an image or a directory of images with a checkpoint.
    Enhance(EnhanceArgs),
    /// Score enhanced images against a manifest's ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of every primitive and all network variants.
    Gradcheck(GradcheckArgs),
    /// Train and compare the full network against its three ablations.
    Ablate(AblateArgs),
    /// Write procedural RGB-D scenes and a source manifest.
    #[command(hide = true)]
    Scenes(ScenesArgs),
}

/// `WIDTHxHEIGHT` or `none`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resize(pub Option<(usize, usize)>);

/// A crop side or `none`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop(pub Option<usize>);

fn parse_resize(s: &str) -> std::result::Result<Resize, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(Resize(None));
    }
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT or none, got {s:?}"))?;
    let w: usize = w.parse().map_err(|e| format!("bad width {w:?}: {e}"))?;
    let h: usize = h.parse().map_err(|e| format!("bad height {h:?}: {e}"))?;
    if w == 0 || h == 0 {
        return Err("resize dimensions must be positive".into());
    }
    Ok(Resize(Some((w, h))))
}

fn parse_crop(s: &str) -> std::result::Result<Crop, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(Crop(None));
    }
    match s.parse::<usize>() {
        Ok(0) => Err("crop must be positive".into()),
        Ok(n) => Ok(Crop(Some(n))),
        Err(e) => Err(format!("expected a size or none, got {s:?}: {e}")),
    }
}

fn parse_water_type(s: &str) -> std::result::Result<WaterType, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Source manifest: clean image and depth map per line.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_parser = parse_water_type)]
    pub water_type: WaterType,
    #[arg(long, default_value_t = 5)]
    pub variants: usize,
    /// WIDTHxHEIGHT, or none to keep the source size.
    #[arg(long, default_value = "310x230", value_parser = parse_resize)]
    pub resize: Resize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ModelFlags {
    /// Output the network's prediction directly instead of input + residual.
    #[arg(long)]
    pub no_residual: bool,
    /// Stack only each block's last activation with the input.
    #[arg(long)]
    pub no_dense: bool,
    /// Train on MSE alone.
    #[arg(long)]
    pub no_ssim_loss: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train_manifest: PathBuf,
    /// Scored once training finishes.
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    #[arg(long, default_value_t = train::DEFAULT_EPOCHS)]
    pub epochs: usize,
    #[arg(long, default_value_t = train::DEFAULT_BATCH)]
    pub batch: usize,
    /// Side of a random square crop per sample per epoch, or none.
    #[arg(long, default_value = "none", value_parser = parse_crop)]
    pub crop: Crop,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    /// Defaults to the checkpoint path with a `.metrics.tsv` suffix.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Clone, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file for a file input; output directory for a directory input.
    #[arg(long)]
    pub out: PathBuf,
    /// Apply the HSI saturation/intensity stretch after the network.
    #[arg(long)]
    pub post: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub enhanced_dir: PathBuf,
    /// Defaults to `<enhanced-dir>/report.tsv`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Height and width of the random test images.
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    /// Kernel weights sampled per layer; biases are always all checked.
    /// 0 checks every weight.
    #[arg(long, default_value_t = 256)]
    pub weights_per_layer: usize,
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub train_manifest: PathBuf,
    #[arg(long)]
    pub val_manifest: PathBuf,
    #[arg(long, default_value_t = train::DEFAULT_EPOCHS)]
    pub epochs: usize,
    #[arg(long, default_value_t = train::DEFAULT_BATCH)]
    pub batch: usize,
    #[arg(long, default_value = "none", value_parser = parse_crop)]
    pub crop: Crop,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ScenesArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 24)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Numeric(_) => EXIT_DIVERGED,
        Error::Config(_) | Error::Domain(_) | Error::Dimension(_) | Error::State(_) => EXIT_CONFIG,
    }
}

fn print_config(command: &str, pairs: &[(&str, String)]) {
    let mut s = format!("# uwcnn {command}\n");
    for (k, v) in pairs {
        let _ = writeln!(s, "# {k} = {v}");
    }
    eprint!("{s}");
}

fn opt<T: std::fmt::Debug>(v: &Option<T>) -> String {
    match v {
        Some(v) => format!("{v:?}"),
        None => "none".into(),
    }
}

pub fn synth(args: &SynthArgs, seed: u64) -> Result<DatasetManifest> {
    let sources = read_manifest(&args.manifest)?;
    let options = DatasetOptions {
        water_type: args.water_type,
        variants_per_image: args.variants,
        seed,
        resize: args.resize.0,
    };
    let dataset = build_dataset(&sources, &args.out, &options)?;
    write_manifest(&dataset, dataset_manifest_path(&args.out))?;
    Ok(dataset)
}

fn water_type_tag(manifest: &DatasetManifest) -> String {
    manifest
        .entries()
        .iter()
        .find_map(|e| e.synthesis.as_ref())
        .map(|s| s.water_type.name().to_string())
        .unwrap_or_default()
}

/// Result of one training run.
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub validation: Option<MetricReport>,
}

fn metrics_path(args: &TrainArgs) -> PathBuf {
    args.metrics.clone().unwrap_or_else(|| {
        let mut p = args.out_checkpoint.clone().into_os_string();
        p.push(".metrics.tsv");
        p.into()
    })
}

fn variant_options(variant: Variant, seed: u64, epochs: usize, batch: usize, crop: Option<usize>) -> TrainOptions {
    TrainOptions {
        model: variant.model_config(seed),
        epochs,
        batch_size: batch,
        crop,
        include_ssim: variant.include_ssim(),
        seed,
    }
}

/// Trains until done or diverged; on divergence a diagnostic file is written
/// next to the checkpoint before the error is returned.
fn train_with_dump(trainer: &mut Trainer, pairs: &[Pair], metrics: &Path, checkpoint: &Path) -> Result<()> {
    let mut text = String::new();
    let result = trainer.run(pairs, |m| {
        eprintln!(
            "epoch {} total {:.6} mse {:.6} ssim_loss {:.6}",
            m.epoch, m.total, m.mse, m.ssim_loss
        );
        text.push_str(&m.to_line());
        text.push('\n');
    });
    imageio::atomic_write(metrics, text.as_bytes())?;
    if let Err(e @ Error::Numeric(_)) = &result {
        let mut dump = checkpoint.to_path_buf().into_os_string();
        dump.push(".diverged.txt");
        let dump = PathBuf::from(dump);
        let mut body = format!("{e}\n\ncompleted epochs:\n");
        body.push_str(&train::metrics_text(&trainer.metrics));
        imageio::atomic_write(&dump, body.as_bytes())?;
        eprintln!("diagnostics written to {}", dump.display());
    }
    result
}

pub fn train_cmd(args: &TrainArgs, seed: u64) -> Result<TrainOutcome> {
    let manifest = read_manifest(&args.train_manifest)?;
    let pairs = load_pairs(&manifest)?;
    let mut options = TrainOptions {
        epochs: args.epochs,
        batch_size: args.batch,
        crop: args.crop.0,
        include_ssim: !args.model.no_ssim_loss,
        seed,
        ..Default::default()
    };
    options.model.residual_learning = !args.model.no_residual;
    options.model.dense_concat = !args.model.no_dense;
    options.model.seed = seed;
    options.validate(&pairs)?;
    let metrics = metrics_path(args);
    print_config(
        "train",
        &[
            ("train_manifest", args.train_manifest.display().to_string()),
            ("val_manifest", opt(&args.val_manifest)),
            ("pairs", pairs.len().to_string()),
            ("epochs", options.epochs.to_string()),
            ("batch", options.batch_size.to_string()),
            ("crop", opt(&options.crop)),
            ("residual_learning", options.model.residual_learning.to_string()),
            ("dense_concat", options.model.dense_concat.to_string()),
            ("ssim_loss", options.include_ssim.to_string()),
            ("seed", seed.to_string()),
            ("out_checkpoint", args.out_checkpoint.display().to_string()),
            ("metrics", metrics.display().to_string()),
        ],
    );
    let mut trainer = Trainer::new(options)?;
    train_with_dump(&mut trainer, &pairs, &metrics, &args.out_checkpoint)?;
    write_checkpoint(&args.out_checkpoint, &trainer.model, &water_type_tag(&manifest))?;

    let validation = match &args.val_manifest {
        Some(path) => {
            let val = read_manifest(path)?;
            let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
            enhance_manifest(&trainer.model, &val, dir.path())?;
            let report = evaluate_pairs(&val, dir.path())?;
            eprintln!(
                "validation: mse {:.6} psnr {:.6} ssim {:.6}",
                report.mse, report.psnr, report.ssim
            );
            Some(report)
        }
        None => None,
    };
    Ok(TrainOutcome { trainer, validation })
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| ["png", "ppm", "pnm"].contains(&e.to_ascii_lowercase().as_str()))
}

fn enhance_file(model: &Model, input: &Path, out: &Path, post: bool) -> Result<()> {
    let image = imageio::read_image(input)?;
    let mut enhanced = train::enhance(model, &image)?;
    if post {
        enhanced = color::postprocess(&enhanced)?;
    }
    imageio::write_image(&enhanced, out)
}

/// Enhances every degraded image of a manifest into `out_dir`, keeping file names.
pub fn enhance_manifest(model: &Model, manifest: &DatasetManifest, out_dir: &Path) -> Result<()> {
    use rayon::prelude::*;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    manifest.entries().par_iter().try_for_each(|e: &ManifestEntry| {
        let name = Path::new(&e.first)
            .file_name()
            .ok_or_else(|| Error::Config(format!("manifest path {:?} has no file name", e.first)))?;
        enhance_file(model, &manifest.resolve(&e.first), &out_dir.join(name), false)
    })
}

/// Returns the written output paths.
pub fn enhance_cmd(args: &EnhanceArgs) -> Result<Vec<PathBuf>> {
    let checkpoint = read_checkpoint(&args.checkpoint)?;
    print_config(
        "enhance",
        &[
            ("checkpoint", args.checkpoint.display().to_string()),
            ("water_type", checkpoint.water_type_tag.clone()),
            ("input", args.input.display().to_string()),
            ("out", args.out.display().to_string()),
            ("post", args.post.to_string()),
        ],
    );
    let model = checkpoint.model;
    if args.input.is_dir() {
        let mut inputs: Vec<PathBuf> = std::fs::read_dir(&args.input)
            .map_err(|e| Error::io(&args.input, e))?
            .map(|r| r.map(|d| d.path()).map_err(|e| Error::io(&args.input, e)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        inputs.sort();
        std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
        let mut outputs = Vec::with_capacity(inputs.len());
        for input in inputs {
            let out = args.out.join(input.file_name().expect("listed files have names"));
            enhance_file(&model, &input, &out, args.post)?;
            outputs.push(out);
        }
        Ok(outputs)
    } else {
        let out = if args.out.is_dir() {
            args.out.join(
                args.input
                    .file_name()
                    .ok_or_else(|| Error::Config("input path has no file name".into()))?,
            )
        } else {
            args.out.clone()
        };
        enhance_file(&model, &args.input, &out, args.post)?;
        Ok(vec![out])
    }
}

pub fn eval_cmd(args: &EvalArgs) -> Result<MetricReport> {
    let manifest = read_manifest(&args.manifest)?;
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.enhanced_dir.join("report.tsv"));
    print_config(
        "eval",
        &[
            ("manifest", args.manifest.display().to_string()),
            ("enhanced_dir", args.enhanced_dir.display().to_string()),
            ("report", report_path.display().to_string()),
        ],
    );
    let report = evaluate_pairs(&manifest, &args.enhanced_dir)?;
    imageio::atomic_write(&report_path, report.to_text().as_bytes())?;
    Ok(report)
}

pub fn gradcheck_cmd(args: &GradcheckArgs, seed: u64) -> Result<verify::SuiteReport> {
    let options = SuiteOptions {
        height: args.size,
        width: args.size,
        seed,
        weights_per_layer: (args.weights_per_layer > 0).then_some(args.weights_per_layer),
        corrupt_backward: args.corrupt_backward,
        ..Default::default()
    };
    print_config(
        "gradcheck",
        &[
            ("size", args.size.to_string()),
            ("seed", seed.to_string()),
            ("eps", options.eps.to_string()),
            ("tolerance", options.tolerance.to_string()),
            ("weights_per_layer", opt(&options.weights_per_layer)),
        ],
    );
    verify::run_suite(&options)
}

/// One trained ablation variant.
pub struct VariantResult {
    pub variant: Variant,
    pub trainer: Trainer,
    pub validation: MetricReport,
    /// Wall time spent training this variant.
    pub train_time: std::time::Duration,
}

pub struct AblationOutcome {
    pub variants: Vec<VariantResult>,
    /// Degraded inputs scored as-is.
    pub raw: MetricReport,
    pub table: String,
}

/// `metric<TAB>variant...` header, then MSE, PSNR and SSIM rows.
pub fn ablation_table(results: &[VariantResult]) -> String {
    let mut s = String::from("metric");
    for r in results {
        s.push('\t');
        s.push_str(r.variant.name());
    }
    s.push('\n');
    type Column = fn(&MetricReport) -> f64;
    let rows: [(&str, Column); 3] =
        [("MSE", |m| m.mse), ("PSNR", |m| m.psnr), ("SSIM", |m| m.ssim)];
    for (name, f) in rows {
        s.push_str(name);
        for r in results {
            let _ = write!(s, "\t{:.4}", f(&r.validation));
        }
        s.push('\n');
    }
    s
}

pub fn ablate_cmd(args: &AblateArgs, seed: u64) -> Result<AblationOutcome> {
    let train_manifest = read_manifest(&args.train_manifest)?;
    let val_manifest = read_manifest(&args.val_manifest)?;
    let pairs = load_pairs(&train_manifest)?;
    print_config(
        "ablate",
        &[
            ("train_manifest", args.train_manifest.display().to_string()),
            ("val_manifest", args.val_manifest.display().to_string()),
            ("pairs", pairs.len().to_string()),
            ("epochs", args.epochs.to_string()),
            ("batch", args.batch.to_string()),
            ("crop", opt(&args.crop.0)),
            ("seed", seed.to_string()),
            ("out_dir", args.out_dir.display().to_string()),
        ],
    );
    for v in Variant::ALL {
        variant_options(v, seed, args.epochs, args.batch, args.crop.0).validate(&pairs)?;
    }
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let tag = water_type_tag(&train_manifest);

    let mut variants = Vec::with_capacity(Variant::ALL.len());
    for v in Variant::ALL {
        eprintln!("# training {v}");
        let mut trainer = Trainer::new(variant_options(v, seed, args.epochs, args.batch, args.crop.0))?;
        let checkpoint = args.out_dir.join(format!("{v}.uwcn"));
        let metrics = args.out_dir.join(format!("{v}.metrics.tsv"));
        let started = std::time::Instant::now();
        train_with_dump(&mut trainer, &pairs, &metrics, &checkpoint)?;
        let train_time = started.elapsed();
        write_checkpoint(&checkpoint, &trainer.model, &tag)?;
        let digest = train::order_digest(
            &trainer
                .order_digests
                .iter()
                .map(|&d| d as usize)
                .collect::<Vec<_>>(),
        );
        eprintln!("# {v} shuffle-order digest {digest:016x}");
        let enhanced = args.out_dir.join(v.name());
        enhance_manifest(&trainer.model, &val_manifest, &enhanced)?;
        let validation = evaluate_pairs(&val_manifest, &enhanced)?;
        imageio::atomic_write(&enhanced.join("report.tsv"), validation.to_text().as_bytes())?;
        variants.push(VariantResult {
            variant: v,
            trainer,
            validation,
            train_time,
        });
    }
    if variants
        .windows(2)
        .any(|w| w[0].trainer.order_digests != w[1].trainer.order_digests)
    {
        return Err(Error::State("ablation variants saw different sample orders".into()));
    }
    let raw = evaluate_pairs(&val_manifest, val_manifest.base_dir())?;
    let table = ablation_table(&variants);
    imageio::atomic_write(&args.out_dir.join("ablation.tsv"), table.as_bytes())?;
    Ok(AblationOutcome {
        variants,
        raw,
        table,
    })
}

/// Writes `count` procedural scenes (`scene_NN.png` + `scene_NN_depth.png`)
/// and a `sources.tsv` manifest listing them.
pub fn scenes_cmd(args: &ScenesArgs, seed: u64) -> Result<DatasetManifest> {
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut manifest = DatasetManifest::new(&args.out);
    for i in 0..args.count {
        let s = scene::generate(seed.wrapping_add(i as u64), args.size, args.size)?;
        let image = format!("scene_{i:02}.png");
        let depth = format!("scene_{i:02}_depth.png");
        imageio::write_image(&s.image, args.out.join(&image))?;
        imageio::write_depth(&s.depth, args.out.join(&depth))?;
        manifest.push(ManifestEntry {
            first: image,
            second: depth,
            synthesis: None,
        })?;
    }
    write_manifest(&manifest, args.out.join("sources.tsv"))?;
    Ok(manifest)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let seed = cli.seed;
    match &cli.command {
        Command::Synth(a) => {
            print_config(
                "synth",
                &[
                    ("manifest", a.manifest.display().to_string()),
                    ("water_type", a.water_type.to_string()),
                    ("variants", a.variants.to_string()),
                    ("resize", opt(&a.resize.0)),
                    ("out", a.out.display().to_string()),
                    ("seed", seed.to_string()),
                ],
            );
            let m = synth(a, seed)?;
            println!("{} pairs written to {}", m.len(), a.out.display());
        }
        Command::Train(a) => {
            train_cmd(a, seed)?;
        }
        Command::Enhance(a) => {
            let outs = enhance_cmd(a)?;
            println!("{} image(s) enhanced", outs.len());
        }
        Command::Eval(a) => {
            print!("{}", eval_cmd(a)?.to_text());
        }
        Command::Gradcheck(a) => {
            let report = gradcheck_cmd(a, seed)?;
            print!("{}", report.to_text());
            if !report.passed() {
                let worst = report
                    .checks
                    .iter()
                    .max_by(|x, y| x.report.max_rel_error.total_cmp(&y.report.max_rel_error))
                    .expect("suite has checks");
                eprintln!(
                    "gradient check FAILED: {} max relative error {:.3e} at index {}",
                    worst.name,
                    worst.report.max_rel_error,
                    opt(&worst.report.worst_index)
                );
                return Ok(EXIT_GRADCHECK);
            }
            println!("gradient check passed");
        }
        Command::Ablate(a) => {
            print!("{}", ablate_cmd(a, seed)?.table);
        }
        Command::Scenes(a) => {
            let m = scenes_cmd(a, seed)?;
            println!("{} scenes written to {}", m.len(), a.out.display());
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if cli.threads > 0 {
        // Fails only if a pool already exists (e.g. when called twice in one process).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
