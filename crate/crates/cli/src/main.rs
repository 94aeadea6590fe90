use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use hiertool::dataset::{
    build_dataset, generate_sources, read_manifest, read_sources, summarize, write_build, write_sources, Annotator,
    BuildConfig, DatasetRecord, PerfectAnnotator, Split, SyntheticAnnotator, SynthSourceConfig,
};
use hiertool::distortion::DistortionRanges;
use hiertool::embeddings::{build_query_matrix, WordVectorTable};
use hiertool::gradcheck::{self, RunOptions};
use hiertool::hierarchy::{Hierarchy, LabelPath};
use hiertool::image::Image;
use hiertool::metrics::{evaluate_by_id, format_path_line, parse_path_lines, MetricReport};
use hiertool::model::{self, LossWeights, ModelConfig, SghpnModel, Target, TrainConfig, TrainSample};
use hiertool::tensor::OpKind;

#[derive(Parser)]
#[command(name = "hiertool", version, about = "Level-annotated hierarchical image classification toolkit")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic source images for a hierarchy.
    Sources(SourcesArgs),
    /// Distort and annotate sources into a level-labeled dataset.
    Synth(SynthArgs),
    /// Print per-level record counts of a dataset manifest.
    Summarize(SummarizeArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Predict category paths for images with a trained checkpoint.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SourcesArgs {
    #[arg(long)]
    hierarchy: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AnnotatorKind {
    Synthetic,
    Perfect,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    hierarchy: PathBuf,
    /// Directory holding `sources.jsonl` and its images.
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 25)]
    max_retries: usize,
    #[arg(long, value_enum, default_value = "synthetic")]
    annotator: AnnotatorKind,
    /// TOML file with `sigma`, `eta`, `lambda_rate` and `delta` ranges as
    /// two-element arrays.
    #[arg(long)]
    ranges: Option<PathBuf>,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(long)]
    hierarchy: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    hierarchy: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Word vectors in the whitespace-separated text format.
    #[arg(long)]
    vectors: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch losses file; defaults to the checkpoint path with a
    /// `.losses.tsv` extension.
    #[arg(long)]
    losses: Option<PathBuf>,
    /// TOML training config; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Train on the first training record only, without augmentation.
    #[arg(long)]
    overfit_one: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    hierarchy: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest whose images to classify.
    #[arg(long, conflicts_with = "images", required_unless_present = "images")]
    manifest: Option<PathBuf>,
    /// Only classify manifest records of this split.
    #[arg(long, requires = "manifest")]
    split: Option<SplitArg>,
    /// Directory of PNG images; ids are the file stems.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Predictions file, one `image_id<TAB>path` line per image.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    hierarchy: PathBuf,
    /// Truth file: tab-separated paths or a dataset manifest.
    #[arg(long)]
    truth: PathBuf,
    /// Prediction file: tab-separated paths or a dataset manifest.
    #[arg(long)]
    pred: PathBuf,
    /// Only score manifest records of this split.
    #[arg(long)]
    split: Option<SplitArg>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Comma-separated check names; all when absent.
    #[arg(long, value_delimiter = ',')]
    ops: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Parameters sampled by the end-to-end model check.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("HIERTOOL_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("HIERTOOL_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let json = cli.json;
    match cli.command {
        Command::Sources(a) => cmd_sources(a, json),
        Command::Synth(a) => cmd_synth(a, json),
        Command::Summarize(a) => cmd_summarize(a, json),
        Command::Train(a) => cmd_train(a, json),
        Command::Infer(a) => cmd_infer(a, json),
        Command::Eval(a) => cmd_eval(a, json),
        Command::Gradcheck(a) => cmd_gradcheck(a, json),
    }
}

/// Fixed stream labels for deriving independent generators from `--seed`.
const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;

fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

fn load_hierarchy(path: &Path) -> Result<Hierarchy> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Hierarchy::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_sources(a: SourcesArgs, json: bool) -> Result<ExitCode> {
    let h = load_hierarchy(&a.hierarchy)?;
    let cfg = SynthSourceConfig {
        count: a.count,
        image_size: a.image_size,
        test_fraction: a.test_fraction,
        seed: a.seed,
    };
    let items = generate_sources(&h, &cfg)?;
    write_sources(&a.out, &items, &h)?;
    if json {
        print_json(&serde_json::json!({ "sources": items.len(), "out": a.out }))?;
    } else {
        println!("wrote {} sources to {}", items.len(), a.out.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(a: SynthArgs, json: bool) -> Result<ExitCode> {
    let ranges = match &a.ranges {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<DistortionRanges>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => DistortionRanges::default(),
    };
    let cfg = BuildConfig {
        seed: a.seed,
        max_retries: a.max_retries,
        ranges,
    };
    cfg.validate()?;
    let h = load_hierarchy(&a.hierarchy)?;
    let sources = read_sources(&a.source, &h)?;
    let synthetic;
    let annotator: &dyn Annotator = match a.annotator {
        AnnotatorKind::Perfect => &PerfectAnnotator,
        AnnotatorKind::Synthetic => {
            synthetic = SyntheticAnnotator::new(h.clone());
            &synthetic
        }
    };
    let build = build_dataset(&sources, annotator, &h, &cfg)?;
    let manifest = write_build(&build, &h, &a.out)?;
    let summary = summarize(&build.records(), h.level_names());
    if json {
        print_json(&serde_json::json!({
            "manifest": manifest,
            "records": build.accepted.len(),
            "skipped": build.skipped.len(),
            "summary": summary,
        }))?;
    } else {
        println!("{summary}");
        println!(
            "{} records, {} sources skipped; manifest at {}",
            build.accepted.len(),
            build.skipped.len(),
            manifest.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_summarize(a: SummarizeArgs, json: bool) -> Result<ExitCode> {
    let h = load_hierarchy(&a.hierarchy)?;
    let records = read_manifest(&a.manifest, &h)?;
    let summary = summarize(&records, h.level_names());
    if json {
        print_json(&summary)?;
    } else {
        println!("{summary}");
    }
    Ok(ExitCode::SUCCESS)
}

/// Training config file. Every key is optional; absent keys keep their
/// defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    epochs: Option<usize>,
    lr: Option<f64>,
    momentum: Option<f64>,
    batch: Option<usize>,
    augment: Option<bool>,
    level_weight: Option<f64>,
    category_weight: Option<f64>,
    image_size: Option<usize>,
    patch_size: Option<usize>,
    width: Option<usize>,
    encoder_blocks: Option<usize>,
    decoder_blocks: Option<usize>,
    heads: Option<usize>,
    mlp_ratio: Option<usize>,
    use_sgca: Option<bool>,
}

fn image_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_record_image(base: &Path, r: &DatasetRecord) -> Result<Image> {
    let path = base.join(&r.image_path);
    Image::load_png(&path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_train(a: TrainArgs, json: bool) -> Result<ExitCode> {
    let file = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<TrainFile>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainFile::default(),
    };
    let h = load_hierarchy(&a.hierarchy)?;
    let table = WordVectorTable::load(&a.vectors, infer_dim(&a.vectors)?)?;
    let queries = build_query_matrix(&table, &h)?;

    let mut mc = ModelConfig::toy(h.level_sizes(), queries.dim());
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut mc.image_size, a.image_size.or(file.image_size));
    set(&mut mc.patch_size, file.patch_size);
    set(&mut mc.width, file.width);
    set(&mut mc.encoder_blocks, file.encoder_blocks);
    set(&mut mc.decoder_blocks, file.decoder_blocks);
    set(&mut mc.heads, file.heads);
    set(&mut mc.mlp_ratio, file.mlp_ratio);
    if let Some(v) = file.use_sgca {
        mc.use_sgca = v;
    }
    mc.validate()?;

    let defaults = TrainConfig::default();
    let tc = TrainConfig {
        epochs: a.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        lr: a.lr.or(file.lr).unwrap_or(defaults.lr),
        momentum: a.momentum.or(file.momentum).unwrap_or(defaults.momentum),
        batch: a.batch.or(file.batch).unwrap_or(defaults.batch),
        seed: derive_seed(a.seed, STREAM_TRAIN),
        augment: !a.overfit_one && file.augment.unwrap_or(defaults.augment),
        loss: LossWeights {
            level: file.level_weight.unwrap_or(defaults.loss.level),
            category: file.category_weight.unwrap_or(defaults.loss.category),
        },
    };

    let records = read_manifest(&a.manifest, &h)?;
    let base = image_dir(&a.manifest);
    let mut train_records: Vec<&DatasetRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
    if a.overfit_one {
        train_records.truncate(1);
    }
    if train_records.is_empty() {
        bail!("{} has no training records", a.manifest.display());
    }
    let data = train_records
        .iter()
        .map(|r| {
            Ok(TrainSample {
                image: load_record_image(&base, r)?,
                target: Target::from_path(&h, &r.category_path)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut m = SghpnModel::new(mc, Some(&queries), derive_seed(a.seed, STREAM_INIT))?;
    let initial = model::mean_loss(&m, &data, tc.loss)?;
    let report = model::train(&mut m, &data, &tc)?;
    let last = model::mean_loss(&m, &data, tc.loss)?;
    m.save(&a.out)?;

    let losses_path = a.losses.unwrap_or_else(|| a.out.with_extension("losses.tsv"));
    let mut text = String::from("epoch\tloss\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        text.push_str(&format!("{}\t{l}\n", i + 1));
    }
    fs::write(&losses_path, text).with_context(|| format!("writing {}", losses_path.display()))?;

    if json {
        print_json(&serde_json::json!({
            "samples": data.len(),
            "steps": report.steps,
            "initial_loss": initial,
            "final_loss": last,
            "epoch_losses": report.epoch_losses,
            "checkpoint": a.out,
            "losses": losses_path,
        }))?;
    } else {
        println!(
            "trained on {} samples for {} epochs ({} steps); loss {initial:.4} -> {last:.4}",
            data.len(),
            tc.epochs,
            report.steps
        );
        println!("checkpoint {}; losses {}", a.out.display(), losses_path.display());
    }
    Ok(ExitCode::SUCCESS)
}

/// Width of the first vector line.
fn infer_dim(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .with_context(|| format!("{} is empty", path.display()))?;
    Ok(line.split_whitespace().count() - 1)
}

#[derive(Serialize)]
struct PredictionOut {
    image_id: String,
    level: String,
    path: Vec<String>,
}

fn cmd_infer(a: InferArgs, json: bool) -> Result<ExitCode> {
    let h = load_hierarchy(&a.hierarchy)?;
    let m = SghpnModel::load(&a.checkpoint)?;
    m.check_hierarchy(&h)?;

    let inputs: Vec<(String, PathBuf)> = if let Some(manifest) = &a.manifest {
        let base = image_dir(manifest);
        let split = a.split.map(Split::from);
        read_manifest(manifest, &h)?
            .into_iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .map(|r| (r.image_id, base.join(r.image_path)))
            .collect()
    } else {
        let dir = a.images.as_ref().expect("clap requires --manifest or --images");
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
        files.sort();
        files
            .into_iter()
            .map(|p| (p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), p))
            .collect()
    };

    let mut lines = String::new();
    let mut out = Vec::with_capacity(inputs.len());
    for (id, path) in &inputs {
        let img = Image::load_png(path).with_context(|| format!("loading {}", path.display()))?;
        let p = m.predict(&img, &h)?;
        lines.push_str(&format_path_line(id, &p.path, &h));
        lines.push('\n');
        out.push(PredictionOut {
            image_id: id.clone(),
            level: h.level_name(p.level).to_string(),
            path: h.path_names(&p.path),
        });
    }
    fs::write(&a.out, lines).with_context(|| format!("writing {}", a.out.display()))?;
    if json {
        print_json(&out)?;
    } else {
        println!("wrote {} predictions to {}", out.len(), a.out.display());
    }
    Ok(ExitCode::SUCCESS)
}

/// Reads either format: JSON manifests start with `{`.
/// `split` filters manifest records; tab-separated files carry no split.
fn read_paths(path: &Path, h: &Hierarchy, split: Option<Split>) -> Result<Vec<(String, LabelPath)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('{') {
        Ok(read_manifest(path, h)?
            .into_iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .map(|r| (r.image_id, r.category_path))
            .collect())
    } else {
        parse_path_lines(&text, h).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Serialize)]
struct EvalOut {
    samples: usize,
    sdl: f64,
    ph_percent: f64,
    rh_percent: f64,
}

fn cmd_eval(a: EvalArgs, json: bool) -> Result<ExitCode> {
    let h = load_hierarchy(&a.hierarchy)?;
    let split = a.split.map(Split::from);
    let truths = read_paths(&a.truth, &h, split)?;
    let preds = read_paths(&a.pred, &h, split)?;
    let report: MetricReport = evaluate_by_id(&truths, &preds, &h)?;
    let out = EvalOut {
        samples: report.per_sample.len(),
        sdl: report.sdl_mean,
        ph_percent: 100.0 * report.ph_mean,
        rh_percent: 100.0 * report.rh_mean,
    };
    let text = if json {
        serde_json::to_string_pretty(&out)?
    } else {
        format!(
            "{:>8}  {:>8}  {:>8}\n{:>8.4}  {:>8.2}  {:>8.2}",
            "SDL", "P_H(%)", "R_H(%)", out.sdl, out.ph_percent, out.rh_percent
        )
    };
    println!("{text}");
    if let Some(p) = &a.out {
        fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs, json: bool) -> Result<ExitCode> {
    let fault = match &a.inject_fault {
        Some(name) => Some(OpKind::from_name(name).with_context(|| format!("no operation named {name:?}"))?),
        None => None,
    };
    let opts = RunOptions {
        only: a.ops,
        seed: a.seed,
        model_samples: a.samples,
        fault,
    };
    let results = gradcheck::run(&opts)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if json {
        print_json(&results)?;
    } else {
        for r in &results {
            println!(
                "{:<14} {}  max rel err {:.3e} (tol {:.0e}, {} coords)",
                r.name,
                if r.passed { "ok  " } else { "FAIL" },
                r.max_rel_error,
                r.tolerance,
                r.checked
            );
        }
        if failed.is_empty() {
            println!("all {} checks passed", results.len());
        } else {
            println!("failed: {}", failed.join(", "));
        }
    }
    Ok(if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
