//! Level-annotated dataset synthesis.
//!
//! Each source image is distorted with a random [`DistortionSpec`] and shown
//! to an [`Annotator`]. A prediction that is correct at the top level is
//! hierarchically legal, and the image is labeled at the deepest level the
//! annotator got right. Illegal predictions trigger a fresh distortion, up to
//! `max_retries` attempts per source.

mod annotator;
pub mod sources;

pub use annotator::{severity, AnnotationQuery, Annotator, PerfectAnnotator, SyntheticAnnotator};
pub use sources::{generate_sources, read_sources, write_sources, SourceItem, SynthSourceConfig};

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distortion::{self, BlurParams, DistortionError, DistortionKind, DistortionRanges, DistortionSpec};
use crate::hierarchy::{CorrectnessVector, Hierarchy, HierarchyError, LabelPath};
use crate::image::{Image, ImageError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Distortion(#[from] DistortionError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("paths have different lengths: truth {truth}, prediction {pred}")]
    DepthMismatch { truth: usize, pred: usize },
    #[error("correctness vector {0} is not hierarchically legal")]
    Illegal(CorrectnessVector),
    #[error("annotator returned an invalid path for {source_id}: {reason}")]
    InvalidAnnotation { source_id: String, reason: String },
    #[error("source {source_id} is not labeled to the leaf level")]
    ShallowSource { source_id: String },
    #[error("source id {0} appears more than once")]
    DuplicateSource(String),
    #[error("unknown level name {0}")]
    UnknownLevel(String),
    #[error("invalid build config: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Per-level agreement between a true and a predicted full-depth path.
pub fn correctness(truth: &LabelPath, pred: &LabelPath) -> Result<CorrectnessVector, DatasetError> {
    if truth.len() != pred.len() {
        return Err(DatasetError::DepthMismatch {
            truth: truth.len(),
            pred: pred.len(),
        });
    }
    Ok(CorrectnessVector(
        truth.ids().iter().zip(pred.ids()).map(|(a, b)| a == b).collect(),
    ))
}

/// Level label of a legal correctness vector: its last correct level.
pub fn assign_level(v: &CorrectnessVector) -> Result<usize, DatasetError> {
    v.finest_correct_level().ok_or_else(|| DatasetError::Illegal(v.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub seed: u64,
    pub max_retries: usize,
    pub ranges: DistortionRanges,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_retries: 25,
            ranges: DistortionRanges::default(),
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.max_retries == 0 {
            return Err(DatasetError::Config("max_retries must be at least 1".into()));
        }
        self.ranges.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub image_id: String,
    /// Relative to the manifest's directory.
    pub image_path: PathBuf,
    /// Truncated at the level label.
    pub category_path: LabelPath,
    pub level: usize,
    pub spec: DistortionSpec,
    pub source_id: String,
    /// 1-based index of the accepted attempt.
    pub attempts: usize,
    pub split: Split,
}

/// One annotator consultation, for the diagnostics sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptLog {
    pub source_id: String,
    pub attempt: usize,
    pub predicted: Vec<String>,
    pub correctness: Vec<u8>,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct Accepted {
    pub record: DatasetRecord,
    pub image: Image,
}

#[derive(Debug, Clone, Default)]
pub struct Build {
    pub accepted: Vec<Accepted>,
    /// Sources that exhausted their retries.
    pub skipped: Vec<String>,
    pub attempts: Vec<AttemptLog>,
}

impl Build {
    pub fn records(&self) -> Vec<DatasetRecord> {
        self.accepted.iter().map(|a| a.record.clone()).collect()
    }
}

enum Outcome {
    Accepted(Accepted, Vec<AttemptLog>),
    Skipped(String, Vec<AttemptLog>),
}

/// Runs the distort/annotate/check loop for every source. Sources are
/// processed in parallel, each with its own random stream, and results are
/// kept in source order, so the output depends only on the inputs and the
/// seed.
pub fn build_dataset<A: Annotator + ?Sized>(
    sources: &[SourceItem],
    annotator: &A,
    h: &Hierarchy,
    cfg: &BuildConfig,
) -> Result<Build, DatasetError> {
    cfg.validate()?;
    let mut seen = std::collections::HashSet::new();
    for s in sources {
        if !seen.insert(s.source_id.as_str()) {
            return Err(DatasetError::DuplicateSource(s.source_id.clone()));
        }
        h.path(s.path.ids().to_vec())?;
        if s.path.len() != h.depth() {
            return Err(DatasetError::ShallowSource {
                source_id: s.source_id.clone(),
            });
        }
    }

    let outcomes = sources
        .par_iter()
        .enumerate()
        .map(|(index, src)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(index as u64);
            process_source(src, annotator, h, cfg, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut build = Build::default();
    for o in outcomes {
        match o {
            Outcome::Accepted(a, logs) => {
                build.accepted.push(a);
                build.attempts.extend(logs);
            }
            Outcome::Skipped(id, logs) => {
                build.skipped.push(id);
                build.attempts.extend(logs);
            }
        }
    }
    Ok(build)
}

fn process_source<A: Annotator + ?Sized>(
    src: &SourceItem,
    annotator: &A,
    h: &Hierarchy,
    cfg: &BuildConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Outcome, DatasetError> {
    let mut logs = Vec::new();
    for attempt in 1..=cfg.max_retries {
        let spec = distortion::sample_spec(&cfg.ranges, rng);
        let image = distortion::apply(&src.image, &spec, &src.region, rng)?;
        let pred = annotator.annotate(
            &AnnotationQuery {
                image: &image,
                truth: &src.path,
                spec: &spec,
            },
            rng,
        );
        let invalid = |reason: String| DatasetError::InvalidAnnotation {
            source_id: src.source_id.clone(),
            reason,
        };
        h.path(pred.ids().to_vec()).map_err(|e| invalid(e.to_string()))?;
        if pred.len() != h.depth() {
            return Err(invalid(format!("{} levels, expected {}", pred.len(), h.depth())));
        }
        let v = correctness(&src.path, &pred)?;
        let legal = v.is_legal();
        logs.push(AttemptLog {
            source_id: src.source_id.clone(),
            attempt,
            predicted: h.path_names(&pred),
            correctness: v.bits(),
            accepted: legal,
        });
        if legal {
            let level = assign_level(&v)?;
            let record = DatasetRecord {
                image_id: src.source_id.clone(),
                image_path: Path::new("images").join(format!("{}.png", src.source_id)),
                category_path: src.path.truncate(level)?,
                level,
                spec,
                source_id: src.source_id.clone(),
                attempts: attempt,
                split: src.split,
            };
            return Ok(Outcome::Accepted(Accepted { record, image }, logs));
        }
    }
    Ok(Outcome::Skipped(src.source_id.clone(), logs))
}

/// `distortion` object of a manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionEntry {
    pub types: Vec<DistortionKind>,
    pub sigma: Option<f64>,
    pub eta: Option<usize>,
    pub lambda: Option<f64>,
    pub delta: Option<f64>,
    pub angle: Option<f64>,
}

impl From<&DistortionSpec> for DistortionEntry {
    fn from(s: &DistortionSpec) -> Self {
        Self {
            types: s.kinds(),
            sigma: s.sigma,
            eta: s.blur.map(|b| b.eta),
            lambda: s.lambda_rate,
            delta: s.delta,
            angle: s.blur.map(|b| b.angle),
        }
    }
}

impl DistortionEntry {
    fn to_spec(&self) -> Result<DistortionSpec, String> {
        let blur = match (self.eta, self.angle) {
            (Some(eta), Some(angle)) => Some(BlurParams { eta, angle }),
            (None, None) => None,
            _ => return Err("eta and angle must appear together".into()),
        };
        let spec = DistortionSpec {
            sigma: self.sigma,
            blur,
            lambda_rate: self.lambda,
            delta: self.delta,
        };
        if spec.kinds() != self.types {
            return Err(format!("types {:?} disagree with the parameters present", self.types));
        }
        Ok(spec)
    }
}

/// One manifest line, field order as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub image_id: String,
    pub image_path: String,
    pub category_path: Vec<String>,
    pub level_label: String,
    pub distortion: DistortionEntry,
    pub source_id: String,
    pub attempts: usize,
    pub split: Split,
}

impl DatasetRecord {
    pub fn to_line(&self, h: &Hierarchy) -> ManifestLine {
        ManifestLine {
            image_id: self.image_id.clone(),
            image_path: self.image_path.to_string_lossy().replace('\\', "/"),
            category_path: h.path_names(&self.category_path),
            level_label: h.level_name(self.level).to_string(),
            distortion: DistortionEntry::from(&self.spec),
            source_id: self.source_id.clone(),
            attempts: self.attempts,
            split: self.split,
        }
    }

    pub fn from_line(line: &ManifestLine, h: &Hierarchy) -> Result<Self, DatasetError> {
        let level = h
            .level_index(&line.level_label)
            .ok_or_else(|| DatasetError::UnknownLevel(line.level_label.clone()))?;
        let category_path = h.path_from_names(&line.category_path)?;
        if category_path.len() != level + 1 {
            return Err(DatasetError::Config(format!(
                "{}: path has {} levels but the level label is {}",
                line.image_id,
                category_path.len(),
                line.level_label
            )));
        }
        Ok(Self {
            image_id: line.image_id.clone(),
            image_path: PathBuf::from(&line.image_path),
            category_path,
            level,
            spec: line.distortion.to_spec().map_err(DatasetError::Config)?,
            source_id: line.source_id.clone(),
            attempts: line.attempts,
            split: line.split,
        })
    }
}

pub fn manifest_text(records: &[DatasetRecord], h: &Hierarchy) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&r.to_line(h)).expect("manifest lines serialize"));
        out.push('\n');
    }
    out
}

pub fn read_manifest(path: &Path, h: &Hierarchy) -> Result<Vec<DatasetRecord>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(DatasetRecord::from_line(&parsed, h)?);
    }
    Ok(out)
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.jsonl";

#[derive(Serialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum Diagnostic<'a> {
    Attempt(&'a AttemptLog),
    Skip { source_id: &'a str },
}

/// Writes the distorted images, `manifest.jsonl` and the `diagnostics.jsonl`
/// sidecar under `out`.
pub fn write_build(build: &Build, h: &Hierarchy, out: &Path) -> Result<PathBuf, DatasetError> {
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    build
        .accepted
        .par_iter()
        .try_for_each(|a| a.image.save_png(&out.join(&a.record.image_path)))?;

    let manifest = out.join(MANIFEST_FILE);
    fs::write(&manifest, manifest_text(&build.records(), h)).map_err(io_err(&manifest))?;

    let diag_path = out.join(DIAGNOSTICS_FILE);
    let mut w = BufWriter::new(File::create(&diag_path).map_err(io_err(&diag_path))?);
    let mut emit = |d: Diagnostic<'_>| -> Result<(), DatasetError> {
        let line = serde_json::to_string(&d).expect("diagnostics serialize");
        writeln!(w, "{line}").map_err(io_err(&diag_path))
    };
    for a in &build.attempts {
        emit(Diagnostic::Attempt(a))?;
    }
    for s in &build.skipped {
        emit(Diagnostic::Skip { source_id: s })?;
    }
    w.flush().map_err(io_err(&diag_path))?;
    Ok(manifest)
}

/// Record counts per level and split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub level_names: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Summary {
    pub fn per_level_totals(&self) -> Vec<usize> {
        self.train.iter().zip(&self.test).map(|(a, b)| a + b).collect()
    }

    pub fn total(&self) -> usize {
        self.per_level_totals().iter().sum()
    }
}

pub fn summarize(records: &[DatasetRecord], level_names: &[String]) -> Summary {
    let mut s = Summary {
        level_names: level_names.to_vec(),
        train: vec![0; level_names.len()],
        test: vec![0; level_names.len()],
    };
    for r in records {
        let row = match r.split {
            Split::Train => &mut s.train,
            Split::Test => &mut s.test,
        };
        if let Some(c) = row.get_mut(r.level) {
            *c += 1;
        }
    }
    s
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.level_names.iter().map(String::len).max().unwrap_or(0).max(5);
        writeln!(f, "{:<width$}  {:>7}  {:>7}  {:>7}", "level", "train", "test", "total")?;
        let totals = self.per_level_totals();
        for (i, name) in self.level_names.iter().enumerate() {
            writeln!(
                f,
                "{name:<width$}  {:>7}  {:>7}  {:>7}",
                self.train[i], self.test[i], totals[i]
            )?;
        }
        write!(
            f,
            "{:<width$}  {:>7}  {:>7}  {:>7}",
            "total",
            self.train.iter().sum::<usize>(),
            self.test.iter().sum::<usize>(),
            self.total()
        )
    }
}
