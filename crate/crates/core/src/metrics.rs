//! Hierarchical evaluation measures over ancestor-closure sets: symmetric
//! difference loss (SDL), hierarchical precision and hierarchical recall.

use serde::Serialize;
use thiserror::Error;

use std::collections::HashMap;

use crate::hierarchy::{Hierarchy, HierarchyError, LabelPath, NodeSet};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("hierarchical precision is undefined for an empty prediction set")]
    EmptyPrediction,
    #[error("hierarchical recall is undefined for an empty ground-truth set")]
    EmptyTruth,
    #[error("{truths} truths but {preds} predictions")]
    LengthMismatch { truths: usize, preds: usize },
    #[error("sample {index}: {source}")]
    InvalidPath {
        index: usize,
        #[source]
        source: HierarchyError,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("image id {0} appears more than once")]
    DuplicateId(String),
    #[error("image id {0} has a truth but no prediction")]
    MissingPrediction(String),
    #[error("image id {0} has a prediction but no truth")]
    UnexpectedPrediction(String),
}

/// `|(S \ Ŝ) ∪ (Ŝ \ S)|`
pub fn sdl(truth: &NodeSet, pred: &NodeSet) -> usize {
    truth.symmetric_difference_len(pred)
}

/// `|S ∩ Ŝ| / |Ŝ|`; penalizes over-specific predictions.
pub fn hierarchical_precision(truth: &NodeSet, pred: &NodeSet) -> Result<f64, MetricsError> {
    if pred.is_empty() {
        return Err(MetricsError::EmptyPrediction);
    }
    Ok(truth.intersection_len(pred) as f64 / pred.len() as f64)
}

/// `|S ∩ Ŝ| / |S|`; penalizes under-specific predictions.
pub fn hierarchical_recall(truth: &NodeSet, pred: &NodeSet) -> Result<f64, MetricsError> {
    if truth.is_empty() {
        return Err(MetricsError::EmptyTruth);
    }
    Ok(truth.intersection_len(pred) as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleScore {
    pub sdl: usize,
    pub ph: f64,
    pub rh: f64,
}

pub fn score(truth: &NodeSet, pred: &NodeSet) -> Result<SampleScore, MetricsError> {
    Ok(SampleScore {
        sdl: sdl(truth, pred),
        ph: hierarchical_precision(truth, pred)?,
        rh: hierarchical_recall(truth, pred)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub sdl_mean: f64,
    pub ph_mean: f64,
    pub rh_mean: f64,
    pub per_sample: Vec<SampleScore>,
}

impl MetricReport {
    pub fn from_scores(per_sample: Vec<SampleScore>) -> Self {
        let n = per_sample.len();
        if n == 0 {
            return Self {
                sdl_mean: 0.0,
                ph_mean: 0.0,
                rh_mean: 0.0,
                per_sample,
            };
        }
        let sdl_total: usize = per_sample.iter().map(|s| s.sdl).sum();
        let ph: Vec<f64> = per_sample.iter().map(|s| s.ph).collect();
        let rh: Vec<f64> = per_sample.iter().map(|s| s.rh).collect();
        Self {
            sdl_mean: sdl_total as f64 / n as f64,
            ph_mean: order_free_sum(ph) / n as f64,
            rh_mean: order_free_sum(rh) / n as f64,
            per_sample,
        }
    }
}

/// Sums after sorting, with Neumaier compensation, so the result does not
/// depend on input order.
fn order_free_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Scores paired truth/prediction paths through their ancestor closures.
pub fn evaluate_manifest(
    truths: &[LabelPath],
    preds: &[LabelPath],
    h: &Hierarchy,
) -> Result<MetricReport, MetricsError> {
    if truths.len() != preds.len() {
        return Err(MetricsError::LengthMismatch {
            truths: truths.len(),
            preds: preds.len(),
        });
    }
    let per_sample = truths
        .iter()
        .zip(preds)
        .enumerate()
        .map(|(index, (t, p))| {
            let invalid = |source| MetricsError::InvalidPath { index, source };
            let s = h.ancestor_closure(t).map_err(invalid)?;
            let s_hat = h.ancestor_closure(p).map_err(invalid)?;
            score(&s, &s_hat)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricReport::from_scores(per_sample))
}

/// Marks the levels below a truncated path in the tab-separated format.
pub const TRUNCATED: &str = "None";

/// `image_id<TAB>a/b/None`: the path padded with [`TRUNCATED`] to the full
/// depth.
pub fn format_path_line(image_id: &str, path: &LabelPath, h: &Hierarchy) -> String {
    let mut names = h.path_names(path);
    names.resize(h.depth(), TRUNCATED.to_string());
    format!("{image_id}\t{}", names.join("/"))
}

/// Parses the tab-separated path format. Blank lines and `#` comments are
/// skipped; ids must be unique.
pub fn parse_path_lines(text: &str, h: &Hierarchy) -> Result<Vec<(String, LabelPath)>, MetricsError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse = |message: String| MetricsError::Parse { line: i + 1, message };
        let (id, path) = line
            .split_once('\t')
            .ok_or_else(|| parse(format!("expected `image_id<TAB>path`, got {line:?}")))?;
        let names: Vec<&str> = path.split('/').collect();
        let cut = names.iter().position(|n| *n == TRUNCATED).unwrap_or(names.len());
        if names[cut..].iter().any(|n| *n != TRUNCATED) {
            return Err(parse(format!("a class name follows {TRUNCATED} in {path:?}")));
        }
        let path = h.path_from_names(&names[..cut]).map_err(|e| parse(e.to_string()))?;
        if !seen.insert(id.to_string()) {
            return Err(MetricsError::DuplicateId(id.to_string()));
        }
        out.push((id.to_string(), path));
    }
    Ok(out)
}

/// Pairs predictions with truths by image id (in truth order) and scores
/// them. Every truth needs exactly one prediction and vice versa.
pub fn evaluate_by_id(
    truths: &[(String, LabelPath)],
    preds: &[(String, LabelPath)],
    h: &Hierarchy,
) -> Result<MetricReport, MetricsError> {
    let mut by_id: HashMap<&str, &LabelPath> = HashMap::new();
    for (id, p) in preds {
        if by_id.insert(id.as_str(), p).is_some() {
            return Err(MetricsError::DuplicateId(id.clone()));
        }
    }
    let mut paired = Vec::with_capacity(truths.len());
    for (id, _) in truths {
        let p = by_id.remove(id.as_str()).ok_or_else(|| MetricsError::MissingPrediction(id.clone()))?;
        paired.push(p.clone());
    }
    if let Some((id, _)) = preds.iter().find(|(id, _)| by_id.contains_key(id.as_str())) {
        return Err(MetricsError::UnexpectedPrediction(id.clone()));
    }
    let truth_paths: Vec<LabelPath> = truths.iter().map(|(_, p)| p.clone()).collect();
    evaluate_manifest(&truth_paths, &paired, h)
}
