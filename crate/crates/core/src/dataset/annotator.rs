use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::distortion::DistortionSpec;
use crate::hierarchy::{Hierarchy, LabelPath};
use crate::image::Image;

/// What an annotator sees for one distorted image. Oracles that classify
/// pixels use `image`; simulated ones may use the truth and the distortion
/// strengths instead.
#[derive(Debug, Clone, Copy)]
pub struct AnnotationQuery<'a> {
    pub image: &'a Image,
    pub truth: &'a LabelPath,
    pub spec: &'a DistortionSpec,
}

/// Classifier consulted for every distorted image. Must return a full-depth
/// path.
pub trait Annotator: Sync {
    fn annotate(&self, query: &AnnotationQuery<'_>, rng: &mut ChaCha8Rng) -> LabelPath;
}

/// Always answers with the true path.
#[derive(Debug, Clone, Copy, Default)]
pub struct PerfectAnnotator;

impl Annotator for PerfectAnnotator {
    fn annotate(&self, query: &AnnotationQuery<'_>, _: &mut ChaCha8Rng) -> LabelPath {
        query.truth.clone()
    }
}

/// Reference strengths used to put the four distortions on a common scale:
/// each term is 1 at the top of its default range.
const SIGMA_REF: f64 = 0.2;
const ETA_REF: f64 = 14.0;
const SHRINK_REF: f64 = 0.6;
const DELTA_REF: f64 = 0.06;

/// Sum of the selected distortions' strengths, each scaled so that the top
/// of its default range counts as 1.
pub fn severity(spec: &DistortionSpec) -> f64 {
    spec.sigma.map_or(0.0, |s| s / SIGMA_REF)
        + spec.blur.map_or(0.0, |b| b.eta as f64 / ETA_REF)
        + spec.lambda_rate.map_or(0.0, |l| (1.0 - l) / SHRINK_REF)
        + spec.delta.map_or(0.0, |d| d / DELTA_REF)
}

/// Simulated annotator whose accuracy falls with distortion strength. Going
/// down the tree, it stays correct at level `k` with probability
/// `exp(-rates[k] * severity)`; after the first miss it picks a wrong node
/// at that level (a sibling when one exists) and a random descendant chain
/// below it.
#[derive(Debug, Clone)]
pub struct SyntheticAnnotator {
    hierarchy: Hierarchy,
    leaves: Vec<LabelPath>,
    rates: Vec<f64>,
}

impl SyntheticAnnotator {
    /// Default per-level rates grow with depth so that fine levels are lost
    /// first.
    pub fn new(hierarchy: Hierarchy) -> Self {
        let depth = hierarchy.depth();
        let rates = (0..depth)
            .map(|k| {
                if depth == 1 {
                    0.1
                } else {
                    0.1 + 0.15 * k as f64 / (depth - 1) as f64
                }
            })
            .collect();
        Self::with_rates(hierarchy, rates)
    }

    /// Panics if `rates` does not have one entry per level.
    pub fn with_rates(hierarchy: Hierarchy, rates: Vec<f64>) -> Self {
        assert_eq!(rates.len(), hierarchy.depth(), "one rate per level");
        let leaves = hierarchy.leaf_paths();
        Self {
            hierarchy,
            leaves,
            rates,
        }
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Probability of staying correct at each level given correct above.
    pub fn keep_probabilities(&self, spec: &DistortionSpec) -> Vec<f64> {
        let s = severity(spec);
        self.rates.iter().map(|r| (-r * s).exp()).collect()
    }
}

impl Annotator for SyntheticAnnotator {
    fn annotate(&self, query: &AnnotationQuery<'_>, rng: &mut ChaCha8Rng) -> LabelPath {
        let truth = query.truth.ids();
        let keep = self.keep_probabilities(query.spec);
        let miss = keep.iter().position(|&p| !rng.random_bool(p.clamp(0.0, 1.0)));
        let Some(level) = miss else {
            return query.truth.clone();
        };
        let differs = |p: &&LabelPath| p.ids()[level] != truth[level];
        let siblings: Vec<&LabelPath> = self
            .leaves
            .iter()
            .filter(|p| p.ids()[..level] == truth[..level])
            .filter(differs)
            .collect();
        let pool = if siblings.is_empty() {
            self.leaves.iter().filter(differs).collect()
        } else {
            siblings
        };
        match pool.choose(rng) {
            Some(p) => (*p).clone(),
            // a single-leaf tree cannot be misclassified
            None => self.hierarchy.path_to(*truth.last().expect("non-empty truth")),
        }
    }
}
