//! SGHPN: a patch-token transformer encoder, a decoder whose queries are the
//! category word vectors, one scalar score head per category and a linear
//! level predictor over the score vector.
//!
//! With `use_sgca = false` the decoder is replaced by a prepended `[cls]`
//! token and a linear head, which is the ablation baseline.

mod train;

pub use train::{augment, mean_loss, train, TrainConfig, TrainReport, TrainSample};

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::QueryMatrix;
use crate::hierarchy::{Hierarchy, LabelPath, NodeId};
use crate::image::{Image, CHANNELS};
use crate::tensor::checkpoint::{self, CheckpointError};
use crate::tensor::{multi_head_attention, AttentionParams, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image is {height}x{width}, model expects {size}x{size}")]
    ImageSize { height: usize, width: usize, size: usize },
    #[error("query matrix is {rows}x{dim}, model expects {expected_rows}x{expected_dim}")]
    Queries {
        rows: usize,
        dim: usize,
        expected_rows: usize,
        expected_dim: usize,
    },
    #[error("hierarchy level sizes {got:?} do not match the model's {expected:?}")]
    Hierarchy { got: Vec<usize>, expected: Vec<usize> },
    #[error("bad training target: {0}")]
    Target(String),
    #[error("checkpoint does not fit this model: {0}")]
    CheckpointContent(String),
    #[error("loss is not finite at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("training set is empty")]
    EmptyDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Token width `D`.
    pub width: usize,
    /// Encoder depth `L`.
    pub encoder_blocks: usize,
    /// Decoder depth `M`.
    pub decoder_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Category count per taxonomy level, coarsest first.
    pub level_sizes: Vec<usize>,
    /// Word-vector width; a learned projection maps it to `width` when they
    /// differ.
    pub embed_dim: usize,
    pub use_sgca: bool,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// 64×64 input, patch 8, `D = 64`, four encoder and two decoder blocks.
    pub fn toy(level_sizes: Vec<usize>, embed_dim: usize) -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            width: 64,
            encoder_blocks: 4,
            decoder_blocks: 2,
            heads: 4,
            mlp_ratio: 4,
            level_sizes,
            embed_dim,
            use_sgca: true,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} does not split into {} heads", self.width, self.heads));
        }
        if self.mlp_ratio == 0 || self.embed_dim == 0 {
            return bad("mlp_ratio and embed_dim must be positive".into());
        }
        if self.level_sizes.is_empty() || self.level_sizes.contains(&0) {
            return bad(format!("level sizes {:?} must be non-empty and positive", self.level_sizes));
        }
        if !(self.ln_eps > 0.0) {
            return bad(format!("ln_eps {} must be positive", self.ln_eps));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch count `N`.
    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    /// Total category count `c`.
    pub fn categories(&self) -> usize {
        self.level_sizes.iter().sum()
    }

    pub fn depth(&self) -> usize {
        self.level_sizes.len()
    }

    /// Index range of each level inside the score vector.
    pub fn level_slices(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.level_sizes
            .iter()
            .map(|&n| {
                let r = start..start + n;
                start += n;
                r
            })
            .collect()
    }

    fn needs_query_projection(&self) -> bool {
        self.embed_dim != self.width
    }
}

/// Supervision for one sample: its level label and, for every level down to
/// it, the true category's index within that level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Target {
    pub level: usize,
    pub nodes: Vec<usize>,
}

impl Target {
    pub fn from_path(h: &Hierarchy, path: &LabelPath) -> Result<Self, ModelError> {
        if path.is_empty() {
            return Err(ModelError::Target("empty path".into()));
        }
        Ok(Self {
            level: path.level(),
            nodes: path.ids().iter().map(|&id| h.index_within_level(id)).collect(),
        })
    }
}

/// Weights of the level term and the category term of the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub level: f64,
    pub category: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            level: 1.0,
            category: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub level: usize,
    pub path: LabelPath,
    pub scores: Vec<f64>,
    pub level_logits: Vec<f64>,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    queries: Option<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Encoder output `Z_L`.
    pub tokens: Var,
    /// Decoder output `F_M`, absent in the `[cls]` variant.
    pub decoded: Option<Var>,
    pub scores: Var,
    pub level_logits: Var,
}

#[derive(Debug, Clone)]
pub struct SghpnModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    index: HashMap<String, usize>,
    queries: Option<Tensor>,
}

struct Builder<'a> {
    names: Vec<String>,
    params: Vec<Tensor>,
    rng: &'a mut ChaCha8Rng,
    normal: Normal<f64>,
}

/// Position and [cls] embeddings.
const EMBED_STD: f64 = 0.02;

impl Builder<'_> {
    fn push(&mut self, name: String, t: Tensor) {
        self.names.push(name);
        self.params.push(t);
    }

    /// Normal(0, std²) truncated at two standard deviations.
    fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v = self.normal.sample(self.rng);
                if v.abs() <= 2.0 {
                    break v * std;
                }
            })
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("positive shape");
        self.push(name, t);
    }

    fn zeros(&mut self, name: String, shape: &[usize]) {
        self.push(name, Tensor::zeros(shape));
    }

    fn ones(&mut self, name: String, shape: &[usize]) {
        self.push(name, Tensor::filled(shape, 1.0));
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.ones(format!("{prefix}.g"), &[d]);
        self.zeros(format!("{prefix}.b"), &[d]);
    }

    /// Weights scaled by `1/sqrt(fan_in)`.
    fn linear(&mut self, prefix: &str, rows: usize, cols: usize) {
        self.normal(format!("{prefix}.w"), &[rows, cols], (rows as f64).sqrt().recip());
        self.zeros(format!("{prefix}.b"), &[cols]);
    }

    fn block(&mut self, prefix: &str, d: usize, hidden: usize) {
        self.layer_norm(&format!("{prefix}.ln1"), d);
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.attn.{p}"), d, d);
        }
        self.layer_norm(&format!("{prefix}.ln2"), d);
        self.linear(&format!("{prefix}.mlp1"), d, hidden);
        self.linear(&format!("{prefix}.mlp2"), hidden, d);
    }
}

impl SghpnModel {
    /// Freshly initialized model. `queries` holds the raw category word
    /// vectors in canonical order and is required when `use_sgca` is set.
    pub fn new(config: ModelConfig, queries: Option<&QueryMatrix>, seed: u64) -> Result<Self, ModelError> {
        let queries = match queries {
            Some(q) => Some(Tensor::matrix(q.len(), q.dim(), q.flat()).map_err(|_| ModelError::Queries {
                rows: q.len(),
                dim: q.dim(),
                expected_rows: config.categories(),
                expected_dim: config.embed_dim,
            })?),
            None => None,
        };
        Self::with_queries(config, queries, seed)
    }

    fn with_queries(config: ModelConfig, queries: Option<Tensor>, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let c = config.categories();
        let queries = if config.use_sgca {
            let q = queries.ok_or_else(|| ModelError::Config("the decoder needs a query matrix".into()))?;
            if q.shape() != [c, config.embed_dim] {
                return Err(ModelError::Queries {
                    rows: q.shape()[0],
                    dim: q.last_dim(),
                    expected_rows: c,
                    expected_dim: config.embed_dim,
                });
            }
            Some(q)
        } else {
            None
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            rng: &mut rng,
            normal: Normal::new(0.0, 1.0).expect("valid std"),
        };
        let d = config.width;
        let hidden = d * config.mlp_ratio;
        b.linear("patch", config.patch_dim(), d);
        let tokens = if config.use_sgca {
            config.patches()
        } else {
            b.normal("cls".into(), &[1, d], EMBED_STD);
            config.patches() + 1
        };
        b.normal("pos".into(), &[tokens, d], EMBED_STD);
        for l in 0..config.encoder_blocks {
            b.block(&format!("enc.{l}"), d, hidden);
        }
        if config.use_sgca {
            if config.needs_query_projection() {
                b.linear("query_proj", config.embed_dim, d);
            }
            for m in 0..config.decoder_blocks {
                b.block(&format!("dec.{m}"), d, hidden);
            }
            b.normal("score.w".into(), &[c, d], (d as f64).sqrt().recip());
            b.zeros("score.b".into(), &[c]);
        } else {
            b.linear("head", d, c);
        }
        b.linear("level", c, config.depth());

        let Builder { names, params, .. } = b;
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self {
            config,
            names,
            params,
            index,
            queries,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn queries(&self) -> Option<&Tensor> {
        self.queries.as_ref()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Errors unless `h` has the level sizes this model was built for.
    pub fn check_hierarchy(&self, h: &Hierarchy) -> Result<(), ModelError> {
        let got = h.level_sizes();
        if got != self.config.level_sizes {
            return Err(ModelError::Hierarchy {
                got,
                expected: self.config.level_sizes.clone(),
            });
        }
        Ok(())
    }

    /// Places every parameter on `tape` as a trainable leaf and the query
    /// matrix as a constant.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(p.clone())).collect(),
            queries: self.queries.as_ref().map(|q| tape.constant(q.clone())),
        }
    }

    fn p(&self, b: &Bound, name: &str) -> Var {
        b.vars[self.index[name]]
    }

    fn linear(&self, tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var, TensorError> {
        let y = tape.matmul(x, self.p(b, &format!("{prefix}.w")))?;
        tape.add_row(y, self.p(b, &format!("{prefix}.b")))
    }

    fn layer_norm(&self, tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var, TensorError> {
        let g = self.p(b, &format!("{prefix}.g"));
        let beta = self.p(b, &format!("{prefix}.b"));
        tape.layer_norm(x, g, beta, self.config.ln_eps)
    }

    fn attention_params(&self, b: &Bound, prefix: &str) -> AttentionParams {
        let w = |p: &str| self.p(b, &format!("{prefix}.attn.{p}.w"));
        let bias = |p: &str| self.p(b, &format!("{prefix}.attn.{p}.b"));
        AttentionParams {
            wq: w("q"),
            bq: bias("q"),
            wk: w("k"),
            bk: bias("k"),
            wv: w("v"),
            bv: bias("v"),
            wo: w("o"),
            bo: bias("o"),
        }
    }

    /// Pre-norm block. `context` is `None` for self-attention, otherwise the
    /// key/value sequence for cross-attention.
    fn block(&self, tape: &mut Tape, b: &Bound, prefix: &str, x: Var, context: Option<Var>) -> Result<Var, TensorError> {
        let h = self.layer_norm(tape, b, &format!("{prefix}.ln1"), x)?;
        let kv = context.unwrap_or(h);
        let att = multi_head_attention(tape, h, kv, kv, self.config.heads, &self.attention_params(b, prefix))?;
        let x = tape.add(att.output, x)?;
        let h = self.layer_norm(tape, b, &format!("{prefix}.ln2"), x)?;
        let h = self.linear(tape, b, &format!("{prefix}.mlp1"), h)?;
        let h = tape.gelu(h);
        let h = self.linear(tape, b, &format!("{prefix}.mlp2"), h)?;
        tape.add(h, x)
    }

    /// Patch embedding plus positions, then the encoder stack. Returns
    /// `[N×D]`, or `[(N+1)×D]` with the `[cls]` token first.
    pub fn encode(&self, tape: &mut Tape, b: &Bound, patches: Var) -> Result<Var, ModelError> {
        let shape = tape.shape(patches);
        if shape != [self.config.patches(), self.config.patch_dim()] {
            return Err(TensorError::Shape {
                op: "encode",
                detail: format!(
                    "patches {shape:?}, expected [{}, {}]",
                    self.config.patches(),
                    self.config.patch_dim()
                ),
            }
            .into());
        }
        let mut z = self.linear(tape, b, "patch", patches)?;
        if !self.config.use_sgca {
            z = tape.concat_rows(&[self.p(b, "cls"), z])?;
        }
        let mut z = tape.add(z, self.p(b, "pos"))?;
        for l in 0..self.config.encoder_blocks {
            z = self.block(tape, b, &format!("enc.{l}"), z, None)?;
        }
        Ok(z)
    }

    /// Projected category queries `F_0`.
    pub fn project_queries(&self, tape: &mut Tape, b: &Bound) -> Result<Var, ModelError> {
        let q = b
            .queries
            .ok_or_else(|| ModelError::Config("model has no decoder".into()))?;
        if self.config.needs_query_projection() {
            Ok(self.linear(tape, b, "query_proj", q)?)
        } else {
            Ok(q)
        }
    }

    /// Decoder stack: one output row per category regardless of the token
    /// count.
    pub fn decode_sgca(&self, tape: &mut Tape, b: &Bound, tokens: Var) -> Result<Var, ModelError> {
        let mut f = self.project_queries(tape, b)?;
        for m in 0..self.config.decoder_blocks {
            f = self.block(tape, b, &format!("dec.{m}"), f, Some(tokens))?;
        }
        Ok(f)
    }

    /// `s_i = w_i · f_i + b_i` with one head per category.
    pub fn score_pool(&self, tape: &mut Tape, b: &Bound, decoded: Var) -> Result<Var, ModelError> {
        let s = tape.row_dot(decoded, self.p(b, "score.w"))?;
        Ok(tape.add_row(s, self.p(b, "score.b"))?)
    }

    /// Linear map from the `c` scores to `depth` level logits.
    pub fn predict_level(&self, tape: &mut Tape, b: &Bound, scores: Var) -> Result<Var, ModelError> {
        let c = self.config.categories();
        let s = tape.reshape(scores, vec![1, c])?;
        let l = self.linear(tape, b, "level", s)?;
        Ok(tape.reshape(l, vec![self.config.depth()])?)
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, patches: Var) -> Result<Forward, ModelError> {
        let tokens = self.encode(tape, b, patches)?;
        let (decoded, scores) = if self.config.use_sgca {
            let f = self.decode_sgca(tape, b, tokens)?;
            (Some(f), self.score_pool(tape, b, f)?)
        } else {
            let cls = tape.row(tokens, 0)?;
            let s = self.linear(tape, b, "head", cls)?;
            (None, tape.reshape(s, vec![self.config.categories()])?)
        };
        let level_logits = self.predict_level(tape, b, scores)?;
        Ok(Forward {
            tokens,
            decoded,
            scores,
            level_logits,
        })
    }

    /// Level cross-entropy plus, for each level down to the target's, the
    /// cross-entropy of that level's score slice. Deeper levels contribute
    /// nothing.
    pub fn loss(&self, tape: &mut Tape, fwd: &Forward, target: &Target, weights: LossWeights) -> Result<Var, ModelError> {
        let depth = self.config.depth();
        if target.level >= depth {
            return Err(ModelError::Target(format!("level {} of a depth-{depth} model", target.level)));
        }
        if target.nodes.len() < target.level + 1 {
            return Err(ModelError::Target(format!(
                "path has {} nodes but the level label is {}",
                target.nodes.len(),
                target.level
            )));
        }
        let mut terms = Vec::new();
        if weights.level != 0.0 {
            let ce = tape.cross_entropy(fwd.level_logits, target.level)?;
            terms.push(weighted(tape, ce, weights.level));
        }
        if weights.category != 0.0 {
            for (k, range) in self.config.level_slices().into_iter().enumerate().take(target.level + 1) {
                let slice = tape.slice(fwd.scores, range.start, vec![range.len()])?;
                let ce = tape.cross_entropy(slice, target.nodes[k])?;
                terms.push(weighted(tape, ce, weights.category));
            }
        }
        let mut total = *terms
            .first()
            .ok_or_else(|| ModelError::Config("both loss weights are zero".into()))?;
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        Ok(total)
    }

    /// Model input for an image: resized to the model size if needed,
    /// patchified and centred around zero.
    pub fn input(&self, img: &Image) -> Result<Tensor, ModelError> {
        let size = self.config.image_size;
        let resized;
        let img = if img.height() != size || img.width() != size {
            resized = img.resize(size, size);
            &resized
        } else {
            img
        };
        let mut x = patchify(img, &self.config)?;
        x.data_mut().iter_mut().for_each(|v| *v -= 0.5);
        Ok(x)
    }

    pub fn sample_loss(&self, input: &Tensor, target: &Target, weights: LossWeights) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let x = tape.constant(input.clone());
        let fwd = self.forward(&mut tape, &b, x)?;
        let loss = self.loss(&mut tape, &fwd, target, weights)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Loss and per-parameter gradients for one sample. Parameters the loss
    /// does not reach get `None`.
    pub fn gradients(
        &self,
        input: &Tensor,
        target: &Target,
        weights: LossWeights,
    ) -> Result<(f64, Vec<Option<Tensor>>), ModelError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let x = tape.constant(input.clone());
        let fwd = self.forward(&mut tape, &b, x)?;
        let loss = self.loss(&mut tape, &fwd, target, weights)?;
        let mut grads = tape.backward(loss)?;
        let value = tape.value(loss).data()[0];
        Ok((value, b.vars.iter().map(|&v| grads.take(v)).collect()))
    }

    /// Scores and level logits for one image.
    pub fn outputs(&self, img: &Image) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let input = self.input(img)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let x = tape.constant(input);
        let fwd = self.forward(&mut tape, &b, x)?;
        Ok((
            tape.value(fwd.scores).data().to_vec(),
            tape.value(fwd.level_logits).data().to_vec(),
        ))
    }

    /// Predicted level is the level-logit argmax. The path takes the best
    /// top-level category, then at each deeper level the best child of the
    /// node chosen above, so it is always a valid path.
    pub fn predict(&self, img: &Image, h: &Hierarchy) -> Result<Prediction, ModelError> {
        self.check_hierarchy(h)?;
        let (scores, level_logits) = self.outputs(img)?;
        let level = argmax(&level_logits);
        let best = |candidates: &[NodeId]| {
            candidates
                .iter()
                .copied()
                .fold(None::<NodeId>, |acc, id| match acc {
                    Some(a) if scores[h.category_index(a)] >= scores[h.category_index(id)] => Some(a),
                    _ => Some(id),
                })
        };
        let mut ids = Vec::with_capacity(level + 1);
        let mut node = best(h.top_level()).expect("hierarchy has a top level");
        ids.push(node);
        for _ in 0..level {
            match best(h.children(node)) {
                Some(child) => {
                    node = child;
                    ids.push(node);
                }
                None => break,
            }
        }
        Ok(Prediction {
            level: ids.len() - 1,
            path: LabelPath::new_unchecked(ids),
            scores,
            level_logits,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut named: Vec<(&str, &Tensor)> = self.names.iter().map(String::as_str).zip(&self.params).collect();
        if let Some(q) = &self.queries {
            named.push((QUERIES, q));
        }
        let meta = serde_json::json!({ "model": "sghpn", "config": self.config });
        checkpoint::save(path, &named, &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let ck = checkpoint::load(path)?;
        if ck.meta.get("model").and_then(|m| m.as_str()) != Some("sghpn") {
            return Err(ModelError::CheckpointContent("not an sghpn checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| ModelError::CheckpointContent(format!("config: {e}")))?;
        let queries = ck.get(QUERIES).cloned();
        let mut model = Self::with_queries(config, queries, 0)?;
        for (name, t) in &ck.tensors {
            if name == QUERIES {
                continue;
            }
            let slot = model
                .param_mut(name)
                .ok_or_else(|| ModelError::CheckpointContent(format!("unexpected tensor {name}")))?;
            if slot.shape() != t.shape() {
                return Err(ModelError::CheckpointContent(format!(
                    "{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        if ck.tensors.len() != model.params.len() + usize::from(model.queries.is_some()) {
            return Err(ModelError::CheckpointContent("missing tensors".into()));
        }
        Ok(model)
    }
}

const QUERIES: &str = "queries";

fn weighted(tape: &mut Tape, v: Var, w: f64) -> Var {
    if w == 1.0 {
        v
    } else {
        tape.scale(v, w)
    }
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Splits an image into non-overlapping patches in raster order. Row `i` is
/// patch `i` flattened row-major with interleaved channels.
pub fn patchify(img: &Image, config: &ModelConfig) -> Result<Tensor, ModelError> {
    let size = config.image_size;
    if img.height() != size || img.width() != size {
        return Err(ModelError::ImageSize {
            height: img.height(),
            width: img.width(),
            size,
        });
    }
    let p = config.patch_size;
    let grid = config.grid();
    let mut data = Vec::with_capacity(size * size * CHANNELS);
    for gy in 0..grid {
        for gx in 0..grid {
            for y in gy * p..(gy + 1) * p {
                let start = (y * size + gx * p) * CHANNELS;
                data.extend_from_slice(&img.data()[start..start + p * CHANNELS]);
            }
        }
    }
    Ok(Tensor::matrix(grid * grid, config.patch_dim(), data)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, config: &ModelConfig) -> Result<Image, ModelError> {
    let size = config.image_size;
    let p = config.patch_size;
    let grid = config.grid();
    if patches.shape() != [config.patches(), config.patch_dim()] {
        return Err(TensorError::Shape {
            op: "unpatchify",
            detail: format!("{:?}", patches.shape()),
        }
        .into());
    }
    let mut data = vec![0.0; size * size * CHANNELS];
    for (i, row) in patches.data().chunks(config.patch_dim()).enumerate() {
        let (gy, gx) = (i / grid, i % grid);
        for (dy, chunk) in row.chunks(p * CHANNELS).enumerate() {
            let start = ((gy * p + dy) * size + gx * p) * CHANNELS;
            data[start..start + p * CHANNELS].copy_from_slice(chunk);
        }
    }
    Image::new(size, size, data).map_err(|e| ModelError::Config(e.to_string()))
}

/// Seeded random tensor in `[-1, 1)`, for tests and gradient checks.
pub fn random_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("positive shape")
}
