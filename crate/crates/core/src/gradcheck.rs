//! Central finite-difference checks for every backward rule, for attention
//! and for the whole model loss.
//!
//! Each operation is checked through the functional `<R, op(inputs)>` with a
//! fixed random `R`, so the probe itself never runs through the rule under
//! test.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embeddings::QueryMatrix;
use crate::image::Image;
use crate::model::{random_tensor, LossWeights, ModelConfig, ModelError, SghpnModel, Target};
use crate::tensor::{multi_head_attention, AttentionParams, OpKind, Tape, Tensor, TensorError, Var};

pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const ATTENTION: &str = "attention";
pub const MODEL: &str = "sghpn";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, max_rel_error: f64, tolerance: f64, checked: usize) -> Self {
        Self {
            name: name.to_string(),
            max_rel_error,
            tolerance,
            checked,
            passed: max_rel_error < tolerance,
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-4)`; the floor keeps near-zero gradients from
/// turning rounding noise into large ratios.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Names accepted by [`run`]: every differentiable operation, `attention`
/// and `sghpn`.
pub fn check_names() -> Vec<&'static str> {
    let mut names: Vec<&str> = OpKind::DIFFERENTIABLE.iter().map(|k| k.name()).collect();
    names.push(ATTENTION);
    names.push(MODEL);
    names
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Build,
}

fn case(name: &'static str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var, TensorError> + 'static) -> Case {
    Case {
        name,
        inputs,
        build: Box::new(build),
    }
}

/// Shapes are drawn from `rng`, so different seeds exercise different sizes.
fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> Case {
    let (m, n, k) = (rng.random_range(1..=4), rng.random_range(2..=5), rng.random_range(1..=4));
    let mut r = |shape: &[usize]| random_tensor(rng, shape);
    let name = kind.name();
    match kind {
        OpKind::MatMul => case(name, vec![r(&[m, n]), r(&[n, k])], |t, v| t.matmul(v[0], v[1])),
        OpKind::Add => case(name, vec![r(&[m, n]), r(&[m, n])], |t, v| t.add(v[0], v[1])),
        OpKind::Mul => case(name, vec![r(&[m, n]), r(&[m, n])], |t, v| t.mul(v[0], v[1])),
        OpKind::AddRow => case(name, vec![r(&[m, n]), r(&[n])], |t, v| t.add_row(v[0], v[1])),
        OpKind::Scale => case(name, vec![r(&[m, n])], |t, v| Ok(t.scale(v[0], 1.7))),
        OpKind::Transpose => case(name, vec![r(&[m, n])], |t, v| t.transpose(v[0])),
        OpKind::SliceCols => case(name, vec![r(&[m, n + 1])], move |t, v| t.slice_cols(v[0], 1, n - 1)),
        OpKind::ConcatCols => case(name, vec![r(&[m, n]), r(&[m, k])], |t, v| t.concat_cols(v)),
        OpKind::ConcatRows => case(name, vec![r(&[m, n]), r(&[k, n])], |t, v| t.concat_rows(v)),
        OpKind::Slice => case(name, vec![r(&[m + 1, n])], move |t, v| t.slice(v[0], 1, vec![m * n - 1])),
        OpKind::Reshape => case(name, vec![r(&[m, 2 * n])], move |t, v| t.reshape(v[0], vec![2 * m, n])),
        OpKind::Sum => case(name, vec![r(&[m, n])], |t, v| Ok(t.sum(v[0]))),
        OpKind::LayerNorm => case(name, vec![r(&[m + 1, n + 3]), r(&[n + 3]), r(&[n + 3])], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        OpKind::Softmax => case(name, vec![r(&[m, n])], |t, v| Ok(t.softmax(v[0]))),
        OpKind::Gelu => case(name, vec![r(&[m, n]).scaled(3.0)], |t, v| Ok(t.gelu(v[0]))),
        OpKind::RowDot => case(name, vec![r(&[m, n]), r(&[m, n])], |t, v| t.row_dot(v[0], v[1])),
        OpKind::CrossEntropy => case(name, vec![r(&[n + 1])], move |t, v| t.cross_entropy(v[0], k.min(n))),
        OpKind::Leaf => unreachable!("leaves have no backward rule"),
    }
}

fn attention_case(rng: &mut ChaCha8Rng) -> Case {
    let mut inputs = vec![random_tensor(rng, &[3, 8]), random_tensor(rng, &[4, 8])];
    for _ in 0..4 {
        inputs.push(random_tensor(rng, &[8, 8]));
        inputs.push(random_tensor(rng, &[8]));
    }
    case(ATTENTION, inputs, |t, v| {
        let p = AttentionParams {
            wq: v[2],
            bq: v[3],
            wk: v[4],
            bk: v[5],
            wv: v[6],
            bv: v[7],
            wo: v[8],
            bo: v[9],
        };
        Ok(multi_head_attention(t, v[0], v[1], v[1], 2, &p)?.output)
    })
}

trait Scaled {
    fn scaled(self, s: f64) -> Self;
}

impl Scaled for Tensor {
    fn scaled(mut self, s: f64) -> Self {
        self.data_mut().iter_mut().for_each(|v| *v *= s);
        self
    }
}

fn probe(case: &Case, inputs: &[Tensor], weights: &Tensor) -> Result<f64, TensorError> {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
    let out = (case.build)(&mut t, &vars)?;
    Ok(t.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
}

fn check_case(case: &Case, fault: Option<OpKind>, rng: &mut ChaCha8Rng) -> Result<CheckResult, TensorError> {
    let mut t = Tape::new();
    if let Some(kind) = fault {
        t.inject_sign_flip(kind);
    }
    let vars: Vec<Var> = case.inputs.iter().map(|x| t.param(x.clone())).collect();
    let out = (case.build)(&mut t, &vars)?;
    let weights = random_tensor(rng, t.shape(out));
    let grads = t.backward_from(out, &weights)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut inputs = case.inputs.clone();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(case.inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            inputs[i].data_mut()[j] = x0 + STEP;
            let plus = probe(case, &inputs, &weights)?;
            inputs[i].data_mut()[j] = x0 - STEP;
            let minus = probe(case, &inputs, &weights)?;
            inputs[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
            checked += 1;
        }
    }
    Ok(CheckResult::new(case.name, worst, OP_TOLERANCE, checked))
}

/// Checks one differentiable operation on random inputs.
pub fn check_op(kind: OpKind, seed: u64, fault: Option<OpKind>) -> Result<CheckResult, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = op_case(kind, &mut rng);
    check_case(&case, fault, &mut rng)
}

/// Checks multi-head attention (`D = 8`, two heads) through all its
/// projections.
pub fn check_attention(seed: u64, fault: Option<OpKind>) -> Result<CheckResult, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = attention_case(&mut rng);
    check_case(&case, fault, &mut rng)
}

/// Toy configuration of the end-to-end check: 16×16 input, patch 8,
/// `D = 16`, two encoder blocks, one decoder block, 2+3+4 categories.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 8,
        width: 16,
        encoder_blocks: 2,
        decoder_blocks: 1,
        heads: 2,
        mlp_ratio: 2,
        level_sizes: vec![2, 3, 4],
        embed_dim: 12,
        use_sgca: true,
        ln_eps: 1e-5,
    }
}

struct ModelProblem {
    model: SghpnModel,
    inputs: Vec<Tensor>,
    targets: Vec<Target>,
}

fn model_problem(config: ModelConfig, seed: u64) -> Result<ModelProblem, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = config.categories();
    let q = QueryMatrix::from_rows(
        config.embed_dim,
        (0..c)
            .map(|_| (0..config.embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
    );
    let mut model = SghpnModel::new(config, Some(&q), seed)?;
    // move away from the near-zero initialization so every path carries
    // gradient of ordinary size
    let names = model.param_names().to_vec();
    for (name, p) in names.iter().zip(model.params_mut()) {
        let centre = if name.ends_with(".g") { 1.0 } else { 0.0 };
        p.data_mut()
            .iter_mut()
            .for_each(|v| *v = centre + rng.random_range(-0.5..0.5));
    }
    let size = model.config().image_size;
    let inputs = (0..2)
        .map(|_| {
            let img = Image::from_fn(size, size, |_, _, _| rng.random_range(0.0..1.0));
            model.input(&img)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let targets = vec![
        Target {
            level: 2,
            nodes: vec![1, 2, 3],
        },
        Target {
            level: 1,
            nodes: vec![0, 1],
        },
    ];
    Ok(ModelProblem { model, inputs, targets })
}

fn batch_loss(p: &ModelProblem, model: &SghpnModel) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for (x, t) in p.inputs.iter().zip(&p.targets) {
        total += model.sample_loss(x, t, LossWeights::default())?;
    }
    Ok(total)
}

/// End-to-end check of the summed loss of a two-sample batch on the toy
/// model, over `samples` parameter coordinates (at least one per tensor).
pub fn check_model(seed: u64, samples: usize, fault: Option<OpKind>) -> Result<CheckResult, ModelError> {
    let p = model_problem(toy_model_config(), seed)?;
    let n_params = p.model.params().len();

    let mut analytic: Vec<Tensor> = p.model.params().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (x, target) in p.inputs.iter().zip(&p.targets) {
        let mut tape = Tape::new();
        if let Some(kind) = fault {
            tape.inject_sign_flip(kind);
        }
        let b = p.model.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let fwd = p.model.forward(&mut tape, &b, xv)?;
        let loss = p.model.loss(&mut tape, &fwd, target, LossWeights::default())?;
        let grads = tape.backward(loss)?;
        for (acc, &v) in analytic.iter_mut().zip(b.vars()) {
            if let Some(g) = grads.get(v) {
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut coords: Vec<(usize, usize)> = (0..n_params)
        .map(|i| (i, rng.random_range(0..p.model.params()[i].len())))
        .collect();
    let offsets: Vec<usize> = p
        .model
        .params()
        .iter()
        .scan(0, |acc, t| {
            let start = *acc;
            *acc += t.len();
            Some(start)
        })
        .collect();
    let total = p.model.parameter_count();
    let extra = samples.saturating_sub(coords.len()).min(total);
    for flat in index::sample(&mut rng, total, extra) {
        let i = offsets.partition_point(|&o| o <= flat) - 1;
        coords.push((i, flat - offsets[i]));
    }

    let mut model = p.model.clone();
    let mut worst: f64 = 0.0;
    for &(i, j) in &coords {
        let x0 = model.params()[i].data()[j];
        model.params_mut()[i].data_mut()[j] = x0 + STEP;
        let plus = batch_loss(&p, &model)?;
        model.params_mut()[i].data_mut()[j] = x0 - STEP;
        let minus = batch_loss(&p, &model)?;
        model.params_mut()[i].data_mut()[j] = x0;
        let numeric = (plus - minus) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic[i].data()[j], numeric));
    }
    Ok(CheckResult::new(MODEL, worst, MODEL_TOLERANCE, coords.len()))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Restrict to these check names; empty means all.
    pub only: Vec<String>,
    pub seed: u64,
    pub model_samples: usize,
    /// Negate one backward rule, to confirm the checks catch it.
    pub fault: Option<OpKind>,
}

#[derive(Debug, thiserror::Error)]
pub enum GradcheckError {
    #[error("unknown check {0:?}")]
    UnknownCheck(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Runs the selected checks in a fixed order.
pub fn run(opts: &RunOptions) -> Result<Vec<CheckResult>, GradcheckError> {
    let names = check_names();
    if let Some(bad) = opts.only.iter().find(|n| !names.contains(&n.as_str())) {
        return Err(GradcheckError::UnknownCheck(bad.clone()));
    }
    let wanted = |n: &str| opts.only.is_empty() || opts.only.iter().any(|o| o == n);
    let mut out = Vec::new();
    for (i, kind) in OpKind::DIFFERENTIABLE.into_iter().enumerate() {
        if wanted(kind.name()) {
            out.push(check_op(kind, opts.seed.wrapping_add(i as u64), opts.fault)?);
        }
    }
    if wanted(ATTENTION) {
        out.push(check_attention(opts.seed, opts.fault)?);
    }
    if wanted(MODEL) {
        out.push(check_model(opts.seed, opts.model_samples.max(1), opts.fault)?);
    }
    Ok(out)
}
