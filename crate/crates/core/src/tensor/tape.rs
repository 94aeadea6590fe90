use std::fmt;

use super::{matmul_raw, shape_err, transpose_raw, Tensor, TensorError};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for reporting and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    AddRow,
    Scale,
    Transpose,
    SliceCols,
    ConcatCols,
    ConcatRows,
    Slice,
    Reshape,
    Sum,
    LayerNorm,
    Softmax,
    Gelu,
    RowDot,
    CrossEntropy,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 17] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::Transpose,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::ConcatRows,
        OpKind::Slice,
        OpKind::Reshape,
        OpKind::Sum,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::Gelu,
        OpKind::RowDot,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::Transpose => "transpose",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Softmax => "softmax",
            OpKind::Gelu => "gelu",
            OpKind::RowDot => "row_dot",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    RowDot(Var, Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::Transpose(..) => OpKind::Transpose,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::Slice(..) => OpKind::Slice,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Sum(..) => OpKind::Sum,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Gelu(..) => OpKind::Gelu,
            Op::RowDot(..) => OpKind::RowDot,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    sign_flip: Option<OpKind>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Negates the backward rule of every `kind` node. Exists so the
    /// gradient checker can prove it notices a broken rule.
    #[doc(hidden)]
    pub fn inject_sign_flip(&mut self, kind: OpKind) {
        self.sign_flip = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        match *self.shape(v) {
            [m, n] => Ok((m, n)),
            ref s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), rg))
    }

    /// Adds a vector along the trailing axis of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let d = self.value(a).last_dim();
        if self.value(bias).len() != d {
            return Err(shape_err("add_row", format!("{:?} + {:?}", self.shape(a), self.shape(bias))));
        }
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(Tensor { shape, data }, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Tensor { shape, data }, Op::Scale(a, s), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(a, "transpose")?;
        let data = transpose_raw(self.value(a).data(), m, n);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor { shape: vec![n, m], data }, Op::Transpose(a), rg))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if width == 0 || start + width > n {
            return Err(shape_err("slice_cols", format!("cols {start}..{} of {n}", start + width)));
        }
        let src = self.value(a).data();
        let data = (0..m)
            .flat_map(|r| src[r * n + start..r * n + start + width].iter().copied())
            .collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor { shape: vec![m, width], data }, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(shape_err("concat_cols", format!("row counts {m} vs {pm}")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut m = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_rows")?;
            if pn != n {
                return Err(shape_err("concat_rows", format!("column counts {n} vs {pn}")));
            }
            m += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Contiguous run of the flattened data, given the output shape.
    pub fn slice(&mut self, a: Var, start: usize, shape: Vec<usize>) -> Result<Var, TensorError> {
        let len: usize = shape.iter().product();
        if len == 0 || start + len > self.value(a).len() {
            return Err(shape_err("slice", format!("{start}..{} of {}", start + len, self.value(a).len())));
        }
        let data = self.value(a).data()[start..start + len].to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::Slice(a, start), rg))
    }

    /// Row `r` of a matrix as a `[1, n]` matrix.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(a, "row")?;
        if r >= m {
            return Err(shape_err("row", format!("row {r} of {m}")));
        }
        self.slice(a, r * n, vec![1, n])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Normalizes each trailing-axis row to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let d = self.value(x).last_dim();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err(
                "layer_norm",
                format!("input {:?}, gain {:?}, bias {:?}", self.shape(x), self.shape(gain), self.shape(bias)),
            ));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xs.len() / d;
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax along the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let d = self.value(a).last_dim();
        let data = self.value(a).data().chunks(d).flat_map(softmax_row).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Tensor { shape, data }, Op::Softmax(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a]);
        self.push(Tensor { shape, data }, Op::Gelu(a), rg)
    }

    /// `out[i] = Σ_j a[i, j] · w[i, j]` for same-shape matrices.
    pub fn row_dot(&mut self, a: Var, w: Var) -> Result<Var, TensorError> {
        self.same_shape(a, w, "row_dot")?;
        let (m, n) = self.dims2(a, "row_dot")?;
        let av = self.value(a).data();
        let wv = self.value(w).data();
        let data = (0..m)
            .map(|i| (0..n).map(|j| av[i * n + j] * wv[i * n + j]).sum())
            .collect();
        let rg = self.any_grad(&[a, w]);
        Ok(self.push(Tensor { shape: vec![m], data }, Op::RowDot(a, w), rg))
    }

    /// `-log softmax(logits)[target]` for a flat logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, TensorError> {
        let n = self.value(logits).len();
        if target >= n {
            return Err(shape_err("cross_entropy", format!("target {target} of {n} classes")));
        }
        let probs = softmax_row(self.value(logits).data());
        let z = self.value(logits).data();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[target];
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let node = self.nodes.get(loss.0).ok_or(TensorError::UnknownVar(loss.0))?;
        if !node.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(node.value.shape().to_vec()));
        }
        self.backward_from(loss, &Tensor::scalar(1.0))
    }

    /// Reverse sweep seeded with `seed` at `output`: the gradient of
    /// `<seed, output>`.
    pub fn backward_from(&self, output: Var, seed: &Tensor) -> Result<Gradients, TensorError> {
        let loss = output;
        let node = self.nodes.get(loss.0).ok_or(TensorError::UnknownVar(loss.0))?;
        if node.value.len() != seed.len() {
            return Err(shape_err(
                "backward_from",
                format!("seed {:?} for output {:?}", seed.shape(), node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(seed.data().to_vec());

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let flip = self.sign_flip == Some(node.op.kind());
            let emit = |grads: &mut Vec<Option<Vec<f64>>>, v: Var, mut d: Vec<f64>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                if flip {
                    for x in &mut d {
                        *x = -*x;
                    }
                }
                accumulate(&mut grads[v.0], d);
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims2(*a, "matmul")?;
                    let n = node.value.last_dim();
                    if self.nodes[a.0].requires_grad {
                        let bt = transpose_raw(self.value(*b).data(), k, n);
                        emit(&mut grads, *a, matmul_raw(&g, &bt, m, n, k));
                    }
                    if self.nodes[b.0].requires_grad {
                        let at = transpose_raw(self.value(*a).data(), m, k);
                        emit(&mut grads, *b, matmul_raw(&at, &g, k, m, n));
                    }
                }
                Op::Add(a, b) => {
                    emit(&mut grads, *a, g.clone());
                    emit(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    emit(&mut grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                    emit(&mut grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
                Op::AddRow(a, bias) => {
                    let d = node.value.last_dim();
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        for (s, x) in db.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    emit(&mut grads, *a, g.clone());
                    emit(&mut grads, *bias, db);
                }
                Op::Scale(a, s) => emit(&mut grads, *a, g.iter().map(|x| x * s).collect()),
                Op::Transpose(a) => {
                    let (m, n) = self.dims2(*a, "transpose")?;
                    emit(&mut grads, *a, transpose_raw(&g, n, m));
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = self.dims2(*a, "slice_cols")?;
                    let w = node.value.last_dim();
                    let mut d = vec![0.0; m * n];
                    for r in 0..m {
                        d[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    emit(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let m = node.value.rows();
                    let n = node.value.last_dim();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).last_dim();
                        let d = (0..m)
                            .flat_map(|r| g[r * n + offset..r * n + offset + w].iter().copied())
                            .collect();
                        emit(&mut grads, *p, d);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        emit(&mut grads, *p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::Slice(a, start) => {
                    let mut d = vec![0.0; self.value(*a).len()];
                    d[*start..*start + g.len()].copy_from_slice(&g);
                    emit(&mut grads, *a, d);
                }
                Op::Reshape(a) => emit(&mut grads, *a, g.clone()),
                Op::Sum(a) => emit(&mut grads, *a, vec![g[0]; self.value(*a).len()]),
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = node.value.last_dim();
                    let gv = self.value(*gain).data();
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    let mut dx = vec![0.0; g.len()];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            dgain[j] += grow[j] * hrow[j];
                            dbias[j] += grow[j];
                            let dh = grow[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            dx[r * d + j] = rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                    emit(&mut grads, *x, dx);
                    emit(&mut grads, *gain, dgain);
                    emit(&mut grads, *bias, dbias);
                }
                Op::Softmax(a) => {
                    let d = node.value.last_dim();
                    let y = node.value.data();
                    let mut dx = Vec::with_capacity(g.len());
                    for (grow, yrow) in g.chunks(d).zip(y.chunks(d)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        dx.extend(grow.iter().zip(yrow).map(|(gi, yi)| yi * (gi - dot)));
                    }
                    emit(&mut grads, *a, dx);
                }
                Op::Gelu(a) => {
                    let xs = self.value(*a).data();
                    emit(&mut grads, *a, g.iter().zip(xs).map(|(gi, &x)| gi * gelu_grad(x)).collect());
                }
                Op::RowDot(a, w) => {
                    let n = self.value(*a).last_dim();
                    let av = self.value(*a).data();
                    let wv = self.value(*w).data();
                    let scaled = |src: &[f64]| -> Vec<f64> {
                        src.iter().enumerate().map(|(idx, v)| g[idx / n] * v).collect()
                    };
                    emit(&mut grads, *a, scaled(wv));
                    emit(&mut grads, *w, scaled(av));
                }
                Op::CrossEntropy { logits, target, probs } => {
                    let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                    d[*target] -= g[0];
                    emit(&mut grads, *logits, d);
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| {
                    g.map(|data| Tensor {
                        shape: n.value.shape().to_vec(),
                        data,
                    })
                })
                .collect(),
        })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, d: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(d) {
                *a += x;
            }
        }
        None => *slot = Some(d),
    }
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_values_and_identity() {
        let mut t = Tape::new();
        let a = t.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = t.constant(mat(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let i = t.constant(Tensor::eye(2));
        let ib = t.matmul(i, b).unwrap();
        assert_eq!(t.value(ib), t.value(b));
        let bad = t.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.matmul(a, bad), Err(TensorError::Shape { op: "matmul", .. })));
    }

    #[test]
    fn sum_and_quadratic_grads() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let xx = t.mul(x, x).unwrap();
        let s = t.sum(xx);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.add(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(t.backward(x).unwrap_err(), TensorError::NonScalarLoss(vec![2]));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let c = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = t.mul(x, c).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn softmax_rows() {
        let mut t = Tape::new();
        let x = t.constant(mat(2, 4, &[0.5, 0.5, 0.5, 0.5, 1.0, -3.0, 2.0, 0.0]));
        let y = t.softmax(x);
        assert!(t.value(y).row(0).iter().all(|v| (v - 0.25).abs() < 1e-15));
        let shifted = t.constant(mat(1, 4, &[101.0, 97.0, 102.0, 100.0]));
        let ys = t.softmax(shifted);
        for (a, b) in t.value(y).row(1).iter().zip(t.value(ys).row(0)) {
            assert!((a - b).abs() < 1e-15);
        }
        let s: f64 = t.value(y).row(1).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_and_moments() {
        let mut t = Tape::new();
        let x = t.constant(mat(2, 4, &[2.0, 2.0, 2.0, 2.0, 1.0, 5.0, -2.0, 0.5]));
        let g = t.constant(Tensor::filled(&[4], 1.0));
        let b = t.constant(Tensor::zeros(&[4]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(t.value(y).row(0).iter().all(|v| v.abs() < 1e-12));
        let r = t.value(y).row(1);
        let mean = r.iter().sum::<f64>() / 4.0;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4);
        let bad = t.constant(Tensor::zeros(&[3]));
        assert!(t.layer_norm(x, bad, b, 1e-5).is_err());
    }

    #[test]
    fn gelu_points() {
        assert_eq!(gelu(0.0), 0.0);
        // tanh form; the exact erf form would give 2.99595
        assert!((gelu(3.0) - 2.996_362_607_918_227).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_value() {
        let mut t = Tape::new();
        let z = t.param(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let l = t.cross_entropy(z, 1).unwrap();
        assert!((t.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);
        let g = t.backward(l).unwrap();
        let d = g.get(z).unwrap().data();
        assert!((d[1] + 2.0 / 3.0).abs() < 1e-12 && (d[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!(t.cross_entropy(z, 3).is_err());
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::DIFFERENTIABLE {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
