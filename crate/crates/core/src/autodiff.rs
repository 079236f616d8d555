//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass in execution order;
//! [`Tape::backward`] walks it in reverse and deposits gradients into the
//! [`ParamStore`]. Only trainable parameters receive gradients, and no
//! gradient work is done for subgraphs that do not reach one, so frozen
//! matrices never cost a backward pass.
//!
//! Broadcasting is limited to equal shapes and scalar-vs-tensor. Row-wise
//! broadcasts (biases, norm gains, lower bounds) live inside the composite
//! operations that need them.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fused_kernel::{self, RecurrentInput, ReservoirTerm, TrafficCounter};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::ternary::{self, TernaryMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<F = f32> {
    pub name: String,
    pub latent: Tensor<F>,
    trainable: bool,
    grad: Option<Tensor<F>>,
}

impl<F: Real> Parameter<F> {
    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn grad(&self) -> Option<&Tensor<F>> {
        self.grad.as_ref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Tensor<F>> {
        self.grad.as_mut()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Add `g` into the gradient buffer (allocating it on first use).
    pub fn accumulate_grad(&mut self, g: Tensor<F>) -> Result<()> {
        if !self.trainable {
            return Err(Error::FrozenBackward);
        }
        if g.shape() != self.latent.shape() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                left: self.latent.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        self.accumulate(g);
        Ok(())
    }

    fn accumulate(&mut self, g: Tensor<F>) {
        debug_assert!(self.trainable, "gradient routed to frozen parameter {}", self.name);
        match &mut self.grad {
            Some(acc) => add_assign(acc.data_mut(), g.data()),
            None => self.grad = Some(g),
        }
    }
}

/// Owns every parameter of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F = f32> {
    params: Vec<Parameter<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, latent: Tensor<F>, trainable: bool) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            latent,
            trainable,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::clear_grad);
    }

    /// Number of parameters currently holding a gradient buffer.
    pub fn grad_buffers(&self) -> usize {
        self.params.iter().filter(|p| p.grad.is_some()).count()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.latent.numel())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Silu,
    Tanh,
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[inline]
pub fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

/// d/dx silu(x) = σ(x)(1 + x(1 − σ(x))).
#[inline]
pub fn silu_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

enum Op<F> {
    Leaf(Option<ParamId>),
    Binary(ElementwiseOp, Var, Var),
    Unary(ElementwiseOp, Var),
    SoftmaxAxis0(Var),
    CumsumAxis0(Var),
    SubRow0(Var),
    Row(Var, usize),
    Sum(Var),
    TernaryLinear {
        x: Var,
        matrix: Arc<TernaryMatrix>,
        latent: Option<Var>,
        bias: Option<Var>,
    },
    DenseLinear {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Recurrence {
        f_pre: Var,
        c_pre: Var,
        gamma: Var,
        reservoir: Option<ReservoirTerm>,
        batch: usize,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// How [`Tape::ternary_linear`] evaluates `x ⊛ W`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LinearKernel {
    /// Additions and subtractions over the trits.
    #[default]
    AddSub,
    /// Dense product against the dequantized matrix `β·T`. Same values up to
    /// summation order; faster on CPUs without a ternary datapath.
    Dequantized,
}

pub struct Tape<F: Real = f32> {
    nodes: Vec<Node<F>>,
    consumed: bool,
    traffic: TrafficCounter,
    kernel: LinearKernel,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_assign<F: Real>(acc: &mut [F], g: &[F]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn op_name(kind: ElementwiseOp) -> &'static str {
    match kind {
        ElementwiseOp::Add => "add",
        ElementwiseOp::Sub => "sub",
        ElementwiseOp::Mul => "mul",
        ElementwiseOp::Sigmoid => "sigmoid",
        ElementwiseOp::Silu => "silu",
        ElementwiseOp::Tanh => "tanh",
    }
}

/// Row-wise RMS normalization `x / sqrt(mean(x²) + ε) ⊙ gain`; also returns the
/// per-row reciprocal RMS.
pub fn rmsnorm_rows<F: Real>(x: &[F], gain: &[F], eps: f64) -> (Vec<F>, Vec<F>) {
    let d = gain.len();
    let eps = F::lit(eps);
    let dn = F::lit(d as f64);
    let mut out = vec![F::zero(); x.len()];
    let mut inv = Vec::with_capacity(x.len() / d);
    for (xr, yr) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let ms = xr.iter().fold(F::zero(), |s, &v| s + v * v) / dn;
        let r = F::one() / (ms + eps).sqrt();
        for ((y, &v), &g) in yr.iter_mut().zip(xr).zip(gain) {
            *y = v * r * g;
        }
        inv.push(r);
    }
    (out, inv)
}

fn add_bias_rows<F: Real>(y: &mut [F], bias: &[F]) {
    for row in y.chunks_exact_mut(bias.len()) {
        add_assign(row, bias);
    }
}

fn column_sums<F: Real>(g: &[F], cols: usize) -> Vec<F> {
    let mut s = vec![F::zero(); cols];
    for row in g.chunks_exact(cols) {
        add_assign(&mut s, row);
    }
    s
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            traffic: TrafficCounter::default(),
            kernel: LinearKernel::AddSub,
        }
    }

    pub fn with_kernel(kernel: LinearKernel) -> Self {
        Self { kernel, ..Self::new() }
    }

    pub fn kernel(&self) -> LinearKernel {
        self.kernel
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Buffer traffic of every recurrent traversal recorded on this tape.
    pub fn traffic(&self) -> TrafficCounter {
        self.traffic
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf(None),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.latent.clone(),
            op: Op::Leaf(Some(id)),
            needs_grad: p.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        use ElementwiseOp::*;
        let name = op_name(kind);
        match (kind, b) {
            (Add | Sub | Mul, Some(b)) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let shape = broadcast_shape(name, ta, tb)?;
                let n: usize = shape.iter().product();
                let (sa, sb) = (ta.numel() == 1 && n > 1, tb.numel() == 1 && n > 1);
                let data = (0..n)
                    .map(|i| {
                        let x = ta.data()[if sa { 0 } else { i }];
                        let y = tb.data()[if sb { 0 } else { i }];
                        match kind {
                            Add => x + y,
                            Sub => x - y,
                            _ => x * y,
                        }
                    })
                    .collect();
                let needs = self.needs(a) || self.needs(b);
                self.push(Tensor::new(shape, data)?, Op::Binary(kind, a, b), needs, name)
            }
            (Sigmoid | Silu | Tanh, None) => {
                let f: fn(F) -> F = match kind {
                    Sigmoid => sigmoid,
                    Silu => silu,
                    _ => |x: F| x.tanh(),
                };
                let value = self.value(a).map(f);
                let needs = self.needs(a);
                self.push(value, Op::Unary(kind, a), needs, name)
            }
            _ => Err(Error::InvalidArgument(format!(
                "{name} takes {} operand(s)",
                if matches!(kind, Add | Sub | Mul) { 2 } else { 1 }
            ))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, Some(b))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sigmoid, a, None)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Silu, a, None)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Tanh, a, None)
    }

    fn expect_matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: format!("{op} expects a matrix"),
            });
        }
        Ok((t.rows(), t.cols()))
    }

    /// Softmax down each column of an N×d matrix.
    pub fn softmax_axis0(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.expect_matrix(a, "softmax_axis0")?;
        let x = self.value(a).data();
        let mut out = vec![F::zero(); n * d];
        for j in 0..d {
            let max = (0..n).map(|i| x[i * d + j]).fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for i in 0..n {
                let e = (x[i * d + j] - max).exp();
                out[i * d + j] = e;
                z = z + e;
            }
            for i in 0..n {
                out[i * d + j] = out[i * d + j] / z;
            }
        }
        let needs = self.needs(a);
        self.push(
            Tensor::new(vec![n, d], out)?,
            Op::SoftmaxAxis0(a),
            needs,
            "softmax_axis0",
        )
    }

    /// Row k of the output is the sum of input rows 0..=k.
    pub fn cumsum_axis0(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.expect_matrix(a, "cumsum_axis0")?;
        let mut out = self.value(a).data().to_vec();
        for i in 1..n {
            for j in 0..d {
                out[i * d + j] = out[(i - 1) * d + j] + out[i * d + j];
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::new(vec![n, d], out)?, Op::CumsumAxis0(a), needs, "cumsum_axis0")
    }

    /// Subtract row 0 from every row.
    pub fn sub_row0(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.expect_matrix(a, "sub_row0")?;
        let x = self.value(a).data();
        let mut out = x.to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = x[i * d + j] - x[j];
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::new(vec![n, d], out)?, Op::SubRow0(a), needs, "sub_row0")
    }

    pub fn row(&mut self, a: Var, k: usize) -> Result<Var> {
        let (n, _) = self.expect_matrix(a, "row")?;
        if k >= n {
            return Err(Error::InvalidArgument(format!("row {k} of {n}")));
        }
        let value = Tensor::vector(self.value(a).row(k).to_vec());
        let needs = self.needs(a);
        self.push(value, Op::Row(a, k), needs, "row")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(F::zero(), |s, &v| s + v);
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs, "sum")
    }

    fn check_linear(&self, x: Var, rows: usize, cols: usize, bias: Option<Var>, op: &'static str) -> Result<()> {
        let tx = self.value(x);
        if tx.shape().len() != 2 || tx.cols() != rows {
            return Err(Error::ShapeMismatch {
                op,
                left: tx.shape().to_vec(),
                right: vec![rows, cols],
            });
        }
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.shape() != [cols] {
                return Err(Error::ShapeMismatch {
                    op,
                    left: tb.shape().to_vec(),
                    right: vec![cols],
                });
            }
        }
        Ok(())
    }

    /// `x ⊛ matrix (+ bias)`. With `latent` set, the backward pass routes a
    /// straight-through gradient into it.
    pub fn ternary_linear(
        &mut self,
        x: Var,
        matrix: Arc<TernaryMatrix>,
        latent: Option<Var>,
        bias: Option<Var>,
    ) -> Result<Var> {
        self.check_linear(x, matrix.rows(), matrix.cols(), bias, "ternary_linear")?;
        let mut y = match self.kernel {
            LinearKernel::AddSub => ternary::ternary_matmul(self.value(x), &matrix)?,
            LinearKernel::Dequantized => self.value(x).matmul(&matrix.dequantize())?,
        };
        if let Some(b) = bias {
            add_bias_rows(y.data_mut(), self.value(b).data());
        }
        let needs = self.needs(x) || latent.is_some_and(|l| self.needs(l)) || bias.is_some_and(|b| self.needs(b));
        self.push(
            y,
            Op::TernaryLinear {
                x,
                matrix,
                latent,
                bias,
            },
            needs,
            "ternary_linear",
        )
    }

    /// `x · w (+ bias)` with a full-precision weight.
    pub fn dense_linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (r, c) = self.expect_matrix(w, "dense_linear")?;
        self.check_linear(x, r, c, bias, "dense_linear")?;
        let mut y = self.value(x).matmul(self.value(w))?;
        if let Some(b) = bias {
            add_bias_rows(y.data_mut(), self.value(b).data());
        }
        let needs = self.needs(x) || self.needs(w) || bias.is_some_and(|b| self.needs(b));
        self.push(y, Op::DenseLinear { x, w, bias }, needs, "dense_linear")
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let tg = self.value(gain);
        let tx = self.value(x);
        if tg.shape().len() != 1 || tx.cols() != tg.numel() {
            return Err(Error::ShapeMismatch {
                op: "rmsnorm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let (out, inv_rms) = rmsnorm_rows(tx.data(), tg.data(), eps);
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gain);
        self.push(value, Op::RmsNorm { x, gain, inv_rms }, needs, "rmsnorm")
    }

    /// Gather rows of `table` (vocab×d) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.expect_matrix(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::InvalidArgument("embedding of an empty sequence".into()));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { token: id, vocab });
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let needs = self.needs(table);
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
            "embedding",
        )
    }

    /// Mean next-token cross-entropy of `logits` (M×V) against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, v) = self.expect_matrix(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: vec![m, v],
                right: vec![targets.len()],
            });
        }
        let x = self.value(logits).data();
        let mut probs = vec![F::zero(); m * v];
        let mut total = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::TokenOutOfRange { token: t, vocab: v });
            }
            let row = &x[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for (p, &l) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (l - max).exp();
                z = z + *p;
            }
            probs[i * v..(i + 1) * v].iter_mut().for_each(|p| *p = *p / z);
            total += (z.ln() + max - row[t]).as_f64();
        }
        let loss = Tensor::scalar(F::lit(total / m as f64));
        let needs = self.needs(logits);
        self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
            "cross_entropy",
        )
    }

    /// MLGRU state recurrence over `batch` independent sequences laid out
    /// sequence-major in the rows of `f_pre` / `c_pre`, each starting from a
    /// zero state. `gamma` is the layer's lower-bound vector.
    pub fn recurrence(
        &mut self,
        f_pre: Var,
        c_pre: Var,
        gamma: Var,
        reservoir: Option<ReservoirTerm>,
        batch: usize,
    ) -> Result<Var> {
        let (rows, d) = self.expect_matrix(f_pre, "recurrence")?;
        let shape = self.value(f_pre).shape().to_vec();
        if self.value(c_pre).shape() != shape.as_slice() || self.value(gamma).shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "recurrence",
                left: shape,
                right: self.value(c_pre).shape().to_vec(),
            });
        }
        if batch == 0 || rows % batch != 0 {
            return Err(Error::InvalidArgument(format!(
                "{rows} rows do not split into {batch} sequences"
            )));
        }
        let span = rows / batch * d;
        let h0 = vec![F::zero(); d];
        let mut out = Vec::with_capacity(rows * d);
        let mut traffic = TrafficCounter::default();
        {
            let (fp, cp, g) = (
                self.value(f_pre).data(),
                self.value(c_pre).data(),
                self.value(gamma).data(),
            );
            for b in 0..batch {
                let input = RecurrentInput {
                    f_pre: &fp[b * span..(b + 1) * span],
                    c_pre: &cp[b * span..(b + 1) * span],
                    gamma: g,
                    h0: &h0,
                    reservoir: reservoir.as_ref(),
                };
                let (h, counter) = fused_kernel::fused_recurrent(&input)?;
                out.extend_from_slice(&h);
                traffic += counter;
            }
        }
        self.traffic += traffic;
        let needs = self.needs(f_pre) || self.needs(c_pre) || self.needs(gamma);
        self.push(
            Tensor::new(shape, out)?,
            Op::Recurrence {
                f_pre,
                c_pre,
                gamma,
                reservoir,
                batch,
            },
            needs,
            "recurrence",
        )
    }

    /// Reverse pass from a scalar `loss`; gradients of trainable parameters
    /// are accumulated into `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<F>) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar(shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shape, F::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let contributions = self.node_backward(i, &g)?;
            for (v, gv) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => add_assign(acc.data_mut(), gv.data()),
                    slot => *slot = Some(gv),
                }
            }
            if let Op::Leaf(Some(pid)) = self.nodes[i].op {
                store.get_mut(pid).accumulate(g);
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf(_) => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = y.numel();
                let pick = |t: &Tensor<F>, k: usize| t.data()[if t.numel() == 1 { 0 } else { k }];
                let reduce = |t: &Tensor<F>, full: Vec<F>| -> Tensor<F> {
                    if t.numel() == 1 && n > 1 {
                        Tensor::new(t.shape().to_vec(), vec![full.iter().fold(F::zero(), |s, &v| s + v)]).unwrap()
                    } else {
                        Tensor::new(t.shape().to_vec(), full).unwrap()
                    }
                };
                let (ga, gb): (Vec<F>, Vec<F>) = match kind {
                    ElementwiseOp::Add => (g.data().to_vec(), g.data().to_vec()),
                    ElementwiseOp::Sub => (g.data().to_vec(), g.data().iter().map(|&v| -v).collect()),
                    _ => (
                        (0..n).map(|k| g.data()[k] * pick(tb, k)).collect(),
                        (0..n).map(|k| g.data()[k] * pick(ta, k)).collect(),
                    ),
                };
                out.push((*a, reduce(ta, ga)));
                out.push((*b, reduce(tb, gb)));
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let data = match kind {
                    ElementwiseOp::Sigmoid => g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &s)| gv * s * (F::one() - s))
                        .collect(),
                    ElementwiseOp::Silu => g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| gv * silu_grad(xv))
                        .collect(),
                    _ => g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &t)| gv * (F::one() - t * t))
                        .collect(),
                };
                out.push((*a, Tensor::new(x.shape().to_vec(), data)?));
            }
            Op::SoftmaxAxis0(a) => {
                let (n, d) = (y.rows(), y.cols());
                let (p, gd) = (y.data(), g.data());
                let mut ga = vec![F::zero(); n * d];
                for j in 0..d {
                    let dot = (0..n).fold(F::zero(), |s, k| s + gd[k * d + j] * p[k * d + j]);
                    for k in 0..n {
                        ga[k * d + j] = p[k * d + j] * (gd[k * d + j] - dot);
                    }
                }
                out.push((*a, Tensor::new(vec![n, d], ga)?));
            }
            Op::CumsumAxis0(a) => {
                let (n, d) = (y.rows(), y.cols());
                let mut ga = g.data().to_vec();
                for k in (0..n - 1).rev() {
                    for j in 0..d {
                        ga[k * d + j] = ga[k * d + j] + ga[(k + 1) * d + j];
                    }
                }
                out.push((*a, Tensor::new(vec![n, d], ga)?));
            }
            Op::SubRow0(a) => {
                let d = y.cols();
                let mut ga = g.data().to_vec();
                let col = column_sums(g.data(), d);
                for j in 0..d {
                    ga[j] = ga[j] - col[j];
                }
                out.push((*a, Tensor::new(y.shape().to_vec(), ga)?));
            }
            Op::Row(a, k) => {
                let src = self.value(*a);
                let mut ga = Tensor::zeros(src.shape());
                ga.row_mut(*k).copy_from_slice(g.data());
                out.push((*a, ga));
            }
            Op::Sum(a) => {
                let src = self.value(*a);
                out.push((*a, Tensor::full(src.shape(), g.item())));
            }
            Op::TernaryLinear {
                x,
                matrix,
                latent,
                bias,
            } => {
                let tx = self.value(*x);
                if self.needs(*x) {
                    let gx = match self.kernel {
                        LinearKernel::AddSub => ternary::ternary_matmul_transposed(g, matrix)?,
                        LinearKernel::Dequantized => {
                            let (m, r, c) = (tx.rows(), matrix.rows(), matrix.cols());
                            let mut gx = vec![F::zero(); m * r];
                            F::gemm(
                                m,
                                c,
                                r,
                                g.data(),
                                false,
                                matrix.dequantize::<F>().data(),
                                true,
                                &mut gx,
                                F::zero(),
                            );
                            Tensor::new(tx.shape().to_vec(), gx)?
                        }
                    };
                    out.push((*x, gx));
                }
                if let Some(l) = latent.filter(|l| self.needs(*l)) {
                    out.push((l, ternary::latent_grad(g, tx, matrix, self.value(l))?));
                }
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    out.push((b, Tensor::vector(column_sums(g.data(), matrix.cols()))));
                }
            }
            Op::DenseLinear { x, w, bias } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (m, r, c) = (tx.rows(), tw.rows(), tw.cols());
                if self.needs(*x) {
                    let mut gx = vec![F::zero(); m * r];
                    F::gemm(m, c, r, g.data(), false, tw.data(), true, &mut gx, F::zero());
                    out.push((*x, Tensor::new(tx.shape().to_vec(), gx)?));
                }
                if self.needs(*w) {
                    let mut gw = vec![F::zero(); r * c];
                    F::gemm(r, m, c, tx.data(), true, g.data(), false, &mut gw, F::zero());
                    out.push((*w, Tensor::new(vec![r, c], gw)?));
                }
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    out.push((b, Tensor::vector(column_sums(g.data(), c))));
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let d = tg.numel();
                let dn = F::lit(d as f64);
                let mut gx = vec![F::zero(); tx.numel()];
                let mut gg = vec![F::zero(); d];
                for (row, &r) in inv_rms.iter().enumerate() {
                    let xr = &tx.data()[row * d..(row + 1) * d];
                    let gr = &g.data()[row * d..(row + 1) * d];
                    let dot = (0..d).fold(F::zero(), |s, j| s + gr[j] * tg.data()[j] * xr[j]);
                    let k = r * r * r / dn * dot;
                    for j in 0..d {
                        gx[row * d + j] = gr[j] * tg.data()[j] * r - xr[j] * k;
                        gg[j] = gg[j] + gr[j] * xr[j] * r;
                    }
                }
                if self.needs(*x) {
                    out.push((*x, Tensor::new(tx.shape().to_vec(), gx)?));
                }
                if self.needs(*gain) {
                    out.push((*gain, Tensor::vector(gg)));
                }
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.cols();
                let mut gt = Tensor::zeros(tt.shape());
                for (k, &id) in ids.iter().enumerate() {
                    add_assign(gt.row_mut(id), &g.data()[k * d..(k + 1) * d]);
                }
                out.push((*table, gt));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let tl = self.value(*logits);
                let v = tl.cols();
                let scale = g.item() / F::lit(targets.len() as f64);
                let mut gl: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                for (k, &t) in targets.iter().enumerate() {
                    gl[k * v + t] = gl[k * v + t] - scale;
                }
                out.push((*logits, Tensor::new(tl.shape().to_vec(), gl)?));
            }
            Op::Recurrence {
                f_pre,
                c_pre,
                gamma,
                reservoir,
                batch,
            } => {
                let (fp, cp, gm) = (self.value(*f_pre), self.value(*c_pre), self.value(*gamma));
                let d = gm.numel();
                let span = fp.numel() / batch;
                let h0 = vec![F::zero(); d];
                let mut gf = Vec::with_capacity(fp.numel());
                let mut gc = Vec::with_capacity(fp.numel());
                let mut gg = vec![F::zero(); d];
                for b in 0..*batch {
                    let s = b * span..(b + 1) * span;
                    let input = RecurrentInput {
                        f_pre: &fp.data()[s.clone()],
                        c_pre: &cp.data()[s.clone()],
                        gamma: gm.data(),
                        h0: &h0,
                        reservoir: reservoir.as_ref(),
                    };
                    let grads = fused_kernel::recurrent_backward(&input, &y.data()[s.clone()], &g.data()[s])?;
                    gf.extend_from_slice(&grads.f_pre);
                    gc.extend_from_slice(&grads.c_pre);
                    add_assign(&mut gg, &grads.gamma);
                }
                out.push((*f_pre, Tensor::new(fp.shape().to_vec(), gf)?));
                out.push((*c_pre, Tensor::new(cp.shape().to_vec(), gc)?));
                out.push((*gamma, Tensor::vector(gg)));
            }
        }
        Ok(out)
    }
}
