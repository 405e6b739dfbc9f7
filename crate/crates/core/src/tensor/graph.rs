use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, ConvSpec, NormStats, PoolKind};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Operations the model code is written against. [`Tape`] records them for
/// a backward pass; [`Eager`] evaluates and forgets.
pub trait Graph {
    type Var: Clone;

    fn constant(&mut self, t: Tensor) -> Self::Var;
    fn param(&mut self, store: &ParamStore, id: ParamId) -> Self::Var;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor;

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    /// Adds `bias` (length = trailing extent) to every row.
    fn add_bias(&mut self, x: &Self::Var, bias: &Self::Var) -> Result<Self::Var>;
    fn scale(&mut self, x: &Self::Var, c: f64) -> Self::Var;
    fn add_scalar(&mut self, x: &Self::Var, c: f64) -> Self::Var;

    fn leaky_relu(&mut self, x: &Self::Var, slope: f64) -> Self::Var;
    /// `max(0, x)`; the subgradient at 0 is 0.
    fn relu(&mut self, x: &Self::Var) -> Self::Var;
    fn sigmoid(&mut self, x: &Self::Var) -> Self::Var;
    fn tanh(&mut self, x: &Self::Var) -> Self::Var;

    fn conv(&mut self, x: &Self::Var, kernel: &Self::Var, spec: ConvSpec) -> Result<Self::Var>;
    fn pool(&mut self, x: &Self::Var, kind: PoolKind, window: usize) -> Result<Self::Var>;
    fn upsample(&mut self, x: &Self::Var, factor: usize) -> Result<Self::Var>;

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn transpose(&mut self, a: &Self::Var) -> Result<Self::Var>;
    fn reshape(&mut self, x: &Self::Var, shape: &[usize]) -> Result<Self::Var>;

    /// Concatenates along the trailing axis.
    fn concat(&mut self, xs: &[Self::Var]) -> Result<Self::Var>;
    /// Takes `len` trailing-axis entries starting at `start`.
    fn slice(&mut self, x: &Self::Var, start: usize, len: usize) -> Result<Self::Var>;
    /// Stacks along a new leading axis.
    fn stack(&mut self, xs: &[Self::Var]) -> Result<Self::Var>;
    /// Selects entry `i` of the leading axis.
    fn index(&mut self, x: &Self::Var, i: usize) -> Result<Self::Var>;

    fn softmax(&mut self, x: &Self::Var) -> Self::Var;
    /// Per-channel normalization with statistics pooled over all leading axes.
    fn channel_norm(&mut self, x: &Self::Var, gamma: &Self::Var, beta: &Self::Var, eps: f64) -> Result<Self::Var>;
    fn layer_norm(&mut self, x: &Self::Var, gamma: &Self::Var, beta: &Self::Var, eps: f64) -> Result<Self::Var>;

    fn sum(&mut self, x: &Self::Var) -> Self::Var;
    fn mean(&mut self, x: &Self::Var) -> Self::Var;
}

// ---------------------------------------------------------------------------
// Shared forward helpers

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_bias_fwd(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let c = x.channels();
    if b.len() != c {
        return Err(Error::shape("add_bias", format!("input {:?}, bias length {}", x.shape(), b.len())));
    }
    let bd = b.data();
    let data = x.data().chunks(c).flat_map(|row| row.iter().zip(bd).map(|(v, b)| v + b)).collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

fn concat_fwd(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or(Error::Empty("concat"))?;
    let lead = &first.shape()[..first.rank() - 1];
    for t in xs {
        if &t.shape()[..t.rank() - 1] != lead {
            return Err(Error::shape("concat", format!("{:?} vs {:?}", t.shape(), first.shape())));
        }
    }
    let widths: Vec<usize> = xs.iter().map(|t| t.channels()).collect();
    let total: usize = widths.iter().sum();
    let rows = first.len() / widths[0];
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (t, &w) in xs.iter().zip(&widths) {
            data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::from_parts(shape, data))
}

fn slice_fwd(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let c = x.channels();
    if len == 0 || start + len > c {
        return Err(Error::shape("slice", format!("[{start}, {}) out of {c} channels", start + len)));
    }
    let data = x.data().chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Ok(Tensor::from_parts(shape, data))
}

fn index_fwd(x: &Tensor, i: usize) -> Result<Tensor> {
    if x.rank() < 2 || i >= x.shape()[0] {
        return Err(Error::shape("index", format!("entry {i} of {:?}", x.shape())));
    }
    let inner: Vec<usize> = x.shape()[1..].to_vec();
    let step: usize = inner.iter().product();
    Ok(Tensor::from_parts(inner, x.data()[i * step..(i + 1) * step].to_vec()))
}

fn reshape_fwd(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != x.len() || shape.iter().any(|&d| d == 0) {
        return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", x.shape())));
    }
    Ok(Tensor::from_parts(shape.to_vec(), x.data().to_vec()))
}

// ---------------------------------------------------------------------------
// Eager

/// Forward-only evaluation; intermediate buffers are released as soon as
/// nothing refers to them.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Graph for Eager {
    type Var = Arc<Tensor>;

    fn constant(&mut self, t: Tensor) -> Arc<Tensor> {
        Arc::new(t)
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Arc<Tensor> {
        store.get(id).shared()
    }

    fn value<'a>(&'a self, v: &'a Arc<Tensor>) -> &'a Tensor {
        v
    }

    fn add(&mut self, a: &Arc<Tensor>, b: &Arc<Tensor>) -> Result<Arc<Tensor>> {
        zip_map("add", a, b, |x, y| x + y).map(Arc::new)
    }

    fn sub(&mut self, a: &Arc<Tensor>, b: &Arc<Tensor>) -> Result<Arc<Tensor>> {
        zip_map("sub", a, b, |x, y| x - y).map(Arc::new)
    }

    fn mul(&mut self, a: &Arc<Tensor>, b: &Arc<Tensor>) -> Result<Arc<Tensor>> {
        zip_map("mul", a, b, |x, y| x * y).map(Arc::new)
    }

    fn add_bias(&mut self, x: &Arc<Tensor>, bias: &Arc<Tensor>) -> Result<Arc<Tensor>> {
        add_bias_fwd(x, bias).map(Arc::new)
    }

    fn scale(&mut self, x: &Arc<Tensor>, c: f64) -> Arc<Tensor> {
        Arc::new(map(x, |v| v * c))
    }

    fn add_scalar(&mut self, x: &Arc<Tensor>, c: f64) -> Arc<Tensor> {
        Arc::new(map(x, |v| v + c))
    }

    fn leaky_relu(&mut self, x: &Arc<Tensor>, slope: f64) -> Arc<Tensor> {
        Arc::new(map(x, |v| if v > 0.0 { v } else { slope * v }))
    }

    fn relu(&mut self, x: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(map(x, |v| v.max(0.0)))
    }

    fn sigmoid(&mut self, x: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(map(x, sigmoid))
    }

    fn tanh(&mut self, x: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(map(x, f64::tanh))
    }

    fn conv(&mut self, x: &Arc<Tensor>, kernel: &Arc<Tensor>, spec: ConvSpec) -> Result<Arc<Tensor>> {
        kernels::conv_forward(x, kernel, spec).map(Arc::new)
    }

    fn pool(&mut self, x: &Arc<Tensor>, kind: PoolKind, window: usize) -> Result<Arc<Tensor>> {
        kernels::pool_forward(x, kind, window).map(|p| Arc::new(p.value))
    }

    fn upsample(&mut self, x: &Arc<Tensor>, factor: usize) -> Result<Arc<Tensor>> {
        kernels::upsample_forward(x, factor).map(Arc::new)
    }

    fn matmul(&mut self, a: &Arc<Tensor>, b: &Arc<Tensor>) -> Result<Arc<Tensor>> {
        kernels::matmul_forward(a, b).map(Arc::new)
    }

    fn transpose(&mut self, a: &Arc<Tensor>) -> Result<Arc<Tensor>> {
        kernels::transpose(a).map(Arc::new)
    }

    fn reshape(&mut self, x: &Arc<Tensor>, shape: &[usize]) -> Result<Arc<Tensor>> {
        reshape_fwd(x, shape).map(Arc::new)
    }

    fn concat(&mut self, xs: &[Arc<Tensor>]) -> Result<Arc<Tensor>> {
        let refs: Vec<&Tensor> = xs.iter().map(|t| t.as_ref()).collect();
        concat_fwd(&refs).map(Arc::new)
    }

    fn slice(&mut self, x: &Arc<Tensor>, start: usize, len: usize) -> Result<Arc<Tensor>> {
        slice_fwd(x, start, len).map(Arc::new)
    }

    fn stack(&mut self, xs: &[Arc<Tensor>]) -> Result<Arc<Tensor>> {
        let owned: Vec<Tensor> = xs.iter().map(|t| t.as_ref().clone()).collect();
        Tensor::stack(&owned).map(Arc::new)
    }

    fn index(&mut self, x: &Arc<Tensor>, i: usize) -> Result<Arc<Tensor>> {
        index_fwd(x, i).map(Arc::new)
    }

    fn softmax(&mut self, x: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(kernels::softmax_rows(x))
    }

    fn channel_norm(&mut self, x: &Arc<Tensor>, gamma: &Arc<Tensor>, beta: &Arc<Tensor>, eps: f64) -> Result<Arc<Tensor>> {
        kernels::channel_norm_forward(x, gamma, beta, eps, None).map(|(t, _)| Arc::new(t))
    }

    fn layer_norm(&mut self, x: &Arc<Tensor>, gamma: &Arc<Tensor>, beta: &Arc<Tensor>, eps: f64) -> Result<Arc<Tensor>> {
        kernels::layer_norm_forward(x, gamma, beta, eps).map(|(t, _)| Arc::new(t))
    }

    fn sum(&mut self, x: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(Tensor::scalar(x.data().iter().sum()))
    }

    fn mean(&mut self, x: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64))
    }
}

// ---------------------------------------------------------------------------
// Tape

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    LeakyRelu(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Conv(usize, usize, ConvSpec),
    MaxPool(usize, Vec<usize>),
    AvgPool(usize, usize),
    Upsample(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
    Stack(Vec<usize>),
    Index(usize, usize),
    Softmax(usize),
    ChannelNorm { x: usize, gamma: usize, beta: usize, stats: NormStats },
    LayerNorm { x: usize, gamma: usize, beta: usize, stats: NormStats },
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so that [`Tape::backward`] can replay it
/// in reverse with each op's hand-written vector-Jacobian product.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
}

/// Gradients of a scalar with respect to every recorded value that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients in ascending parameter order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().filter_map(|&(id, node)| self.grads[node].as_deref().map(|g| (id, g)))
    }

    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in self.params() {
            store.accumulate_grad(id, g)?;
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], i: usize, g: Vec<f64>) {
    match &mut grads[i] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient (unlike [`Graph::constant`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_leaf(Arc::new(t), true)
    }

    fn push_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn t(&self, v: &Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be a scalar, got {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let need = |p: usize| self.nodes[p].requires_grad;
            let val = |p: usize| -> &Tensor { &self.nodes[p].value };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if need(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if need(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if need(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if need(*b) {
                        accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    if need(*a) {
                        let gb: Vec<f64> = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *a, gb);
                    }
                    if need(*b) {
                        let ga: Vec<f64> = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *b, ga);
                    }
                }
                Op::AddBias(x, b) => {
                    if need(*b) {
                        let c = val(*b).len();
                        let mut gb = vec![0.0; c];
                        for row in g.chunks(c) {
                            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                    if need(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Scale(x, c) => accumulate(&mut grads, *x, g.iter().map(|v| v * c).collect()),
                Op::AddScalar(x) => accumulate(&mut grads, *x, g),
                Op::LeakyRelu(x, slope) => {
                    let gx = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { g * slope })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let gx = g
                        .iter()
                        .zip(val(*x).data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = g.iter().zip(node.value.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let gx = g.iter().zip(node.value.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Conv(x, k, spec) => {
                    let (gx, gk) = kernels::conv_backward(val(*x), val(*k), *spec, &g, need(*x), need(*k));
                    if let Some(gx) = gx {
                        accumulate(&mut grads, *x, gx);
                    }
                    if let Some(gk) = gk {
                        accumulate(&mut grads, *k, gk);
                    }
                }
                Op::MaxPool(x, argmax) => {
                    accumulate(&mut grads, *x, kernels::max_pool_backward(val(*x).len(), argmax, &g));
                }
                Op::AvgPool(x, w) => {
                    accumulate(&mut grads, *x, kernels::avg_pool_backward(val(*x).shape(), *w, &g));
                }
                Op::Upsample(x, f) => {
                    accumulate(&mut grads, *x, kernels::upsample_backward(val(*x).shape(), *f, &g));
                }
                Op::MatMul(a, b) => {
                    let (ga, gb) = kernels::matmul_backward(val(*a), val(*b), &g);
                    if need(*a) {
                        accumulate(&mut grads, *a, ga);
                    }
                    if need(*b) {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Transpose(a) => {
                    let gt = Tensor::from_parts(node.value.shape().to_vec(), g);
                    accumulate(&mut grads, *a, kernels::transpose(&gt)?.into_data());
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, g),
                Op::Concat(parts) => {
                    let widths: Vec<usize> = parts.iter().map(|&p| val(p).channels()).collect();
                    let total: usize = widths.iter().sum();
                    let rows = g.len() / total;
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        if need(p) {
                            let mut gp = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        offset += w;
                    }
                }
                Op::Slice(x, start) => {
                    let c = val(*x).channels();
                    let w = node.value.channels();
                    let mut gx = vec![0.0; val(*x).len()];
                    for (row, grow) in gx.chunks_mut(c).zip(g.chunks(w)) {
                        row[*start..start + w].copy_from_slice(grow);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Stack(parts) => {
                    let step = g.len() / parts.len();
                    for (j, &p) in parts.iter().enumerate() {
                        if need(p) {
                            accumulate(&mut grads, p, g[j * step..(j + 1) * step].to_vec());
                        }
                    }
                }
                Op::Index(x, j) => {
                    let step = g.len();
                    let mut gx = vec![0.0; val(*x).len()];
                    gx[j * step..(j + 1) * step].copy_from_slice(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Softmax(x) => {
                    accumulate(&mut grads, *x, kernels::softmax_rows_backward(&node.value, &g));
                }
                Op::ChannelNorm { x, gamma, beta, stats } => {
                    let (gx, gg, gb) = kernels::channel_norm_backward(val(*x), val(*gamma), stats, &g);
                    if need(*x) {
                        accumulate(&mut grads, *x, gx);
                    }
                    if need(*gamma) {
                        accumulate(&mut grads, *gamma, gg);
                    }
                    if need(*beta) {
                        accumulate(&mut grads, *beta, gb);
                    }
                }
                Op::LayerNorm { x, gamma, beta, stats } => {
                    let (gx, gg, gb) = kernels::layer_norm_backward(val(*x), val(*gamma), stats, &g);
                    if need(*x) {
                        accumulate(&mut grads, *x, gx);
                    }
                    if need(*gamma) {
                        accumulate(&mut grads, *gamma, gg);
                    }
                    if need(*beta) {
                        accumulate(&mut grads, *beta, gb);
                    }
                }
                Op::Sum(x) => accumulate(&mut grads, *x, vec![g[0]; val(*x).len()]),
                Op::Mean(x) => {
                    let n = val(*x).len();
                    accumulate(&mut grads, *x, vec![g[0] / n as f64; n]);
                }
            }
        }
        let mut params: Vec<(ParamId, usize)> = self.params.iter().map(|(&id, &n)| (id, n)).collect();
        params.sort_unstable();
        Ok(Gradients { grads, params })
    }
}

impl Graph for Tape {
    type Var = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(Arc::new(t), false)
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&node) = self.params.get(&id) {
            return Var(node);
        }
        let v = self.push_leaf(store.get(id).shared(), true);
        self.params.insert(id, v.0);
        v
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.t(v)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = zip_map("add", self.t(a), self.t(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = zip_map("sub", self.t(a), self.t(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = zip_map("mul", self.t(a), self.t(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    fn add_bias(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        let out = add_bias_fwd(self.t(x), self.t(bias))?;
        Ok(self.push(out, Op::AddBias(x.0, bias.0), &[x.0, bias.0]))
    }

    fn scale(&mut self, x: &Var, c: f64) -> Var {
        let out = map(self.t(x), |v| v * c);
        self.push(out, Op::Scale(x.0, c), &[x.0])
    }

    fn add_scalar(&mut self, x: &Var, c: f64) -> Var {
        let out = map(self.t(x), |v| v + c);
        self.push(out, Op::AddScalar(x.0), &[x.0])
    }

    fn leaky_relu(&mut self, x: &Var, slope: f64) -> Var {
        let out = map(self.t(x), |v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x.0, slope), &[x.0])
    }

    fn relu(&mut self, x: &Var) -> Var {
        let out = map(self.t(x), |v| v.max(0.0));
        self.push(out, Op::Relu(x.0), &[x.0])
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        let out = map(self.t(x), sigmoid);
        self.push(out, Op::Sigmoid(x.0), &[x.0])
    }

    fn tanh(&mut self, x: &Var) -> Var {
        let out = map(self.t(x), f64::tanh);
        self.push(out, Op::Tanh(x.0), &[x.0])
    }

    fn conv(&mut self, x: &Var, kernel: &Var, spec: ConvSpec) -> Result<Var> {
        let out = kernels::conv_forward(self.t(x), self.t(kernel), spec)?;
        Ok(self.push(out, Op::Conv(x.0, kernel.0, spec), &[x.0, kernel.0]))
    }

    fn pool(&mut self, x: &Var, kind: PoolKind, window: usize) -> Result<Var> {
        let out = kernels::pool_forward(self.t(x), kind, window)?;
        let op = match out.argmax {
            Some(arg) => Op::MaxPool(x.0, arg),
            None => Op::AvgPool(x.0, window),
        };
        Ok(self.push(out.value, op, &[x.0]))
    }

    fn upsample(&mut self, x: &Var, factor: usize) -> Result<Var> {
        let out = kernels::upsample_forward(self.t(x), factor)?;
        Ok(self.push(out, Op::Upsample(x.0, factor), &[x.0]))
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::matmul_forward(self.t(a), self.t(b))?;
        Ok(self.push(out, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    fn transpose(&mut self, a: &Var) -> Result<Var> {
        let out = kernels::transpose(self.t(a))?;
        Ok(self.push(out, Op::Transpose(a.0), &[a.0]))
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let out = reshape_fwd(self.t(x), shape)?;
        Ok(self.push(out, Op::Reshape(x.0), &[x.0]))
    }

    fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = xs.iter().map(|v| self.t(v)).collect();
        let out = concat_fwd(&refs)?;
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        Ok(self.push(out, Op::Concat(ids.clone()), &ids))
    }

    fn slice(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let out = slice_fwd(self.t(x), start, len)?;
        Ok(self.push(out, Op::Slice(x.0, start), &[x.0]))
    }

    fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(Error::Empty("stack"))?;
        let shape = self.t(first).shape().to_vec();
        let mut data = Vec::with_capacity(self.t(first).len() * xs.len());
        for v in xs {
            let t = self.t(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("stack", format!("{:?} vs {shape:?}", t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        let mut out_shape = vec![xs.len()];
        out_shape.extend_from_slice(&shape);
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Stack(ids.clone()), &ids))
    }

    fn index(&mut self, x: &Var, i: usize) -> Result<Var> {
        let out = index_fwd(self.t(x), i)?;
        Ok(self.push(out, Op::Index(x.0, i), &[x.0]))
    }

    fn softmax(&mut self, x: &Var) -> Var {
        let out = kernels::softmax_rows(self.t(x));
        self.push(out, Op::Softmax(x.0), &[x.0])
    }

    fn channel_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let (out, stats) = kernels::channel_norm_forward(self.t(x), self.t(gamma), self.t(beta), eps, None)?;
        let op = Op::ChannelNorm { x: x.0, gamma: gamma.0, beta: beta.0, stats };
        Ok(self.push(out, op, &[x.0, gamma.0, beta.0]))
    }

    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let (out, stats) = kernels::layer_norm_forward(self.t(x), self.t(gamma), self.t(beta), eps)?;
        let op = Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, stats };
        Ok(self.push(out, op, &[x.0, gamma.0, beta.0]))
    }

    fn sum(&mut self, x: &Var) -> Var {
        let out = Tensor::scalar(self.t(x).data().iter().sum());
        self.push(out, Op::Sum(x.0), &[x.0])
    }

    fn mean(&mut self, x: &Var) -> Var {
        let t = self.t(x);
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(out, Op::Mean(x.0), &[x.0])
    }
}
