use std::collections::HashMap;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Conv3x3 { x: usize, w: usize },
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    Square(usize),
    BiasAdd { x: usize, bias: usize },
    ConcatChannels(Vec<usize>),
    Mean(usize),
    Sum(usize),
    Blur { x: usize, kernel: Vec<f64> },
    GatherBatch { x: usize, indices: Vec<usize> },
    BatchMean(usize),
    Outer { v: usize, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Define-by-run recording of a computation.
///
/// Leaves are either constants or parameters; parameters always receive a
/// gradient from [`Tape::backward`], exactly zero when the loss does not
/// depend on them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<usize>,
    spent: bool,
}

/// Gradients of the loss with respect to every parameter on the tape.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.map.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.map.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn rank4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    if t.shape().len() != 4 {
        return Err(Error::shape(format!(
            "{what} expects a rank-4 tensor, got {:?}",
            t.shape()
        )));
    }
    Ok(t.dims4())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Result<Var> {
        if self.spent {
            return Err(Error::Tape("tape already consumed by backward".into()));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::Tape(format!("variable {} is not on this tape", v.0)))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let n = self.node(a)?;
        let data = n.value.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(n.value.shape(), data)?;
        let ng = n.needs_grad;
        self.push(op, value, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        same_shape(&na.value, &nb.value, op_name(&op))?;
        let data = na
            .value
            .data()
            .iter()
            .zip(nb.value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(na.value.shape(), data)?;
        let ng = na.needs_grad || nb.needs_grad;
        self.push(op, value, ng)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf, value, false)
    }

    pub fn parameter(&mut self, value: Tensor) -> Result<Var> {
        let v = self.push(Op::Leaf, value, true)?;
        self.params.push(v.0);
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a.0, b.0), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a.0, s), |x| s * x)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar(a.0), |x| x + s)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a.0), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a.0), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    /// 3x3 convolution, stride 1, zero "same" padding, no bias.
    pub fn conv3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        let (nx, nw) = (self.node(x)?, self.node(w)?);
        let dims = rank4(&nx.value, "conv3x3 input")?;
        let [co, ci, kh, kw] = rank4(&nw.value, "conv3x3 weight")?;
        if ci != dims[1] || kh != 3 || kw != 3 {
            return Err(Error::shape(format!(
                "conv3x3 weight {:?} does not fit input {:?}",
                nw.value.shape(),
                nx.value.shape()
            )));
        }
        let out = kernels::conv3x3_forward(nx.value.data(), dims, nw.value.data(), co);
        let value = Tensor::new(&[dims[0], co, dims[2], dims[3]], out)?;
        let ng = nx.needs_grad || nw.needs_grad;
        self.push(Op::Conv3x3 { x: x.0, w: w.0 }, value, ng)
    }

    /// Adds a per-channel bias: `[C]` shared over the batch or `[B, C]` per sample.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (nx, nb) = (self.node(x)?, self.node(bias)?);
        let [b, c, h, w] = rank4(&nx.value, "bias_add input")?;
        let per_sample = match nb.value.shape() {
            [n] if *n == c => false,
            [nb_, n] if *nb_ == b && *n == c => true,
            s => {
                return Err(Error::shape(format!(
                    "bias {s:?} does not fit input {:?}",
                    nx.value.shape()
                )))
            }
        };
        let hw = h * w;
        let mut out = nx.value.data().to_vec();
        for bi in 0..b {
            for ci in 0..c {
                let bv = nb.value.data()[if per_sample { bi * c + ci } else { ci }];
                for v in &mut out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                    *v += bv;
                }
            }
        }
        let value = Tensor::new(nx.value.shape(), out)?;
        let ng = nx.needs_grad || nb.needs_grad;
        self.push(Op::BiasAdd { x: x.0, bias: bias.0 }, value, ng)
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let [b, _, h, w] = rank4(&self.node(*first)?.value, "concat")?;
        let mut total_c = 0;
        let mut ng = false;
        for p in parts {
            let n = self.node(*p)?;
            let [pb, pc, ph, pw] = rank4(&n.value, "concat")?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::shape("concat inputs differ outside the channel axis"));
            }
            total_c += pc;
            ng |= n.needs_grad;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(b * total_c * hw);
        for bi in 0..b {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let pc = t.shape()[1];
                out.extend_from_slice(&t.data()[bi * pc * hw..(bi + 1) * pc * hw]);
            }
        }
        let value = Tensor::new(&[b, total_c, h, w], out)?;
        self.push(
            Op::ConcatChannels(parts.iter().map(|v| v.0).collect()),
            value,
            ng,
        )
    }

    /// Mean of all entries as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a)?;
        if n.value.is_empty() {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let m = n.value.data().iter().sum::<f64>() / n.value.len() as f64;
        let ng = n.needs_grad;
        self.push(Op::Mean(a.0), Tensor::scalar(m), ng)
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a)?;
        let s = n.value.data().iter().sum::<f64>();
        let ng = n.needs_grad;
        self.push(Op::Sum(a.0), Tensor::scalar(s), ng)
    }

    /// Separable blur of each spatial plane, keeping only fully covered windows.
    pub fn blur(&mut self, x: Var, kernel: &[f64]) -> Result<Var> {
        let n = self.node(x)?;
        let [b, c, h, w] = rank4(&n.value, "blur")?;
        let k = kernel.len();
        if k == 0 || k > h || k > w {
            return Err(Error::shape(format!(
                "blur kernel of length {k} does not fit {h}x{w}"
            )));
        }
        let out = kernels::blur_valid_forward(n.value.data(), b * c, h, w, kernel);
        let value = Tensor::new(&[b, c, h + 1 - k, w + 1 - k], out)?;
        let ng = n.needs_grad;
        self.push(
            Op::Blur {
                x: x.0,
                kernel: kernel.to_vec(),
            },
            value,
            ng,
        )
    }

    /// Picks batch entries by index; indices may repeat or be reordered.
    pub fn gather_batch(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let n = self.node(x)?;
        let [b, c, h, w] = rank4(&n.value, "gather_batch")?;
        let stride = c * h * w;
        let mut out = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= b {
                return Err(Error::range(format!("batch index {i} outside 0..{b}")));
            }
            out.extend_from_slice(&n.value.data()[i * stride..(i + 1) * stride]);
        }
        let value = Tensor::new(&[indices.len(), c, h, w], out)?;
        let ng = n.needs_grad;
        self.push(
            Op::GatherBatch {
                x: x.0,
                indices: indices.to_vec(),
            },
            value,
            ng,
        )
    }

    /// Average over the batch axis: `[B, C, H, W] -> [1, C, H, W]`.
    pub fn batch_mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let [b, c, h, w] = rank4(&n.value, "batch_mean")?;
        if b == 0 {
            return Err(Error::shape("batch_mean of an empty batch"));
        }
        let stride = c * h * w;
        let mut out = vec![0.0; stride];
        for chunk in n.value.data().chunks_exact(stride) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        let inv = 1.0 / b as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(&[1, c, h, w], out)?;
        let ng = n.needs_grad;
        self.push(Op::BatchMean(x.0), value, ng)
    }

    /// Outer product of fixed weights with a vector: `[C] -> [n, C]`.
    pub fn outer(&mut self, v: Var, weights: &[f64]) -> Result<Var> {
        let n = self.node(v)?;
        if n.value.shape().len() != 1 {
            return Err(Error::shape(format!(
                "outer expects a vector, got {:?}",
                n.value.shape()
            )));
        }
        let c = n.value.len();
        let mut out = Vec::with_capacity(weights.len() * c);
        for &wt in weights {
            out.extend(n.value.data().iter().map(|x| wt * x));
        }
        let value = Tensor::new(&[weights.len(), c], out)?;
        let ng = n.needs_grad;
        self.push(
            Op::Outer {
                v: v.0,
                weights: weights.to_vec(),
            },
            value,
            ng,
        )
    }

    /// Reverse sweep from a scalar loss. The tape cannot be used afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.spent {
            return Err(Error::Tape("backward called twice on one tape".into()));
        }
        let root = self.node(loss)?;
        if !root.value.is_scalar() {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        self.spent = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }

        let mut map = HashMap::with_capacity(self.params.len());
        for &p in &self.params {
            let shape = self.nodes[p].value.shape().to_vec();
            let g = grads
                .get_mut(p)
                .and_then(Option::take)
                .map(|d| Tensor::new(&shape, d))
                .transpose()?
                .unwrap_or_else(|| Tensor::zeros(&shape));
            map.insert(Var(p), g);
        }
        Ok(Gradients { map })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |j: usize| nodes[j].value.data();
        let wants = |j: usize| nodes[j].needs_grad;
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g.to_vec());
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[*a], g.to_vec());
                }
                if wants(*b) {
                    accumulate(&mut grads[*b], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[*a], d);
                }
                if wants(*b) {
                    let d = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[*b], d);
                }
            }
            Op::Div(a, b) => {
                let y = val(*b);
                if wants(*a) {
                    let d = g.iter().zip(y).map(|(g, y)| g / y).collect();
                    accumulate(&mut grads[*a], d);
                }
                if wants(*b) {
                    let d = g
                        .iter()
                        .zip(out)
                        .zip(y)
                        .map(|((g, q), y)| -g * q / y)
                        .collect();
                    accumulate(&mut grads[*b], d);
                }
            }
            Op::Scale(a, s) => accumulate(&mut grads[*a], g.iter().map(|v| v * s).collect()),
            Op::AddScalar(a) => accumulate(&mut grads[*a], g.to_vec()),
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[*a], d);
            }
            Op::Sigmoid(a) => {
                let d = g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect();
                accumulate(&mut grads[*a], d);
            }
            Op::Abs(a) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(g, x)| {
                        if *x > 0.0 {
                            *g
                        } else if *x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(&mut grads[*a], d);
            }
            Op::Square(a) => {
                let d = g.iter().zip(val(*a)).map(|(g, x)| 2.0 * g * x).collect();
                accumulate(&mut grads[*a], d);
            }
            Op::Conv3x3 { x, w } => {
                let dims = nodes[*x].value.dims4();
                let co = nodes[*w].value.shape()[0];
                let (dx, dw) =
                    kernels::conv3x3_backward(val(*x), dims, val(*w), co, g, wants(*x), wants(*w));
                if let Some(dx) = dx {
                    accumulate(&mut grads[*x], dx);
                }
                if let Some(dw) = dw {
                    accumulate(&mut grads[*w], dw);
                }
            }
            Op::BiasAdd { x, bias } => {
                if wants(*x) {
                    accumulate(&mut grads[*x], g.to_vec());
                }
                if wants(*bias) {
                    let [b, c, h, w] = nodes[*x].value.dims4();
                    let per_sample = nodes[*bias].value.shape().len() == 2;
                    let hw = h * w;
                    let mut d = vec![0.0; nodes[*bias].value.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let s: f64 = g[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].iter().sum();
                            d[if per_sample { bi * c + ci } else { ci }] += s;
                        }
                    }
                    accumulate(&mut grads[*bias], d);
                }
            }
            Op::ConcatChannels(parts) => {
                let [b, total_c, h, w] = nodes[i].value.dims4();
                let hw = h * w;
                let mut c_off = 0;
                for &p in parts {
                    let pc = nodes[p].value.shape()[1];
                    if wants(p) {
                        let mut d = Vec::with_capacity(b * pc * hw);
                        for bi in 0..b {
                            let start = (bi * total_c + c_off) * hw;
                            d.extend_from_slice(&g[start..start + pc * hw]);
                        }
                        accumulate(&mut grads[p], d);
                    }
                    c_off += pc;
                }
            }
            Op::Mean(a) => {
                let n = nodes[*a].value.len();
                accumulate(&mut grads[*a], vec![g[0] / n as f64; n]);
            }
            Op::Sum(a) => {
                let n = nodes[*a].value.len();
                accumulate(&mut grads[*a], vec![g[0]; n]);
            }
            Op::Blur { x, kernel } => {
                let [b, c, h, w] = nodes[*x].value.dims4();
                let d = kernels::blur_valid_backward(g, b * c, h, w, kernel);
                accumulate(&mut grads[*x], d);
            }
            Op::GatherBatch { x, indices } => {
                let [b, c, h, w] = nodes[*x].value.dims4();
                let stride = c * h * w;
                let mut d = vec![0.0; b * stride];
                for (k, &src) in indices.iter().enumerate() {
                    for (o, gv) in d[src * stride..(src + 1) * stride]
                        .iter_mut()
                        .zip(&g[k * stride..(k + 1) * stride])
                    {
                        *o += gv;
                    }
                }
                accumulate(&mut grads[*x], d);
            }
            Op::BatchMean(x) => {
                let b = nodes[*x].value.shape()[0];
                let inv = 1.0 / b as f64;
                let mut d = Vec::with_capacity(b * g.len());
                for _ in 0..b {
                    d.extend(g.iter().map(|v| v * inv));
                }
                accumulate(&mut grads[*x], d);
            }
            Op::Outer { v, weights } => {
                let c = nodes[*v].value.len();
                let mut d = vec![0.0; c];
                for (k, wt) in weights.iter().enumerate() {
                    for (o, gv) in d.iter_mut().zip(&g[k * c..(k + 1) * c]) {
                        *o += wt * gv;
                    }
                }
                accumulate(&mut grads[*v], d);
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Conv3x3 { .. } => "conv3x3",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Abs(..) => "abs",
        Op::Square(..) => "square",
        Op::BiasAdd { .. } => "bias_add",
        Op::ConcatChannels(..) => "concat_channels",
        Op::Mean(..) => "mean",
        Op::Sum(..) => "sum",
        Op::Blur { .. } => "blur",
        Op::GatherBatch { .. } => "gather_batch",
        Op::BatchMean(..) => "batch_mean",
        Op::Outer { .. } => "outer",
    }
}
