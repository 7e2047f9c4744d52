//! Dense double-precision tensors and a reverse-mode tape.
//!
//! Every value produced during a forward pass lives in a [`Tape`] arena and
//! is addressed by a copyable [`Var`] handle. Nodes are appended in
//! evaluation order, so the tape is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! The op set is deliberately small: matmul, add, scale, relu,
//! mean-over-region, l2-normalize, dot, concat and slice, plus reshape and a
//! fused softmax cross-entropy. Everything the part model and its losses
//! need is composed from these.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};

/// Norms below this are treated as zero by `l2_normalize`.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Data(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
        }
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &[&self.shape, &shape]));
        }
        Ok(Tensor { shape, ..self })
    }

    pub(crate) fn scaled(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
            requires_grad: false,
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A rectangular spatial window over an `[H, W, C]` (or `[1, H, W, C]`) map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Scale,
    Relu,
    MeanOverRegion,
    L2Normalize,
    Dot,
    Concat,
    Slice,
    Reshape,
    CrossEntropy,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    MeanOverRegion { src: Var, region: Region, width: usize, channels: usize },
    L2Normalize { src: Var, norm: f64 },
    Dot(Var, Var),
    Concat(Vec<Var>),
    Slice { src: Var, offset: usize, len: usize },
    Reshape(Var),
    CrossEntropy { logits: Var, target: usize },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::MeanOverRegion { .. } => OpKind::MeanOverRegion,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::Dot(..) => OpKind::Dot,
            Op::Concat(_) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape(_) => OpKind::Reshape,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of leaf nodes, keyed by their handle.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Append-only record of a forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Adds an input tensor. It participates in backward iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Adds a tensor that never receives gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
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

    fn shape_of(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].value.shape
    }

    /// Matrix product. Accepts `[m,k]x[k,n]`, `[m,k]x[k]` and `[k]x[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        let (m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (sa[0], sa[1], sb[1], vec![sa[0], sb[1]]),
            (2, 1) if sa[1] == sb[0] => (sa[0], sa[1], 1, vec![sa[0]]),
            (1, 2) if sa[0] == sb[0] => (1, sa[0], sb[1], vec![sb[1]]),
            _ => return Err(Error::shape("matmul", &[sa, sb])),
        };
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let s = av[i * k + kk];
                if s == 0.0 {
                    continue;
                }
                let brow = &bv[kk * n..(kk + 1) * n];
                for (o, &bj) in row.iter_mut().zip(brow) {
                    *o += s * bj;
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa != sb {
            return Err(Error::shape("add", &[sa, sb]));
        }
        let shape = sa.to_vec();
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// `a - b`, composed from `scale` and `add`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.nodes[a.0].value.scaled(factor);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| v.max(0.0)).collect(),
            requires_grad: false,
        };
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    /// Spatial mean over `region` of an `[H,W,C]` or `[1,H,W,C]` map,
    /// producing a `[C]` vector.
    pub fn mean_over_region(&mut self, src: Var, region: &Region) -> Result<Var> {
        let shape = self.shape_of(src);
        let (h, w, c) = match shape {
            [h, w, c] => (*h, *w, *c),
            [1, h, w, c] => (*h, *w, *c),
            _ => return Err(Error::shape("mean_over_region", &[shape])),
        };
        let Region { rows, cols } = region;
        if rows.is_empty() || cols.is_empty() || rows.end > h || cols.end > w {
            return Err(Error::shape(
                "mean_over_region",
                &[shape, &[rows.start, rows.end, cols.start, cols.end]],
            ));
        }
        let data = &self.nodes[src.0].value.data;
        let mut out = vec![0.0; c];
        for r in rows.clone() {
            for col in cols.clone() {
                let base = (r * w + col) * c;
                for (o, v) in out.iter_mut().zip(&data[base..base + c]) {
                    *o += v;
                }
            }
        }
        let count = (rows.len() * cols.len()) as f64;
        for o in &mut out {
            *o /= count;
        }
        let rg = self.any_grad(&[src]);
        Ok(self.push(
            Tensor::vector(out),
            Op::MeanOverRegion {
                src,
                region: region.clone(),
                width: w,
                channels: c,
            },
            rg,
        ))
    }

    /// Unit-L2 rescaling. Inputs with norm below [`NORM_EPS`] map to zero
    /// and pass no gradient.
    pub fn l2_normalize(&mut self, src: Var) -> Var {
        let value = &self.nodes[src.0].value;
        let norm = value.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let data = if norm < NORM_EPS {
            vec![0.0; value.data.len()]
        } else {
            value.data.iter().map(|v| v / norm).collect()
        };
        let out = Tensor {
            shape: value.shape.clone(),
            data,
            requires_grad: false,
        };
        let rg = self.any_grad(&[src]);
        self.push(out, Op::L2Normalize { src, norm }, rg)
    }

    /// Inner product of two equally shaped tensors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa != sb {
            return Err(Error::shape("dot", &[sa, sb]));
        }
        let v = dot(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, b), rg))
    }

    /// Concatenation along the leading axis. Trailing dimensions must agree;
    /// scalars are treated as length-1 vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat", &[]));
        };
        let trailing = |s: &[usize]| -> Vec<usize> {
            if s.is_empty() {
                Vec::new()
            } else {
                s[1..].to_vec()
            }
        };
        let tail = trailing(self.shape_of(first));
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape_of(p);
            if trailing(s) != tail {
                let shapes: Vec<&[usize]> = parts.iter().map(|&v| self.shape_of(v)).collect();
                return Err(Error::shape("concat", &shapes));
            }
            lead += s.first().copied().unwrap_or(1);
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Rows `range` of the leading axis.
    pub fn slice(&mut self, src: Var, range: Range<usize>) -> Result<Var> {
        let shape = self.shape_of(src);
        if shape.is_empty() || range.start >= range.end || range.end > shape[0] {
            return Err(Error::shape("slice", &[shape, &[range.start, range.end]]));
        }
        let stride: usize = shape[1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[0] = range.len();
        let offset = range.start * stride;
        let len = range.len() * stride;
        let data = self.nodes[src.0].value.data[offset..offset + len].to_vec();
        let rg = self.any_grad(&[src]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice { src, offset, len },
            rg,
        ))
    }

    pub fn reshape(&mut self, src: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[src.0].value.clone().reshape(shape)?;
        let rg = self.any_grad(&[src]);
        Ok(self.push(value, Op::Reshape(src), rg))
    }

    /// `-log softmax(logits)[target]`, evaluated with the max-shift.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let shape = self.shape_of(logits);
        if shape.len() != 1 || target >= shape[0] {
            return Err(Error::shape("cross_entropy", &[shape, &[target]]));
        }
        let z = &self.nodes[logits.0].value.data;
        let value = log_sum_exp(z) - z[target];
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy { logits, target },
            rg,
        ))
    }

    /// Sum of scalar nodes. An empty list yields a constant zero.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let Some(&first) = iter.next() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        let mut acc = first;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from `output` seeded with `seed`. Returns gradients for
    /// every leaf created with `requires_grad`.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Ok(Gradients::default());
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::Data(format!(
                "backward from node {} on a tape of {} nodes",
                output.0,
                self.nodes.len()
            )));
        }
        let out_shape = &self.nodes[output.0].value.shape;
        if seed.data.len() != self.nodes[output.0].value.data.len()
            || (seed.rank() > 0 && seed.shape != *out_shape)
        {
            return Err(Error::shape("backward", &[out_shape, &seed.shape]));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.data.clone());
        let mut result = Gradients::default();

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    let t = Tensor {
                        shape: node.value.shape.clone(),
                        data: g,
                        requires_grad: false,
                    };
                    result.grads.insert(Var(idx), t);
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if self.nodes[a.0].requires_grad {
                        let bv = &self.nodes[b.0].value.data;
                        let mut ga = vec![0.0; m * k];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for kk in 0..k {
                                ga[i * k + kk] = dot(grow, &bv[kk * n..(kk + 1) * n]);
                            }
                        }
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let av = &self.nodes[a.0].value.data;
                        let mut gb = vec![0.0; k * n];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for kk in 0..k {
                                let s = av[i * k + kk];
                                if s == 0.0 {
                                    continue;
                                }
                                for (o, &gj) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                    *o += s * gj;
                                }
                            }
                        }
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.nodes[b.0].requires_grad {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Scale(a, factor) => {
                    let ga = g.iter().map(|v| v * factor).collect();
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value.data;
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a.0], ga);
                }
                Op::MeanOverRegion {
                    src,
                    region,
                    width,
                    channels,
                } => {
                    let numel = self.nodes[src.0].value.data.len();
                    let count = (region.rows.len() * region.cols.len()) as f64;
                    let mut gs = vec![0.0; numel];
                    for r in region.rows.clone() {
                        for col in region.cols.clone() {
                            let base = (r * width + col) * channels;
                            for (o, gv) in gs[base..base + channels].iter_mut().zip(&g) {
                                *o += gv / count;
                            }
                        }
                    }
                    accumulate(&mut grads[src.0], gs);
                }
                Op::L2Normalize { src, norm } => {
                    let y = &node.value.data;
                    let gs = if *norm < NORM_EPS {
                        vec![0.0; y.len()]
                    } else {
                        let yg = dot(y, &g);
                        g.iter()
                            .zip(y)
                            .map(|(gv, yv)| (gv - yv * yg) / norm)
                            .collect()
                    };
                    accumulate(&mut grads[src.0], gs);
                }
                Op::Dot(a, b) => {
                    let s = g[0];
                    if self.nodes[a.0].requires_grad {
                        let ga = self.nodes[b.0].value.data.iter().map(|v| v * s).collect();
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = self.nodes[a.0].value.data.iter().map(|v| v * s).collect();
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.data.len();
                        if self.nodes[p.0].requires_grad {
                            accumulate(&mut grads[p.0], g[offset..offset + len].to_vec());
                        }
                        offset += len;
                    }
                }
                Op::Slice { src, offset, len } => {
                    let mut gs = vec![0.0; self.nodes[src.0].value.data.len()];
                    gs[*offset..offset + len].copy_from_slice(&g);
                    accumulate(&mut grads[src.0], gs);
                }
                Op::Reshape(src) => accumulate(&mut grads[src.0], g),
                Op::CrossEntropy { logits, target } => {
                    let z = &self.nodes[logits.0].value.data;
                    let lse = log_sum_exp(z);
                    let s = g[0];
                    let mut gz: Vec<f64> = z.iter().map(|v| s * (v - lse).exp()).collect();
                    gz[*target] -= s;
                    accumulate(&mut grads[logits.0], gz);
                }
            }
        }
        Ok(result)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Unit-L2 rescaling of a plain slice with the same zero guard as the tape op.
pub fn normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < NORM_EPS {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn add_componentwise() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn normalize_three_four_five() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let n = t.l2_normalize(a);
        approx(t.value(n).data(), &[0.6, 0.8], 1e-15);
    }

    #[test]
    fn normalize_guard_returns_zero() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]).with_grad());
        let n = t.l2_normalize(a);
        assert_eq!(t.value(n).data(), &[0.0; 3]);
        let s = t.dot(n, n).unwrap();
        let g = t.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn mean_of_constant_block() {
        let mut t = Tape::new();
        let m = t.constant(Tensor::new(vec![2, 2, 1], vec![1.0; 4]).unwrap());
        let r = t
            .mean_over_region(m, &Region { rows: 0..2, cols: 0..2 })
            .unwrap();
        assert_eq!(t.value(r).data(), &[1.0]);
    }

    #[test]
    fn grad_of_self_dot() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let d = t.dot(x, x).unwrap();
        let g = t.backward(d, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn relu_gate() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1.0, 2.0]).with_grad());
        let r = t.relu(x);
        let g = t.backward(r, &Tensor::vector(vec![1.0, 1.0])).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn normalize_vjp_matches_central_differences() {
        // x = [1, 0], seed = [0, 1]
        let f = |x: [f64; 2]| {
            let n = (x[0] * x[0] + x[1] * x[1]).sqrt();
            x[1] / n
        };
        let h = 1e-6;
        let fd = [
            (f([1.0 + h, 0.0]) - f([1.0 - h, 0.0])) / (2.0 * h),
            (f([1.0, h]) - f([1.0, -h])) / (2.0 * h),
        ];
        approx(&fd, &[0.0, 1.0], 1e-9);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 0.0]).with_grad());
        let n = t.l2_normalize(x);
        let g = t.backward(n, &Tensor::vector(vec![0.0, 1.0])).unwrap();
        approx(g.get(x).unwrap().data(), &fd, 1e-9);
    }

    #[test]
    fn empty_tape_backward_is_empty() {
        let t = Tape::new();
        let g = t.backward(Var(0), &Tensor::scalar(1.0)).unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
        let m = t.constant(Tensor::zeros(vec![2, 3]));
        let err = t.matmul(m, a).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(t.cross_entropy(a, 2).is_err());
        assert!(t.slice(a, 1..3).is_err());
    }

    #[test]
    fn matmul_variants() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let v = t.constant(Tensor::vector(vec![1., 0., -1.]));
        let av = t.matmul(a, v).unwrap();
        assert_eq!(t.value(av).data(), &[-2.0, -2.0]);
        let u = t.constant(Tensor::vector(vec![1., 1.]));
        let ua = t.matmul(u, a).unwrap();
        assert_eq!(t.value(ua).data(), &[5.0, 7.0, 9.0]);
        let b = t.constant(Tensor::new(vec![3, 1], vec![1., 1., 1.]).unwrap());
        let ab = t.matmul(a, b).unwrap();
        assert_eq!(t.value(ab).shape(), &[2, 1]);
        assert_eq!(t.value(ab).data(), &[6.0, 15.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1., 2.]).with_grad());
        let b = t.leaf(Tensor::vector(vec![3.]).with_grad());
        let c = t.concat(&[a, b]).unwrap();
        assert_eq!(t.value(c).data(), &[1., 2., 3.]);
        let s = t.slice(c, 1..3).unwrap();
        assert_eq!(t.value(s).data(), &[2., 3.]);
        let g = t.backward(s, &Tensor::vector(vec![10., 20.])).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0., 10.]);
        assert_eq!(g.get(b).unwrap().data(), &[20.]);
    }

    #[test]
    fn cross_entropy_uniform() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::vector(vec![0.3, 0.3]));
        let l = t.cross_entropy(z, 0).unwrap();
        assert!((t.value(l).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn constants_do_not_require_grad() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0]).with_grad());
        let b = t.scale(a, 2.0);
        assert!(!t.requires_grad(b));
        let g = t.backward(b, &Tensor::vector(vec![1.0])).unwrap();
        assert!(g.is_empty());
    }
}
