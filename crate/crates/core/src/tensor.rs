//! Dense `f64` tensors and a define-by-run tape for reverse-mode
//! differentiation.
//!
//! A [`Tape`] records every operation executed through a [`Var`] handle.
//! [`Tape::backward`] walks the record in exact reverse order and leaves the
//! accumulated gradient on every leaf that was created with
//! `requires_grad = true`. Operations are coarse (a whole convolution or
//! batch-norm is one record) so a training step produces a few dozen
//! entries rather than one per scalar.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

/// Lower clamp applied to every logarithm argument.
pub const LOG_CLAMP: f64 = 1e-12;

/// Row-major dense array with an optional gradient buffer.
///
/// Equality compares shape and values only.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
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
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::geometry(
                "tensor",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: positive shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("full: positive shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value]).expect("scalar")
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(&[n], data).expect("from_vec: non-empty data")
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::geometry("from_rows", "ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    /// Marks this tensor as a differentiable leaf.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length");
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(buf) = &mut self.grad {
            buf.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let mut t = Self::new(shape, self.data.clone())?;
        t.requires_grad = self.requires_grad;
        Ok(t)
    }

    /// Index of the maximum along `axis`, lowest index on ties. The result
    /// holds one entry per position of the remaining axes, in row-major order.
    pub fn argmax(&self, axis: usize) -> Result<Vec<usize>> {
        let (outer, n, inner) = split_axis("argmax", &self.shape, axis)?;
        Ok(argmax_axis(&self.data, outer, n, inner))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }
}

fn argmax_axis(data: &[f64], outer: usize, n: usize, inner: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let mut best = 0;
            let mut best_v = data[o * n * inner + i];
            for k in 1..n {
                let v = data[(o * n + k) * inner + i];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            out.push(best);
        }
    }
    out
}

fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Rank {
            op,
            expected: axis + 1,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Geometry of a 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_len: usize,
    pub out_len: usize,
}

impl ConvGeometry {
    pub fn output_len(
        in_len: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<usize> {
        if stride == 0 {
            return Err(Error::geometry("conv1d", "stride must be at least 1"));
        }
        let padded = in_len + 2 * padding;
        if padded < kernel {
            return Err(Error::geometry(
                "conv1d",
                format!("kernel {kernel} exceeds padded length {padded}"),
            ));
        }
        Ok((padded - kernel) / stride + 1)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Relu(usize),
    Sigmoid(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    SumAxis {
        x: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Transpose {
        x: usize,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(usize),
    Concat {
        parts: Vec<usize>,
        outer: usize,
        sizes: Vec<usize>,
        inner: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        x: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    CrossEntropy {
        p: usize,
        labels: Vec<usize>,
        classes: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
        rows: usize,
        input: usize,
        output: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        geo: ConvGeometry,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        dims: [usize; 3],
        batch_stats: bool,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only operation record.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bindings: RefCell<HashMap<usize, usize>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Batch-norm statistics produced in training mode.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Number of values that entered each channel's statistics.
    pub count: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let op = if requires_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records `t` as a leaf. Its `requires_grad` flag carries over.
    pub fn var(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a constant leaf that never receives a gradient.
    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push(vec![1], vec![value], Op::Leaf, false)
    }

    /// Records `t` once per `key`: later calls with the same key return the
    /// same leaf, so a parameter used by several paths accumulates a single
    /// gradient.
    pub fn bind(&self, key: usize, t: &Tensor) -> Var<'_> {
        if let Some(&id) = self.bindings.borrow().get(&key) {
            return Var { tape: self, id };
        }
        let v = self.var(t);
        self.bindings.borrow_mut().insert(key, v.id);
        v
    }

    /// Keys registered through [`Tape::bind`] with the leaf gradient each
    /// one accumulated.
    pub fn bound_grads(&self) -> Vec<(usize, Vec<f64>)> {
        let nodes = self.nodes.borrow();
        let mut out: Vec<_> = self
            .bindings
            .borrow()
            .iter()
            .filter_map(|(&key, &id)| nodes[id].grad.clone().map(|g| (key, g)))
            .collect();
        out.sort_by_key(|(k, _)| *k);
        out
    }

    pub fn value(&self, v: Var<'_>) -> Vec<f64> {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn shape(&self, v: Var<'_>) -> Vec<usize> {
        self.nodes.borrow()[v.id].shape.clone()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Vec<f64>> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    /// Back-propagates from a scalar `loss`. Leaf gradients accumulate
    /// across calls.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if root.value.len() != 1 {
                return Err(Error::Rank {
                    op: "backward",
                    expected: 0,
                    shape: root.shape.clone(),
                });
            }
            let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
            adj[loss.id] = Some(vec![1.0]);
            let mut leaves = Vec::new();
            for id in (0..=loss.id).rev() {
                let Some(g) = adj[id].take() else { continue };
                let node = &nodes[id];
                if !node.requires_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaves.push((id, g));
                } else {
                    propagate(&nodes, node, &g, &mut adj);
                }
            }
            leaves
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            let node = &mut nodes[id];
            match &mut node.grad {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    // Ops --------------------------------------------------------------

    fn unary(&self, x: Var<'_>, f: impl Fn(f64) -> f64, op: Op) -> Var<'_> {
        let (shape, value, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.id];
            (
                n.shape.clone(),
                n.value.iter().map(|&v| f(v)).collect(),
                n.requires_grad,
            )
        };
        self.push(shape, value, op, rg)
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var<'_>,
        b: Var<'_>,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'_>> {
        let (shape, value, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.id], &nodes[b.id]);
            if na.shape != nb.shape {
                return Err(Error::shape(name, &na.shape, &nb.shape));
            }
            let value = na
                .value
                .iter()
                .zip(&nb.value)
                .map(|(&x, &y)| f(x, y))
                .collect();
            (
                na.shape.clone(),
                value,
                na.requires_grad || nb.requires_grad,
            )
        };
        Ok(self.push(shape, value, op, rg))
    }

    fn matmul(&self, a: Var<'_>, b: Var<'_>) -> Result<Var<'_>> {
        let (shape, value, rg, op) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.id], &nodes[b.id]);
            let (batch, m, k, k2, n) = match (na.shape.as_slice(), nb.shape.as_slice()) {
                (&[m, k], &[k2, n]) => (1, m, k, k2, n),
                (&[ba, m, k], &[bb, k2, n]) if ba == bb => (ba, m, k, k2, n),
                _ => return Err(Error::shape("matmul", &na.shape, &nb.shape)),
            };
            if k != k2 {
                return Err(Error::shape("matmul", &na.shape, &nb.shape));
            }
            let mut out = vec![0.0; batch * m * n];
            for bi in 0..batch {
                gemm_nn(
                    &na.value[bi * m * k..(bi + 1) * m * k],
                    &nb.value[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            let shape = if na.shape.len() == 2 {
                vec![m, n]
            } else {
                vec![batch, m, n]
            };
            let op = Op::MatMul {
                a: a.id,
                b: b.id,
                batch,
                m,
                k,
                n,
            };
            (shape, out, na.requires_grad || nb.requires_grad, op)
        };
        Ok(self.push(shape, value, op, rg))
    }

    fn linear(&self, x: Var<'_>, w: Var<'_>, b: Var<'_>) -> Result<Var<'_>> {
        let (shape, value, rg, op) = {
            let nodes = self.nodes.borrow();
            let (nx, nw, nb) = (&nodes[x.id], &nodes[w.id], &nodes[b.id]);
            let (rows, input) = match nx.shape.as_slice() {
                &[r, i] => (r, i),
                _ => {
                    return Err(Error::Rank {
                        op: "linear",
                        expected: 2,
                        shape: nx.shape.clone(),
                    })
                }
            };
            let output = match nw.shape.as_slice() {
                &[o, i] if i == input => o,
                _ => return Err(Error::shape("linear", &nx.shape, &nw.shape)),
            };
            if nb.shape != [output] {
                return Err(Error::shape("linear bias", &nw.shape, &nb.shape));
            }
            let mut out = vec![0.0; rows * output];
            for r in 0..rows {
                let xr = &nx.value[r * input..(r + 1) * input];
                for o in 0..output {
                    let wr = &nw.value[o * input..(o + 1) * input];
                    out[r * output + o] = nb.value[o] + dot(xr, wr);
                }
            }
            let op = Op::Linear {
                x: x.id,
                w: w.id,
                b: b.id,
                rows,
                input,
                output,
            };
            let rg = nx.requires_grad || nw.requires_grad || nb.requires_grad;
            (vec![rows, output], out, rg, op)
        };
        Ok(self.push(shape, value, op, rg))
    }

    fn conv1d(
        &self,
        x: Var<'_>,
        w: Var<'_>,
        b: Var<'_>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'_>> {
        let (shape, value, rg, op) = {
            let nodes = self.nodes.borrow();
            let (nx, nw, nb) = (&nodes[x.id], &nodes[w.id], &nodes[b.id]);
            let (batch, cin, lin) = match nx.shape.as_slice() {
                &[b, c, l] => (b, c, l),
                _ => {
                    return Err(Error::Rank {
                        op: "conv1d",
                        expected: 3,
                        shape: nx.shape.clone(),
                    })
                }
            };
            let (cout, kernel) = match nw.shape.as_slice() {
                &[o, i, k] if i == cin => (o, k),
                _ => return Err(Error::shape("conv1d", &nx.shape, &nw.shape)),
            };
            if nb.shape != [cout] {
                return Err(Error::shape("conv1d bias", &nw.shape, &nb.shape));
            }
            let lout = ConvGeometry::output_len(lin, kernel, stride, padding)?;
            let geo = ConvGeometry {
                batch,
                in_channels: cin,
                out_channels: cout,
                kernel,
                stride,
                padding,
                in_len: lin,
                out_len: lout,
            };
            let out = conv1d_forward(&nx.value, &nw.value, &nb.value, &geo);
            let rg = nx.requires_grad || nw.requires_grad || nb.requires_grad;
            (
                vec![batch, cout, lout],
                out,
                rg,
                Op::Conv1d {
                    x: x.id,
                    w: w.id,
                    b: b.id,
                    geo,
                },
            )
        };
        Ok(self.push(shape, value, op, rg))
    }

    fn max_pool1d(&self, x: Var<'_>, kernel: usize, stride: usize) -> Result<Var<'_>> {
        let (shape, value, rg, op) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            let (batch, ch, len) = match nx.shape.as_slice() {
                &[b, c, l] => (b, c, l),
                _ => {
                    return Err(Error::Rank {
                        op: "maxpool1d",
                        expected: 3,
                        shape: nx.shape.clone(),
                    })
                }
            };
            if kernel == 0 || stride == 0 {
                return Err(Error::geometry(
                    "maxpool1d",
                    "kernel and stride must be at least 1",
                ));
            }
            if kernel > len {
                return Err(Error::geometry(
                    "maxpool1d",
                    format!("kernel {kernel} exceeds length {len}"),
                ));
            }
            let lout = (len - kernel) / stride + 1;
            let mut out = Vec::with_capacity(batch * ch * lout);
            let mut argmax = Vec::with_capacity(batch * ch * lout);
            for row in 0..batch * ch {
                let base = row * len;
                for j in 0..lout {
                    let start = base + j * stride;
                    let mut best = start;
                    for idx in start + 1..start + kernel {
                        if nx.value[idx] > nx.value[best] {
                            best = idx;
                        }
                    }
                    out.push(nx.value[best]);
                    argmax.push(best);
                }
            }
            (
                vec![batch, ch, lout],
                out,
                nx.requires_grad,
                Op::MaxPool { x: x.id, argmax },
            )
        };
        Ok(self.push(shape, value, op, rg))
    }

    fn batch_norm(
        &self,
        x: Var<'_>,
        gamma: Var<'_>,
        beta: Var<'_>,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var<'_>, Option<BatchStats>)> {
        let (shape, value, rg, op, stats) = {
            let nodes = self.nodes.borrow();
            let (nx, ng, nb) = (&nodes[x.id], &nodes[gamma.id], &nodes[beta.id]);
            let (batch, ch, len) = match nx.shape.as_slice() {
                &[b, c, l] => (b, c, l),
                _ => {
                    return Err(Error::Rank {
                        op: "batchnorm1d",
                        expected: 3,
                        shape: nx.shape.clone(),
                    })
                }
            };
            if ng.shape != [ch] || nb.shape != [ch] {
                return Err(Error::shape("batchnorm1d", &nx.shape, &ng.shape));
            }
            let count = batch * len;
            let (mean, var) = match running {
                Some((m, v)) => (m.to_vec(), v.to_vec()),
                None => {
                    if count < 2 {
                        return Err(Error::Statistics { count });
                    }
                    let mut mean = vec![0.0; ch];
                    let mut var = vec![0.0; ch];
                    for c in 0..ch {
                        let mut s = 0.0;
                        for b in 0..batch {
                            s += nx.value[(b * ch + c) * len..(b * ch + c + 1) * len]
                                .iter()
                                .sum::<f64>();
                        }
                        let m = s / count as f64;
                        let mut sq = 0.0;
                        for b in 0..batch {
                            sq += nx.value[(b * ch + c) * len..(b * ch + c + 1) * len]
                                .iter()
                                .map(|v| (v - m) * (v - m))
                                .sum::<f64>();
                        }
                        mean[c] = m;
                        var[c] = sq / count as f64;
                    }
                    (mean, var)
                }
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; nx.value.len()];
            let mut out = vec![0.0; nx.value.len()];
            for b in 0..batch {
                for c in 0..ch {
                    let off = (b * ch + c) * len;
                    for i in off..off + len {
                        let h = (nx.value[i] - mean[c]) * inv_std[c];
                        xhat[i] = h;
                        out[i] = ng.value[c] * h + nb.value[c];
                    }
                }
            }
            let stats = running.is_none().then_some(BatchStats { mean, var, count });
            let op = Op::BatchNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                dims: [batch, ch, len],
                batch_stats: running.is_none(),
            };
            let rg = nx.requires_grad || ng.requires_grad || nb.requires_grad;
            (nx.shape.clone(), out, rg, op, stats)
        };
        Ok((self.push(shape, value, op, rg), stats))
    }

    fn softmax(&self, x: Var<'_>, axis: usize) -> Result<Var<'_>> {
        let (shape, value, rg, op) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            let (outer, n, inner) = split_axis("softmax", &nx.shape, axis)?;
            if nx.value.iter().any(|v| v.is_nan()) {
                return Err(Error::numeric("softmax", "NaN input"));
            }
            let mut out = vec![0.0; nx.value.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let max = (0..n)
                        .map(|k| nx.value[at(k)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for k in 0..n {
                        let e = (nx.value[at(k)] - max).exp();
                        out[at(k)] = e;
                        total += e;
                    }
                    for k in 0..n {
                        out[at(k)] /= total;
                    }
                }
            }
            let op = Op::Softmax {
                x: x.id,
                outer,
                n,
                inner,
            };
            (nx.shape.clone(), out, nx.requires_grad, op)
        };
        Ok(self.push(shape, value, op, rg))
    }

    fn cross_entropy(&self, p: Var<'_>, labels: &[usize]) -> Result<Var<'_>> {
        let (value, rg, op) = {
            let nodes = self.nodes.borrow();
            let np = &nodes[p.id];
            let (rows, classes) = match np.shape.as_slice() {
                &[r, k] => (r, k),
                _ => {
                    return Err(Error::Rank {
                        op: "cross_entropy",
                        expected: 2,
                        shape: np.shape.clone(),
                    })
                }
            };
            if labels.len() != rows {
                return Err(Error::shape("cross_entropy", &np.shape, &[labels.len()]));
            }
            for r in 0..rows {
                let s: f64 = np.value[r * classes..(r + 1) * classes].iter().sum();
                if !((s - 1.0).abs() <= 1e-6) {
                    return Err(Error::numeric(
                        "cross_entropy",
                        format!("row {r} sums to {s}, not a probability vector"),
                    ));
                }
            }
            let mut total = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                if y >= classes {
                    return Err(Error::Label { label: y, classes });
                }
                total -= np.value[r * classes + y].max(LOG_CLAMP).ln();
            }
            let op = Op::CrossEntropy {
                p: p.id,
                labels: labels.to_vec(),
                classes,
            };
            (total / rows as f64, np.requires_grad, op)
        };
        Ok(self.push(vec![1], vec![value], op, rg))
    }

    fn sum_axis(&self, x: Var<'_>, axis: usize) -> Result<Var<'_>> {
        let (shape, value, rg, op) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            let (outer, n, inner) = split_axis("sum_axis", &nx.shape, axis)?;
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let src = &nx.value[(o * n + k) * inner..(o * n + k + 1) * inner];
                    out[o * inner..(o + 1) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
            }
            let mut shape: Vec<usize> = nx.shape.clone();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            let op = Op::SumAxis {
                x: x.id,
                outer,
                n,
                inner,
            };
            (shape, out, nx.requires_grad, op)
        };
        Ok(self.push(shape, value, op, rg))
    }

    fn transpose(&self, x: Var<'_>) -> Result<Var<'_>> {
        let (shape, value, rg, op) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            let (batch, rows, cols) = match *nx.shape.as_slice() {
                [r, c] => (1, r, c),
                [b, r, c] => (b, r, c),
                _ => {
                    return Err(Error::Rank {
                        op: "transpose",
                        expected: 2,
                        shape: nx.shape.clone(),
                    })
                }
            };
            let mut out = vec![0.0; nx.value.len()];
            for b in 0..batch {
                let base = b * rows * cols;
                for r in 0..rows {
                    for c in 0..cols {
                        out[base + c * rows + r] = nx.value[base + r * cols + c];
                    }
                }
            }
            let shape = if nx.shape.len() == 2 {
                vec![cols, rows]
            } else {
                vec![batch, cols, rows]
            };
            let op = Op::Transpose {
                x: x.id,
                batch,
                rows,
                cols,
            };
            (shape, out, nx.requires_grad, op)
        };
        Ok(self.push(shape, value, op, rg))
    }

    fn reshape(&self, x: Var<'_>, shape: &[usize]) -> Result<Var<'_>> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            if shape.iter().product::<usize>() != nx.value.len() || shape.contains(&0) {
                return Err(Error::shape("reshape", &nx.shape, shape));
            }
            (nx.value.clone(), nx.requires_grad)
        };
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x.id), rg))
    }

    fn concat(&self, parts: &[Var<'_>], axis: usize) -> Result<Var<'_>> {
        let (shape, value, rg, op) = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| Error::geometry("concat", "no inputs"))?;
            let ref_shape = &nodes[first.id].shape;
            let (outer, _, inner) = split_axis("concat", ref_shape, axis)?;
            let mut sizes = Vec::with_capacity(parts.len());
            for p in parts {
                let s = &nodes[p.id].shape;
                let compatible = s.len() == ref_shape.len()
                    && s.iter()
                        .zip(ref_shape)
                        .enumerate()
                        .all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(Error::shape("concat", ref_shape, s));
                }
                sizes.push(s[axis]);
            }
            let total: usize = sizes.iter().sum();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for (p, &n) in parts.iter().zip(&sizes) {
                    out.extend_from_slice(&nodes[p.id].value[o * n * inner..(o + 1) * n * inner]);
                }
            }
            let mut shape = ref_shape.clone();
            shape[axis] = total;
            let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
            let op = Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                outer,
                sizes,
                inner,
            };
            (shape, out, rg, op)
        };
        Ok(self.push(shape, value, op, rg))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape(*self)
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.value(*self)
    }

    /// Value as a detached tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&self.shape(), self.value()).expect("recorded shapes are valid")
    }

    /// First element; intended for scalar results.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.grad(*self)
    }

    /// Same value recorded as a fresh constant leaf; no gradient flows back.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push(self.shape(), self.value(), Op::Leaf, false)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape
            .binary("add", self, other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape
            .binary("sub", self, other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape
            .binary("mul", self, other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self, |v| v * c, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape.unary(self, |v| v + c, Op::AddScalar(self.id))
    }

    /// `c - self`, elementwise.
    pub fn rsub_scalar(self, c: f64) -> Var<'t> {
        self.neg().add_scalar(c)
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self, f64::exp, Op::Exp(self.id))
    }

    /// Natural log with the argument clamped below at [`LOG_CLAMP`].
    pub fn log(self) -> Var<'t> {
        self.tape
            .unary(self, |v| v.max(LOG_CLAMP).ln(), Op::Log(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        self.tape.unary(self, f64::abs, Op::Abs(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(self, |v| v.max(0.0), Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self, sigmoid, Op::Sigmoid(self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape
            .unary(self, |v| v.clamp(lo, hi), Op::Clamp(self.id, lo, hi))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(self) -> Var<'t> {
        let total = self.value().iter().sum();
        let rg = self.tape.nodes.borrow()[self.id].requires_grad;
        self.tape.push(vec![1], vec![total], Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.tape.nodes.borrow()[self.id].value.len();
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over `axis`, dropping it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.tape.sum_axis(self, axis)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let n = *self.shape().get(axis).ok_or_else(|| Error::Rank {
            op: "mean_axis",
            expected: axis + 1,
            shape: self.shape(),
        })?;
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        self.tape.transpose(self)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.reshape(self, shape)
    }

    /// `[m×k]·[k×n]`, or the batched form `[b×m×k]·[b×k×n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.matmul(self, other)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.tape.softmax(self, axis)
    }

    /// Mean negative log-probability of `labels` under the rows of `self`.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        self.tape.cross_entropy(self, labels)
    }

    /// `self·weightᵀ + bias` for `self: [rows×in]`, `weight: [out×in]`.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.tape.linear(self, weight, bias)
    }

    /// Zero-padded cross-correlation over `self: [B×C_in×L]`.
    pub fn conv1d(
        self,
        weight: Var<'t>,
        bias: Var<'t>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        self.tape.conv1d(self, weight, bias, stride, padding)
    }

    pub fn max_pool1d(self, kernel: usize, stride: usize) -> Result<Var<'t>> {
        self.tape.max_pool1d(self, kernel, stride)
    }

    /// Normalizes with the batch's own per-channel statistics and returns
    /// them for running-average bookkeeping.
    pub fn batch_norm_train(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        eps: f64,
    ) -> Result<(Var<'t>, BatchStats)> {
        let (v, stats) = self.tape.batch_norm(self, gamma, beta, eps, None)?;
        Ok((v, stats.expect("train mode computes statistics")))
    }

    /// Normalizes with fixed statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var<'t>> {
        Ok(self
            .tape
            .batch_norm(self, gamma, beta, eps, Some((mean, var)))?
            .0)
    }

    pub fn argmax(&self, axis: usize) -> Result<Vec<usize>> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let (outer, k, inner) = split_axis("argmax", &n.shape, axis)?;
        Ok(argmax_axis(&n.value, outer, k, inner))
    }
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let tape = parts
        .first()
        .ok_or_else(|| Error::geometry("concat", "no inputs"))?
        .tape;
    tape.concat(parts, axis)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a4, b4) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let tail: f64 = a4
        .remainder()
        .iter()
        .zip(b4.remainder())
        .map(|(x, y)| x * y)
        .sum();
    let mut acc = [0.0; 4];
    for (x, y) in a4.zip(b4) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

// c[m×n] += a[m×k]·b[k×n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut()
                .zip(brow)
                .for_each(|(cv, bv)| *cv += av * bv);
        }
    }
}

// c[m×k] += g[m×n]·b[k×n]ᵀ
fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            c[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

// c[k×n] += a[m×k]ᵀ·g[m×n]
fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            c[p * n..(p + 1) * n]
                .iter_mut()
                .zip(grow)
                .for_each(|(cv, gv)| *cv += av * gv);
        }
    }
}

fn conv1d_forward(x: &[f64], w: &[f64], bias: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let ConvGeometry {
        batch,
        in_channels: cin,
        out_channels: cout,
        kernel,
        in_len,
        out_len,
        ..
    } = *geo;
    let ranges = tap_ranges(geo);
    let mut cols = vec![0.0; cin * kernel * out_len];
    let mut out = vec![0.0; batch * cout * out_len];
    for b in 0..batch {
        im2col(
            &x[b * cin * in_len..(b + 1) * cin * in_len],
            geo,
            &ranges,
            &mut cols,
        );
        let ob = &mut out[b * cout * out_len..(b + 1) * cout * out_len];
        for (o, row) in ob.chunks_exact_mut(out_len).enumerate() {
            row.fill(bias[o]);
        }
        gemm_nn(w, &cols, ob, cout, cin * kernel, out_len);
    }
    out
}

/// Unfolds one sample `[C_in×L_in]` into `[(C_in·K)×L_out]` so that the
/// convolution becomes a matrix product. Padded positions are zero.
fn im2col(x: &[f64], geo: &ConvGeometry, ranges: &[(usize, usize, usize)], cols: &mut [f64]) {
    let (kernel, stride, in_len, out_len) = (geo.kernel, geo.stride, geo.in_len, geo.out_len);
    for c in 0..geo.in_channels {
        let xrow = &x[c * in_len..(c + 1) * in_len];
        for (t, &(lo, hi, start)) in ranges.iter().enumerate() {
            let row = &mut cols[(c * kernel + t) * out_len..(c * kernel + t + 1) * out_len];
            row[..lo].fill(0.0);
            row[hi..].fill(0.0);
            if stride == 1 {
                row[lo..hi].copy_from_slice(&xrow[start..start + hi - lo]);
            } else {
                for (k, v) in row[lo..hi].iter_mut().enumerate() {
                    *v = xrow[start + k * stride];
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `[C_in×L_in]`.
fn col2im_add(cols: &[f64], geo: &ConvGeometry, ranges: &[(usize, usize, usize)], x: &mut [f64]) {
    let (kernel, stride, in_len, out_len) = (geo.kernel, geo.stride, geo.in_len, geo.out_len);
    for c in 0..geo.in_channels {
        let xrow = &mut x[c * in_len..(c + 1) * in_len];
        for (t, &(lo, hi, start)) in ranges.iter().enumerate() {
            let row = &cols[(c * kernel + t) * out_len + lo..(c * kernel + t) * out_len + hi];
            if stride == 1 {
                xrow[start..start + hi - lo]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(xv, v)| *xv += v);
            } else {
                for (k, v) in row.iter().enumerate() {
                    xrow[start + k * stride] += v;
                }
            }
        }
    }
}

/// For each kernel tap `t`: the output range `[lo, hi)` whose receptive
/// field covers `t` inside the unpadded input, and the input index read at
/// `lo`.
fn tap_ranges(geo: &ConvGeometry) -> Vec<(usize, usize, usize)> {
    let &ConvGeometry {
        kernel,
        stride,
        padding,
        in_len,
        out_len,
        ..
    } = geo;
    (0..kernel)
        .map(|t| {
            let lo = if padding > t {
                (padding - t).div_ceil(stride)
            } else {
                0
            };
            let hi = if in_len + padding > t {
                ((in_len + padding - t - 1) / stride + 1).min(out_len)
            } else {
                0
            };
            let hi = hi.max(lo);
            if hi == lo {
                return (0, 0, 0);
            }
            (lo, hi, lo * stride + t - padding)
        })
        .collect()
}

fn slot(adj: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    adj[id].get_or_insert_with(|| vec![0.0; len])
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let wants = |id: usize| nodes[id].requires_grad;
    let len = |id: usize| nodes[id].value.len();
    let val = |id: usize| nodes[id].value.as_slice();
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            for (id, sign) in [(a, 1.0), (b, 1.0)] {
                if wants(id) {
                    slot(adj, id, len(id))
                        .iter_mut()
                        .zip(g)
                        .for_each(|(s, v)| *s += sign * v);
                }
            }
        }
        &Op::Sub(a, b) => {
            for (id, sign) in [(a, 1.0), (b, -1.0)] {
                if wants(id) {
                    slot(adj, id, len(id))
                        .iter_mut()
                        .zip(g)
                        .for_each(|(s, v)| *s += sign * v);
                }
            }
        }
        &Op::Mul(a, b) => {
            if wants(a) {
                let vb = val(b);
                let s = slot(adj, a, len(a));
                for i in 0..g.len() {
                    s[i] += g[i] * vb[i];
                }
            }
            if wants(b) {
                let va = val(a);
                let s = slot(adj, b, len(b));
                for i in 0..g.len() {
                    s[i] += g[i] * va[i];
                }
            }
        }
        &Op::Scale(a, c) => {
            slot(adj, a, len(a))
                .iter_mut()
                .zip(g)
                .for_each(|(s, v)| *s += c * v);
        }
        &Op::AddScalar(a) | &Op::Reshape(a) => {
            slot(adj, a, len(a))
                .iter_mut()
                .zip(g)
                .for_each(|(s, v)| *s += v);
        }
        &Op::Exp(a) => {
            let y = &node.value;
            let s = slot(adj, a, len(a));
            for i in 0..g.len() {
                s[i] += g[i] * y[i];
            }
        }
        &Op::Log(a) => {
            let x = val(a);
            let s = slot(adj, a, len(a));
            for i in 0..g.len() {
                if x[i] > LOG_CLAMP {
                    s[i] += g[i] / x[i];
                }
            }
        }
        &Op::Abs(a) => {
            let x = val(a);
            let s = slot(adj, a, len(a));
            for i in 0..g.len() {
                let sign = if x[i] > 0.0 {
                    1.0
                } else if x[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                s[i] += g[i] * sign;
            }
        }
        &Op::Relu(a) => {
            let x = val(a);
            let s = slot(adj, a, len(a));
            for i in 0..g.len() {
                if x[i] > 0.0 {
                    s[i] += g[i];
                }
            }
        }
        &Op::Sigmoid(a) => {
            let y = &node.value;
            let s = slot(adj, a, len(a));
            for i in 0..g.len() {
                s[i] += g[i] * y[i] * (1.0 - y[i]);
            }
        }
        &Op::Clamp(a, lo, hi) => {
            let x = val(a);
            let s = slot(adj, a, len(a));
            for i in 0..g.len() {
                if x[i] >= lo && x[i] <= hi {
                    s[i] += g[i];
                }
            }
        }
        &Op::Sum(a) => {
            slot(adj, a, len(a)).iter_mut().for_each(|s| *s += g[0]);
        }
        &Op::SumAxis { x, outer, n, inner } => {
            let s = slot(adj, x, len(x));
            for o in 0..outer {
                for k in 0..n {
                    let dst = &mut s[(o * n + k) * inner..(o * n + k + 1) * inner];
                    dst.iter_mut()
                        .zip(&g[o * inner..(o + 1) * inner])
                        .for_each(|(d, v)| *d += v);
                }
            }
        }
        &Op::Transpose {
            x,
            batch,
            rows,
            cols,
        } => {
            let s = slot(adj, x, len(x));
            for b in 0..batch {
                let base = b * rows * cols;
                for r in 0..rows {
                    for c in 0..cols {
                        s[base + r * cols + c] += g[base + c * rows + r];
                    }
                }
            }
        }
        Op::Concat {
            parts,
            outer,
            sizes,
            inner,
        } => {
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            for (&p, &n) in parts.iter().zip(sizes) {
                if wants(p) {
                    let s = slot(adj, p, len(p));
                    for o in 0..*outer {
                        let src =
                            &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                        s[o * n * inner..(o + 1) * n * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, v)| *d += v);
                    }
                }
                offset += n;
            }
        }
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
        } => {
            if wants(a) {
                let vb = val(b);
                let s = slot(adj, a, len(a));
                for bi in 0..batch {
                    gemm_nt(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &vb[bi * k * n..(bi + 1) * k * n],
                        &mut s[bi * m * k..(bi + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
            }
            if wants(b) {
                let va = val(a);
                let s = slot(adj, b, len(b));
                for bi in 0..batch {
                    gemm_tn(
                        &va[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut s[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        &Op::Softmax { x, outer, n, inner } => {
            let y = &node.value;
            let s = slot(adj, x, len(x));
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let inner_prod: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                    for k in 0..n {
                        s[at(k)] += y[at(k)] * (g[at(k)] - inner_prod);
                    }
                }
            }
        }
        Op::CrossEntropy { p, labels, classes } => {
            let vp = val(*p);
            let rows = labels.len() as f64;
            let s = slot(adj, *p, len(*p));
            for (r, &y) in labels.iter().enumerate() {
                let idx = r * classes + y;
                if vp[idx] > LOG_CLAMP {
                    s[idx] -= g[0] / (rows * vp[idx]);
                }
            }
        }
        &Op::Linear {
            x,
            w,
            b,
            rows,
            input,
            output,
        } => {
            if wants(x) {
                let vw = val(w);
                let s = slot(adj, x, len(x));
                gemm_nn(g, vw, s, rows, output, input);
            }
            if wants(w) {
                let vx = val(x);
                let s = slot(adj, w, len(w));
                gemm_tn(g, vx, s, rows, output, input);
            }
            if wants(b) {
                let s = slot(adj, b, len(b));
                for r in 0..rows {
                    s.iter_mut()
                        .zip(&g[r * output..(r + 1) * output])
                        .for_each(|(d, v)| *d += v);
                }
            }
        }
        &Op::Conv1d { x, w, b, geo } => conv1d_backward(nodes, x, w, b, &geo, g, adj),
        Op::MaxPool { x, argmax } => {
            let s = slot(adj, *x, len(*x));
            for (gv, &idx) in g.iter().zip(argmax) {
                s[idx] += gv;
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            dims,
            batch_stats,
        } => {
            let [batch, ch, l] = *dims;
            let vg = val(*gamma);
            let mut dgamma = vec![0.0; ch];
            let mut dbeta = vec![0.0; ch];
            let mut sum_dxhat = vec![0.0; ch];
            let mut sum_dxhat_xhat = vec![0.0; ch];
            for bi in 0..batch {
                for c in 0..ch {
                    let off = (bi * ch + c) * l;
                    for i in off..off + l {
                        dgamma[c] += g[i] * xhat[i];
                        dbeta[c] += g[i];
                        let dh = g[i] * vg[c];
                        sum_dxhat[c] += dh;
                        sum_dxhat_xhat[c] += dh * xhat[i];
                    }
                }
            }
            if wants(*x) {
                let count = (batch * l) as f64;
                let s = slot(adj, *x, len(*x));
                for bi in 0..batch {
                    for c in 0..ch {
                        let off = (bi * ch + c) * l;
                        for i in off..off + l {
                            let dh = g[i] * vg[c];
                            s[i] += if *batch_stats {
                                inv_std[c] / count
                                    * (count * dh - sum_dxhat[c] - xhat[i] * sum_dxhat_xhat[c])
                            } else {
                                dh * inv_std[c]
                            };
                        }
                    }
                }
            }
            if wants(*gamma) {
                slot(adj, *gamma, ch)
                    .iter_mut()
                    .zip(&dgamma)
                    .for_each(|(d, v)| *d += v);
            }
            if wants(*beta) {
                slot(adj, *beta, ch)
                    .iter_mut()
                    .zip(&dbeta)
                    .for_each(|(d, v)| *d += v);
            }
        }
    }
}

fn conv1d_backward(
    nodes: &[Node],
    x: usize,
    w: usize,
    b: usize,
    geo: &ConvGeometry,
    g: &[f64],
    adj: &mut [Option<Vec<f64>>],
) {
    let ConvGeometry {
        batch,
        in_channels: cin,
        out_channels: cout,
        kernel,
        in_len,
        out_len,
        ..
    } = *geo;
    let (vx, vw) = (&nodes[x].value, &nodes[w].value);
    let ranges = tap_ranges(geo);
    if nodes[b].requires_grad {
        let s = slot(adj, b, cout);
        for gb in g.chunks_exact(cout * out_len) {
            for (sv, row) in s.iter_mut().zip(gb.chunks_exact(out_len)) {
                *sv += row.iter().sum::<f64>();
            }
        }
    }
    let ck = cin * kernel;
    if nodes[w].requires_grad {
        let mut cols = vec![0.0; ck * out_len];
        let s = slot(adj, w, vw.len());
        for bi in 0..batch {
            im2col(
                &vx[bi * cin * in_len..(bi + 1) * cin * in_len],
                geo,
                &ranges,
                &mut cols,
            );
            gemm_nt(
                &g[bi * cout * out_len..(bi + 1) * cout * out_len],
                &cols,
                s,
                cout,
                ck,
                out_len,
            );
        }
    }
    if nodes[x].requires_grad {
        let mut dcols = vec![0.0; ck * out_len];
        let s = slot(adj, x, vx.len());
        for bi in 0..batch {
            dcols.fill(0.0);
            gemm_tn(
                vw,
                &g[bi * cout * out_len..(bi + 1) * cout * out_len],
                &mut dcols,
                cout,
                ck,
                out_len,
            );
            col2im_add(
                &dcols,
                geo,
                &ranges,
                &mut s[bi * cin * in_len..(bi + 1) * cin * in_len],
            );
        }
    }
}
