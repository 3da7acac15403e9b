use super::conv::{self, ConvGeometry, PoolGeometry};
use super::{broadcastable, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv2d { input: Var, weight: Var, geom: ConvGeometry },
    Reduce { input: Var, kind: Reduction, axes: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Swish(Var),
    LogClamped { input: Var, floor: f64 },
    Softmax(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    MaxPool { input: Var, argmax: Vec<usize> },
    AvgPool { input: Var, geom: PoolGeometry },
    BatchNorm { input: Var, gamma: Var, beta: Var, saved: BnSaved },
}

#[derive(Debug)]
struct BnSaved {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Batch statistics were used (train mode), so the mean/variance depend on the input.
    batch_stats: bool,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations. Nodes are appended as operations run, so
/// every node's inputs precede it and a reverse sweep is a valid
/// topological traversal.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the leaves of a tape, keyed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Visit every flat index of `shape` together with the offset obtained from
/// `strides` (a stride of 0 repeats the same element along that axis).
fn for_each_mapped(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let inner = shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let outer: usize = shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for o in 0..outer {
        for i in 0..inner {
            f(o * inner + i, base + i * inner_stride);
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            base -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Strides that read a right-aligned unit-broadcast `small` tensor while
/// iterating over `big`.
fn broadcast_strides(big: &[usize], small: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(small);
    let lead = big.len() - small.len();
    (0..big.len())
        .map(|ax| {
            if ax < lead || small[ax - lead] == 1 {
                0
            } else {
                own[ax - lead]
            }
        })
        .collect()
}

/// Sum `g` (shaped `big`) down to the broadcast operand shape `small`.
fn reduce_to(g: &[f64], big: &[usize], small: &[usize]) -> Vec<f64> {
    if big == small {
        return g.to_vec();
    }
    let mut out = vec![0.0; small.iter().product()];
    for_each_mapped(big, &broadcast_strides(big, small), |i, j| out[j] += g[i]);
    out
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
        Some(existing) => existing
            .iter_mut()
            .zip(contribution)
            .for_each(|(a, b)| *a += b),
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
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

    fn unary(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(input).map(f);
        let rg = self.requires_grad(input);
        self.push(value, op, rg)
    }

    // ---- elementwise ----------------------------------------------------

    /// `a ∘ b` where `b` matches `a` or broadcasts onto it along unit/leading axes.
    pub fn elementwise(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !broadcastable(&sa, &sb) {
            return Err(Error::Broadcast { lhs: sa, rhs: sb });
        }
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![0.0; da.len()];
            for_each_mapped(&sa, &broadcast_strides(&sa, &sb), |i, j| out[i] = f(da[i], db[j]));
            out
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&sa, out)?, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return Err(Error::Shape(format!("matmul needs rank-2 operands, got {sa:?} and {sb:?}")));
        };
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner extents differ: {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; m * n];
        conv::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Cross-correlation of an NCHW input with an OIHW weight, zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, geom: ConvGeometry) -> Result<Var> {
        let out = conv::conv2d_forward(self.value(input), self.value(weight), geom)?;
        let rg = self.any_grad(&[input, weight]);
        Ok(self.push(out, Op::Conv2d { input, weight, geom }, rg))
    }

    // ---- reductions and shape ---------------------------------------------

    /// Sum or mean over `axes`; the reduced axes are removed from the shape.
    pub fn reduce(&mut self, kind: Reduction, input: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let mut seen = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() || seen[ax] {
                return Err(Error::Axis { axis: ax, rank: shape.len() });
            }
            seen[ax] = true;
        }
        let kept: Vec<usize> = (0..shape.len()).filter(|&a| !seen[a]).map(|a| shape[a]).collect();
        let keep_dims: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(a, &e)| if seen[a] { 1 } else { e })
            .collect();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let mut out = vec![0.0; kept.iter().product()];
        let data = self.value(input).data();
        for_each_mapped(&shape, &broadcast_strides(&shape, &keep_dims), |i, j| out[j] += data[i]);
        if kind == Reduction::Mean {
            let inv = 1.0 / count as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.requires_grad(input);
        Ok(self.push(
            Tensor::new(&kept, out)?,
            Op::Reduce { input, kind, axes: axes.to_vec() },
            rg,
        ))
    }

    pub fn sum(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(Reduction::Sum, input, axes)
    }

    pub fn mean(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(Reduction::Mean, input, axes)
    }

    pub fn sum_all(&mut self, input: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(input).len()).collect();
        self.reduce(Reduction::Sum, input, &axes).expect("all axes are valid")
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Axis { axis, rank: first.len() });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(a, (x, y))| a == axis || x == y);
            if !compatible {
                return Err(Error::Shape(format!("cannot concat {s:?} with {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat { inputs: inputs.to_vec(), axis },
            rg,
        ))
    }

    // ---- activations -------------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v < 0.0 { 0.0 } else { v }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `x · σ(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Swish(x))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, |v| if v < floor { floor } else { v }.ln(), Op::LogClamped { input: x, floor })
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let k = *t
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::new(t.shape(), out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    // ---- pooling -----------------------------------------------------------

    pub fn max_pool(&mut self, x: Var, geom: PoolGeometry) -> Result<Var> {
        let (value, argmax) = conv::max_pool_forward(self.value(x), geom)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::MaxPool { input: x, argmax }, rg))
    }

    pub fn avg_pool(&mut self, x: Var, geom: PoolGeometry) -> Result<Var> {
        let value = conv::avg_pool_forward(self.value(x), geom)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::AvgPool { input: x, geom }, rg))
    }

    // ---- batch normalization ----------------------------------------------

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::Shape(format!("batchnorm input needs a channel axis, got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::Shape(format!(
                    "batchnorm parameter {:?} does not match {c} channels",
                    self.shape(p)
                )));
            }
        }
        Ok((n, c, spatial))
    }

    fn bn_finish(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let (n, c, s) = self.bn_layout(x, gamma, beta)?;
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * s;
                for j in off..off + s {
                    xhat[j] = (xd[j] - mean[ch]) * inv_std[ch];
                    out[j] = g[ch] * xhat[j] + b[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                saved: BnSaved { xhat, inv_std, batch_stats },
            },
            rg,
        ))
    }

    /// Normalise with the batch's own per-channel statistics. Returns the
    /// output and the biased batch mean and variance per channel.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, s) = self.bn_layout(x, gamma, beta)?;
        let xd = self.value(x).data();
        let m = (n * s) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for i in 0..n {
                acc += xd[(i * c + ch) * s..][..s].iter().sum::<f64>();
            }
            mean[ch] = acc / m;
            let mut sq = 0.0;
            for i in 0..n {
                sq += xd[(i * c + ch) * s..][..s]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
            var[ch] = sq / m;
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_finish(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, mean, var))
    }

    /// Normalise with fixed (running) statistics; an affine map of `x`.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = self.bn_layout(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!("running statistics do not match {c} channels")));
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_finish(x, gamma, beta, mean, inv_std, false)
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every leaf that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Rank(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::NoGraph);
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut leaves: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::new(node.value.shape(), g)?);
            } else {
                self.propagate(node, &g, &mut pending)?;
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn propagate(&self, node: &Node, g: &[f64], pending: &mut [Option<Vec<f64>>]) -> Result<()> {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let same = sa == sb;
                let b_full = |t: &Tensor| -> Vec<f64> {
                    if same {
                        t.data().to_vec()
                    } else {
                        let mut out = vec![0.0; g.len()];
                        let d = t.data();
                        for_each_mapped(sa, &broadcast_strides(sa, sb), |i, j| out[i] = d[j]);
                        out
                    }
                };
                match op {
                    BinaryOp::Add | BinaryOp::Sub => {
                        if wants(*a) {
                            accumulate(&mut pending[a.0], g.to_vec());
                        }
                        if wants(*b) {
                            let mut gb = reduce_to(g, sa, sb);
                            if *op == BinaryOp::Sub {
                                gb.iter_mut().for_each(|v| *v = -*v);
                            }
                            accumulate(&mut pending[b.0], gb);
                        }
                    }
                    BinaryOp::Mul => {
                        if wants(*a) {
                            let bv = b_full(val(*b));
                            accumulate(&mut pending[a.0], g.iter().zip(&bv).map(|(x, y)| x * y).collect());
                        }
                        if wants(*b) {
                            let prod: Vec<f64> = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                            accumulate(&mut pending[b.0], reduce_to(&prod, sa, sb));
                        }
                    }
                }
            }
            Op::Scale(a, f) => {
                accumulate(&mut pending[a.0], g.iter().map(|v| v * f).collect());
            }
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    conv::gemm(m, n, k, g, false, val(*b).data(), true, 0.0, &mut ga);
                    accumulate(&mut pending[a.0], ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    conv::gemm(k, m, n, val(*a).data(), true, g, false, 0.0, &mut gb);
                    accumulate(&mut pending[b.0], gb);
                }
            }
            Op::Conv2d { input, weight, geom } => {
                let (dx, dw) =
                    conv::conv2d_backward(val(*input), val(*weight), *geom, g, wants(*input), wants(*weight))?;
                if let Some(dx) = dx {
                    accumulate(&mut pending[input.0], dx);
                }
                if let Some(dw) = dw {
                    accumulate(&mut pending[weight.0], dw);
                }
            }
            Op::Reduce { input, kind, axes } => {
                let shape = val(*input).shape();
                let keep_dims: Vec<usize> = shape
                    .iter()
                    .enumerate()
                    .map(|(a, &e)| if axes.contains(&a) { 1 } else { e })
                    .collect();
                let scale = match kind {
                    Reduction::Sum => 1.0,
                    Reduction::Mean => 1.0 / axes.iter().map(|&a| shape[a]).product::<usize>() as f64,
                };
                let mut gi = vec![0.0; val(*input).numel()];
                for_each_mapped(shape, &broadcast_strides(shape, &keep_dims), |i, j| gi[i] = g[j] * scale);
                accumulate(&mut pending[input.0], gi);
            }
            Op::Relu(x) => {
                let gi = g.iter().zip(val(*x).data()).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                accumulate(&mut pending[x.0], gi);
            }
            Op::Sigmoid(x) => {
                let gi = g.iter().zip(node.value.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(&mut pending[x.0], gi);
            }
            Op::Swish(x) => {
                let gi = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &v)| {
                        let s = sigmoid(v);
                        g * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                accumulate(&mut pending[x.0], gi);
            }
            Op::LogClamped { input, floor } => {
                let gi = g
                    .iter()
                    .zip(val(*input).data())
                    .map(|(g, &v)| if v > *floor { g / v } else { 0.0 })
                    .collect();
                accumulate(&mut pending[input.0], gi);
            }
            Op::Softmax(x) => {
                let k = *node.value.shape().last().expect("softmax rank");
                let mut gi = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(k).zip(node.value.data().chunks(k)).zip(gi.chunks_mut(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(&mut pending[x.0], gi);
            }
            Op::Reshape(x) => accumulate(&mut pending[x.0], g.to_vec()),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<f64>> = inputs.iter().map(|v| Vec::with_capacity(val(*v).numel())).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (v, part) in inputs.iter().zip(parts.iter_mut()) {
                        let chunk = val(*v).shape()[*axis] * inner;
                        part.extend_from_slice(&g[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                for (v, part) in inputs.iter().zip(parts) {
                    if wants(*v) {
                        accumulate(&mut pending[v.0], part);
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut gi = vec![0.0; val(*input).numel()];
                for (o, &i) in argmax.iter().enumerate() {
                    gi[i] += g[o];
                }
                accumulate(&mut pending[input.0], gi);
            }
            Op::AvgPool { input, geom } => {
                let gi = conv::avg_pool_backward(val(*input).shape(), *geom, g)?;
                accumulate(&mut pending[input.0], gi);
            }
            Op::BatchNorm { input, gamma, beta, saved } => {
                let s = val(*input).shape();
                let (n, c) = (s[0], s[1]);
                let sp: usize = s[2..].iter().product();
                let gam = val(*gamma).data();
                let m = (n * sp) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * sp;
                        for j in off..off + sp {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * saved.xhat[j];
                        }
                    }
                }
                if wants(*input) {
                    let mut gi = vec![0.0; g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * sp;
                            let k = gam[ch] * saved.inv_std[ch];
                            for j in off..off + sp {
                                gi[j] = if saved.batch_stats {
                                    k * (g[j] - sum_g[ch] / m - saved.xhat[j] * sum_gx[ch] / m)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                    accumulate(&mut pending[input.0], gi);
                }
                if wants(*gamma) {
                    accumulate(&mut pending[gamma.0], sum_gx);
                }
                if wants(*beta) {
                    accumulate(&mut pending[beta.0], sum_g);
                }
            }
        }
        Ok(())
    }
}
