use super::rng::counter_uniform;
use super::{AutodiffError, Tensor};

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Keys the counter-based dropout generator. Two calls with equal keys draw
/// identical masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub layer: u64,
    pub step: u64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        probs: Var,
        targets: Vec<usize>,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::BatchMatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Permute(x, _)
            | Op::Reshape(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Softmax { x, .. } | Op::SliceRows { x, .. } | Op::Dropout { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat { parts, .. } => parts.clone(),
            Op::CrossEntropy { probs, .. } => vec![*probs],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Probability floor inside [`Graph::cross_entropy`].
pub const CROSS_ENTROPY_CLAMP: f64 = 1e-12;

/// Tolerance on probability row sums accepted by [`Graph::cross_entropy`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// A tape of tensor operations that supports one or more reverse passes.
///
/// Nodes are appended in evaluation order, so every parent index is lower
/// than its child's and the tape order is already topological.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

type Result<T> = std::result::Result<T, AutodiffError>;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`; zeros if no reverse pass reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite(name));
        }
        let requires_grad = self.needs_grad(&op.parents());
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_suffix(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || !sa.ends_with(sb) {
            return Err(AutodiffError::ShapeMismatch(format!(
                "{op}: {sb:?} does not broadcast over leading axes of {sa:?}"
            )));
        }
        Ok(())
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(bv.len().max(1)) {
            for (o, x) in chunk.iter_mut().zip(bv) {
                *o += x;
            }
        }
        self.push("add", out, Op::Add(a, b))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(bv.len().max(1)) {
            for (o, x) in chunk.iter_mut().zip(bv) {
                *o *= x;
            }
        }
        self.push("mul", out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push("scale", out, Op::Scale(x, factor))
    }

    /// `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "matmul: {sa:?} x {sb:?}"
            )));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul(a, b))
    }

    /// `[bt, m, k] x [bt, k, n] -> [bt, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "batch_matmul: {sa:?} x {sb:?}"
            )));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            gemm(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push(
            "batch_matmul",
            Tensor::new(vec![bt, m, n], out)?,
            Op::BatchMatMul(a, b),
        )
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(AutodiffError::ShapeMismatch(format!(
                "permute: axes {axes:?} for shape {shape:?}"
            )));
        }
        let out = permute_tensor(self.value(x), axes);
        self.push("permute", out, Op::Permute(x, axes.to_vec()))
    }

    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(AutodiffError::ShapeMismatch(
                "transpose_last needs at least 2 axes".into(),
            ));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x);
        if shape.iter().product::<usize>() != value.numel() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "reshape: {:?} -> {shape:?}",
                value.shape()
            )));
        }
        let out = value.clone().reshaped(shape);
        self.push("reshape", out, Op::Reshape(x))
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        self.push(name, out, op)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map("gelu", x, gelu, Op::Gelu(x))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "softmax: axis {axis} for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = self.value(x).clone();
        let data = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (data[at(j)] - max).exp();
                    data[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[at(j)] /= total;
                }
            }
        }
        self.push("softmax", out, Op::Softmax { x, axis })
    }

    /// Layer normalisation over the last axis. A zero-variance row maps to
    /// `bias` because its centred values are exactly zero.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(AutodiffError::InvalidArgument(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| {
            AutodiffError::ShapeMismatch("layer_norm on a scalar".into())
        })?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "layer_norm: gain {:?} / bias {:?} for width {d}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / d.max(1);
        let mut normalized = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                normalized[r * d + j] = xh;
                out[r * d + j] = gv[j] * xh + bv[j];
            }
        }
        self.push(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        )
    }

    /// Gathers rows of a `[vocab, d]` table: output `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "embedding table must be 2-D, got {shape:?}"
            )));
        }
        let (vocab, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(AutodiffError::IndexOutOfRange {
                index: bad,
                bound: vocab,
            });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        self.push(
            "embedding",
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::InvalidArgument("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "concat: axis {axis} for shape {base:?}"
            )));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "concat: {s:?} incompatible with {base:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let block = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start >= end || end > shape[0] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "slice_rows {start}..{end} of {shape:?}"
            )));
        }
        let row: usize = shape[1..].iter().product();
        let out = self.value(x).data()[start * row..end * row].to_vec();
        let mut new_shape = shape;
        new_shape[0] = end - start;
        self.push(
            "slice_rows",
            Tensor::new(new_shape, out)?,
            Op::SliceRows { x, start },
        )
    }

    /// Inverted dropout. In eval mode (`train == false`) this returns `x`
    /// itself.
    pub fn dropout(&mut self, x: Var, rate: f64, key: DropoutKey, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n as u64)
            .map(|i| {
                if counter_uniform(key.seed, key.layer, key.step, i) < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push("dropout", out, Op::Dropout { x, mask })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let total = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        self.push("mean", Tensor::scalar(total), Op::Mean(x))
    }

    /// Mean negative log-likelihood of `targets` under row-normalised
    /// `probs` (`[batch, k]`), with probabilities floored at
    /// [`CROSS_ENTROPY_CLAMP`].
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(probs).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || shape[0] == 0 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "cross_entropy: probs {shape:?} with {} targets",
                targets.len()
            )));
        }
        let k = shape[1];
        let pv = self.value(probs).data();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(AutodiffError::IndexOutOfRange { index: t, bound: k });
            }
            let row = &pv[i * k..(i + 1) * k];
            let row_sum: f64 = row.iter().sum();
            if (row_sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(AutodiffError::NotNormalized { row: i, sum: row_sum });
            }
            total -= row[t].max(CROSS_ENTROPY_CLAMP).ln();
        }
        let loss = total / targets.len() as f64;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar `root`. Gradients accumulate into every
    /// node that requires them; call [`Graph::zero_grads`] between passes to
    /// start fresh.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(
                self.nodes[root.0].value.shape().to_vec(),
            ));
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adjoints[root.0] = Some(Tensor::filled(self.nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(upstream) = adjoints[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &upstream, &mut adjoints)?;
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(g) => g.add_assign(&upstream),
                None => node.grad = Some(upstream),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, up: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        for p in node.op.parents() {
            if p.0 >= i {
                return Err(AutodiffError::CycleDetected(i));
            }
        }
        let g = up.data();
        let mut send = |v: Var, contribution: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let out = node.value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    send(*a, up.clone());
                }
                if wants(*b) {
                    send(*b, fold_suffix(g, val(*b).shape()));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let w = bv.len().max(1);
                if wants(*a) {
                    let d: Vec<f64> = g.iter().enumerate().map(|(j, gj)| gj * bv[j % w]).collect();
                    send(*a, Tensor::new(val(*a).shape().to_vec(), d)?);
                }
                if wants(*b) {
                    let prod: Vec<f64> = g.iter().zip(av).map(|(gj, aj)| gj * aj).collect();
                    send(*b, fold_suffix(&prod, val(*b).shape()));
                }
            }
            Op::Scale(x, f) => {
                let d = g.iter().map(|v| v * f).collect();
                send(*x, Tensor::new(up.shape().to_vec(), d)?);
            }
            Op::MatMul(a, b) => {
                let sb = val(*b).shape();
                let (k, n) = (sb[0], sb[1]);
                let m = val(*a).numel() / k.max(1);
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_bt(g, val(*b).data(), &mut da, m, n, k);
                    send(*a, Tensor::new(val(*a).shape().to_vec(), da)?);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_at(val(*a).data(), g, &mut db, m, k, n);
                    send(*b, Tensor::new(sb.to_vec(), db)?);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let mut da = vec![0.0; bt * m * k];
                    for t in 0..bt {
                        gemm_bt(
                            &g[t * m * n..(t + 1) * m * n],
                            &bv[t * k * n..(t + 1) * k * n],
                            &mut da[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    send(*a, Tensor::new(sa.to_vec(), da)?);
                }
                if wants(*b) {
                    let mut db = vec![0.0; bt * k * n];
                    for t in 0..bt {
                        gemm_at(
                            &av[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut db[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    send(*b, Tensor::new(sb.to_vec(), db)?);
                }
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                send(*x, permute_tensor(up, &inverse));
            }
            Op::Reshape(x) => {
                send(*x, up.clone().reshaped(val(*x).shape()));
            }
            Op::Sigmoid(x) => {
                let d = g.iter().zip(out).map(|(gj, y)| gj * y * (1.0 - y)).collect();
                send(*x, Tensor::new(up.shape().to_vec(), d)?);
            }
            Op::Tanh(x) => {
                let d = g.iter().zip(out).map(|(gj, y)| gj * (1.0 - y * y)).collect();
                send(*x, Tensor::new(up.shape().to_vec(), d)?);
            }
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gj, xj)| if *xj > 0.0 { *gj } else { 0.0 })
                    .collect();
                send(*x, Tensor::new(up.shape().to_vec(), d)?);
            }
            Op::Gelu(x) => {
                let d = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gj, xj)| gj * gelu_grad(*xj))
                    .collect();
                send(*x, Tensor::new(up.shape().to_vec(), d)?);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(up.shape(), *axis);
                let mut d = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] = out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                send(*x, Tensor::new(up.shape().to_vec(), d)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = val(*gain).numel();
                let gv = val(*gain).data();
                let rows = inv_std.len();
                if wants(*gain) || wants(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * normalized[r * d + j];
                            db[j] += g[r * d + j];
                        }
                    }
                    send(*gain, Tensor::from_vec(dg));
                    send(*bias, Tensor::from_vec(db));
                }
                if wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * normalized[r * d + j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            dx[r * d + j] = inv_std[r]
                                * (dxh - mean_dxh - normalized[r * d + j] * mean_dxh_xh);
                        }
                    }
                    send(*x, Tensor::new(up.shape().to_vec(), dx)?);
                }
            }
            Op::Embedding { table, ids } => {
                let shape = val(*table).shape();
                let d = shape[1];
                let mut dt = vec![0.0; shape[0] * d];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[row * d + j];
                    }
                }
                send(*table, Tensor::new(shape.to_vec(), dt)?);
            }
            Op::Concat { parts, axis } => {
                let shape = up.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let stride = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let ps = val(*p).shape().to_vec();
                    let block = ps[*axis] * inner;
                    if wants(*p) {
                        let mut dp = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let start = o * stride + offset;
                            dp.extend_from_slice(&g[start..start + block]);
                        }
                        send(*p, Tensor::new(ps, dp)?);
                    }
                    offset += block;
                }
            }
            Op::SliceRows { x, start } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                let rowlen: usize = up.shape()[1..].iter().product();
                dx.data_mut()[start * rowlen..start * rowlen + g.len()].copy_from_slice(g);
                send(*x, dx);
            }
            Op::Dropout { x, mask } => {
                let d = g.iter().zip(mask).map(|(gj, m)| gj * m).collect();
                send(*x, Tensor::new(up.shape().to_vec(), d)?);
            }
            Op::Sum(x) => {
                send(*x, Tensor::filled(val(*x).shape(), g[0]));
            }
            Op::Mean(x) => {
                let n = val(*x).numel().max(1) as f64;
                send(*x, Tensor::filled(val(*x).shape(), g[0] / n));
            }
            Op::CrossEntropy { probs, targets } => {
                let pv = val(*probs);
                let k = pv.shape()[1];
                let batch = targets.len() as f64;
                let mut d = vec![0.0; pv.numel()];
                for (i, &t) in targets.iter().enumerate() {
                    let p = pv.data()[i * k + t];
                    if p > CROSS_ENTROPY_CLAMP {
                        d[i * k + t] = -g[0] / (batch * p);
                    }
                }
                send(*probs, Tensor::new(pv.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Sums `g` over leading blocks so it matches `target` (a suffix shape).
fn fold_suffix(g: &[f64], target: &[usize]) -> Tensor {
    let w: usize = target.iter().product();
    let mut acc = vec![0.0; w];
    for chunk in g.chunks(w.max(1)) {
        for (a, v) in acc.iter_mut().zip(chunk) {
            *a += v;
        }
    }
    Tensor::new(target.to_vec(), acc).expect("suffix shape")
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let shape = t.shape();
    let nd = shape.len();
    let mut strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..src.len() {
        let offset: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.push(src[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permuted shape")
}

/// `out += a[m,k] * b[k,n]`.
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += g[m,n] * b[k,n]^T` giving `[m,k]`.
fn gemm_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += a[m,k]^T * g[m,n]` giving `[k,n]`.
fn gemm_at(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}
