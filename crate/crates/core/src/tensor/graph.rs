use std::collections::HashMap;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Pick(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording tape. Node ids grow monotonically, so recording order is a
/// valid topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    keyed: HashMap<u64, Var>,
    no_grad: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph on which nothing requires gradient; used for inference.
    pub fn no_grad() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
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

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last `backward` call w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        value.requires_grad = rg;
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; its `requires_grad` flag is kept unless the graph is
    /// in no-grad mode.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = t.requires_grad && !self.no_grad;
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Leaf deduplicated by `key`: binding the same parameter twice yields the
    /// same node so its gradient accumulates in one place.
    pub fn keyed_leaf(&mut self, key: u64, t: &Tensor) -> Var {
        if let Some(&v) = self.keyed.get(&key) {
            return v;
        }
        let v = self.leaf(Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            requires_grad: t.requires_grad,
            grad: None,
        });
        self.keyed.insert(key, v);
        v
    }

    pub fn keyed(&self, key: u64) -> Option<Var> {
        self.keyed.get(&key).copied()
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.as_matrix(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul_nt")?;
        let (n, k2) = self.mat(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat(a, "transpose")?;
        let x = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(Tensor::new(shape, out).expect("same shape"), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a `[c]` (or `[1×c]`) row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(row).numel() != c {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.data(row).to_vec();
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self
            .data(a)
            .chunks(c.max(1))
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self.data(a).iter().map(|x| x * s).collect();
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Scale(a, s), &[a])
    }

    /// Adds a constant tensor (e.g. an attention mask of `0` / `-inf`).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::shape("add_const", self.shape(a), c.shape()));
        }
        let shape = self.shape(a).to_vec();
        let out = self.data(a).iter().zip(c.data()).map(|(x, y)| x + y).collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddConst(a), &[a]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self
            .data(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Gelu(a), &[a])
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Input(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x: a,
                outer,
                len,
                inner,
            },
            &[a],
        ))
    }

    /// Row-wise layer normalisation with biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let c = self.value(x).cols();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let rows = self.value(x).rows();
        let xs = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Mean token cross-entropy over positions whose target is not `pad`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: Option<usize>) -> Result<Var> {
        let (t, v) = self.mat(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let mut masked = Vec::with_capacity(t);
        for &id in targets {
            if Some(id) == pad {
                masked.push(None);
            } else if id >= v {
                return Err(Error::Data(format!("target id {id} out of range for {v} classes")));
            } else {
                masked.push(Some(id));
            }
        }
        let count = masked.iter().flatten().count();
        if count == 0 {
            return Err(Error::Data("cross_entropy: every position is padding".into()));
        }
        let x = self.data(logits);
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        for (r, target) in masked.iter().enumerate() {
            let row = &x[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|l| (l - max).exp()).sum();
            let log_z = z.ln() + max;
            for j in 0..v {
                probs[r * v + j] = (row[j] - log_z).exp();
            }
            if let Some(id) = target {
                total += log_z - row[*id];
            }
        }
        let loss = total / count as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: masked,
                probs,
                count,
            },
            &[logits],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Input("concat_rows of nothing".into()))?;
        let c = self.mat(first, "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.mat(p, "concat_rows")?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        Ok(self.push(Tensor::new(vec![rows, c], out)?, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.mat(a, "slice_rows")?;
        if start > end || end > r {
            return Err(Error::Input(format!("slice_rows {start}..{end} of {r} rows")));
        }
        let out = self.data(a)[start * c..end * c].to_vec();
        Ok(self.push(Tensor::new(vec![end - start, c], out)?, Op::SliceRows(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Input("concat_cols of nothing".into()))?;
        let r = self.mat(first, "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.mat(p, "concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.mat(a, "slice_cols")?;
        if start > end || end > c {
            return Err(Error::Input(format!("slice_cols {start}..{end} of {c} cols")));
        }
        let x = self.data(a);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + end]);
        }
        Ok(self.push(Tensor::new(vec![r, end - start], out)?, Op::SliceCols(a, start), &[a]))
    }

    /// Mean over rows, `[r×c] → [1×c]`. Requires at least one row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat(a, "mean_rows")?;
        if r == 0 {
            return Err(Error::Input("mean_rows of an empty matrix".into()));
        }
        let x = self.data(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += x[i * c + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        Ok(self.push(Tensor::new(vec![1, c], out)?, Op::MeanRows(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.data(a).to_vec();
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::Reshape(a), &[a]))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.mat(table, "gather_rows")?;
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::TokenRange { id, size: r });
            }
            out.extend_from_slice(&self.data(table)[id * c..(id + 1) * c]);
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), c], out)?,
            Op::GatherRows(table, ids.to_vec()),
            &[table],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Selects one element (flat index) as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let x = *self
            .data(a)
            .get(index)
            .ok_or_else(|| Error::Input(format!("pick index {index} out of range")))?;
        Ok(self.push(Tensor::scalar(x), Op::Pick(a, index), &[a]))
    }

    /// Reverse pass from a scalar `loss`. Populates `grad` on every node that
    /// requires gradient. Calling it again recomputes from scratch.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].value.requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            backprop(&self.nodes, &mut grads, &node.op, &node.value, &g);
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad {
                node.value.grad = g;
            }
        }
        Ok(())
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let t = &nodes[v.0].value;
    if !t.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; t.numel()]))
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], op: &Op, out: &Tensor, g: &[f64]) {
    let val = |v: Var| &nodes[v.0].value;
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
            let n = val(*b).shape[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                kernels::matmul_nt(g, &val(*b).data, ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                kernels::matmul_tn(&val(*a).data, g, gb, m, k, n);
            }
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
            let n = val(*b).shape[0];
            if let Some(ga) = slot(nodes, grads, *a) {
                kernels::matmul(g, &val(*b).data, ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                kernels::matmul_tn(g, &val(*a).data, gb, m, n, k);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (val(*a).shape[0], val(*a).shape[1]);
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = slot(nodes, grads, *v) {
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (&val(*a).data, &val(*b).data);
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bd[i];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * ad[i];
                }
            }
        }
        Op::AddRow(a, row) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            let c = val(*a).cols();
            if let Some(gr) = slot(nodes, grads, *row) {
                for chunk in g.chunks(c.max(1)) {
                    gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
            }
        }
        Op::AddConst(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Gelu(a) => {
            let xs = &val(*a).data;
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    let x = xs[i];
                    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    ga[i] += g[i] * d;
                }
            }
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let y = &out.data;
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..*len {
                            gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = val(*gamma).numel();
            let gam = &val(*gamma).data;
            if let Some(gb) = slot(nodes, grads, *beta) {
                for chunk in g.chunks(c) {
                    gb.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (gc, hc) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        gg[j] += gc[j] * hc[j];
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &g[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..c {
                        let d = gr[j] * gam[j];
                        mean_d += d;
                        mean_dh += d * hr[j];
                    }
                    mean_d /= c as f64;
                    mean_dh /= c as f64;
                    for j in 0..c {
                        let d = gr[j] * gam[j];
                        gx[r * c + j] += rs * (d - mean_d - hr[j] * mean_dh);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            let v = val(*logits).shape[1];
            let scale = g[0] / *count as f64;
            if let Some(gl) = slot(nodes, grads, *logits) {
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    for j in 0..v {
                        gl[r * v + j] += scale * probs[r * v + j];
                    }
                    gl[r * v + t] -= scale;
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = val(*p).numel();
                if let Some(gp) = slot(nodes, grads, *p) {
                    gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(x, y)| *x += y);
                }
                offset += n;
            }
        }
        Op::SliceRows(a, start) => {
            let c = val(*a).cols();
            if let Some(ga) = slot(nodes, grads, *a) {
                ga[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(x, y)| *x += y);
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for p in parts {
                let w = val(*p).cols();
                if let Some(gp) = slot(nodes, grads, *p) {
                    for (i, row) in gp.chunks_mut(w).enumerate() {
                        let src = &g[i * total + offset..i * total + offset + w];
                        row.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
                offset += w;
            }
        }
        Op::SliceCols(a, start) => {
            let c = val(*a).cols();
            let w = out.cols();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (i, src) in g.chunks(w).enumerate() {
                    ga[i * c + start..i * c + start + w]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::MeanRows(a) => {
            let (r, c) = (val(*a).shape[0], val(*a).shape[1]);
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j] / r as f64;
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::GatherRows(table, ids) => {
            let c = val(*table).cols();
            if let Some(gt) = slot(nodes, grads, *table) {
                for (k, &id) in ids.iter().enumerate() {
                    gt[id * c..(id + 1) * c]
                        .iter_mut()
                        .zip(&g[k * c..(k + 1) * c])
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Pick(a, index) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga[*index] += g[0];
            }
        }
    }
}
