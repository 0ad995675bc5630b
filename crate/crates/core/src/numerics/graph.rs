//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape index is already a
//! topological order and the backward sweep is a single reverse pass.

use super::kernels::{
    broadcast_index_map, gemm_nn_acc, gemm_nt_acc, gemm_tn_acc, mix_into, permute,
};
use super::tensor::numel;
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F: Float> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Offset(Var),
    AddRow(Var, Var),
    Broadcast(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Softmax(Var),
    Silu(Var),
    Gelu(Var),
    LayerNorm { x: Var, inv_std: Vec<F> },
    LnFloor(Var, F),
    Sum(Var),
    Mean(Var),
    Mix { bank: Var, alpha: Var },
    GatherRows { table: Var, rows: Vec<usize> },
}

struct Node<F: Float> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Computation graph for one forward/backward pass. Build a fresh graph per
/// training step.
pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
    corrupt_mix_backward: bool,
}

/// Gradients from [`Graph::backward`], retained for leaves only.
pub struct Gradients<F: Float> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            corrupt_mix_backward: false,
        }
    }

    /// Fault injection for the gradient-check negative control: the mixing
    /// op reports a coefficient gradient scaled by 1.1.
    #[doc(hidden)]
    pub fn set_corrupt_mix_backward(&mut self, on: bool) {
        self.corrupt_mix_backward = on;
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool, name: &str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable input; receives a gradient.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary_same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let value = self.value(a).add(self.value(b))?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let value = self.value(a).scale(c);
        let rg = self.requires_grad(a);
        self.push(value, Op::Scale(a, c), rg, "scale")
    }

    /// `a + c` elementwise for a constant `c`.
    pub fn offset(&mut self, a: Var, c: F) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        let rg = self.requires_grad(a);
        self.push(value, Op::Offset(a), rg, "offset")
    }

    /// `a[..., n] + row[n]` broadcast over all leading axes.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap_or(&1);
        if self.shape(row) != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data();
        let av = self.value(a);
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.requires_grad(a) || self.requires_grad(row);
        self.push(value, Op::AddRow(a, row), rg, "add_row")
    }

    /// Numpy-style broadcast to `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let ok = in_shape.len() <= shape.len()
            && in_shape
                .iter()
                .rev()
                .zip(shape.iter().rev())
                .all(|(&i, &o)| i == o || i == 1);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: in_shape,
                rhs: shape.to_vec(),
            });
        }
        let map = broadcast_index_map(&in_shape, shape);
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let rg = self.requires_grad(a);
        self.push(Tensor::from_parts(shape.to_vec(), data), Op::Broadcast(a), rg, "broadcast_to")
    }

    /// Matrix product over the last two axes; rank-3 operands share the
    /// leading batch axis.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(mismatch()),
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![F::zero(); batch * m * n];
        for bi in 0..batch {
            gemm_nn_acc(
                &mut out[bi * m * n..(bi + 1) * m * n],
                &av[bi * m * k..(bi + 1) * m * k],
                &bv[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), rg, "matmul")
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::invalid(format!("bad permutation {axes:?} for shape {shape:?}")));
        }
        let (data, out_shape) = permute(self.value(a).data(), &shape, axes);
        let rg = self.requires_grad(a);
        self.push(Tensor::from_parts(out_shape, data), Op::Permute(a, axes.to_vec()), rg, "permute")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        let requires_grad = self.requires_grad(a);
        // Shares the input's buffer, which was checked when it was pushed.
        self.nodes.push(Node {
            value,
            op: Op::Reshape(a),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::invalid(format!(
                "slice {start}..{end} on axis {axis} of {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let width = (end - start) * inner;
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * shape[axis] * inner + start * inner;
            data.extend_from_slice(&src[base..base + width]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let rg = self.requires_grad(a);
        self.push(Tensor::from_parts(out_shape, data), Op::Slice { x: a, axis, start }, rg, "slice")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let n = *av.shape().last().ok_or_else(|| Error::invalid("softmax of scalar"))?;
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut total = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.requires_grad(a);
        self.push(value, Op::Softmax(a), rg, "softmax")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x / (F::one() + (-x).exp()));
        let rg = self.requires_grad(a);
        self.push(value, Op::Silu(a), rg, "silu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (c, k, half) = (F::lit(GELU_C), F::lit(GELU_A), F::lit(0.5));
        let value = self
            .value(a)
            .map(|x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.requires_grad(a);
        self.push(value, Op::Gelu(a), rg, "gelu")
    }

    /// Normalize over the last axis (population variance), no affine.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let av = self.value(a);
        let n = *av.shape().last().ok_or_else(|| Error::invalid("layer_norm of scalar"))?;
        let nf = F::lit(n as f64);
        let eps = F::lit(eps);
        let mut data = av.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / n.max(1));
        for row in data.chunks_mut(n) {
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let r = F::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            inv_std.push(r);
        }
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.requires_grad(a);
        self.push(value, Op::LayerNorm { x: a, inv_std }, rg, "layer_norm")
    }

    /// `ln(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn ln_floor(&mut self, a: Var, floor: f64) -> Result<Var> {
        let floor = F::lit(floor);
        let value = self.value(a).map(|x| x.max(floor).ln());
        let rg = self.requires_grad(a);
        self.push(value, Op::LnFloor(a, floor), rg, "ln_floor")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.requires_grad(a);
        self.push(value, Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let value = Tensor::scalar(av.sum() / F::lit(av.len() as f64));
        let rg = self.requires_grad(a);
        self.push(value, Op::Mean(a), rg, "mean")
    }

    /// Weighted average over the leading axis of `bank` (`[K, ...]`) with
    /// coefficients `alpha` (`[K]`).
    pub fn mix(&mut self, bank: Var, alpha: Var) -> Result<Var> {
        let sb = self.shape(bank).to_vec();
        let sa = self.shape(alpha).to_vec();
        if sb.is_empty() || sa != [sb[0]] {
            return Err(Error::ShapeMismatch {
                op: "mix",
                lhs: sb,
                rhs: sa,
            });
        }
        let inner_shape = sb[1..].to_vec();
        let mut out = vec![F::zero(); numel(&inner_shape)];
        mix_into(&mut out, self.value(bank).data(), self.value(alpha).data());
        let rg = self.requires_grad(bank) || self.requires_grad(alpha);
        self.push(Tensor::from_parts(inner_shape, out), Op::Mix { bank, alpha }, rg, "mix")
    }

    /// Row lookup: `table[rows[b], :]` for each `b`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        let [r, d] = shape[..] else {
            return Err(Error::invalid(format!("gather_rows needs a 2D table, got {shape:?}")));
        };
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &row in rows {
            if row >= r {
                return Err(Error::OutOfRange {
                    what: "table row",
                    index: row,
                    len: r,
                });
            }
            data.extend_from_slice(&src[row * d..(row + 1) * d]);
        }
        let rg = self.requires_grad(table);
        self.push(
            Tensor::from_parts(vec![rows.len(), d], data),
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            rg,
            "gather_rows",
        )
    }

    /// Reverse sweep from a scalar `loss`. Leaves without a path to the loss
    /// get no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| match (&self.nodes[id].op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::from_parts(self.nodes[id].value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.requires_grad(v) {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| {
                    for (o, &x) in d.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((o, &x), &y) in d.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((o, &x), &y) in d.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |d| {
                    for (o, &x) in d.iter_mut().zip(g) {
                        *o += x * *c;
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                let n = self.value(*row).len();
                self.accumulate(grads, *row, |d| {
                    for chunk in g.chunks(n) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Broadcast(a) => {
                let map = broadcast_index_map(self.shape(*a), out.shape());
                self.accumulate(grads, *a, |d| {
                    for (&src, &x) in map.iter().zip(g) {
                        d[src] += x;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let rank = sa.len();
                let (m, k) = (sa[rank - 2], sa[rank - 1]);
                let n = sb[sb.len() - 1];
                let batch = if rank == 3 { sa[0] } else { 1 };
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for bi in 0..batch {
                        gemm_nt_acc(
                            &mut d[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[bi * k * n..(bi + 1) * k * n],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for bi in 0..batch {
                        gemm_tn_acc(
                            &mut d[bi * k * n..(bi + 1) * k * n],
                            &av[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            k,
                            m,
                            n,
                        );
                    }
                });
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (j, &ax) in axes.iter().enumerate() {
                    inverse[ax] = j;
                }
                let (back, _) = permute(g, out.shape(), &inverse);
                self.accumulate(grads, *a, |d| add_into(d, &back));
            }
            Op::Reshape(a) | Op::Offset(a) => self.accumulate(grads, *a, |d| add_into(d, g)),
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let width = out.shape()[*axis] * inner;
                let full = shape[*axis] * inner;
                self.accumulate(grads, *x, |d| {
                    for o in 0..outer {
                        let base = o * full + start * inner;
                        add_into(&mut d[base..base + width], &g[o * width..(o + 1) * width]);
                    }
                });
            }
            Op::Softmax(a) => {
                let n = *out.shape().last().unwrap_or(&1);
                let y = out.data();
                self.accumulate(grads, *a, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: F = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((o, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((o, &gi), &xi) in d.iter_mut().zip(g).zip(x) {
                        let s = F::one() / (F::one() + (-xi).exp());
                        *o += gi * s * (F::one() + xi * (F::one() - s));
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let (c, k, half) = (F::lit(GELU_C), F::lit(GELU_A), F::lit(0.5));
                let three = F::lit(3.0);
                self.accumulate(grads, *a, |d| {
                    for ((o, &gi), &xi) in d.iter_mut().zip(g).zip(x) {
                        let th = (c * (xi + k * xi * xi * xi)).tanh();
                        let dth = (F::one() - th * th) * c * (F::one() + three * k * xi * xi);
                        *o += gi * (half * (F::one() + th) + half * xi * dth);
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let n = *out.shape().last().unwrap_or(&1);
                let nf = F::lit(n as f64);
                let y = out.data();
                self.accumulate(grads, *x, |d| {
                    for (((drow, grow), yrow), &r) in
                        d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).zip(inv_std)
                    {
                        let gm = grow.iter().copied().sum::<F>() / nf;
                        let gym = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<F>() / nf;
                        for ((o, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += r * (gi - gm - yi * gym);
                        }
                    }
                });
            }
            Op::LnFloor(a, floor) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((o, &gi), &xi) in d.iter_mut().zip(g).zip(x) {
                        if xi > *floor {
                            *o += gi / xi;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|o| *o += g0));
            }
            Op::Mean(a) => {
                let g0 = g[0] / F::lit(self.value(*a).len() as f64);
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|o| *o += g0));
            }
            Op::Mix { bank, alpha } => {
                let bv = self.value(*bank).data();
                let alv = self.value(*alpha).data();
                let inner = out.len();
                self.accumulate(grads, *bank, |d| {
                    for (k, &a) in alv.iter().enumerate() {
                        for (o, &gi) in d[k * inner..(k + 1) * inner].iter_mut().zip(g) {
                            *o += a * gi;
                        }
                    }
                });
                let corrupt = self.corrupt_mix_backward;
                self.accumulate(grads, *alpha, |d| {
                    for (k, o) in d.iter_mut().enumerate() {
                        let dot: F = bv[k * inner..(k + 1) * inner]
                            .iter()
                            .zip(g)
                            .map(|(&w, &gi)| w * gi)
                            .sum();
                        *o += if corrupt { dot * F::lit(1.1) } else { dot };
                    }
                });
            }
            Op::GatherRows { table, rows } => {
                let d_cols = out.shape()[1];
                self.accumulate(grads, *table, |d| {
                    for (b, &row) in rows.iter().enumerate() {
                        add_into(
                            &mut d[row * d_cols..(row + 1) * d_cols],
                            &g[b * d_cols..(b + 1) * d_cols],
                        );
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![4]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let i3 = g.constant(Tensor::eye(3));
        let a = g.constant(t(&[3, 2], &[1.0, -2.0, 3.5, 0.25, 7.0, -1.0]));
        let y = g.matmul(i3, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn layer_norm_matches_hand_formula() {
        // mean 2, population variance 2/3
        let eps = 1e-5;
        let r = 1.0 / (2.0f64 / 3.0 + eps).sqrt();
        let expect = [-r, 0.0, r];
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.layer_norm(x, eps).unwrap();
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::zeros(vec![2, 3]));
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_on_non_scalar_is_an_error() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::zeros(vec![2]));
        let q = g.scale(p, 2.0).unwrap();
        assert!(matches!(g.backward(q), Err(Error::NotScalar(_))));
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[1], &[1e308]));
        assert!(matches!(g.scale(p, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let p = g.leaf(t(&[2], &[3.0, 4.0]));
        let y = g.mul(c, p).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    }
}
