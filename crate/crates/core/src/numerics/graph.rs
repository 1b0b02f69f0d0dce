//! Eager tape-based reverse-mode differentiation.
//!
//! Every operation computes its value immediately and appends a node to the
//! tape. Nodes only reference earlier nodes, so the tape order is a
//! topological order and the reverse pass visits each node exactly once.

use super::params::{Gradients, ParamGrad};
use super::tensor::{gemm, Layout};
use super::{ParamId, ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    BatchMatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, T),
    Reshape(usize),
    ConcatCols(Vec<usize>),
    Stack(Vec<usize>),
    Gather {
        table: usize,
        rows: Vec<usize>,
    },
    BagMean {
        table: usize,
        offsets: Vec<usize>,
        items: Vec<usize>,
    },
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(usize),
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<T>,
        normalizer: T,
    },
    Sum(usize),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    requires_grad: bool,
}

/// Which rows of a parameter received gradient during backward.
#[derive(Debug, Clone)]
enum Touch {
    Untouched,
    Rows(Vec<bool>),
    Dense,
}

/// Recorded forward computation over a borrowed parameter set.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<usize>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (_, Some(t)) => t,
            (Op::Param(id), None) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(i) = self.param_nodes[id.0] {
            return Var(i);
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: true,
        });
        let i = self.nodes.len() - 1;
        self.param_nodes[id.0] = Some(i);
        Var(i)
    }

    /// Input tensor. With `requires_grad` its gradient is reported by backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(
                op,
                format!("expected a matrix, got shape {s:?}"),
            )),
        }
    }

    fn dims3(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.value(v).shape() {
            [b, r, c] => Ok((*b, *r, *c)),
            s => Err(Error::shape(
                op,
                format!("expected rank 3, got shape {s:?}"),
            )),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if k != kb {
            return Err(Error::shape("matmul", format!("{m}x{k} · {kb}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            self.value(a).data(),
            m,
            k,
            Layout::Plain,
            self.value(b).data(),
            k,
            n,
            Layout::Plain,
            T::zero(),
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a.0, b.0), value, &[a.0, b.0]))
    }

    /// Batched product of `B×m×k` with `B×k×n` (or `B×n×k` transposed).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ba, m, k) = self.dims3(a, "bmm")?;
        let (bb, r, c) = self.dims3(b, "bmm")?;
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if ba != bb || k != kb {
            return Err(Error::shape(
                "bmm",
                format!("{ba}x{m}x{k} · {bb}x{r}x{c} (trans_b={trans_b})"),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); ba * m * n];
        for bi in 0..ba {
            let a_blk = &av[bi * m * k..(bi + 1) * m * k];
            let b_blk = &bv[bi * k * n..(bi + 1) * k * n];
            let o_blk = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let arow = &a_blk[i * k..(i + 1) * k];
                for j in 0..n {
                    let mut acc = T::zero();
                    if trans_b {
                        let brow = &b_blk[j * k..(j + 1) * k];
                        for l in 0..k {
                            acc = acc + arow[l] * brow[l];
                        }
                    } else {
                        for l in 0..k {
                            acc = acc + arow[l] * b_blk[l * n + j];
                        }
                    }
                    o_blk[i * n + j] = acc;
                }
            }
        }
        let value = Tensor::new(vec![ba, m, n], out)?;
        Ok(self.push(
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            value,
            &[a.0, b.0],
        ))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a.0, b.0), value, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a.0, b.0), value, &[a.0, b.0]))
    }

    /// Adds a length-`n` bias to every row of the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(bias).len() != cols {
            return Err(Error::shape(
                "add_bias",
                format!("bias of {} for rows of {cols}", self.value(bias).len()),
            ));
        }
        let bv = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &b)| x + b))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::AddBias(a.0, bias.0), value, &[a.0, bias.0]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Scale(a.0, c), value, &[a.0]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(a.0), value, &[a.0]))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols input"));
        }
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Op::ConcatCols(ids.clone()), value, &ids))
    }

    /// Stacks `n` matrices of shape `B×d` into a `B×n×d` tensor.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("stack input"));
        }
        let shape0 = self.value(parts[0]).shape().to_vec();
        if shape0.len() != 2
            || parts
                .iter()
                .any(|&p| self.value(p).shape() != shape0.as_slice())
        {
            return Err(Error::shape("stack", "parts must be equal-shaped matrices"));
        }
        let (b, d) = (shape0[0], shape0[1]);
        let n = parts.len();
        let mut data = Vec::with_capacity(b * n * d);
        for r in 0..b {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![b, n, d], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Op::Stack(ids.clone()), value, &ids))
    }

    /// Embedding lookup: gathers `rows` of a `R×d` table.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (r, d) = self.dims2(table, "gather")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::IndexOutOfRange {
                what: "embedding table",
                index: bad,
                len: r,
            });
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            data.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push(
            Op::Gather {
                table: table.0,
                rows: rows.to_vec(),
            },
            value,
            &[table.0],
        ))
    }

    /// Mean of table rows per bag; an empty bag yields a zero row.
    pub fn bag_mean(&mut self, table: Var, bags: &[Vec<usize>]) -> Result<Var> {
        let (r, d) = self.dims2(table, "bag_mean")?;
        let mut offsets = Vec::with_capacity(bags.len() + 1);
        let mut items = Vec::new();
        offsets.push(0);
        for bag in bags {
            if let Some(&bad) = bag.iter().find(|&&i| i >= r) {
                return Err(Error::IndexOutOfRange {
                    what: "embedding table",
                    index: bad,
                    len: r,
                });
            }
            items.extend_from_slice(bag);
            offsets.push(items.len());
        }
        let tv = self.value(table);
        let mut data = vec![T::zero(); bags.len() * d];
        for (b, w) in offsets.windows(2).enumerate() {
            let n = w[1] - w[0];
            if n == 0 {
                continue;
            }
            let out = &mut data[b * d..(b + 1) * d];
            for &i in &items[w[0]..w[1]] {
                for (o, &x) in out.iter_mut().zip(tv.row(i)) {
                    *o = *o + x;
                }
            }
            let inv = T::one() / T::of(n as f64);
            out.iter_mut().for_each(|o| *o = *o * inv);
        }
        let value = Tensor::new(vec![bags.len(), d], data)?;
        Ok(self.push(
            Op::BagMean {
                table: table.0,
                offsets,
                items,
            },
            value,
            &[table.0],
        ))
    }

    /// Softmax over the last axis, stabilised by subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let cols = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(Op::Softmax(x.0), value, &[x.0]))
    }

    /// Layer normalisation over the last axis with `ε = 1e-5`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if d < 2 {
            return Err(Error::InvalidArgument(format!(
                "layer_norm needs at least 2 features, got {d}"
            )));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape(
                "layer_norm",
                "gain/bias length must match features",
            ));
        }
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let eps = T::of(LAYER_NORM_EPS);
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        let dn = T::of(d as f64);
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(gv[j] * h + bv[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            value,
            &[x.0, gain.0, bias.0],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(Op::Relu(x.0), value, &[x.0]))
    }

    /// Inverted dropout. Identity (no node) in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(Op::Dropout { x: x.0, mask }, value, &[x.0]))
    }

    /// Mean cross-entropy over rows whose target differs from `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let counted = targets.iter().filter(|&&t| t != ignore).count();
        if counted == 0 {
            return Err(Error::Empty(
                "cross-entropy batch (every target is ignored)",
            ));
        }
        self.cross_entropy_normalized(logits, targets, ignore, counted)
    }

    /// Sum of cross-entropy over non-ignored rows divided by `normalizer`.
    ///
    /// Lets several steps share one denominator so their sum is a batch mean.
    pub fn cross_entropy_normalized(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: usize,
        normalizer: usize,
    ) -> Result<Var> {
        let (m, c) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                format!("{m} rows but {} targets", targets.len()),
            ));
        }
        if normalizer == 0 {
            return Err(Error::Empty("cross-entropy normaliser"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore && t >= c) {
            return Err(Error::IndexOutOfRange {
                what: "class",
                index: bad,
                len: c,
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); m * c];
        let mut total = 0.0f64;
        for r in 0..m {
            let t = targets[r];
            if t == ignore {
                continue;
            }
            let row = lv.row(r);
            let out = &mut probs[r * c..(r + 1) * c];
            out.copy_from_slice(row);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = 0.0f64;
            for v in out.iter_mut() {
                *v = (*v - max).exp();
                z += v.as_f64();
            }
            total += z.ln() + max.as_f64() - row[t].as_f64();
            let zt = T::of(z);
            out.iter_mut().for_each(|v| *v = *v / zt);
        }
        let loss = total / normalizer as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy loss".into()));
        }
        let value = Tensor::scalar(T::of(loss));
        Ok(self.push(
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                ignore,
                probs,
                normalizer: T::of(normalizer as f64),
            },
            value,
            &[logits.0],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum::<T>();
        Ok(self.push(Op::Sum(x.0), Tensor::scalar(total), &[x.0]))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients accumulate additively across fan-out. Parameters reached only
    /// through `gather`/`bag_mean` report the rows they touched.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(
                "backward called without a recorded forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut touch: Vec<Touch> = vec![Touch::Untouched; n];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Param(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(i, &g, &mut grads, &mut touch);
        }

        let mut out = Gradients {
            params: vec![None; self.params.len()],
            leaves: Vec::new(),
        };
        for i in 0..n {
            let node = &self.nodes[i];
            match node.op {
                Op::Param(id) => {
                    if let Some(values) = grads[i].take() {
                        if values.iter().any(|v| !v.is_finite()) {
                            return Err(Error::NonFinite(format!(
                                "gradient of {}",
                                self.params.get(id).name
                            )));
                        }
                        let touched = match &touch[i] {
                            Touch::Rows(mask) => Some(
                                mask.iter()
                                    .enumerate()
                                    .filter_map(|(r, &t)| t.then_some(r))
                                    .collect(),
                            ),
                            _ => None,
                        };
                        out.params[id.0] = Some(ParamGrad { values, touched });
                    }
                }
                Op::Leaf if node.requires_grad => {
                    if let Some(values) = grads[i].take() {
                        out.leaves.push((i, values));
                    }
                }
                _ => {}
            }
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], i: usize) -> Option<&'g mut Vec<T>> {
        if !self.nodes[i].requires_grad {
            return None;
        }
        let len = self.value(Var(i)).len();
        Some(grads[i].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn mark_dense(&self, touch: &mut [Touch], i: usize) {
        if matches!(self.nodes[i].op, Op::Param(_)) {
            touch[i] = Touch::Dense;
        }
    }

    fn mark_rows(&self, touch: &mut [Touch], i: usize, rows: &[usize]) {
        if !matches!(self.nodes[i].op, Op::Param(_)) {
            return;
        }
        let n = self.value(Var(i)).rows();
        match &mut touch[i] {
            Touch::Dense => {}
            Touch::Rows(mask) => rows.iter().for_each(|&r| mask[r] = true),
            t @ Touch::Untouched => {
                let mut mask = vec![false; n];
                rows.iter().for_each(|&r| mask[r] = true);
                *t = Touch::Rows(mask);
            }
        }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<T>>],
        touch: &mut [Touch],
        i: usize,
        contrib: &[T],
    ) {
        self.mark_dense(touch, i);
        if let Some(slot) = self.slot(grads, i) {
            for (s, &c) in slot.iter_mut().zip(contrib) {
                *s = *s + c;
            }
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>], touch: &mut [Touch]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let av = self.value(Var(*a));
                let bv = self.value(Var(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.nodes[*a].requires_grad {
                    self.mark_dense(touch, *a);
                    let slot = self.slot(grads, *a).expect("requires grad");
                    gemm(
                        g,
                        m,
                        n,
                        Layout::Plain,
                        bv.data(),
                        k,
                        n,
                        Layout::Transposed,
                        T::one(),
                        slot,
                    );
                }
                if self.nodes[*b].requires_grad {
                    self.mark_dense(touch, *b);
                    let slot = self.slot(grads, *b).expect("requires grad");
                    gemm(
                        av.data(),
                        m,
                        k,
                        Layout::Transposed,
                        g,
                        m,
                        n,
                        Layout::Plain,
                        T::one(),
                        slot,
                    );
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let av = self.value(Var(*a));
                let bv = self.value(Var(*b));
                let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = self.value(Var(i)).shape()[2];
                let b_at = |bi: usize, l: usize, j: usize| {
                    if *trans_b {
                        bi * n * k + j * k + l
                    } else {
                        bi * k * n + l * n + j
                    }
                };
                if self.nodes[*a].requires_grad {
                    let mut ga = vec![T::zero(); av.len()];
                    for bi in 0..bs {
                        for r in 0..m {
                            let grow = &g[bi * m * n + r * n..bi * m * n + (r + 1) * n];
                            for l in 0..k {
                                let mut acc = T::zero();
                                for (j, &gv) in grow.iter().enumerate() {
                                    acc = acc + gv * bv.data()[b_at(bi, l, j)];
                                }
                                ga[bi * m * k + r * k + l] = acc;
                            }
                        }
                    }
                    self.accumulate(grads, touch, *a, &ga);
                }
                if self.nodes[*b].requires_grad {
                    let mut gb = vec![T::zero(); bv.len()];
                    for bi in 0..bs {
                        for r in 0..m {
                            let arow = &av.data()[bi * m * k + r * k..bi * m * k + (r + 1) * k];
                            for j in 0..n {
                                let gv = g[bi * m * n + r * n + j];
                                if gv == T::zero() {
                                    continue;
                                }
                                for (l, &x) in arow.iter().enumerate() {
                                    let idx = b_at(bi, l, j);
                                    gb[idx] = gb[idx] + x * gv;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, touch, *b, &gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, touch, *a, g);
                self.accumulate(grads, touch, *b, g);
            }
            Op::Mul(a, b) => {
                let av = self.value(Var(*a)).data();
                let bv = self.value(Var(*b)).data();
                let ga: Vec<T> = g.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                let gb: Vec<T> = g.iter().zip(av).map(|(&g, &x)| g * x).collect();
                self.accumulate(grads, touch, *a, &ga);
                self.accumulate(grads, touch, *b, &gb);
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, touch, *a, g);
                let cols = self.value(Var(*bias)).len();
                let mut gb = vec![T::zero(); cols];
                for row in g.chunks(cols) {
                    for (s, &v) in gb.iter_mut().zip(row) {
                        *s = *s + v;
                    }
                }
                self.accumulate(grads, touch, *bias, &gb);
            }
            Op::Scale(a, c) => {
                let ga: Vec<T> = g.iter().map(|&v| v * *c).collect();
                self.accumulate(grads, touch, *a, &ga);
            }
            Op::Reshape(a) => self.accumulate(grads, touch, *a, g),
            Op::ConcatCols(parts) => {
                let total = self.value(Var(i)).cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(Var(p)).cols();
                    if self.nodes[p].requires_grad {
                        let gp: Vec<T> = g
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + pc].iter().copied())
                            .collect();
                        self.accumulate(grads, touch, p, &gp);
                    }
                    offset += pc;
                }
            }
            Op::Stack(parts) => {
                let shape = self.value(Var(i)).shape();
                let (b, n, d) = (shape[0], shape[1], shape[2]);
                for (slot_idx, &p) in parts.iter().enumerate() {
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    let mut gp = Vec::with_capacity(b * d);
                    for r in 0..b {
                        let start = r * n * d + slot_idx * d;
                        gp.extend_from_slice(&g[start..start + d]);
                    }
                    self.accumulate(grads, touch, p, &gp);
                }
            }
            Op::Gather { table, rows } => {
                let d = self.value(Var(*table)).cols();
                self.mark_rows(touch, *table, rows);
                if let Some(slot) = self.slot(grads, *table) {
                    for (k, &r) in rows.iter().enumerate() {
                        let dst = &mut slot[r * d..(r + 1) * d];
                        for (s, &v) in dst.iter_mut().zip(&g[k * d..(k + 1) * d]) {
                            *s = *s + v;
                        }
                    }
                }
            }
            Op::BagMean {
                table,
                offsets,
                items,
            } => {
                let d = self.value(Var(*table)).cols();
                self.mark_rows(touch, *table, items);
                if let Some(slot) = self.slot(grads, *table) {
                    for (b, w) in offsets.windows(2).enumerate() {
                        let cnt = w[1] - w[0];
                        if cnt == 0 {
                            continue;
                        }
                        let inv = T::one() / T::of(cnt as f64);
                        let gb = &g[b * d..(b + 1) * d];
                        for &r in &items[w[0]..w[1]] {
                            let dst = &mut slot[r * d..(r + 1) * d];
                            for (s, &v) in dst.iter_mut().zip(gb) {
                                *s = *s + v * inv;
                            }
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = self.value(Var(i));
                let cols = y.cols();
                let mut gx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(cols).zip(g.chunks(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                self.accumulate(grads, touch, *x, &gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(Var(*gain)).data();
                let d = gv.len();
                let dn = T::of(d as f64);
                let mut gx = Vec::with_capacity(xhat.len());
                let mut ggain = vec![T::zero(); d];
                let mut gbias = vec![T::zero(); d];
                for ((gr, hr), &inv) in g.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                    let mut sum_gh = T::zero();
                    let mut sum_gh_h = T::zero();
                    for j in 0..d {
                        let gh = gr[j] * gv[j];
                        sum_gh = sum_gh + gh;
                        sum_gh_h = sum_gh_h + gh * hr[j];
                        ggain[j] = ggain[j] + gr[j] * hr[j];
                        gbias[j] = gbias[j] + gr[j];
                    }
                    for j in 0..d {
                        let gh = gr[j] * gv[j];
                        gx.push(inv / dn * (dn * gh - sum_gh - hr[j] * sum_gh_h));
                    }
                }
                self.accumulate(grads, touch, *x, &gx);
                self.accumulate(grads, touch, *gain, &ggain);
                self.accumulate(grads, touch, *bias, &gbias);
            }
            Op::Relu(x) => {
                let xv = self.value(Var(*x)).data();
                let gx: Vec<T> = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, touch, *x, &gx);
            }
            Op::Dropout { x, mask } => {
                let gx: Vec<T> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accumulate(grads, touch, *x, &gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                normalizer,
            } => {
                let c = self.value(Var(*logits)).cols();
                let up = g[0] / *normalizer;
                let mut gl = vec![T::zero(); probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore {
                        continue;
                    }
                    let dst = &mut gl[r * c..(r + 1) * c];
                    for (d, &p) in dst.iter_mut().zip(&probs[r * c..(r + 1) * c]) {
                        *d = p * up;
                    }
                    dst[t] = dst[t] - up;
                }
                self.accumulate(grads, touch, *logits, &gl);
            }
            Op::Sum(x) => {
                let len = self.value(Var(*x)).len();
                let gx = vec![g[0]; len];
                self.accumulate(grads, touch, *x, &gx);
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z = z + *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}
