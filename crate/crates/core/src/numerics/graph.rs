//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records each operation as a node in creation order, which is a
//! topological order by construction. Backward walks the nodes once in
//! reverse, pushing gradients to inputs with fixed-order accumulation.

use crate::error::{Error, Result};

use super::ops::{self, LayerNormOut};
use super::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    StopGrad,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var, T),
    LogSoftmax(Var, T),
    Embedding(Var, Vec<usize>),
    MeanRows(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Trace(Var),
    Sum(Var),
    /// Per-row norms.
    NormalizeRows(Var, Vec<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when no gradient reached `var` (constants, stop-gradient
    /// inputs, or nodes off the path to the output).
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn dims2(t: &Tensor<impl Scalar>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds a tensor as a leaf; gradients flow to it iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let ng = t.requires_grad();
        self.push(t, Op::Leaf, ng)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Identity in the forward pass; blocks all gradient flow to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone().with_requires_grad(false);
        self.push(v, Op::StopGrad, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = ops::transpose(self.value(a))?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Transpose(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::add(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::mul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&v| v * s).collect();
        let v = Tensor::from_parts(src.dims().to_vec(), data);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// `x[r, d] + row[d]` broadcast over rows (bias add).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let v = ops::add_row(self.value(x), self.value(row))?;
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(v, Op::AddRow(x, row), ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = ops::gelu(self.value(x));
        let ng = self.ng(x);
        self.push(v, Op::Gelu(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x));
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("layer_norm: gamma/beta width mismatch"));
        }
        let LayerNormOut { y, xhat, rstd } = ops::layer_norm_raw(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            r,
            c,
        );
        let v = Tensor::from_parts(self.value(x).dims().to_vec(), y);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let v = ops::softmax_rows(self.value(x), temperature)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Softmax(x, T::from_f64(1.0 / temperature)), ng))
    }

    pub fn log_softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let v = ops::log_softmax_rows(self.value(x), temperature)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::LogSoftmax(x, T::from_f64(1.0 / temperature)), ng))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = ops::embedding_lookup(self.value(table), ids)?;
        let ng = self.ng(table);
        Ok(self.push(v, Op::Embedding(table, ids.to_vec()), ng))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let v = ops::mean_rows(self.value(x))?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::MeanRows(x), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let (r, c) = dims2(src);
        if len == 0 || start + len > r {
            return Err(Error::shape(format!(
                "slice_rows {start}..{} of {r} rows",
                start + len
            )));
        }
        let v = Tensor::from_parts(vec![len, c], src.data()[start * c..(start + len) * c].to_vec());
        let ng = self.ng(x);
        Ok(self.push(v, Op::SliceRows(x, start), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let (r, c) = dims2(src);
        if len == 0 || start + len > c {
            return Err(Error::shape(format!(
                "slice_cols {start}..{} of {c} cols",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src.data()[i * c + start..i * c + start + len]);
        }
        let v = Tensor::from_parts(vec![r, len], data);
        let ng = self.ng(x);
        Ok(self.push(v, Op::SliceCols(x, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(Error::shape("concat_rows: column mismatch"));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::shape("concat_cols: row mismatch"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::from_parts(vec![r, total], data),
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    /// Sum of the diagonal of a square matrix, as a one-element tensor.
    pub fn trace(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x));
        if r != c {
            return Err(Error::shape(format!("trace of non-square {r}x{c}")));
        }
        let t = self.value(x);
        let s = (0..r).fold(T::zero(), |acc, i| acc + t.get(i, i));
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::Trace(x), ng))
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x));
        let eps = T::from_f64(1e-12);
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = (ops::dot(row, row) + eps).sqrt();
            norms.push(n);
            data.extend(row.iter().map(|&v| v / n));
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![r, c], data), Op::NormalizeRows(x, norms), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Backpropagates from a single-element output.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got dims {:?}",
                self.value(root).dims()
            )));
        }
        self.backward_seeded(&[(root, Tensor::scalar(T::one()))])
    }

    /// Backpropagates given upstream gradients for any set of nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            if g.numel() != self.value(*v).numel() {
                return Err(Error::shape("seed gradient has the wrong size"));
            }
            self.acc(&mut grads, *v, g.data().to_vec());
            last = last.max(v.0 + 1);
        }
        for i in (0..last).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, node)| g.map(|g| Tensor::from_parts(node.value.dims().to_vec(), g)))
                .collect(),
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a = *a + d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let n = self.value(*b).cols();
                if self.ng(*a) {
                    let bt = ops::transpose_raw(self.value(*b).data(), k, n);
                    self.acc(grads, *a, ops::matmul_raw(g, &bt, m, n, k));
                }
                if self.ng(*b) {
                    let at = ops::transpose_raw(self.value(*a).data(), m, k);
                    self.acc(grads, *b, ops::matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = dims2(out);
                self.acc(grads, *a, ops::transpose_raw(g, r, c));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let d = g.iter().zip(self.value(*b).data()).map(|(&g, &y)| g * y).collect();
                    self.acc(grads, *a, d);
                }
                if self.ng(*b) {
                    let d = g.iter().zip(self.value(*a).data()).map(|(&g, &x)| g * x).collect();
                    self.acc(grads, *b, d);
                }
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, g.iter().map(|&v| v * *s).collect());
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, g.to_vec());
                if self.ng(*row) {
                    let (r, c) = dims2(out);
                    let mut d = vec![T::zero(); c];
                    for i in 0..r {
                        for (dj, &gj) in d.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *dj = *dj + gj;
                        }
                    }
                    self.acc(grads, *row, d);
                }
            }
            Op::Gelu(x) => {
                let d = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| g * ops::gelu_grad(v))
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = dims2(out);
                let gam = self.value(*gamma).data();
                if self.ng(*x) {
                    let n = T::from_f64(c as f64);
                    let mut dx = vec![T::zero(); r * c];
                    for i in 0..r {
                        let gi = &g[i * c..(i + 1) * c];
                        let hi = &xhat[i * c..(i + 1) * c];
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..c {
                            let dh = gi[j] * gam[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * hi[j];
                        }
                        let mean_dh = sum_dh / n;
                        let mean_dh_h = sum_dh_h / n;
                        for j in 0..c {
                            let dh = gi[j] * gam[j];
                            dx[i * c + j] = rstd[i] * (dh - mean_dh - hi[j] * mean_dh_h);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] = dg[j] + g[i * c + j] * xhat[i * c + j];
                            db[j] = db[j] + g[i * c + j];
                        }
                    }
                    self.acc(grads, *gamma, dg);
                    self.acc(grads, *beta, db);
                }
            }
            Op::Softmax(x, inv) => {
                let (r, c) = dims2(out);
                let y = out.data();
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    let yi = &y[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let s = ops::dot(gi, yi);
                    for j in 0..c {
                        dx[i * c + j] = (gi[j] - s) * yi[j] * *inv;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::LogSoftmax(x, inv) => {
                let (r, c) = dims2(out);
                let y = out.data();
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    let gi = &g[i * c..(i + 1) * c];
                    let s = gi.iter().fold(T::zero(), |a, &v| a + v);
                    for j in 0..c {
                        dx[i * c + j] = (gi[j] - y[i * c + j].exp() * s) * *inv;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Embedding(table, ids) => {
                let tbl = self.value(*table);
                let c = tbl.cols();
                let mut d = vec![T::zero(); tbl.numel()];
                for (pos, &id) in ids.iter().enumerate() {
                    for (dst, &gv) in d[id * c..(id + 1) * c]
                        .iter_mut()
                        .zip(&g[pos * c..(pos + 1) * c])
                    {
                        *dst = *dst + gv;
                    }
                }
                self.acc(grads, *table, d);
            }
            Op::NormalizeRows(x, norms) => {
                let (r, c) = dims2(out);
                let y = out.data();
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let yi = &y[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let s = ops::dot(gi, yi);
                    d.extend((0..c).map(|j| (gi[j] - yi[j] * s) / norms[i]));
                }
                self.acc(grads, *x, d);
            }
            Op::MeanRows(x) => {
                let (r, c) = dims2(self.value(*x));
                let n = T::from_f64(r as f64);
                let mut d = Vec::with_capacity(r * c);
                for _ in 0..r {
                    d.extend(g.iter().map(|&v| v / n));
                }
                self.acc(grads, *x, d);
            }
            Op::SliceRows(x, start) => {
                let src = self.value(*x);
                let c = src.cols();
                let mut d = vec![T::zero(); src.numel()];
                d[start * c..start * c + g.len()].copy_from_slice(g);
                self.acc(grads, *x, d);
            }
            Op::SliceCols(x, start) => {
                let src = self.value(*x);
                let (r, c) = dims2(src);
                let len = out.cols();
                let mut d = vec![T::zero(); src.numel()];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.acc(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(grads, p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = dims2(out);
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&g[i * total + col..i * total + col + w]);
                        }
                        self.acc(grads, p, d);
                    }
                    col += w;
                }
            }
            Op::Trace(x) => {
                let (r, c) = dims2(self.value(*x));
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    d[i * c + i] = g[0];
                }
                self.acc(grads, *x, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![g[0]; n]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constants_and_stop_gradient_receive_nothing() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = g.constant(Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap());
        let f = g.param(Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap());
        let fs = g.stop_gradient(f);
        let a = g.matmul(w, c).unwrap();
        let b = g.matmul(a, fs).unwrap();
        let s = g.sum(b);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(w).is_some());
        assert!(grads.get(c).is_none());
        assert!(grads.get(f).is_none());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shared_input_accumulates_both_paths() {
        // f = sum(x) + sum(2x) => df/dx = 3
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![2], vec![4.0, 5.0]).unwrap());
        let a = g.sum(x);
        let x2 = g.scale(x, 2.0);
        let b = g.sum(x2);
        let s = g.add(a, b).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }
}
