//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! The tape covers a fixed, closed set of primitives: elementwise arithmetic,
//! matmul/transpose, row softmax, row layer-norm, tanh, reshape, row
//! slice/concat, flat gather/scatter, reductions, and cosine similarity.
//! Model forwards and energy functions are composed from these, so a single
//! backward pass serves both training and editing guidance.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Floor added to vector norms inside cosine similarity so zero-norm inputs
/// never produce NaN.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    /// Adds a length-`n` row vector to every row of an `m x n` tensor.
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    LayerNormRows {
        x: usize,
        eps: f64,
    },
    Tanh(usize),
    Reshape(usize),
    ConcatRows(usize, usize),
    SliceRows {
        x: usize,
        start: usize,
        rows: usize,
    },
    Gather {
        x: usize,
        idx: Arc<Vec<usize>>,
    },
    /// Scatter-adds a rank-1 tensor into a zero tensor of the output shape.
    ScatterAdd {
        x: usize,
        idx: Arc<Vec<usize>>,
    },
    Sum(usize),
    Mean(usize),
    CosineSim(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A Wengert-style tape: forward operations append nodes, `grad` replays them
/// in reverse. Single-threaded per instance; spawn one tape per concurrent
/// forward/backward pass.
#[derive(Default)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "variable from tape {} used on tape {}",
                v.tape, self.id
            )));
        }
        Ok(v.idx)
    }

    /// Records an input value. Leaves are the only nodes gradients stop at.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        Ok(self.push(out, Op::Add(ia, ib)))
    }

    /// `a` is `m x n`, `row` is a length-`n` rank-1 tensor added to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ir) = (self.check(a)?, self.check(row)?);
        let (m, n) = self.nodes[ia].value.dims2()?;
        let r = &self.nodes[ir].value;
        if r.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.nodes[ia].value.shape().to_vec(),
                rhs: r.shape().to_vec(),
            });
        }
        let mut data = self.nodes[ia].value.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r.data()[j];
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::AddRow(ia, ir)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[ia].value.sub(&self.nodes[ib].value)?;
        Ok(self.push(out, Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[ia].value.mul(&self.nodes[ib].value)?;
        Ok(self.push(out, Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.scale(c);
        Ok(self.push(out, Op::Scale(ia, c)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        Ok(self.push(out, Op::Matmul(ia, ib)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.transpose()?;
        Ok(self.push(out, Op::Transpose(ia)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.softmax_rows()?;
        Ok(self.push(out, Op::SoftmaxRows(ia)))
    }

    /// Per-row normalization to zero mean and unit variance.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, n) = self.nodes[ia].value.dims2()?;
        let x = self.nodes[ia].value.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] - mu) * inv;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::LayerNormRows { x: ia, eps }))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(f64::tanh);
        Ok(self.push(out, Op::Tanh(ia)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.reshape(shape)?;
        Ok(self.push(out, Op::Reshape(ia)))
    }

    /// Stacks two rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ma, na) = self.nodes[ia].value.dims2()?;
        let (mb, nb) = self.nodes[ib].value.dims2()?;
        if na != nb {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: self.nodes[ia].value.shape().to_vec(),
                rhs: self.nodes[ib].value.shape().to_vec(),
            });
        }
        let mut data = self.nodes[ia].value.data().to_vec();
        data.extend_from_slice(self.nodes[ib].value.data());
        let out = Tensor::new(vec![ma + mb, na], data)?;
        Ok(self.push(out, Op::ConcatRows(ia, ib)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, rows: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, n) = self.nodes[ia].value.dims2()?;
        if start + rows > m {
            return Err(Error::Tape(format!(
                "slice_rows {start}..{} out of {m} rows",
                start + rows
            )));
        }
        let data = self.nodes[ia].value.data()[start * n..(start + rows) * n].to_vec();
        let out = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(out, Op::SliceRows { x: ia, start, rows }))
    }

    /// Gathers flat indices from `a` into a rank-1 tensor. Indices may repeat.
    pub fn gather(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.gather(&idx)?;
        Ok(self.push(out, Op::Gather { x: ia, idx }))
    }

    /// Scatter-adds the rank-1 tensor `a` into a zero tensor of `shape`;
    /// `idx[i]` is the flat destination of element `i`.
    pub fn scatter_add(&mut self, a: Var, idx: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let x = &self.nodes[ia].value;
        if x.rank() != 1 || x.len() != idx.len() {
            return Err(Error::Tape(format!(
                "scatter_add wants rank-1 input matching {} indices, got shape {:?}",
                idx.len(),
                x.shape()
            )));
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        for (i, &dst) in idx.iter().enumerate() {
            if dst >= n {
                return Err(Error::Tape(format!("scatter index {dst} out of {n}")));
            }
            data[dst] += x.data()[i];
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::ScatterAdd { x: ia, idx }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = Tensor::scalar(self.nodes[ia].value.sum());
        Ok(self.push(out, Op::Sum(ia)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = Tensor::scalar(self.nodes[ia].value.mean());
        Ok(self.push(out, Op::Mean(ia)))
    }

    /// Cosine similarity of two equal-shaped tensors viewed as flat vectors,
    /// with a norm floor so zero vectors yield 0 instead of NaN.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        x.same_shape(y, "cosine_sim")?;
        let na = x.norm() + COSINE_NORM_FLOOR;
        let nb = y.norm() + COSINE_NORM_FLOOR;
        let c = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| p * q)
            .sum::<f64>()
            / (na * nb);
        Ok(self.push(Tensor::scalar(c), Op::CosineSim(ia, ib)))
    }

    /// Gradient of the scalar `output` with respect to `input`. Returns a
    /// zero tensor of the input's shape when no path connects them.
    pub fn grad(&self, output: Var, input: Var) -> Result<Tensor> {
        let grads = self.backward(output)?;
        Ok(grads.wrt_idx(self.check(input)?, &self.nodes))
    }

    /// Full reverse pass from the scalar `output`; gradients of every node
    /// are retrievable from the returned table.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let io = self.check(output)?;
        if self.nodes[io].value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[io].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[io] = Some(Tensor::scalar(1.0));

        for i in (0..=io).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) -> Result<()> {
        match &mut grads[idx] {
            Some(existing) => {
                *existing = existing.add(&g)?;
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |idx: usize| &self.nodes[idx].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g.clone())?;
                Self::accumulate(grads, *b, g.clone())?;
            }
            Op::AddRow(a, r) => {
                Self::accumulate(grads, *a, g.clone())?;
                let (m, n) = g.dims2()?;
                let mut gr = vec![0.0; n];
                for i in 0..m {
                    for (j, acc) in gr.iter_mut().enumerate() {
                        *acc += g.data()[i * n + j];
                    }
                }
                Self::accumulate(grads, *r, Tensor::new(vec![n], gr)?)?;
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, g.clone())?;
                Self::accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                Self::accumulate(grads, *a, g.mul(val(*b))?)?;
                Self::accumulate(grads, *b, g.mul(val(*a))?)?;
            }
            Op::Scale(a, c) => {
                Self::accumulate(grads, *a, g.scale(*c))?;
            }
            Op::Matmul(a, b) => {
                let ga = g.matmul(&val(*b).transpose()?)?;
                let gb = val(*a).transpose()?.matmul(g)?;
                Self::accumulate(grads, *a, ga)?;
                Self::accumulate(grads, *b, gb)?;
            }
            Op::Transpose(a) => {
                Self::accumulate(grads, *a, g.transpose()?)?;
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let (m, n) = y.dims2()?;
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                Self::accumulate(grads, *a, Tensor::new(vec![m, n], gx)?)?;
            }
            Op::LayerNormRows { x, eps } => {
                let xv = val(*x);
                let y = &self.nodes[i].value;
                let (m, n) = xv.dims2()?;
                let nf = n as f64;
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    let row = &xv.data()[r * n..(r + 1) * n];
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let mu = row.iter().sum::<f64>() / nf;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean: f64 = gr.iter().sum::<f64>() / nf;
                    let gy_dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for j in 0..n {
                        gx[r * n + j] = inv * (gr[j] - g_mean - yr[j] * gy_dot);
                    }
                }
                Self::accumulate(grads, *x, Tensor::new(vec![m, n], gx)?)?;
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let gx = g.zip_map(y, "tanh-bwd", |gi, yi| gi * (1.0 - yi * yi))?;
                Self::accumulate(grads, *a, gx)?;
            }
            Op::Reshape(a) => {
                Self::accumulate(grads, *a, g.reshape(val(*a).shape())?)?;
            }
            Op::ConcatRows(a, b) => {
                let (ma, n) = val(*a).dims2()?;
                let (mb, _) = val(*b).dims2()?;
                let ga = Tensor::new(vec![ma, n], g.data()[..ma * n].to_vec())?;
                let gb = Tensor::new(vec![mb, n], g.data()[ma * n..].to_vec())?;
                Self::accumulate(grads, *a, ga)?;
                Self::accumulate(grads, *b, gb)?;
            }
            Op::SliceRows { x, start, rows } => {
                let (m, n) = val(*x).dims2()?;
                let mut gx = vec![0.0; m * n];
                gx[start * n..(start + rows) * n].copy_from_slice(g.data());
                Self::accumulate(grads, *x, Tensor::new(vec![m, n], gx)?)?;
            }
            Op::Gather { x, idx } => {
                let mut gx = vec![0.0; val(*x).len()];
                for (i, &src) in idx.iter().enumerate() {
                    gx[src] += g.data()[i];
                }
                Self::accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), gx)?)?;
            }
            Op::ScatterAdd { x, idx } => {
                let mut gx = Vec::with_capacity(idx.len());
                for &dst in idx.iter() {
                    gx.push(g.data()[dst]);
                }
                Self::accumulate(grads, *x, Tensor::new(vec![idx.len()], gx)?)?;
            }
            Op::Sum(a) => {
                let s = g.item()?;
                Self::accumulate(grads, *a, Tensor::full(val(*a).shape(), s))?;
            }
            Op::Mean(a) => {
                let s = g.item()? / val(*a).len() as f64;
                Self::accumulate(grads, *a, Tensor::full(val(*a).shape(), s))?;
            }
            Op::CosineSim(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let na = x.norm() + COSINE_NORM_FLOOR;
                let nb = y.norm() + COSINE_NORM_FLOOR;
                let c = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(p, q)| p * q)
                    .sum::<f64>()
                    / (na * nb);
                let s = g.item()?;
                let gx = x.zip_map(y, "cos-bwd", |xi, yi| {
                    s * (yi / (na * nb) - c * xi / (na * na))
                })?;
                let gy = x.zip_map(y, "cos-bwd", |xi, yi| {
                    s * (xi / (na * nb) - c * yi / (nb * nb))
                })?;
                Self::accumulate(grads, *a, gx)?;
                Self::accumulate(grads, *b, gy)?;
            }
        }
        Ok(())
    }
}

/// Per-node gradient table produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    fn wrt_idx(&self, idx: usize, nodes: &[Node]) -> Tensor {
        match &self.grads[idx] {
            Some(g) => g.clone(),
            None => Tensor::zeros(nodes[idx].value.shape()),
        }
    }

    /// Gradient for `v`, or a zero tensor of its shape when `v` does not
    /// influence the output.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Result<Tensor> {
        let idx = tape.check(v)?;
        Ok(self.wrt_idx(idx, &tape.nodes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    #[test]
    fn square_gradient_is_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.grad(y, x).unwrap();
        assert_eq!(g.data(), &[6.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = tape.leaf(Tensor::scalar(7.0));
        let g = tape.grad(c, x).unwrap();
        assert_eq!(g, Tensor::zeros(&[2, 2]));
        assert_eq!(g.shape(), x_shape(&tape, x));
    }

    fn x_shape(tape: &Tape, v: Var) -> &[usize] {
        tape.value(v).shape()
    }

    #[test]
    fn foreign_var_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.leaf(Tensor::scalar(1.0));
        let b = t2.leaf(Tensor::scalar(1.0));
        assert!(t2.add(a, b).is_err());
        assert!(t1.grad(a, b).is_err());
    }

    #[test]
    fn matmul_sum_gradient_matches_finite_differences() {
        let mut rng = crate::test_rng(7);
        let a0 = Tensor::randn(&[3, 4], &mut rng);
        let b0 = Tensor::randn(&[4, 2], &mut rng);

        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        let prod = tape.matmul(a, b).unwrap();
        let loss = tape.sum(prod).unwrap();
        let ga = tape.grad(loss, a).unwrap();

        let fd = oracle::finite_diff_grad(&a0, 1e-5, |a| a.matmul(&b0).unwrap().sum());
        assert!(
            oracle::rel_err(&ga, &fd) < 1e-6,
            "rel err {}",
            oracle::rel_err(&ga, &fd)
        );
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = crate::test_rng(11);
        let x0 = Tensor::randn(&[3, 5], &mut rng);
        let w0 = Tensor::randn(&[5, 5], &mut rng);

        // One composite touching softmax, layer-norm, tanh, slicing, scatter,
        // concat, and cosine, checked against central differences.
        let f = |x: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w0.clone());
            let h = tape.matmul(xv, wv).unwrap();
            let h = tape.layer_norm_rows(h, 1e-5).unwrap();
            let h = tape.tanh(h).unwrap();
            let s = tape.softmax_rows(h).unwrap();
            let top = tape.slice_rows(s, 0, 2).unwrap();
            let bot = tape.slice_rows(s, 2, 1).unwrap();
            let bot2 = tape.concat_rows(bot, bot).unwrap();
            let c = tape.cosine_sim(top, bot2).unwrap();
            let idx = Arc::new(vec![0usize, 6, 14, 6]);
            let picked = tape.gather(xv, Arc::clone(&idx)).unwrap();
            let spread = tape.scatter_add(picked, idx, &[3, 5]).unwrap();
            let m = tape.mean(spread).unwrap();
            let total = tape.add(c, m).unwrap();
            tape.value(total).item().unwrap()
        };

        let mut tape = Tape::new();
        let xv = tape.leaf(x0.clone());
        let wv = tape.leaf(w0.clone());
        let h = tape.matmul(xv, wv).unwrap();
        let h = tape.layer_norm_rows(h, 1e-5).unwrap();
        let h = tape.tanh(h).unwrap();
        let s = tape.softmax_rows(h).unwrap();
        let top = tape.slice_rows(s, 0, 2).unwrap();
        let bot = tape.slice_rows(s, 2, 1).unwrap();
        let bot2 = tape.concat_rows(bot, bot).unwrap();
        let c = tape.cosine_sim(top, bot2).unwrap();
        let idx = Arc::new(vec![0usize, 6, 14, 6]);
        let picked = tape.gather(xv, Arc::clone(&idx)).unwrap();
        let spread = tape.scatter_add(picked, idx, &[3, 5]).unwrap();
        let m = tape.mean(spread).unwrap();
        let total = tape.add(c, m).unwrap();

        let g = tape.grad(total, xv).unwrap();
        let fd = oracle::finite_diff_grad(&x0, 1e-5, f);
        let err = oracle::rel_err(&g, &fd);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn zero_norm_cosine_is_finite() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[4]));
        let b = tape.leaf(Tensor::new(vec![4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let c = tape.cosine_sim(a, b).unwrap();
        assert_eq!(tape.value(c).item().unwrap(), 0.0);
        let g = tape.grad(c, a).unwrap();
        assert!(g.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn backward_twice_on_one_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let a = tape.mul(x, x).unwrap();
        let b = tape.add(x, x).unwrap();
        let ga = tape.grad(a, x).unwrap();
        let gb = tape.grad(b, x).unwrap();
        assert_eq!(ga.data(), &[4.0]);
        assert_eq!(gb.data(), &[2.0]);
    }
}
