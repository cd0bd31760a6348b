//! Reverse-mode gradient tape over a closed set of matrix primitives.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the adjoint. `backward` walks the nodes in reverse and returns one adjoint
//! per registered parameter.

use super::matrix::{logsumexp_unchecked, matmul_nn, matmul_nt, matmul_tn, sigmoid, Matrix};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    L2NormalizeRows(Var, Vec<f64>),
    LogSumExp(Var),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Bce(Var, Vec<f64>),
    BceWithLogits(Var, Vec<f64>),
    /// Scalar node with a precomputed local gradient w.r.t. its input.
    Linearized(Var, Matrix),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Records matrix operations for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
    params: Vec<Var>,
}

impl Grads {
    /// Adjoint of any node; zeros if the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.adjoints[v.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// One adjoint per registered parameter, in registration order.
    pub fn params(&self) -> Vec<Matrix> {
        self.params.iter().map(|&p| self.wrt(p)).collect()
    }
}

const BCE_CLAMP: f64 = 1e-12;

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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// A constant input; it receives an adjoint but is not a parameter.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input)
    }

    /// A learnable parameter; its adjoint is reported by [`Grads::params`].
    pub fn param(&mut self, m: Matrix) -> Var {
        let v = self.push(m, Op::Param);
        self.params.push(v);
        v
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return shape_err(format!(
                "matmul {}x{} by {}x{}",
                va.rows(),
                va.cols(),
                vb.rows(),
                vb.cols()
            ));
        }
        let out = matmul_nn(va, vb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return shape_err(format!(
                "broadcast add of {}x{} onto {}x{}",
                vr.rows(),
                vr.cols(),
                va.rows(),
                va.cols()
            ));
        }
        let mut out = va.clone();
        let r = vr.data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// `x·W + b`, the usual dense layer.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(out, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    /// Softmax across each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let lse = logsumexp_unchecked(row);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Divides each row by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate(format!("row {i} has norm {n}")));
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        Ok(self.push(out, Op::L2NormalizeRows(a, norms)))
    }

    /// `log Σ exp` over every entry; returns a 1×1 node.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return shape_err("logsumexp of an empty matrix");
        }
        let out = Matrix::scalar(logsumexp_unchecked(va.data()));
        Ok(self.push(out, Op::LogSumExp(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).data().iter().sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return shape_err("mean of an empty matrix");
        }
        let out = Matrix::scalar(va.data().iter().sum::<f64>() / va.len() as f64);
        Ok(self.push(out, Op::Mean(a)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.rows()) {
            return shape_err(format!("row index {bad} out of {} rows", va.rows()));
        }
        let out = va.gather_rows(idx);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec())))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start > end || end > va.cols() {
            return shape_err(format!(
                "column slice {start}..{end} of {} columns",
                va.cols()
            ));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(va.rows() * w);
        for i in 0..va.rows() {
            data.extend_from_slice(&va.row(i)[start..end]);
        }
        let out = Matrix::from_vec_unchecked(va.rows(), w, data);
        Ok(self.push(out, Op::SliceCols(a, start, end)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return shape_err("concat of zero matrices"),
        };
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return shape_err("concat_cols row mismatch");
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Matrix::from_vec_unchecked(rows, cols, data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Mean binary cross-entropy of probabilities against targets.
    /// Probabilities are clamped to `[1e-12, 1 − 1e-12]`.
    pub fn bce(&mut self, probs: Var, targets: &[f64]) -> Result<Var> {
        let vp = self.value(probs);
        if vp.len() != targets.len() || targets.is_empty() {
            return shape_err(format!(
                "bce with {} probs and {} targets",
                vp.len(),
                targets.len()
            ));
        }
        let n = targets.len() as f64;
        let loss = vp
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.push(Matrix::scalar(loss), Op::Bce(probs, targets.to_vec())))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.len() != targets.len() || targets.is_empty() {
            return shape_err(format!(
                "bce with {} logits and {} targets",
                vl.len(),
                targets.len()
            ));
        }
        let n = targets.len() as f64;
        // max(x,0) − x·y + log(1 + e^{−|x|})
        let loss = vl
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        Ok(self.push(
            Matrix::scalar(loss),
            Op::BceWithLogits(logits, targets.to_vec()),
        ))
    }

    /// Attaches an externally computed scalar with known gradient w.r.t. `input`.
    pub fn linearized(&mut self, input: Var, value: f64, grad: Matrix) -> Result<Var> {
        if !grad.same_shape(self.value(input)) {
            return shape_err("linearized gradient shape differs from its input");
        }
        Ok(self.push(Matrix::scalar(value), Op::Linearized(input, grad)))
    }

    /// Backpropagates from a 1×1 output.
    pub fn backward(&self, output: Var) -> Result<Grads> {
        let v = self.value(output);
        if v.shape() != (1, 1) {
            return shape_err(format!(
                "backward needs a scalar output, got {}x{}",
                v.rows(),
                v.cols()
            ));
        }
        self.backward_with_seed(output, Matrix::scalar(1.0))
    }

    /// Backpropagates an arbitrary upstream adjoint into `output`.
    pub fn backward_with_seed(&self, output: Var, seed: Matrix) -> Result<Grads> {
        if !seed.same_shape(self.value(output)) {
            return shape_err("seed adjoint shape differs from output");
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut adj);
            adj[idx] = Some(g);
        }
        adj.resize(self.nodes.len(), None);
        Ok(Grads {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let da = matmul_nt(g, self.value(*b));
                let db = matmul_tn(self.value(*a), g);
                accumulate(adj, *a, da);
                accumulate(adj, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.scale(-1.0));
            }
            Op::AddRow(a, r) => {
                let mut dr = vec![0.0; g.cols()];
                for i in 0..g.rows() {
                    for (d, v) in dr.iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                accumulate(adj, *a, g.clone());
                accumulate(adj, *r, Matrix::row_vector(&dr));
            }
            Op::Hadamard(a, b) => {
                let da = g.hadamard(self.value(*b)).expect("shape checked at record");
                let db = g.hadamard(self.value(*a)).expect("shape checked at record");
                accumulate(adj, *a, da);
                accumulate(adj, *b, db);
            }
            Op::Scale(a, c) => accumulate(adj, *a, g.scale(*c)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                accumulate(adj, *a, d);
            }
            Op::Tanh(a) => accumulate(adj, *a, zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Sigmoid(a) => accumulate(adj, *a, zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv))),
            Op::Transpose(a) => accumulate(adj, *a, g.transpose()),
            Op::SoftmaxRows(a) => {
                let mut d = g.clone();
                for i in 0..d.rows() {
                    let yr = y.row(i);
                    let gy: f64 = g.row(i).iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (dv, &yv) in d.row_mut(i).iter_mut().zip(yr) {
                        *dv = yv * (*dv - gy);
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::L2NormalizeRows(a, norms) => {
                let mut d = g.clone();
                for (i, &n) in norms.iter().enumerate() {
                    let yr = y.row(i);
                    let gy: f64 = g.row(i).iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (dv, &yv) in d.row_mut(i).iter_mut().zip(yr) {
                        *dv = (*dv - yv * gy) / n;
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::LogSumExp(a) => {
                let lse = y.item();
                let gs = g.item();
                accumulate(adj, *a, self.value(*a).map(|v| gs * (v - lse).exp()));
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                accumulate(adj, *a, Matrix::filled(x.rows(), x.cols(), g.item()));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                accumulate(
                    adj,
                    *a,
                    Matrix::filled(x.rows(), x.cols(), g.item() / x.len() as f64),
                );
            }
            Op::GatherRows(a, idx) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (dv, gv) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *dv += gv;
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::SliceCols(a, start, end) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    d.row_mut(i)[*start..*end].copy_from_slice(g.row(i));
                }
                accumulate(adj, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut data = Vec::with_capacity(g.rows() * w);
                    for i in 0..g.rows() {
                        data.extend_from_slice(&g.row(i)[offset..offset + w]);
                    }
                    accumulate(adj, p, Matrix::from_vec_unchecked(g.rows(), w, data));
                    offset += w;
                }
            }
            Op::Bce(p, targets) => {
                let x = self.value(*p);
                let n = targets.len() as f64;
                let gs = g.item();
                let d: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&pv, &t)| {
                        let pc = pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        gs * (pc - t) / (pc * (1.0 - pc)) / n
                    })
                    .collect();
                accumulate(adj, *p, Matrix::from_vec_unchecked(x.rows(), x.cols(), d));
            }
            Op::BceWithLogits(l, targets) => {
                let x = self.value(*l);
                let n = targets.len() as f64;
                let gs = g.item();
                let d: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&xv, &t)| gs * (sigmoid(xv) - t) / n)
                    .collect();
                accumulate(adj, *l, Matrix::from_vec_unchecked(x.rows(), x.cols(), d));
            }
            Op::Linearized(input, grad) => accumulate(adj, *input, grad.scale(g.item())),
        }
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix::from_vec_unchecked(
        a.rows(),
        a.cols(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut adj[v.0] {
        Some(m) => m.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_adjoint_masks_negatives() {
        let mut t = Tape::new();
        let x = t.param(Matrix::row_vector(&[-1.0, 2.0]));
        let r = t.relu(x);
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.params()[0].data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.param(Matrix::row_vector(&[0.0]));
        let r = t.relu(x);
        let s = t.sum(r);
        assert_eq!(t.backward(s).unwrap().params()[0].data(), &[0.0]);
    }

    #[test]
    fn unreachable_param_gets_zero_adjoint() {
        let mut t = Tape::new();
        let a = t.param(Matrix::row_vector(&[1.0, 2.0]));
        let _b = t.param(Matrix::zeros(2, 3));
        let s = t.sum(a);
        let g = t.backward(s).unwrap().params();
        assert_eq!(g[1], Matrix::zeros(2, 3));
        assert_eq!(g[0].data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let a = t.param(Matrix::row_vector(&[1.0, 2.0]));
        assert!(matches!(t.backward(a), Err(Error::Shape(_))));
    }

    #[test]
    fn recorded_shape_errors() {
        let mut t = Tape::new();
        let a = t.input(Matrix::zeros(2, 3));
        let b = t.input(Matrix::zeros(2, 3));
        assert!(t.matmul(a, b).is_err());
        assert!(t.gather_rows(a, &[5]).is_err());
        assert!(t.slice_cols(a, 2, 4).is_err());
        let z = t.input(Matrix::zeros(1, 3));
        assert!(matches!(t.l2_normalize_rows(z), Err(Error::Degenerate(_))));
    }
}
