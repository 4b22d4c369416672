//! Reverse-mode evaluation tape.
//!
//! Every value on the tape is a 2-D `[rows, cols]` tensor (scalars are
//! `[1, 1]`, parameter vectors are read as `[1, n]`). Forward ops record just
//! enough state to run their adjoint; [`Graph::backward`] replays the tape in
//! reverse and returns one gradient tensor per parameter.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, column_sums};
pub use super::kernels::{MixPlan, PatchGeom};
use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChamferMode {
    /// Plain sums of squared nearest-neighbour distances in both directions.
    Sum,
    /// Each directional sum divided by its point count.
    Mean,
}

enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    MatMulNT { a: Var, b: Var },
    MatMulTN { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, v: Var },
    Scale { x: Var, s: f64 },
    Gelu { x: Var },
    SoftmaxRows { x: Var },
    InstanceNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    Im2Col { x: Var, geom: PatchGeom },
    Mix { x: Var, plan: Rc<MixPlan> },
    MeanRows { x: Var },
    SumAll { x: Var },
    Chamfer { a: Var, b: Var, mode: ChamferMode, nn_ab: Vec<usize>, nn_ba: Vec<usize> },
    SmoothL1 { pred: Var, target: Var },
    RowNormMean { x: Var },
    RowEntropyMean { x: Var },
    CrossEntropy { probs: Var, targets: Vec<usize> },
    WeightedSum { terms: Vec<(Var, f64)> },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Evaluation tape over a borrowed parameter set.
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of a scalar with respect to every parameter of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    tensors: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Grads {
            tensors: params.tensors().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.index()]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(&[rows, cols], data).expect("internal shape bookkeeping")
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => self.nodes[v.0].value.as_ref().expect("non-param node holds a value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient). Higher-rank tensors are flattened to `[rows, cols]`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let t = t.as_matrix();
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = dims(self.value(x));
        let (wk, n) = dims(self.value(w));
        if wk != k {
            return Err(Error::shape("linear", [k, n], self.value(w).shape()));
        }
        let mut y = kernels::matmul(self.value(x).data(), self.value(w).data(), m, k, n);
        let mut parents = vec![x, w];
        if let Some(b) = b {
            if self.value(b).len() != n {
                return Err(Error::shape("linear bias", n, self.value(b).shape()));
            }
            kernels::add_row_vector(&mut y, self.value(b).data());
            parents.push(b);
        }
        Ok(self.push(mat(m, n, y), Op::Linear { x, w, b }, &parents))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (bk, n) = dims(self.value(b));
        if bk != k {
            return Err(Error::shape("matmul", [k, n], [bk, n]));
        }
        let y = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(mat(m, n, y), Op::MatMul { a, b }, &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (n, bk) = dims(self.value(b));
        if bk != k {
            return Err(Error::shape("matmul_nt", [n, k], [n, bk]));
        }
        let y = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(mat(m, n, y), Op::MatMulNT { a, b }, &[a, b]))
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, m) = dims(self.value(a));
        let (bk, n) = dims(self.value(b));
        if bk != k {
            return Err(Error::shape("matmul_tn", [k, n], [bk, n]));
        }
        let y = kernels::matmul_tn(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(mat(m, n, y), Op::MatMulTN { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if dims(va) != dims(vb) {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let y: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let (r, c) = dims(va);
        Ok(self.push(mat(r, c, y), Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if dims(va) != dims(vb) {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let y: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let (r, c) = dims(va);
        Ok(self.push(mat(r, c, y), Op::Mul { a, b }, &[a, b]))
    }

    /// Adds a `[1, n]` (or `[n]`) row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        if self.value(v).len() != c {
            return Err(Error::shape("add_row", c, self.value(v).shape()));
        }
        let mut y = self.value(x).data().to_vec();
        kernels::add_row_vector(&mut y, self.value(v).data());
        Ok(self.push(mat(r, c, y), Op::AddRow { x, v }, &[x, v]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let (r, c) = dims(t);
        let y = t.data().iter().map(|v| v * s).collect();
        self.push(mat(r, c, y), Op::Scale { x, s }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = dims(t);
        let y = t.data().iter().map(|&v| kernels::gelu(v)).collect();
        self.push(mat(r, c, y), Op::Gelu { x }, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = dims(t);
        let mut y = t.data().to_vec();
        kernels::softmax_rows_in_place(&mut y, c);
        self.push(mat(r, c, y), Op::SoftmaxRows { x }, &[x])
    }

    /// Per-channel normalisation over rows followed by the affine `gain`, `bias`.
    pub fn instance_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("instance_norm", c, self.value(gain).shape()));
        }
        let (xhat, inv_std) = kernels::instance_norm_forward(self.value(x).data(), r, c);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut y = xhat.clone();
        for row in y.chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        Ok(self.push(
            mat(r, c, y),
            Op::InstanceNorm { x, gain, bias, xhat, inv_std },
            &[x, gain, bias],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        if start + len > c {
            return Err(Error::shape("slice_cols", c, start + len));
        }
        let src = self.value(x).data();
        let mut y = Vec::with_capacity(r * len);
        for row in src.chunks_exact(c) {
            y.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.push(mat(r, len, y), Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        if start + len > r {
            return Err(Error::shape("slice_rows", r, start + len));
        }
        let y = self.value(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(mat(len, c, y), Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims(self.value(p));
            if pr != r {
                return Err(Error::shape("concat_cols", r, pr));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                y.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(mat(r, total, y), Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    /// Patch extraction over a row-major `h × w × c` grid stored as `[h·w, c]`.
    pub fn im2col(&mut self, x: Var, geom: PatchGeom) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        if r != geom.h * geom.w || c != geom.c {
            return Err(Error::shape("im2col", [geom.h * geom.w, geom.c], [r, c]));
        }
        if !geom.is_valid() {
            return Err(Error::Config(format!("patch geometry {geom:?} does not fit the grid")));
        }
        let y = kernels::im2col(self.value(x).data(), &geom);
        let rows = geom.out_h() * geom.out_w();
        Ok(self.push(mat(rows, geom.patch_len(), y), Op::Im2Col { x, geom }, &[x]))
    }

    pub fn mix(&mut self, x: Var, plan: Rc<MixPlan>) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        if r != plan.in_rows {
            return Err(Error::shape("mix", plan.in_rows, r));
        }
        let y = plan.apply(self.value(x).data(), c);
        let rows = plan.out_rows();
        Ok(self.push(mat(rows, c, y), Op::Mix { x, plan }, &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let r = self.value(x).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::IndexOutOfRange { index: bad, bound: r });
        }
        self.mix(x, Rc::new(MixPlan::gather(r, idx)))
    }

    /// Column means, as a `[1, cols]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        if r == 0 {
            return Err(Error::EmptyInput("mean_rows"));
        }
        let y = column_sums(self.value(x).data(), c).into_iter().map(|s| s / r as f64).collect();
        Ok(self.push(mat(1, c, y), Op::MeanRows { x }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(mat(1, 1, vec![s]), Op::SumAll { x }, &[x])
    }

    pub fn chamfer(&mut self, a: Var, b: Var, mode: ChamferMode) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != 3 || vb.cols() != 3 {
            return Err(Error::shape("chamfer", 3, (va.cols(), vb.cols())));
        }
        if va.rows() == 0 || vb.rows() == 0 {
            return Err(Error::EmptyInput("chamfer point set"));
        }
        let (nn_ab, d_ab) = nearest(va, vb);
        let (nn_ba, d_ba) = nearest(vb, va);
        let (sa, sb) = match mode {
            ChamferMode::Sum => (1.0, 1.0),
            ChamferMode::Mean => (1.0 / va.rows() as f64, 1.0 / vb.rows() as f64),
        };
        let value = sa * d_ab + sb * d_ba;
        Ok(self.push(
            mat(1, 1, vec![value]),
            Op::Chamfer { a, b, mode, nn_ab, nn_ba },
            &[a, b],
        ))
    }

    /// Row-averaged smooth-L1 (β = 0.1) between `pred` and `target`.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if dims(p) != dims(t) {
            return Err(Error::shape("smooth_l1", t.shape(), p.shape()));
        }
        let n = p.rows().max(1) as f64;
        let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| smooth_l1(a - b)).sum();
        Ok(self.push(mat(1, 1, vec![s / n]), Op::SmoothL1 { pred, target }, &[pred, target]))
    }

    /// Mean Euclidean norm of the rows.
    pub fn row_norm_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rows() == 0 {
            return Err(Error::EmptyInput("row_norm_mean"));
        }
        let s: f64 = (0..t.rows()).map(|i| row_norm(t.row(i))).sum();
        let v = s / t.rows() as f64;
        Ok(self.push(mat(1, 1, vec![v]), Op::RowNormMean { x }, &[x]))
    }

    /// Mean Shannon entropy of the rows, with `0 · ln 0 = 0`.
    pub fn row_entropy_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rows() == 0 {
            return Err(Error::EmptyInput("row_entropy_mean"));
        }
        let cols = t.cols();
        for (k, &a) in t.data().iter().enumerate() {
            if a < 0.0 {
                return Err(Error::NegativeEntry { row: k / cols, col: k % cols, value: a });
            }
        }
        let s: f64 = t.data().iter().map(|&a| xlogx(a)).sum();
        let v = -s / t.rows() as f64;
        Ok(self.push(mat(1, 1, vec![v]), Op::RowEntropyMean { x }, &[x]))
    }

    /// Mean negative log-probability of the target column in each row.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(probs);
        if t.rows() != targets.len() {
            return Err(Error::shape("cross_entropy", t.rows(), targets.len()));
        }
        let mut s = 0.0;
        for (i, &k) in targets.iter().enumerate() {
            if k >= t.cols() {
                return Err(Error::IndexOutOfRange { index: k, bound: t.cols() });
            }
            s -= libm::log(t.at(i, k));
        }
        let v = s / targets.len() as f64;
        Ok(self.push(
            mat(1, 1, vec![v]),
            Op::CrossEntropy { probs, targets: targets.to_vec() },
            &[probs],
        ))
    }

    /// `Σ wᵢ · xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::shape("weighted_sum", 1, t.shape()));
            }
            s += w * t.data()[0];
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(mat(1, 1, vec![s]), Op::WeightedSum { terms: terms.to_vec() }, &parents))
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0; self.value(loss).len()]);
        let mut out = Grads::zeros_like(self.params);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Param(id) => {
                    let dst = out.tensors[id.index()].data_mut();
                    for (a, b) in dst.iter_mut().zip(&gy) {
                        *a += b;
                    }
                }
                op => self.backprop_op(op, Var(i), &gy, &mut grads),
            }
        }
        out
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_op(&self, op: &Op, me: Var, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        };
        let y = self.value(me);
        match op {
            Op::Input | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (m, k) = dims(self.value(*x));
                let n = y.cols();
                if self.needs(*x) {
                    acc(grads, *x, kernels::matmul_nt(gy, self.value(*w).data(), m, n, k));
                }
                if self.needs(*w) {
                    acc(grads, *w, kernels::matmul_tn(self.value(*x).data(), gy, k, m, n));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        acc(grads, *b, column_sums(gy, n));
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = dims(self.value(*a));
                let n = y.cols();
                if self.needs(*a) {
                    acc(grads, *a, kernels::matmul_nt(gy, self.value(*b).data(), m, n, k));
                }
                if self.needs(*b) {
                    acc(grads, *b, kernels::matmul_tn(self.value(*a).data(), gy, k, m, n));
                }
            }
            Op::MatMulNT { a, b } => {
                // y[m,n] = a[m,k] b[n,k]ᵀ
                let (m, k) = dims(self.value(*a));
                let n = y.cols();
                if self.needs(*a) {
                    acc(grads, *a, kernels::matmul(gy, self.value(*b).data(), m, n, k));
                }
                if self.needs(*b) {
                    acc(grads, *b, kernels::matmul_tn(gy, self.value(*a).data(), n, m, k));
                }
            }
            Op::MatMulTN { a, b } => {
                // y[m,n] = a[k,m]ᵀ b[k,n]
                let (k, m) = dims(self.value(*a));
                let n = y.cols();
                if self.needs(*a) {
                    acc(grads, *a, kernels::matmul_nt(self.value(*b).data(), gy, k, n, m));
                }
                if self.needs(*b) {
                    acc(grads, *b, kernels::matmul(self.value(*a).data(), gy, k, m, n));
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    acc(grads, *a, gy.to_vec());
                }
                if self.needs(*b) {
                    acc(grads, *b, gy.to_vec());
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    acc(grads, *a, gy.iter().zip(vb).map(|(g, v)| g * v).collect());
                }
                if self.needs(*b) {
                    acc(grads, *b, gy.iter().zip(va).map(|(g, v)| g * v).collect());
                }
            }
            Op::AddRow { x, v } => {
                if self.needs(*x) {
                    acc(grads, *x, gy.to_vec());
                }
                if self.needs(*v) {
                    acc(grads, *v, column_sums(gy, y.cols()));
                }
            }
            Op::Scale { x, s } => acc(grads, *x, gy.iter().map(|g| g * s).collect()),
            Op::Gelu { x } => {
                let xs = self.value(*x).data();
                acc(grads, *x, gy.iter().zip(xs).map(|(g, &v)| g * kernels::gelu_grad(v)).collect());
            }
            Op::SoftmaxRows { x } => {
                let c = y.cols();
                let mut dx = vec![0.0; gy.len()];
                for ((d, g), p) in dx.chunks_exact_mut(c).zip(gy.chunks_exact(c)).zip(y.data().chunks_exact(c)) {
                    let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[j] = p[j] * (g[j] - dot);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::InstanceNorm { x, gain, bias, xhat, inv_std } => {
                let (r, c) = dims(y);
                if self.needs(*gain) {
                    let mut dg = vec![0.0; c];
                    for (g, h) in gy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            dg[j] += g[j] * h[j];
                        }
                    }
                    acc(grads, *gain, dg);
                }
                if self.needs(*bias) {
                    acc(grads, *bias, column_sums(gy, c));
                }
                if self.needs(*x) {
                    let gain = self.value(*gain).data();
                    let n = r as f64;
                    let mean_g: Vec<f64> = column_sums(gy, c).into_iter().map(|s| s / n).collect();
                    let mut mean_gh = vec![0.0; c];
                    for (g, h) in gy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            mean_gh[j] += g[j] * h[j] / n;
                        }
                    }
                    let mut dx = vec![0.0; r * c];
                    for ((d, g), h) in dx.chunks_exact_mut(c).zip(gy.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            d[j] = gain[j] * inv_std[j] * (g[j] - mean_g[j] - h[j] * mean_gh[j]);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = dims(self.value(*x));
                let len = y.cols();
                let mut dx = vec![0.0; r * c];
                for (d, g) in dx.chunks_exact_mut(c).zip(gy.chunks_exact(len)) {
                    d[*start..start + len].copy_from_slice(g);
                }
                acc(grads, *x, dx);
            }
            Op::SliceRows { x, start } => {
                let (r, c) = dims(self.value(*x));
                let mut dx = vec![0.0; r * c];
                dx[start * c..start * c + gy.len()].copy_from_slice(gy);
                acc(grads, *x, dx);
            }
            Op::ConcatCols { parts } => {
                let total = y.cols();
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(y.rows() * pc);
                        for g in gy.chunks_exact(total) {
                            dp.extend_from_slice(&g[off..off + pc]);
                        }
                        acc(grads, p, dp);
                    }
                    off += pc;
                }
            }
            Op::Im2Col { x, geom } => acc(grads, *x, kernels::col2im(gy, geom)),
            Op::Mix { x, plan } => acc(grads, *x, plan.apply_transpose(gy, y.cols())),
            Op::MeanRows { x } => {
                let (r, c) = dims(self.value(*x));
                let mut dx = vec![0.0; r * c];
                for d in dx.chunks_exact_mut(c) {
                    for j in 0..c {
                        d[j] = gy[j] / r as f64;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::SumAll { x } => acc(grads, *x, vec![gy[0]; self.value(*x).len()]),
            Op::Chamfer { a, b, mode, nn_ab, nn_ba } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sa, sb) = match mode {
                    ChamferMode::Sum => (1.0, 1.0),
                    ChamferMode::Mean => (1.0 / va.rows() as f64, 1.0 / vb.rows() as f64),
                };
                let mut da = vec![0.0; va.len()];
                let mut db = vec![0.0; vb.len()];
                for (i, &j) in nn_ab.iter().enumerate() {
                    for k in 0..3 {
                        let d = 2.0 * sa * gy[0] * (va.at(i, k) - vb.at(j, k));
                        da[i * 3 + k] += d;
                        db[j * 3 + k] -= d;
                    }
                }
                for (j, &i) in nn_ba.iter().enumerate() {
                    for k in 0..3 {
                        let d = 2.0 * sb * gy[0] * (vb.at(j, k) - va.at(i, k));
                        db[j * 3 + k] += d;
                        da[i * 3 + k] -= d;
                    }
                }
                if self.needs(*a) {
                    acc(grads, *a, da);
                }
                if self.needs(*b) {
                    acc(grads, *b, db);
                }
            }
            Op::SmoothL1 { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let n = p.rows().max(1) as f64;
                let d: Vec<f64> = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(a, b)| gy[0] * smooth_l1_grad(a - b) / n)
                    .collect();
                if self.needs(*target) {
                    acc(grads, *target, d.iter().map(|v| -v).collect());
                }
                if self.needs(*pred) {
                    acc(grads, *pred, d);
                }
            }
            Op::RowNormMean { x } => {
                let t = self.value(*x);
                let (r, c) = dims(t);
                let mut dx = vec![0.0; r * c];
                for (i, d) in dx.chunks_exact_mut(c).enumerate() {
                    let norm = row_norm(t.row(i));
                    if norm > 0.0 {
                        for j in 0..c {
                            d[j] = gy[0] * t.at(i, j) / (norm * r as f64);
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::RowEntropyMean { x } => {
                let t = self.value(*x);
                let r = t.rows() as f64;
                let dx = t
                    .data()
                    .iter()
                    .map(|&a| -gy[0] * (libm::log(a.max(f64::MIN_POSITIVE)) + 1.0) / r)
                    .collect();
                acc(grads, *x, dx);
            }
            Op::CrossEntropy { probs, targets } => {
                let t = self.value(*probs);
                let c = t.cols();
                let mut dx = vec![0.0; t.len()];
                let n = targets.len() as f64;
                for (i, &k) in targets.iter().enumerate() {
                    dx[i * c + k] = -gy[0] / (t.at(i, k) * n);
                }
                acc(grads, *probs, dx);
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    if self.needs(v) {
                        acc(grads, v, vec![gy[0] * w]);
                    }
                }
            }
        }
    }
}

/// Nearest neighbour in `b` for every row of `a`, and the summed squared distance.
fn nearest(a: &Tensor, b: &Tensor) -> (Vec<usize>, f64) {
    let mut idx = Vec::with_capacity(a.rows());
    let mut total = 0.0;
    for i in 0..a.rows() {
        let p = a.row(i);
        let mut best = (0, f64::INFINITY);
        for j in 0..b.rows() {
            let q = b.row(j);
            let d = (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) + (p[2] - q[2]) * (p[2] - q[2]);
            if d < best.1 {
                best = (j, d);
            }
        }
        idx.push(best.0);
        total += best.1;
    }
    (idx, total)
}

pub const SMOOTH_L1_BETA: f64 = 0.1;

pub(crate) fn smooth_l1(e: f64) -> f64 {
    if e.abs() <= SMOOTH_L1_BETA {
        5.0 * e * e
    } else {
        e.abs() - 0.05
    }
}

fn smooth_l1_grad(e: f64) -> f64 {
    if e.abs() <= SMOOTH_L1_BETA {
        10.0 * e
    } else {
        e.signum()
    }
}

pub(crate) fn row_norm(r: &[f64]) -> f64 {
    libm::sqrt(r.iter().map(|v| v * v).sum())
}

pub(crate) fn xlogx(a: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * libm::log(a)
    }
}
