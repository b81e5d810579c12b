use std::collections::{BTreeMap, HashMap};

use super::tensor::{gemm, silu, silu_grad, Tensor, TensorError};
use super::{Ops, ParamId};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sum(Var),
    MeanSquare(Var),
    Exp(Var),
    AddRow(Var, Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    PairwiseSqDist(Var, Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients keyed by parameter.
pub type GradientMap = BTreeMap<ParamId, Tensor>;

/// Reverse-mode tape. Nodes are appended in evaluation order, so every
/// node's inputs precede it and the graph is acyclic by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
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

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn record(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var, TensorError> {
        let value = value.check_finite(name)?;
        let needs = match &op {
            Op::Constant => false,
            Op::Param => true,
            Op::Scale(a, _) | Op::Silu(a) | Op::Sum(a) | Op::MeanSquare(a) | Op::Exp(a) | Op::SliceRows(a, _) => {
                self.needs(*a)
            }
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::ConcatCols(a, b)
            | Op::ConcatRows(a, b)
            | Op::PairwiseSqDist(a, b) => self.needs(*a) || self.needs(*b),
        };
        Ok(self.push(op, value, needs))
    }

    /// Reverse accumulation from a scalar `loss`. Returns one gradient per
    /// requested parameter; a parameter on the tape that the loss does not
    /// depend on gets zeros.
    pub fn backward(self, loss: Var, params: &[ParamId]) -> Result<GradientMap, TensorError> {
        for p in params {
            if !self.params.contains_key(p) {
                return Err(TensorError::ParamNotOnTape(*p));
            }
        }
        let mut all = self.backward_all(loss)?;
        Ok(params
            .iter()
            .map(|p| (*p, all.remove(p).expect("registered parameter")))
            .collect())
    }

    /// Gradients for every parameter registered on the tape.
    pub fn backward_all(self, loss: Var) -> Result<GradientMap, TensorError> {
        let loss_val = self.val(loss);
        if !loss_val.is_scalar() {
            return Err(TensorError::NotScalar(loss_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_val.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Constant => {}
                Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.val(a), self.val(b));
                    let (m, k) = (av.rows(), av.cols());
                    let n = bv.cols();
                    if self.needs(a) {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, 0.0);
                        accumulate(&mut grads, a, Tensor::matrix(m, k, ga)?);
                    }
                    if self.needs(b) {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, 0.0);
                        accumulate(&mut grads, b, Tensor::matrix(k, n, gb)?);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if self.needs(b) {
                        accumulate(&mut grads, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if self.needs(b) {
                        accumulate(&mut grads, b, g.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        accumulate(&mut grads, a, g.mul(self.val(b))?);
                    }
                    if self.needs(b) {
                        accumulate(&mut grads, b, g.mul(self.val(a))?);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, a, g.scale(c)),
                Op::Silu(a) => {
                    let ga = g.zip_with(self.val(a), "silu", |gi, x| gi * silu_grad(x))?;
                    accumulate(&mut grads, a, ga);
                }
                Op::Sum(a) => {
                    let gs = g.item();
                    accumulate(&mut grads, a, Tensor::full(self.val(a).shape(), gs));
                }
                Op::MeanSquare(a) => {
                    let av = self.val(a);
                    let c = 2.0 * g.item() / av.len().max(1) as f64;
                    accumulate(&mut grads, a, av.scale(c));
                }
                Op::Exp(a) => accumulate(&mut grads, a, g.mul(&node.value)?),
                Op::AddRow(a, row) => {
                    if self.needs(row) {
                        let n = g.cols();
                        let mut col_sums = vec![0.0; n];
                        for i in 0..g.rows() {
                            for (s, v) in col_sums.iter_mut().zip(g.row(i)) {
                                *s += v;
                            }
                        }
                        accumulate(&mut grads, row, Tensor::matrix(1, n, col_sums)?);
                    }
                    if self.needs(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (self.val(a).cols(), self.val(b).cols());
                    let m = g.rows();
                    if self.needs(a) {
                        let mut d = Vec::with_capacity(m * ca);
                        for i in 0..m {
                            d.extend_from_slice(&g.row(i)[..ca]);
                        }
                        accumulate(&mut grads, a, Tensor::matrix(m, ca, d)?);
                    }
                    if self.needs(b) {
                        let mut d = Vec::with_capacity(m * cb);
                        for i in 0..m {
                            d.extend_from_slice(&g.row(i)[ca..]);
                        }
                        accumulate(&mut grads, b, Tensor::matrix(m, cb, d)?);
                    }
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.val(a).rows();
                    if self.needs(a) {
                        accumulate(&mut grads, a, g.slice_rows(0, ra)?);
                    }
                    if self.needs(b) {
                        accumulate(&mut grads, b, g.slice_rows(ra, g.rows())?);
                    }
                }
                Op::SliceRows(a, start) => {
                    let av = self.val(a);
                    let c = av.cols();
                    let mut full = Tensor::zeros(av.shape());
                    full.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, a, full);
                }
                Op::PairwiseSqDist(a, b) => {
                    let (av, bv) = (self.val(a), self.val(b));
                    let (m, d) = (av.rows(), av.cols());
                    let n = bv.rows();
                    if self.needs(a) {
                        // 2·(rowsum(g)_i·a_i − (g·b)_i)
                        let mut gb = vec![0.0; m * d];
                        gemm(m, n, d, g.data(), false, bv.data(), false, &mut gb, 0.0);
                        for i in 0..m {
                            let rs: f64 = g.row(i).iter().sum();
                            for p in 0..d {
                                gb[i * d + p] = 2.0 * (rs * av.data()[i * d + p] - gb[i * d + p]);
                            }
                        }
                        accumulate(&mut grads, a, Tensor::matrix(m, d, gb)?);
                    }
                    if self.needs(b) {
                        let mut ga = vec![0.0; n * d];
                        gemm(n, m, d, g.data(), true, av.data(), false, &mut ga, 0.0);
                        let mut cs = vec![0.0; n];
                        for i in 0..m {
                            for (s, v) in cs.iter_mut().zip(g.row(i)) {
                                *s += v;
                            }
                        }
                        for j in 0..n {
                            for p in 0..d {
                                ga[j * d + p] = 2.0 * (cs[j] * bv.data()[j * d + p] - ga[j * d + p]);
                            }
                        }
                        accumulate(&mut grads, b, Tensor::matrix(n, d, ga)?);
                    }
                }
            }
        }

        let mut out = GradientMap::new();
        for (id, var) in &self.params {
            let g = grads[var.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.val(*var).shape()));
            out.insert(*id, g);
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Ops for Tape {
    type V = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t, false)
    }

    fn param(&mut self, id: ParamId, t: &Tensor) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(Op::Param, t.clone(), true);
        self.params.insert(id, v);
        v
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        let out = self.val(*a).matmul(self.val(*b))?;
        self.record(Op::MatMul(*a, *b), out, "matmul")
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        let out = self.val(*a).add(self.val(*b))?;
        self.record(Op::Add(*a, *b), out, "add")
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        let out = self.val(*a).sub(self.val(*b))?;
        self.record(Op::Sub(*a, *b), out, "sub")
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        let out = self.val(*a).mul(self.val(*b))?;
        self.record(Op::Mul(*a, *b), out, "mul")
    }

    fn scale(&mut self, a: &Var, c: f64) -> Result<Var, TensorError> {
        let out = self.val(*a).scale(c);
        self.record(Op::Scale(*a, c), out, "scale")
    }

    fn silu(&mut self, a: &Var) -> Result<Var, TensorError> {
        let out = self.val(*a).map(silu);
        self.record(Op::Silu(*a), out, "silu")
    }

    fn sum(&mut self, a: &Var) -> Result<Var, TensorError> {
        let out = Tensor::scalar(self.val(*a).sum());
        self.record(Op::Sum(*a), out, "sum")
    }

    fn mean_square(&mut self, a: &Var) -> Result<Var, TensorError> {
        let out = Tensor::scalar(self.val(*a).mean_square());
        self.record(Op::MeanSquare(*a), out, "mean_square")
    }

    fn exp(&mut self, a: &Var) -> Result<Var, TensorError> {
        let out = self.val(*a).map(f64::exp);
        self.record(Op::Exp(*a), out, "exp")
    }

    fn add_row(&mut self, a: &Var, row: &Var) -> Result<Var, TensorError> {
        let out = self.val(*a).add_row(self.val(*row))?;
        self.record(Op::AddRow(*a, *row), out, "add_row")
    }

    fn concat_cols(&mut self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        let out = self.val(*a).concat_cols(self.val(*b))?;
        self.record(Op::ConcatCols(*a, *b), out, "concat_cols")
    }

    fn concat_rows(&mut self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        let out = self.val(*a).concat_rows(self.val(*b))?;
        self.record(Op::ConcatRows(*a, *b), out, "concat_rows")
    }

    fn slice_rows(&mut self, a: &Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let out = self.val(*a).slice_rows(start, end)?;
        self.record(Op::SliceRows(*a, start), out, "slice_rows")
    }

    fn pairwise_sq_dist(&mut self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        let out = self.val(*a).pairwise_sq_dist(self.val(*b))?;
        self.record(Op::PairwiseSqDist(*a, *b), out, "pairwise_sq_dist")
    }
}
