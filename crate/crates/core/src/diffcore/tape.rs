//! Reverse-mode accumulation over a recorded graph of array operations.
//!
//! A [`Tape`] owns every intermediate value of one forward evaluation. Ops
//! append a node and hand back a [`Var`] handle; [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients for every node that depends on
//! a leaf created with [`Tape::leaf`].

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::array::gemm_into;
use super::{Array, Scalar};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an op defined outside the tape (fused losses, mixture
/// posteriors, lattice heads).
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradient for each input given the forward inputs, the forward output
    /// and the upstream gradient. `None` means "no contribution".
    fn backward(
        &self,
        inputs: &[&Array<T>],
        output: &Array<T>,
        grad: &Array<T>,
    ) -> Vec<Option<Array<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        b_t: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Tanh(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        a: Var,
        rstd: Vec<T>,
    },
    L2NormRows {
        a: Var,
        norms: Vec<T>,
    },
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    SumCols(Var),
    SliceRows {
        a: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    Transpose(Var),
    Reshape(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    value: Array<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph for one forward/backward evaluation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    checked: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Array<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Array<T>, b: &Array<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn acc<'g, T: Scalar>(
    grads: &'g mut [Option<Array<T>>],
    v: Var,
    shape: &[usize],
) -> &'g mut Array<T> {
    grads[v.0].get_or_insert_with(|| Array::zeros(shape))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: false,
        }
    }

    /// A tape that rejects non-finite values at every op boundary.
    pub fn checked() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Array<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array<T>) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Array<T>) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Copy of `a` cut out of the graph.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).clone();
        self.push("detach", value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = Array::zeros(&[m, n]);
        gemm_into(
            m,
            k,
            n,
            av.data(),
            false,
            bv.data(),
            false,
            out.data_mut(),
            false,
        );
        let rg = self.rg(&[a, b]);
        self.push("matmul", out, Op::MatMul { a, b, b_t: false }, rg)
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n, k2) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 {
            return Err(shape_err(
                "matmul_nt",
                format!("{:?} x {:?}^T", av.shape(), bv.shape()),
            ));
        }
        let mut out = Array::zeros(&[m, n]);
        gemm_into(
            m,
            k,
            n,
            av.data(),
            false,
            bv.data(),
            true,
            out.data_mut(),
            false,
        );
        let rg = self.rg(&[a, b]);
        self.push("matmul_nt", out, Op::MatMul { a, b, b_t: true }, rg)
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Array::new(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(name, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn row_broadcast(&mut self, name: &'static str, a: Var, r: Var, mul: bool) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(r));
        let c = av.cols();
        if rv.len() != c {
            return Err(shape_err(
                name,
                format!("{:?} with row {:?}", av.shape(), rv.shape()),
            ));
        }
        let mut out = av.clone();
        let row = rv.data();
        for chunk in out.data_mut().chunks_mut(c) {
            for (x, &y) in chunk.iter_mut().zip(row) {
                if mul {
                    *x *= y;
                } else {
                    *x += y;
                }
            }
        }
        let rg = self.rg(&[a, r]);
        let op = if mul {
            Op::MulRow(a, r)
        } else {
            Op::AddRow(a, r)
        };
        self.push(name, out, op, rg)
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, r, false)
    }

    /// Multiplies every row of `a` element-wise by a length-`cols` vector.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, r, true)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push("scale", out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push("add_scalar", out, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(name, out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, |x| x.ln(), Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push("softmax_rows", out, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(&[a]);
        self.push("log_softmax_rows", out, Op::LogSoftmaxRows(a), rg)
    }

    /// Per-row standardisation (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Result<Var> {
        let mut out = self.value(a).clone();
        let c = out.cols();
        let inv_c = T::one() / T::of(c as f64);
        let mut rstd = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_c;
            let r = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * r);
            rstd.push(r);
        }
        let rg = self.rg(&[a]);
        self.push("layer_norm_rows", out, Op::LayerNorm { a, rstd }, rg)
    }

    /// Scales every row to unit Euclidean norm, `x / sqrt(|x|^2 + eps)`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: T) -> Result<Var> {
        let mut out = self.value(a).clone();
        let c = out.cols();
        let mut norms = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(c) {
            let n = (row.iter().map(|&x| x * x).sum::<T>() + eps).sqrt();
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        self.push("l2_normalize_rows", out, Op::L2NormRows { a, norms }, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let out = Array::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push("sum_all", out, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(shape_err("mean_all", "empty input"));
        }
        let out = Array::scalar(av.sum() / T::of(av.len() as f64));
        let rg = self.rg(&[a]);
        self.push("mean_all", out, Op::MeanAll(a), rg)
    }

    /// Reduces the column axis: `rows x cols -> rows x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        let data: Vec<T> = av
            .data()
            .chunks(c)
            .map(|r| r.iter().copied().sum())
            .collect();
        let out = Array::new(&[av.rows(), 1], data)?;
        let rg = self.rg(&[a]);
        self.push("sum_rows", out, Op::SumRows(a), rg)
    }

    /// Reduces the row axis: `rows x cols -> 1 x cols`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        let mut data = vec![T::zero(); c];
        for r in av.data().chunks(c) {
            for (d, &x) in data.iter_mut().zip(r) {
                *d += x;
            }
        }
        let out = Array::new(&[1, c], data)?;
        let rg = self.rg(&[a]);
        self.push("sum_cols", out, Op::SumCols(a), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        if start + len > av.rows() {
            return Err(shape_err(
                "slice_rows",
                format!("rows {}..{} of {:?}", start, start + len, av.shape()),
            ));
        }
        let out = Array::new(&[len, c], av.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(&[a]);
        self.push("slice_rows", out, Op::SliceRows { a, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_rows", "no inputs"));
        };
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(shape_err(
                    "concat_rows",
                    format!("column count {} vs {}", pv.cols(), c),
                ));
            }
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let out = Array::new(&[rows, c], data)?;
        let rg = self.rg(parts);
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Row `r` of the output is row `idx[r]` of `a`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (rows, c) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(shape_err("gather_rows", format!("row {} of {}", i, rows)));
            }
            data.extend_from_slice(&av.data()[i * c..(i + 1) * c]);
        }
        let out = Array::new(&[idx.len(), c], data)?;
        let rg = self.rg(&[a]);
        self.push(
            "gather_rows",
            out,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push("transpose", out, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push("reshape", out, Op::Reshape(a), rg)
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Array<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        let name = op.name();
        let rg = self.rg(inputs);
        self.push(
            name,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// depends on a leaf.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if self.checked && !g.all_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let live = |v: Var| self.nodes[v.0].requires_grad;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, b_t } => {
                let (av, bv) = (val(a), val(b));
                let (m, k) = (av.rows(), av.cols());
                let n = y.cols();
                if live(a) {
                    let ga = acc(grads, a, av.shape());
                    // dA = G * B^T (b: k x n) or G * B (b: n x k)
                    gemm_into(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        bv.data(),
                        !b_t,
                        ga.data_mut(),
                        true,
                    );
                }
                if live(b) {
                    let gb = acc(grads, b, bv.shape());
                    if b_t {
                        gemm_into(
                            n,
                            m,
                            k,
                            g.data(),
                            true,
                            av.data(),
                            false,
                            gb.data_mut(),
                            true,
                        );
                    } else {
                        gemm_into(
                            k,
                            m,
                            n,
                            av.data(),
                            true,
                            g.data(),
                            false,
                            gb.data_mut(),
                            true,
                        );
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if live(v) {
                        axpy(acc(grads, v, g.shape()), T::one(), g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if live(a) {
                    axpy(acc(grads, a, g.shape()), T::one(), g);
                }
                if live(b) {
                    axpy(acc(grads, b, g.shape()), -T::one(), g);
                }
            }
            &Op::Mul(a, b) => {
                if live(a) {
                    let bv = val(b);
                    zip_acc(acc(grads, a, g.shape()), g, bv, |g, x| g * x);
                }
                if live(b) {
                    let av = val(a);
                    zip_acc(acc(grads, b, g.shape()), g, av, |g, x| g * x);
                }
            }
            &Op::Div(a, b) => {
                let bv = val(b);
                if live(a) {
                    zip_acc(acc(grads, a, g.shape()), g, bv, |g, d| g / d);
                }
                if live(b) {
                    // d(a/b)/db = -y/b
                    let gb = acc(grads, b, g.shape());
                    for ((o, &gi), (&yi, &bi)) in gb
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(y.data().iter().zip(bv.data()))
                    {
                        *o -= gi * yi / bi;
                    }
                }
            }
            &Op::AddRow(a, r) => {
                if live(a) {
                    axpy(acc(grads, a, g.shape()), T::one(), g);
                }
                if live(r) {
                    let rv = val(r);
                    let gr = acc(grads, r, rv.shape());
                    for chunk in g.data().chunks(g.cols()) {
                        for (o, &x) in gr.data_mut().iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                }
            }
            &Op::MulRow(a, r) => {
                let (av, rv) = (val(a), val(r));
                let c = av.cols();
                if live(a) {
                    let ga = acc(grads, a, av.shape());
                    for (go, gi) in ga.data_mut().chunks_mut(c).zip(g.data().chunks(c)) {
                        for ((o, &x), &s) in go.iter_mut().zip(gi).zip(rv.data()) {
                            *o += x * s;
                        }
                    }
                }
                if live(r) {
                    let gr = acc(grads, r, rv.shape());
                    for (gi, ai) in g.data().chunks(c).zip(av.data().chunks(c)) {
                        for ((o, &x), &s) in gr.data_mut().iter_mut().zip(gi).zip(ai) {
                            *o += x * s;
                        }
                    }
                }
            }
            &Op::Scale(a, s) => {
                if live(a) {
                    axpy(acc(grads, a, g.shape()), s, g);
                }
            }
            &Op::AddScalar(a) => {
                if live(a) {
                    axpy(acc(grads, a, g.shape()), T::one(), g);
                }
            }
            &Op::Sigmoid(a) => {
                zip_acc(acc(grads, a, g.shape()), g, y, |g, s| {
                    g * s * (T::one() - s)
                });
            }
            &Op::Exp(a) => {
                zip_acc(acc(grads, a, g.shape()), g, y, |g, e| g * e);
            }
            &Op::Log(a) => {
                let av = val(a);
                zip_acc(acc(grads, a, g.shape()), g, av, |g, x| g / x);
            }
            &Op::Relu(a) => {
                let av = val(a);
                zip_acc(acc(grads, a, g.shape()), g, av, |g, x| {
                    if x > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                });
            }
            &Op::Tanh(a) => {
                zip_acc(acc(grads, a, g.shape()), g, y, |g, t| {
                    g * (T::one() - t * t)
                });
            }
            &Op::Square(a) => {
                let av = val(a);
                let two = T::of(2.0);
                zip_acc(acc(grads, a, g.shape()), g, av, |g, x| two * g * x);
            }
            &Op::SoftmaxRows(a) => {
                let c = y.cols();
                let ga = acc(grads, a, g.shape());
                for ((go, gi), yi) in ga
                    .data_mut()
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(y.data().chunks(c))
                {
                    let dot: T = gi.iter().zip(yi).map(|(&a, &b)| a * b).sum();
                    for ((o, &gg), &yy) in go.iter_mut().zip(gi).zip(yi) {
                        *o += yy * (gg - dot);
                    }
                }
            }
            &Op::LogSoftmaxRows(a) => {
                let c = y.cols();
                let ga = acc(grads, a, g.shape());
                for ((go, gi), yi) in ga
                    .data_mut()
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(y.data().chunks(c))
                {
                    let total: T = gi.iter().copied().sum();
                    for ((o, &gg), &yy) in go.iter_mut().zip(gi).zip(yi) {
                        *o += gg - yy.exp() * total;
                    }
                }
            }
            Op::LayerNorm { a, rstd } => {
                let c = y.cols();
                let inv_c = T::one() / T::of(c as f64);
                let ga = acc(grads, *a, g.shape());
                for (((go, gi), yi), &r) in ga
                    .data_mut()
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(y.data().chunks(c))
                    .zip(rstd)
                {
                    let mg = gi.iter().copied().sum::<T>() * inv_c;
                    let mgy = gi.iter().zip(yi).map(|(&a, &b)| a * b).sum::<T>() * inv_c;
                    for ((o, &gg), &yy) in go.iter_mut().zip(gi).zip(yi) {
                        *o += r * (gg - mg - yy * mgy);
                    }
                }
            }
            Op::L2NormRows { a, norms } => {
                let c = y.cols();
                let ga = acc(grads, *a, g.shape());
                for (((go, gi), yi), &n) in ga
                    .data_mut()
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(y.data().chunks(c))
                    .zip(norms)
                {
                    let dot: T = gi.iter().zip(yi).map(|(&a, &b)| a * b).sum();
                    for ((o, &gg), &yy) in go.iter_mut().zip(gi).zip(yi) {
                        *o += (gg - yy * dot) / n;
                    }
                }
            }
            &Op::SumAll(a) => {
                let gv = g.item();
                let ga = acc(grads, a, val(a).shape());
                ga.data_mut().iter_mut().for_each(|o| *o += gv);
            }
            &Op::MeanAll(a) => {
                let av = val(a);
                let gv = g.item() / T::of(av.len() as f64);
                let ga = acc(grads, a, av.shape());
                ga.data_mut().iter_mut().for_each(|o| *o += gv);
            }
            &Op::SumRows(a) => {
                let av = val(a);
                let c = av.cols();
                let ga = acc(grads, a, av.shape());
                for (go, &gg) in ga.data_mut().chunks_mut(c).zip(g.data()) {
                    go.iter_mut().for_each(|o| *o += gg);
                }
            }
            &Op::SumCols(a) => {
                let av = val(a);
                let c = av.cols();
                let ga = acc(grads, a, av.shape());
                for go in ga.data_mut().chunks_mut(c) {
                    for (o, &gg) in go.iter_mut().zip(g.data()) {
                        *o += gg;
                    }
                }
            }
            &Op::SliceRows { a, start } => {
                let av = val(a);
                let c = av.cols();
                let ga = acc(grads, a, av.shape());
                for (o, &x) in ga.data_mut()[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g.data())
                {
                    *o += x;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = val(p);
                    let n = pv.len();
                    if live(p) {
                        let gp = acc(grads, p, pv.shape());
                        for (o, &x) in gp.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *o += x;
                        }
                    }
                    off += n;
                }
            }
            Op::GatherRows { a, idx } => {
                let av = val(*a);
                let c = av.cols();
                let ga = acc(grads, *a, av.shape());
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g.data()[r * c..(r + 1) * c];
                    for (o, &x) in ga.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                        *o += x;
                    }
                }
            }
            &Op::Transpose(a) => {
                let gt = g.transpose();
                axpy(acc(grads, a, val(a).shape()), T::one(), &gt);
            }
            &Op::Reshape(a) => {
                let ga = acc(grads, a, val(a).shape());
                for (o, &x) in ga.data_mut().iter_mut().zip(g.data()) {
                    *o += x;
                }
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Array<T>> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&ins, y, g);
                for (&v, gv) in inputs.iter().zip(gs) {
                    if let (true, Some(gv)) = (live(v), gv) {
                        let gi = acc(grads, v, val(v).shape());
                        for (o, &x) in gi.data_mut().iter_mut().zip(gv.data()) {
                            *o += x;
                        }
                    }
                }
            }
        }
    }
}

fn axpy<T: Scalar>(dst: &mut Array<T>, s: T, src: &Array<T>) {
    for (o, &x) in dst.data_mut().iter_mut().zip(src.data()) {
        *o += s * x;
    }
}

fn zip_acc<T: Scalar>(dst: &mut Array<T>, g: &Array<T>, other: &Array<T>, f: impl Fn(T, T) -> T) {
    for ((o, &gg), &x) in dst.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
        *o += f(gg, x);
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}
