//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Operations executed through [`Tensor`] methods are recorded on a [`Tape`]
//! in execution order; [`Tape::backward`] replays them in reverse and fills
//! the `grad` buffer of every `requires_grad` tensor reachable from the
//! loss. One tape is built per training step and dropped afterwards.

mod grad_check;

pub use grad_check::{grad_check, DEFAULT_GRAD_CHECK_EPS};

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Recording tape. Cloning is cheap (shared handle).
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a tape.
pub struct Tensor<T: Scalar> {
    tape: Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
    data: Vec<Vec<T>>,
    grads: Vec<Vec<T>>,
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<T>,
}

enum Op<T: Scalar> {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Neg { a: usize },
    Recip { a: usize },
    Scale { a: usize, c: T },
    AddScalar { a: usize },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Sum { a: usize },
    ConcatCols { a: usize, b: usize },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    AddRow { a: usize, row: usize },
    MulRow { a: usize, row: usize },
    GatherRows { a: usize, ids: Vec<usize> },
    PairwiseSqDist { a: usize, b: usize },
    SoftmaxXent {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Neg { .. } => "neg",
            Op::Recip { .. } => "recip",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Sum { .. } => "sum",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::GatherRows { .. } => "gather_rows",
            Op::PairwiseSqDist { .. } => "pairwise_sqdist",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
        }
    }
}

// ── shared forward kernels ───────────────────────────────────────────

/// C[m,n] += A[m,k] · B[k,n]. `out` must be zeroed by the caller.
pub(crate) fn matmul_into<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + a_ip * b_pj;
            }
        }
    }
}

pub(crate) fn sigmoid_val<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn dims2(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

// ── tape construction ────────────────────────────────────────────────

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                data: Vec::new(),
                grads: Vec::new(),
            })),
        }
    }

    /// Records a leaf tensor. The only entry point for external values.
    pub fn leaf(&self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "leaf shape {:?} inconsistent with {} data values",
                shape,
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    pub fn param(&self, shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        self.leaf(shape, data, true)
    }

    pub fn constant(&self, shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&self, v: T) -> Tensor<T> {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        self.push(shape.to_vec(), vec![T::zero(); numel], false, Op::Leaf)
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn push(&self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>) -> Tensor<T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            requires_grad,
            op,
        });
        inner.data.push(data);
        inner.grads.push(Vec::new());
        Tensor {
            tape: self.clone(),
            id,
        }
    }

    /// Backpropagates from `loss`, resetting all gradients first.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        self.backward_impl(loss, true)
    }

    /// Backpropagates without resetting: gradients from prior calls
    /// accumulate (including interior nodes).
    pub fn backward_accumulate(&self, loss: &Tensor<T>) -> Result<()> {
        self.backward_impl(loss, false)
    }

    fn backward_impl(&self, loss: &Tensor<T>, reset: bool) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &loss.tape.inner) {
            return Err(Error::contract("loss tensor belongs to a different tape"));
        }
        let mut inner = self.inner.borrow_mut();
        let inner = &mut *inner;
        let lid = loss.id;
        if inner.data[lid].len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                inner.nodes[lid].shape
            )));
        }
        for id in 0..=lid {
            let n = inner.data[id].len();
            let g = &mut inner.grads[id];
            if reset || g.len() != n {
                g.clear();
                g.resize(n, T::zero());
            }
        }
        inner.grads[lid][0] += T::one();

        for id in (0..=lid).rev() {
            if !inner.nodes[id].requires_grad {
                continue;
            }
            backward_node(inner, id)?;
        }
        Ok(())
    }
}

/// Propagates node `id`'s gradient into its inputs, then checks the
/// touched buffers for non-finite values.
fn backward_node<T: Scalar>(inner: &mut TapeInner<T>, id: usize) -> Result<()> {
    let TapeInner { nodes, data, grads } = inner;
    let node = &nodes[id];
    // Inputs always precede their results on the tape.
    let (lower, upper) = grads.split_at_mut(id);
    let g_out: &[T] = &upper[0];
    let mut touched: [Option<usize>; 2] = [None, None];
    let mut touch = |i: usize| {
        if touched[0] != Some(i) {
            if touched[0].is_none() {
                touched[0] = Some(i);
            } else if touched[1] != Some(i) {
                touched[1] = Some(i);
            }
        }
    };

    match &node.op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = dims2(&nodes[*a].shape).expect("matmul lhs recorded 2-d");
            let n = nodes[*b].shape[1];
            if nodes[*a].requires_grad {
                // dA += dC · Bᵀ
                let bv = &data[*b];
                let ga = &mut lower[*a];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc += g_out[i * n + j] * bv[p * n + j];
                        }
                        ga[i * k + p] += acc;
                    }
                }
                touch(*a);
            }
            if nodes[*b].requires_grad {
                // dB += Aᵀ · dC
                let av = &data[*a];
                let gb = &mut lower[*b];
                for p in 0..k {
                    for i in 0..m {
                        let a_ip = av[i * k + p];
                        for j in 0..n {
                            gb[p * n + j] += a_ip * g_out[i * n + j];
                        }
                    }
                }
                touch(*b);
            }
        }
        Op::Add { a, b } => {
            if nodes[*a].requires_grad {
                for (g, &go) in lower[*a].iter_mut().zip(g_out) {
                    *g += go;
                }
                touch(*a);
            }
            if nodes[*b].requires_grad {
                for (g, &go) in lower[*b].iter_mut().zip(g_out) {
                    *g += go;
                }
                touch(*b);
            }
        }
        Op::Sub { a, b } => {
            if nodes[*a].requires_grad {
                for (g, &go) in lower[*a].iter_mut().zip(g_out) {
                    *g += go;
                }
                touch(*a);
            }
            if nodes[*b].requires_grad {
                for (g, &go) in lower[*b].iter_mut().zip(g_out) {
                    *g -= go;
                }
                touch(*b);
            }
        }
        Op::Mul { a, b } => {
            if nodes[*a].requires_grad {
                let bv = &data[*b];
                for ((g, &go), &x) in lower[*a].iter_mut().zip(g_out).zip(bv) {
                    *g += go * x;
                }
                touch(*a);
            }
            if nodes[*b].requires_grad {
                let av = &data[*a];
                for ((g, &go), &x) in lower[*b].iter_mut().zip(g_out).zip(av) {
                    *g += go * x;
                }
                touch(*b);
            }
        }
        Op::Neg { a } => {
            for (g, &go) in lower[*a].iter_mut().zip(g_out) {
                *g -= go;
            }
            touch(*a);
        }
        Op::Recip { a } => {
            let av = &data[*a];
            for ((g, &go), &x) in lower[*a].iter_mut().zip(g_out).zip(av) {
                *g -= go / (x * x);
            }
            touch(*a);
        }
        Op::Scale { a, c } => {
            for (g, &go) in lower[*a].iter_mut().zip(g_out) {
                *g += go * *c;
            }
            touch(*a);
        }
        Op::AddScalar { a } => {
            for (g, &go) in lower[*a].iter_mut().zip(g_out) {
                *g += go;
            }
            touch(*a);
        }
        Op::Sigmoid { a } => {
            let yv = &data[id];
            for ((g, &go), &y) in lower[*a].iter_mut().zip(g_out).zip(yv) {
                *g += go * y * (T::one() - y);
            }
            touch(*a);
        }
        Op::Tanh { a } => {
            let yv = &data[id];
            for ((g, &go), &y) in lower[*a].iter_mut().zip(g_out).zip(yv) {
                *g += go * (T::one() - y * y);
            }
            touch(*a);
        }
        Op::Exp { a } => {
            let yv = &data[id];
            for ((g, &go), &y) in lower[*a].iter_mut().zip(g_out).zip(yv) {
                *g += go * y;
            }
            touch(*a);
        }
        Op::Log { a } => {
            let av = &data[*a];
            for ((g, &go), &x) in lower[*a].iter_mut().zip(g_out).zip(av) {
                *g += go / x;
            }
            touch(*a);
        }
        Op::Sum { a } => {
            let go = g_out[0];
            for g in lower[*a].iter_mut() {
                *g += go;
            }
            touch(*a);
        }
        Op::ConcatCols { a, b } => {
            let (r, ca) = dims2(&nodes[*a].shape).expect("concat lhs recorded 2-d");
            let cb = nodes[*b].shape[1];
            let cout = ca + cb;
            if nodes[*a].requires_grad {
                let ga = &mut lower[*a];
                for i in 0..r {
                    for j in 0..ca {
                        ga[i * ca + j] += g_out[i * cout + j];
                    }
                }
                touch(*a);
            }
            if nodes[*b].requires_grad {
                let gb = &mut lower[*b];
                for i in 0..r {
                    for j in 0..cb {
                        gb[i * cb + j] += g_out[i * cout + ca + j];
                    }
                }
                touch(*b);
            }
        }
        Op::SliceRows { a, start } => {
            let c = nodes[*a].shape[1];
            let rows = nodes[id].shape[0];
            let ga = &mut lower[*a];
            for i in 0..rows {
                for j in 0..c {
                    ga[(start + i) * c + j] += g_out[i * c + j];
                }
            }
            touch(*a);
        }
        Op::SliceCols { a, start } => {
            let (r, c) = dims2(&nodes[*a].shape).expect("slice input recorded 2-d");
            let w = nodes[id].shape[1];
            let ga = &mut lower[*a];
            for i in 0..r {
                for j in 0..w {
                    ga[i * c + start + j] += g_out[i * w + j];
                }
            }
            touch(*a);
        }
        Op::AddRow { a, row } => {
            let (r, c) = dims2(&nodes[id].shape).expect("add_row recorded 2-d");
            if nodes[*a].requires_grad {
                for (g, &go) in lower[*a].iter_mut().zip(g_out) {
                    *g += go;
                }
                touch(*a);
            }
            if nodes[*row].requires_grad {
                let gr = &mut lower[*row];
                for i in 0..r {
                    for j in 0..c {
                        gr[j] += g_out[i * c + j];
                    }
                }
                touch(*row);
            }
        }
        Op::MulRow { a, row } => {
            let (r, c) = dims2(&nodes[id].shape).expect("mul_row recorded 2-d");
            if nodes[*a].requires_grad {
                let rv = &data[*row];
                let ga = &mut lower[*a];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g_out[i * c + j] * rv[j];
                    }
                }
                touch(*a);
            }
            if nodes[*row].requires_grad {
                let av = &data[*a];
                let gr = &mut lower[*row];
                for i in 0..r {
                    for j in 0..c {
                        gr[j] += g_out[i * c + j] * av[i * c + j];
                    }
                }
                touch(*row);
            }
        }
        Op::GatherRows { a, ids } => {
            let c = nodes[*a].shape[1];
            let ga = &mut lower[*a];
            for (pos, &src) in ids.iter().enumerate() {
                for j in 0..c {
                    ga[src * c + j] += g_out[pos * c + j];
                }
            }
            touch(*a);
        }
        Op::PairwiseSqDist { a, b } => {
            let (n, d) = dims2(&nodes[*a].shape).expect("sqdist lhs recorded 2-d");
            let m = nodes[*b].shape[0];
            let two = T::of_f64(2.0);
            if nodes[*a].requires_grad {
                let av = data[*a].clone();
                let bv = &data[*b];
                let ga = &mut lower[*a];
                for i in 0..n {
                    for j in 0..m {
                        let go = g_out[i * m + j] * two;
                        if go == T::zero() {
                            continue;
                        }
                        for k in 0..d {
                            ga[i * d + k] += go * (av[i * d + k] - bv[j * d + k]);
                        }
                    }
                }
                touch(*a);
            }
            if nodes[*b].requires_grad {
                let av = &data[*a];
                let bv = data[*b].clone();
                let gb = &mut lower[*b];
                for i in 0..n {
                    for j in 0..m {
                        let go = g_out[i * m + j] * two;
                        if go == T::zero() {
                            continue;
                        }
                        for k in 0..d {
                            gb[j * d + k] -= go * (av[i * d + k] - bv[j * d + k]);
                        }
                    }
                }
                touch(*b);
            }
        }
        Op::SoftmaxXent {
            logits,
            targets,
            mask,
            probs,
        } => {
            let v = nodes[*logits].shape[1];
            let go = g_out[0];
            let gl = &mut lower[*logits];
            for (i, (&t, &live)) in targets.iter().zip(mask.iter()).enumerate() {
                if !live {
                    continue;
                }
                for j in 0..v {
                    let indicator = if j == t { T::one() } else { T::zero() };
                    gl[i * v + j] += go * (probs[i * v + j] - indicator);
                }
            }
            touch(*logits);
        }
    }

    let op_name = nodes[id].op.name();
    for slot in touched.iter().flatten() {
        if lower[*slot].iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric {
                op: op_name.to_string(),
                detail: "non-finite gradient during backward".to_string(),
            });
        }
    }
    Ok(())
}

// ── tensor accessors ─────────────────────────────────────────────────

impl<T: Scalar> Tensor<T> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().data[self.id].len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn data(&self) -> Vec<T> {
        self.tape.inner.borrow().data[self.id].clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        let inner = self.tape.inner.borrow();
        if inner.data[self.id].len() != 1 {
            return Err(Error::contract(format!(
                "item() on non-scalar tensor of shape {:?}",
                inner.nodes[self.id].shape
            )));
        }
        Ok(inner.data[self.id][0])
    }

    /// Gradient buffer, if backward has populated it.
    pub fn grad(&self) -> Option<Vec<T>> {
        let inner = self.tape.inner.borrow();
        let g = &inner.grads[self.id];
        if g.is_empty() {
            None
        } else {
            Some(g.clone())
        }
    }

    /// Errors if any stored value is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        let inner = self.tape.inner.borrow();
        if inner.data[self.id].iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: inner.nodes[self.id].op.name().to_string(),
                detail: context.to_string(),
            });
        }
        Ok(())
    }

    fn with_inner<R>(&self, f: impl FnOnce(&TapeInner<T>) -> R) -> R {
        f(&self.tape.inner.borrow())
    }

    fn same_tape(&self, other: &Tensor<T>) -> Result<()> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(Error::contract("operands recorded on different tapes"))
        }
    }
}

// ── recorded operations ──────────────────────────────────────────────

impl<T: Scalar> Tensor<T> {
    /// Standard matrix product of two 2-d tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_tape(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        let ((m, k), (k2, n)) = match (dims2(&sa), dims2(&sb)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = self.with_inner(|inner| {
            let mut out = vec![T::zero(); m * n];
            matmul_into(&inner.data[self.id], &inner.data[other.id], m, k, n, &mut out);
            out
        });
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            vec![m, n],
            out,
            rg,
            Op::Matmul {
                a: self.id,
                b: other.id,
            },
        ))
    }

    fn elementwise(
        &self,
        other: &Tensor<T>,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(usize, usize) -> Op<T>,
    ) -> Result<Tensor<T>> {
        self.same_tape(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: sa,
                rhs: sb,
            });
        }
        let out = self.with_inner(|inner| {
            inner.data[self.id]
                .iter()
                .zip(&inner.data[other.id])
                .map(|(&x, &y)| f(x, y))
                .collect::<Vec<T>>()
        });
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(sa, out, rg, op(self.id, other.id)))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(other, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(other, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.elementwise(other, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn unary(&self, f: impl Fn(T) -> T, op: Op<T>) -> Tensor<T> {
        let (shape, out) = self.with_inner(|inner| {
            (
                inner.nodes[self.id].shape.clone(),
                inner.data[self.id].iter().map(|&x| f(x)).collect::<Vec<T>>(),
            )
        });
        self.tape.push(shape, out, self.requires_grad(), op)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(|x| -x, Op::Neg { a: self.id })
    }

    pub fn recip(&self) -> Tensor<T> {
        self.unary(|x| T::one() / x, Op::Recip { a: self.id })
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        self.unary(|x| x * c, Op::Scale { a: self.id, c })
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.unary(|x| x + c, Op::AddScalar { a: self.id })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(sigmoid_val, Op::Sigmoid { a: self.id })
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(|x| x.tanh(), Op::Tanh { a: self.id })
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|x| x.exp(), Op::Exp { a: self.id })
    }

    pub fn log(&self) -> Tensor<T> {
        self.unary(|x| x.ln(), Op::Log { a: self.id })
    }

    /// Reduction of all elements to a one-element tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total = self.with_inner(|inner| {
            let mut acc = T::zero();
            for &v in &inner.data[self.id] {
                acc += v;
            }
            acc
        });
        self.tape
            .push(vec![1], vec![total], self.requires_grad(), Op::Sum { a: self.id })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        self.sum().scale(T::one() / T::of_f64(n as f64))
    }

    /// Concatenates two matrices with equal row counts along the column axis.
    pub fn concat_cols(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_tape(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        let ((r, ca), (r2, cb)) = match (dims2(&sa), dims2(&sb)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        if r != r2 {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = self.with_inner(|inner| {
            let (av, bv) = (&inner.data[self.id], &inner.data[other.id]);
            let mut out = Vec::with_capacity(r * (ca + cb));
            for i in 0..r {
                out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
                out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
            }
            out
        });
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            vec![r, ca + cb],
            out,
            rg,
            Op::ConcatCols {
                a: self.id,
                b: other.id,
            },
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        let (r, c) = dims2(&s).ok_or(Error::ShapeMismatch {
            op: "slice_rows",
            lhs: s.clone(),
            rhs: vec![],
        })?;
        if len == 0 || start + len > r {
            return Err(Error::Index {
                index: start + len,
                len: r,
            });
        }
        let out =
            self.with_inner(|inner| inner.data[self.id][start * c..(start + len) * c].to_vec());
        Ok(self.tape.push(
            vec![len, c],
            out,
            self.requires_grad(),
            Op::SliceRows { a: self.id, start },
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        let (r, c) = dims2(&s).ok_or(Error::ShapeMismatch {
            op: "slice_cols",
            lhs: s.clone(),
            rhs: vec![],
        })?;
        if len == 0 || start + len > c {
            return Err(Error::Index {
                index: start + len,
                len: c,
            });
        }
        let out = self.with_inner(|inner| {
            let v = &inner.data[self.id];
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&v[i * c + start..i * c + start + len]);
            }
            out
        });
        Ok(self.tape.push(
            vec![r, len],
            out,
            self.requires_grad(),
            Op::SliceCols { a: self.id, start },
        ))
    }

    /// Adds a length-c row vector to every row of an r×c matrix.
    pub fn add_row(&self, row: &Tensor<T>) -> Result<Tensor<T>> {
        self.broadcast_row(row, "add_row", |x, y| x + y, |a, r| Op::AddRow { a, row: r })
    }

    /// Multiplies every row of an r×c matrix elementwise by a length-c row.
    pub fn mul_row(&self, row: &Tensor<T>) -> Result<Tensor<T>> {
        self.broadcast_row(row, "mul_row", |x, y| x * y, |a, r| Op::MulRow { a, row: r })
    }

    fn broadcast_row(
        &self,
        row: &Tensor<T>,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(usize, usize) -> Op<T>,
    ) -> Result<Tensor<T>> {
        self.same_tape(row)?;
        let (sa, sr) = (self.shape(), row.shape());
        let ok = matches!((dims2(&sa), sr.as_slice()), (Some((_, c)), [c2]) if c == *c2);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: sa,
                rhs: sr,
            });
        }
        let (r, c) = dims2(&sa).expect("checked 2-d above");
        let out = self.with_inner(|inner| {
            let (av, rv) = (&inner.data[self.id], &inner.data[row.id]);
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    out.push(f(av[i * c + j], rv[j]));
                }
            }
            out
        });
        let rg = self.requires_grad() || row.requires_grad();
        Ok(self.tape.push(vec![r, c], out, rg, op(self.id, row.id)))
    }

    /// Selects rows by index (repeats allowed); the embedding lookup.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let s = self.shape();
        let (r, c) = dims2(&s).ok_or(Error::ShapeMismatch {
            op: "gather_rows",
            lhs: s.clone(),
            rhs: vec![],
        })?;
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Index { index: bad, len: r });
        }
        let out = self.with_inner(|inner| {
            let v = &inner.data[self.id];
            let mut out = Vec::with_capacity(ids.len() * c);
            for &i in ids {
                out.extend_from_slice(&v[i * c..(i + 1) * c]);
            }
            out
        });
        Ok(self.tape.push(
            vec![ids.len(), c],
            out,
            self.requires_grad(),
            Op::GatherRows {
                a: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// D[i,j] = ‖aᵢ − bⱼ‖² for row sets a (n×d) and b (m×d).
    pub fn pairwise_sqdist(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_tape(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        let ((n, d), (m, d2)) = match (dims2(&sa), dims2(&sb)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "pairwise_sqdist",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        if d != d2 {
            return Err(Error::ShapeMismatch {
                op: "pairwise_sqdist",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = self.with_inner(|inner| {
            let (av, bv) = (&inner.data[self.id], &inner.data[other.id]);
            let mut out = vec![T::zero(); n * m];
            for i in 0..n {
                for j in 0..m {
                    let mut acc = T::zero();
                    for k in 0..d {
                        let diff = av[i * d + k] - bv[j * d + k];
                        acc += diff * diff;
                    }
                    out[i * m + j] = acc;
                }
            }
            out
        });
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            vec![n, m],
            out,
            rg,
            Op::PairwiseSqDist {
                a: self.id,
                b: other.id,
            },
        ))
    }

    /// Fused softmax + cross-entropy over the rows of a b×v logit matrix,
    /// using the log-sum-exp trick. Returns the sum of per-row negative
    /// log-likelihoods over rows where `mask` is true.
    pub fn softmax_cross_entropy(&self, targets: &[usize], mask: &[bool]) -> Result<Tensor<T>> {
        let s = self.shape();
        let (b, v) = dims2(&s).ok_or(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: s.clone(),
            rhs: vec![],
        })?;
        if targets.len() != b || mask.len() != b {
            return Err(Error::contract(format!(
                "softmax_cross_entropy: {} logit rows but {} targets / {} mask entries",
                b,
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::VocabId { id: bad, vocab: v });
        }
        let (total, probs) = self.with_inner(|inner| {
            let lv = &inner.data[self.id];
            let mut probs = vec![T::zero(); b * v];
            let mut total = T::zero();
            for i in 0..b {
                let row = &lv[i * v..(i + 1) * v];
                let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let mut denom = T::zero();
                for &x in row {
                    denom += (x - mx).exp();
                }
                let lse = mx + denom.ln();
                for (j, &x) in row.iter().enumerate() {
                    probs[i * v + j] = (x - lse).exp();
                }
                if mask[i] {
                    total += lse - row[targets[i]];
                }
            }
            (total, probs)
        });
        Ok(self.tape.push(
            vec![1],
            vec![total],
            self.requires_grad(),
            Op::SoftmaxXent {
                logits: self.id,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tape64() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn matmul_shape_contract() {
        let t = tape64();
        let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(&[3, 4], vec![0.0; 12]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().shape(), vec![2, 4]);
    }

    #[test]
    fn matmul_identity() {
        let t = tape64();
        let a = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&eye).unwrap().data(), a.data());
    }

    #[test]
    fn matmul_hand_value() {
        // [[1,2],[3,4]] · [[1],[1]] = [[3],[7]]
        let t = tape64();
        let a = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.constant(&[2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let t = tape64();
        let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(&[4, 2], vec![0.0; 8]).unwrap();
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn backward_bilinear_form() {
        // loss = sum(x ⊙ y) ⇒ ∂loss/∂x = y
        let t = tape64();
        let x = t.param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = t.constant(&[3], vec![5.0, -1.0, 0.5]).unwrap();
        let loss = x.mul(&y).unwrap().sum();
        t.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0, -1.0, 0.5]);
    }

    #[test]
    fn backward_sigmoid_at_zero() {
        let t = tape64();
        let w = t.param(&[1], vec![0.0]).unwrap();
        let loss = w.sigmoid().sum();
        t.backward(&loss).unwrap();
        assert!((w.grad().unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_fan_in_accumulates() {
        let t = tape64();
        let x = t.param(&[1], vec![3.0]).unwrap();
        let loss = x.add(&x).unwrap().sum();
        t.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let t = tape64();
        let x = t.param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(2.0);
        assert!(matches!(t.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_resets_by_default_and_accumulates_on_request() {
        let t = tape64();
        let x = t.param(&[1], vec![2.0]).unwrap();
        let loss = x.scale(3.0).sum();
        t.backward(&loss).unwrap();
        t.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0]);
        t.backward_accumulate(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_reports_nan_producing_op() {
        let t = tape64();
        let x = t.param(&[1], vec![0.0]).unwrap();
        // d/dx log(x) at 0 is infinite.
        let loss = x.log().sum();
        match t.backward(&loss) {
            Err(Error::Numeric { op, .. }) => assert_eq!(op, "log"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        let t = tape64();
        let v = 7usize;
        let logits = t.constant(&[2, v], vec![0.0; 2 * v]).unwrap();
        let loss = logits
            .softmax_cross_entropy(&[3, 5], &[true, true])
            .unwrap();
        let expect = 2.0 * (v as f64).ln();
        assert!((loss.item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_masked_rows_contribute_zero() {
        let t = tape64();
        let logits = t
            .constant(&[2, 3], vec![5.0, -2.0, 0.3, 9.0, 9.0, 9.0])
            .unwrap();
        let full = logits
            .softmax_cross_entropy(&[0, 1], &[true, false])
            .unwrap();
        let only_first = logits
            .softmax_cross_entropy(&[0, 2], &[true, false])
            .unwrap();
        // Masked target identity is irrelevant.
        assert_eq!(full.item().unwrap(), only_first.item().unwrap());
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let t = tape64();
        let a = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.constant(&[2, 1], vec![9.0, 8.0]).unwrap();
        let cat = a.concat_cols(&b).unwrap();
        assert_eq!(cat.data(), vec![1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        assert_eq!(cat.slice_cols(0, 2).unwrap().data(), a.data());
        assert_eq!(cat.slice_cols(2, 1).unwrap().data(), b.data());
        assert_eq!(cat.slice_rows(1, 1).unwrap().data(), vec![3.0, 4.0, 8.0]);
    }

    #[test]
    fn gather_rows_repeats_and_bounds() {
        let t = tape64();
        let a = t.constant(&[3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let g = a.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(g.data(), vec![4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        assert!(matches!(a.gather_rows(&[3]), Err(Error::Index { .. })));
    }

    #[test]
    fn pairwise_sqdist_values() {
        let t = tape64();
        let a = t.constant(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let b = t.constant(&[1, 2], vec![3.0, 4.0]).unwrap();
        let d = a.pairwise_sqdist(&b).unwrap();
        assert_eq!(d.data(), vec![25.0, 13.0]);
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let build = || {
            let t = Tape::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let data: Vec<f32> = (0..12).map(|_| f32::standard_normal(&mut rng)).collect();
            let x = t.param(&[3, 4], data).unwrap();
            let w = t
                .constant(&[4, 2], (0..8).map(|i| (i as f32) * 0.37 - 1.0).collect())
                .unwrap();
            x.matmul(&w).unwrap().tanh().sigmoid().sum().data()
        };
        let a = build();
        let b = build();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    // Every differentiable op, finite-difference checked over 20 seeds.
    #[test]
    fn all_ops_pass_grad_check_in_f64() {
        type Builder = fn(&Tape<f64>, &[Tensor<f64>]) -> crate::error::Result<Tensor<f64>>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Builder)> = vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], |_, xs| {
                Ok(xs[0].matmul(&xs[1])?.tanh().sum())
            }),
            ("add", vec![vec![2, 3], vec![2, 3]], |_, xs| {
                Ok(xs[0].add(&xs[1])?.sigmoid().sum())
            }),
            ("sub", vec![vec![2, 3], vec![2, 3]], |_, xs| {
                Ok(xs[0].sub(&xs[1])?.tanh().sum())
            }),
            ("mul", vec![vec![2, 3], vec![2, 3]], |_, xs| {
                Ok(xs[0].mul(&xs[1])?.sum())
            }),
            ("neg", vec![vec![5]], |_, xs| Ok(xs[0].neg().tanh().sum())),
            ("recip", vec![vec![4]], |_, xs| {
                // Shift away from zero to keep the probe well-conditioned.
                Ok(xs[0].sigmoid().add_scalar(1.5).recip().sum())
            }),
            ("scale", vec![vec![4]], |_, xs| Ok(xs[0].scale(-2.5).tanh().sum())),
            ("add_scalar", vec![vec![4]], |_, xs| {
                Ok(xs[0].add_scalar(0.7).tanh().sum())
            }),
            ("sigmoid", vec![vec![6]], |_, xs| Ok(xs[0].sigmoid().sum())),
            ("tanh", vec![vec![6]], |_, xs| Ok(xs[0].tanh().sum())),
            ("exp", vec![vec![4]], |_, xs| Ok(xs[0].exp().sum())),
            ("log", vec![vec![4]], |_, xs| {
                Ok(xs[0].sigmoid().add_scalar(0.5).log().sum())
            }),
            ("mean", vec![vec![3, 3]], |_, xs| Ok(xs[0].tanh().mean())),
            ("concat_cols", vec![vec![2, 2], vec![2, 3]], |_, xs| {
                Ok(xs[0].concat_cols(&xs[1])?.tanh().sum())
            }),
            ("slice_rows", vec![vec![4, 3]], |_, xs| {
                Ok(xs[0].slice_rows(1, 2)?.tanh().sum())
            }),
            ("slice_cols", vec![vec![3, 4]], |_, xs| {
                Ok(xs[0].slice_cols(1, 2)?.tanh().sum())
            }),
            ("add_row", vec![vec![3, 4], vec![4]], |_, xs| {
                Ok(xs[0].add_row(&xs[1])?.tanh().sum())
            }),
            ("mul_row", vec![vec![3, 4], vec![4]], |_, xs| {
                Ok(xs[0].mul_row(&xs[1])?.tanh().sum())
            }),
            ("gather_rows", vec![vec![4, 3]], |_, xs| {
                Ok(xs[0].gather_rows(&[0, 2, 2, 3])?.tanh().sum())
            }),
            (
                "pairwise_sqdist",
                vec![vec![3, 2], vec![4, 2]],
                |_, xs| Ok(xs[0].pairwise_sqdist(&xs[1])?.add_scalar(1.0).recip().sum()),
            ),
            (
                "pairwise_sqdist_shared",
                vec![vec![3, 2]],
                |_, xs| Ok(xs[0].pairwise_sqdist(&xs[0])?.add_scalar(1.0).recip().sum()),
            ),
            ("softmax_cross_entropy", vec![vec![3, 5]], |_, xs| {
                xs[0].softmax_cross_entropy(&[1, 4, 0], &[true, true, false])
            }),
        ];

        for (name, shapes, builder) in cases {
            for seed in 0..20u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let inputs: Vec<(Vec<usize>, Vec<f64>)> = shapes
                    .iter()
                    .map(|s| {
                        let numel: usize = s.iter().product();
                        (
                            s.clone(),
                            (0..numel).map(|_| f64::standard_normal(&mut rng)).collect(),
                        )
                    })
                    .collect();
                let err = grad_check(&builder, &inputs, 1e-4).unwrap();
                assert!(
                    err < 1e-6,
                    "op {name} seed {seed}: relative error {err:.3e} ≥ 1e-6"
                );
            }
        }
    }
}
