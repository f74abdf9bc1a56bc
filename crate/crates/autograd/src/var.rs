use std::cell::Cell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::conv;
use crate::float::Float;
use crate::tensor::Tensor;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording switched on or off, restoring the previous
/// mode afterwards.
pub fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(enabled)));
    f()
}

pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

pub(crate) enum Op<T: Float> {
    Add(Var<T>, Var<T>),
    Sub(Var<T>, Var<T>),
    Mul(Var<T>, Var<T>),
    Scale(Var<T>, T),
    AddScalar(Var<T>),
    Exp(Var<T>),
    Log(Var<T>),
    Recip(Var<T>),
    Powf(Var<T>, T),
    Relu(Var<T>),
    Abs(Var<T>),
    MatMul(Var<T>, Var<T>),
    Transpose(Var<T>),
    Reshape(Var<T>),
    BroadcastTo(Var<T>),
    SumTo(Var<T>),
    Conv2d(Var<T>, Var<T>),
    ConvWeightGrad(Var<T>, Var<T>),
    FlipTranspose(Var<T>),
    Gather(Var<T>, Rc<[usize]>),
    Scatter(Var<T>, Rc<[usize]>),
}

impl<T: Float> Op<T> {
    pub(crate) fn parents(&self) -> Vec<&Var<T>> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | Conv2d(a, b)
            | ConvWeightGrad(a, b) => vec![a, b],
            Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Recip(a) | Powf(a, _) | Relu(a)
            | Abs(a) | Transpose(a) | Reshape(a) | BroadcastTo(a) | SumTo(a)
            | FlipTranspose(a) | Gather(a, _) | Scatter(a, _) => vec![a],
        }
    }
}

pub(crate) struct Node<T: Float> {
    pub(crate) id: usize,
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op<T>>,
}

/// A tensor participating in a differentiable computation.
///
/// Cloning is cheap (reference counted). Operations record their inputs
/// whenever graph recording is on and any input requires a gradient, which
/// is what makes gradients-of-gradients possible.
pub struct Var<T: Float>(pub(crate) Rc<Node<T>>);

impl<T: Float> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Float> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Float> Var<T> {
    fn make(value: Tensor<T>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            op,
        }))
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(value: Tensor<T>) -> Self {
        Self::make(value, true, None)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(value, false, None)
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    fn from_op(value: Tensor<T>, op: Op<T>) -> Self {
        let track = is_grad_enabled() && op.parents().iter().any(|p| p.0.requires_grad);
        if track {
            Self::make(value, true, Some(op))
        } else {
            Self::make(value, false, None)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    pub(crate) fn op(&self) -> Option<&Op<T>> {
        self.0.op.as_ref()
    }

    pub fn add(&self, other: &Self) -> Self {
        let v = self.value().zip_map(other.value(), |a, b| a + b);
        Self::from_op(v, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Self) -> Self {
        let v = self.value().zip_map(other.value(), |a, b| a - b);
        Self::from_op(v, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Self) -> Self {
        let v = self.value().zip_map(other.value(), |a, b| a * b);
        Self::from_op(v, Op::Mul(self.clone(), other.clone()))
    }

    /// Elementwise division, expressed as `self * other^-1`.
    pub fn div(&self, other: &Self) -> Self {
        self.mul(&other.recip())
    }

    pub fn scale(&self, c: T) -> Self {
        let v = self.value().map(|a| a * c);
        Self::from_op(v, Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Self {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, c: T) -> Self {
        let v = self.value().map(|a| a + c);
        Self::from_op(v, Op::AddScalar(self.clone()))
    }

    pub fn exp(&self) -> Self {
        let v = self.value().map(|a| a.exp());
        Self::from_op(v, Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Self {
        let v = self.value().map(|a| a.ln());
        Self::from_op(v, Op::Log(self.clone()))
    }

    pub fn recip(&self) -> Self {
        let v = self.value().map(|a| a.recip());
        Self::from_op(v, Op::Recip(self.clone()))
    }

    pub fn powf(&self, p: T) -> Self {
        let v = self.value().map(|a| a.powf(p));
        Self::from_op(v, Op::Powf(self.clone(), p))
    }

    pub fn square(&self) -> Self {
        self.mul(self)
    }

    pub fn relu(&self) -> Self {
        let v = self.value().map(|a| if a > T::zero() { a } else { T::zero() });
        Self::from_op(v, Op::Relu(self.clone()))
    }

    pub fn abs(&self) -> Self {
        let v = self.value().map(|a| a.abs());
        Self::from_op(v, Op::Abs(self.clone()))
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let v = self.value().matmul(other.value());
        Self::from_op(v, Op::MatMul(self.clone(), other.clone()))
    }

    /// Matrix transpose.
    pub fn t(&self) -> Self {
        let v = self.value().transpose();
        Self::from_op(v, Op::Transpose(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        let v = self.value().reshape(shape);
        Self::from_op(v, Op::Reshape(self.clone()))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self.clone();
        }
        let v = self.value().broadcast_to(shape);
        Self::from_op(v, Op::BroadcastTo(self.clone()))
    }

    pub fn sum_to(&self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self.clone();
        }
        let v = self.value().sum_to(shape);
        Self::from_op(v, Op::SumTo(self.clone()))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Self {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Self {
        let n = self.value().len();
        self.sum().scale(T::one() / T::from_usize(n).expect("count"))
    }

    /// Broadcasting add.
    pub fn add_bcast(&self, other: &Self) -> Self {
        let shape = broadcast_shape(self.shape(), other.shape());
        self.broadcast_to(&shape).add(&other.broadcast_to(&shape))
    }

    /// Broadcasting multiply.
    pub fn mul_bcast(&self, other: &Self) -> Self {
        let shape = broadcast_shape(self.shape(), other.shape());
        self.broadcast_to(&shape).mul(&other.broadcast_to(&shape))
    }

    /// Same-padding stride-1 convolution, `[B,C,H,W] * [O,C,k,k]`.
    pub fn conv2d(&self, weight: &Self) -> Self {
        let v = conv::conv2d(self.value(), weight.value());
        Self::from_op(v, Op::Conv2d(self.clone(), weight.clone()))
    }

    /// Weight-gradient of `conv2d(self, w)` for upstream `g`; bilinear in
    /// `(self, g)`.
    pub fn conv2d_weight_grad(&self, g: &Self, k: usize) -> Self {
        let v = conv::conv2d_weight_grad(self.value(), g.value(), k);
        Self::from_op(v, Op::ConvWeightGrad(self.clone(), g.clone()))
    }

    pub fn flip_transpose(&self) -> Self {
        let v = conv::flip_transpose(self.value());
        Self::from_op(v, Op::FlipTranspose(self.clone()))
    }

    /// 2x2 stride-2 max pooling.
    pub fn max_pool2(&self) -> Self {
        let (idx, shape) = conv::max_pool2_indices(self.value());
        self.gather(idx.into(), &shape)
    }

    /// `out[i] = self[idx[i]]` over flat indices.
    pub fn gather(&self, idx: Rc<[usize]>, shape: &[usize]) -> Self {
        let v = self.value().gather(&idx, shape);
        Self::from_op(v, Op::Gather(self.clone(), idx))
    }

    /// `out[idx[i]] += self[i]` into a zero tensor of `shape`.
    pub fn scatter(&self, idx: Rc<[usize]>, shape: &[usize]) -> Self {
        let v = self.value().scatter(&idx, shape);
        Self::from_op(v, Op::Scatter(self.clone(), idx))
    }

    /// Mean over the spatial axes of `[B,C,H,W]`, giving `[B,C]`.
    pub fn global_avg_pool(&self) -> Self {
        let s = self.shape();
        assert_eq!(s.len(), 4, "global_avg_pool expects NCHW");
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        self.sum_to(&[b, c, 1, 1])
            .reshape(&[b, c])
            .scale(T::one() / T::from_usize(hw).expect("count"))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&self) -> Self {
        self.log_softmax_rows().exp()
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax_rows(&self) -> Self {
        let s = self.shape();
        assert_eq!(s.len(), 2, "log_softmax_rows expects a matrix");
        let (r, c) = (s[0], s[1]);
        // the row max is a constant shift; it cancels in the gradient
        let mut maxes = vec![T::neg_infinity(); r];
        for (i, row) in self.value().data().chunks(c.max(1)).enumerate().take(r) {
            for &v in row {
                if v > maxes[i] {
                    maxes[i] = v;
                }
            }
        }
        let shift = Var::constant(Tensor::from_vec(&[r, 1], maxes).expect("row max"));
        let z = self.sub(&shift.broadcast_to(&[r, c]));
        let lse = z.exp().sum_to(&[r, 1]).ln();
        z.sub(&lse.broadcast_to(&[r, c]))
    }
}

/// Numpy broadcasting result shape.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "shapes {a:?} and {b:?} do not broadcast");
            x.max(y)
        })
        .collect()
}

impl<T: Float> Drop for Node<T> {
    fn drop(&mut self) {
        // Unlink long parent chains iteratively so dropping a deep graph
        // cannot overflow the stack.
        let mut stack: Vec<Op<T>> = self.op.take().into_iter().collect();
        while let Some(op) = stack.pop() {
            for parent in op_into_parents(op) {
                if let Ok(mut node) = Rc::try_unwrap(parent.0) {
                    if let Some(op) = node.op.take() {
                        stack.push(op);
                    }
                }
            }
        }
    }
}

fn op_into_parents<T: Float>(op: Op<T>) -> Vec<Var<T>> {
    use Op::*;
    match op {
        Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | Conv2d(a, b)
        | ConvWeightGrad(a, b) => vec![a, b],
        Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Recip(a) | Powf(a, _) | Relu(a)
        | Abs(a) | Transpose(a) | Reshape(a) | BroadcastTo(a) | SumTo(a) | FlipTranspose(a)
        | Gather(a, _) | Scatter(a, _) => vec![a],
    }
}
