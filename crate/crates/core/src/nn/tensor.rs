//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A `Tensor` wraps a reference-counted graph node holding the value buffer,
//! an optional gradient buffer, and a backward closure over its parents.
//! Graphs are DAGs built per forward pass; parameters are `variable` leaves
//! that keep their gradients across `backward` for the optimizer.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, NumAssignOps, NumCast};

/// Scalar element for tensor buffers: `f32` for training, `f64` for checks.
pub trait Elem: Float + NumAssignOps + fmt::Debug + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite constant")
    }
    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar fits f64")
    }
}

impl Elem for f32 {}
impl Elem for f64 {}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported spec: {0}")]
    UnsupportedSpec(String),
    #[error("non-finite gradient in parameter update")]
    NonFiniteGradient,
}

pub type NnResult<T> = Result<T, NnError>;

fn next_id() -> u64 {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}

pub(crate) type BackFn<E> = Box<dyn Fn(&Inner<E>)>;

pub(crate) struct Inner<E: Elem> {
    id: u64,
    shape: Vec<usize>,
    value: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    variable: bool,
    tracked: bool,
    parents: Vec<Tensor<E>>,
    backward: Option<BackFn<E>>,
}

/// A dense row-major tensor participating in an autodiff graph.
pub struct Tensor<E: Elem> {
    inner: Rc<Inner<E>>,
}

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Elem> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("variable", &self.inner.variable)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<E: Elem> Tensor<E> {
    fn new(shape: Vec<usize>, data: Vec<E>, variable: bool) -> Self {
        assert_eq!(numel_of(&shape), data.len(), "shape/data length mismatch");
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                value: RefCell::new(data),
                grad: RefCell::new(None),
                variable,
                tracked: variable,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Constant (non-trainable) tensor.
    pub fn constant(shape: &[usize], data: Vec<E>) -> Self {
        Tensor::new(shape.to_vec(), data, false)
    }

    /// Trainable leaf parameter.
    pub fn parameter(shape: &[usize], data: Vec<E>) -> Self {
        Tensor::new(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::constant(shape, vec![E::zero(); numel_of(shape)])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor::constant(shape, vec![E::from_f64(v); numel_of(shape)])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::constant(&[1], vec![E::from_f64(v)])
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<E>,
        parents: Vec<Tensor<E>>,
        backward: BackFn<E>,
    ) -> Self {
        let tracked = parents.iter().any(|p| p.inner.tracked);
        if !tracked {
            return Tensor::new(shape, data, false);
        }
        assert_eq!(numel_of(&shape), data.len(), "shape/data length mismatch");
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                value: RefCell::new(data),
                grad: RefCell::new(None),
                variable: false,
                tracked: true,
                parents,
                backward: Some(backward),
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn is_variable(&self) -> bool {
        self.inner.variable
    }

    pub fn value(&self) -> Ref<'_, Vec<E>> {
        self.inner.value.borrow()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.value.borrow().clone()
    }

    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.inner.value.borrow()[0]
    }

    /// Detached copy of the gradient buffer, if one was accumulated.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrites the value buffer in place (optimizer updates).
    pub fn set_value(&self, data: Vec<E>) {
        assert_eq!(data.len(), self.numel(), "set_value length mismatch");
        *self.inner.value.borrow_mut() = data;
    }

    /// Mutates the value buffer in place.
    pub fn update_value(&self, f: impl FnOnce(&mut [E])) {
        f(self.inner.value.borrow_mut().as_mut_slice());
    }

    /// Detach: same values, no graph history.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::constant(&self.inner.shape, self.to_vec())
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[E]) {
        if !self.inner.tracked {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(grad) => {
                for (g, c) in grad.iter_mut().zip(contribution) {
                    *g += *c;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar output. Accumulates gradients on all
    /// tracked nodes reachable from `self`; parameters keep theirs until
    /// `zero_grad`.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() requires a scalar loss");
        if !self.inner.tracked {
            return;
        }

        // Iterative post-order DFS: deep recurrent graphs must not overflow
        // the call stack.
        let mut topo: Vec<Tensor<E>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<E>, usize)> = vec![(self.clone(), 0)];
        while let Some((node, child)) = stack.pop() {
            if child == 0 {
                if !visited.insert(node.inner.id) {
                    continue;
                }
            }
            let parents = &node.inner.parents;
            if child < parents.len() {
                let next = parents[child].clone();
                stack.push((node, child + 1));
                if next.inner.tracked && !visited.contains(&next.inner.id) {
                    stack.push((next, 0));
                }
            } else {
                topo.push(node);
            }
        }

        self.accumulate_grad(&[E::one()]);
        for node in topo.iter().rev() {
            if node.inner.grad.borrow().is_none() {
                continue;
            }
            if let Some(back) = &node.inner.backward {
                back(&node.inner);
            }
        }
    }
}

impl<E: Elem> Inner<E> {
    pub(crate) fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub(crate) fn value(&self) -> Ref<'_, Vec<E>> {
        self.value.borrow()
    }

    /// Gradient buffer of this node during backward (always present when the
    /// backward closure runs).
    pub(crate) fn out_grad(&self) -> Vec<E> {
        self.grad
            .borrow()
            .clone()
            .expect("output gradient present during backward")
    }

    pub(crate) fn parent(&self, i: usize) -> &Tensor<E> {
        &self.parents[i]
    }
}

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

/// NumPy-style right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> NnResult<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(NnError::ShapeMismatch(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        };
    }
    Ok(out)
}

/// Strides into a tensor of `shape` when indexed by `out_shape` coordinates;
/// broadcast axes get stride 0.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let offset = out_shape.len() - shape.len();
    let strides = strides_of(shape);
    let mut out = vec![0; out_shape.len()];
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { strides[i] };
    }
    out
}

/// Sums `grad` (shaped `from`) down to `to` by collapsing broadcast axes.
pub(crate) fn reduce_grad_to<E: Elem>(grad: &[E], from: &[usize], to: &[usize]) -> Vec<E> {
    if from == to {
        return grad.to_vec();
    }
    let mut out = vec![E::zero(); numel_of(to)];
    let strides = broadcast_strides(to, from);
    let out_strides_full = strides_of(from);
    for (flat, g) in grad.iter().enumerate() {
        let mut target = 0;
        let mut rem = flat;
        for (dim, s) in out_strides_full.iter().enumerate() {
            let coord = rem / s;
            rem %= s;
            target += coord * strides[dim];
        }
        out[target] += *g;
    }
    out
}

fn binary_broadcast<E: Elem>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    f: impl Fn(E, E) -> E,
) -> NnResult<(Vec<usize>, Vec<E>)> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let n = numel_of(&out_shape);
    let av = a.value();
    let bv = b.value();
    let mut out = Vec::with_capacity(n);
    if a.shape() == out_shape.as_slice() && b.shape() == out_shape.as_slice() {
        for (x, y) in av.iter().zip(bv.iter()) {
            out.push(f(*x, *y));
        }
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let so = strides_of(&out_shape);
        for flat in 0..n {
            let mut ia = 0;
            let mut ib = 0;
            let mut rem = flat;
            for (dim, s) in so.iter().enumerate() {
                let coord = rem / s;
                rem %= s;
                ia += coord * sa[dim];
                ib += coord * sb[dim];
            }
            out.push(f(av[ia], bv[ib]));
        }
    }
    Ok((out_shape, out))
}

/// Expands `v` (shaped `shape`) to `out_shape` coordinates.
fn expand_to<E: Elem>(v: &[E], shape: &[usize], out_shape: &[usize]) -> Vec<E> {
    if shape == out_shape {
        return v.to_vec();
    }
    let s = broadcast_strides(shape, out_shape);
    let so = strides_of(out_shape);
    let n = numel_of(out_shape);
    let mut out = Vec::with_capacity(n);
    for flat in 0..n {
        let mut idx = 0;
        let mut rem = flat;
        for (dim, st) in so.iter().enumerate() {
            let coord = rem / st;
            rem %= st;
            idx += coord * s[dim];
        }
        out.push(v[idx]);
    }
    out
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

impl<E: Elem> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> NnResult<Tensor<E>> {
        let (shape, data) = binary_broadcast(self, other, |a, b| a + b)?;
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            shape.clone(),
            data,
            vec![a, b],
            Box::new(move |out| {
                let g = out.out_grad();
                let a = out.parent(0);
                let b = out.parent(1);
                a.accumulate_grad(&reduce_grad_to(&g, out.shape(), a.shape()));
                b.accumulate_grad(&reduce_grad_to(&g, out.shape(), b.shape()));
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<E>) -> NnResult<Tensor<E>> {
        let (shape, data) = binary_broadcast(self, other, |a, b| a - b)?;
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |out| {
                let g = out.out_grad();
                let a = out.parent(0);
                let b = out.parent(1);
                a.accumulate_grad(&reduce_grad_to(&g, out.shape(), a.shape()));
                let neg: Vec<E> = g.iter().map(|x| -*x).collect();
                b.accumulate_grad(&reduce_grad_to(&neg, out.shape(), b.shape()));
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor<E>) -> NnResult<Tensor<E>> {
        let (shape, data) = binary_broadcast(self, other, |a, b| a * b)?;
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |out| {
                let g = out.out_grad();
                let a = out.parent(0);
                let b = out.parent(1);
                let av = expand_to(&a.value(), a.shape(), out.shape());
                let bv = expand_to(&b.value(), b.shape(), out.shape());
                let da: Vec<E> = g.iter().zip(&bv).map(|(g, b)| *g * *b).collect();
                let db: Vec<E> = g.iter().zip(&av).map(|(g, a)| *g * *a).collect();
                a.accumulate_grad(&reduce_grad_to(&da, out.shape(), a.shape()));
                b.accumulate_grad(&reduce_grad_to(&db, out.shape(), b.shape()));
            }),
        ))
    }

    pub fn div(&self, other: &Tensor<E>) -> NnResult<Tensor<E>> {
        let (shape, data) = binary_broadcast(self, other, |a, b| a / b)?;
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |out| {
                let g = out.out_grad();
                let a = out.parent(0);
                let b = out.parent(1);
                let av = expand_to(&a.value(), a.shape(), out.shape());
                let bv = expand_to(&b.value(), b.shape(), out.shape());
                let da: Vec<E> = g.iter().zip(&bv).map(|(g, b)| *g / *b).collect();
                let db: Vec<E> = g
                    .iter()
                    .zip(av.iter().zip(&bv))
                    .map(|(g, (a, b))| -*g * *a / (*b * *b))
                    .collect();
                a.accumulate_grad(&reduce_grad_to(&da, out.shape(), a.shape()));
                b.accumulate_grad(&reduce_grad_to(&db, out.shape(), b.shape()));
            }),
        ))
    }

    /// `a * self + b` with scalar constants.
    pub fn affine(&self, a: f64, b: f64) -> Tensor<E> {
        let ae = E::from_f64(a);
        let be = E::from_f64(b);
        let data: Vec<E> = self.value().iter().map(|x| ae * *x + be).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.out_grad();
                let dx: Vec<E> = g.iter().map(|g| *g * ae).collect();
                out.parent(0).accumulate_grad(&dx);
            }),
        )
    }

    pub fn scale(&self, a: f64) -> Tensor<E> {
        self.affine(a, 0.0)
    }

    pub fn neg(&self) -> Tensor<E> {
        self.affine(-1.0, 0.0)
    }

    fn unary(
        &self,
        f: impl Fn(E) -> E,
        // derivative from (input, output)
        df: impl Fn(E, E) -> E + 'static,
    ) -> Tensor<E> {
        let data: Vec<E> = self.value().iter().map(|x| f(*x)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.out_grad();
                let x = out.parent(0);
                let xv = x.value();
                let yv = out.value();
                let dx: Vec<E> = g
                    .iter()
                    .enumerate()
                    .map(|(i, g)| *g * df(xv[i], yv[i]))
                    .collect();
                drop(xv);
                drop(yv);
                x.accumulate_grad(&dx);
            }),
        )
    }

    pub fn relu(&self) -> Tensor<E> {
        self.unary(
            |x| if x > E::zero() { x } else { E::zero() },
            |x, _| if x > E::zero() { E::one() } else { E::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        self.unary(
            |x| E::one() / (E::one() + (-x).exp()),
            |_, y| y * (E::one() - y),
        )
    }

    pub fn tanh_act(&self) -> Tensor<E> {
        self.unary(|x| x.tanh(), |_, y| E::one() - y * y)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self) -> Tensor<E> {
        let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = E::from_f64(0.044715);
        let half = E::from_f64(0.5);
        let three = E::from_f64(3.0);
        self.unary(
            move |x| {
                let u = c * (x + k * x * x * x);
                half * x * (E::one() + u.tanh())
            },
            move |x, _| {
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                half * (E::one() + t)
                    + half * x * (E::one() - t * t) * c * (E::one() + three * k * x * x)
            },
        )
    }

    pub fn exp_t(&self) -> Tensor<E> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln_t(&self) -> Tensor<E> {
        self.unary(|x| x.ln(), |x, _| E::one() / x)
    }

    pub fn sqrt_t(&self) -> Tensor<E> {
        self.unary(
            |x| x.sqrt(),
            |_, y| E::one() / (E::from_f64(2.0) * y),
        )
    }

    pub fn square(&self) -> Tensor<E> {
        self.unary(|x| x * x, |x, _| E::from_f64(2.0) * x)
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

impl<E: Elem> Tensor<E> {
    pub fn sum_all(&self) -> Tensor<E> {
        let total = self
            .value()
            .iter()
            .fold(E::zero(), |acc, x| acc + *x);
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.out_grad()[0];
                let x = out.parent(0);
                let dx = vec![g; x.numel()];
                x.accumulate_grad(&dx);
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<E> {
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    /// Sum over one axis, keeping it as size 1.
    pub fn sum_axis(&self, axis: usize) -> NnResult<Tensor<E>> {
        if axis >= self.shape().len() {
            return Err(NnError::ShapeMismatch(format!(
                "sum_axis {axis} out of range for {:?}",
                self.shape()
            )));
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = 1;
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let reps = self.shape()[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let v = self.value();
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for r in 0..reps {
                let base = (o * reps + r) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] += v[base + i];
                }
            }
        }
        drop(v);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.out_grad();
                let x = out.parent(0);
                let mut dx = vec![E::zero(); x.numel()];
                for o in 0..outer {
                    for r in 0..reps {
                        let base = (o * reps + r) * inner;
                        let obase = o * inner;
                        for i in 0..inner {
                            dx[base + i] = g[obase + i];
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> NnResult<Tensor<E>> {
        let n = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

impl<E: Elem> Tensor<E> {
    pub fn reshape(&self, shape: &[usize]) -> NnResult<Tensor<E>> {
        if numel_of(shape) != self.numel() {
            return Err(NnError::ShapeMismatch(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        let in_shape = self.shape().to_vec();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.out_grad();
                let _ = &in_shape;
                out.parent(0).accumulate_grad(&g);
            }),
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> NnResult<Tensor<E>> {
        let rank = self.shape().len();
        if perm.len() != rank || {
            let mut seen = vec![false; rank];
            perm.iter().any(|&p| {
                if p >= rank || seen[p] {
                    true
                } else {
                    seen[p] = true;
                    false
                }
            })
        } {
            return Err(NnError::ShapeMismatch(format!(
                "invalid permutation {perm:?} for rank {rank}"
            )));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let data = permute_buffer(&self.value(), &in_shape, perm);
        // Inverse permutation for the backward pass.
        let mut inv = vec![0usize; rank];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let out_shape_cl = out_shape.clone();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.out_grad();
                let dx = permute_buffer(&g, &out_shape_cl, &inv);
                out.parent(0).accumulate_grad(&dx);
            }),
        ))
    }

    /// Contiguous slice along one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> NnResult<Tensor<E>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(NnError::ShapeMismatch(format!(
                "narrow axis {axis} [{start}, {start}+{len}) out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let v = self.value();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&v[base..base + len * inner]);
        }
        drop(v);
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.out_grad();
                let x = out.parent(0);
                let mut dx = vec![E::zero(); x.numel()];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * dim + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                x.accumulate_grad(&dx);
            }),
        ))
    }

    /// Concatenation along one axis.
    pub fn concat(tensors: &[Tensor<E>], axis: usize) -> NnResult<Tensor<E>> {
        assert!(!tensors.is_empty(), "concat of zero tensors");
        let first = tensors[0].shape().to_vec();
        let rank = first.len();
        if axis >= rank {
            return Err(NnError::ShapeMismatch(format!(
                "concat axis {axis} out of range for rank {rank}"
            )));
        }
        let mut axis_total = 0;
        for t in tensors {
            if t.shape().len() != rank {
                return Err(NnError::ShapeMismatch("concat rank mismatch".into()));
            }
            for d in 0..rank {
                if d != axis && t.shape()[d] != first[d] {
                    return Err(NnError::ShapeMismatch(format!(
                        "concat shapes {:?} vs {:?} differ off-axis",
                        t.shape(),
                        first
                    )));
                }
            }
            axis_total += t.shape()[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![E::zero(); numel_of(&out_shape)];
        let mut offset = 0;
        for t in tensors {
            let dim = t.shape()[axis];
            let v = t.value();
            for o in 0..outer {
                let src = o * dim * inner;
                let dst = (o * axis_total + offset) * inner;
                data[dst..dst + dim * inner].copy_from_slice(&v[src..src + dim * inner]);
            }
            offset += dim;
        }
        let dims: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        Ok(Tensor::from_op(
            out_shape,
            data,
            tensors.to_vec(),
            Box::new(move |out| {
                let g = out.out_grad();
                let mut offset = 0;
                for (i, dim) in dims.iter().enumerate() {
                    let p = out.parent(i);
                    let mut dx = vec![E::zero(); p.numel()];
                    for o in 0..outer {
                        let dst = o * dim * inner;
                        let src = (o * axis_total + offset) * inner;
                        dx[dst..dst + dim * inner].copy_from_slice(&g[src..src + dim * inner]);
                    }
                    p.accumulate_grad(&dx);
                    offset += dim;
                }
            }),
        ))
    }

    /// Cyclic rotation along one axis: element at index `i` moves to
    /// `(i + shift) mod len`. `roll(axis, -s)` inverts `roll(axis, s)`.
    pub fn roll(&self, axis: usize, shift: i64) -> NnResult<Tensor<E>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(NnError::ShapeMismatch(format!(
                "roll axis {axis} out of range for {shape:?}"
            )));
        }
        let dim = shape[axis] as i64;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let v = self.value();
        let mut data = vec![E::zero(); v.len()];
        for o in 0..outer {
            for i in 0..dim {
                let j = (i + shift).rem_euclid(dim);
                let src = (o * dim as usize + i as usize) * inner;
                let dst = (o * dim as usize + j as usize) * inner;
                data[dst..dst + inner].copy_from_slice(&v[src..src + inner]);
            }
        }
        drop(v);
        Ok(Tensor::from_op(
            shape.to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.out_grad();
                let x = out.parent(0);
                let mut dx = vec![E::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..dim {
                        let j = (i + shift).rem_euclid(dim);
                        let src = (o * dim as usize + j as usize) * inner;
                        let dst = (o * dim as usize + i as usize) * inner;
                        dx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
                x.accumulate_grad(&dx);
            }),
        ))
    }

    /// Row lookup into a 2-D table; backward scatter-adds into the table.
    pub fn gather_rows(&self, indices: &[usize]) -> NnResult<Tensor<E>> {
        if self.shape().len() != 2 {
            return Err(NnError::ShapeMismatch(format!(
                "gather_rows needs a 2-D table, got {:?}",
                self.shape()
            )));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(NnError::ShapeMismatch(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let v = self.value();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&v[i * cols..(i + 1) * cols]);
        }
        drop(v);
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            vec![indices.len(), cols],
            data,
            vec![self.clone()],
            Box::new(move |out| {
                let g = out.out_grad();
                let table = out.parent(0);
                let mut dx = vec![E::zero(); table.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dx[i * cols + c] += g[r * cols + c];
                    }
                }
                table.accumulate_grad(&dx);
            }),
        ))
    }
}

pub(crate) fn permute_buffer<E: Elem>(v: &[E], shape: &[usize], perm: &[usize]) -> Vec<E> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let out_strides = strides_of(&out_shape);
    // input dim `dim` lands at output position `pos_of[dim]`
    let mut pos_of = vec![0usize; perm.len()];
    for (pos, &p) in perm.iter().enumerate() {
        pos_of[p] = pos;
    }
    let n = v.len();
    let mut out = vec![E::default(); n];
    for (flat, x) in v.iter().enumerate() {
        let mut rem = flat;
        let mut target = 0;
        for (dim, s) in in_strides.iter().enumerate() {
            let coord = rem / s;
            rem %= s;
            target += coord * out_strides[pos_of[dim]];
        }
        out[target] = *x;
    }
    out
}
