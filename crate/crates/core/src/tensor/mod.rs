//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Storage is `f32` in the training path; every op is generic over
//! [`Element`] so the same graph can be instantiated with `f64` when
//! finite-difference gradient checks need the extra precision.
//!
//! The graph is dynamic: each op allocates a fresh node holding the forward
//! values, its parents, and a backward closure. Calling [`Tensor::backward`]
//! on a scalar walks the graph in reverse topological order and accumulates
//! gradients into every reachable leaf that requires them. Ops whose inputs
//! carry no gradient requirement produce plain value tensors with no graph
//! record, so inference and metric evaluation build no tape at all.

pub mod gradcheck;
pub mod init;
pub mod ops;

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Scalar types the engine can compute in.
pub trait Element:
    num_traits::Float + num_traits::NumAssign + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn from_f32(x: f32) -> Self;
    fn as_f64(self) -> f64;
    fn as_f32(self) -> f32;
}

impl Element for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn from_f32(x: f32) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Element for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Backward closure: `(output_grad, output_values, parents)`.
type BackwardFn<E> = Box<dyn Fn(&[E], &[E], &[Tensor<E>])>;

struct Inner<E: Element> {
    dims: Vec<usize>,
    values: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    parents: Vec<Tensor<E>>,
    backward: Option<BackwardFn<E>>,
    op_name: &'static str,
}

/// A dense row-major tensor, cheaply cloneable (shared buffer).
pub struct Tensor<E: Element = f32> {
    inner: Rc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.inner.values.borrow();
        let head: Vec<&E> = v.iter().take(4).collect();
        write!(
            f,
            "Tensor{:?} ({}{}…)",
            self.inner.dims,
            self.inner.op_name,
            if head.is_empty() {
                String::new()
            } else {
                format!(", {head:?}")
            }
        )
    }
}

#[cfg(debug_assertions)]
fn debug_check_finite<E: Element>(op: &str, values: &[E]) {
    for (i, v) in values.iter().enumerate() {
        assert!(
            v.is_finite(),
            "op `{op}` produced non-finite value {v} at flat index {i}"
        );
    }
}

impl<E: Element> Tensor<E> {
    fn leaf(dims: Vec<usize>, values: Vec<E>, requires_grad: bool) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        Tensor {
            inner: Rc::new(Inner {
                dims,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: None,
                op_name: "leaf",
            }),
        }
    }

    /// Creates a graph node. Skips the record entirely when no parent
    /// requires a gradient.
    pub(crate) fn from_op(
        op_name: &'static str,
        parents: Vec<Tensor<E>>,
        dims: Vec<usize>,
        values: Vec<E>,
        backward: BackwardFn<E>,
    ) -> Self {
        #[cfg(debug_assertions)]
        debug_check_finite(op_name, &values);
        let requires_grad = parents.iter().any(|p| p.inner.requires_grad);
        if !requires_grad {
            let mut t = Tensor::leaf(dims, values, false);
            Rc::get_mut(&mut t.inner).unwrap().op_name = op_name;
            return t;
        }
        Tensor {
            inner: Rc::new(Inner {
                dims,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad: true,
                parents,
                backward: Some(backward),
                op_name,
            }),
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor::leaf(dims.to_vec(), vec![E::zero(); n], false)
    }

    pub fn full(dims: &[usize], value: E) -> Self {
        let n = dims.iter().product();
        Tensor::leaf(dims.to_vec(), vec![value; n], false)
    }

    pub fn scalar(value: E) -> Self {
        Tensor::leaf(vec![1], vec![value], false)
    }

    pub fn from_vec(dims: &[usize], values: Vec<E>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(Error::shape("from_vec", dims, &[values.len()]));
        }
        Ok(Tensor::leaf(dims.to_vec(), values, false))
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let n = dims.iter().product();
        Tensor::leaf(dims.to_vec(), (0..n).map(&mut f).collect(), false)
    }

    /// Leaf tensor that accumulates gradients (a trainable parameter).
    pub fn param(dims: &[usize], values: Vec<E>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(Error::shape("param", dims, &[values.len()]));
        }
        Ok(Tensor::leaf(dims.to_vec(), values, true))
    }

    pub fn dims(&self) -> &[usize] {
        &self.inner.dims
    }

    pub fn len(&self) -> usize {
        self.inner.values.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    fn is_param_leaf(&self) -> bool {
        self.inner.requires_grad && self.inner.backward.is_none()
    }

    pub fn values(&self) -> Ref<'_, [E]> {
        Ref::map(self.inner.values.borrow(), |v| v.as_slice())
    }

    /// Mutable access to the raw buffer. Meant for parameter updates and
    /// test setup on leaf tensors; mutating an op output invalidates any
    /// gradients later computed through it.
    pub fn values_mut(&self) -> RefMut<'_, Vec<E>> {
        self.inner.values.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.values.borrow().clone()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> E {
        let v = self.inner.values.borrow();
        assert_eq!(v.len(), 1, "item() on non-scalar tensor {:?}", self.dims());
        v[0]
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn grad_mut(&self) -> RefMut<'_, Vec<E>> {
        RefMut::map(self.inner.grad.borrow_mut(), |g| {
            g.get_or_insert_with(|| vec![E::zero(); self.inner.dims.iter().product()])
        })
    }

    /// Whether backward should bother accumulating into this tensor.
    pub(crate) fn wants_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Detached copy of the values (no graph, no grad requirement).
    pub fn detach(&self) -> Tensor<E> {
        Tensor::leaf(self.inner.dims.clone(), self.to_vec(), false)
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        let vals = self
            .inner
            .values
            .borrow()
            .iter()
            .map(|v| F::from_f64(v.as_f64()))
            .collect();
        Tensor::leaf(self.inner.dims.clone(), vals, false)
    }

    pub fn max_abs(&self) -> E {
        self.inner
            .values
            .borrow()
            .iter()
            .fold(E::zero(), |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> E {
        self.inner
            .values
            .borrow()
            .iter()
            .fold(E::infinity(), |m, v| m.min(*v))
    }

    pub fn max_value(&self) -> E {
        self.inner
            .values
            .borrow()
            .iter()
            .fold(E::neg_infinity(), |m, v| m.max(*v))
    }

    /// Reverse-mode pass from a scalar loss. Gradients accumulate into
    /// parameter leaves; repeated calls without [`Tensor::zero_grad`] add up.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::NonScalarLoss {
                dims: self.dims().to_vec(),
            });
        }
        if !self.inner.requires_grad {
            return Ok(());
        }
        let order = topo_order(self);
        for t in &order {
            if !t.is_param_leaf() {
                t.zero_grad();
            }
        }
        self.grad_mut()[0] = E::one();
        for t in order.iter().rev() {
            let Some(backward) = &t.inner.backward else {
                continue;
            };
            let grad = t.inner.grad.borrow();
            let Some(grad) = grad.as_ref() else {
                continue;
            };
            let values = t.inner.values.borrow();
            backward(grad, &values, &t.inner.parents);
        }
        Ok(())
    }

    // ---- data-preparation helpers (no gradient tracking) ----

    /// Spatial crop of a `[C,H,W]` tensor.
    pub fn slice_spatial(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<E>> {
        let d = self.dims();
        if d.len() != 3 || y0 + h > d[1] || x0 + w > d[2] {
            return Err(Error::shape("slice_spatial", &[d[0], y0 + h, x0 + w], d));
        }
        let (c, full_h, full_w) = (d[0], d[1], d[2]);
        let src = self.values();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let base = (ch * full_h + y0 + y) * full_w + x0;
                out.extend_from_slice(&src[base..base + w]);
            }
        }
        Tensor::from_vec(&[c, h, w], out)
    }

    /// Horizontal mirror of a `[C,H,W]` tensor.
    pub fn flip_x(&self) -> Tensor<E> {
        let d = self.dims();
        assert_eq!(d.len(), 3, "flip_x expects [C,H,W]");
        let (c, h, w) = (d[0], d[1], d[2]);
        let src = self.values();
        let mut out = vec![E::zero(); c * h * w];
        for ch in 0..c {
            for y in 0..h {
                let base = (ch * h + y) * w;
                for x in 0..w {
                    out[base + x] = src[base + w - 1 - x];
                }
            }
        }
        Tensor::leaf(d.to_vec(), out, false)
    }

    // ---- elementwise ops ----

    fn unary(
        &self,
        op_name: &'static str,
        f: impl Fn(E) -> E,
        // df(input, output) -> d output / d input
        df: impl Fn(E, E) -> E + 'static,
    ) -> Tensor<E> {
        let values: Vec<E> = self.values().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            op_name,
            vec![self.clone()],
            self.inner.dims.clone(),
            values,
            Box::new(move |gout, yvals, parents| {
                let x = &parents[0];
                if !x.wants_grad() {
                    return;
                }
                let xv = x.values();
                let mut gx = x.grad_mut();
                for i in 0..gout.len() {
                    gx[i] += gout[i] * df(xv[i], yvals[i]);
                }
            }),
        )
    }

    fn binary(
        &self,
        other: &Tensor<E>,
        op_name: &'static str,
        f: impl Fn(E, E) -> E,
        // dfa(a, b, y), dfb(a, b, y)
        dfa: impl Fn(E, E, E) -> E + 'static,
        dfb: impl Fn(E, E, E) -> E + 'static,
    ) -> Result<Tensor<E>> {
        if self.dims() != other.dims() {
            return Err(Error::shape(op_name, self.dims(), other.dims()));
        }
        let values: Vec<E> = {
            let a = self.values();
            let b = other.values();
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        Ok(Tensor::from_op(
            op_name,
            vec![self.clone(), other.clone()],
            self.inner.dims.clone(),
            values,
            Box::new(move |gout, yvals, parents| {
                let (a, b) = (&parents[0], &parents[1]);
                if a.wants_grad() {
                    let av = a.values();
                    let bv = b.values();
                    let mut ga = a.grad_mut();
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * dfa(av[i], bv[i], yvals[i]);
                    }
                }
                if b.wants_grad() {
                    let av = a.values();
                    let bv = b.values();
                    let mut gb = b.grad_mut();
                    for i in 0..gout.len() {
                        gb[i] += gout[i] * dfb(av[i], bv[i], yvals[i]);
                    }
                }
            }),
        ))
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, "add", |a, b| a + b, |_, _, _| E::one(), |_, _, _| E::one())
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(
            other,
            "sub",
            |a, b| a - b,
            |_, _, _| E::one(),
            |_, _, _| -E::one(),
        )
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, "mul", |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |_, b, _| E::one() / b,
            |_, b, y| -y / b,
        )
    }

    pub fn add_scalar(&self, s: E) -> Tensor<E> {
        self.unary("add_scalar", |x| x + s, |_, _| E::one())
    }

    pub fn mul_scalar(&self, s: E) -> Tensor<E> {
        self.unary("mul_scalar", move |x| x * s, move |_, _| s)
    }

    pub fn relu(&self) -> Tensor<E> {
        self.unary(
            "relu",
            |x| x.max(E::zero()),
            |x, _| if x > E::zero() { E::one() } else { E::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        self.unary(
            "sigmoid",
            stable_sigmoid,
            |_, y| y * (E::one() - y),
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor<E> {
        self.unary("gelu", gelu_value, gelu_derivative)
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&self) -> Tensor<E> {
        self.unary(
            "softplus",
            |x| x.max(E::zero()) + (-x.abs()).exp().ln_1p(),
            |x, _| stable_sigmoid(x),
        )
    }

    pub fn abs(&self) -> Tensor<E> {
        self.unary(
            "abs",
            |x| x.abs(),
            |x, _| {
                if x > E::zero() {
                    E::one()
                } else if x < E::zero() {
                    -E::one()
                } else {
                    E::zero()
                }
            },
        )
    }

    /// Elementwise clamp; gradient passes only strictly inside the interval.
    pub fn clamp(&self, lo: E, hi: E) -> Tensor<E> {
        self.unary(
            "clamp",
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x > lo && x < hi {
                    E::one()
                } else {
                    E::zero()
                }
            },
        )
    }

    /// Mean over all elements, as a scalar tensor.
    pub fn mean_all(&self) -> Tensor<E> {
        let n = self.len();
        let inv = E::one() / E::from_f64(n as f64);
        let sum = self.values().iter().fold(E::zero(), |s, &v| s + v);
        Tensor::from_op(
            "mean_all",
            vec![self.clone()],
            vec![1],
            vec![sum * inv],
            Box::new(move |gout, _, parents| {
                let x = &parents[0];
                if !x.wants_grad() {
                    return;
                }
                let g = gout[0] * inv;
                let mut gx = x.grad_mut();
                for v in gx.iter_mut() {
                    *v += g;
                }
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor<E> {
        let sum = self.values().iter().fold(E::zero(), |s, &v| s + v);
        Tensor::from_op(
            "sum_all",
            vec![self.clone()],
            vec![1],
            vec![sum],
            Box::new(move |gout, _, parents| {
                let x = &parents[0];
                if !x.wants_grad() {
                    return;
                }
                let g = gout[0];
                let mut gx = x.grad_mut();
                for v in gx.iter_mut() {
                    *v += g;
                }
            }),
        )
    }
}

fn stable_sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

fn gelu_value<E: Element>(x: E) -> E {
    let half = E::from_f64(0.5);
    let a = E::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let b = E::from_f64(0.044_715);
    let u = a * (x + b * x * x * x);
    half * x * (E::one() + u.tanh())
}

fn gelu_derivative<E: Element>(x: E, _y: E) -> E {
    let half = E::from_f64(0.5);
    let a = E::from_f64(0.797_884_560_802_865_4);
    let b = E::from_f64(0.044_715);
    let three = E::from_f64(3.0);
    let u = a * (x + b * x * x * x);
    let t = u.tanh();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * a * (E::one() + three * b * x * x)
}

/// Post-order over the grad-requiring subgraph: parents before children.
fn topo_order<E: Element>(root: &Tensor<E>) -> Vec<Tensor<E>> {
    enum Phase {
        Enter,
        Exit,
    }
    let mut order = Vec::new();
    let mut seen: HashSet<*const ()> = HashSet::new();
    let mut stack: Vec<(Tensor<E>, Phase)> = vec![(root.clone(), Phase::Enter)];
    while let Some((node, phase)) = stack.pop() {
        let key = Rc::as_ptr(&node.inner) as *const ();
        match phase {
            Phase::Enter => {
                if !seen.insert(key) {
                    continue;
                }
                let parents = node.inner.parents.clone();
                stack.push((node, Phase::Exit));
                for p in parents {
                    if p.inner.requires_grad && !seen.contains(&(Rc::as_ptr(&p.inner) as *const ())) {
                        stack.push((p, Phase::Enter));
                    }
                }
            }
            Phase::Exit => order.push(node),
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_at_zero_is_ln2() {
        let x = Tensor::<f64>::scalar(0.0);
        let y = x.softplus();
        assert!((y.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let x = Tensor::<f32>::from_vec(&[2], vec![-100.0, 100.0]).unwrap();
        let y = x.sigmoid();
        let v = y.to_vec();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
    }

    #[test]
    fn weighted_sum_gradient_is_input() {
        let w = Tensor::<f64>::param(&[3], vec![2.0, -1.0, 0.5]).unwrap();
        let x = Tensor::<f64>::from_vec(&[3], vec![4.0, 5.0, 6.0]).unwrap();
        let loss = w.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![4.0, 5.0, 6.0]);
        // x does not require grad and gets none
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let w = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let x = Tensor::<f64>::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let loss = w.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        let once = w.grad().unwrap();
        loss.backward().unwrap();
        let twice = w.grad().unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let w = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = w.mul_scalar(3.0);
        let err = y.backward().unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }

    #[test]
    fn shared_operand_accumulates_both_paths() {
        // d(x*x)/dx = 2x
        let x = Tensor::<f64>::param(&[1], vec![3.0]).unwrap();
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 6.0);
    }

    #[test]
    fn diamond_graph_gradients_add() {
        // y = x + x (same node twice through different ops)
        let x = Tensor::<f64>::param(&[1], vec![5.0]).unwrap();
        let a = x.mul_scalar(2.0);
        let b = x.mul_scalar(3.0);
        let y = a.add(&b).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 5.0);
    }

    #[test]
    fn elementwise_shape_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[3, 2]);
        match a.add(&b) {
            Err(Error::ShapeMismatch {
                expected, found, ..
            }) => {
                assert_eq!(expected, vec![2, 3]);
                assert_eq!(found, vec![3, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn clamp_passes_gradient_only_inside() {
        let x = Tensor::<f64>::param(&[3], vec![-0.5, 0.5, 1.5]).unwrap();
        let y = x.clamp(0.0, 1.0).sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn slice_and_flip_are_pure_data_ops() {
        let t = Tensor::<f32>::from_vec(&[1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let s = t.slice_spatial(1, 1, 1, 2).unwrap();
        assert_eq!(s.to_vec(), vec![5., 6.]);
        let f = t.flip_x();
        assert_eq!(f.to_vec(), vec![3., 2., 1., 6., 5., 4.]);
        assert!(!f.requires_grad());
    }

    #[test]
    fn mean_all_of_constant() {
        let t = Tensor::<f32>::full(&[4, 4], 0.25);
        assert!((t.mean_all().item() - 0.25).abs() < 1e-7);
    }
}
