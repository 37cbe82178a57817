//! Dense tensors with reverse-mode differentiation.
//!
//! A `Tensor` is a cheap handle (`Rc`) to an immutable row-major buffer plus
//! autodiff bookkeeping. Ops record a backward closure and their parent
//! handles; `backward()` on a scalar walks the graph in reverse creation
//! order and accumulates gradients additively. Node ids are globally
//! monotone, so "sort by id, descending" is a valid topological order
//! (an op's output is always created after its inputs).
//!
//! Data is immutable once an op has produced it; only `grad` buffers and
//! leaf tensors (parameters, via [`Tensor::update_data`]) may change.
//! A single graph is built and walked by one logical thread; kernels may
//! parallelize internally over disjoint output regions.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::element::{Dtype, Element};
use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` without recording autodiff state; intermediate tensors are freed
/// as soon as their consumers finish. Used by all inference paths.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn<E> = Box<dyn Fn(&[E])>;

struct Inner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    parents: Vec<Tensor<E>>,
    backward: Option<BackwardFn<E>>,
}

pub struct Tensor<E: Element> {
    inner: Rc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    // ------------------------------------------------------------------
    // Construction
    // ------------------------------------------------------------------

    fn leaf(shape: &[usize], data: Vec<E>, requires_grad: bool) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Constant leaf (no gradient).
    pub fn new(shape: &[usize], data: Vec<E>) -> Self {
        Tensor::leaf(shape, data, false)
    }

    /// Trainable leaf; gradients accumulate here.
    pub fn param(shape: &[usize], data: Vec<E>) -> Self {
        Tensor::leaf(shape, data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape, vec![E::zero(); shape.iter().product()])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::new(shape, vec![E::one(); shape.iter().product()])
    }

    pub fn scalar(v: E) -> Self {
        Tensor::new(&[1], vec![v])
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Self {
        Tensor::new(shape, data.iter().map(|&v| E::from_f64(v)).collect())
    }

    /// Output of an op. Parents and the backward closure are recorded only
    /// when gradients are enabled and some parent needs them.
    pub fn from_op(
        shape: &[usize],
        data: Vec<E>,
        parents: &[&Tensor<E>],
        backward: impl Fn(&[E]) + 'static,
    ) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let track = grad_enabled() && parents.iter().any(|p| p.inner.requires_grad);
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: track,
                parents: if track {
                    parents.iter().map(|p| (*p).clone()).collect()
                } else {
                    Vec::new()
                },
                backward: if track {
                    Some(Box::new(backward))
                } else {
                    None
                },
            }),
        }
    }

    // ------------------------------------------------------------------
    // Accessors
    // ------------------------------------------------------------------

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn dtype(&self) -> Dtype {
        E::DTYPE
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    /// Gradient buffer, zeros if the tensor was never reached by backward.
    pub fn grad_or_zeros(&self) -> Vec<E> {
        self.inner
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![E::zero(); self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// In-place mutation of a leaf's data (optimizer steps, init). Must not
    /// be called on tensors that already participate in a live graph.
    pub fn update_data(&self, f: impl FnOnce(&mut [E])) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// Constant copy, cut off from the graph.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::new(&self.inner.shape, self.to_vec())
    }

    /// Convert between element types (forward values only).
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor::new(
            &self.inner.shape,
            self.data().iter().map(|v| F::from_f64(v.as_f64())).collect(),
        )
    }

    pub fn accum_grad(&self, delta: &[E]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (o, &d) in buf.iter_mut().zip(delta) {
                    *o += d;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse-mode sweep from a scalar. Gradients accumulate additively
    /// across multiple uses of a tensor; call `zero_grad` between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::arg(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.requires_grad {
            return Ok(()); // nothing reachable
        }

        // Collect every node reachable through parent links.
        let mut stack = vec![self.clone()];
        let mut seen = std::collections::HashSet::new();
        let mut nodes: Vec<Tensor<E>> = Vec::new();
        while let Some(t) = stack.pop() {
            if !seen.insert(t.inner.id) {
                continue;
            }
            for p in &t.inner.parents {
                if p.inner.requires_grad {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        // Children were created after parents: descending id = reverse topo.
        nodes.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));

        self.accum_grad(&[E::one()]);
        for node in &nodes {
            if let Some(f) = &node.inner.backward {
                let g = node.inner.grad.borrow();
                if let Some(g) = g.as_ref() {
                    f(g);
                }
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Elementwise / shape ops (bigger kernels live in `ops`)
    // ------------------------------------------------------------------

    pub fn add(&self, other: &Tensor<E>) -> Tensor<E> {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(self.shape(), data, &[self, other], move |g| {
            if pa.requires_grad() {
                pa.accum_grad(g);
            }
            if pb.requires_grad() {
                pb.accum_grad(g);
            }
        })
    }

    pub fn sub(&self, other: &Tensor<E>) -> Tensor<E> {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(self.shape(), data, &[self, other], move |g| {
            if pa.requires_grad() {
                pa.accum_grad(g);
            }
            if pb.requires_grad() {
                let neg: Vec<E> = g.iter().map(|&v| -v).collect();
                pb.accum_grad(&neg);
            }
        })
    }

    pub fn mul(&self, other: &Tensor<E>) -> Tensor<E> {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(self.shape(), data, &[self, other], move |g| {
            if pa.requires_grad() {
                let d: Vec<E> = g.iter().zip(pb.data().iter()).map(|(&g, &b)| g * b).collect();
                pa.accum_grad(&d);
            }
            if pb.requires_grad() {
                let d: Vec<E> = g.iter().zip(pa.data().iter()).map(|(&g, &a)| g * a).collect();
                pb.accum_grad(&d);
            }
        })
    }

    pub fn scale(&self, s: f64) -> Tensor<E> {
        let sv = E::from_f64(s);
        let data = self.data().iter().map(|&x| x * sv).collect();
        let p = self.clone();
        Tensor::from_op(self.shape(), data, &[self], move |g| {
            let d: Vec<E> = g.iter().map(|&v| v * sv).collect();
            p.accum_grad(&d);
        })
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<E> {
        let sv = E::from_f64(s);
        let data = self.data().iter().map(|&x| x + sv).collect();
        let p = self.clone();
        Tensor::from_op(self.shape(), data, &[self], move |g| {
            p.accum_grad(g);
        })
    }

    pub fn neg(&self) -> Tensor<E> {
        self.scale(-1.0)
    }

    pub fn abs(&self) -> Tensor<E> {
        let data = self.data().iter().map(|&x| x.abs()).collect();
        let p = self.clone();
        let sign: Vec<E> = self
            .data()
            .iter()
            .map(|&x| {
                if x > E::zero() {
                    E::one()
                } else if x < E::zero() {
                    -E::one()
                } else {
                    E::zero()
                }
            })
            .collect();
        Tensor::from_op(self.shape(), data, &[self], move |g| {
            let d: Vec<E> = g.iter().zip(&sign).map(|(&g, &s)| g * s).collect();
            p.accum_grad(&d);
        })
    }

    pub fn sum(&self) -> Tensor<E> {
        let s: E = self.data().iter().copied().sum();
        let p = self.clone();
        let n = self.numel();
        Tensor::from_op(&[1], vec![s], &[self], move |g| {
            p.accum_grad(&vec![g[0]; n]);
        })
    }

    pub fn mean(&self) -> Tensor<E> {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// 2-D matrix product [m,k]·[k,n] -> [m,n].
    pub fn matmul(&self, other: &Tensor<E>) -> Tensor<E> {
        assert_eq!(self.shape().len(), 2, "matmul lhs must be 2-D");
        assert_eq!(other.shape().len(), 2, "matmul rhs must be 2-D");
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![E::zero(); m * n];
        super::matmul::mm_nn(m, k, n, &self.data(), &other.data(), &mut out);
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(&[m, n], out, &[self, other], move |g| {
            if pa.requires_grad() {
                let mut da = vec![E::zero(); m * k];
                super::matmul::mm_nt(m, n, k, g, &pb.data(), &mut da);
                pa.accum_grad(&da);
            }
            if pb.requires_grad() {
                let mut db = vec![E::zero(); k * n];
                super::matmul::mm_tn(k, m, n, &pa.data(), g, &mut db);
                pb.accum_grad(&db);
            }
        })
    }

    /// Copy with a new shape (same element count, same linear order).
    pub fn reshape(&self, shape: &[usize]) -> Tensor<E> {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape: {:?} -> {:?}",
            self.shape(),
            shape
        );
        let p = self.clone();
        Tensor::from_op(shape, self.to_vec(), &[self], move |g| {
            p.accum_grad(g);
        })
    }

    /// Axis permutation (generalized transpose); copies.
    pub fn permute(&self, perm: &[usize]) -> Tensor<E> {
        let src_shape = self.shape().to_vec();
        assert_eq!(perm.len(), src_shape.len());
        let dst_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
        let data = permute_copy(&self.data(), &src_shape, perm);
        let p = self.clone();
        // Backward permutes the gradient by the inverse permutation.
        let mut inv = vec![0usize; perm.len()];
        for (i, &p_) in perm.iter().enumerate() {
            inv[p_] = i;
        }
        let dst_shape_c = dst_shape.clone();
        Tensor::from_op(&dst_shape, data, &[self], move |g| {
            p.accum_grad(&permute_copy(g, &dst_shape_c, &inv));
        })
    }

    /// Slice along `axis`: indices [start, start+len).
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Tensor<E> {
        let shape = self.shape().to_vec();
        assert!(axis < shape.len() && start + len <= shape[axis]);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ax = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let d = self.data();
            for o in 0..outer {
                let base = o * ax * inner + start * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
        }
        let mut new_shape = shape.clone();
        new_shape[axis] = len;
        let p = self.clone();
        let total = self.numel();
        Tensor::from_op(&new_shape, out, &[self], move |g| {
            let mut d = vec![E::zero(); total];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = o * ax * inner + start * inner;
                d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            p.accum_grad(&d);
        })
    }

    /// Repeat the whole tensor `reps` times along a new leading axis.
    pub fn tile_outer(&self, reps: usize) -> Tensor<E> {
        let shape = self.shape().to_vec();
        let n = self.numel();
        let mut data = Vec::with_capacity(n * reps);
        {
            let d = self.data();
            for _ in 0..reps {
                data.extend_from_slice(&d);
            }
        }
        let mut new_shape = vec![reps];
        new_shape.extend_from_slice(&shape);
        let p = self.clone();
        Tensor::from_op(&new_shape, data, &[self], move |g| {
            let mut d = vec![E::zero(); n];
            for r in 0..reps {
                for (o, &gv) in d.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                    *o += gv;
                }
            }
            p.accum_grad(&d);
        })
    }
}

/// Concatenate along `axis`. All other extents must match.
pub fn concat<E: Element>(tensors: &[&Tensor<E>], axis: usize) -> Tensor<E> {
    assert!(!tensors.is_empty());
    let base = tensors[0].shape().to_vec();
    for t in tensors {
        assert_eq!(t.shape().len(), base.len(), "concat: rank mismatch");
        for (i, (&a, &b)) in t.shape().iter().zip(&base).enumerate() {
            if i != axis {
                assert_eq!(a, b, "concat: extent mismatch on axis {i}");
            }
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let ax_total: usize = tensors.iter().map(|t| t.shape()[axis]).sum();
    let mut out = vec![E::zero(); outer * ax_total * inner];
    let mut offset = 0usize;
    for t in tensors {
        let ax = t.shape()[axis];
        let d = t.data();
        for o in 0..outer {
            let src = o * ax * inner;
            let dst = o * ax_total * inner + offset * inner;
            out[dst..dst + ax * inner].copy_from_slice(&d[src..src + ax * inner]);
        }
        offset += ax;
    }
    let mut new_shape = base.clone();
    new_shape[axis] = ax_total;

    let parents: Vec<Tensor<E>> = tensors.iter().map(|t| (*t).clone()).collect();
    let axes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
    let parent_refs: Vec<&Tensor<E>> = tensors.to_vec();
    Tensor::from_op(&new_shape, out, &parent_refs, move |g| {
        let mut offset = 0usize;
        for (t, &ax) in parents.iter().zip(&axes) {
            if t.requires_grad() {
                let mut d = vec![E::zero(); outer * ax * inner];
                for o in 0..outer {
                    let src = o * ax_total * inner + offset * inner;
                    let dst = o * ax * inner;
                    d[dst..dst + ax * inner].copy_from_slice(&g[src..src + ax * inner]);
                }
                t.accum_grad(&d);
            }
            offset += ax;
        }
    })
}

fn permute_copy<E: Element>(src: &[E], src_shape: &[usize], perm: &[usize]) -> Vec<E> {
    let rank = src_shape.len();
    let dst_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let n: usize = src_shape.iter().product();
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * src_shape[i + 1];
    }
    // stride in the source for each destination axis
    let dst_src_strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut out = vec![E::zero(); n];
    let mut idx = vec![0usize; rank];
    let mut src_off = 0usize;
    for o in out.iter_mut() {
        *o = src[src_off];
        // odometer increment over destination indices
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src_off += dst_src_strides[ax];
            if idx[ax] < dst_shape[ax] {
                break;
            }
            src_off -= dst_src_strides[ax] * dst_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_sum_is_ones() {
        let x = Tensor::<f64>::param(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let loss = x.sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_quadratic() {
        let x = Tensor::<f64>::param(&[3], vec![1.0, -2.0, 0.5]);
        let loss = x.mul(&x).sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn grads_accumulate_across_reuse() {
        let x = Tensor::<f64>::param(&[2], vec![3.0, 5.0]);
        let y = x.add(&x).sum(); // dy/dx = 2
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]);
        let y = x.add(&x);
        assert!(y.backward().is_err());
    }

    #[test]
    fn unreachable_param_reads_zero_grad() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]);
        let y = Tensor::<f64>::param(&[2], vec![1.0, 2.0]);
        let loss = x.sum();
        loss.backward().unwrap();
        assert_eq!(y.grad(), None);
        assert_eq!(y.grad_or_zeros(), vec![0.0, 0.0]);
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]);
        let y = no_grad(|| x.add(&x));
        assert!(!y.requires_grad());
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::<f64>::new(&[2, 3, 4], (0..24).map(|i| i as f64).collect());
        let y = x.permute(&[2, 0, 1]);
        assert_eq!(y.shape(), &[4, 2, 3]);
        let z = y.permute(&[1, 2, 0]);
        assert_eq!(z.to_vec(), x.to_vec());
    }

    #[test]
    fn permute_matches_manual_index() {
        let x = Tensor::<f64>::new(&[2, 3, 4], (0..24).map(|i| i as f64).collect());
        let y = x.permute(&[1, 2, 0]); // [3,4,2]
        let xd = x.to_vec();
        let yd = y.to_vec();
        for a in 0..3 {
            for b in 0..4 {
                for c in 0..2 {
                    assert_eq!(yd[a * 8 + b * 2 + c], xd[c * 12 + a * 4 + b]);
                }
            }
        }
    }

    #[test]
    fn concat_and_slice_invert() {
        let a = Tensor::<f64>::param(&[2, 2, 3], (0..12).map(|i| i as f64).collect());
        let b = Tensor::<f64>::param(&[2, 1, 3], (100..106).map(|i| i as f64).collect());
        let c = concat(&[&a, &b], 1);
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(c.slice(1, 0, 2).to_vec(), a.to_vec());
        assert_eq!(c.slice(1, 2, 1).to_vec(), b.to_vec());
        // gradient splits back
        let loss = c.sum();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 12]);
        assert_eq!(b.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn tile_outer_backward_sums() {
        let x = Tensor::<f64>::param(&[3], vec![1.0, 2.0, 3.0]);
        let y = x.tile_outer(4);
        assert_eq!(y.shape(), &[4, 3]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0; 3]);
    }
}
