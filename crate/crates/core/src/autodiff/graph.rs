//! Reverse-mode differentiation over dense arrays.
//!
//! A [`Graph`] is an append-only arena of nodes; insertion order is a
//! topological order, so the backward pass is a single reverse sweep.
//! [`Tensor`] is a cheap handle into the graph. Parameters are bound by
//! name with [`Graph::param`]; binding the same name twice returns the
//! same node, which is how weight sharing works: every use site feeds
//! gradients into one buffer.
//!
//! Shape violations are caller bugs and panic with the primitive name
//! and the offending shapes. Data-dependent failures elsewhere in the
//! crate use `Result`; not here.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::autodiff::array::{strides_of, Array};
use crate::autodiff::params::{GradMap, ParamSet};
use crate::scalar::Scalar;

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Abs(usize),
    Scale { input: usize, alpha: T },
    Softmax { input: usize, axis: usize },
    SumAxis { input: usize, axis: usize },
    Mean(usize),
    Reshape(usize),
    Concat { axis: usize, inputs: Vec<usize> },
    Slice { input: usize, axis: usize, start: usize },
    Conv1dSame { input: usize, weight: usize },
}

struct GraphInner<T> {
    values: Vec<Array<T>>,
    ops: Vec<Op<T>>,
    grads: Vec<Option<Array<T>>>,
    bound: BTreeMap<String, usize>,
}

/// Handle-based computation graph. Clones share the same arena.
pub struct Graph<T: Scalar> {
    inner: Rc<RefCell<GraphInner<T>>>,
}

impl<T: Scalar> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A node handle: an n-dimensional value with an optional gradient slot.
pub struct Tensor<T: Scalar> {
    graph: Graph<T>,
    idx: usize,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            graph: self.graph.clone(),
            idx: self.idx,
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(GraphInner {
                values: Vec::new(),
                ops: Vec::new(),
                grads: Vec::new(),
                bound: BTreeMap::new(),
            })),
        }
    }

    fn push(&self, value: Array<T>, op: Op<T>) -> Tensor<T> {
        debug_assert!(
            value.all_finite(),
            "non-finite output from {}",
            op_name(&op)
        );
        let mut inner = self.inner.borrow_mut();
        let idx = inner.values.len();
        inner.values.push(value);
        inner.ops.push(op);
        inner.grads.push(None);
        Tensor {
            graph: self.clone(),
            idx,
        }
    }

    /// Non-trainable leaf.
    pub fn constant(&self, value: Array<T>) -> Tensor<T> {
        self.push(value, Op::Leaf)
    }

    /// Named trainable leaf. Binding an already-bound name returns the
    /// existing node, so repeated uses share one gradient buffer.
    pub fn param(&self, name: &str, value: &Array<T>) -> Tensor<T> {
        if let Some(&idx) = self.inner.borrow().bound.get(name) {
            let inner = self.inner.borrow();
            assert_eq!(
                inner.values[idx].shape(),
                value.shape(),
                "param {name:?} rebound with shape {:?}, was {:?}",
                value.shape(),
                inner.values[idx].shape()
            );
            return Tensor {
                graph: self.clone(),
                idx,
            };
        }
        let t = self.push(value.clone(), Op::Leaf);
        self.inner.borrow_mut().bound.insert(name.to_string(), t.idx);
        t
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().values.len()
    }

    /// Clear every gradient slot.
    pub fn reset_grads(&self) {
        for g in self.inner.borrow_mut().grads.iter_mut() {
            *g = None;
        }
    }

    /// Reverse accumulation from a scalar loss. Gradients add into the
    /// per-node slots; call [`Graph::reset_grads`] to start over.
    pub fn backward(&self, loss: &Tensor<T>) {
        assert!(
            Rc::ptr_eq(&self.inner, &loss.graph.inner),
            "backward: loss from a different graph"
        );
        let mut inner = self.inner.borrow_mut();
        assert_eq!(
            inner.values[loss.idx].numel(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            inner.values[loss.idx].shape()
        );
        let n = inner.values.len();
        let mut pass: Vec<Option<Array<T>>> = (0..n).map(|_| None).collect();
        pass[loss.idx] = Some(Array::filled(
            inner.values[loss.idx].shape(),
            T::one(),
        ));

        for out in (0..=loss.idx).rev() {
            let go = match pass[out].take() {
                Some(g) => g,
                None => continue,
            };
            backprop_node(&inner.values, &inner.ops[out], out, &go, &mut pass);
            pass[out] = Some(go);
        }

        for (slot, fresh) in inner.grads.iter_mut().zip(pass.into_iter()) {
            if let Some(f) = fresh {
                match slot {
                    Some(g) => accumulate(g, &f),
                    None => *slot = Some(f),
                }
            }
        }
    }

    /// Backward pass plus gradient extraction for every parameter in
    /// `params`. Parameters the loss never touched get zero gradients.
    pub fn backprop(&self, loss: &Tensor<T>, params: &ParamSet<T>) -> GradMap<T> {
        self.backward(loss);
        let inner = self.inner.borrow();
        let mut map = BTreeMap::new();
        for (name, array) in params.iter() {
            let grad = match inner.bound.get(name) {
                Some(&idx) => inner.grads[idx]
                    .clone()
                    .unwrap_or_else(|| Array::zeros(array.shape())),
                None => Array::zeros(array.shape()),
            };
            map.insert(name.clone(), grad);
        }
        GradMap::new(map)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn value(&self) -> Array<T> {
        self.graph.inner.borrow().values[self.idx].clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().values[self.idx].shape().to_vec()
    }

    pub fn grad(&self) -> Option<Array<T>> {
        self.graph.inner.borrow().grads[self.idx].clone()
    }

    fn same_graph(&self, other: &Tensor<T>, prim: &str) -> Graph<T> {
        assert!(
            Rc::ptr_eq(&self.graph.inner, &other.graph.inner),
            "{prim}: operands from different graphs"
        );
        self.graph.clone()
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let g = self.same_graph(rhs, "add");
        let value = {
            let inner = g.inner.borrow();
            broadcast_binary("add", &inner.values[self.idx], &inner.values[rhs.idx], |a, b| a + b)
        };
        g.push(value, Op::Add(self.idx, rhs.idx))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let g = self.same_graph(rhs, "sub");
        let value = {
            let inner = g.inner.borrow();
            broadcast_binary("sub", &inner.values[self.idx], &inner.values[rhs.idx], |a, b| a - b)
        };
        g.push(value, Op::Sub(self.idx, rhs.idx))
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let g = self.same_graph(rhs, "mul");
        let value = {
            let inner = g.inner.borrow();
            broadcast_binary("mul", &inner.values[self.idx], &inner.values[rhs.idx], |a, b| a * b)
        };
        g.push(value, Op::Mul(self.idx, rhs.idx))
    }

    /// Rank-2 matrix product.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let g = self.same_graph(rhs, "matmul");
        let value = {
            let inner = g.inner.borrow();
            let a = &inner.values[self.idx];
            let b = &inner.values[rhs.idx];
            assert!(
                a.rank() == 2 && b.rank() == 2 && a.shape()[1] == b.shape()[0],
                "matmul: incompatible shapes {:?} x {:?}",
                a.shape(),
                b.shape()
            );
            matmul_nn(a, b)
        };
        g.push(value, Op::MatMul(self.idx, rhs.idx))
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let value = {
            let inner = self.graph.inner.borrow();
            map_unary(&inner.values[self.idx], |x| T::one() / (T::one() + (-x).exp()))
        };
        self.graph.push(value, Op::Sigmoid(self.idx))
    }

    pub fn tanh(&self) -> Tensor<T> {
        let value = {
            let inner = self.graph.inner.borrow();
            map_unary(&inner.values[self.idx], |x| x.tanh())
        };
        self.graph.push(value, Op::Tanh(self.idx))
    }

    pub fn abs(&self) -> Tensor<T> {
        let value = {
            let inner = self.graph.inner.borrow();
            map_unary(&inner.values[self.idx], |x| x.abs())
        };
        self.graph.push(value, Op::Abs(self.idx))
    }

    /// Elementwise affine map `alpha * x + beta`.
    pub fn scale(&self, alpha: T, beta: T) -> Tensor<T> {
        let value = {
            let inner = self.graph.inner.borrow();
            map_unary(&inner.values[self.idx], |x| alpha * x + beta)
        };
        self.graph.push(
            value,
            Op::Scale {
                input: self.idx,
                alpha,
            },
        )
    }

    pub fn softmax(&self, axis: usize) -> Tensor<T> {
        let value = {
            let inner = self.graph.inner.borrow();
            let x = &inner.values[self.idx];
            assert!(
                axis < x.rank(),
                "softmax: axis {axis} out of range for shape {:?}",
                x.shape()
            );
            softmax_forward(x, axis)
        };
        self.graph.push(
            value,
            Op::Softmax {
                input: self.idx,
                axis,
            },
        )
    }

    pub fn sum_axis(&self, axis: usize) -> Tensor<T> {
        let value = {
            let inner = self.graph.inner.borrow();
            let x = &inner.values[self.idx];
            assert!(
                axis < x.rank(),
                "sum_axis: axis {axis} out of range for shape {:?}",
                x.shape()
            );
            sum_axis_forward(x, axis)
        };
        self.graph.push(
            value,
            Op::SumAxis {
                input: self.idx,
                axis,
            },
        )
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&self) -> Tensor<T> {
        let value = {
            let inner = self.graph.inner.borrow();
            let x = &inner.values[self.idx];
            assert!(x.numel() > 0, "mean: empty tensor");
            let sum = x.iter().fold(T::zero(), |acc, &v| acc + v);
            Array::scalar(sum / T::from_usize(x.numel()))
        };
        self.graph.push(value, Op::Mean(self.idx))
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        let value = {
            let inner = self.graph.inner.borrow();
            inner.values[self.idx].clone().reshaped(shape)
        };
        self.graph.push(value, Op::Reshape(self.idx))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Tensor<T> {
        let value = {
            let inner = self.graph.inner.borrow();
            let x = &inner.values[self.idx];
            assert!(
                axis < x.rank() && start + len <= x.shape()[axis],
                "slice: range {start}..{} out of bounds on axis {axis} of {:?}",
                start + len,
                x.shape()
            );
            slice_forward(x, axis, start, len)
        };
        self.graph.push(
            value,
            Op::Slice {
                input: self.idx,
                axis,
                start,
            },
        )
    }

    /// Same-padded 1-D convolution over the middle (time) axis.
    /// Input `(B, T, C_in)`, kernel `(K, C_in, C_out)` with odd `K`.
    pub fn conv1d_same(&self, weight: &Tensor<T>) -> Tensor<T> {
        let g = self.same_graph(weight, "conv1d_same");
        let value = {
            let inner = g.inner.borrow();
            let x = &inner.values[self.idx];
            let w = &inner.values[weight.idx];
            assert!(
                x.rank() == 3 && w.rank() == 3 && w.shape()[0] % 2 == 1 && w.shape()[1] == x.shape()[2],
                "conv1d_same: incompatible shapes {:?} (input) and {:?} (kernel, odd K required)",
                x.shape(),
                w.shape()
            );
            conv1d_forward(x, w)
        };
        g.push(
            value,
            Op::Conv1dSame {
                input: self.idx,
                weight: weight.idx,
            },
        )
    }
}

/// Concatenate along `axis`; all other dimensions must agree.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    assert!(!parts.is_empty(), "concat: no inputs");
    let g = parts[0].graph.clone();
    for p in parts {
        assert!(
            Rc::ptr_eq(&g.inner, &p.graph.inner),
            "concat: operands from different graphs"
        );
    }
    let value = {
        let inner = g.inner.borrow();
        let arrays: Vec<&Array<T>> = parts.iter().map(|p| &inner.values[p.idx]).collect();
        concat_forward(&arrays, axis)
    };
    g.push(
        value,
        Op::Concat {
            axis,
            inputs: parts.iter().map(|p| p.idx).collect(),
        },
    )
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::MatMul(..) => "matmul",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::Abs(..) => "abs",
        Op::Scale { .. } => "scale",
        Op::Softmax { .. } => "softmax",
        Op::SumAxis { .. } => "sum_axis",
        Op::Mean(..) => "mean",
        Op::Reshape(..) => "reshape",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Conv1dSame { .. } => "conv1d_same",
    }
}

// ---------------------------------------------------------------------------
// forward kernels
// ---------------------------------------------------------------------------

fn map_unary<T: Scalar>(x: &Array<T>, f: impl Fn(T) -> T) -> Array<T> {
    Array::from_vec(x.shape(), x.iter().map(|&v| f(v)).collect())
}

fn broadcast_shape(prim: &str, a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(
        a.len(),
        b.len(),
        "{prim}: rank mismatch {a:?} vs {b:?}"
    );
    a.iter()
        .zip(b)
        .map(|(&da, &db)| {
            assert!(
                da == db || da == 1 || db == 1,
                "{prim}: incompatible shapes {a:?} vs {b:?}"
            );
            da.max(db)
        })
        .collect()
}

/// Strides with zeros on broadcast (size-1) axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let real = strides_of(shape);
    shape
        .iter()
        .zip(out_shape)
        .zip(real)
        .map(|((&d, &od), s)| if d == od { s } else { 0 })
        .collect()
}

fn for_each_broadcast<T: Scalar>(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut index = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for lin in 0..numel {
        f(lin, oa, ob);
        for axis in (0..rank).rev() {
            index[axis] += 1;
            oa += a_strides[axis];
            ob += b_strides[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            oa -= a_strides[axis] * out_shape[axis];
            ob -= b_strides[axis] * out_shape[axis];
            index[axis] = 0;
        }
    }
}

fn broadcast_binary<T: Scalar>(
    prim: &str,
    a: &Array<T>,
    b: &Array<T>,
    f: impl Fn(T, T) -> T,
) -> Array<T> {
    if a.shape() == b.shape() {
        let data = a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Array::from_vec(a.shape(), data);
    }
    let out_shape = broadcast_shape(prim, a.shape(), b.shape());
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut out = Array::zeros(&out_shape);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for_each_broadcast::<T>(&out_shape, &sa, &sb, |lin, oa, ob| {
        od[lin] = f(ad[oa], bd[ob]);
    });
    out
}

fn matmul_nn<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Array<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = ad[i * k + kk];
            let brow = &bd[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aik * brow[j];
            }
        }
    }
    Array::from_vec(&[m, n], out)
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
fn matmul_nt<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Array<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for kk in 0..k {
                acc = acc + arow[kk] * brow[kk];
            }
            out[i * n + j] = acc;
        }
    }
    Array::from_vec(&[m, n], out)
}

/// `aᵀ · b` where `a` is `k×m`, `b` is `k×n`.
fn matmul_tn<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Array<T> {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for kk in 0..k {
        let arow = &ad[kk * m..(kk + 1) * m];
        let brow = &bd[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aki * brow[j];
            }
        }
    }
    Array::from_vec(&[m, n], out)
}

/// (outer, len, inner) decomposition for lane iteration along `axis`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn softmax_forward<T: Scalar>(x: &Array<T>, axis: usize) -> Array<T> {
    let (outer, len, inner) = lanes(x.shape(), axis);
    let mut out = x.clone();
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(od[base + j * inner]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (od[base + j * inner] - max).exp();
                od[base + j * inner] = e;
                sum = sum + e;
            }
            for j in 0..len {
                od[base + j * inner] = od[base + j * inner] / sum;
            }
        }
    }
    out
}

fn sum_axis_forward<T: Scalar>(x: &Array<T>, axis: usize) -> Array<T> {
    let (outer, len, inner) = lanes(x.shape(), axis);
    let mut out_shape = x.shape().to_vec();
    out_shape.remove(axis);
    let mut out = Array::zeros(&out_shape);
    let od = out.data_mut();
    let xd = x.data();
    for o in 0..outer {
        for j in 0..len {
            let base = o * len * inner + j * inner;
            let obase = o * inner;
            for i in 0..inner {
                od[obase + i] = od[obase + i] + xd[base + i];
            }
        }
    }
    out
}

fn slice_forward<T: Scalar>(x: &Array<T>, axis: usize, start: usize, len: usize) -> Array<T> {
    let (outer, full, inner) = lanes(x.shape(), axis);
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let mut out = Array::zeros(&out_shape);
    let od = out.data_mut();
    let xd = x.data();
    for o in 0..outer {
        let src = o * full * inner + start * inner;
        let dst = o * len * inner;
        od[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
    }
    out
}

fn concat_forward<T: Scalar>(parts: &[&Array<T>], axis: usize) -> Array<T> {
    let first = parts[0];
    assert!(
        axis < first.rank(),
        "concat: axis {axis} out of range for shape {:?}",
        first.shape()
    );
    let mut out_shape = first.shape().to_vec();
    let mut total = 0usize;
    for p in parts {
        assert_eq!(p.rank(), first.rank(), "concat: rank mismatch");
        for (d, (&a, &b)) in p.shape().iter().zip(first.shape()).enumerate() {
            assert!(
                d == axis || a == b,
                "concat: shape mismatch {:?} vs {:?} off axis {axis}",
                p.shape(),
                first.shape()
            );
        }
        total += p.shape()[axis];
    }
    out_shape[axis] = total;
    let (outer, _, inner) = lanes(&out_shape, axis);
    let mut out = Array::zeros(&out_shape);
    let od = out.data_mut();
    for o in 0..outer {
        let mut offset = 0usize;
        for p in parts {
            let len = p.shape()[axis];
            let src = o * len * inner;
            let dst = o * total * inner + offset * inner;
            od[dst..dst + len * inner].copy_from_slice(&p.data()[src..src + len * inner]);
            offset += len;
        }
    }
    out
}

fn conv1d_forward<T: Scalar>(x: &Array<T>, w: &Array<T>) -> Array<T> {
    let (b, t, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, _, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let pad = k / 2;
    let mut out = Array::zeros(&[b, t, cout]);
    let od = out.data_mut();
    let (xd, wd) = (x.data(), w.data());
    for bi in 0..b {
        for ti in 0..t {
            let obase = (bi * t + ti) * cout;
            for kk in 0..k {
                let si = ti + kk;
                if si < pad || si - pad >= t {
                    continue;
                }
                let xbase = (bi * t + (si - pad)) * cin;
                let wbase = kk * cin * cout;
                for ci in 0..cin {
                    let xv = xd[xbase + ci];
                    let wrow = &wd[wbase + ci * cout..wbase + (ci + 1) * cout];
                    let orow = &mut od[obase..obase + cout];
                    for co in 0..cout {
                        orow[co] = orow[co] + xv * wrow[co];
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

fn accumulate<T: Scalar>(into: &mut Array<T>, from: &Array<T>) {
    debug_assert_eq!(into.shape(), from.shape());
    for (a, &b) in into.data_mut().iter_mut().zip(from.iter()) {
        *a += b;
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Array<T>>, shape: &[usize], f: impl FnOnce(&mut Array<T>)) {
    let g = slot.get_or_insert_with(|| Array::zeros(shape));
    f(g);
}

fn backprop_node<T: Scalar>(
    values: &[Array<T>],
    op: &Op<T>,
    out: usize,
    go: &Array<T>,
    pass: &mut Vec<Option<Array<T>>>,
) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            backprop_broadcast(values, *a, go, pass, |_, g| g);
            backprop_broadcast(values, *b, go, pass, |_, g| g);
        }
        Op::Sub(a, b) => {
            backprop_broadcast(values, *a, go, pass, |_, g| g);
            backprop_broadcast(values, *b, go, pass, |_, g| -g);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&values[*a], &values[*b]);
            backprop_broadcast_with(values, *a, bv, go, pass);
            backprop_broadcast_with(values, *b, av, go, pass);
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (&values[*a], &values[*b]);
            add_into(&mut pass[*a], av.shape(), |g| accumulate(g, &matmul_nt(go, bv)));
            add_into(&mut pass[*b], bv.shape(), |g| accumulate(g, &matmul_tn(av, go)));
        }
        Op::Sigmoid(a) => {
            let y = &values[out];
            add_into(&mut pass[*a], values[*a].shape(), |g| {
                for ((gd, &yd), &god) in g.data_mut().iter_mut().zip(y.iter()).zip(go.iter()) {
                    *gd += god * yd * (T::one() - yd);
                }
            });
        }
        Op::Tanh(a) => {
            let y = &values[out];
            add_into(&mut pass[*a], values[*a].shape(), |g| {
                for ((gd, &yd), &god) in g.data_mut().iter_mut().zip(y.iter()).zip(go.iter()) {
                    *gd += god * (T::one() - yd * yd);
                }
            });
        }
        Op::Abs(a) => {
            let x = &values[*a];
            add_into(&mut pass[*a], x.shape(), |g| {
                for ((gd, &xd), &god) in g.data_mut().iter_mut().zip(x.iter()).zip(go.iter()) {
                    // subgradient at zero is zero
                    let s = if xd > T::zero() {
                        T::one()
                    } else if xd < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    *gd += god * s;
                }
            });
        }
        Op::Scale { input, alpha } => {
            add_into(&mut pass[*input], values[*input].shape(), |g| {
                for (gd, &god) in g.data_mut().iter_mut().zip(go.iter()) {
                    *gd += *alpha * god;
                }
            });
        }
        Op::Softmax { input, axis } => {
            let y = &values[out];
            let (outer, len, inner) = lanes(y.shape(), *axis);
            add_into(&mut pass[*input], values[*input].shape(), |g| {
                let gd = g.data_mut();
                let (yd, god) = (y.data(), go.data());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            let p = base + j * inner;
                            dot = dot + god[p] * yd[p];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            gd[p] += yd[p] * (god[p] - dot);
                        }
                    }
                }
            });
        }
        Op::SumAxis { input, axis } => {
            let x = &values[*input];
            let (outer, len, inner) = lanes(x.shape(), *axis);
            add_into(&mut pass[*input], x.shape(), |g| {
                let gd = g.data_mut();
                let god = go.data();
                for o in 0..outer {
                    for j in 0..len {
                        let base = o * len * inner + j * inner;
                        let obase = o * inner;
                        for i in 0..inner {
                            gd[base + i] += god[obase + i];
                        }
                    }
                }
            });
        }
        Op::Mean(a) => {
            let x = &values[*a];
            let scale = T::one() / T::from_usize(x.numel());
            let god = go.item();
            add_into(&mut pass[*a], x.shape(), |g| {
                for gd in g.data_mut().iter_mut() {
                    *gd += god * scale;
                }
            });
        }
        Op::Reshape(a) => {
            add_into(&mut pass[*a], values[*a].shape(), |g| {
                for (gd, &god) in g.data_mut().iter_mut().zip(go.iter()) {
                    *gd += god;
                }
            });
        }
        Op::Concat { axis, inputs } => {
            let total = values[out].shape()[*axis];
            let (outer, _, inner) = lanes(values[out].shape(), *axis);
            let god = go.data();
            let mut offset = 0usize;
            for &inp in inputs {
                let len = values[inp].shape()[*axis];
                add_into(&mut pass[inp], values[inp].shape(), |g| {
                    let gd = g.data_mut();
                    for o in 0..outer {
                        let src = o * total * inner + offset * inner;
                        let dst = o * len * inner;
                        for i in 0..len * inner {
                            gd[dst + i] += god[src + i];
                        }
                    }
                });
                offset += len;
            }
        }
        Op::Slice { input, axis, start } => {
            let x = &values[*input];
            let (outer, full, inner) = lanes(x.shape(), *axis);
            let len = values[out].shape()[*axis];
            add_into(&mut pass[*input], x.shape(), |g| {
                let gd = g.data_mut();
                let god = go.data();
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        gd[dst + i] += god[src + i];
                    }
                }
            });
        }
        Op::Conv1dSame { input, weight } => {
            let x = &values[*input];
            let w = &values[*weight];
            let (b, t, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (k, _, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            let pad = k / 2;
            let god = go.data();
            add_into(&mut pass[*input], x.shape(), |g| {
                let gd = g.data_mut();
                let wd = w.data();
                for bi in 0..b {
                    for ti in 0..t {
                        let obase = (bi * t + ti) * cout;
                        for kk in 0..k {
                            let si = ti + kk;
                            if si < pad || si - pad >= t {
                                continue;
                            }
                            let xbase = (bi * t + (si - pad)) * cin;
                            let wbase = kk * cin * cout;
                            for ci in 0..cin {
                                let wrow = &wd[wbase + ci * cout..wbase + (ci + 1) * cout];
                                let mut acc = T::zero();
                                for co in 0..cout {
                                    acc = acc + wrow[co] * god[obase + co];
                                }
                                gd[xbase + ci] += acc;
                            }
                        }
                    }
                }
            });
            add_into(&mut pass[*weight], w.shape(), |g| {
                let gd = g.data_mut();
                let xd = x.data();
                for bi in 0..b {
                    for ti in 0..t {
                        let obase = (bi * t + ti) * cout;
                        for kk in 0..k {
                            let si = ti + kk;
                            if si < pad || si - pad >= t {
                                continue;
                            }
                            let xbase = (bi * t + (si - pad)) * cin;
                            let wbase = kk * cin * cout;
                            for ci in 0..cin {
                                let xv = xd[xbase + ci];
                                let grow = &mut gd[wbase + ci * cout..wbase + (ci + 1) * cout];
                                for co in 0..cout {
                                    grow[co] += xv * god[obase + co];
                                }
                            }
                        }
                    }
                }
            });
        }
    }
}

/// Gradient of a broadcast add/sub endpoint: map `go` through `f` and
/// reduce over the axes that were broadcast.
fn backprop_broadcast<T: Scalar>(
    values: &[Array<T>],
    target: usize,
    go: &Array<T>,
    pass: &mut Vec<Option<Array<T>>>,
    f: impl Fn(T, T) -> T,
) {
    let shape = values[target].shape().to_vec();
    if shape == go.shape() {
        add_into(&mut pass[target], &shape, |g| {
            for ((gd, &god), &xv) in g
                .data_mut()
                .iter_mut()
                .zip(go.iter())
                .zip(values[target].iter())
            {
                *gd += f(xv, god);
            }
        });
        return;
    }
    let st = broadcast_strides(&shape, go.shape());
    let zero_strides = vec![0usize; go.rank()];
    add_into(&mut pass[target], &shape, |g| {
        let gd = g.data_mut();
        let god = go.data();
        for_each_broadcast::<T>(go.shape(), &st, &zero_strides, |lin, ot, _| {
            gd[ot] += f(T::zero(), god[lin]);
        });
    });
}

/// Gradient of a broadcast multiply endpoint: `d target += go * other`.
fn backprop_broadcast_with<T: Scalar>(
    values: &[Array<T>],
    target: usize,
    other: &Array<T>,
    go: &Array<T>,
    pass: &mut Vec<Option<Array<T>>>,
) {
    let shape = values[target].shape().to_vec();
    if shape == go.shape() && other.shape() == go.shape() {
        add_into(&mut pass[target], &shape, |g| {
            for ((gd, &god), &ov) in g.data_mut().iter_mut().zip(go.iter()).zip(other.iter()) {
                *gd += god * ov;
            }
        });
        return;
    }
    let st = broadcast_strides(&shape, go.shape());
    let so = broadcast_strides(other.shape(), go.shape());
    add_into(&mut pass[target], &shape, |g| {
        let gd = g.data_mut();
        let (god, od) = (go.data(), other.data());
        for_each_broadcast::<T>(go.shape(), &st, &so, |lin, ot, oo| {
            gd[ot] += god[lin] * od[oo];
        });
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_graph() -> (Graph<f64>, Tensor<f64>, Tensor<f64>) {
        let g = Graph::new();
        let w = g.param("w", &Array::from_vec(&[1, 1], vec![3.0]));
        let x = g.constant(Array::from_vec(&[1, 1], vec![2.0]));
        (g, w, x)
    }

    #[test]
    fn linear_gradient() {
        let (g, w, x) = scalar_graph();
        let loss = w.mul(&x).mean();
        g.backward(&loss);
        assert_eq!(w.grad().unwrap().data(), &[2.0]);
    }

    #[test]
    fn sigmoid_fixed_point_and_slope() {
        let g = Graph::<f64>::new();
        let z = g.param("z", &Array::scalar(0.0));
        let y = z.sigmoid();
        assert_eq!(y.value().item(), 0.5);
        g.backward(&y);
        assert!((z.grad().unwrap().item() - 0.25).abs() < 1e-15);
        assert_eq!(g.constant(Array::scalar(0.0)).tanh().value().item(), 0.0);
    }

    #[test]
    fn matmul_identity_passthrough() {
        let g = Graph::<f64>::new();
        let eye = g.constant(Array::from_vec(
            &[3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ));
        let x = g.constant(Array::from_vec(&[3, 2], (0..6).map(|v| v as f64).collect()));
        let y = eye.matmul(&x);
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let g = Graph::<f64>::new();
        let x = g.constant(Array::from_vec(&[1, 3], vec![0.7, 0.7, 0.7]));
        let y = x.softmax(1);
        for &v in y.value().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::<f64>::new();
        let x = g.constant(Array::from_vec(&[2, 4], vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.0, 2.0, 4.0]));
        let y = x.softmax(1).value();
        for row in y.data().chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn mae_subgradient_away_from_zero() {
        let g = Graph::<f64>::new();
        let p = g.param("p", &Array::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.constant(Array::from_vec(&[4, 1], vec![0.0, 0.0, 0.0, 0.0]));
        let loss = p.sub(&y).abs().mean();
        g.backward(&loss);
        for &gv in p.grad().unwrap().iter() {
            assert!((gv - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn gradients_accumulate_until_reset() {
        let (g, w, x) = scalar_graph();
        let loss = w.mul(&x).mean();
        g.backward(&loss);
        g.backward(&loss);
        assert_eq!(w.grad().unwrap().data(), &[4.0]);
        g.reset_grads();
        assert!(w.grad().is_none());
        g.backward(&loss);
        assert_eq!(w.grad().unwrap().data(), &[2.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let g = Graph::<f64>::new();
        let mut ps = ParamSet::new();
        ps.insert("used", Array::scalar(2.0));
        ps.insert("unused", Array::from_vec(&[2], vec![1.0, 1.0]));
        let w = g.param("used", ps.get("used"));
        let loss = w.mul(&w).mean();
        let grads = g.backprop(&loss, &ps);
        assert_eq!(grads.get("used").item(), 4.0);
        assert_eq!(grads.get("unused").data(), &[0.0, 0.0]);
    }

    #[test]
    fn rebinding_a_name_shares_the_node() {
        let g = Graph::<f64>::new();
        let a = g.param("w", &Array::scalar(1.5));
        let b = g.param("w", &Array::scalar(1.5));
        assert_eq!(a.idx, b.idx);
        // both uses contribute to one gradient buffer
        let loss = a.add(&b).mean();
        g.backward(&loss);
        assert_eq!(a.grad().unwrap().item(), 2.0);
    }

    #[test]
    #[should_panic(expected = "matmul: incompatible shapes")]
    fn matmul_rejects_bad_shapes() {
        let g = Graph::<f64>::new();
        let a = g.constant(Array::zeros(&[2, 3]));
        let b = g.constant(Array::zeros(&[4, 5]));
        let _ = a.matmul(&b);
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn backward_rejects_non_scalar_loss() {
        let g = Graph::<f64>::new();
        let a = g.constant(Array::zeros(&[2, 2]));
        g.backward(&a);
    }

    #[test]
    fn conv_same_padding_preserves_length() {
        for k in [1usize, 3, 5, 7] {
            let g = Graph::<f64>::new();
            let x = g.constant(Array::from_vec(&[1, 9, 2], (0..18).map(|v| v as f64 * 0.1).collect()));
            let w = g.constant(Array::filled(&[k, 2, 3], 0.01));
            let y = x.conv1d_same(&w);
            assert_eq!(y.shape(), vec![1, 9, 3]);
        }
    }

    #[test]
    fn kernel_size_one_conv_is_tickwise_linear() {
        let g = Graph::<f64>::new();
        let x = g.constant(Array::from_vec(&[1, 4, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]));
        // identity-ish map: out channel j copies in channel j
        let w = g.constant(Array::from_vec(&[1, 2, 2], vec![1., 0., 0., 1.]));
        let y = x.conv1d_same(&w);
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let g = Graph::<f64>::new();
        let a = g.constant(Array::from_vec(&[2, 2], vec![1., 2., 3., 4.]));
        let b = g.constant(Array::from_vec(&[2, 3], vec![5., 6., 7., 8., 9., 10.]));
        let c = concat(&[&a, &b], 1);
        assert_eq!(c.shape(), vec![2, 5]);
        let back = c.slice(1, 2, 3);
        assert_eq!(back.value(), b.value());
    }

    #[test]
    fn graph_runs_in_single_precision() {
        let g = Graph::<f32>::new();
        let w = g.param("w", &Array::from_vec(&[2], vec![0.5f32, -1.0]));
        let loss = w.mul(&w).mean();
        g.backward(&loss);
        let grad = w.grad().unwrap();
        assert!((grad.data()[0] - 0.5).abs() < 1e-6);
        assert!((grad.data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn broadcast_add_bias_row() {
        let g = Graph::<f64>::new();
        let x = g.param("x", &Array::from_vec(&[2, 3], vec![0.; 6]));
        let bias = g.param("b", &Array::from_vec(&[1, 3], vec![1., 2., 3.]));
        let y = x.add(&bias);
        assert_eq!(y.value().data(), &[1., 2., 3., 1., 2., 3.]);
        let loss = y.mean();
        g.backward(&loss);
        // bias gradient sums over the broadcast rows
        for &v in bias.grad().unwrap().iter() {
            assert!((v - 2.0 / 6.0).abs() < 1e-15);
        }
    }
}
