//! Eager reverse-mode automatic differentiation on dynamic-rank arrays.
//!
//! Every operation appends a node to a shared tape and computes its value
//! immediately. Backward rules are expressed with the same tape primitives,
//! so gradients are themselves differentiable tensors — the regularizers
//! that penalize gradient norms (R1, path length) backpropagate through
//! `grad()` with no special casing.

mod conv;

use crate::num::Scalar;
use ndarray::prelude::*;
use ndarray::{IxDyn, Zip};
use std::cell::RefCell;
use std::rc::Rc;

#[derive(Clone)]
enum Op<T: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(T),
    AddScalar(T),
    Square,
    Sqrt,
    Abs,
    Exp,
    Ln,
    LeakyRelu { slope: T },
    Sum,
    SumAxes {
        #[allow(dead_code)]
        axes: Vec<usize>,
    },
    SumTo {
        #[allow(dead_code)]
        shape: Vec<usize>,
    },
    BroadcastTo { from: Vec<usize> },
    Reshape { from: Vec<usize> },
    Transpose,
    MatMul,
    SwapAxes(usize, usize),
    FlipSpatial,
    FlipW,
    Translate { dy: isize, dx: isize },
    UpsampleNearest2x,
    PoolSum2x,
    Conv2d { pad: usize },
    Conv2dWgrad { pad: usize },
    ConvPs { pad: usize },
    ConvPsWgrad { pad: usize },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, full: usize },
    PadZero { axis: usize, before: usize },
    /// Hard mask select. `keep` entries are exactly 0 or 1 and carry no
    /// gradient; where keep=0 the output is the first parent bit for bit.
    Gate { residual: bool, keep: ArrayD<T> },
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    op: Op<T>,
    parents: Vec<usize>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Rc<RefCell<Vec<Node<T>>>>,
}

impl<T: Scalar> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Graph {
            nodes: Rc::clone(&self.nodes),
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    graph: Graph<T>,
    id: usize,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<T>, op: Op<T>, parents: Vec<usize>) -> Tensor<T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            match op {
                Op::Leaf => false, // overridden by var()
                _ => parents.iter().any(|&p| nodes[p].requires_grad),
            }
        };
        self.push_with_grad(value, op, parents, requires_grad)
    }

    fn push_with_grad(
        &self,
        value: ArrayD<T>,
        op: Op<T>,
        parents: Vec<usize>,
        requires_grad: bool,
    ) -> Tensor<T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        Tensor {
            graph: self.clone(),
            id,
        }
    }

    /// Differentiable leaf.
    pub fn var(&self, value: ArrayD<T>) -> Tensor<T> {
        self.push_with_grad(value, Op::Leaf, vec![], true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: ArrayD<T>) -> Tensor<T> {
        self.push_with_grad(value, Op::Leaf, vec![], false)
    }

    pub fn scalar(&self, v: T) -> Tensor<T> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor<T> {
        self.constant(ArrayD::zeros(IxDyn(shape)))
    }

    /// Concatenate along `axis`.
    pub fn concat(&self, parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
        assert!(!parts.is_empty());
        let views: Vec<ArrayD<T>> = parts.iter().map(|t| t.value()).collect();
        let view_refs: Vec<_> = views.iter().map(|a| a.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &view_refs).expect("concat shapes");
        self.push(value, Op::Concat { axis }, parts.iter().map(|t| t.id).collect())
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

fn sum_to_value<T: Scalar>(a: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    let mut r = a.clone();
    while r.ndim() > shape.len() {
        r = r.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && r.shape()[ax] != 1 {
            r = r.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    assert_eq!(r.shape(), shape, "sum_to target mismatch");
    r
}

fn bin_broadcast<T: Scalar>(
    a: &ArrayD<T>,
    b: &ArrayD<T>,
    f: impl Fn(T, T) -> T + Sync,
) -> ArrayD<T> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("lhs broadcast");
    let bv = b.broadcast(IxDyn(&shape)).expect("rhs broadcast");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

impl<T: Scalar> Tensor<T> {
    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> ArrayD<T> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&ArrayD<T>) -> R) -> R {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar read; panics unless the tensor has exactly one element.
    pub fn item(&self) -> T {
        let nodes = self.graph.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.len(), 1, "item() on non-scalar of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    pub fn is_finite(&self) -> bool {
        self.with_value(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Copy the value into a fresh non-differentiable leaf.
    pub fn detach(&self) -> Tensor<T> {
        self.graph.constant(self.value())
    }

    fn unary(&self, value: ArrayD<T>, op: Op<T>) -> Tensor<T> {
        self.graph.push(value, op, vec![self.id])
    }

    fn binary(&self, other: &Tensor<T>, value: ArrayD<T>, op: Op<T>) -> Tensor<T> {
        self.graph.push(value, op, vec![self.id, other.id])
    }

    pub fn add(&self, o: &Tensor<T>) -> Tensor<T> {
        let v = self.with_value(|a| o.with_value(|b| bin_broadcast(a, b, |x, y| x + y)));
        self.binary(o, v, Op::Add)
    }

    pub fn sub(&self, o: &Tensor<T>) -> Tensor<T> {
        let v = self.with_value(|a| o.with_value(|b| bin_broadcast(a, b, |x, y| x - y)));
        self.binary(o, v, Op::Sub)
    }

    pub fn mul(&self, o: &Tensor<T>) -> Tensor<T> {
        let v = self.with_value(|a| o.with_value(|b| bin_broadcast(a, b, |x, y| x * y)));
        self.binary(o, v, Op::Mul)
    }

    pub fn div(&self, o: &Tensor<T>) -> Tensor<T> {
        let v = self.with_value(|a| o.with_value(|b| bin_broadcast(a, b, |x, y| x / y)));
        self.binary(o, v, Op::Div)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(self.with_value(|a| a.mapv(|x| -x)), Op::Neg)
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        self.unary(self.with_value(|a| a.mapv(|x| x * c)), Op::Scale(c))
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.unary(self.with_value(|a| a.mapv(|x| x + c)), Op::AddScalar(c))
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary(self.with_value(|a| a.mapv(|x| x * x)), Op::Square)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary(self.with_value(|a| a.mapv(|x| x.sqrt())), Op::Sqrt)
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(self.with_value(|a| a.mapv(|x| x.abs())), Op::Abs)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(self.with_value(|a| a.mapv(|x| x.exp())), Op::Exp)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary(self.with_value(|a| a.mapv(|x| x.ln())), Op::Ln)
    }

    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        let v = self.with_value(|a| a.mapv(|x| if x > T::zero() { x } else { x * slope }));
        self.unary(v, Op::LeakyRelu { slope })
    }

    /// Reduce every element to a 0-d scalar.
    pub fn sum(&self) -> Tensor<T> {
        let v = self.with_value(|a| ArrayD::from_elem(IxDyn(&[]), a.iter().copied().sum::<T>()));
        self.unary(v, Op::Sum)
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.with_value(|a| a.len());
        self.sum().scale(T::from_real(1.0 / n as f64))
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(&self, axes: &[usize]) -> Tensor<T> {
        let v = self.with_value(|a| {
            let mut r = a.clone();
            let mut sorted = axes.to_vec();
            sorted.sort_unstable();
            for &ax in &sorted {
                r = r.sum_axis(Axis(ax)).insert_axis(Axis(ax));
            }
            r
        });
        self.unary(v, Op::SumAxes { axes: axes.to_vec() })
    }

    /// Reduce a broadcast result back to `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let v = self.with_value(|a| sum_to_value(a, shape));
        self.unary(
            v,
            Op::SumTo {
                shape: shape.to_vec(),
            },
        )
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor<T> {
        let from = self.shape();
        if from == shape {
            return self.clone();
        }
        let v = self.with_value(|a| a.broadcast(IxDyn(shape)).expect("broadcast_to").to_owned());
        self.unary(v, Op::BroadcastTo { from })
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        let from = self.shape();
        let v = self.with_value(|a| {
            a.as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape element count")
        });
        self.unary(v, Op::Reshape { from })
    }

    /// 2-d matrix transpose (owned, standard layout).
    pub fn t(&self) -> Tensor<T> {
        let v = self.with_value(|a| {
            assert_eq!(a.ndim(), 2);
            a.t().as_standard_layout().to_owned().into_dyn()
        });
        self.unary(v, Op::Transpose)
    }

    pub fn matmul(&self, o: &Tensor<T>) -> Tensor<T> {
        let v = self.with_value(|a| {
            o.with_value(|b| {
                let a2 = a.view().into_dimensionality::<Ix2>().expect("lhs 2-d");
                let b2 = b.view().into_dimensionality::<Ix2>().expect("rhs 2-d");
                a2.dot(&b2).into_dyn()
            })
        });
        self.binary(o, v, Op::MatMul)
    }

    pub fn swap_axes(&self, a: usize, b: usize) -> Tensor<T> {
        let v = self.with_value(|arr| {
            let mut view = arr.view();
            view.swap_axes(a, b);
            view.as_standard_layout().to_owned()
        });
        self.unary(v, Op::SwapAxes(a, b))
    }

    /// Reverse the last two axes (kernel rotation by 180 degrees).
    pub fn flip_spatial(&self) -> Tensor<T> {
        let v = self.with_value(|a| {
            let n = a.ndim();
            let mut view = a.view();
            view.invert_axis(Axis(n - 2));
            view.invert_axis(Axis(n - 1));
            view.as_standard_layout().to_owned()
        });
        self.unary(v, Op::FlipSpatial)
    }

    /// Reverse the last axis (horizontal image flip).
    pub fn flip_w(&self) -> Tensor<T> {
        let v = self.with_value(|a| {
            let n = a.ndim();
            let mut view = a.view();
            view.invert_axis(Axis(n - 1));
            view.as_standard_layout().to_owned()
        });
        self.unary(v, Op::FlipW)
    }

    /// Shift the last two axes by (dy, dx), filling with zeros.
    pub fn translate(&self, dy: isize, dx: isize) -> Tensor<T> {
        let v = self.with_value(|a| {
            let nd = a.ndim();
            let h = a.shape()[nd - 2] as isize;
            let w = a.shape()[nd - 1] as isize;
            let mut out = ArrayD::zeros(a.raw_dim());
            let lead: usize = a.shape()[..nd - 2].iter().product();
            let a2 = a
                .view()
                .into_shape_with_order(IxDyn(&[lead, h as usize, w as usize]))
                .unwrap();
            let mut o2 = out
                .view_mut()
                .into_shape_with_order(IxDyn(&[lead, h as usize, w as usize]))
                .unwrap();
            for l in 0..lead {
                for y in 0..h {
                    let sy = y - dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x - dx;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        o2[[l, y as usize, x as usize]] = a2[[l, sy as usize, sx as usize]];
                    }
                }
            }
            out
        });
        self.unary(v, Op::Translate { dy, dx })
    }

    /// Nearest-neighbor 2x upsampling of the last two axes.
    pub fn upsample2x(&self) -> Tensor<T> {
        let v = self.with_value(upsample2x_value);
        self.unary(v, Op::UpsampleNearest2x)
    }

    /// Sum over non-overlapping 2x2 blocks of the last two axes.
    pub fn poolsum2x(&self) -> Tensor<T> {
        let v = self.with_value(poolsum2x_value);
        self.unary(v, Op::PoolSum2x)
    }

    pub fn avgpool2x(&self) -> Tensor<T> {
        self.poolsum2x().scale(T::from_real(0.25))
    }

    /// Stride-1 convolution, `self` is `[N,C,H,W]`, `w` is `[O,I,kh,kw]`.
    pub fn conv2d(&self, w: &Tensor<T>, pad: usize) -> Tensor<T> {
        let v = self.with_value(|x| w.with_value(|wv| conv::conv2d(x, wv, pad)));
        self.binary(w, v, Op::Conv2d { pad })
    }

    /// Per-sample-weight convolution, `w` is `[N,O,I,kh,kw]`.
    pub fn conv_ps(&self, w: &Tensor<T>, pad: usize) -> Tensor<T> {
        let v = self.with_value(|x| w.with_value(|wv| conv::conv_ps(x, wv, pad)));
        self.binary(w, v, Op::ConvPs { pad })
    }

    fn conv2d_wgrad(&self, dy: &Tensor<T>, kh: usize, kw: usize, pad: usize) -> Tensor<T> {
        let v = self.with_value(|x| dy.with_value(|d| conv::conv2d_wgrad(x, d, kh, kw, pad)));
        self.binary(dy, v, Op::Conv2dWgrad { pad })
    }

    fn conv_ps_wgrad(&self, dy: &Tensor<T>, kh: usize, kw: usize, pad: usize) -> Tensor<T> {
        let v = self.with_value(|x| dy.with_value(|d| conv::conv_ps_wgrad(x, d, kh, kw, pad)));
        self.binary(dy, v, Op::ConvPsWgrad { pad })
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Tensor<T> {
        let full = self.shape()[axis];
        let v = self.with_value(|a| {
            a.slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                .as_standard_layout()
                .to_owned()
        });
        self.unary(v, Op::Slice { axis, start, full })
    }

    pub fn pad_zero(&self, axis: usize, before: usize, after: usize) -> Tensor<T> {
        let v = self.with_value(|a| {
            let mut shape = a.shape().to_vec();
            shape[axis] += before + after;
            let mut out = ArrayD::zeros(IxDyn(&shape));
            out.slice_axis_mut(
                Axis(axis),
                ndarray::Slice::from(before..before + a.shape()[axis]),
            )
            .assign(a);
            out
        });
        self.unary(v, Op::PadZero { axis, before })
    }

    /// Mask-gated combination of object features (`self`) and defect
    /// features. `keep` is 1 where the raw mask is non-negative; it is a
    /// plain array, not a tensor, and receives no gradient. Where keep=0
    /// the output is the object feature unchanged, bit for bit.
    pub fn gate(&self, defect: &Tensor<T>, keep: &ArrayD<T>, residual: bool) -> Tensor<T> {
        let v = self.with_value(|fo| {
            defect.with_value(|fd| {
                assert_eq!(fo.shape(), fd.shape(), "gate feature shape mismatch");
                let kb = keep.broadcast(fo.raw_dim()).expect("gate mask broadcast");
                let mut out = fo.clone();
                Zip::from(&mut out).and(fd).and(&kb).for_each(|o, &d, &k| {
                    if k > T::zero() {
                        *o = if residual { *o + d } else { d };
                    }
                });
                out
            })
        });
        self.binary(
            defect,
            v,
            Op::Gate {
                residual,
                keep: keep.clone(),
            },
        )
    }
}

fn upsample2x_value<T: Scalar>(a: &ArrayD<T>) -> ArrayD<T> {
    let nd = a.ndim();
    let h = a.shape()[nd - 2];
    let w = a.shape()[nd - 1];
    let lead: usize = a.shape()[..nd - 2].iter().product();
    let a3 = a
        .view()
        .into_shape_with_order(IxDyn(&[lead, h, w]))
        .unwrap();
    let mut out3 = Array3::<T>::zeros((lead, h * 2, w * 2));
    for l in 0..lead {
        for y in 0..h {
            for x in 0..w {
                let v = a3[[l, y, x]];
                out3[[l, 2 * y, 2 * x]] = v;
                out3[[l, 2 * y, 2 * x + 1]] = v;
                out3[[l, 2 * y + 1, 2 * x]] = v;
                out3[[l, 2 * y + 1, 2 * x + 1]] = v;
            }
        }
    }
    let mut shape = a.shape().to_vec();
    shape[nd - 2] = h * 2;
    shape[nd - 1] = w * 2;
    out3.into_shape_with_order(IxDyn(&shape)).unwrap()
}

fn poolsum2x_value<T: Scalar>(a: &ArrayD<T>) -> ArrayD<T> {
    let nd = a.ndim();
    let h = a.shape()[nd - 2];
    let w = a.shape()[nd - 1];
    assert!(h % 2 == 0 && w % 2 == 0, "poolsum2x needs even spatial dims");
    let lead: usize = a.shape()[..nd - 2].iter().product();
    let a3 = a
        .view()
        .into_shape_with_order(IxDyn(&[lead, h, w]))
        .unwrap();
    let mut out3 = Array3::<T>::zeros((lead, h / 2, w / 2));
    for l in 0..lead {
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                out3[[l, y, x]] = a3[[l, 2 * y, 2 * x]]
                    + a3[[l, 2 * y, 2 * x + 1]]
                    + a3[[l, 2 * y + 1, 2 * x]]
                    + a3[[l, 2 * y + 1, 2 * x + 1]];
            }
        }
    }
    let mut shape = a.shape().to_vec();
    shape[nd - 2] = h / 2;
    shape[nd - 1] = w / 2;
    out3.into_shape_with_order(IxDyn(&shape)).unwrap()
}

/// Reverse-mode gradients of a scalar `output` with respect to `inputs`.
/// The returned tensors live on the same tape and can be differentiated
/// again. Inputs unreachable from `output` get zero gradients.
pub fn grad<T: Scalar>(output: &Tensor<T>, inputs: &[&Tensor<T>]) -> Vec<Tensor<T>> {
    let g = output.graph.clone();
    let limit = output.id + 1;

    // Ancestors of the output that require grad.
    let mut needed = vec![false; limit];
    {
        let nodes = g.nodes.borrow();
        assert_eq!(nodes[output.id].value.len(), 1, "grad needs scalar output");
        let mut stack = vec![output.id];
        while let Some(id) = stack.pop() {
            if needed[id] || !nodes[id].requires_grad {
                continue;
            }
            needed[id] = true;
            stack.extend(nodes[id].parents.iter().copied());
        }
    }

    let mut cot: Vec<Option<Tensor<T>>> = vec![None; limit];
    let seed_shape = output.shape();
    cot[output.id] = Some(g.constant(ArrayD::ones(IxDyn(&seed_shape))));

    for id in (0..limit).rev() {
        if !needed[id] {
            continue;
        }
        let Some(c) = cot[id].clone() else { continue };
        let (op, parents) = {
            let nodes = g.nodes.borrow();
            (nodes[id].op.clone(), nodes[id].parents.clone())
        };
        if matches!(op, Op::Leaf) {
            continue;
        }
        for (pid, contrib) in vjp(&g, id, &op, &parents, &c) {
            let wants = g.nodes.borrow()[pid].requires_grad;
            if !wants {
                continue;
            }
            cot[pid] = Some(match cot[pid].take() {
                Some(existing) => existing.add(&contrib),
                None => contrib,
            });
        }
    }

    inputs
        .iter()
        .map(|inp| {
            assert!(inp.id < limit || cot.get(inp.id).is_none());
            match cot.get(inp.id).and_then(|c| c.clone()) {
                Some(c) => c,
                None => g.constant(ArrayD::zeros(IxDyn(&inp.shape()))),
            }
        })
        .collect()
}

fn vjp<T: Scalar>(
    g: &Graph<T>,
    id: usize,
    op: &Op<T>,
    parents: &[usize],
    cot: &Tensor<T>,
) -> Vec<(usize, Tensor<T>)> {
    let t = |pid: usize| Tensor {
        graph: g.clone(),
        id: pid,
    };
    let this = t(id);
    let pshape = |pid: usize| g.nodes.borrow()[pid].value.shape().to_vec();
    match op {
        Op::Leaf => vec![],
        Op::Add => vec![
            (parents[0], cot.sum_to(&pshape(parents[0]))),
            (parents[1], cot.sum_to(&pshape(parents[1]))),
        ],
        Op::Sub => vec![
            (parents[0], cot.sum_to(&pshape(parents[0]))),
            (parents[1], cot.neg().sum_to(&pshape(parents[1]))),
        ],
        Op::Mul => vec![
            (
                parents[0],
                cot.mul(&t(parents[1])).sum_to(&pshape(parents[0])),
            ),
            (
                parents[1],
                cot.mul(&t(parents[0])).sum_to(&pshape(parents[1])),
            ),
        ],
        Op::Div => {
            let b = t(parents[1]);
            vec![
                (parents[0], cot.div(&b).sum_to(&pshape(parents[0]))),
                (
                    parents[1],
                    cot.mul(&t(parents[0]))
                        .div(&b.square())
                        .neg()
                        .sum_to(&pshape(parents[1])),
                ),
            ]
        }
        Op::Neg => vec![(parents[0], cot.neg())],
        Op::Scale(c) => vec![(parents[0], cot.scale(*c))],
        Op::AddScalar(_) => vec![(parents[0], cot.clone())],
        Op::Square => vec![(
            parents[0],
            cot.mul(&t(parents[0]).scale(T::from_real(2.0))),
        )],
        Op::Sqrt => vec![(parents[0], cot.scale(T::from_real(0.5)).div(&this))],
        Op::Abs => {
            let sign = t(parents[0]).with_value(|v| {
                v.mapv(|x| {
                    if x > T::zero() {
                        T::one()
                    } else if x < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                })
            });
            vec![(parents[0], cot.mul(&g.constant(sign)))]
        }
        Op::Exp => vec![(parents[0], cot.mul(&this))],
        Op::Ln => vec![(parents[0], cot.div(&t(parents[0])))],
        Op::LeakyRelu { slope } => {
            let s = *slope;
            let factor = t(parents[0])
                .with_value(|v| v.mapv(|x| if x > T::zero() { T::one() } else { s }));
            vec![(parents[0], cot.mul(&g.constant(factor)))]
        }
        Op::Sum | Op::SumAxes { .. } | Op::SumTo { .. } => {
            vec![(parents[0], cot.broadcast_to(&pshape(parents[0])))]
        }
        Op::BroadcastTo { from } => vec![(parents[0], cot.sum_to(from))],
        Op::Reshape { from } => vec![(parents[0], cot.reshape(from))],
        Op::Transpose => vec![(parents[0], cot.t())],
        Op::MatMul => vec![
            (parents[0], cot.matmul(&t(parents[1]).t())),
            (parents[1], t(parents[0]).t().matmul(cot)),
        ],
        Op::SwapAxes(a, b) => vec![(parents[0], cot.swap_axes(*a, *b))],
        Op::FlipSpatial => vec![(parents[0], cot.flip_spatial())],
        Op::FlipW => vec![(parents[0], cot.flip_w())],
        Op::Translate { dy, dx } => vec![(parents[0], cot.translate(-dy, -dx))],
        Op::UpsampleNearest2x => vec![(parents[0], cot.poolsum2x())],
        Op::PoolSum2x => vec![(parents[0], cot.upsample2x())],
        Op::Conv2d { pad } => {
            let w = t(parents[1]);
            let ws = pshape(parents[1]);
            let (kh, kw) = (ws[2], ws[3]);
            let flipped = w.flip_spatial().swap_axes(0, 1);
            vec![
                (parents[0], cot.conv2d(&flipped, kh - 1 - pad)),
                (parents[1], t(parents[0]).conv2d_wgrad(cot, kh, kw, *pad)),
            ]
        }
        Op::Conv2dWgrad { pad } => {
            // this = wgrad(x, dy); cot has weight shape [O,I,kh,kw].
            let ws = pshape(id);
            let kh = ws[2];
            let flipped = cot.flip_spatial().swap_axes(0, 1);
            vec![
                (parents[0], t(parents[1]).conv2d(&flipped, kh - 1 - pad)),
                (parents[1], t(parents[0]).conv2d(cot, *pad)),
            ]
        }
        Op::ConvPs { pad } => {
            let w = t(parents[1]);
            let ws = pshape(parents[1]);
            let (kh, kw) = (ws[3], ws[4]);
            let flipped = w.flip_spatial().swap_axes(1, 2);
            vec![
                (parents[0], cot.conv_ps(&flipped, kh - 1 - pad)),
                (parents[1], t(parents[0]).conv_ps_wgrad(cot, kh, kw, *pad)),
            ]
        }
        Op::ConvPsWgrad { pad } => {
            let ws = pshape(id);
            let kh = ws[3];
            let flipped = cot.flip_spatial().swap_axes(1, 2);
            vec![
                (parents[0], t(parents[1]).conv_ps(&flipped, kh - 1 - pad)),
                (parents[1], t(parents[0]).conv_ps(cot, *pad)),
            ]
        }
        Op::Concat { axis } => {
            let mut out = Vec::with_capacity(parents.len());
            let mut start = 0;
            for &pid in parents {
                let len = pshape(pid)[*axis];
                out.push((pid, cot.slice_axis(*axis, start, len)));
                start += len;
            }
            out
        }
        Op::Slice { axis, start, full } => {
            let len = pshape(parents[0])[*axis] - 0;
            let _ = len;
            let here = g.nodes.borrow()[id].value.shape()[*axis];
            vec![(
                parents[0],
                cot.pad_zero(*axis, *start, full - start - here),
            )]
        }
        Op::PadZero { axis, before } => {
            let len = pshape(parents[0])[*axis];
            vec![(parents[0], cot.slice_axis(*axis, *before, len))]
        }
        Op::Gate { residual, keep } => {
            let keep_c = g.constant(keep.clone());
            let d_def = cot.mul(&keep_c);
            let d_obj = if *residual {
                cot.clone()
            } else {
                let inv = keep.mapv(|k| T::one() - k);
                cot.mul(&g.constant(inv))
            };
            vec![(parents[0], d_obj), (parents[1], d_def)]
        }
    }
}
