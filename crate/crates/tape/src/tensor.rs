use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use ndarray::{concatenate, ArrayD, Axis, Ix2, IxDyn, Slice};

use crate::conv;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Operation that produced a node, holding handles to its parents.
///
/// Binary arithmetic requires equal shapes; broadcasting is made explicit by
/// inserting `Broadcast` nodes, which keeps every adjoint shape-stable.
pub(crate) enum Op {
    Leaf,
    /// Shares the value cell of its parent but blocks gradient flow.
    Detach,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    PowScalar(Tensor, f64),
    Exp(Tensor),
    Ln(Tensor),
    Tanh(Tensor),
    Sigmoid(Tensor),
    Softplus(Tensor),
    Relu(Tensor),
    LeakyRelu(Tensor, f64),
    Abs(Tensor),
    Clamp(Tensor, f64, f64),
    Sum {
        x: Tensor,
        axes: Vec<usize>,
        keep: bool,
    },
    Broadcast {
        x: Tensor,
    },
    Reshape {
        x: Tensor,
    },
    Permute {
        x: Tensor,
        axes: Vec<usize>,
    },
    Matmul(Tensor, Tensor),
    Conv2d {
        x: Tensor,
        w: Tensor,
        stride: usize,
        pad: usize,
    },
    /// Adjoint of `Conv2d` in its input: maps output-shaped tensors back to
    /// input shape. Doubles as the deconvolution layer in decoders.
    ConvT2d {
        y: Tensor,
        w: Tensor,
        stride: usize,
        pad: usize,
    },
    /// Adjoint of `Conv2d` in its kernel.
    ConvWG {
        x: Tensor,
        gy: Tensor,
        stride: usize,
        pad: usize,
    },
    Concat {
        parts: Vec<Tensor>,
        axis: usize,
    },
    SliceAxis {
        x: Tensor,
        axis: usize,
        start: usize,
        len: usize,
    },
    PadZero {
        x: Tensor,
        axis: usize,
        before: usize,
    },
    /// Row gather along axis 0: `out[i] = x[ids[i]]`.
    Rows {
        x: Tensor,
        ids: Rc<Vec<usize>>,
    },
    /// Row scatter-add along axis 0: adjoint of `Rows`.
    ScatterRows {
        x: Tensor,
        ids: Rc<Vec<usize>>,
    },
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) value: Rc<RefCell<ArrayD<f64>>>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Handle to a graph node. Cloning is cheap (reference-counted).
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, grad={})",
            self.inner.id,
            self.shape(),
            self.inner.requires_grad
        )
    }
}

fn standard(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

impl Tensor {
    fn new(value: ArrayD<f64>, op: Op, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Node {
                id: fresh_id(),
                value: Rc::new(RefCell::new(standard(value))),
                op,
                requires_grad,
            }),
        }
    }

    /// Non-trainable leaf.
    pub fn constant(value: ArrayD<f64>) -> Tensor {
        Tensor::new(value, Op::Leaf, false)
    }

    /// Trainable leaf; `grad` tracks through it and optimizers may update it
    /// in place.
    pub fn var(value: ArrayD<f64>) -> Tensor {
        Tensor::new(value, Op::Leaf, true)
    }

    pub fn scalar_const(v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(shape), 1.0))
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.inner.op, Op::Leaf)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.value.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.inner.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clones the current value out of the graph.
    pub fn array(&self) -> ArrayD<f64> {
        self.inner.value.borrow().clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&ArrayD<f64>) -> R) -> R {
        f(&self.inner.value.borrow())
    }

    pub fn scalar(&self) -> f64 {
        let v = self.inner.value.borrow();
        assert!(
            v.len() == 1,
            "scalar() on tensor with {} elements (shape {:?})",
            v.len(),
            v.shape()
        );
        *v.iter().next().unwrap()
    }

    /// Overwrites a leaf's value in place. Panics on non-leaf tensors or
    /// shape mismatch; graphs built from the old value are not revisited.
    pub fn set(&self, value: ArrayD<f64>) {
        assert!(self.is_leaf(), "set() is only valid on leaf tensors");
        let mut v = self.inner.value.borrow_mut();
        assert_eq!(
            v.shape(),
            value.shape(),
            "set() shape mismatch: {:?} vs {:?}",
            v.shape(),
            value.shape()
        );
        *v = standard(value);
    }

    /// Same value cell, gradient flow blocked.
    pub fn detach(&self) -> Tensor {
        Tensor {
            inner: Rc::new(Node {
                id: fresh_id(),
                value: Rc::clone(&self.inner.value),
                op: Op::Detach,
                requires_grad: false,
            }),
        }
    }

    fn unary(x: &Tensor, value: ArrayD<f64>, op: Op) -> Tensor {
        let rg = x.inner.requires_grad;
        Tensor::new(value, op, rg)
    }

    fn binary(a: &Tensor, b: &Tensor, value: ArrayD<f64>, op: Op) -> Tensor {
        let rg = a.inner.requires_grad || b.inner.requires_grad;
        Tensor::new(value, op, rg)
    }

    fn broadcast_pair(a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
        let sa = a.shape();
        let sb = b.shape();
        if sa == sb {
            return (a.clone(), b.clone());
        }
        let target = broadcast_shape(&sa, &sb);
        (a.broadcast_to(&target), b.broadcast_to(&target))
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let (a, b) = Tensor::broadcast_pair(self, other);
        let v = &*a.inner.value.borrow() + &*b.inner.value.borrow();
        Tensor::binary(&a, &b, v, Op::Add(a.clone(), b.clone()))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let (a, b) = Tensor::broadcast_pair(self, other);
        let v = &*a.inner.value.borrow() - &*b.inner.value.borrow();
        Tensor::binary(&a, &b, v, Op::Sub(a.clone(), b.clone()))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let (a, b) = Tensor::broadcast_pair(self, other);
        let v = &*a.inner.value.borrow() * &*b.inner.value.borrow();
        Tensor::binary(&a, &b, v, Op::Mul(a.clone(), b.clone()))
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let (a, b) = Tensor::broadcast_pair(self, other);
        let v = &*a.inner.value.borrow() / &*b.inner.value.borrow();
        Tensor::binary(&a, &b, v, Op::Div(a.clone(), b.clone()))
    }

    pub fn neg(&self) -> Tensor {
        let v = self.inner.value.borrow().mapv(|x| -x);
        Tensor::unary(self, v, Op::Neg(self.clone()))
    }

    pub fn add_s(&self, c: f64) -> Tensor {
        let v = self.inner.value.borrow().mapv(|x| x + c);
        Tensor::unary(self, v, Op::AddScalar(self.clone()))
    }

    pub fn mul_s(&self, c: f64) -> Tensor {
        let v = self.inner.value.borrow().mapv(|x| x * c);
        Tensor::unary(self, v, Op::MulScalar(self.clone(), c))
    }

    /// Elementwise x^p for real p; domain handling is the caller's problem.
    pub fn powf(&self, p: f64) -> Tensor {
        let v = self.inner.value.borrow().mapv(|x| x.powf(p));
        Tensor::unary(self, v, Op::PowScalar(self.clone(), p))
    }

    pub fn sqrt(&self) -> Tensor {
        self.powf(0.5)
    }

    pub fn exp(&self) -> Tensor {
        let v = self.inner.value.borrow().mapv(f64::exp);
        Tensor::unary(self, v, Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Tensor {
        let v = self.inner.value.borrow().mapv(f64::ln);
        Tensor::unary(self, v, Op::Ln(self.clone()))
    }

    pub fn tanh(&self) -> Tensor {
        let v = self.inner.value.borrow().mapv(f64::tanh);
        Tensor::unary(self, v, Op::Tanh(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        let v = self.inner.value.borrow().mapv(sigmoid_f);
        Tensor::unary(self, v, Op::Sigmoid(self.clone()))
    }

    /// log(1 + e^x), evaluated in the overflow-safe branch form.
    pub fn softplus(&self) -> Tensor {
        let v = self.inner.value.borrow().mapv(softplus_f);
        Tensor::unary(self, v, Op::Softplus(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        let v = self.inner.value.borrow().mapv(|x| x.max(0.0));
        Tensor::unary(self, v, Op::Relu(self.clone()))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let v = self
            .inner
            .value
            .borrow()
            .mapv(|x| if x > 0.0 { x } else { slope * x });
        Tensor::unary(self, v, Op::LeakyRelu(self.clone(), slope))
    }

    pub fn abs(&self) -> Tensor {
        let v = self.inner.value.borrow().mapv(f64::abs);
        Tensor::unary(self, v, Op::Abs(self.clone()))
    }

    /// Hard clamp; gradient passes through inside [lo, hi] and is zero
    /// outside (boundary counts as inside).
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        assert!(lo <= hi, "clamp: lo {lo} > hi {hi}");
        let v = self.inner.value.borrow().mapv(|x| x.clamp(lo, hi));
        Tensor::unary(self, v, Op::Clamp(self.clone(), lo, hi))
    }

    pub fn sum_axes(&self, axes: &[usize], keep: bool) -> Tensor {
        let v = {
            let x = self.inner.value.borrow();
            let mut axes_sorted = axes.to_vec();
            axes_sorted.sort_unstable();
            axes_sorted.dedup();
            for &ax in &axes_sorted {
                assert!(ax < x.ndim(), "sum axis {ax} out of range for {:?}", x.shape());
            }
            let mut acc = x.clone();
            for &ax in axes_sorted.iter().rev() {
                acc = acc.sum_axis(Axis(ax));
            }
            if keep {
                let mut shape = x.shape().to_vec();
                for &ax in &axes_sorted {
                    shape[ax] = 1;
                }
                acc.into_shape_with_order(IxDyn(&shape)).unwrap()
            } else {
                acc
            }
        };
        Tensor::unary(
            self,
            v,
            Op::Sum {
                x: self.clone(),
                axes: axes.to_vec(),
                keep,
            },
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.inner.value.borrow().ndim()).collect();
        self.sum_axes(&axes, false)
    }

    pub fn mean_axes(&self, axes: &[usize], keep: bool) -> Tensor {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes, keep).mul_s(1.0 / n as f64)
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len();
        self.sum_all().mul_s(1.0 / n as f64)
    }

    /// NumPy-style broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let v = {
            let x = self.inner.value.borrow();
            x.broadcast(IxDyn(shape))
                .unwrap_or_else(|| {
                    panic!("cannot broadcast {:?} to {:?}", x.shape(), shape)
                })
                .to_owned()
        };
        Tensor::unary(
            self,
            v,
            Op::Broadcast { x: self.clone() },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let v = {
            let x = self.inner.value.borrow();
            assert_eq!(
                x.len(),
                shape.iter().product::<usize>(),
                "reshape {:?} -> {:?} changes element count",
                x.shape(),
                shape
            );
            x.clone().into_shape_with_order(IxDyn(shape)).unwrap()
        };
        Tensor::unary(
            self,
            v,
            Op::Reshape { x: self.clone() },
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let v = {
            let x = self.inner.value.borrow();
            x.view().permuted_axes(IxDyn(axes)).as_standard_layout().to_owned()
        };
        Tensor::unary(
            self,
            v,
            Op::Permute {
                x: self.clone(),
                axes: axes.to_vec(),
            },
        )
    }

    /// 2-D transpose.
    pub fn t(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "t() requires a 2-D tensor");
        self.permute(&[1, 0])
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let v = {
            let a = self.inner.value.borrow();
            let b = other.inner.value.borrow();
            assert_eq!(a.ndim(), 2, "matmul lhs must be 2-D, got {:?}", a.shape());
            assert_eq!(b.ndim(), 2, "matmul rhs must be 2-D, got {:?}", b.shape());
            assert_eq!(
                a.shape()[1],
                b.shape()[0],
                "matmul inner dims differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            );
            let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
            let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
            a2.dot(&b2).into_dyn()
        };
        Tensor::binary(self, other, v, Op::Matmul(self.clone(), other.clone()))
    }

    /// NCHW convolution with square stride/padding.
    pub fn conv2d(&self, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let v = {
            let x = self.inner.value.borrow();
            let k = w.inner.value.borrow();
            conv::conv2d(&x, &k, stride, pad)
        };
        Tensor::binary(
            self,
            w,
            v,
            Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                stride,
                pad,
            },
        )
    }

    /// Transposed NCHW convolution (adjoint of [`Tensor::conv2d`] with the
    /// same kernel). `self` is output-shaped `(N, O, H', W')`, the result is
    /// `(N, C, out_hw.0, out_hw.1)` for a kernel `(O, C, kh, kw)`.
    pub fn conv2d_transpose(
        &self,
        w: &Tensor,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Tensor {
        let v = {
            let y = self.inner.value.borrow();
            let k = w.inner.value.borrow();
            conv::conv2d_transpose(&y, &k, stride, pad, out_hw)
        };
        Tensor::binary(
            self,
            w,
            v,
            Op::ConvT2d {
                y: self.clone(),
                w: w.clone(),
                stride,
                pad,
            },
        )
    }

    /// Kernel-shaped adjoint of [`Tensor::conv2d`]: correlates input with an
    /// output-shaped cotangent.
    pub fn conv2d_wgrad(
        &self,
        gy: &Tensor,
        stride: usize,
        pad: usize,
        kshape: (usize, usize, usize, usize),
    ) -> Tensor {
        let v = {
            let x = self.inner.value.borrow();
            let g = gy.inner.value.borrow();
            conv::conv2d_wgrad(&x, &g, stride, pad, kshape)
        };
        Tensor::binary(
            self,
            gy,
            v,
            Op::ConvWG {
                x: self.clone(),
                gy: gy.clone(),
                stride,
                pad,
            },
        )
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let v = {
            let borrows: Vec<_> = parts.iter().map(|p| p.inner.value.borrow()).collect();
            let views: Vec<_> = borrows.iter().map(|b| b.view()).collect();
            concatenate(Axis(axis), &views).expect("concat shape mismatch")
        };
        let rg = parts.iter().any(|p| p.inner.requires_grad);
        Tensor::new(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let v = {
            let x = self.inner.value.borrow();
            assert!(
                start + len <= x.shape()[axis],
                "slice [{start}, {}) out of range on axis {axis} of {:?}",
                start + len,
                x.shape()
            );
            x.slice_axis(Axis(axis), Slice::from(start..start + len))
                .to_owned()
        };
        Tensor::unary(
            self,
            v,
            Op::SliceAxis {
                x: self.clone(),
                axis,
                start,
                len,
            },
        )
    }

    pub fn pad_zero(&self, axis: usize, before: usize, after: usize) -> Tensor {
        let v = {
            let x = self.inner.value.borrow();
            let mut shape = x.shape().to_vec();
            shape[axis] += before + after;
            let mut out = ArrayD::zeros(IxDyn(&shape));
            out.slice_axis_mut(Axis(axis), Slice::from(before..before + x.shape()[axis]))
                .assign(&x);
            out
        };
        Tensor::unary(
            self,
            v,
            Op::PadZero {
                x: self.clone(),
                axis,
                before,
            },
        )
    }

    /// Gathers rows (axis 0): `out[i] = self[ids[i]]`. Used for embeddings.
    pub fn rows(&self, ids: &[usize]) -> Tensor {
        let v = {
            let x = self.inner.value.borrow();
            let n = x.shape()[0];
            for &i in ids {
                assert!(i < n, "row index {i} out of range 0..{n}");
            }
            let views: Vec<_> = ids
                .iter()
                .map(|&i| x.slice_axis(Axis(0), Slice::from(i..i + 1)))
                .collect();
            concatenate(Axis(0), &views).expect("rows concat")
        };
        Tensor::unary(
            self,
            v,
            Op::Rows {
                x: self.clone(),
                ids: Rc::new(ids.to_vec()),
            },
        )
    }

    /// Scatter-add of `self`'s rows into a `rows`-row tensor (adjoint of
    /// [`Tensor::rows`]): `out[ids[i]] += self[i]`.
    pub fn scatter_rows(&self, ids: &[usize], rows: usize) -> Tensor {
        let v = {
            let x = self.inner.value.borrow();
            assert_eq!(x.shape()[0], ids.len(), "scatter_rows: ids/rows mismatch");
            let mut shape = x.shape().to_vec();
            shape[0] = rows;
            let mut out = ArrayD::zeros(IxDyn(&shape));
            for (i, &r) in ids.iter().enumerate() {
                assert!(r < rows, "scatter row {r} out of range 0..{rows}");
                let src = x.slice_axis(Axis(0), Slice::from(i..i + 1));
                let mut dst = out.slice_axis_mut(Axis(0), Slice::from(r..r + 1));
                dst += &src;
            }
            out
        };
        Tensor::unary(
            self,
            v,
            Op::ScatterRows {
                x: self.clone(),
                ids: Rc::new(ids.to_vec()),
            },
        )
    }

    /// log Σ e^x along `axis`, shifted by the detached per-slice max so the
    /// exponentials cannot overflow. The shift is constant, so gradients are
    /// exact.
    pub fn logsumexp_axis(&self, axis: usize, keep: bool) -> Tensor {
        let mx = {
            let x = self.inner.value.borrow();
            let m = x.map_axis(Axis(axis), |lane| {
                lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            });
            let mut shape = x.shape().to_vec();
            shape[axis] = 1;
            Tensor::constant(m.into_shape_with_order(IxDyn(&shape)).unwrap())
        };
        let shifted = self.sub(&mx);
        let lse = shifted.exp().sum_axes(&[axis], keep).ln();
        if keep {
            lse.add(&mx)
        } else {
            let mut shape = self.shape();
            shape.remove(axis);
            lse.add(&mx.reshape(&shape))
        }
    }

    /// log softmax along the last axis.
    pub fn log_softmax(&self) -> Tensor {
        let axis = self.shape().len() - 1;
        self.sub(&self.logsumexp_axis(axis, true))
    }

    pub fn softmax(&self) -> Tensor {
        self.log_softmax().exp()
    }

    /// Sum of element squares over all axes.
    pub fn sq_norm(&self) -> Tensor {
        self.mul(self).sum_all()
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast: {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

pub(crate) fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_f(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $tensor_method:ident) => {
        impl std::ops::$trait<&Tensor> for &Tensor {
            type Output = Tensor;
            fn $method(self, rhs: &Tensor) -> Tensor {
                Tensor::$tensor_method(self, rhs)
            }
        }
        impl std::ops::$trait<Tensor> for Tensor {
            type Output = Tensor;
            fn $method(self, rhs: Tensor) -> Tensor {
                Tensor::$tensor_method(&self, &rhs)
            }
        }
        impl std::ops::$trait<&Tensor> for Tensor {
            type Output = Tensor;
            fn $method(self, rhs: &Tensor) -> Tensor {
                Tensor::$tensor_method(&self, rhs)
            }
        }
        impl std::ops::$trait<Tensor> for &Tensor {
            type Output = Tensor;
            fn $method(self, rhs: Tensor) -> Tensor {
                Tensor::$tensor_method(self, &rhs)
            }
        }
    };
}

impl_binop!(Add, add, add);
impl_binop!(Sub, sub, sub);
impl_binop!(Mul, mul, mul);
impl_binop!(Div, div, div);

impl std::ops::Neg for &Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        Tensor::neg(self)
    }
}

impl std::ops::Neg for Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        Tensor::neg(&self)
    }
}
