use std::cell::RefCell;
use std::collections::BTreeMap;

use ndarray::{concatenate, Array1, Array2, ArrayD, ArrayView2, Axis, Ix2, Ix3, IxDyn, Slice, Zip};

use crate::kernels::{self, ConvGeometry};
use crate::scalar::{c, Scalar};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    Offset(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Gelu(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Clamp(usize, T, T),
    Softmax(usize, usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize),
    LayerNorm { x: usize, xhat: ArrayD<T>, rstd: ArrayD<T> },
    GroupNorm { x: usize, groups: usize, xhat: ArrayD<T>, rstd: Array1<T> },
    Conv2d { x: usize, w: usize, geom: ConvGeometry, cols: Array2<T> },
    Resize { x: usize, ry: Array2<T>, rx: Array2<T> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    NormalizeRows { x: usize, norms: Array1<T> },
    Bce { pred: usize, target: ArrayD<T>, eps: T },
    BceLogits { logits: usize, target: ArrayD<T> },
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape is single-use: build the graph with [`Var`] methods, call
/// [`Tape::backward`] once on a scalar, read the gradients, then drop it.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<Vec<(String, usize)>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// A named leaf. Only `trainable` leaves accumulate gradients.
    pub fn param(&self, name: &str, value: ArrayD<T>, trainable: bool) -> Var<'_, T> {
        let v = self.push(value, Op::Leaf, trainable);
        if trainable {
            self.params.borrow_mut().push((name.to_string(), v.id));
        }
        v
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, x: usize, f: impl FnOnce(&ArrayD<T>) -> ArrayD<T>, op: Op<T>) -> Var<'_, T> {
        let value = f(&self.nodes.borrow()[x].value);
        let rg = self.requires(&[x]);
        self.push(value, op, rg)
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        f: impl FnOnce(&ArrayD<T>, &ArrayD<T>) -> ArrayD<T>,
        op: Op<T>,
    ) -> Var<'_, T> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        let rg = self.requires(&[a, b]);
        self.push(value, op, rg)
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward requires a scalar root");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(ArrayD::from_elem(nodes[root.id].value.raw_dim(), T::one()));
        for id in (0..=root.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (parent, delta) in local_grads(&nodes, id, &g) {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => *acc += &delta,
                    slot => *slot = Some(delta),
                }
            }
            grads[id] = Some(g);
        }
        let params = self
            .params
            .borrow()
            .iter()
            .map(|(name, id)| {
                let g = grads[*id]
                    .clone()
                    .unwrap_or_else(|| ArrayD::zeros(nodes[*id].value.raw_dim()));
                (name.clone(), g)
            })
            .collect();
        Gradients { by_node: grads, params }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    by_node: Vec<Option<ArrayD<T>>>,
    params: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any recorded value; `None` when it does not
    /// depend on a trainable leaf or does not influence the root.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&ArrayD<T>> {
        self.by_node.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradients of trainable named leaves (zeros for unreached ones).
    pub fn params(&self) -> &BTreeMap<String, ArrayD<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, ArrayD<T>> {
        self.params
    }
}

/// Sums `g` down to `shape`, undoing ndarray broadcasting.
fn unbroadcast<T: Scalar>(mut g: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &n) in shape.iter().enumerate() {
        if n == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn as2<T: Scalar>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 operand")
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_A * x * x)
}

fn local_grads<T: Scalar>(nodes: &[Node<T>], id: usize, g: &ArrayD<T>) -> Vec<(usize, ArrayD<T>)> {
    let val = |i: usize| &nodes[i].value;
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            (*a, unbroadcast(g.clone(), val(*a).shape())),
            (*b, unbroadcast(g.clone(), val(*b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (*a, unbroadcast(g.clone(), val(*a).shape())),
            (*b, unbroadcast(g.mapv(|v| -v), val(*b).shape())),
        ],
        Op::Mul(a, b) => vec![
            (*a, unbroadcast(g * val(*b), val(*a).shape())),
            (*b, unbroadcast(g * val(*a), val(*b).shape())),
        ],
        Op::Div(a, b) => {
            let bv = val(*b);
            let ga = g / bv;
            let gb = (&ga * out).mapv(|v| -v);
            vec![(*a, unbroadcast(ga, val(*a).shape())), (*b, unbroadcast(gb, bv.shape()))]
        }
        Op::Scale(a, s) => vec![(*a, g.mapv(|v| v * *s))],
        Op::Offset(a) => vec![(*a, g.clone())],
        Op::MatMul(a, b) => {
            let g2 = as2(g);
            let ga = g2.dot(&as2(val(*b)).t()).into_dyn();
            let gb = as2(val(*a)).t().dot(&g2).into_dyn();
            vec![(*a, ga), (*b, gb)]
        }
        Op::Transpose(a) => vec![(*a, as2(g).t().as_standard_layout().into_owned().into_dyn())],
        Op::Reshape(a) => {
            let shape = val(*a).raw_dim();
            let gs = g.as_standard_layout().into_owned();
            vec![(*a, gs.into_shape_with_order(shape).expect("reshape grad"))]
        }
        Op::Gelu(a) => {
            let mut d = val(*a).mapv(|x| c::<T>(gelu_grad(x.as_f64())));
            d *= g;
            vec![(*a, d)]
        }
        Op::Relu(a) => {
            let mut d = g.clone();
            Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                if x <= T::zero() {
                    *d = T::zero();
                }
            });
            vec![(*a, d)]
        }
        Op::Sigmoid(a) => {
            let mut d = out.mapv(|y| y * (T::one() - y));
            d *= g;
            vec![(*a, d)]
        }
        Op::Exp(a) => vec![(*a, g * out)],
        Op::Ln(a) => vec![(*a, g / val(*a))],
        Op::Clamp(a, lo, hi) => {
            let mut d = g.clone();
            Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                if x < *lo || x > *hi {
                    *d = T::zero();
                }
            });
            vec![(*a, d)]
        }
        Op::Softmax(a, axis) => {
            let mut d = ArrayD::<T>::zeros(out.raw_dim());
            Zip::from(d.lanes_mut(Axis(*axis)))
                .and(out.lanes(Axis(*axis)))
                .and(g.lanes(Axis(*axis)))
                .for_each(|mut dl, yl, gl| {
                    let dot = yl.iter().zip(gl.iter()).fold(T::zero(), |s, (&y, &g)| s + y * g);
                    Zip::from(&mut dl).and(&yl).and(&gl).for_each(|d, &y, &g| *d = y * (g - dot));
                });
            vec![(*a, d)]
        }
        Op::Sum(a) => {
            let s = g.iter().next().copied().unwrap_or_else(T::zero);
            vec![(*a, ArrayD::from_elem(val(*a).raw_dim(), s))]
        }
        Op::Mean(a) => {
            let n = c::<T>(val(*a).len() as f64);
            let s = g.iter().next().copied().unwrap_or_else(T::zero) / n;
            vec![(*a, ArrayD::from_elem(val(*a).raw_dim(), s))]
        }
        Op::SumAxis(a) => {
            let shape = val(*a).raw_dim();
            vec![(*a, g.broadcast(shape).expect("keepdim grad").to_owned())]
        }
        Op::LayerNorm { x, xhat, rstd } => {
            let mut d = ArrayD::<T>::zeros(xhat.raw_dim());
            let last = Axis(xhat.ndim() - 1);
            let n = c::<T>(xhat.shape()[last.0] as f64);
            Zip::from(d.lanes_mut(last))
                .and(xhat.lanes(last))
                .and(g.lanes(last))
                .and(rstd)
                .for_each(|dl, xl, gl, &r| norm_backward(dl, xl, gl, r, n));
            vec![(*x, d)]
        }
        Op::GroupNorm { x, groups, xhat, rstd } => {
            let (h, w, ch) = xhat.view().into_dimensionality::<Ix3>().expect("[H,W,C]").dim();
            let cg = ch / groups;
            let n = c::<T>((h * w * cg) as f64);
            let mut d = ArrayD::<T>::zeros(xhat.raw_dim());
            for gi in 0..*groups {
                let s = Slice::from(gi * cg..(gi + 1) * cg);
                let xh = xhat.slice_axis(Axis(2), s);
                let gg = g.slice_axis(Axis(2), s);
                let sum_g = gg.sum();
                let sum_gx = (&gg * &xh).sum();
                let r = rstd[gi];
                let mut dd = d.slice_axis_mut(Axis(2), s);
                Zip::from(&mut dd)
                    .and(&xh)
                    .and(&gg)
                    .for_each(|d, &xh, &g| *d = r * (g - sum_g / n - xh * sum_gx / n));
            }
            vec![(*x, d)]
        }
        Op::Conv2d { x, w, geom, cols } => {
            let xs = val(*x).shape().to_vec();
            let ws = val(*w).shape().to_vec();
            let cout = ws[3];
            let go = g
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((cols.nrows(), cout))
                .expect("conv grad");
            let wmat = val(*w)
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((cols.ncols(), cout))
                .expect("conv weight");
            let gw = cols.t().dot(&go).into_shape_with_order(IxDyn(&ws)).expect("conv weight grad");
            let gcols = go.dot(&wmat.t());
            let gx = kernels::col2im(&gcols, (xs[0], xs[1], xs[2]), *geom).into_dyn();
            vec![(*x, gx), (*w, gw)]
        }
        Op::Resize { x, ry, rx } => {
            let xs = val(*x).shape().to_vec();
            let gv = g.view().into_dimensionality::<Ix3>().expect("[h,w,C]");
            let gx = kernels::resize_adjoint(gv, ry, rx, (xs[0], xs[1], xs[2])).into_dyn();
            vec![(*x, gx)]
        }
        Op::Concat { parts, axis } => {
            let mut start = 0;
            parts
                .iter()
                .map(|&p| {
                    let len = val(p).shape()[*axis];
                    let gp = g.slice_axis(Axis(*axis), Slice::from(start..start + len)).to_owned();
                    start += len;
                    (p, gp)
                })
                .collect()
        }
        Op::Slice { x, axis, start } => {
            let mut d = ArrayD::<T>::zeros(val(*x).raw_dim());
            let len = out.shape()[*axis];
            d.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len)).assign(g);
            vec![(*x, d)]
        }
        Op::NormalizeRows { x, norms } => {
            let y = as2(out);
            let g2 = as2(g);
            let mut d = Array2::<T>::zeros(y.raw_dim());
            for (i, &n) in norms.iter().enumerate() {
                if n < c::<T>(crate::NORM_FLOOR) {
                    continue;
                }
                let yr = y.row(i);
                let gr = g2.row(i);
                let dot = yr.dot(&gr);
                Zip::from(d.row_mut(i)).and(&yr).and(&gr).for_each(|d, &y, &g| *d = (g - y * dot) / n);
            }
            vec![(*x, d.into_dyn())]
        }
        Op::Bce { pred, target, eps } => {
            let n = c::<T>(target.len() as f64);
            let s = g.iter().next().copied().unwrap_or_else(T::zero);
            let one = T::one();
            let mut d = ArrayD::<T>::zeros(target.raw_dim());
            Zip::from(&mut d).and(val(*pred)).and(target).for_each(|d, &p, &t| {
                if p >= *eps && p <= one - *eps {
                    *d = s * (-t / p + (one - t) / (one - p)) / n;
                }
            });
            vec![(*pred, d)]
        }
        Op::BceLogits { logits, target } => {
            let n = c::<T>(target.len() as f64);
            let s = g.iter().next().copied().unwrap_or_else(T::zero);
            let mut d = ArrayD::<T>::zeros(target.raw_dim());
            Zip::from(&mut d).and(val(*logits)).and(target).for_each(|d, &z, &t| {
                *d = s * (sigmoid(z) - t) / n;
            });
            vec![(*logits, d)]
        }
    }
}

fn norm_backward<T: Scalar>(
    mut dl: ndarray::ArrayViewMut1<T>,
    xl: ndarray::ArrayView1<T>,
    gl: ndarray::ArrayView1<T>,
    r: T,
    n: T,
) {
    let sum_g = gl.sum();
    let sum_gx = xl.iter().zip(gl.iter()).fold(T::zero(), |s, (&x, &g)| s + x * g);
    Zip::from(&mut dl)
        .and(&xl)
        .and(&gl)
        .for_each(|d, &xh, &g| *d = r * (g - sum_g / n - xh * sum_gx / n));
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> ArrayD<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&ArrayD<T>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn scalar_value(&self) -> T {
        self.with_value(|v| {
            assert_eq!(v.len(), 1, "not a scalar");
            *v.iter().next().expect("one element")
        })
    }

    /// A constant copy of this value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(self.value())
    }

    pub fn add(&self, o: Var<'t, T>) -> Var<'t, T> {
        self.tape.binary(self.id, o.id, |a, b| a + b, Op::Add(self.id, o.id))
    }

    pub fn sub(&self, o: Var<'t, T>) -> Var<'t, T> {
        self.tape.binary(self.id, o.id, |a, b| a - b, Op::Sub(self.id, o.id))
    }

    pub fn mul(&self, o: Var<'t, T>) -> Var<'t, T> {
        self.tape.binary(self.id, o.id, |a, b| a * b, Op::Mul(self.id, o.id))
    }

    pub fn div(&self, o: Var<'t, T>) -> Var<'t, T> {
        self.tape.binary(self.id, o.id, |a, b| a / b, Op::Div(self.id, o.id))
    }

    pub fn scale(&self, s: f64) -> Var<'t, T> {
        let s = c::<T>(s);
        self.tape.unary(self.id, |a| a.mapv(|v| v * s), Op::Scale(self.id, s))
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-1.0)
    }

    pub fn offset(&self, s: f64) -> Var<'t, T> {
        let s = c::<T>(s);
        self.tape.unary(self.id, |a| a.mapv(|v| v + s), Op::Offset(self.id))
    }

    pub fn matmul(&self, o: Var<'t, T>) -> Var<'t, T> {
        self.tape.binary(self.id, o.id, |a, b| as2(a).dot(&as2(b)).into_dyn(), Op::MatMul(self.id, o.id))
    }

    /// Transpose of a rank-2 value.
    pub fn t(&self) -> Var<'t, T> {
        self.tape.unary(
            self.id,
            |a| as2(a).t().as_standard_layout().into_owned().into_dyn(),
            Op::Transpose(self.id),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t, T> {
        let shape = shape.to_vec();
        self.tape.unary(
            self.id,
            move |a| {
                a.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&shape))
                    .expect("element count preserved by reshape")
            },
            Op::Reshape(self.id),
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t, T> {
        self.tape.unary(
            self.id,
            |a| {
                a.mapv(|x| {
                    let xf = x.as_f64();
                    c::<T>(0.5 * xf * (1.0 + (GELU_K * (xf + GELU_A * xf * xf * xf)).tanh()))
                })
            },
            Op::Gelu(self.id),
        )
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.tape.unary(self.id, |a| a.mapv(|x| x.max(T::zero())), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.tape.unary(self.id, |a| a.mapv(sigmoid), Op::Sigmoid(self.id))
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.tape.unary(self.id, |a| a.mapv(T::exp), Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'t, T> {
        self.tape.unary(self.id, |a| a.mapv(T::ln), Op::Ln(self.id))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t, T> {
        let (lo, hi) = (c::<T>(lo), c::<T>(hi));
        self.tape.unary(self.id, |a| a.mapv(|x| x.max(lo).min(hi)), Op::Clamp(self.id, lo, hi))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Var<'t, T> {
        self.tape.unary(
            self.id,
            |a| {
                let mut y = a.clone();
                for mut lane in y.lanes_mut(Axis(axis)) {
                    let m = lane.fold(T::neg_infinity(), |m, &v| m.max(v));
                    lane.mapv_inplace(|v| (v - m).exp());
                    let s = lane.sum();
                    lane.mapv_inplace(|v| v / s);
                }
                y
            },
            Op::Softmax(self.id, axis),
        )
    }

    pub fn sum(&self) -> Var<'t, T> {
        self.tape.unary(self.id, |a| ArrayD::from_elem(IxDyn(&[]), a.sum()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        self.tape.unary(
            self.id,
            |a| ArrayD::from_elem(IxDyn(&[]), a.sum() / c::<T>(a.len() as f64)),
            Op::Mean(self.id),
        )
    }

    /// Sum along `axis`, keeping it with length one.
    pub fn sum_axis(&self, axis: usize) -> Var<'t, T> {
        self.tape.unary(
            self.id,
            |a| a.sum_axis(Axis(axis)).insert_axis(Axis(axis)),
            Op::SumAxis(self.id),
        )
    }

    /// Normalizes each lane of the last axis to zero mean, unit variance.
    pub fn layer_norm(&self, eps: f64) -> Var<'t, T> {
        let (xhat, rstd) = self.with_value(|a| {
            let last = Axis(a.ndim() - 1);
            let n = c::<T>(a.shape()[last.0] as f64);
            let eps = c::<T>(eps);
            let mut xhat = a.clone();
            let mut rstd = ArrayD::<T>::zeros(IxDyn(&a.shape()[..a.ndim() - 1]));
            Zip::from(xhat.lanes_mut(last)).and(&mut rstd).for_each(|mut lane, r| {
                let mean = lane.sum() / n;
                let var = lane.fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
                *r = T::one() / (var + eps).sqrt();
                let rr = *r;
                lane.mapv_inplace(|v| (v - mean) * rr);
            });
            (xhat, rstd)
        });
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(xhat.clone(), Op::LayerNorm { x: self.id, xhat, rstd }, rg)
    }

    /// Group normalization of an `[H, W, C]` map over `groups` channel groups.
    pub fn group_norm(&self, groups: usize, eps: f64) -> Var<'t, T> {
        let (xhat, rstd) = self.with_value(|a| {
            let (h, w, ch) = a.view().into_dimensionality::<Ix3>().expect("[H,W,C]").dim();
            assert_eq!(ch % groups, 0, "channels divisible by groups");
            let cg = ch / groups;
            let n = c::<T>((h * w * cg) as f64);
            let mut xhat = a.clone();
            let mut rstd = Array1::<T>::zeros(groups);
            for gi in 0..groups {
                let mut s = xhat.slice_axis_mut(Axis(2), Slice::from(gi * cg..(gi + 1) * cg));
                let mean = s.sum() / n;
                let var = s.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
                let r = T::one() / (var + c::<T>(eps)).sqrt();
                s.mapv_inplace(|v| (v - mean) * r);
                rstd[gi] = r;
            }
            (xhat, rstd)
        });
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(xhat.clone(), Op::GroupNorm { x: self.id, groups, xhat, rstd }, rg)
    }

    /// 2-D convolution of an `[H, W, Cin]` map with `[k, k, Cin, Cout]` weights.
    pub fn conv2d(&self, weight: Var<'t, T>, stride: usize, padding: usize) -> Var<'t, T> {
        let ws = weight.shape();
        assert_eq!(ws.len(), 4, "conv weight must be [k, k, Cin, Cout]");
        assert_eq!(ws[0], ws[1], "square kernels only");
        let geom = ConvGeometry { kernel: ws[0], stride, padding };
        let (value, cols) = {
            let nodes = self.tape.nodes.borrow();
            let x = nodes[self.id].value.view().into_dimensionality::<Ix3>().expect("[H,W,C] input");
            assert_eq!(x.dim().2, ws[2], "conv input channels");
            let (oh, ow) = geom.output_extent(x.dim().0, x.dim().1);
            let cols = kernels::im2col(x, geom);
            let w = nodes[weight.id]
                .value
                .view()
                .into_shape_with_order((ws[0] * ws[1] * ws[2], ws[3]))
                .expect("contiguous weight");
            let out = cols.dot(&w).into_shape_with_order(IxDyn(&[oh, ow, ws[3]])).expect("conv output");
            (out, cols)
        };
        let rg = self.tape.requires(&[self.id, weight.id]);
        self.tape.push(value, Op::Conv2d { x: self.id, w: weight.id, geom, cols }, rg)
    }

    /// Bilinear resampling (half-pixel centres) of an `[H, W, C]` map.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Var<'t, T> {
        let s = self.shape();
        assert_eq!(s.len(), 3, "resize expects [H,W,C]");
        let ry = kernels::bilinear_matrix::<T>(s[0], out_h);
        let rx = kernels::bilinear_matrix::<T>(s[1], out_w);
        let value = self.with_value(|a| {
            kernels::resize(a.view().into_dimensionality::<Ix3>().expect("[H,W,C]"), &ry, &rx).into_dyn()
        });
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, Op::Resize { x: self.id, ry, rx }, rg)
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Var<'t, T> {
        let tape = parts[0].tape;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = tape.nodes.borrow();
            let views: Vec<_> = ids.iter().map(|&i| nodes[i].value.view()).collect();
            concatenate(Axis(axis), &views).expect("concat shapes agree")
        };
        let rg = tape.requires(&ids);
        tape.push(value, Op::Concat { parts: ids, axis }, rg)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Var<'t, T> {
        self.tape.unary(
            self.id,
            |a| a.slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned(),
            Op::Slice { x: self.id, axis, start },
        )
    }

    /// Scales each row of a rank-2 value to unit L2 norm; rows with norm below
    /// the floor map to zero.
    pub fn normalize_rows(&self) -> Var<'t, T> {
        let (value, norms) = self.with_value(|a| {
            let a = as2(a);
            let norms: Array1<T> = a.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
            let mut y = a.to_owned();
            for (mut row, &n) in y.rows_mut().into_iter().zip(norms.iter()) {
                if n < c::<T>(crate::NORM_FLOOR) {
                    row.fill(T::zero());
                } else {
                    row.mapv_inplace(|v| v / n);
                }
            }
            (y.into_dyn(), norms)
        });
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, Op::NormalizeRows { x: self.id, norms }, rg)
    }

    /// Mean binary cross-entropy of probabilities against a constant target,
    /// with predictions clamped to `[eps, 1 - eps]`.
    pub fn bce(&self, target: &ArrayD<T>, eps: f64) -> Var<'t, T> {
        let eps = c::<T>(eps);
        let value = self.with_value(|p| {
            assert_eq!(p.shape(), target.shape(), "bce shapes");
            let one = T::one();
            let total = Zip::from(p).and(target).fold(T::zero(), |s, &p, &t| {
                let p = p.max(eps).min(one - eps);
                s - (t * p.ln() + (one - t) * (one - p).ln())
            });
            ArrayD::from_elem(IxDyn(&[]), total / c::<T>(p.len() as f64))
        });
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, Op::Bce { pred: self.id, target: target.clone(), eps }, rg)
    }

    /// Mean binary cross-entropy of `sigmoid(self)` against a constant
    /// target, evaluated stably from the logits; the gradient never vanishes
    /// through saturation.
    pub fn bce_logits(&self, target: &ArrayD<T>) -> Var<'t, T> {
        let value = self.with_value(|z| {
            assert_eq!(z.shape(), target.shape(), "bce shapes");
            let total = Zip::from(z).and(target).fold(T::zero(), |s, &z, &t| {
                s + z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p()
            });
            ArrayD::from_elem(IxDyn(&[]), total / c::<T>(z.len() as f64))
        });
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, Op::BceLogits { logits: self.id, target: target.clone() }, rg)
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
