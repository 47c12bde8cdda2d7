//! Parameter initialization and small layer helpers shared by the networks.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use qfss_autograd::{Binding, ParamStore, Scalar, Var};
use rand_distr::{Distribution, StandardNormal};

use crate::types::RngStream;

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn normal(store: &mut ParamStore<f32>, name: &str, shape: &[usize], std: f64, rng: &mut RngStream) {
    let value = ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(rng);
        (z * std) as f32
    });
    store.insert(name, value);
}

pub(crate) fn constant(store: &mut ParamStore<f32>, name: &str, shape: &[usize], v: f32) {
    store.insert(name, ArrayD::from_elem(IxDyn(shape), v));
}

/// He-style conv weight `[k, k, cin, cout]` plus zero bias.
pub(crate) fn init_conv(store: &mut ParamStore<f32>, prefix: &str, k: usize, cin: usize, cout: usize, rng: &mut RngStream) {
    let std = (2.0 / (k * k * cin) as f64).sqrt();
    normal(store, &format!("{prefix}/w"), &[k, k, cin, cout], std, rng);
    constant(store, &format!("{prefix}/b"), &[cout], 0.0);
}

pub(crate) fn init_linear(store: &mut ParamStore<f32>, prefix: &str, cin: usize, cout: usize, gain: f64, rng: &mut RngStream) {
    normal(store, &format!("{prefix}/w"), &[cin, cout], gain / (cin as f64).sqrt(), rng);
    constant(store, &format!("{prefix}/b"), &[cout], 0.0);
}

pub(crate) fn conv<'t, T: Scalar>(b: &Binding<'t, '_, T>, prefix: &str, x: Var<'t, T>, stride: usize) -> Var<'t, T> {
    let w = b.get(&format!("{prefix}/w"));
    let pad = w.shape()[0] / 2;
    x.conv2d(w, stride, pad).add(b.get(&format!("{prefix}/b")))
}

pub(crate) fn linear<'t, T: Scalar>(b: &Binding<'t, '_, T>, prefix: &str, x: Var<'t, T>) -> Var<'t, T> {
    x.matmul(b.get(&format!("{prefix}/w"))).add(b.get(&format!("{prefix}/b")))
}

pub(crate) fn layer_norm<'t, T: Scalar>(b: &Binding<'t, '_, T>, prefix: &str, x: Var<'t, T>) -> Var<'t, T> {
    x.layer_norm(LN_EPS)
        .mul(b.get(&format!("{prefix}/g")))
        .add(b.get(&format!("{prefix}/b")))
}

pub(crate) fn cast_in<T: Scalar, D: ndarray::Dimension>(a: &ndarray::Array<f32, D>) -> ArrayD<T> {
    a.mapv(|v| <T as Scalar>::from_f64(v as f64)).into_dyn()
}

pub(crate) fn cast_out<T: Scalar>(a: &ArrayD<T>) -> ArrayD<f32> {
    a.mapv(|v| v.as_f64() as f32)
}

pub(crate) fn var_to_array3<T: Scalar>(v: Var<'_, T>) -> Array3<f32> {
    cast_out(&v.value()).into_dimensionality().expect("rank-3 value")
}

pub(crate) fn var_to_array2<T: Scalar>(v: Var<'_, T>) -> Array2<f32> {
    cast_out(&v.value()).into_dimensionality().expect("rank-2 value")
}

/// `[H, W, C]` → `[H*W, C]`.
pub(crate) fn flatten<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    let s = x.shape();
    x.reshape(&[s[0] * s[1], s[2]])
}

/// Mask `[H, W]` as a broadcastable `[H, W, 1]` constant.
pub(crate) fn mask_const<'t, T: Scalar>(b: &Binding<'t, '_, T>, m: &Array2<f32>) -> Var<'t, T> {
    let (h, w) = m.dim();
    b.tape().constant(cast_in::<T, _>(&m.as_standard_layout().into_owned().into_shape_with_order((h, w, 1)).expect("contiguous mask")))
}
