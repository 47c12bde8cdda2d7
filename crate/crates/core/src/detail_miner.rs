//! Detail mining network: learnable proxies attend to masked query features,
//! producing one local feature per proxy. Comparing the local features under
//! the predicted and the true mask exposes where the prediction is wrong.

use ndarray::{Array2, Axis};
use qfss_autograd::{Binding, ParamStore, Scalar, Tape, Var};

use crate::attention::{self, AttentionConfig, SoftmaxAxis};
use crate::error::{Error, Result};
use crate::nn;
use crate::types::{cosine_slices, RngStream};

pub const PREFIXES: [&str; 2] = ["detail/", "attn/detail."];

/// Probability clamp applied before any logarithm.
pub const SCORE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetailConfig {
    pub proxies: usize,
    pub layers: usize,
    pub attn: AttentionConfig,
}

impl DetailConfig {
    pub fn validate(&self) -> Result<()> {
        if self.proxies < 2 {
            return Err(Error::InvalidArgument("at least two proxies are required".into()));
        }
        if self.layers == 0 {
            return Err(Error::InvalidArgument("at least one proxy attention layer is required".into()));
        }
        self.attn.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Real,
    Fake,
}

/// One local feature per proxy, `[N, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureSet {
    pub omega: Array2<f32>,
    pub origin: Origin,
}

pub fn init_params(store: &mut ParamStore<f32>, cfg: &DetailConfig, rng: &mut RngStream) {
    let c = cfg.attn.channels;
    nn::normal(store, "detail/proxies", &[cfg.proxies, c], 1.0, rng);
    for j in 0..cfg.layers {
        attention::init_params(store, &format!("attn/detail.{j}"), &cfg.attn, rng);
    }
    nn::init_linear(store, "detail/fc1", c, c / 2, 2f64.sqrt(), rng);
    nn::init_linear(store, "detail/fc2", c / 2, 1, 1.0, rng);
}

/// Proxies attend over `flatten(f_q ⊙ m)`; `f_q` is `[h, w, C]`, `m` is `[h, w, 1]`.
/// Returns the local features `[N, C]` and the last layer's weights `[N, h*w]`.
pub fn extract_local_features<'t, T: Scalar>(
    b: &Binding<'t, '_, T>,
    cfg: &DetailConfig,
    f_q: Var<'t, T>,
    m: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (fs, ms) = (f_q.shape(), m.shape());
    if fs.len() != 3 || ms != [fs[0], fs[1], 1] {
        return Err(Error::Shape(format!("features {fs:?} vs mask {ms:?}")));
    }
    let source = nn::flatten(f_q.mul(m));
    let mut x = b.get("detail/proxies");
    let mut weights = None;
    for j in 0..cfg.layers {
        let o = attention::feat_agg(b, &format!("attn/detail.{j}"), &cfg.attn, x, source, SoftmaxAxis::OverSource)?;
        x = o.out;
        weights = Some(o.weights);
    }
    Ok((x, weights.expect("at least one layer")))
}

/// Index (0-based) of the proxy whose fake and real features have the lowest
/// cosine, with that cosine. Ties go to the smallest index.
pub fn select_most_different_pair(fake: &LocalFeatureSet, real: &LocalFeatureSet) -> Result<(usize, f32)> {
    if fake.omega.dim() != real.omega.dim() || fake.omega.nrows() == 0 {
        return Err(Error::Shape("local feature sets differ in size".into()));
    }
    let mut best = (0, f32::INFINITY);
    for (i, (f, r)) in fake.omega.axis_iter(Axis(0)).zip(real.omega.axis_iter(Axis(0))).enumerate() {
        let c = cosine_slices(f, r).value;
        if c < best.1 {
            best = (i, c);
        }
    }
    Ok(best)
}

/// Two fully connected layers `C -> C/2 -> 1` with a clamped sigmoid; `omega` is `[1, C]`.
pub fn score_real_fake<'t, T: Scalar>(b: &Binding<'t, '_, T>, omega: Var<'t, T>) -> Var<'t, T> {
    let h = nn::linear(b, "detail/fc1", omega).gelu();
    nn::linear(b, "detail/fc2", h).sigmoid().clamp(SCORE_EPS, 1.0 - SCORE_EPS).reshape(&[])
}

/// Mean cosine over ordered pairs of distinct proxies, summed over both sets.
pub fn diversity_loss<'t, T: Scalar>(fake: Var<'t, T>, real: Var<'t, T>) -> Result<Var<'t, T>> {
    let n = fake.shape()[0];
    if n < 2 || real.shape()[0] != n {
        return Err(Error::InvalidArgument("diversity needs two equally sized sets of at least two rows".into()));
    }
    let off_diagonal = |x: Var<'t, T>| {
        let u = x.normalize_rows();
        let all = u.matmul(u.t()).sum();
        let diag = u.mul(u).sum();
        all.sub(diag)
    };
    Ok(off_diagonal(fake).add(off_diagonal(real)).scale(1.0 / (n * (n - 1)) as f64))
}

/// [`diversity_loss`] on plain arrays.
pub fn diversity_value(fake: &LocalFeatureSet, real: &LocalFeatureSet) -> Result<f64> {
    let tape = Tape::<f64>::new();
    let f = tape.constant(nn::cast_in::<f64, _>(&fake.omega));
    let r = tape.constant(nn::cast_in::<f64, _>(&real.omega));
    Ok(diversity_loss(f, r)?.scalar_value())
}
