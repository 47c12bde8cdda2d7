//! Multi-head feature aggregation: a target sequence gathers values from a
//! source sequence, followed by a feed-forward block.
//!
//! Layer structure (pre-norm on the target only):
//!
//! ```text
//! Q = LN1(t) Wq,  K = s Wk,  V = s Wv        (no bias, no output projection)
//! A_h = softmax(Q_h K_hᵀ / √d, axis)
//! x = t + concat_h(A_h V_h)
//! y = x + W2 GELU(W1 LN2(x) + b1) + b2
//! ```
//!
//! The source is left unnormalized so an all-zero source row contributes a
//! zero value vector.

use qfss_autograd::{Binding, ParamStore, Scalar, Var};

use crate::error::{Error, Result};
use crate::nn;
use crate::types::RngStream;

/// Which axis of the `[N_target, N_source]` score matrix is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftmaxAxis {
    /// Each target row is a distribution over source positions.
    OverSource,
    /// Each source column is a distribution over target positions.
    OverTarget,
}

impl SoftmaxAxis {
    fn axis(self) -> usize {
        match self {
            SoftmaxAxis::OverSource => 1,
            SoftmaxAxis::OverTarget => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub channels: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels == 0 || self.channels % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} channels cannot be split into {} heads",
                self.channels, self.heads
            )));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::InvalidArgument("ffn_hidden must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_params(store: &mut ParamStore<f32>, prefix: &str, cfg: &AttentionConfig, rng: &mut RngStream) {
    let c = cfg.channels;
    for ln in ["ln1", "ln2"] {
        nn::constant(store, &format!("{prefix}/{ln}/g"), &[c], 1.0);
        nn::constant(store, &format!("{prefix}/{ln}/b"), &[c], 0.0);
    }
    for w in ["wq", "wk", "wv"] {
        nn::normal(store, &format!("{prefix}/{w}"), &[c, c], 1.0 / (c as f64).sqrt(), rng);
    }
    nn::init_linear(store, &format!("{prefix}/ffn1"), c, cfg.ffn_hidden, 2f64.sqrt(), rng);
    nn::init_linear(store, &format!("{prefix}/ffn2"), cfg.ffn_hidden, c, 0.5, rng);
}

pub struct AttentionOutput<'t, T: Scalar> {
    /// `[N_target, C]`
    pub out: Var<'t, T>,
    /// Head-averaged attention weights `[N_target, N_source]`.
    pub weights: Var<'t, T>,
}

/// Scaled dot-product attention over `heads` column blocks of `q`, `k`, `v`.
pub fn attend<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    heads: usize,
    axis: SoftmaxAxis,
) -> AttentionOutput<'t, T> {
    let c = q.shape()[1];
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut avg: Option<Var<'t, T>> = None;
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 { (q, k, v) } else { (q.slice(1, h * d, d), k.slice(1, h * d, d), v.slice(1, h * d, d)) };
        let a = qh.matmul(kh.t()).scale(scale).softmax(axis.axis());
        outs.push(a.matmul(vh));
        avg = Some(match avg {
            None => a,
            Some(acc) => acc.add(a),
        });
    }
    let out = if heads == 1 { outs[0] } else { Var::concat(&outs, 1) };
    let weights = avg.expect("at least one head").scale(1.0 / heads as f64);
    AttentionOutput { out, weights }
}

/// One aggregation layer: `target [N2, C]` attends to `source [N1, C]`.
pub fn feat_agg<'t, T: Scalar>(
    b: &Binding<'t, '_, T>,
    prefix: &str,
    cfg: &AttentionConfig,
    target: Var<'t, T>,
    source: Var<'t, T>,
    axis: SoftmaxAxis,
) -> Result<AttentionOutput<'t, T>> {
    let (ts, ss) = (target.shape(), source.shape());
    if ts.len() != 2 || ss.len() != 2 || ts[1] != cfg.channels || ss[1] != cfg.channels {
        return Err(Error::Shape(format!("attention over {ts:?} and {ss:?} with C={}", cfg.channels)));
    }
    if ts[0] == 0 || ss[0] == 0 {
        return Err(Error::Shape("attention over an empty sequence".into()));
    }
    let tn = nn::layer_norm(b, &format!("{prefix}/ln1"), target);
    let q = tn.matmul(b.get(&format!("{prefix}/wq")));
    let k = source.matmul(b.get(&format!("{prefix}/wk")));
    let v = source.matmul(b.get(&format!("{prefix}/wv")));
    let att = attend(q, k, v, cfg.heads, axis);
    let x = target.add(att.out);
    let h = nn::linear(b, &format!("{prefix}/ffn1"), nn::layer_norm(b, &format!("{prefix}/ln2"), x)).gelu();
    let out = x.add(nn::linear(b, &format!("{prefix}/ffn2"), h));
    Ok(AttentionOutput { out, weights: att.weights })
}

/// `feat_agg(seq, seq, OverSource)`.
pub fn self_attention<'t, T: Scalar>(
    b: &Binding<'t, '_, T>,
    prefix: &str,
    cfg: &AttentionConfig,
    seq: Var<'t, T>,
) -> Result<AttentionOutput<'t, T>> {
    feat_agg(b, prefix, cfg, seq, seq, SoftmaxAxis::OverSource)
}
