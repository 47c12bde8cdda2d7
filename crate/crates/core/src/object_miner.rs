//! Object mining network: expands a seed activation to the whole object by
//! aggregating seed-region query features back into the query at several
//! scales, fusing the scales top-down and decoding a soft mask.

use ndarray::Array2;
use qfss_autograd::{Binding, ParamStore, Scalar, Var};

use crate::attention::{self, AttentionConfig, SoftmaxAxis};
use crate::backbone;
use crate::error::{Error, Result};
use crate::nn;
use crate::types::{Mask, RngStream};

pub const PREFIXES: [&str; 2] = ["miner/", "attn/miner."];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinerConfig {
    pub levels: usize,
    pub layers_per_scale: usize,
    pub attn: AttentionConfig,
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.layers_per_scale == 0 {
            return Err(Error::InvalidArgument("miner needs at least one level and one layer per scale".into()));
        }
        if self.attn.channels < 2 {
            return Err(Error::InvalidArgument("miner needs at least two channels".into()));
        }
        self.attn.validate()
    }

    /// Extents of every pyramid level, finest first.
    pub fn extents(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let f = 1usize << (self.levels - 1);
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("{h}x{w} features cannot form {} levels", self.levels)));
        }
        Ok((0..self.levels).map(|l| (h >> l, w >> l)).collect())
    }
}

pub fn init_params(store: &mut ParamStore<f32>, cfg: &MinerConfig, rng: &mut RngStream) {
    let c = cfg.attn.channels;
    for l in 0..cfg.levels {
        if l + 1 < cfg.levels {
            attention::init_params(store, &format!("attn/miner.sa{l}"), &cfg.attn, rng);
            nn::init_conv(store, &format!("miner/down{l}"), 3, c, c, rng);
            nn::init_conv(store, &format!("miner/fuse{l}/c1"), 1, c, c, rng);
            nn::init_conv(store, &format!("miner/fuse{l}/c3"), 3, c, c, rng);
        }
        for j in 0..cfg.layers_per_scale {
            attention::init_params(store, &format!("attn/miner.agg{l}.{j}"), &cfg.attn, rng);
        }
    }
    nn::init_conv(store, "miner/head/c1", 3, c, c / 2, rng);
    nn::init_conv(store, "miner/head/c2", 3, c / 2, 1, rng);
}

/// Intermediate tensors of one pass, finest level first.
pub struct PyramidState<'t, T: Scalar> {
    pub levels: Vec<Var<'t, T>>,
    pub pseudo: Vec<Var<'t, T>>,
    pub aggregated: Vec<Var<'t, T>>,
    pub fused: Var<'t, T>,
    /// Head-averaged `[N, N]` aggregation weights per level (target × source).
    pub correlations: Vec<Var<'t, T>>,
    pub extents: Vec<(usize, usize)>,
}

pub struct MinerOutput<'t, T: Scalar> {
    /// Pre-sigmoid scores `[h, w, 1]`.
    pub logits: Var<'t, T>,
    /// Soft mask `[h, w, 1]` at feature resolution.
    pub m_e: Var<'t, T>,
    pub pyramid: PyramidState<'t, T>,
}

fn unflatten<'t, T: Scalar>(x: Var<'t, T>, (h, w): (usize, usize)) -> Var<'t, T> {
    let c = x.shape()[1];
    x.reshape(&[h, w, c])
}

/// Level 1 is `f_q`; level `l+1` is a stride-2 conv of self-attention over level `l`.
pub fn build_pyramid<'t, T: Scalar>(b: &Binding<'t, '_, T>, cfg: &MinerConfig, f_q: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
    let s = f_q.shape();
    let extents = cfg.extents(s[0], s[1])?;
    let mut levels = vec![f_q];
    for l in 0..cfg.levels - 1 {
        let x = levels[l];
        let sa = attention::self_attention(b, &format!("attn/miner.sa{l}"), &cfg.attn, nn::flatten(x))?;
        let next = nn::conv(b, &format!("miner/down{l}"), unflatten(sa.out, extents[l]), 2);
        levels.push(next);
    }
    Ok(levels)
}

/// Query features gather from the pseudo support with a softmax over query
/// positions. Returns the aggregated map and the last layer's weights.
pub fn aggregate_scale<'t, T: Scalar>(
    b: &Binding<'t, '_, T>,
    cfg: &MinerConfig,
    level: usize,
    f_q_l: Var<'t, T>,
    f_psd_l: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (sq, sp) = (f_q_l.shape(), f_psd_l.shape());
    if sq != sp {
        return Err(Error::Shape(format!("query level {sq:?} vs pseudo support {sp:?}")));
    }
    let source = nn::flatten(f_psd_l);
    let mut x = nn::flatten(f_q_l);
    let mut weights = None;
    for j in 0..cfg.layers_per_scale {
        let o = attention::feat_agg(b, &format!("attn/miner.agg{level}.{j}"), &cfg.attn, x, source, SoftmaxAxis::OverTarget)?;
        x = o.out;
        weights = Some(o.weights);
    }
    Ok((unflatten(x, (sq[0], sq[1])), weights.expect("at least one layer")))
}

/// Coarse-to-fine fusion:
/// `F'_L = F_L`, `F'_l = conv3(conv1(F_l + R(F'_{l+1})) + R(F'_{l+1}))`.
pub fn fuse_topdown<'t, T: Scalar>(b: &Binding<'t, '_, T>, aggregated: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let n = aggregated.len();
    if n == 0 {
        return Err(Error::InvalidArgument("nothing to fuse".into()));
    }
    let mut fused = aggregated[n - 1];
    for l in (0..n - 1).rev() {
        let fine = aggregated[l].shape();
        let coarse = fused.shape();
        if coarse[0] * 2 != fine[0] || coarse[1] * 2 != fine[1] {
            return Err(Error::Shape(format!("level {l} is {fine:?}, the level above is {coarse:?}")));
        }
        let up = fused.resize_bilinear(fine[0], fine[1]);
        let inner = nn::conv(b, &format!("miner/fuse{l}/c1"), aggregated[l].add(up), 1);
        fused = nn::conv(b, &format!("miner/fuse{l}/c3"), inner.add(up), 1);
    }
    Ok(fused)
}

/// `conv3x3 -> GELU -> conv3x3`, giving `[h, w, 1]` mask logits.
pub fn predict_logits<'t, T: Scalar>(b: &Binding<'t, '_, T>, fused: Var<'t, T>) -> Var<'t, T> {
    let h = nn::conv(b, "miner/head/c1", fused, 1).gelu();
    nn::conv(b, "miner/head/c2", h, 1)
}

/// Full pass from query features and a seed mask at feature resolution.
pub fn mine<'t, T: Scalar>(b: &Binding<'t, '_, T>, cfg: &MinerConfig, f_q: Var<'t, T>, seed: &Mask) -> Result<MinerOutput<'t, T>> {
    let s = f_q.shape();
    if seed.extent() != (s[0], s[1]) {
        return Err(Error::Shape(format!("seed {:?} vs features {s:?}", seed.extent())));
    }
    let extents = cfg.extents(s[0], s[1])?;
    let levels = build_pyramid(b, cfg, f_q)?;
    let mut pseudo = Vec::with_capacity(cfg.levels);
    let mut aggregated = Vec::with_capacity(cfg.levels);
    let mut correlations = Vec::with_capacity(cfg.levels);
    for (l, (&level, &extent)) in levels.iter().zip(&extents).enumerate() {
        let m: Array2<f32> = if l == 0 { seed.data().clone() } else { backbone::downsample_mask(seed, extent)?.into_data() };
        let psd = level.mul(nn::mask_const(b, &m));
        let (agg, corr) = aggregate_scale(b, cfg, l, level, psd)?;
        pseudo.push(psd);
        aggregated.push(agg);
        correlations.push(corr);
    }
    let fused = fuse_topdown(b, &aggregated)?;
    let logits = predict_logits(b, fused);
    Ok(MinerOutput { logits, m_e: logits.sigmoid(), pyramid: PyramidState { levels, pseudo, aggregated, fused, correlations, extents } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Axis};
    use qfss_autograd::Tape;
    use rand::Rng;

    fn setup(levels: usize, c: usize) -> (MinerConfig, ParamStore<f64>) {
        let cfg = MinerConfig { levels, layers_per_scale: 1, attn: AttentionConfig { channels: c, heads: 2, ffn_hidden: 2 * c } };
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, &mut RngStream::new(4));
        (cfg, store.cast())
    }

    fn features(h: usize, w: usize, c: usize, seed: u64) -> Array3<f64> {
        let mut rng = RngStream::new(seed);
        Array3::from_shape_fn((h, w, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn pyramid_extents_halve() {
        let (cfg, store) = setup(3, 8);
        let tape = Tape::new();
        let b = Binding::frozen(&tape, &store);
        let f = tape.constant(features(32, 32, 8, 1).into_dyn());
        let levels = build_pyramid(&b, &cfg, f).unwrap();
        let shapes: Vec<Vec<usize>> = levels.iter().map(|l| l.shape()).collect();
        assert_eq!(shapes, vec![vec![32, 32, 8], vec![16, 16, 8], vec![8, 8, 8]]);
        assert!(build_pyramid(&b, &cfg, tape.constant(features(6, 8, 8, 1).into_dyn())).is_err());
    }

    #[test]
    fn single_level_pyramid_is_identity() {
        let (cfg, store) = setup(1, 8);
        let tape = Tape::new();
        let b = Binding::frozen(&tape, &store);
        let f = tape.constant(features(4, 4, 8, 1).into_dyn());
        let levels = build_pyramid(&b, &cfg, f).unwrap();
        assert_eq!(levels.len(), 1);
        assert_eq!(levels[0].value(), f.value());
        assert_eq!(fuse_topdown(&b, &levels).unwrap().value(), f.value());
    }

    #[test]
    fn zero_pseudo_support_stays_finite() {
        let (cfg, store) = setup(2, 8);
        let tape = Tape::new();
        let b = Binding::frozen(&tape, &store);
        let f = tape.constant(features(4, 4, 8, 2).into_dyn());
        let z = tape.constant(Array3::<f64>::zeros((4, 4, 8)).into_dyn());
        let (out, w) = aggregate_scale(&b, &cfg, 0, f, z).unwrap();
        assert_eq!(out.shape(), vec![4, 4, 8]);
        assert!(out.value().iter().all(|v| v.is_finite()));
        for s in w.value().sum_axis(Axis(0)).iter() {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_is_soft_and_full_resolution() {
        let (cfg, store) = setup(3, 8);
        let tape = Tape::new();
        let b = Binding::frozen(&tape, &store);
        let f = tape.constant(features(8, 8, 8, 3).into_dyn());
        let seed = Mask::from_fn(8, 8, |y, x| (2..5).contains(&y) && (3..6).contains(&x));
        let out = mine(&b, &cfg, f, &seed).unwrap();
        assert_eq!(out.m_e.shape(), vec![8, 8, 1]);
        assert!(out.m_e.value().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(out.pyramid.correlations.len(), 3);
        assert_eq!(out.pyramid.correlations[2].shape(), vec![4, 4]);
    }

    #[test]
    fn every_miner_parameter_receives_gradient() {
        let (cfg, store) = setup(3, 8);
        let tape = Tape::new();
        let b = Binding::new(&tape, &store, |_| true);
        let f = tape.constant(features(8, 8, 8, 3).into_dyn());
        let seed = Mask::from_fn(8, 8, |y, x| y < 4 && x < 4);
        let out = mine(&b, &cfg, f, &seed).unwrap();
        let grads = tape.backward(out.m_e.mean());
        assert_eq!(grads.params().len(), store.len());
        for (name, g) in grads.params() {
            assert!(g.iter().any(|&v| v != 0.0), "{name} got an all-zero gradient");
        }
    }
}
