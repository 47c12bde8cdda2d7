//! Seed localization: a holistic support prototype is matched against every
//! query position and the best-matching positions become the seed mask.

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::types::{cosine_slices, FeatureMap, FeatureVector, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Softmax over all positions of the raw cosine map.
    SoftmaxSpatial,
    /// `(cos + 1) / 2`, divided by its maximum.
    MaxNormalize,
    /// `(cos − min) / (max − min)`; a constant map is all ones.
    MinMaxNormalize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizerConfig {
    pub tau: f32,
    pub normalization: Normalization,
    pub fallback_topk: usize,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self { tau: 0.7, normalization: Normalization::MaxNormalize, fallback_topk: 4 }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidArgument(format!("tau {} outside (0, 1)", self.tau)));
        }
        if self.fallback_topk == 0 {
            return Err(Error::InvalidArgument("fallback_topk must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-episode localization record.
#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub raw_cosine: Array2<f32>,
    pub similarity: Mask,
    pub activation: Mask,
    pub degenerate_positions: usize,
    pub fallback: bool,
}

/// Weighted mean of `f` over `m`.
pub fn mask_average_pool(f: &FeatureMap, m: &Mask) -> Result<FeatureVector> {
    if m.extent() != f.extent() {
        return Err(Error::Shape(format!("mask {:?} vs features {:?}", m.extent(), f.extent())));
    }
    let total: f64 = m.data().iter().map(|&v| v as f64).sum();
    if total <= 0.0 {
        return Err(Error::EmptyMask("no prototype can be pooled from an empty mask".into()));
    }
    let mut acc = vec![0.0f64; f.channels()];
    Zip::from(f.data().lanes(Axis(2))).and(m.data()).for_each(|px, &w| {
        if w != 0.0 {
            for (a, &v) in acc.iter_mut().zip(px.iter()) {
                *a += w as f64 * v as f64;
            }
        }
    });
    FeatureVector::new(acc.into_iter().map(|a| (a / total) as f32).collect())
}

/// Per-position cosine against `f_h`, plus the count of zero-norm positions.
pub fn cosine_map(f_h: &FeatureVector, f_q: &FeatureMap) -> Result<(Array2<f32>, usize)> {
    if f_h.len() != f_q.channels() {
        return Err(Error::Shape(format!("prototype has {} channels, features {}", f_h.len(), f_q.channels())));
    }
    let mut degenerate = 0;
    let mut out = Array2::zeros(f_q.extent());
    Zip::from(&mut out).and(f_q.data().lanes(Axis(2))).for_each(|o, px| {
        let c = cosine_slices(f_h.data().view(), px);
        degenerate += c.degenerate as usize;
        *o = c.value;
    });
    Ok((out, degenerate))
}

pub fn normalize_map(cos: &Array2<f32>, normalization: Normalization) -> Result<Mask> {
    let data = match normalization {
        Normalization::MaxNormalize => {
            let shifted = cos.mapv(|c| (c + 1.0) / 2.0);
            let max = shifted.fold(0.0f32, |m, &v| m.max(v));
            if max > 0.0 {
                shifted.mapv(|v| (v / max).clamp(0.0, 1.0))
            } else {
                shifted
            }
        }
        Normalization::MinMaxNormalize => {
            let (lo, hi) = cos.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            if hi > lo {
                cos.mapv(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
            } else {
                Array2::ones(cos.raw_dim())
            }
        }
        Normalization::SoftmaxSpatial => {
            let m = cos.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let e = cos.mapv(|v| ((v - m) as f64).exp());
            let s = e.sum();
            e.mapv(|v| (v / s) as f32)
        }
    };
    Mask::soft(data)
}

/// Normalized similarity between the prototype and every query position.
pub fn similarity_map(f_h: &FeatureVector, f_q: &FeatureMap, normalization: Normalization) -> Result<Mask> {
    normalize_map(&cosine_map(f_h, f_q)?.0, normalization)
}

/// Thresholds `sim` at `tau`; returns the mask and whether the top-k
/// fallback was used.
pub fn threshold_activation(sim: &Mask, cfg: &LocalizerConfig) -> (Mask, bool) {
    let m = sim.binarize(cfg.tau);
    if !m.is_empty() {
        return (m, false);
    }
    let (h, w) = sim.extent();
    let flat: Vec<f32> = sim.data().iter().copied().collect();
    let mut order: Vec<usize> = (0..flat.len()).collect();
    // stable sort keeps row-major order among ties
    order.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]));
    let mut out = Array2::zeros((h, w));
    for &i in order.iter().take(cfg.fallback_topk) {
        out[[i / w, i % w]] = 1.0;
    }
    (Mask::binary(out).expect("0/1 entries"), true)
}

/// Element-wise OR of binary activations.
pub fn kshot_combine(activations: &[Mask]) -> Result<Mask> {
    let first = activations.first().ok_or_else(|| Error::InvalidArgument("no activations to combine".into()))?;
    let mut out = first.binarize(0.0).into_data();
    for m in &activations[1..] {
        if m.extent() != first.extent() {
            return Err(Error::Shape("activation extents differ".into()));
        }
        Zip::from(&mut out).and(m.data()).for_each(|o, &v| {
            if v > 0.0 {
                *o = 1.0;
            }
        });
    }
    Mask::binary(out)
}

/// `f_q ⊙ m`, the mask broadcast over channels.
pub fn build_pseudo_support(f_q: &FeatureMap, m: &Mask) -> Result<FeatureMap> {
    if m.extent() != f_q.extent() {
        return Err(Error::Shape("pseudo-support mask extent differs from features".into()));
    }
    let mut out = f_q.data().clone();
    Zip::from(out.lanes_mut(Axis(2))).and(m.data()).for_each(|mut px, &w| px.mapv_inplace(|v| v * w));
    FeatureMap::new(out)
}

/// Full single-support localization.
pub fn localize(f_s: &FeatureMap, m_s: &Mask, f_q: &FeatureMap, cfg: &LocalizerConfig) -> Result<Localization> {
    let f_h = mask_average_pool(f_s, m_s)?;
    let (raw_cosine, degenerate_positions) = cosine_map(&f_h, f_q)?;
    let similarity = normalize_map(&raw_cosine, cfg.normalization)?;
    let (activation, fallback) = threshold_activation(&similarity, cfg);
    Ok(Localization { raw_cosine, similarity, activation, degenerate_positions, fallback })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array3};
    use proptest::prelude::*;

    fn fmap(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f32) -> FeatureMap {
        FeatureMap::new(Array3::from_shape_fn((h, w, c), |(y, x, k)| f(y, x, k))).unwrap()
    }

    #[test]
    fn pooling_examples() {
        let f = fmap(2, 3, 2, |y, x, k| (y * 3 + x) as f32 + 10.0 * k as f32);
        let all = mask_average_pool(&f, &Mask::ones(2, 3)).unwrap();
        assert_eq!(all.data(), &array![2.5, 12.5]);
        let point = mask_average_pool(&f, &Mask::from_fn(2, 3, |y, x| y == 1 && x == 2)).unwrap();
        assert_eq!(point.data(), &array![5.0, 15.0]);
        let regions = fmap(2, 2, 2, |_, x, k| if x == 0 { [1.0, 2.0][k] } else { [-3.0, 0.5][k] });
        let u = mask_average_pool(&regions, &Mask::from_fn(2, 2, |_, x| x == 0)).unwrap();
        assert_eq!(u.data(), &array![1.0, 2.0]);
        assert!(matches!(mask_average_pool(&f, &Mask::zeros(2, 3)), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn similarity_examples() {
        let f_h = FeatureVector::new(array![1.0, 0.0]).unwrap();
        let same = fmap(3, 3, 2, |_, _, k| [1.0, 0.0][k]);
        let s = similarity_map(&f_h, &same, Normalization::MaxNormalize).unwrap();
        assert!(s.data().iter().all(|&v| v == 1.0));

        let peaked = fmap(3, 3, 2, |y, x, k| if (y, x) == (1, 1) { [1.0, 0.0][k] } else { [0.0, 1.0][k] });
        let s = similarity_map(&f_h, &peaked, Normalization::MaxNormalize).unwrap();
        assert_eq!(s.data()[[1, 1]], 1.0);
        assert!(s.data().iter().enumerate().all(|(i, &v)| i == 4 || (v - 0.5).abs() < 1e-6));
        let (act, fallback) = threshold_activation(&s, &LocalizerConfig::default());
        assert!(!fallback);
        assert_eq!(act.data(), Mask::from_fn(3, 3, |y, x| (y, x) == (1, 1)).data());

        let doubled = FeatureMap::new(peaked.data() * 2.0).unwrap();
        assert_eq!(similarity_map(&f_h, &doubled, Normalization::MaxNormalize).unwrap(), s);
    }

    #[test]
    fn minmax_spans_the_unit_interval() {
        let f_h = FeatureVector::new(array![1.0, 0.0]).unwrap();
        let f = fmap(3, 3, 2, |y, x, k| [1.0 + (y * 3 + x) as f32, 2.0][k]);
        let s = similarity_map(&f_h, &f, Normalization::MinMaxNormalize).unwrap();
        let d = s.data();
        assert_eq!(d[[0, 0]], 0.0);
        assert_eq!(d[[2, 2]], 1.0);
        let cos = cosine_map(&f_h, &f).unwrap().0;
        let (lo, hi) = (cos[[0, 0]], cos[[2, 2]]);
        for (v, c) in d.iter().zip(cos.iter()) {
            assert!((v - (c - lo) / (hi - lo)).abs() < 1e-6);
        }
        let same = fmap(2, 2, 2, |_, _, k| [3.0, 1.0][k]);
        assert!(similarity_map(&f_h, &same, Normalization::MinMaxNormalize).unwrap().data().iter().all(|&v| v == 1.0));
        let doubled = FeatureMap::new(f.data() * 2.0).unwrap();
        assert_eq!(similarity_map(&f_h, &doubled, Normalization::MinMaxNormalize).unwrap(), s);
    }

    #[test]
    fn threshold_examples() {
        let cfg = LocalizerConfig::default();
        let (all, fb) = threshold_activation(&Mask::soft(Array2::from_elem((3, 3), 0.9)).unwrap(), &cfg);
        assert!(!fb && all.foreground_count() == 9);
        let (top, fb) = threshold_activation(&Mask::soft(Array2::from_elem((3, 3), 0.5)).unwrap(), &cfg);
        assert!(fb);
        assert_eq!(top.data(), &array![[1.0, 1.0, 1.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
    }

    #[test]
    fn softmax_mode_is_a_distribution() {
        let f_h = FeatureVector::new(array![1.0, 0.0]).unwrap();
        let f = fmap(4, 4, 2, |y, x, _| (y + x) as f32 - 2.5);
        let s = similarity_map(&f_h, &f, Normalization::SoftmaxSpatial).unwrap();
        assert!((s.data().sum() - 1.0).abs() < 1e-5);
        // with 16 positions no entry can pass tau, so the fallback is always used
        assert!(threshold_activation(&s, &LocalizerConfig { normalization: Normalization::SoftmaxSpatial, ..Default::default() }).1);
    }

    #[test]
    fn kshot_examples() {
        let a = Mask::binary(array![[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let b = Mask::binary(array![[0.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(kshot_combine(std::slice::from_ref(&a)).unwrap(), a);
        assert_eq!(kshot_combine(&[a.clone(), b.clone()]).unwrap().data(), &array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(kshot_combine(&[]).is_err());
    }

    #[test]
    fn pseudo_support_examples() {
        let f = fmap(2, 2, 3, |y, x, k| (y * 6 + x * 3 + k) as f32 + 1.0);
        assert_eq!(build_pseudo_support(&f, &Mask::ones(2, 2)).unwrap(), f);
        assert!(build_pseudo_support(&f, &Mask::zeros(2, 2)).unwrap().data().iter().all(|&v| v == 0.0));
        let one = build_pseudo_support(&f, &Mask::from_fn(2, 2, |y, x| y == 0 && x == 1)).unwrap();
        assert_eq!(one.pixel(0, 1), f.pixel(0, 1));
        assert_eq!(one.data().sum(), f.pixel(0, 1).sum());
    }

    fn arb_mask(h: usize, w: usize) -> impl Strategy<Value = Mask> {
        prop::collection::vec(any::<bool>(), h * w)
            .prop_map(move |bits| Mask::binary(Array2::from_shape_fn((h, w), |(y, x)| bits[y * w + x] as u8 as f32)).unwrap())
    }

    proptest! {
        #[test]
        fn pooling_ignores_mask_scale(vals in prop::collection::vec(-2.0f32..2.0, 4 * 4 * 3), bits in prop::collection::vec(0.0f32..1.0, 16), k in 0.1f32..5.0) {
            let f = FeatureMap::new(Array3::from_shape_vec((4, 4, 3), vals).unwrap()).unwrap();
            let m = Array2::from_shape_vec((4, 4), bits).unwrap();
            prop_assume!(m.sum() > 1e-3);
            let a = mask_average_pool(&f, &Mask::soft(m.clone()).unwrap()).unwrap();
            let scaled = Mask::soft(m.mapv(|v| v * k / 5.0)).unwrap();
            let reference = mask_average_pool(&f, &Mask::soft(m.mapv(|v| v / 5.0)).unwrap()).unwrap();
            let b = mask_average_pool(&f, &scaled).unwrap();
            let diff: f32 = (b.data() - reference.data()).mapv(f32::abs).sum();
            prop_assert!(diff < 1e-4);
            prop_assert!((a.data() - reference.data()).mapv(f32::abs).sum() < 1e-4);
        }

        #[test]
        fn threshold_never_empty(vals in prop::collection::vec(0.0f32..1.0, 25), tau in 0.05f32..0.95, k in 1usize..6) {
            let sim = Mask::soft(Array2::from_shape_vec((5, 5), vals).unwrap()).unwrap();
            let (m, _) = threshold_activation(&sim, &LocalizerConfig { tau, normalization: Normalization::MaxNormalize, fallback_topk: k });
            prop_assert!(!m.is_empty());
        }

        #[test]
        fn union_laws(a in arb_mask(3, 4), b in arb_mask(3, 4), c in arb_mask(3, 4)) {
            let ab = kshot_combine(&[a.clone(), b.clone()]).unwrap();
            prop_assert_eq!(&ab, &kshot_combine(&[b.clone(), a.clone()]).unwrap());
            let left = kshot_combine(&[ab.clone(), c.clone()]).unwrap();
            let bc = kshot_combine(&[b.clone(), c.clone()]).unwrap();
            prop_assert_eq!(&left, &kshot_combine(&[a.clone(), bc]).unwrap());
            prop_assert_eq!(&kshot_combine(&[a.clone(), a.clone()]).unwrap(), &a);
            prop_assert!(left.contains(&a) && left.contains(&b) && left.contains(&c));
        }

        #[test]
        fn similarity_ignores_per_position_scale(vals in prop::collection::vec(-1.0f32..1.0, 3 * 3 * 4), scales in prop::collection::vec(0.1f32..10.0, 9)) {
            let f = FeatureMap::new(Array3::from_shape_vec((3, 3, 4), vals).unwrap()).unwrap();
            let s = Array1::from(scales);
            let mut scaled = f.data().clone();
            for (i, mut px) in scaled.lanes_mut(Axis(2)).into_iter().enumerate() {
                px.mapv_inplace(|v| v * s[i]);
            }
            let f_h = FeatureVector::new(f.pixel(0, 0).to_owned()).unwrap();
            let a = similarity_map(&f_h, &f, Normalization::MaxNormalize).unwrap();
            let b = similarity_map(&f_h, &FeatureMap::new(scaled).unwrap(), Normalization::MaxNormalize).unwrap();
            prop_assert!((a.data() - b.data()).mapv(f32::abs).fold(0.0f32, |m, &v| m.max(v)) < 1e-5);
        }
    }
}
