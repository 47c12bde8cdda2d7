//! Pixel-feature similarity within one object and across two objects of the
//! same class.

use std::collections::BTreeMap;

use rand::seq::index::sample;

use crate::backbone;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::records::Record;
use crate::types::{cosine_slices, mix64, Episode, FeatureMap, Mask, RngStream};

/// Mean cosine and number of pairs behind it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectSimilarity {
    pub mean: f64,
    pub pairs: usize,
}

fn positions(m: &Mask) -> Vec<(usize, usize)> {
    m.data().indexed_iter().filter(|(_, &v)| v > 0.5).map(|(p, _)| p).collect()
}

/// Draws at most `budget` distinct pair indices out of `total`.
fn pair_indices(total: usize, budget: usize, rng: &mut RngStream) -> Vec<usize> {
    if total <= budget {
        (0..total).collect()
    } else {
        let mut v = sample(rng, total, budget).into_vec();
        v.sort_unstable();
        v
    }
}

fn mean_cosine(f_a: &FeatureMap, f_b: &FeatureMap, pairs: impl Iterator<Item = ((usize, usize), (usize, usize))>) -> ObjectSimilarity {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (a, b) in pairs {
        sum += cosine_slices(f_a.pixel(a.0, a.1), f_b.pixel(b.0, b.1)).value as f64;
        n += 1;
    }
    ObjectSimilarity { mean: if n > 0 { sum / n as f64 } else { 0.0 }, pairs: n }
}

/// Intra-object similarity: cosine over unordered pairs of distinct
/// foreground pixels of one object. `None` with fewer than two pixels.
pub fn intra_similarity(f: &FeatureMap, m: &Mask, budget: usize, rng: &mut RngStream) -> Result<Option<ObjectSimilarity>> {
    if f.extent() != m.extent() {
        return Err(Error::Shape("mask and features differ in extent".into()));
    }
    let p = positions(m);
    let n = p.len();
    if n < 2 {
        return Ok(None);
    }
    // pair k enumerates (i, j), i < j, row by row
    let total = n * (n - 1) / 2;
    let mut starts = Vec::with_capacity(n);
    let mut acc = 0;
    for i in 0..n {
        starts.push(acc);
        acc += n - 1 - i;
    }
    let pairs = pair_indices(total, budget, rng).into_iter().map(|k| {
        let i = starts.partition_point(|&s| s <= k) - 1;
        let j = i + 1 + (k - starts[i]);
        (p[i], p[j])
    });
    Ok(Some(mean_cosine(f, f, pairs)))
}

/// Inter-object similarity: cosine over pairs of one foreground pixel from each object.
pub fn object_similarity(
    f_a: &FeatureMap,
    m_a: &Mask,
    f_b: &FeatureMap,
    m_b: &Mask,
    budget: usize,
    rng: &mut RngStream,
) -> Result<Option<ObjectSimilarity>> {
    if f_a.extent() != m_a.extent() || f_b.extent() != m_b.extent() || f_a.channels() != f_b.channels() {
        return Err(Error::Shape("masks and features do not line up".into()));
    }
    let (pa, pb) = (positions(m_a), positions(m_b));
    if pa.is_empty() || pb.is_empty() {
        return Ok(None);
    }
    let pairs = pair_indices(pa.len() * pb.len(), budget, rng).into_iter().map(|k| (pa[k / pb.len()], pb[k % pb.len()]));
    Ok(Some(mean_cosine(f_a, f_b, pairs)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSimilarity {
    pub class_id: usize,
    /// Mean over query objects of their intra-object similarity.
    pub intra: f64,
    /// Mean over support/query object pairs of their inter-object similarity.
    pub inter: f64,
    pub intra_objects: usize,
    pub inter_objects: usize,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub classes: Vec<ClassSimilarity>,
}

impl SimilarityReport {
    pub fn to_records(&self) -> Vec<Record> {
        self.classes
            .iter()
            .map(|c| {
                Record::new()
                    .with("class", c.class_id)
                    .with("intra", format!("{:.6}", c.intra))
                    .with("inter", format!("{:.6}", c.inter))
                    .with("intra_pairs", c.intra_pairs)
                    .with("inter_pairs", c.inter_pairs)
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<8} {:>8} {:>8}\n", "class", "intra", "inter");
        for c in &self.classes {
            s.push_str(&format!("{:<8} {:>8.4} {:>8.4}\n", c.class_id, c.intra, c.inter));
        }
        s
    }
}

/// Foreground at feature resolution: bilinear downsampling re-binarized at
/// 0.5, falling back to any covered position for thin objects.
fn feature_mask(m: &Mask, extent: (usize, usize)) -> Result<Mask> {
    let b = backbone::downsample_mask(m, extent)?.binarize(0.5);
    if !b.is_empty() {
        return Ok(b);
    }
    Ok(backbone::support_mask_at(m, extent)?.binarize(0.0))
}

/// Per-class intra-object (query) and inter-object (support vs query)
/// similarity of encoder features, sampling at most `pairs_per_object` pairs
/// per object or object pair.
pub fn measure_similarity(model: &Model, episodes: &[Episode], pairs_per_object: usize, seed: u64) -> Result<SimilarityReport> {
    if pairs_per_object == 0 {
        return Err(Error::InvalidArgument("pairs_per_object must be positive".into()));
    }
    #[derive(Default)]
    struct Acc {
        intra: Vec<ObjectSimilarity>,
        inter: Vec<ObjectSimilarity>,
    }
    let mut by_class: BTreeMap<usize, Acc> = BTreeMap::new();
    for (i, ep) in episodes.iter().enumerate() {
        let mut rng = RngStream::new(mix64(seed ^ mix64(ep.seed))).fork(i as u64);
        let f_q = model.features(&ep.query_image)?;
        let m_q = feature_mask(&ep.query_mask, f_q.extent())?;
        let acc = by_class.entry(ep.class_id).or_default();
        if let Some(s) = intra_similarity(&f_q, &m_q, pairs_per_object, &mut rng)? {
            acc.intra.push(s);
        }
        for s in &ep.supports {
            let f_s = model.features(&s.image)?;
            let m_s = feature_mask(&s.label, f_s.extent())?;
            if let Some(x) = object_similarity(&f_s, &m_s, &f_q, &m_q, pairs_per_object, &mut rng)? {
                acc.inter.push(x);
            }
        }
    }
    let mean = |v: &[ObjectSimilarity]| v.iter().map(|s| s.mean).sum::<f64>() / v.len() as f64;
    let classes = by_class
        .into_iter()
        .filter(|(_, a)| !a.intra.is_empty() && !a.inter.is_empty())
        .map(|(class_id, a)| ClassSimilarity {
            class_id,
            intra: mean(&a.intra),
            inter: mean(&a.inter),
            intra_objects: a.intra.len(),
            inter_objects: a.inter.len(),
            intra_pairs: a.intra.iter().map(|s| s.pairs).sum(),
            inter_pairs: a.inter.iter().map(|s| s.pairs).sum(),
        })
        .collect();
    Ok(SimilarityReport { classes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn fmap(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> FeatureMap {
        FeatureMap::new(Array3::from_shape_fn((h, w, 3), |(y, x, k)| f(y, x, k))).unwrap()
    }

    #[test]
    fn constant_object_is_self_similar() {
        let f = fmap(4, 4, |y, x, k| if y < 2 && x < 2 { [0.2, 0.5, 1.0][k] } else { (y * 4 + x + k) as f32 });
        let m = Mask::from_fn(4, 4, |y, x| y < 2 && x < 2);
        let s = intra_similarity(&f, &m, 2000, &mut RngStream::new(0)).unwrap().unwrap();
        assert!((s.mean - 1.0).abs() < 1e-6);
        assert_eq!(s.pairs, 6);
        assert!(intra_similarity(&f, &Mask::from_fn(4, 4, |y, x| y + x == 0), 10, &mut RngStream::new(0)).unwrap().is_none());
    }

    #[test]
    fn orthogonal_objects_have_zero_inter_similarity() {
        let a = fmap(3, 3, |_, _, k| [1.0, 0.0, 0.0][k]);
        let b = fmap(3, 3, |y, _, k| [0.0, y as f32 + 1.0, 2.0][k]);
        let m = Mask::ones(3, 3);
        let s = object_similarity(&a, &m, &b, &m, 2000, &mut RngStream::new(0)).unwrap().unwrap();
        assert_eq!(s.mean, 0.0);
        assert_eq!(s.pairs, 81);
    }

    #[test]
    fn pair_budget_is_respected_and_pairs_are_distinct() {
        let f = fmap(8, 8, |y, x, k| ((y * 8 + x) * (k + 1)) as f32 + 1.0);
        let m = Mask::ones(8, 8);
        let s = intra_similarity(&f, &m, 100, &mut RngStream::new(1)).unwrap().unwrap();
        assert_eq!(s.pairs, 100);
        let full = intra_similarity(&f, &m, usize::MAX, &mut RngStream::new(1)).unwrap().unwrap();
        assert_eq!(full.pairs, 64 * 63 / 2);
        assert!(full.mean < 1.0 && full.mean > 0.0);
        let idx = pair_indices(50, 10, &mut RngStream::new(2));
        assert_eq!(idx.len(), 10);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn enumerated_pairs_cover_the_upper_triangle() {
        // with a full budget, intra similarity equals a brute-force double loop
        let f = fmap(3, 4, |y, x, k| ((y * 7 + x * 3 + k * 5) % 11) as f32 - 4.0);
        let m = Mask::from_fn(3, 4, |y, x| (y + x) % 3 != 0);
        let p = positions(&m);
        let mut sum = 0.0;
        let mut n = 0;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                sum += cosine_slices(f.pixel(p[i].0, p[i].1), f.pixel(p[j].0, p[j].1)).value as f64;
                n += 1;
            }
        }
        let s = intra_similarity(&f, &m, usize::MAX, &mut RngStream::new(0)).unwrap().unwrap();
        assert_eq!(s.pairs, n);
        assert!((s.mean - sum / n as f64).abs() < 1e-12);
    }
}
