//! Weak support labels (boxes, scribbles) and random foreground erosion.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::types::{Mask, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeakLabelKind {
    Mask,
    Bbox,
    Scribble,
}

impl WeakLabelKind {
    pub const ALL: [WeakLabelKind; 3] = [WeakLabelKind::Mask, WeakLabelKind::Bbox, WeakLabelKind::Scribble];

    pub fn name(self) -> &'static str {
        match self {
            WeakLabelKind::Mask => "mask",
            WeakLabelKind::Bbox => "bbox",
            WeakLabelKind::Scribble => "scribble",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(WeakLabelKind::Mask),
            "bbox" => Ok(WeakLabelKind::Bbox),
            "scribble" => Ok(WeakLabelKind::Scribble),
            other => Err(Error::InvalidArgument(format!("unknown label kind `{other}`"))),
        }
    }
}

/// Scribble length bounds `[lo, hi]` for `n` foreground pixels: 2% to 10%,
/// with at least one pixel.
pub fn scribble_bounds(n: usize) -> (usize, usize) {
    let lo = ((0.02 * n as f64).ceil() as usize).max(1);
    let hi = ((0.10 * n as f64).floor() as usize).max(lo);
    (lo, hi)
}

pub fn derive_weak_label(mask: &Mask, kind: WeakLabelKind, rng: &mut RngStream) -> Result<Mask> {
    if mask.is_empty() {
        return Err(Error::EmptyMask("cannot derive a weak label from an empty mask".into()));
    }
    let fg = mask.binarize(0.0);
    match kind {
        WeakLabelKind::Mask => Ok(fg),
        WeakLabelKind::Bbox => Ok(bbox(&fg)),
        WeakLabelKind::Scribble => Ok(scribble(&fg, rng)),
    }
}

fn bbox(fg: &Mask) -> Mask {
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for ((y, x), &v) in fg.data().indexed_iter() {
        if v > 0.0 {
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
    }
    let (h, w) = fg.extent();
    Mask::from_fn(h, w, |y, x| (y0..=y1).contains(&y) && (x0..=x1).contains(&x))
}

const N8: [(isize, isize); 8] = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)];
const N4: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

fn at(a: &Array2<bool>, y: usize, x: usize, d: (isize, isize)) -> Option<(usize, usize)> {
    let (h, w) = a.dim();
    let (ny, nx) = (y as isize + d.0, x as isize + d.1);
    (ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w).then_some((ny as usize, nx as usize))
}

/// Zhang-Suen thinning.
pub fn skeletonize(fg: &Array2<bool>) -> Array2<bool> {
    let mut img = fg.clone();
    let (h, w) = img.dim();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if !img[[y, x]] {
                        continue;
                    }
                    let p: Vec<bool> = N8.iter().map(|&d| at(&img, y, x, d).is_some_and(|(a, b)| img[[a, b]])).collect();
                    let b = p.iter().filter(|&&v| v).count();
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    // p[0]=N, p[2]=E, p[4]=S, p[6]=W
                    let (c1, c2) = if pass == 0 {
                        (!(p[0] && p[2] && p[4]), !(p[2] && p[4] && p[6]))
                    } else {
                        (!(p[0] && p[2] && p[6]), !(p[0] && p[4] && p[6]))
                    };
                    if (2..=6).contains(&b) && a == 1 && c1 && c2 {
                        remove.push((y, x));
                    }
                }
            }
            changed |= !remove.is_empty();
            for (y, x) in remove {
                img[[y, x]] = false;
            }
        }
        if !changed {
            return img;
        }
    }
}

/// City-block distance to the nearest background pixel (outside counts as background).
fn distance_to_background(fg: &Array2<bool>) -> Array2<usize> {
    let (h, w) = fg.dim();
    let mut dist = Array2::from_elem((h, w), usize::MAX);
    let mut queue = VecDeque::new();
    for ((y, x), &v) in fg.indexed_iter() {
        let border = N4.iter().any(|&d| at(fg, y, x, d).is_none_or(|(a, b)| !fg[[a, b]]));
        if v && border {
            dist[[y, x]] = 1;
            queue.push_back((y, x));
        } else if !v {
            dist[[y, x]] = 0;
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        for &d in &N4 {
            if let Some((a, b)) = at(fg, y, x, d) {
                if fg[[a, b]] && dist[[a, b]] == usize::MAX {
                    dist[[a, b]] = dist[[y, x]] + 1;
                    queue.push_back((a, b));
                }
            }
        }
    }
    dist
}

/// A connected stroke along the medial axis of the foreground.
fn scribble(fg: &Mask, rng: &mut RngStream) -> Mask {
    let fgb = fg.data().mapv(|v| v > 0.0);
    let n = fg.foreground_count();
    let (lo, hi) = scribble_bounds(n);
    let target = rng.random_range(lo..=hi);
    let skel = skeletonize(&fgb);
    let dist = distance_to_background(&fgb);

    let skel_pts: Vec<(usize, usize)> = skel.indexed_iter().filter(|(_, &v)| v).map(|(p, _)| p).collect();
    let start = if skel_pts.is_empty() {
        // deepest pixel, first in row-major order
        let mut best: Option<(usize, usize)> = None;
        for ((y, x), &v) in fgb.indexed_iter() {
            if v && best.is_none_or(|b| dist[[y, x]] > dist[b]) {
                best = Some((y, x));
            }
        }
        best.expect("non-empty foreground")
    } else {
        skel_pts[rng.random_range(0..skel_pts.len())]
    };

    let mut out = Array2::from_elem(fgb.dim(), false);
    let mut count = 0;
    let mut last = start;
    // depth-first walk along the skeleton; every prefix of the visit order is connected
    let mut stack = vec![start];
    while let Some((y, x)) = stack.pop() {
        if count == target {
            break;
        }
        if out[[y, x]] {
            continue;
        }
        out[[y, x]] = true;
        count += 1;
        last = (y, x);
        for &d in N8.iter().rev() {
            if let Some((a, b)) = at(&skel, y, x, d) {
                if skel[[a, b]] && !out[[a, b]] {
                    stack.push((a, b));
                }
            }
        }
    }
    // a short skeleton is extended as a smooth stroke from either end
    let mut tip = last;
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let mut dir = (angle.sin(), angle.cos());
    let mut reversed = false;
    while count < target {
        let crowded = |a: usize, b: usize| N8.iter().filter(|&&d| at(&out, a, b, d).is_some_and(|q| out[q])).count() > 2;
        let mut best: Option<((usize, usize), f64)> = None;
        for &d in &N8 {
            if let Some((a, b)) = at(&fgb, tip.0, tip.1, d) {
                if !fgb[[a, b]] || out[[a, b]] || crowded(a, b) {
                    continue;
                }
                let norm = ((d.0 * d.0 + d.1 * d.1) as f64).sqrt();
                let score = (d.0 as f64 * dir.0 + d.1 as f64 * dir.1) / norm + 0.25 * dist[[a, b]].min(4) as f64;
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some(((a, b), score));
                }
            }
        }
        match best {
            Some((c, _)) => {
                let step = (c.0 as f64 - tip.0 as f64, c.1 as f64 - tip.1 as f64);
                let (ny, nx) = (0.7 * dir.0 + 0.3 * step.0, 0.7 * dir.1 + 0.3 * step.1);
                let n = (ny * ny + nx * nx).sqrt().max(1e-9);
                dir = (ny / n, nx / n);
                out[c] = true;
                count += 1;
                tip = c;
            }
            None if !reversed => {
                reversed = true;
                tip = start;
                dir = (-dir.0, -dir.1);
            }
            None => break,
        }
    }
    // a stroke that is still short is thickened towards the interior
    while count < target {
        let mut best: Option<((usize, usize), usize)> = None;
        for ((y, x), &v) in out.indexed_iter() {
            if !v {
                continue;
            }
            for &d in &N4 {
                if let Some((a, b)) = at(&fgb, y, x, d) {
                    if fgb[[a, b]] && !out[[a, b]] && best.is_none_or(|(p, s)| dist[[a, b]] > s || (dist[[a, b]] == s && (a, b) < p)) {
                        best = Some(((a, b), dist[[a, b]]));
                    }
                }
            }
        }
        let Some((p, _)) = best else { break };
        out[p] = true;
        count += 1;
    }
    let (h, w) = fgb.dim();
    Mask::from_fn(h, w, |y, x| out[[y, x]])
}

/// Keeps a uniformly random `⌈keep_ratio · n⌉` of the `n` positive entries,
/// preserving their values; everything else becomes zero.
pub fn erode_support_foreground(mask: &Mask, keep_ratio: f32, rng: &mut RngStream) -> Result<Mask> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("keep ratio {keep_ratio} outside (0, 1]")));
    }
    let positions: Vec<(usize, usize)> = mask.data().indexed_iter().filter(|(_, &v)| v > 0.0).map(|(p, _)| p).collect();
    if positions.is_empty() {
        return Err(Error::EmptyMask("cannot erode an empty foreground".into()));
    }
    if keep_ratio == 1.0 {
        return Ok(mask.clone());
    }
    let keep = ((keep_ratio as f64 * positions.len() as f64).ceil() as usize).min(positions.len());
    let mut out = Array2::zeros(mask.extent());
    for i in sample(rng, positions.len(), keep).into_iter() {
        let p = positions[i];
        out[p] = mask.data()[p];
    }
    match mask.kind() {
        crate::types::MaskKind::Binary => Mask::binary(out),
        crate::types::MaskKind::Soft => Mask::soft(out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn square(n: usize, lo: usize, hi: usize) -> Mask {
        Mask::from_fn(n, n, |y, x| (lo..hi).contains(&y) && (lo..hi).contains(&x))
    }

    #[test]
    fn bbox_examples() {
        let point = Mask::from_fn(5, 5, |y, x| (y, x) == (2, 3));
        assert_eq!(derive_weak_label(&point, WeakLabelKind::Bbox, &mut RngStream::new(0)).unwrap(), point);
        let sq = square(10, 3, 7);
        assert_eq!(derive_weak_label(&sq, WeakLabelKind::Bbox, &mut RngStream::new(0)).unwrap(), sq);
        let l = Mask::from_fn(6, 6, |y, x| (y == 1 && x < 4) || (x == 1 && y < 5));
        let b = derive_weak_label(&l, WeakLabelKind::Bbox, &mut RngStream::new(0)).unwrap();
        assert_eq!(b.foreground_count(), 5 * 4);
        assert!(b.contains(&l));
    }

    #[test]
    fn scribble_on_small_square() {
        let sq = square(10, 3, 7);
        let s = derive_weak_label(&sq, WeakLabelKind::Scribble, &mut RngStream::new(1)).unwrap();
        assert!(sq.contains(&s));
        let (lo, hi) = scribble_bounds(16);
        assert!((lo..=hi).contains(&s.foreground_count()));
    }

    #[test]
    fn scribble_is_thin_and_connected_on_large_shapes() {
        let disc = Mask::from_fn(64, 64, |y, x| {
            let (dy, dx) = (y as f64 - 31.5, x as f64 - 30.5);
            dy * dy + dx * dx < 400.0
        });
        for seed in 0..10 {
            let s = derive_weak_label(&disc, WeakLabelKind::Scribble, &mut RngStream::new(seed)).unwrap();
            let n = s.foreground_count();
            let (lo, hi) = scribble_bounds(disc.foreground_count());
            assert!((lo..=hi).contains(&n), "{n} outside {lo}..={hi}");
            assert!(disc.contains(&s));
            assert!(is_connected8(&s));
        }
    }

    fn is_connected8(m: &Mask) -> bool {
        let pts: Vec<(usize, usize)> = m.data().indexed_iter().filter(|(_, &v)| v > 0.0).map(|(p, _)| p).collect();
        let mut seen = vec![pts[0]];
        let mut i = 0;
        while i < seen.len() {
            let (y, x) = seen[i];
            for &p in &pts {
                if !seen.contains(&p) && p.0.abs_diff(y) <= 1 && p.1.abs_diff(x) <= 1 {
                    seen.push(p);
                }
            }
            i += 1;
        }
        seen.len() == pts.len()
    }

    #[test]
    fn skeleton_of_a_bar_is_one_pixel_wide() {
        let bar = Array2::from_shape_fn((7, 20), |(y, x)| (2..5).contains(&y) && (2..18).contains(&x));
        let s = skeletonize(&bar);
        for x in 0..20 {
            assert!(s.column(x).iter().filter(|&&v| v).count() <= 1);
        }
        assert!(s.iter().filter(|&&v| v).count() >= 10);
    }

    #[test]
    fn erosion_examples() {
        let sq = square(12, 1, 11);
        assert_eq!(erode_support_foreground(&sq, 1.0, &mut RngStream::new(0)).unwrap(), sq);
        let half = erode_support_foreground(&sq, 0.5, &mut RngStream::new(4)).unwrap();
        assert_eq!(half.foreground_count(), 50);
        assert!(sq.contains(&half));
        assert_eq!(half, erode_support_foreground(&sq, 0.5, &mut RngStream::new(4)).unwrap());
        assert!(erode_support_foreground(&Mask::zeros(3, 3), 0.5, &mut RngStream::new(0)).is_err());
        assert!(erode_support_foreground(&sq, 0.0, &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn empty_input_is_rejected() {
        for kind in WeakLabelKind::ALL {
            assert!(derive_weak_label(&Mask::zeros(4, 4), kind, &mut RngStream::new(0)).is_err());
        }
        assert_eq!(WeakLabelKind::parse("bbox").unwrap(), WeakLabelKind::Bbox);
        assert!(WeakLabelKind::parse("polygon").is_err());
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        (3usize..24, 3usize..24, any::<u64>()).prop_map(|(h, w, seed)| {
            let mut rng = RngStream::new(seed);
            let (cy, cx) = (rng.random_range(0..h), rng.random_range(0..w));
            let (ry, rx) = (rng.random_range(1..=h), rng.random_range(1..=w));
            Mask::from_fn(h, w, |y, x| y.abs_diff(cy) * 2 < ry && x.abs_diff(cx) * 2 < rx || (y + x) % 7 == 0)
        })
    }

    proptest! {
        #[test]
        fn label_containment(m in arb_mask(), seed in any::<u64>()) {
            let b = derive_weak_label(&m, WeakLabelKind::Bbox, &mut RngStream::new(seed)).unwrap();
            prop_assert!(b.contains(&m));
            let s = derive_weak_label(&m, WeakLabelKind::Scribble, &mut RngStream::new(seed)).unwrap();
            prop_assert!(m.contains(&s));
            prop_assert!(!s.is_empty());
            let id = derive_weak_label(&m, WeakLabelKind::Mask, &mut RngStream::new(seed)).unwrap();
            prop_assert_eq!(id, m);
        }

        #[test]
        fn erosion_is_an_exact_size_subset(m in arb_mask(), r in 0.05f32..1.0, seed in any::<u64>()) {
            let e = erode_support_foreground(&m, r, &mut RngStream::new(seed)).unwrap();
            let n = m.foreground_count();
            prop_assert_eq!(e.foreground_count(), ((r as f64 * n as f64).ceil() as usize).min(n));
            prop_assert!(m.contains(&e));
        }
    }
}
