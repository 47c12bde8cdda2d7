use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::types::Mask;

/// Intersection and union pixel counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub intersection: u64,
    pub union: u64,
}

impl Counts {
    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }

    fn add(&mut self, o: Counts) {
        self.intersection += o.intersection;
        self.union += o.union;
    }
}

fn counts(pred: &Mask, gt: &Mask, fg: bool) -> Result<Counts> {
    if pred.extent() != gt.extent() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.extent(), gt.extent())));
    }
    let mut c = Counts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = ((p > 0.5) == fg, (g > 0.5) == fg);
        c.intersection += (p && g) as u64;
        c.union += (p || g) as u64;
    }
    Ok(c)
}

/// Per-class foreground IoU plus foreground/background totals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IoUAccumulator {
    per_class: BTreeMap<usize, Counts>,
    foreground: Counts,
    background: Counts,
}

impl IoUAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, pred: &Mask, gt: &Mask, class_id: usize) -> Result<()> {
        let fg = counts(pred, gt, true)?;
        self.per_class.entry(class_id).or_default().add(fg);
        self.foreground.add(fg);
        self.background.add(counts(pred, gt, false)?);
        Ok(())
    }

    /// Associative and commutative merge.
    pub fn merge(&mut self, other: &IoUAccumulator) {
        for (&c, &n) in &other.per_class {
            self.per_class.entry(c).or_default().add(n);
        }
        self.foreground.add(other.foreground);
        self.background.add(other.background);
    }

    pub fn counts(&self, class_id: usize) -> Option<Counts> {
        self.per_class.get(&class_id).copied()
    }

    pub fn class_iou(&self, class_id: usize) -> Option<f64> {
        self.per_class.get(&class_id).and_then(Counts::iou)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_class.keys().copied()
    }

    /// Mean class IoU in `[0, 1]` over classes with a non-empty union.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.per_class.values().filter_map(Counts::iou).collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    /// Mean of the foreground and background IoU over every accumulated pixel.
    pub fn fb_iou(&self) -> f64 {
        let parts: Vec<f64> = [self.foreground, self.background].iter().filter_map(Counts::iou).collect();
        if parts.is_empty() {
            0.0
        } else {
            parts.iter().sum::<f64>() / parts.len() as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let gt = Mask::from_fn(4, 4, |y, x| y < 2 && x < 2);
        let mut acc = IoUAccumulator::new();
        acc.accumulate(&gt, &gt, 0).unwrap();
        assert_eq!(acc.class_iou(0), Some(1.0));

        let other = Mask::from_fn(4, 4, |y, x| y >= 2 && x >= 2);
        let mut acc = IoUAccumulator::new();
        acc.accumulate(&other, &gt, 0).unwrap();
        assert_eq!(acc.class_iou(0), Some(0.0));

        let half = Mask::from_fn(4, 4, |y, x| y == 0 && x < 2);
        let mut acc = IoUAccumulator::new();
        acc.accumulate(&half, &gt, 3).unwrap();
        assert_eq!(acc.counts(3), Some(Counts { intersection: 2, union: 4 }));
        assert_eq!(acc.class_iou(3), Some(0.5));
        // background: 12 true negatives of 14 background pixels in the union
        assert_eq!(acc.fb_iou(), (0.5 + 12.0 / 14.0) / 2.0);

        assert!(acc.accumulate(&Mask::zeros(2, 2), &gt, 0).is_err());
    }

    fn mask_strategy() -> impl Strategy<Value = Mask> {
        proptest::collection::vec(any::<bool>(), 16).prop_map(|v| Mask::from_fn(4, 4, |y, x| v[y * 4 + x]))
    }

    proptest! {
        #[test]
        fn merge_equals_concatenation(
            items in proptest::collection::vec((mask_strategy(), mask_strategy(), 0usize..3), 1..12),
            cut in 0usize..12,
        ) {
            let cut = cut.min(items.len());
            let mut all = IoUAccumulator::new();
            let (mut a, mut b) = (IoUAccumulator::new(), IoUAccumulator::new());
            for (i, (p, g, c)) in items.iter().enumerate() {
                all.accumulate(p, g, *c).unwrap();
                if i < cut { a.accumulate(p, g, *c).unwrap() } else { b.accumulate(p, g, *c).unwrap() }
            }
            a.merge(&b);
            prop_assert_eq!(&a, &all);
            for c in all.classes() {
                let n = all.counts(c).unwrap();
                prop_assert!(n.intersection <= n.union);
            }
            let mut rev = IoUAccumulator::new();
            for (p, g, c) in items.iter().rev() {
                rev.accumulate(p, g, *c).unwrap();
            }
            prop_assert_eq!(rev.miou(), all.miou());
        }
    }
}
