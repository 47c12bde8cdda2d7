//! Metrics, episode evaluation and the study protocols.

mod metrics;
mod similarity;

use rayon::prelude::*;

pub use metrics::{Counts, IoUAccumulator};
pub use similarity::{measure_similarity, object_similarity, ClassSimilarity, ObjectSimilarity, SimilarityReport};

use crate::episodes::{derive_weak_label, WeakLabelKind};
use crate::error::{Error, Result};
use crate::model::{EpisodePrediction, Model, SeedOptions};
use crate::records::Record;
use crate::types::{mix64, Episode, RngStream};

const EROSION_STREAM: u64 = 0x6572_6f64_6521;
const WEAK_STREAM: u64 = 0x7765_616b_6c61_6221;

/// Support-side condition of an evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub workers: usize,
    /// Keep ratio of support foreground erosion at feature resolution.
    pub erosion: Option<f32>,
    pub label_kind: WeakLabelKind,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { workers: 1, erosion: None, label_kind: WeakLabelKind::Mask }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean test-class IoU, 0 to 100.
    pub miou: f64,
    /// Foreground-background IoU, 0 to 100.
    pub fb_iou: f64,
    /// `(class_id, IoU in [0, 100])`, ascending class id.
    pub per_class: Vec<(usize, f64)>,
    /// Seeds of the evaluated episodes, in order.
    pub seeds: Vec<u64>,
    pub accumulator: IoUAccumulator,
}

impl EvalReport {
    pub fn episodes(&self) -> usize {
        self.seeds.len()
    }

    pub fn to_record(&self) -> Record {
        let mut r = Record::new().with("miou", self.miou).with("fb_iou", self.fb_iou);
        r.push("episodes", self.episodes());
        for (c, iou) in &self.per_class {
            r.push(&format!("class{c}"), iou);
        }
        r
    }
}

/// Applies the weak-label and erosion conditions and runs inference.
pub fn predict(model: &Model, episode: &Episode, opts: &EvalOptions) -> Result<EpisodePrediction> {
    let mut ep = episode.clone();
    if opts.label_kind != WeakLabelKind::Mask {
        let root = RngStream::new(mix64(episode.seed ^ WEAK_STREAM));
        for (i, s) in ep.supports.iter_mut().enumerate() {
            s.label = derive_weak_label(&s.label, opts.label_kind, &mut root.fork(i as u64))?;
        }
    }
    let seed_opts = SeedOptions { erosion: opts.erosion.map(|keep| (keep, mix64(episode.seed ^ EROSION_STREAM))) };
    model.infer_with(&ep, &seed_opts)
}

/// Evaluates `episodes` in order; with more than one worker, predictions are
/// computed in parallel and accumulated in episode order.
pub fn evaluate(model: &Model, episodes: &[Episode], opts: &EvalOptions) -> Result<EvalReport> {
    if opts.workers == 0 {
        return Err(Error::InvalidArgument("workers must be at least 1".into()));
    }
    let masks: Vec<Result<crate::types::Mask>> = if opts.workers == 1 {
        episodes.iter().map(|ep| predict(model, ep, opts).map(|p| p.mask)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        pool.install(|| episodes.par_iter().map(|ep| predict(model, ep, opts).map(|p| p.mask)).collect())
    };
    let mut acc = IoUAccumulator::new();
    for (ep, m) in episodes.iter().zip(masks) {
        acc.accumulate(&m?, &ep.query_mask, ep.class_id)?;
    }
    let per_class = acc.classes().filter_map(|c| acc.class_iou(c).map(|v| (c, 100.0 * v))).collect();
    Ok(EvalReport {
        miou: 100.0 * acc.miou(),
        fb_iou: 100.0 * acc.fb_iou(),
        per_class,
        seeds: episodes.iter().map(|e| e.seed).collect(),
        accumulator: acc,
    })
}

/// Rows of a paired study: every condition sees the same episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyTable {
    pub title: String,
    pub rows: Vec<(String, EvalReport)>,
}

impl StudyTable {
    pub fn row(&self, label: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|(l, _)| l == label).map(|(_, r)| r)
    }

    /// Whether every row was computed on the same episode seeds.
    pub fn is_paired(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].1.seeds == w[1].1.seeds)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n{:<12} {:>8} {:>8}\n", self.title, "condition", "mIoU", "FB-IoU");
        for (label, r) in &self.rows {
            s.push_str(&format!("{label:<12} {:>8.2} {:>8.2}\n", r.miou, r.fb_iou));
        }
        s
    }

    pub fn to_records(&self) -> Vec<Record> {
        self.rows
            .iter()
            .map(|(label, r)| {
                let mut rec = Record::new().with("condition", label);
                for (k, v) in r.to_record().fields() {
                    rec.push(k, v);
                }
                rec
            })
            .collect()
    }
}

/// mIoU per support keep ratio.
pub fn run_erosion_study(model: &Model, episodes: &[Episode], ratios: &[f32], workers: usize) -> Result<StudyTable> {
    let rows = ratios
        .iter()
        .map(|&r| {
            let opts = EvalOptions { workers, erosion: (r < 1.0).then_some(r), ..Default::default() };
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::InvalidArgument(format!("keep ratio {r} outside (0, 1]")));
            }
            Ok((format!("{r}"), evaluate(model, episodes, &opts)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyTable { title: "support erosion".into(), rows })
}

/// mIoU per support label kind.
pub fn run_weak_label_study(model: &Model, episodes: &[Episode], kinds: &[WeakLabelKind], workers: usize) -> Result<StudyTable> {
    let rows = kinds
        .iter()
        .map(|&k| Ok((k.name().to_string(), evaluate(model, episodes, &EvalOptions { workers, label_kind: k, ..Default::default() })?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyTable { title: "support label kind".into(), rows })
}
