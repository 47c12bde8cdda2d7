use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::IndexedRandom;
use rand::Rng;

use super::splits::SplitSpec;
use super::synthetic::SyntheticDataset;
use crate::error::{Error, Result};
use crate::types::{Episode, Image, Mask, RngStream, Support};

/// Bounded retries when drawing episodes with non-empty masks.
pub const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    /// Training classes, training instances.
    Train,
    /// Training classes, held-out instances.
    Val,
    /// Test classes.
    Test,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Val => "val",
            Phase::Test => "test",
        }
    }
}

/// Anything that can produce `(image, mask)` pairs for a class.
pub trait SceneSource: Sync {
    /// Number of distinct instances of `class_id` available in `phase`.
    fn instance_count(&self, class_id: usize, phase: Phase) -> usize;
    /// The `index`-th instance of `class_id` in `phase`: its stable id, image and mask.
    fn instance(&self, class_id: usize, phase: Phase, index: usize) -> Result<(u64, Image, Mask)>;
}

/// Instance ids of the synthetic pools never overlap.
const VAL_OFFSET: u64 = 1 << 40;
const POOL_SIZE: usize = 1 << 30;

impl SceneSource for SyntheticDataset {
    fn instance_count(&self, _class_id: usize, _phase: Phase) -> usize {
        POOL_SIZE
    }

    fn instance(&self, class_id: usize, phase: Phase, index: usize) -> Result<(u64, Image, Mask)> {
        let id = match phase {
            Phase::Val => VAL_OFFSET + index as u64,
            Phase::Train | Phase::Test => index as u64,
        };
        let (img, m) = self.scene(class_id, id)?;
        Ok((id, img, m))
    }
}

/// Draws one episode of `k_shot` supports plus a query of a single class.
pub fn sample_episode(
    split: &SplitSpec,
    source: &dyn SceneSource,
    k_shot: usize,
    phase: Phase,
    rng: &mut RngStream,
) -> Result<Episode> {
    if k_shot == 0 {
        return Err(Error::InvalidArgument("k_shot must be at least 1".into()));
    }
    let classes: Vec<usize> = match phase {
        Phase::Train | Phase::Val => split.train_classes.iter().copied().collect(),
        Phase::Test => split.test_classes.iter().copied().collect(),
    };
    if classes.is_empty() {
        return Err(Error::InvalidArgument(format!("no classes for phase {}", phase.name())));
    }
    let seed = rng.seed();
    let class_id = *classes.choose(rng).expect("non-empty");
    let available = source.instance_count(class_id, phase);
    if available < k_shot + 1 {
        return Err(Error::Sampler {
            attempts: 0,
            reason: format!("class {class_id} has {available} instances, {} needed", k_shot + 1),
        });
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(k_shot + 1);
    let mut scenes = Vec::with_capacity(k_shot + 1);
    let mut attempts = 0;
    while scenes.len() < k_shot + 1 {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Sampler { attempts: MAX_ATTEMPTS, reason: format!("class {class_id}: too many empty masks") });
        }
        let idx = rng.random_range(0..available);
        if chosen.contains(&idx) {
            continue;
        }
        chosen.push(idx);
        let (id, img, mask) = source.instance(class_id, phase, idx)?;
        if mask.is_empty() {
            continue;
        }
        scenes.push((id, img, mask));
    }
    let (query_id, query_image, query_mask) = scenes.pop().expect("k_shot + 1 scenes");
    let supports = scenes.into_iter().map(|(instance_id, image, label)| Support { image, label, instance_id }).collect();
    let ep = Episode { supports, query_image, query_mask, query_id, class_id, seed };
    ep.validate()?;
    Ok(ep)
}

/// Episode `index` of a run seeded with `seed`; each episode has its own
/// stream so any subset can be regenerated independently.
pub fn episode_stream(seed: u64, phase: Phase, index: usize) -> RngStream {
    RngStream::new(seed).fork(phase as u64 + 1).fork(index as u64)
}

pub fn sample_episodes(
    split: &SplitSpec,
    source: &dyn SceneSource,
    k_shot: usize,
    phase: Phase,
    seed: u64,
    count: usize,
) -> Result<Vec<Episode>> {
    (0..count).map(|i| sample_episode(split, source, k_shot, phase, &mut episode_stream(seed, phase, i))).collect()
}

/// Real images listed in a text file, one `class_id image_path mask_path`
/// per line. Every tenth instance of a class is held out for validation.
pub struct FileListSource {
    size: usize,
    by_class: BTreeMap<usize, Vec<(PathBuf, PathBuf)>>,
}

impl FileListSource {
    pub fn open(list: &Path, image_size: usize) -> Result<Self> {
        let text = std::fs::read_to_string(list).map_err(|e| Error::io(list, e))?;
        let root = list.parent().unwrap_or(Path::new("."));
        let mut by_class: BTreeMap<usize, Vec<(PathBuf, PathBuf)>> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [class, img, mask] = parts[..] else {
                return Err(Error::InvalidArgument(format!("{}:{}: expected `class_id image mask`", list.display(), n + 1)));
            };
            let class: usize = class
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("{}:{}: bad class id `{class}`", list.display(), n + 1)))?;
            by_class.entry(class).or_default().push((root.join(img), root.join(mask)));
        }
        Ok(Self { size: image_size, by_class })
    }

    fn pool(&self, class_id: usize, phase: Phase) -> Vec<usize> {
        let n = self.by_class.get(&class_id).map_or(0, Vec::len);
        (0..n)
            .filter(|i| match phase {
                Phase::Train => i % 10 != 9,
                Phase::Val => i % 10 == 9,
                Phase::Test => true,
            })
            .collect()
    }

    fn load(&self, img: &Path, mask: &Path) -> Result<(Image, Mask)> {
        let load = |p: &Path| image::open(p).map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())));
        let s = self.size as u32;
        let rgb = load(img)?.resize_exact(s, s, image::imageops::FilterType::Triangle).to_rgb8();
        let lum = load(mask)?.resize_exact(s, s, image::imageops::FilterType::Nearest).to_luma8();
        let n = self.size;
        let image = Array3::from_shape_fn((n, n, 3), |(y, x, k)| rgb.get_pixel(x as u32, y as u32)[k] as f32 / 255.0);
        let m = Array2::from_shape_fn((n, n), |(y, x)| if lum.get_pixel(x as u32, y as u32)[0] > 127 { 1.0 } else { 0.0 });
        Ok((image, Mask::binary(m)?))
    }
}

impl SceneSource for FileListSource {
    fn instance_count(&self, class_id: usize, phase: Phase) -> usize {
        self.pool(class_id, phase).len()
    }

    fn instance(&self, class_id: usize, phase: Phase, index: usize) -> Result<(u64, Image, Mask)> {
        let pool = self.pool(class_id, phase);
        let &i = pool.get(index).ok_or_else(|| Error::InvalidArgument(format!("instance {index} of class {class_id}")))?;
        let (img, mask) = &self.by_class[&class_id][i];
        let (image, m) = self.load(img, mask)?;
        Ok((i as u64, image, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::splits::build_split;
    use crate::episodes::synthetic::SyntheticSceneConfig;

    fn data() -> SyntheticDataset {
        SyntheticDataset::new(SyntheticSceneConfig::default()).unwrap()
    }

    #[test]
    fn one_shot_contract() {
        let split = build_split("synthetic", 0).unwrap();
        let ep = sample_episode(&split, &data(), 1, Phase::Test, &mut RngStream::new(3)).unwrap();
        assert_eq!(ep.k_shot(), 1);
        assert!(split.test_classes.contains(&ep.class_id));
        assert_ne!(ep.supports[0].instance_id, ep.query_id);
        assert!(!ep.query_mask.is_empty());
    }

    #[test]
    fn five_shot_contract() {
        let split = build_split("synthetic", 1).unwrap();
        let ep = sample_episode(&split, &data(), 5, Phase::Train, &mut RngStream::new(9)).unwrap();
        assert_eq!(ep.k_shot(), 5);
        assert!(split.train_classes.contains(&ep.class_id));
        let mut ids: Vec<u64> = ep.supports.iter().map(|s| s.instance_id).collect();
        ids.push(ep.query_id);
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 6);
        assert!(ep.supports.iter().all(|s| !s.label.is_empty()));
    }

    #[test]
    fn class_sequence_is_reproducible() {
        let split = build_split("synthetic", 0).unwrap();
        let ds = data();
        let classes = |seed| -> Vec<usize> {
            (0..1000).map(|i| {
                let mut rng = episode_stream(seed, Phase::Test, i);
                let classes: Vec<usize> = split.test_classes.iter().copied().collect();
                *classes.choose(&mut rng).unwrap()
            }).collect()
        };
        assert_eq!(classes(5), classes(5));
        let a = sample_episodes(&split, &ds, 1, Phase::Test, 5, 20).unwrap();
        let b = sample_episodes(&split, &ds, 1, Phase::Test, 5, 20).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|e| e.class_id).collect::<Vec<_>>(), classes(5)[..20].to_vec());
    }

    #[test]
    fn validation_instances_are_held_out() {
        let ds = data();
        assert_ne!(ds.instance(2, Phase::Train, 0).unwrap().0, ds.instance(2, Phase::Val, 0).unwrap().0);
    }

    struct Empty;
    impl SceneSource for Empty {
        fn instance_count(&self, _: usize, _: Phase) -> usize {
            1000
        }
        fn instance(&self, _: usize, _: Phase, i: usize) -> Result<(u64, Image, Mask)> {
            Ok((i as u64, Array3::zeros((8, 8, 3)), Mask::zeros(8, 8)))
        }
    }

    #[test]
    fn empty_masks_exhaust_retries() {
        let split = build_split("synthetic", 0).unwrap();
        let err = sample_episode(&split, &Empty, 1, Phase::Test, &mut RngStream::new(0)).unwrap_err();
        assert!(matches!(err, Error::Sampler { attempts: MAX_ATTEMPTS, .. }));
    }

    #[test]
    fn file_list_source_reads_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_fn(16, 16, |x, _| image::Rgb([(x * 16) as u8, 0, 0]));
        let mask = image::GrayImage::from_fn(16, 16, |x, y| image::Luma([if x < 8 && y < 8 { 255 } else { 0 }]));
        img.save(dir.path().join("a.png")).unwrap();
        mask.save(dir.path().join("a_m.png")).unwrap();
        std::fs::write(dir.path().join("list.txt"), "# comment\n3 a.png a_m.png\n3 a.png a_m.png\n").unwrap();
        let src = FileListSource::open(&dir.path().join("list.txt"), 32).unwrap();
        assert_eq!(src.instance_count(3, Phase::Test), 2);
        let (_, image, m) = src.instance(3, Phase::Test, 1).unwrap();
        assert_eq!(image.dim(), (32, 32, 3));
        assert_eq!(m.foreground_count(), 256);
        std::fs::write(dir.path().join("bad.txt"), "3 a.png\n").unwrap();
        assert!(FileListSource::open(&dir.path().join("bad.txt"), 32).is_err());
    }
}
