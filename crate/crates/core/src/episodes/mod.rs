//! Dataset splits, episode sampling, synthetic scenes and weak labels.

pub mod manifest;
pub mod sampler;
pub mod splits;
pub mod synthetic;
pub mod weak;

pub use manifest::{read_manifest, write_manifest, EpisodeRecord};
pub use sampler::{episode_stream, sample_episode, sample_episodes, FileListSource, Phase, SceneSource};
pub use splits::{build_split, synthetic_split, SplitSpec};
pub use synthetic::{ShapeKind, SyntheticDataset, SyntheticSceneConfig};
pub use weak::{derive_weak_label, erode_support_foreground, WeakLabelKind};
