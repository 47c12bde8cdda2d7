//! Flat run configuration, read from and written as TOML with one key per
//! setting. Every key is optional; missing keys take the defaults below.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::AttentionConfig;
use crate::backbone::EncoderConfig;
use crate::detail_miner::DetailConfig;
use crate::episodes::{build_split, synthetic_split, FileListSource, SceneSource, SplitSpec, SyntheticDataset, SyntheticSceneConfig};
use crate::error::{Error, Result};
use crate::localizer::{LocalizerConfig, Normalization};
use crate::model::ModelConfig;
use crate::object_miner::MinerConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // data
    /// `synthetic`, `pascal-5i` or `coco-20i`; the latter two need `file_list`.
    pub dataset: String,
    /// Optional list of `class_id image_path mask_path` lines for real images.
    pub file_list: String,
    pub image_size: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub texture_noise: f32,
    pub hue_jitter: f32,
    pub tone_jitter: f32,
    pub target_radius_min: f32,
    pub target_radius_max: f32,
    pub distractor_radius_min: f32,
    pub distractor_radius_max: f32,
    pub data_seed: u64,

    // model
    pub stage_channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub channels: usize,
    pub groups: usize,
    pub frozen_backbone: bool,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub levels: usize,
    pub layers_per_scale: usize,
    pub proxies: usize,
    pub detail_layers: usize,
    pub tau: f32,
    /// `max_normalize`, `minmax_normalize` or `softmax_spatial`.
    pub normalization: String,
    pub fallback_topk: usize,

    // training
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub poly_power: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub batch_size: usize,
    pub lambda_div: f64,
    pub lambda_kl: f64,
    /// D steps per G step.
    pub alternation: usize,
    pub val_episodes: usize,
    pub train_k_shot: usize,
    pub seed: u64,

    // evaluation
    pub fold: usize,
    pub k_shot: usize,
    pub episodes: usize,
    pub workers: usize,
    /// Pairs sampled per object by the similarity study.
    pub pairs_per_object: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SyntheticSceneConfig::default();
        let enc = EncoderConfig::default();
        Self {
            dataset: "synthetic".into(),
            file_list: String::new(),
            image_size: scene.image_size,
            num_classes: scene.num_classes,
            min_shapes: scene.min_shapes,
            max_shapes: scene.max_shapes,
            texture_noise: scene.texture_noise,
            hue_jitter: scene.hue_jitter,
            tone_jitter: scene.tone_jitter,
            target_radius_min: scene.target_radius.0,
            target_radius_max: scene.target_radius.1,
            distractor_radius_min: scene.distractor_radius.0,
            distractor_radius_max: scene.distractor_radius.1,
            data_seed: scene.seed,
            stage_channels: enc.stage_channels,
            strides: enc.strides,
            channels: enc.out_channels,
            groups: enc.groups,
            frozen_backbone: enc.frozen,
            heads: 4,
            ffn_hidden: 128,
            levels: 3,
            layers_per_scale: 1,
            proxies: 10,
            detail_layers: 2,
            tau: 0.7,
            normalization: "max_normalize".into(),
            fallback_topk: 4,
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            poly_power: 0.9,
            epochs: 4,
            episodes_per_epoch: 1000,
            batch_size: 4,
            lambda_div: 0.1,
            lambda_kl: 1.0,
            alternation: 1,
            val_episodes: 100,
            train_k_shot: 1,
            seed: 0,
            fold: 0,
            k_shot: 1,
            episodes: 1000,
            workers: 1,
            pairs_per_object: 2000,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn normalization(&self) -> Result<Normalization> {
        match self.normalization.as_str() {
            "max_normalize" => Ok(Normalization::MaxNormalize),
            "minmax_normalize" => Ok(Normalization::MinMaxNormalize),
            "softmax_spatial" => Ok(Normalization::SoftmaxSpatial),
            other => Err(Error::Config(format!("unknown normalization `{other}`"))),
        }
    }

    pub fn scene(&self) -> SyntheticSceneConfig {
        SyntheticSceneConfig {
            image_size: self.image_size,
            num_classes: self.num_classes,
            min_shapes: self.min_shapes,
            max_shapes: self.max_shapes,
            texture_noise: self.texture_noise,
            hue_jitter: self.hue_jitter,
            tone_jitter: self.tone_jitter,
            target_radius: (self.target_radius_min, self.target_radius_max),
            distractor_radius: (self.distractor_radius_min, self.distractor_radius_max),
            seed: self.data_seed,
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let attn = AttentionConfig { channels: self.channels, heads: self.heads, ffn_hidden: self.ffn_hidden };
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                stage_channels: self.stage_channels.clone(),
                strides: self.strides.clone(),
                out_channels: self.channels,
                groups: self.groups,
                frozen: self.frozen_backbone,
            },
            miner: MinerConfig { levels: self.levels, layers_per_scale: self.layers_per_scale, attn },
            detail: DetailConfig { proxies: self.proxies, layers: self.detail_layers, attn },
            localizer: LocalizerConfig { tau: self.tau, normalization: self.normalization()?, fallback_topk: self.fallback_topk },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            poly_power: self.poly_power,
            epochs: self.epochs,
            episodes_per_epoch: self.episodes_per_epoch,
            batch_size: self.batch_size,
            lambda_div: self.lambda_div,
            lambda_kl: self.lambda_kl,
            alternation: self.alternation,
            val_episodes: self.val_episodes,
            k_shot: self.train_k_shot,
            seed: self.seed,
        }
    }

    /// Class partition for `fold`.
    pub fn split(&self) -> Result<SplitSpec> {
        if self.dataset == "synthetic" {
            synthetic_split(self.num_classes, self.fold)
        } else {
            build_split(&self.dataset, self.fold)
        }
    }

    /// Synthetic scenes, or the images of `file_list`.
    pub fn source(&self) -> Result<Box<dyn SceneSource>> {
        if self.dataset == "synthetic" {
            Ok(Box::new(SyntheticDataset::new(self.scene())?))
        } else {
            Ok(Box::new(FileListSource::open(std::path::Path::new(&self.file_list), self.image_size)?))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset != "synthetic" && self.file_list.is_empty() {
            return Err(Error::Config(format!("dataset `{}` needs a file_list", self.dataset)));
        }
        if self.dataset == "synthetic" {
            self.scene().validate()?;
        }
        self.model()?;
        self.train().validate()?;
        if self.k_shot == 0 || self.workers == 0 || self.fold > 3 {
            return Err(Error::Config("k_shot and workers must be positive and fold in 0..4".into()));
        }
        let model = self.model()?;
        let f = model.encoder.downsample_factor() << (model.miner.levels - 1);
        if self.image_size % f != 0 {
            return Err(Error::Config(format!("image_size {} must be divisible by {f}", self.image_size)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn partial_files_override_defaults() {
        let c = RunConfig::from_toml("seed = 7\nlr = 0.001\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.levels, 3);
        assert_ne!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn unknown_and_invalid_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 7"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("tau = 1.5").is_err());
        assert!(RunConfig::from_toml("normalization = \"none\"").is_err());
        assert!(RunConfig::from_toml("image_size = 48").is_err());
        assert!(RunConfig::from_toml("dataset = \"pascal-5i\"").is_err());
    }
}
