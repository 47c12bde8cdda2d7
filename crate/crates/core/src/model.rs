//! The full segmentation pipeline: encoder, localizer, object miner `G` and
//! detail miner `D`, with parameters split into one store per network.

use ndarray::{Array2, Axis};
use qfss_autograd::{Binding, ParamStore, Scalar, Tape, Var};

use crate::backbone::{self, EncoderConfig};
use crate::detail_miner::{self, DetailConfig};
use crate::episodes::erode_support_foreground;
use crate::error::{Error, Result};
use crate::localizer::{self, Localization, LocalizerConfig};
use crate::nn;
use crate::object_miner::{self, MinerConfig, MinerOutput};
use crate::types::{Episode, FeatureMap, Mask, RngStream, Support};

/// Threshold applied to the upsampled soft prediction.
pub const PREDICTION_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub miner: MinerConfig,
    pub detail: DetailConfig,
    pub localizer: LocalizerConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.miner.validate()?;
        self.detail.validate()?;
        self.localizer.validate()?;
        let c = self.encoder.out_channels;
        if self.miner.attn.channels != c || self.detail.attn.channels != c {
            return Err(Error::InvalidArgument(format!("attention width must equal the feature width {c}")));
        }
        Ok(())
    }
}

/// Parameters updated in a `G` step. The encoder belongs to `G` unless frozen.
pub fn is_g_param(name: &str, frozen_backbone: bool) -> bool {
    (!frozen_backbone && name.starts_with(backbone::PREFIX)) || object_miner::PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Parameters updated in a `D` step.
pub fn is_d_param(name: &str) -> bool {
    detail_miner::PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Support-side perturbations applied before pooling the prototype.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SeedOptions {
    /// Keep ratio and seed for random erosion of the support foreground.
    pub erosion: Option<(f32, u64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedActivation {
    /// Union of the per-support activations.
    pub activation: Mask,
    pub per_support: Vec<Localization>,
}

/// Attention statistics of one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelDiagnostics {
    pub extent: (usize, usize),
    /// Fraction of seed mass at this level.
    pub seed_fraction: f32,
    /// Mean over source positions of the largest weight.
    pub mean_peak_weight: f32,
    /// Mean entropy (nats) of the per-source weight distributions.
    pub mean_entropy: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodePrediction {
    /// Soft mask at feature resolution.
    pub m_e: Array2<f32>,
    /// Soft mask upsampled to image extent.
    pub probability: Array2<f32>,
    /// `probability` thresholded at [`PREDICTION_THRESHOLD`].
    pub mask: Mask,
    pub seed: SeedActivation,
    pub levels: Vec<LevelDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    /// Encoder and object miner.
    pub g: ParamStore<f32>,
    /// Detail miner.
    pub d: ParamStore<f32>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(seed);
        let mut g = ParamStore::new();
        let mut d = ParamStore::new();
        backbone::init_params(&mut g, &config.encoder, &mut root.fork(1));
        object_miner::init_params(&mut g, &config.miner, &mut root.fork(2));
        detail_miner::init_params(&mut d, &config.detail, &mut root.fork(3));
        Ok(Self { config, g, d })
    }

    pub fn g_trainable(&self) -> impl Fn(&str) -> bool + 'static {
        let frozen = self.config.encoder.frozen;
        move |n: &str| is_g_param(n, frozen)
    }

    /// SHA-256 over every `G` parameter, frozen encoder included.
    pub fn g_digest(&self) -> String {
        self.g.digest(|_| true)
    }

    pub fn d_digest(&self) -> String {
        self.d.digest(|_| true)
    }

    pub fn backbone_digest(&self) -> String {
        self.g.digest(|n| n.starts_with(backbone::PREFIX))
    }

    pub fn features(&self, image: &ndarray::Array3<f32>) -> Result<FeatureMap> {
        backbone::extract_features(&self.g, &self.config.encoder, image)
    }

    /// Localizes every support in `f_q` and unions the activations.
    pub fn seed_activation(&self, supports: &[Support], f_q: &FeatureMap, opts: &SeedOptions) -> Result<SeedActivation> {
        if supports.is_empty() {
            return Err(Error::InvalidArgument("no supports".into()));
        }
        let mut per_support = Vec::with_capacity(supports.len());
        for (i, s) in supports.iter().enumerate() {
            let f_s = self.features(&s.image)?;
            let mut m_s = backbone::support_mask_at(&s.label, f_s.extent())?;
            if let Some((keep, seed)) = opts.erosion {
                m_s = erode_support_foreground(&m_s, keep, &mut RngStream::new(seed).fork(i as u64))?;
            }
            per_support.push(localizer::localize(&f_s, &m_s, f_q, &self.config.localizer)?);
        }
        let acts: Vec<Mask> = per_support.iter().map(|l| l.activation.clone()).collect();
        Ok(SeedActivation { activation: localizer::kshot_combine(&acts)?, per_support })
    }

    pub fn infer(&self, episode: &Episode) -> Result<EpisodePrediction> {
        self.infer_with(episode, &SeedOptions::default())
    }

    /// Localizer and `G` only; `D` is never evaluated.
    pub fn infer_with(&self, episode: &Episode, opts: &SeedOptions) -> Result<EpisodePrediction> {
        episode.validate()?;
        let tape = Tape::<f32>::new();
        let b = Binding::frozen(&tape, &self.g);
        let f_q_var = backbone::encode(&b, &self.config.encoder, &episode.query_image)?;
        let f_q = FeatureMap::new(nn::var_to_array3(f_q_var))?;
        let seed = self.seed_activation(&episode.supports, &f_q, opts)?;
        let out = object_miner::mine(&b, &self.config.miner, f_q_var, &seed.activation)?;
        let levels = level_diagnostics(&out, &seed.activation)?;
        let m_e = nn::var_to_array3(out.m_e).index_axis_move(Axis(2), 0);
        let probability = backbone::upsample_map(&m_e, episode.image_extent());
        let mask = Mask::soft(probability.clone())?.binarize(PREDICTION_THRESHOLD);
        Ok(EpisodePrediction { m_e, probability, mask, seed, levels })
    }
}

fn level_diagnostics<T: Scalar>(out: &MinerOutput<'_, T>, seed: &Mask) -> Result<Vec<LevelDiagnostics>> {
    let p = &out.pyramid;
    p.correlations
        .iter()
        .zip(&p.extents)
        .map(|(corr, &extent)| {
            let w = nn::var_to_array2(*corr);
            let cols = w.ncols() as f32;
            let (mut peak, mut entropy) = (0.0f32, 0.0f32);
            // weights are normalized over targets, so each column is a distribution
            for col in w.axis_iter(Axis(1)) {
                peak += col.fold(0.0f32, |m, &v| m.max(v));
                entropy -= col.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f32>();
            }
            let lm = if extent == seed.extent() { seed.clone() } else { backbone::downsample_mask(seed, extent)? };
            let seed_fraction = lm.data().sum() / (extent.0 * extent.1) as f32;
            Ok(LevelDiagnostics { extent, seed_fraction, mean_peak_weight: peak / cols, mean_entropy: entropy / cols })
        })
        .collect()
}

/// Encoder plus object miner on an arbitrary tape. `g` binds the encoder
/// and miner parameters; `seed` is the activation at feature resolution.
pub fn forward_g<'t, T: Scalar>(
    g: &Binding<'t, '_, T>,
    config: &ModelConfig,
    query_image: &ndarray::Array3<f32>,
    seed: &Mask,
) -> Result<(Var<'t, T>, MinerOutput<'t, T>)> {
    let f_q = backbone::encode(g, &config.encoder, query_image)?;
    let out = object_miner::mine(g, &config.miner, f_q, seed)?;
    Ok((f_q, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionConfig;
    use crate::episodes::{build_split, sample_episode, Phase, SyntheticDataset, SyntheticSceneConfig};
    use crate::localizer::Normalization;

    fn small_config() -> ModelConfig {
        let attn = AttentionConfig { channels: 16, heads: 2, ffn_hidden: 32 };
        ModelConfig {
            encoder: EncoderConfig { stage_channels: vec![8, 8, 16, 16], strides: vec![2, 2, 2, 1], out_channels: 16, groups: 4, frozen: false },
            miner: MinerConfig { levels: 2, layers_per_scale: 1, attn },
            detail: DetailConfig { proxies: 4, layers: 1, attn },
            localizer: LocalizerConfig { tau: 0.7, normalization: Normalization::MaxNormalize, fallback_topk: 4 },
        }
    }

    fn episode(k: usize, seed: u64) -> Episode {
        let split = build_split("synthetic", 0).unwrap();
        let ds = SyntheticDataset::new(SyntheticSceneConfig::default()).unwrap();
        sample_episode(&split, &ds, k, Phase::Test, &mut RngStream::new(seed)).unwrap()
    }

    #[test]
    fn stores_are_partitioned() {
        let m = Model::init(small_config(), 0).unwrap();
        assert!(m.g.names().all(|n| is_g_param(n, false)));
        assert!(m.g.names().all(|n| !is_d_param(n)));
        assert!(m.d.names().all(|n| is_d_param(n) && !is_g_param(n, false)));
        assert!(m.g.names().any(|n| n.starts_with("backbone/")));
        assert!(!is_g_param("backbone/s0/w", true));
    }

    #[test]
    fn inference_is_deterministic_and_shaped() {
        let m = Model::init(small_config(), 1).unwrap();
        let ep = episode(1, 2);
        let a = m.infer(&ep).unwrap();
        assert_eq!(a.m_e.dim(), (8, 8));
        assert_eq!(a.mask.extent(), (64, 64));
        assert_eq!(a.levels.len(), 2);
        assert!(a.m_e.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, m.infer(&ep).unwrap());
    }

    #[test]
    fn repeated_supports_match_one_shot() {
        let m = Model::init(small_config(), 1).unwrap();
        let one = episode(1, 3);
        let mut five = one.clone();
        five.supports = vec![one.supports[0].clone(); 5];
        assert_eq!(m.infer(&one).unwrap().mask, m.infer(&five).unwrap().mask);
        assert_eq!(m.infer(&one).unwrap().m_e, m.infer(&five).unwrap().m_e);
    }

    #[test]
    fn kshot_seed_is_union_of_single_seeds() {
        let m = Model::init(small_config(), 5).unwrap();
        let ep = episode(5, 4);
        let f_q = m.features(&ep.query_image).unwrap();
        let all = m.seed_activation(&ep.supports, &f_q, &SeedOptions::default()).unwrap();
        for s in &ep.supports {
            let single = m.seed_activation(std::slice::from_ref(s), &f_q, &SeedOptions::default()).unwrap();
            assert!(all.activation.contains(&single.activation));
        }
        let union = localizer::kshot_combine(&all.per_support.iter().map(|l| l.activation.clone()).collect::<Vec<_>>()).unwrap();
        assert_eq!(union, all.activation);
    }

    #[test]
    fn full_erosion_changes_nothing() {
        let m = Model::init(small_config(), 6).unwrap();
        let ep = episode(1, 7);
        let plain = m.infer(&ep).unwrap();
        let kept = m.infer_with(&ep, &SeedOptions { erosion: Some((1.0, 99)) }).unwrap();
        assert_eq!(plain, kept);
    }
}
