//! Small convolutional encoder producing mid-level feature maps.
//!
//! Each stage is `conv3x3(stride) -> GroupNorm -> GELU`. The outputs of the
//! last two stages are concatenated along channels and projected to the
//! feature width with a 1x1 convolution.

use ndarray::{Array2, Array3};
use qfss_autograd::kernels::bilinear_matrix;
use qfss_autograd::{Binding, ParamStore, Scalar, Tape, Var};

use crate::error::{Error, Result};
use crate::nn;
use crate::types::{FeatureMap, Mask, RngStream};

pub const PREFIX: &str = "backbone/";

const GN_EPS: f64 = 1e-5;
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub stage_channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub out_channels: usize,
    pub groups: usize,
    pub frozen: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { stage_channels: vec![16, 32, 64, 64], strides: vec![2, 2, 2, 1], out_channels: 64, groups: 4, frozen: false }
    }
}

impl EncoderConfig {
    pub fn downsample_factor(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n < 2 || self.strides.len() != n {
            return Err(Error::InvalidArgument("encoder needs at least two stages with one stride each".into()));
        }
        if self.strides[n - 1] != 1 {
            return Err(Error::InvalidArgument("the last stage must keep the extent of the one before it".into()));
        }
        if self.out_channels < 8 {
            return Err(Error::InvalidArgument("out_channels must be at least 8".into()));
        }
        if self.downsample_factor() < 4 {
            return Err(Error::InvalidArgument("total downsample factor must be at least 4".into()));
        }
        if self.groups == 0 || self.stage_channels.iter().any(|c| c % self.groups != 0) {
            return Err(Error::InvalidArgument("stage channels must be divisible by the group count".into()));
        }
        Ok(())
    }

    pub fn feature_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = self.downsample_factor();
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("image extent {h}x{w} is not divisible by {f}")));
        }
        Ok((h / f, w / f))
    }
}

pub fn init_params(store: &mut ParamStore<f32>, cfg: &EncoderConfig, rng: &mut RngStream) {
    let mut cin = 3;
    for (i, &cout) in cfg.stage_channels.iter().enumerate() {
        nn::init_conv(store, &format!("backbone/s{i}"), 3, cin, cout, rng);
        nn::constant(store, &format!("backbone/s{i}/gn_g"), &[cout], 1.0);
        nn::constant(store, &format!("backbone/s{i}/gn_b"), &[cout], 0.0);
        cin = cout;
    }
    let n = cfg.stage_channels.len();
    let cat = cfg.stage_channels[n - 2] + cfg.stage_channels[n - 1];
    let std = (1.0 / cat as f64).sqrt();
    nn::normal(store, "backbone/proj/w", &[1, 1, cat, cfg.out_channels], std, rng);
    nn::constant(store, "backbone/proj/b", &[cfg.out_channels], 0.0);
}

/// Encodes an `[H, W, 3]` image in `[0, 1]` into `[H/f, W/f, C]`.
pub fn encode<'t, T: Scalar>(b: &Binding<'t, '_, T>, cfg: &EncoderConfig, image: &Array3<f32>) -> Result<Var<'t, T>> {
    let (h, w, ch) = image.dim();
    if ch != 3 {
        return Err(Error::Shape(format!("expected an RGB image, got {ch} channels")));
    }
    cfg.feature_extent(h, w)?;
    let normalized = image.mapv(|v| ((v as f64 - PIXEL_MEAN) / PIXEL_STD) as f32);
    let mut x = b.tape().constant(nn::cast_in::<T, _>(&normalized));
    let mut outs = Vec::with_capacity(cfg.stage_channels.len());
    for (i, &stride) in cfg.strides.iter().enumerate() {
        let p = format!("backbone/s{i}");
        x = nn::conv(b, &p, x, stride)
            .group_norm(cfg.groups, GN_EPS)
            .mul(b.get(&format!("{p}/gn_g")))
            .add(b.get(&format!("{p}/gn_b")))
            .gelu();
        outs.push(x);
    }
    let n = outs.len();
    let cat = Var::concat(&[outs[n - 2], outs[n - 1]], 2);
    Ok(nn::conv(b, "backbone/proj", cat, 1))
}

/// Inference-only feature extraction.
pub fn extract_features(store: &ParamStore<f32>, cfg: &EncoderConfig, image: &Array3<f32>) -> Result<FeatureMap> {
    let tape = Tape::<f32>::new();
    let b = Binding::frozen(&tape, store);
    let f = encode(&b, cfg, image)?;
    FeatureMap::new(nn::var_to_array3(f))
}

fn resample(mask: &Array2<f32>, th: usize, tw: usize) -> Array2<f32> {
    let (h, w) = mask.dim();
    let ry = bilinear_matrix::<f32>(h, th);
    let rx = bilinear_matrix::<f32>(w, tw);
    ry.dot(mask).dot(&rx.t()).mapv(|v| v.clamp(0.0, 1.0))
}

/// Bilinear (half-pixel centre) resampling of a mask to `target`.
pub fn downsample_mask(mask: &Mask, target: (usize, usize)) -> Result<Mask> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Shape("target extent has a zero axis".into()));
    }
    let (h, w) = mask.extent();
    if th > h || tw > w {
        return Err(Error::Shape(format!("cannot downsample {h}x{w} to {th}x{tw}")));
    }
    Mask::soft(resample(mask.data(), th, tw))
}

/// Block-average downsampling; used when bilinear sampling misses a thin
/// foreground entirely.
pub fn area_downsample_mask(mask: &Mask, target: (usize, usize)) -> Result<Mask> {
    let (h, w) = mask.extent();
    let (th, tw) = target;
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(Error::Shape(format!("cannot area-pool {h}x{w} to {th}x{tw}")));
    }
    let (fy, fx) = (h / th, w / tw);
    let data = mask.data();
    let out = Array2::from_shape_fn((th, tw), |(y, x)| {
        let block = data.slice(ndarray::s![y * fy..(y + 1) * fy, x * fx..(x + 1) * fx]);
        block.sum() / (fy * fx) as f32
    });
    Mask::soft(out)
}

/// Bilinear upsampling of a soft map, used to bring predictions to image extent.
pub fn upsample_map(map: &Array2<f32>, target: (usize, usize)) -> Array2<f32> {
    resample(map, target.0, target.1)
}

/// Pixel count threshold below which a downsampled mask counts as empty.
pub const EMPTY_MASS: f32 = 1e-6;

/// Support mask at feature resolution: bilinear, with an area-average
/// fallback when bilinear sampling leaves no foreground.
pub fn support_mask_at(mask: &Mask, target: (usize, usize)) -> Result<Mask> {
    let m = downsample_mask(mask, target)?;
    if m.data().sum() > EMPTY_MASS {
        return Ok(m);
    }
    area_downsample_mask(mask, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use qfss_autograd::Tape;

    fn small() -> EncoderConfig {
        EncoderConfig { stage_channels: vec![8, 8, 16, 16], strides: vec![2, 2, 2, 1], out_channels: 16, groups: 4, frozen: false }
    }

    #[test]
    fn feature_shape_follows_downsample_factor() {
        let cfg = EncoderConfig::default();
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, &mut RngStream::new(0));
        let img = Array3::from_shape_fn((64, 64, 3), |(y, x, c)| ((y * 3 + x * 5 + c) % 17) as f32 / 16.0);
        let f = extract_features(&store, &cfg, &img).unwrap();
        assert_eq!(f.data().dim(), (8, 8, 64));
        assert_eq!(f, extract_features(&store, &cfg, &img).unwrap());
    }

    #[test]
    fn indivisible_extent_is_rejected() {
        let cfg = small();
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, &mut RngStream::new(0));
        assert!(extract_features(&store, &cfg, &Array3::zeros((36, 32, 3))).is_err());
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let cfg = small();
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, &mut RngStream::new(0));
        let store = store.cast::<f64>();
        let tape = Tape::new();
        let b = Binding::frozen(&tape, &store);
        let img = Array3::from_elem((32, 32, 3), 0.3f32);
        let loss = encode(&b, &cfg, &img).unwrap().mean();
        assert!(tape.backward(loss).params().is_empty());
    }

    #[test]
    fn mask_downsampling_examples() {
        let ones = Mask::ones(16, 16);
        assert_eq!(downsample_mask(&ones, (8, 8)).unwrap().data(), Mask::ones(8, 8).data());
        let zeros = Mask::zeros(16, 16);
        assert_eq!(downsample_mask(&zeros, (8, 8)).unwrap().data(), Mask::zeros(8, 8).data());
        let corner = Mask::binary(array![[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let d = downsample_mask(&corner, (1, 1)).unwrap();
        assert!((d.data()[[0, 0]] - 0.25).abs() < 1e-7);
        assert!(downsample_mask(&corner, (0, 1)).is_err());
    }

    #[test]
    fn thin_masks_fall_back_to_area_pooling() {
        let line = Mask::from_fn(64, 64, |y, _| y == 0);
        assert_eq!(downsample_mask(&line, (8, 8)).unwrap().data().sum(), 0.0);
        let m = support_mask_at(&line, (8, 8)).unwrap();
        assert!((m.data()[[0, 3]] - 1.0 / 8.0).abs() < 1e-6);
        assert_eq!(m.data().row(1).sum(), 0.0);
    }
}
