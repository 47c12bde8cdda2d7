//! Procedural scenes of coloured, textured shapes on cluttered backgrounds.
//!
//! Class `c` has a fixed shape kind (`c % 6`) and base hue (`360° · c / n`).
//! Each instance jitters colour, size, rotation and position, adds texture
//! noise, and draws distractor shapes of other classes underneath the target.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::types::{mix64, Image, Mask, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Annulus,
    Cross,
    Star,
}

pub const SHAPE_KINDS: [ShapeKind; 6] =
    [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Annulus, ShapeKind::Cross, ShapeKind::Star];

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Annulus => "annulus",
            ShapeKind::Cross => "cross",
            ShapeKind::Star => "star",
        }
    }

    /// Whether `(u, v)`, in the shape's own unit frame, lies inside.
    fn contains(self, u: f64, v: f64) -> bool {
        let r = (u * u + v * v).sqrt();
        match self {
            ShapeKind::Disc => r <= 1.0,
            ShapeKind::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            ShapeKind::Triangle => {
                // equilateral, circumradius 1, apex up
                (0..3).all(|i| {
                    let a = PI / 2.0 + 2.0 * PI * i as f64 / 3.0 + PI;
                    u * a.cos() + v * a.sin() <= 0.5
                })
            }
            ShapeKind::Annulus => (0.5..=1.0).contains(&r),
            ShapeKind::Cross => (u.abs() <= 1.0 && v.abs() <= 0.35) || (v.abs() <= 1.0 && u.abs() <= 0.35),
            ShapeKind::Star => {
                let phi = v.atan2(u);
                let sector = 2.0 * PI / 5.0;
                let t = ((phi.rem_euclid(sector)) / sector - 0.5).abs() * 2.0;
                // radius interpolates from 1 at the tips to 0.45 between them
                r <= 0.45 + 0.55 * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Standard deviation of per-pixel texture noise.
    pub texture_noise: f32,
    /// Maximum hue offset in degrees.
    pub hue_jitter: f32,
    /// Maximum saturation and value offset.
    pub tone_jitter: f32,
    /// Target radius range as fractions of the image size.
    pub target_radius: (f32, f32),
    pub distractor_radius: (f32, f32),
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 8,
            min_shapes: 1,
            max_shapes: 3,
            texture_noise: 0.04,
            hue_jitter: 12.0,
            tone_jitter: 0.15,
            target_radius: (0.2, 0.32),
            distractor_radius: (0.1, 0.18),
            seed: 0,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::InvalidArgument("image_size must be at least 32".into()));
        }
        if self.num_classes < 4 {
            return Err(Error::InvalidArgument("at least 4 shape classes are needed to form folds".into()));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::InvalidArgument("shape count range must be non-empty and start at 1 or more".into()));
        }
        let ok = |(lo, hi): (f32, f32)| lo > 0.0 && lo <= hi && hi < 0.5;
        if !ok(self.target_radius) || !ok(self.distractor_radius) {
            return Err(Error::InvalidArgument("radius ranges must satisfy 0 < lo <= hi < 0.5".into()));
        }
        if self.texture_noise < 0.0 || self.hue_jitter < 0.0 || self.tone_jitter < 0.0 {
            return Err(Error::InvalidArgument("noise and jitter must be non-negative".into()));
        }
        Ok(())
    }

    pub fn shape_of(&self, class_id: usize) -> ShapeKind {
        SHAPE_KINDS[class_id % SHAPE_KINDS.len()]
    }

    pub fn hue_of(&self, class_id: usize) -> f32 {
        360.0 * class_id as f32 / self.num_classes as f32
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

struct Placed {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
    color: [f32; 3],
}

impl Placed {
    fn covers(&self, y: usize, x: usize) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let u = (c * dx + s * dy) / self.radius;
        let v = (-s * dx + c * dy) / self.radius;
        self.kind.contains(u, v)
    }
}

/// Deterministic scene generator.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SyntheticSceneConfig,
}

impl SyntheticDataset {
    pub fn new(config: SyntheticSceneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn instance_color(&self, class_id: usize, rng: &mut RngStream) -> [f32; 3] {
        let c = &self.config;
        let hue = c.hue_of(class_id) + rng.random_range(-1.0..=1.0) * c.hue_jitter;
        let sat = (0.75 + rng.random_range(-1.0..=1.0) * c.tone_jitter).clamp(0.2, 1.0);
        let val = (0.8 + rng.random_range(-1.0..=1.0) * c.tone_jitter).clamp(0.2, 1.0);
        hsv_to_rgb(hue, sat, val)
    }

    fn place(&self, class_id: usize, radius_frac: (f32, f32), rng: &mut RngStream) -> Placed {
        let size = self.config.image_size as f64;
        let radius = rng.random_range(radius_frac.0 as f64..=radius_frac.1 as f64) * size;
        let margin = radius * 0.8;
        let cx = rng.random_range(margin..=size - margin);
        let cy = rng.random_range(margin..=size - margin);
        let angle = rng.random_range(0.0..2.0 * PI);
        let color = self.instance_color(class_id, rng);
        Placed { kind: self.config.shape_of(class_id), cx, cy, radius, angle, color }
    }

    /// Renders scene `instance_id` containing one object of `class_id`.
    /// Returns the RGB image in `[0, 1]` and the target's binary mask.
    pub fn scene(&self, class_id: usize, instance_id: u64) -> Result<(Image, Mask)> {
        let c = &self.config;
        if class_id >= c.num_classes {
            return Err(Error::InvalidArgument(format!("class {class_id} outside 0..{}", c.num_classes)));
        }
        let mut rng = RngStream::new(mix64(c.seed ^ mix64((class_id as u64) << 40 ^ instance_id)));
        let n = c.image_size;

        // low-saturation background with a linear gradient
        let bg_hue = rng.random_range(0.0..360.0f32);
        let base = hsv_to_rgb(bg_hue, rng.random_range(0.0..0.25), rng.random_range(0.25..0.6));
        let (gx, gy) = (rng.random_range(-0.15..0.15f32), rng.random_range(-0.15..0.15f32));
        let mut img = Array3::from_shape_fn((n, n, 3), |(y, x, k)| {
            base[k] + gx * (x as f32 / n as f32 - 0.5) + gy * (y as f32 / n as f32 - 0.5)
        });

        let shapes = rng.random_range(c.min_shapes..=c.max_shapes);
        let mut placed = Vec::with_capacity(shapes);
        for _ in 1..shapes {
            let other = (class_id + rng.random_range(1..c.num_classes)) % c.num_classes;
            placed.push(self.place(other, c.distractor_radius, &mut rng));
        }
        placed.push(self.place(class_id, c.target_radius, &mut rng));

        let mut mask = Array2::zeros((n, n));
        for (i, s) in placed.iter().enumerate() {
            let target = i + 1 == placed.len();
            for y in 0..n {
                for x in 0..n {
                    if s.covers(y, x) {
                        for k in 0..3 {
                            img[[y, x, k]] = s.color[k];
                        }
                        if target {
                            mask[[y, x]] = 1.0;
                        }
                    }
                }
            }
        }

        if c.texture_noise > 0.0 {
            let noise = Normal::new(0.0f32, c.texture_noise).expect("finite std");
            img.mapv_inplace(|v| v + noise.sample(&mut rng));
        }
        img.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok((img, Mask::binary(mask)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_non_empty() {
        let ds = SyntheticDataset::new(SyntheticSceneConfig::default()).unwrap();
        for class in 0..8 {
            for inst in 0..5 {
                let (img, m) = ds.scene(class, inst).unwrap();
                assert_eq!(img.dim(), (64, 64, 3));
                assert!(m.foreground_count() > 50, "class {class} instance {inst}");
                assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!((img, m), ds.scene(class, inst).unwrap());
            }
        }
        assert_ne!(ds.scene(0, 0).unwrap().1, ds.scene(0, 1).unwrap().1);
    }

    #[test]
    fn shape_kinds_have_distinct_footprints() {
        let areas: Vec<usize> = SHAPE_KINDS
            .iter()
            .map(|k| {
                let mut n = 0;
                for i in 0..200 {
                    for j in 0..200 {
                        n += k.contains(i as f64 / 100.0 - 1.0, j as f64 / 100.0 - 1.0) as usize;
                    }
                }
                n
            })
            .collect();
        for i in 0..areas.len() {
            for j in i + 1..areas.len() {
                assert_ne!(areas[i], areas[j]);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = SyntheticSceneConfig { image_size: 16, ..Default::default() };
        assert!(c.validate().is_err());
        c.image_size = 64;
        c.num_classes = 3;
        assert!(c.validate().is_err());
        assert!(SyntheticDataset::new(SyntheticSceneConfig::default()).unwrap().scene(8, 0).is_err());
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv_to_rgb(240.0, 0.0, 0.5), [0.5, 0.5, 0.5]);
    }
}
