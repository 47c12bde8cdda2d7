//! Shared value types: feature maps, masks, episodes and seeded randomness.
//!
//! Spatial arrays are row-major `[H, W, C]` (features) and `[H, W]` (masks),
//! so a mask broadcasts over channels without reindexing.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense `[H, W, C]` feature map with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array3<f32>,
}

impl FeatureMap {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("feature map extent {h}x{w}x{c} has an empty axis")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("feature map contains non-finite entries".into()));
        }
        Ok(Self { data: data.as_standard_layout().into_owned() })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { data: Array3::zeros((h, w, c)) }
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn pixel(&self, y: usize, x: usize) -> ArrayView1<'_, f32> {
        self.data.index_axis(Axis(0), y).index_axis_move(Axis(0), x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Binary,
    Soft,
}

/// `[H, W]` mask; binary entries are exactly 0 or 1, soft entries lie in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    data: Array2<f32>,
    kind: MaskKind,
}

impl Mask {
    pub fn binary(data: Array2<f32>) -> Result<Self> {
        if data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("binary mask entries must be 0 or 1".into()));
        }
        Ok(Self { data: data.as_standard_layout().into_owned(), kind: MaskKind::Binary })
    }

    pub fn soft(data: Array2<f32>) -> Result<Self> {
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument("soft mask entries must lie in [0, 1]".into()));
        }
        Ok(Self { data: data.as_standard_layout().into_owned(), kind: MaskKind::Soft })
    }

    /// Binary mask from a predicate over `(y, x)`.
    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = Array2::from_shape_fn((h, w), |(y, x)| if f(y, x) { 1.0 } else { 0.0 });
        Self { data, kind: MaskKind::Binary }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { data: Array2::zeros((h, w)), kind: MaskKind::Binary }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self { data: Array2::ones((h, w)), kind: MaskKind::Binary }
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f32> {
        self.data
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn extent(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// Number of strictly positive entries.
    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground_count() == 0
    }

    /// `1` where the entry exceeds `threshold`, else `0`.
    pub fn binarize(&self, threshold: f32) -> Mask {
        Mask { data: self.data.mapv(|v| if v > threshold { 1.0 } else { 0.0 }), kind: MaskKind::Binary }
    }

    /// Foreground of `self` contains foreground of `other`.
    pub fn contains(&self, other: &Mask) -> bool {
        self.data.iter().zip(other.data.iter()).all(|(&a, &b)| b <= 0.0 || a > 0.0)
    }
}

/// A single `[C]` feature vector (prototype or local feature).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    data: Array1<f32>,
}

impl FeatureVector {
    pub fn new(data: Array1<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("feature vector contains non-finite entries".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array1<f32> {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// `[H, W, 3]` RGB image with values in [0, 1].
pub type Image = Array3<f32>;

#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    pub image: Image,
    pub label: Mask,
    pub instance_id: u64,
}

/// One meta-learning task: K labelled supports plus a query of the same class.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub supports: Vec<Support>,
    pub query_image: Image,
    pub query_mask: Mask,
    pub query_id: u64,
    pub class_id: usize,
    pub seed: u64,
}

impl Episode {
    pub fn k_shot(&self) -> usize {
        self.supports.len()
    }

    pub fn image_extent(&self) -> (usize, usize) {
        let (h, w, _) = self.query_image.dim();
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.supports.is_empty() {
            return Err(Error::InvalidArgument("episode has no supports".into()));
        }
        let extent = self.image_extent();
        for s in &self.supports {
            let (h, w, _) = s.image.dim();
            if (h, w) != extent || s.label.extent() != extent {
                return Err(Error::Shape("support extent differs from query".into()));
            }
            if s.label.is_empty() {
                return Err(Error::EmptyMask(format!("support instance {}", s.instance_id)));
            }
        }
        if self.query_mask.extent() != extent {
            return Err(Error::Shape("query mask extent differs from image".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; used to derive independent stream seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded ChaCha8 stream. Identical seeds give identical draw sequences.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream keyed by `label`; does not advance `self`.
    pub fn fork(&self, label: u64) -> RngStream {
        RngStream::new(mix64(self.seed ^ mix64(label)))
    }

    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Flattens `[H, W, C]` into `[H*W, C]`; row `r` is pixel `(r / W, r % W)`.
pub fn flatten_spatial(f: &FeatureMap) -> Array2<f32> {
    let (h, w, c) = f.data.dim();
    f.data.clone().into_shape_with_order((h * w, c)).expect("standard layout")
}

pub fn unflatten_spatial(rows: Array2<f32>, h: usize, w: usize) -> Result<FeatureMap> {
    let (n, c) = rows.dim();
    if n != h * w {
        return Err(Error::Shape(format!("{n} rows cannot fill a {h}x{w} grid")));
    }
    let data = rows.as_standard_layout().into_owned().into_shape_with_order((h, w, c)).expect("row count checked");
    FeatureMap::new(data)
}

/// Cosine similarity with a flag for direction-free inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f32,
    pub degenerate: bool,
}

pub const COSINE_NORM_FLOOR: f32 = 1e-8;

/// `<u, v> / (|u| |v|)`; returns 0 with `degenerate` set when either norm is
/// below [`COSINE_NORM_FLOOR`].
pub fn cosine_slices(u: ArrayView1<f32>, v: ArrayView1<f32>) -> Cosine {
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v.iter()) {
        dot += a as f64 * b as f64;
        nu += a as f64 * a as f64;
        nv += b as f64 * b as f64;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < COSINE_NORM_FLOOR as f64 || nv < COSINE_NORM_FLOOR as f64 {
        return Cosine { value: 0.0, degenerate: true };
    }
    Cosine { value: (dot / (nu * nv)).clamp(-1.0, 1.0) as f32, degenerate: false }
}

pub fn cosine(u: &FeatureVector, v: &FeatureVector) -> Result<Cosine> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("cosine of {}- and {}-dim vectors", u.len(), v.len())));
    }
    Ok(cosine_slices(u.data.view(), v.data.view()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array3};
    use proptest::prelude::*;
    use rand::Rng;

    fn fv(v: &[f32]) -> FeatureVector {
        FeatureVector::new(arr1(v)).unwrap()
    }

    #[test]
    fn flatten_is_row_major() {
        let f = FeatureMap::new(Array3::from_shape_vec((2, 2, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let rows = flatten_spatial(&f);
        assert_eq!(rows.column(0).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn flatten_single_pixel() {
        let f = FeatureMap::new(Array3::from_shape_vec((1, 1, 3), vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let rows = flatten_spatial(&f);
        assert_eq!(rows.dim(), (1, 3));
        assert_eq!(rows.row(0), f.pixel(0, 0));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&fv(&[1.0, 0.0]), &fv(&[1.0, 0.0])).unwrap().value, 1.0);
        assert_eq!(cosine(&fv(&[1.0, 0.0]), &fv(&[0.0, 1.0])).unwrap().value, 0.0);
        let c = cosine(&fv(&[1.0, 1.0]), &fv(&[1.0, 0.0])).unwrap().value;
        assert!((c - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-4);
    }

    #[test]
    fn cosine_zero_vector_is_flagged() {
        let c = cosine(&fv(&[0.0, 0.0]), &fv(&[1.0, 0.0])).unwrap();
        assert_eq!(c, Cosine { value: 0.0, degenerate: true });
        assert!(cosine(&fv(&[1.0]), &fv(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn mask_constructors_validate() {
        assert!(Mask::binary(Array2::from_elem((2, 2), 0.5)).is_err());
        assert!(Mask::soft(Array2::from_elem((2, 2), 1.5)).is_err());
        assert!(Mask::soft(Array2::from_elem((2, 2), 0.5)).is_ok());
        assert!(FeatureMap::new(Array3::from_elem((1, 1, 1), f32::NAN)).is_err());
        assert!(FeatureMap::new(Array3::zeros((0, 1, 1))).is_err());
    }

    #[test]
    fn rng_streams_reproduce() {
        let mut a = RngStream::new(7);
        let mut b = RngStream::new(7);
        let xs: Vec<u64> = (0..16).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.random()).collect();
        assert_eq!(xs, ys);
        assert_ne!(RngStream::new(7).fork(1).random::<u64>(), RngStream::new(7).fork(2).random::<u64>());
        assert_eq!(RngStream::new(7).fork(1).random::<u64>(), RngStream::new(7).fork(1).random::<u64>());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_bijection(h in 1usize..6, w in 1usize..6, c in 1usize..9, seed in any::<u64>()) {
            let mut rng = RngStream::new(seed);
            let data = Array3::from_shape_fn((h, w, c), |_| rng.random_range(-5.0f32..5.0));
            let f = FeatureMap::new(data).unwrap();
            let back = unflatten_spatial(flatten_spatial(&f), h, w).unwrap();
            prop_assert_eq!(back, f);
        }

        #[test]
        fn cosine_positive_rescaling(u in prop::collection::vec(-3.0f32..3.0, 8), v in prop::collection::vec(-3.0f32..3.0, 8), a in 0.01f32..100.0) {
            let (u, v) = (fv(&u), fv(&v));
            let scaled = FeatureVector::new(u.data().mapv(|x| x * a)).unwrap();
            let c0 = cosine(&u, &v).unwrap();
            let c1 = cosine(&scaled, &v).unwrap();
            prop_assume!(!c0.degenerate && !c1.degenerate);
            prop_assert!((c0.value - c1.value).abs() < 1e-6);
            prop_assert!((cosine(&v, &u).unwrap().value - c0.value).abs() < 1e-7);
        }
    }
}
