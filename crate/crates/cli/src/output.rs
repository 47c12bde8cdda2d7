//! File writers for command outputs.

use std::collections::HashMap;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use qfss_core::records::{join_list, Record};
use qfss_core::{Episode, EpisodePrediction, Mask};
use safetensors::tensor::{Dtype, TensorView};

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), String> {
    std::fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn records(rs: &[Record]) -> String {
    rs.iter().map(|r| format!("{r}\n")).collect()
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb(path: &Path, img: &Array3<f32>) -> Result<(), String> {
    let (h, w, _) = img.dim();
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        Rgb([to_u8(img[[y, x, 0]]), to_u8(img[[y, x, 1]]), to_u8(img[[y, x, 2]])])
    });
    out.save(path).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn save_mask(path: &Path, m: &Mask) -> Result<(), String> {
    let (h, w) = m.extent();
    let d = m.data();
    let out = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(d[[y as usize, x as usize]])]));
    out.save(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Named maps of one prediction, all `[h, w]`.
fn diagnostic_arrays(p: &EpisodePrediction) -> Vec<(String, Array2<f32>)> {
    let mut v = vec![
        ("query/m_e".to_string(), p.m_e.clone()),
        ("query/probability".to_string(), p.probability.clone()),
        ("query/mask".to_string(), p.mask.data().clone()),
        ("seed/activation".to_string(), p.seed.activation.data().clone()),
    ];
    for (k, l) in p.seed.per_support.iter().enumerate() {
        v.push((format!("support{k}/raw_cosine"), l.raw_cosine.clone()));
        v.push((format!("support{k}/similarity"), l.similarity.data().clone()));
        v.push((format!("support{k}/activation"), l.activation.data().clone()));
    }
    v
}

/// Scalar summary of one prediction.
pub fn diagnostic_record(index: usize, ep: &Episode, p: &EpisodePrediction) -> Record {
    let per = &p.seed.per_support;
    let mut r = Record::new()
        .with("episode", index)
        .with("class_id", ep.class_id)
        .with("seed", ep.seed)
        .with("seed_count", p.seed.activation.foreground_count())
        .with("activation_counts", join_list(&per.iter().map(|l| l.activation.foreground_count()).collect::<Vec<_>>()))
        .with("fallback", join_list(&per.iter().map(|l| u8::from(l.fallback)).collect::<Vec<_>>()))
        .with("degenerate", join_list(&per.iter().map(|l| l.degenerate_positions).collect::<Vec<_>>()))
        .with("predicted", p.mask.foreground_count());
    for (i, l) in p.levels.iter().enumerate() {
        r.push(&format!("level{i}_extent"), format!("{}x{}", l.extent.0, l.extent.1));
        r.push(&format!("level{i}_seed_fraction"), l.seed_fraction);
        r.push(&format!("level{i}_peak"), l.mean_peak_weight);
        r.push(&format!("level{i}_entropy"), l.mean_entropy);
    }
    r
}

/// One safetensors file of named maps; scalar fields go in its metadata.
pub fn diagnostics_bytes(summary: &Record, p: &EpisodePrediction) -> Result<Vec<u8>, String> {
    let arrays = diagnostic_arrays(p);
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = arrays
        .iter()
        .map(|(n, a)| (n.clone(), a.shape().to_vec(), a.iter().flat_map(|v| v.to_le_bytes()).collect()))
        .collect();
    let views = buffers
        .iter()
        .map(|(n, shape, bytes)| TensorView::new(Dtype::F32, shape.clone(), bytes).map(|v| (n.as_str(), v)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let meta: HashMap<String, String> = summary.fields().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    qfss_core::training::checkpoint::serialize_sorted(views, meta).map_err(|e| e.to_string())
}
