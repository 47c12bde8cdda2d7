//! Adversarial, distillation and segmentation losses.

use ndarray::{Array2, ArrayD};
use qfss_autograd::kernels::bilinear_matrix;
use qfss_autograd::{Binding, Scalar, Var};

use crate::backbone;
use crate::detail_miner::{self, DetailConfig, LocalFeatureSet, Origin};
use crate::error::{Error, Result};
use crate::nn;
use crate::object_miner::{MinerOutput, PyramidState};
use crate::records::Record;
use crate::types::Mask;

/// Probability floor inside the distillation logarithm.
pub const KL_FLOOR: f64 = 1e-12;

/// Per-step loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub l_g_total: f64,
    pub bce: f64,
    pub kl: f64,
    pub adv_g: f64,
    pub l_d_total: f64,
    pub adv_d_real: f64,
    pub adv_d_fake: f64,
    pub l_div: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|(_, v)| v.is_finite())
    }

    fn values(&self) -> [(&'static str, f64); 8] {
        [
            ("l_g", self.l_g_total),
            ("bce", self.bce),
            ("kl", self.kl),
            ("adv_g", self.adv_g),
            ("l_d", self.l_d_total),
            ("adv_d_real", self.adv_d_real),
            ("adv_d_fake", self.adv_d_fake),
            ("l_div", self.l_div),
        ]
    }

    pub fn to_record(&self) -> Record {
        self.values().iter().fold(Record::new(), |r, (k, v)| r.with(k, v))
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        LossReport {
            l_g_total: sum(|r| r.l_g_total),
            bce: sum(|r| r.bce),
            kl: sum(|r| r.kl),
            adv_g: sum(|r| r.adv_g),
            l_d_total: sum(|r| r.l_d_total),
            adv_d_real: sum(|r| r.adv_d_real),
            adv_d_fake: sum(|r| r.adv_d_fake),
            l_div: sum(|r| r.l_div),
        }
    }
}

/// Ground truth at feature resolution: bilinear downsampling re-binarized at 0.5,
/// shaped `[h, w, 1]`.
pub fn feature_target(gt: &Mask, extent: (usize, usize)) -> Result<Array2<f32>> {
    let m = if gt.extent() == extent { gt.clone() } else { backbone::downsample_mask(gt, extent)? };
    Ok(m.binarize(0.5).into_data())
}

fn column<T: Scalar>(m: &Array2<f32>) -> ArrayD<T> {
    let (h, w) = m.dim();
    nn::cast_in::<T, _>(m).into_shape_with_order(vec![h, w, 1]).expect("contiguous")
}

/// Mean per-pixel cross-entropy of `sigmoid(logits)` (`[h, w, 1]`) against a
/// binary target `[h, w]`.
pub fn bce<'t, T: Scalar>(logits: Var<'t, T>, target: &Array2<f32>) -> Var<'t, T> {
    logits.bce_logits(&column::<T>(target))
}

/// Terms of the discriminator loss for one episode.
pub struct DTerms<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub real: Var<'t, T>,
    pub fake: Var<'t, T>,
    pub div: Var<'t, T>,
    /// Index of the most different proxy pair.
    pub pair: usize,
}

/// Local features under both masks, the selected pair and its scores.
struct Scored<'t, T: Scalar> {
    omega_f: Var<'t, T>,
    omega_r: Var<'t, T>,
    s_f: Var<'t, T>,
    s_r: Var<'t, T>,
    pair: usize,
}

fn to_set<T: Scalar>(v: Var<'_, T>, origin: Origin) -> LocalFeatureSet {
    LocalFeatureSet { omega: nn::var_to_array2(v), origin }
}

fn score_pair<'t, T: Scalar>(
    d: &Binding<'t, '_, T>,
    cfg: &DetailConfig,
    f_q: Var<'t, T>,
    m_fake: Var<'t, T>,
    m_real: Var<'t, T>,
) -> Result<Scored<'t, T>> {
    let (omega_f, _) = detail_miner::extract_local_features(d, cfg, f_q, m_fake)?;
    let (omega_r, _) = detail_miner::extract_local_features(d, cfg, f_q, m_real)?;
    let (pair, _) = detail_miner::select_most_different_pair(&to_set(omega_f, Origin::Fake), &to_set(omega_r, Origin::Real))?;
    let s_f = detail_miner::score_real_fake(d, omega_f.slice(0, pair, 1));
    let s_r = detail_miner::score_real_fake(d, omega_r.slice(0, pair, 1));
    Ok(Scored { omega_f, omega_r, s_f, s_r, pair })
}

/// `−ln s_r − ln(1 − s_f) + λ_div · L_div` at the most different proxy pair.
/// Pass detached `f_q` and `m_fake` so that only `D` receives gradients.
pub fn loss_d<'t, T: Scalar>(
    d: &Binding<'t, '_, T>,
    cfg: &DetailConfig,
    f_q: Var<'t, T>,
    m_fake: Var<'t, T>,
    m_real: Var<'t, T>,
    lambda_div: f64,
) -> Result<DTerms<'t, T>> {
    let s = score_pair(d, cfg, f_q, m_fake, m_real)?;
    let real = s.s_r.ln().neg();
    let fake = s.s_f.neg().offset(1.0).ln().neg();
    let div = detail_miner::diversity_loss(s.omega_f, s.omega_r)?;
    let total = real.add(fake).add(div.scale(lambda_div));
    Ok(DTerms { total, real, fake, div, pair: s.pair })
}

/// Terms of the generator loss for one episode.
pub struct GTerms<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub adv: Var<'t, T>,
    pub kl: Var<'t, T>,
    pub bce: Var<'t, T>,
    pub pair: usize,
}

/// `−ln s_f + λ_kl · KL + BCE`; `d` should be a frozen binding.
pub fn loss_g<'t, T: Scalar>(
    d: &Binding<'t, '_, T>,
    cfg: &DetailConfig,
    f_q: Var<'t, T>,
    out: &MinerOutput<'t, T>,
    target: &Array2<f32>,
    lambda_kl: f64,
) -> Result<GTerms<'t, T>> {
    let tape = d.tape();
    let m_real = tape.constant(column::<T>(target));
    let s = score_pair(d, cfg, f_q, out.m_e, m_real)?;
    let adv = s.s_f.ln().neg();
    let kl = kl_distill(&out.pyramid)?;
    let bce = bce(out.logits, target);
    let total = adv.add(kl.scale(lambda_kl)).add(bce);
    Ok(GTerms { total, adv, kl, bce, pair: s.pair })
}

/// Spatial down-projection `kron(Ry, Rx)` from `(h, w)` to `(h2, w2)` positions.
pub fn spatial_projection(from: (usize, usize), to: (usize, usize)) -> Array2<f64> {
    let ry = bilinear_matrix::<f64>(from.0, to.0);
    let rx = bilinear_matrix::<f64>(from.1, to.1);
    let mut k = Array2::zeros((to.0 * to.1, from.0 * from.1));
    for ((i, j), &a) in ry.indexed_iter() {
        for ((p, q), &b) in rx.indexed_iter() {
            k[[i * to.1 + p, j * from.1 + q]] = a * b;
        }
    }
    k
}

fn row_normalize<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    x.div(x.sum_axis(1))
}

/// Mean over rows of `KL(target_row ‖ pred_row)`.
fn kl_rows_var<'t, T: Scalar>(target: Var<'t, T>, pred: Var<'t, T>) -> Var<'t, T> {
    let p = target.clamp(KL_FLOOR, f64::INFINITY);
    let q = pred.clamp(KL_FLOOR, f64::INFINITY);
    let rows = p.shape()[0] as f64;
    p.mul(p.ln().sub(q.ln())).sum().scale(1.0 / rows)
}

/// Row-wise KL divergence of two row-stochastic matrices, averaged over rows.
pub fn kl_rows(target: &Array2<f64>, pred: &Array2<f64>) -> Result<f64> {
    if target.dim() != pred.dim() || target.nrows() == 0 {
        return Err(Error::Shape(format!("{:?} vs {:?}", target.dim(), pred.dim())));
    }
    let tape = qfss_autograd::Tape::<f64>::new();
    let t = tape.constant(target.clone().into_dyn());
    let p = tape.constant(pred.clone().into_dyn());
    Ok(kl_rows_var(t, p).scalar_value())
}

/// Distillation between the aggregation maps of adjacent scales. The finer
/// map is projected onto the coarser grid along both axes, both maps are
/// renormalized over source positions, and the coarser one is the fixed
/// target. Zero for a single-level pyramid.
pub fn kl_distill<'t, T: Scalar>(pyramid: &PyramidState<'t, T>) -> Result<Var<'t, T>> {
    kl_distill_with(pyramid, true)
}

/// [`kl_distill`], optionally letting gradients reach the coarser target too.
pub fn kl_distill_with<'t, T: Scalar>(pyramid: &PyramidState<'t, T>, detach_target: bool) -> Result<Var<'t, T>> {
    let corr = &pyramid.correlations;
    let Some(first) = corr.first() else {
        return Err(Error::InvalidArgument("pyramid has no correlation maps".into()));
    };
    let tape = first.tape();
    let mut total = tape.scalar(T::zero());
    for l in 0..corr.len().saturating_sub(1) {
        let (from, to) = (pyramid.extents[l], pyramid.extents[l + 1]);
        let k = tape.constant(spatial_projection(from, to).mapv(<T as Scalar>::from_f64).into_dyn());
        let fine = k.matmul(corr[l]).matmul(k.t());
        let target = if detach_target { corr[l + 1].detach() } else { corr[l + 1] };
        let kl = kl_rows_var(row_normalize(target), row_normalize(fine));
        total = total.add(kl);
    }
    Ok(total)
}
