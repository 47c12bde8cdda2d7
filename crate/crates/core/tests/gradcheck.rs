//! Central finite differences in f64 against reverse-mode gradients of every
//! training loss, with the seed activation held fixed.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Axis, IxDyn};
use qfss_autograd::{Binding, ParamStore, Tape};
use qfss_core::episodes::{sample_episode, synthetic_split, Phase, SyntheticDataset};
use qfss_core::model::{forward_g, is_d_param, is_g_param};
use qfss_core::training::{g_objective, kl_distill, kl_distill_with, loss_d};
use qfss_core::{Episode, Mask, Model, ModelConfig, RngStream, RunConfig};
use rand::seq::index::sample;

const STEP: f64 = 1e-4;
const TOLERANCE: f64 = 1e-3;
/// Denominator floor so that vanishing gradients are compared absolutely.
const FLOOR: f64 = 1e-6;
const SAMPLES: usize = 10;

struct Setup {
    cfg: ModelConfig,
    g: ParamStore<f64>,
    d: ParamStore<f64>,
    episode: Episode,
    seed: Mask,
}

fn setup() -> Setup {
    let rc = RunConfig {
        image_size: 32,
        stage_channels: vec![4, 4, 8, 8],
        strides: vec![2, 2, 1, 1],
        channels: 8,
        heads: 2,
        ffn_hidden: 16,
        levels: 2,
        proxies: 4,
        detail_layers: 2,
        ..Default::default()
    };
    let cfg = rc.model().unwrap();
    let model = Model::init(cfg.clone(), 17).unwrap();
    let split = synthetic_split(rc.num_classes, 0).unwrap();
    let ds = SyntheticDataset::new(rc.scene()).unwrap();
    let episode = sample_episode(&split, &ds, 1, Phase::Train, &mut RngStream::new(5)).unwrap();
    let f_q = model.features(&episode.query_image).unwrap();
    let seed = model.seed_activation(&episode.supports, &f_q, &Default::default()).unwrap().activation;
    Setup { cfg, g: model.g.cast(), d: model.d.cast(), episode, seed }
}

#[derive(Clone, Copy, Debug)]
enum GLoss {
    /// Adversarial plus segmentation terms.
    Supervised,
    Bce,
    /// Distillation with gradients through both levels. Training holds the
    /// coarser level fixed, which finite differences cannot reproduce.
    KlFull,
}

#[derive(Clone, Copy, Debug)]
enum DLoss {
    Total,
    Div,
}

fn g_loss(s: &Setup, g: &ParamStore<f64>, which: GLoss, grads: bool) -> (f64, usize, BTreeMap<String, ArrayD<f64>>) {
    let tape = Tape::<f64>::new();
    let gb = Binding::new(&tape, g, |n| is_g_param(n, false));
    let db = Binding::frozen(&tape, &s.d);
    let (v, pair) = match which {
        GLoss::KlFull => {
            let (_, out) = forward_g(&gb, &s.cfg, &s.episode.query_image, &s.seed).unwrap();
            (kl_distill_with(&out.pyramid, false).unwrap(), 0)
        }
        _ => {
            let t = g_objective(&gb, &db, &s.cfg, &s.episode, &s.seed, 0.0).unwrap();
            (if matches!(which, GLoss::Bce) { t.bce } else { t.total }, t.pair)
        }
    };
    let value = v.scalar_value();
    let grads = if grads { tape.backward(v).into_params() } else { BTreeMap::new() };
    (value, pair, grads)
}

/// `D` sees constant features and masks taken from a `G` pass.
fn d_inputs(s: &Setup) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let tape = Tape::<f64>::new();
    let gb = Binding::frozen(&tape, &s.g);
    let (f_q, out) = forward_g(&gb, &s.cfg, &s.episode.query_image, &s.seed).unwrap();
    let sh = f_q.shape();
    let target = qfss_core::training::losses::feature_target(&s.episode.query_mask, (sh[0], sh[1])).unwrap();
    let real = target.mapv(|v| v as f64).insert_axis(Axis(2)).into_dyn();
    (f_q.value(), out.m_e.value(), real)
}

fn d_loss(
    s: &Setup,
    d: &ParamStore<f64>,
    inputs: &(ArrayD<f64>, ArrayD<f64>, ArrayD<f64>),
    which: DLoss,
    grads: bool,
) -> (f64, usize, BTreeMap<String, ArrayD<f64>>) {
    let tape = Tape::<f64>::new();
    let db = Binding::new(&tape, d, is_d_param);
    let (f, m, r) = (tape.constant(inputs.0.clone()), tape.constant(inputs.1.clone()), tape.constant(inputs.2.clone()));
    let t = loss_d(&db, &s.cfg.detail, f, m, r, 0.1).unwrap();
    let v = match which {
        DLoss::Total => t.total,
        DLoss::Div => t.div,
    };
    let value = v.scalar_value();
    let grads = if grads { tape.backward(v).into_params() } else { BTreeMap::new() };
    (value, t.pair, grads)
}

fn perturbed(store: &ParamStore<f64>, name: &str, idx: &IxDyn, delta: f64) -> ParamStore<f64> {
    let mut s = store.clone();
    s.get_mut(name).unwrap()[idx.clone()] += delta;
    s
}

/// Checks `SAMPLES` entries under each prefix; returns the worst relative error.
fn check(
    store: &ParamStore<f64>,
    prefixes: &[&str],
    analytic: &BTreeMap<String, ArrayD<f64>>,
    pair: usize,
    eval: impl Fn(&ParamStore<f64>) -> (f64, usize),
    rng: &mut RngStream,
) -> f64 {
    let mut worst: f64 = 0.0;
    for prefix in prefixes {
        // only tensors the loss actually reaches
        let entries: Vec<(String, IxDyn)> = analytic
            .iter()
            .filter(|(n, g)| n.starts_with(prefix) && g.iter().any(|v| *v != 0.0))
            .flat_map(|(n, g)| g.indexed_iter().map(move |(i, _)| (n.clone(), i)))
            .collect();
        assert!(entries.len() >= SAMPLES, "{prefix}: only {} reachable entries", entries.len());
        let mut checked = 0;
        for k in sample(rng, entries.len(), entries.len()).into_iter() {
            if checked == SAMPLES {
                break;
            }
            let (name, idx) = &entries[k];
            let (up, pu) = eval(&perturbed(store, name, idx, STEP));
            let (down, pd) = eval(&perturbed(store, name, idx, -STEP));
            if pu != pair || pd != pair {
                // the discrete pair choice flipped inside the stencil
                continue;
            }
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[name][idx.clone()];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            assert!(rel < TOLERANCE, "{name}{idx:?}: analytic {a:e} numeric {numeric:e} rel {rel:e}");
            worst = worst.max(rel);
            checked += 1;
        }
        assert_eq!(checked, SAMPLES, "{prefix}: too many samples straddled a pair switch");
    }
    worst
}

const G_PREFIXES: [&str; 3] = ["backbone/", "miner/", "attn/miner."];
const D_PREFIXES: [&str; 2] = ["detail/", "attn/detail."];

#[test]
fn generator_losses() {
    let s = setup();
    let mut rng = RngStream::new(1);
    for which in [GLoss::Supervised, GLoss::Bce, GLoss::KlFull] {
        let (value, pair, grads) = g_loss(&s, &s.g, which, true);
        assert!(value.is_finite());
        let prefixes: &[&str] = match which {
            // the distillation term depends on the correlation maps only
            GLoss::KlFull => &["backbone/", "attn/miner."],
            _ => &G_PREFIXES,
        };
        let worst = check(&s.g, prefixes, &grads, pair, |g| {
            let (v, p, _) = g_loss(&s, g, which, false);
            (v, p)
        }, &mut rng);
        println!("{which:?}: worst relative error {worst:e}");
        assert!(grads.keys().all(|n| !is_d_param(n)));
    }
}

#[test]
fn distillation_target_is_held_fixed() {
    let s = setup();
    let grads = |detach: bool| {
        let tape = Tape::<f64>::new();
        let gb = Binding::new(&tape, &s.g, |n| is_g_param(n, false));
        let (_, out) = forward_g(&gb, &s.cfg, &s.episode.query_image, &s.seed).unwrap();
        let kl = if detach { kl_distill(&out.pyramid) } else { kl_distill_with(&out.pyramid, false) }.unwrap();
        (kl.scalar_value(), tape.backward(kl).into_params())
    };
    let (v_fixed, g_fixed) = grads(true);
    let (v_full, g_full) = grads(false);
    assert_eq!(v_fixed, v_full);
    let differs = g_fixed.iter().any(|(n, g)| (g - &g_full[n]).iter().any(|d| d.abs() > 1e-9));
    assert!(differs);
}

#[test]
fn discriminator_losses() {
    let s = setup();
    let inputs = d_inputs(&s);
    let mut rng = RngStream::new(2);
    for which in [DLoss::Total, DLoss::Div] {
        let (value, pair, grads) = d_loss(&s, &s.d, &inputs, which, true);
        assert!(value.is_finite());
        let prefixes: &[&str] = match which {
            // diversity is computed before the scoring head
            DLoss::Div => &["detail/proxies", "attn/detail."],
            DLoss::Total => &D_PREFIXES,
        };
        let worst = check(&s.d, prefixes, &grads, pair, |d| {
            let (v, p, _) = d_loss(&s, d, &inputs, which, false);
            (v, p)
        }, &mut rng);
        println!("{which:?}: worst relative error {worst:e}");
        assert!(grads.keys().all(|n| is_d_param(n)));
    }
}
