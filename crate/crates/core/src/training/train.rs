//! Alternating optimization of the object miner and the detail miner.

use ndarray::{Array2, Array3, Axis};
use qfss_autograd::{Binding, ParamStore, Tape};

use super::losses::{self, LossReport};
use super::optim::{poly_lr, AdamW, AdamWConfig};
use crate::detail_miner::DetailConfig;
use crate::episodes::{episode_stream, sample_episode, sample_episodes, Phase, SceneSource, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalOptions};
use crate::model::{forward_g, Model, SeedOptions};
use crate::nn;
use crate::records::Record;
use crate::types::{Episode, FeatureMap};

/// Stream label separating validation episodes from training episodes.
const VAL_STREAM: u64 = 0x7661_6c69_6461_7465;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Exponent of the polynomial decay.
    pub poly_power: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub batch_size: usize,
    pub lambda_div: f64,
    pub lambda_kl: f64,
    /// `D` steps per `G` step, all on the same batch.
    pub alternation: usize,
    pub val_episodes: usize,
    pub k_shot: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            poly_power: 0.9,
            epochs: 4,
            episodes_per_epoch: 1000,
            batch_size: 4,
            lambda_div: 0.1,
            lambda_kl: 1.0,
            alternation: 1,
            val_episodes: 100,
            k_shot: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.lambda_div < 0.0 || self.lambda_kl < 0.0 || self.weight_decay < 0.0 {
            return bad("loss weights and weight decay must be non-negative");
        }
        if self.alternation == 0 || self.batch_size == 0 || self.k_shot == 0 {
            return bad("alternation, batch_size and k_shot must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.episodes_per_epoch.div_ceil(self.batch_size)
    }

    pub fn max_iter(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// What `D` sees of one episode: query features, predicted and true masks.
struct DInput {
    f_q: Array3<f32>,
    m_fake: Array2<f32>,
    m_real: Array2<f32>,
}

#[derive(Debug, Clone, Copy, Default)]
struct DReport {
    total: f64,
    real: f64,
    fake: f64,
    div: f64,
}

fn with_channel(m: &Array2<f32>) -> Array3<f32> {
    m.clone().insert_axis(Axis(2))
}

/// One `D` update over a batch. Inputs are constants, so `G` cannot move.
fn d_update(d: &mut ParamStore<f32>, opt: &mut AdamW, cfg: &DetailConfig, inputs: &[DInput], lambda_div: f64, lr: f64) -> Result<DReport> {
    let tape = Tape::<f32>::new();
    let grads;
    let mut rep = DReport::default();
    {
        let b = Binding::new(&tape, d, |_| true);
        let mut total = tape.scalar(0.0);
        let n = inputs.len() as f64;
        for inp in inputs {
            let f_q = tape.constant(inp.f_q.clone().into_dyn());
            let fake = tape.constant(with_channel(&inp.m_fake).into_dyn());
            let real = tape.constant(with_channel(&inp.m_real).into_dyn());
            let t = losses::loss_d(&b, cfg, f_q, fake, real, lambda_div)?;
            rep.real += t.real.scalar_value() as f64 / n;
            rep.fake += t.fake.scalar_value() as f64 / n;
            rep.div += t.div.scalar_value() as f64 / n;
            total = total.add(t.total.scale(1.0 / n));
        }
        rep.total = rep.real + rep.fake + lambda_div * rep.div;
        if !rep.total.is_finite() {
            return Err(Error::NonFinite { step: opt.steps() as usize, detail: format!("l_d={} l_div={}", rep.total, rep.div) });
        }
        grads = tape.backward(total).into_params();
    }
    opt.step(d, &grads, lr)?;
    Ok(rep)
}

/// Holds the model and both optimizers.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    opt_g: AdamW,
    opt_d: AdamW,
    iter: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = AdamW::new(config.adamw());
        Ok(Self { model, opt_g: opt.clone(), opt_d: opt, config, iter: 0 })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn lr(&self) -> f64 {
        poly_lr(self.config.lr, self.iter, self.config.max_iter().max(1), self.config.poly_power)
    }

    fn non_finite(&self, report: &LossReport) -> Error {
        Error::NonFinite { step: self.iter, detail: report.to_record().to_string() }
    }

    /// Seed activation of `ep` from current features, with the query features
    /// taken from an already computed map.
    fn seed_of(&self, ep: &Episode, f_q: &FeatureMap) -> Result<crate::types::Mask> {
        Ok(self.model.seed_activation(&ep.supports, f_q, &SeedOptions::default())?.activation)
    }

    fn d_inputs(&self, batch: &[Episode]) -> Result<Vec<DInput>> {
        batch
            .iter()
            .map(|ep| {
                let tape = Tape::<f32>::new();
                let b = Binding::frozen(&tape, &self.model.g);
                let f_q = crate::backbone::encode(&b, &self.model.config.encoder, &ep.query_image)?;
                let fq = FeatureMap::new(nn::var_to_array3(f_q))?;
                let seed = self.seed_of(ep, &fq)?;
                let out = crate::object_miner::mine(&b, &self.model.config.miner, f_q, &seed)?;
                let m_fake = nn::var_to_array3(out.m_e).index_axis_move(Axis(2), 0);
                let m_real = losses::feature_target(&ep.query_mask, fq.extent())?;
                Ok(DInput { f_q: fq.into_data(), m_fake, m_real })
            })
            .collect()
    }

    /// A lone `D` step; `G` is only evaluated.
    pub fn d_step(&mut self, batch: &[Episode]) -> Result<LossReport> {
        let inputs = self.d_inputs(batch)?;
        let lr = self.lr();
        let r = d_update(&mut self.model.d, &mut self.opt_d, &self.model.config.detail, &inputs, self.config.lambda_div, lr)?;
        Ok(LossReport { l_d_total: r.total, adv_d_real: r.real, adv_d_fake: r.fake, l_div: r.div, ..Default::default() })
    }

    /// A lone `G` step against the current, frozen `D`.
    pub fn g_step(&mut self, batch: &[Episode]) -> Result<LossReport> {
        self.step_inner(batch, 0)
    }

    /// `alternation` `D` steps then one `G` step on `batch`, and the schedule advances.
    pub fn step(&mut self, batch: &[Episode]) -> Result<LossReport> {
        let r = self.step_inner(batch, self.config.alternation)?;
        self.iter += 1;
        Ok(r)
    }

    fn step_inner(&mut self, batch: &[Episode], d_steps: usize) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let lr = self.lr();
        let (lambda_div, lambda_kl) = (self.config.lambda_div, self.config.lambda_kl);
        let n = batch.len() as f64;
        let mut report = LossReport::default();
        let tape = Tape::<f32>::new();
        let grads;
        {
            let trainable = self.model.g_trainable();
            let g = Binding::new(&tape, &self.model.g, trainable);
            let mut forwards = Vec::with_capacity(batch.len());
            let mut inputs = Vec::with_capacity(batch.len());
            for ep in batch {
                let f_q = crate::backbone::encode(&g, &self.model.config.encoder, &ep.query_image)?;
                let fq = FeatureMap::new(nn::var_to_array3(f_q))?;
                let seed = self.model.seed_activation(&ep.supports, &fq, &SeedOptions::default())?.activation;
                let out = crate::object_miner::mine(&g, &self.model.config.miner, f_q, &seed)?;
                let target = losses::feature_target(&ep.query_mask, fq.extent())?;
                inputs.push(DInput {
                    f_q: fq.into_data(),
                    m_fake: nn::var_to_array3(out.m_e).index_axis_move(Axis(2), 0),
                    m_real: target.clone(),
                });
                forwards.push((f_q, out, target));
            }
            for _ in 0..d_steps {
                let r = d_update(&mut self.model.d, &mut self.opt_d, &self.model.config.detail, &inputs, lambda_div, lr)?;
                report.l_d_total = r.total;
                report.adv_d_real = r.real;
                report.adv_d_fake = r.fake;
                report.l_div = r.div;
            }
            let d = Binding::frozen(&tape, &self.model.d);
            let mut total = tape.scalar(0.0);
            for (f_q, out, target) in &forwards {
                let t = losses::loss_g(&d, &self.model.config.detail, *f_q, out, target, lambda_kl)?;
                report.adv_g += t.adv.scalar_value() as f64 / n;
                report.kl += t.kl.scalar_value() as f64 / n;
                report.bce += t.bce.scalar_value() as f64 / n;
                total = total.add(t.total.scale(1.0 / n));
            }
            report.l_g_total = report.adv_g + lambda_kl * report.kl + report.bce;
            if !report.is_finite() {
                return Err(self.non_finite(&report));
            }
            grads = tape.backward(total).into_params();
        }
        self.opt_g.step(&mut self.model.g, &grads, lr)?;
        Ok(report)
    }
}

/// One line of the metric history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub losses: LossReport,
    /// Validation mIoU (0 to 100) on held-out episodes of training classes.
    pub val_miou: f64,
}

impl EpochRecord {
    pub fn to_record(&self) -> Record {
        let mut r = Record::new().with("epoch", self.epoch).with("steps", self.steps).with("lr", self.lr);
        for (k, v) in self.losses.to_record().fields() {
            r.push(k, v);
        }
        r.with("val_miou", self.val_miou)
    }
}

pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: Model,
    /// Parameters after the epoch with the highest validation mIoU (the
    /// earliest on ties).
    pub best: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Loss report of every step, in order.
    pub steps: Vec<LossReport>,
}

/// Runs the full schedule. `on_epoch` is called after each epoch, for
/// example to write a checkpoint.
pub fn train(
    model: Model,
    config: &TrainConfig,
    split: &SplitSpec,
    source: &dyn SceneSource,
    mut on_epoch: impl FnMut(&Model, &EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, config.clone())?;
    let val = sample_episodes(split, source, config.k_shot, Phase::Val, config.seed ^ VAL_STREAM, config.val_episodes)?;
    let mut history = Vec::with_capacity(config.epochs);
    let mut steps = Vec::with_capacity(config.max_iter());
    let mut best: Option<(usize, f64, Model)> = None;
    for epoch in 0..config.epochs {
        let start = steps.len();
        let lr = trainer.lr();
        for s in 0..config.steps_per_epoch() {
            let first = epoch * config.episodes_per_epoch + s * config.batch_size;
            let last = (epoch * config.episodes_per_epoch + config.episodes_per_epoch).min(first + config.batch_size);
            let batch = (first..last)
                .map(|i| sample_episode(split, source, config.k_shot, Phase::Train, &mut episode_stream(config.seed, Phase::Train, i)))
                .collect::<Result<Vec<_>>>()?;
            steps.push(trainer.step(&batch)?);
        }
        let val_miou = if val.is_empty() { 0.0 } else { evaluate(&trainer.model, &val, &EvalOptions::default())?.miou };
        let rec = EpochRecord { epoch, steps: steps.len(), lr, losses: LossReport::mean(&steps[start..]), val_miou };
        on_epoch(&trainer.model, &rec)?;
        if best.as_ref().is_none_or(|b| val_miou > b.1) {
            best = Some((epoch, val_miou, trainer.model.clone()));
        }
        history.push(rec);
    }
    let (best_epoch, best) = match best {
        Some((e, _, m)) => (e, m),
        None => (0, trainer.model.clone()),
    };
    Ok(TrainOutcome { model: trainer.model, best, best_epoch, history, steps })
}

/// `G`'s loss for a fixed seed on any tape, used to build finite-difference checks.
pub fn g_objective<'t, T: qfss_autograd::Scalar>(
    g: &Binding<'t, '_, T>,
    d: &Binding<'t, '_, T>,
    model: &crate::model::ModelConfig,
    episode: &Episode,
    seed: &crate::types::Mask,
    lambda_kl: f64,
) -> Result<losses::GTerms<'t, T>> {
    let (f_q, out) = forward_g(g, model, &episode.query_image, seed)?;
    let s = f_q.shape();
    let target = losses::feature_target(&episode.query_mask, (s[0], s[1]))?;
    losses::loss_g(d, &model.detail, f_q, &out, &target, lambda_kl)
}
