//! Command resolution and execution. `prepare` does every check that can
//! fail for usage reasons before anything is written; `Job::execute` then
//! produces the outputs.

use std::path::PathBuf;

use qfss_core::episodes::{sample_episodes, write_manifest, EpisodeRecord, Phase, WeakLabelKind};
use qfss_core::evaluation::{
    evaluate, measure_similarity, predict, run_erosion_study, run_weak_label_study, EvalOptions, StudyTable,
};
use qfss_core::records::{join_list, Record};
use qfss_core::training::{checkpoint, train, CheckpointMeta};
use qfss_core::{Episode, Model, RunConfig};

use crate::args::Command;
use crate::output;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
/// Parameters of the epoch with the best validation mIoU.
pub const BEST_CHECKPOINT_FILE: &str = "best.safetensors";

/// A fully resolved command.
pub struct Job {
    command: Command,
    config: RunConfig,
    /// Model restored from `--checkpoint`, with its manifest.
    trained: Option<(Model, CheckpointMeta)>,
    out_dir: PathBuf,
}

/// Defaults, then `--config` (or the checkpoint's stored configuration),
/// then flags.
fn resolve_config(command: &Command) -> Result<(RunConfig, Option<(Model, CheckpointMeta)>), Failure> {
    let common = command.common();
    let from_file = match &common.config {
        Some(p) => Some(RunConfig::load(p).map_err(usage)?),
        None => None,
    };
    let stored = match command.checkpoint() {
        Some(p) if from_file.is_none() => {
            Some(checkpoint::load(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?)
        }
        _ => None,
    };
    let mut cfg = match (&from_file, &stored) {
        (Some(c), _) => c.clone(),
        (None, Some((_, c, _))) => c.clone(),
        (None, None) => RunConfig::default(),
    };
    let s = command.sampling();
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(f) = s.fold {
        cfg.fold = f;
    }
    match command {
        Command::Train { .. } => {
            if let Some(k) = s.k_shot {
                cfg.train_k_shot = k;
            }
            if let Some(n) = s.episodes {
                cfg.episodes_per_epoch = n;
            }
        }
        _ => {
            if let Some(k) = s.k_shot {
                cfg.k_shot = k;
            }
            if let Some(n) = s.episodes {
                cfg.episodes = n;
            }
        }
    }
    cfg.validate().map_err(usage)?;
    if cfg.episodes == 0 || cfg.episodes_per_epoch == 0 {
        return Err(usage("episode counts must be positive"));
    }
    let trained = match (command.checkpoint(), stored) {
        (_, Some((model, _, meta))) => Some((model, meta)),
        (Some(p), None) => Some(checkpoint::load_as(p, &cfg).map_err(|e| runtime(format!("{}: {e}", p.display())))?),
        (None, None) => None,
    };
    Ok((cfg, trained))
}

pub fn prepare(command: Command) -> Result<Job, Failure> {
    let (config, trained) = resolve_config(&command)?;
    let out_dir = command.common().out_dir.clone();
    if out_dir.is_file() {
        return Err(usage(format!("{} is a file", out_dir.display())));
    }
    Ok(Job { command, config, trained, out_dir })
}

impl Job {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
        output::write(&self.path(name), contents).map_err(runtime)
    }

    fn model(&self) -> &Model {
        &self.trained.as_ref().expect("checkpoint commands carry a model").0
    }

    /// The configuration actually used plus everything needed to re-run.
    fn write_manifest(&self, extra: &[(&str, String)]) -> Result<(), Failure> {
        self.write("config.toml", self.config.to_toml())?;
        let mut lines = vec![
            format!("command={}", self.command.name()),
            format!("version={}", env!("CARGO_PKG_VERSION")),
            format!("seed={}", self.config.seed),
            format!("config_hash={}", self.config.hash()),
            "config=config.toml".to_string(),
        ];
        if let (Some(p), Some((_, meta))) = (self.command.checkpoint(), &self.trained) {
            lines.push(format!("checkpoint={}", p.display()));
            lines.push(format!("checkpoint_epoch={}", meta.epoch));
            lines.push(format!("checkpoint_config_hash={}", meta.config_hash));
        }
        lines.extend(extra.iter().map(|(k, v)| format!("{k}={v}")));
        self.write("manifest.txt", lines.join("\n") + "\n")
    }

    fn episodes(&self, phase: Phase) -> Result<Vec<Episode>, Failure> {
        let c = &self.config;
        let split = c.split().map_err(runtime)?;
        let source = c.source().map_err(runtime)?;
        sample_episodes(&split, source.as_ref(), c.k_shot, phase, c.seed, c.episodes).map_err(runtime)
    }

    fn write_episodes(&self, name: &str, eps: &[Episode]) -> Result<(), Failure> {
        let recs: Vec<EpisodeRecord> = eps.iter().enumerate().map(|(i, e)| EpisodeRecord::of(i, e)).collect();
        self.write(name, write_manifest(&recs))
    }

    pub fn execute(self) -> Result<(), Failure> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| runtime(format!("{}: {e}", self.out_dir.display())))?;
        match &self.command {
            Command::GenData { .. } => self.gen_data(),
            Command::Train { .. } => self.train(),
            Command::Eval { label_kind, dump_diagnostics, .. } => self.eval(label_kind.unwrap_or(WeakLabelKind::Mask), *dump_diagnostics),
            Command::StudyErosion { ratios, .. } => self.study(StudyKind::Erosion(ratios.clone())),
            Command::StudyWeakLabels { label_kind, .. } => self.study(StudyKind::Labels(label_kind.clone())),
            Command::StudySimilarity { .. } => self.similarity(),
            Command::DumpDiagnostics { .. } => self.diagnostics(),
        }
    }

    fn gen_data(&self) -> Result<(), Failure> {
        self.write_manifest(&[])?;
        let eps = self.episodes(Phase::Test)?;
        let dir = self.path("episodes");
        std::fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        for (i, ep) in eps.iter().enumerate() {
            let save = |tag: &str, img: &ndarray::Array3<f32>, mask: &qfss_core::Mask| -> Result<(), Failure> {
                output::save_rgb(&dir.join(format!("{i:05}_{tag}.png")), img).map_err(runtime)?;
                output::save_mask(&dir.join(format!("{i:05}_{tag}_mask.png")), mask).map_err(runtime)
            };
            for (k, s) in ep.supports.iter().enumerate() {
                save(&format!("support{k}"), &s.image, &s.label)?;
            }
            save("query", &ep.query_image, &ep.query_mask)?;
        }
        self.write_episodes("episodes.txt", &eps)?;
        eprintln!("wrote {} episodes to {}", eps.len(), dir.display());
        Ok(())
    }

    fn train(&self) -> Result<(), Failure> {
        self.write_manifest(&[])?;
        let c = &self.config;
        let split = c.split().map_err(runtime)?;
        let source = c.source().map_err(runtime)?;
        let model = Model::init(c.model().map_err(runtime)?, c.seed).map_err(runtime)?;
        let ck = self.path(CHECKPOINT_FILE);
        let mut history = String::new();
        let outcome = train(model, &c.train(), &split, source.as_ref(), |m, r| {
            checkpoint::save(&ck, m, c, r.epoch)?;
            let line = r.to_record().to_string();
            eprintln!("{line}");
            history.push_str(&line);
            history.push('\n');
            Ok(())
        })
        .map_err(runtime)?;
        checkpoint::save(&self.path(BEST_CHECKPOINT_FILE), &outcome.best, c, outcome.best_epoch).map_err(runtime)?;
        self.write("history.txt", &history)?;
        let steps: Vec<Record> = outcome
            .steps
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut rec = Record::new().with("step", i);
                for (k, v) in r.to_record().fields() {
                    rec.push(k, v);
                }
                rec
            })
            .collect();
        self.write("steps.txt", output::records(&steps))
    }

    fn eval(&self, label_kind: WeakLabelKind, dump: bool) -> Result<(), Failure> {
        self.write_manifest(&[("label_kind", label_kind.name().to_string()), ("dump_diagnostics", dump.to_string())])?;
        let eps = self.episodes(Phase::Test)?;
        let opts = EvalOptions { workers: self.config.workers, label_kind, ..Default::default() };
        let report = evaluate(self.model(), &eps, &opts).map_err(runtime)?;
        let mut rec = Record::new()
            .with("fold", self.config.fold)
            .with("k_shot", self.config.k_shot)
            .with("label_kind", label_kind.name());
        for (k, v) in report.to_record().fields() {
            rec.push(k, v);
        }
        self.write("metrics.txt", format!("{rec}\n"))?;
        self.write_episodes("episodes.txt", &eps)?;
        println!("mIoU {:.2}  FB-IoU {:.2}  ({} episodes)", report.miou, report.fb_iou, report.episodes());
        if dump {
            self.dump(&eps, &opts)?;
        }
        Ok(())
    }

    fn study(&self, kind: StudyKind) -> Result<(), Failure> {
        let eps = self.episodes(Phase::Test)?;
        let w = self.config.workers;
        let (table, file): (StudyTable, &str) = match &kind {
            StudyKind::Erosion(ratios) => {
                self.write_manifest(&[("ratios", join_list(ratios))])?;
                (run_erosion_study(self.model(), &eps, ratios, w).map_err(runtime)?, "erosion.txt")
            }
            StudyKind::Labels(kinds) => {
                let names: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
                self.write_manifest(&[("label_kinds", names.join(","))])?;
                (run_weak_label_study(self.model(), &eps, kinds, w).map_err(runtime)?, "weak_labels.txt")
            }
        };
        self.write(file, output::records(&table.to_records()))?;
        self.write_episodes("episodes.txt", &eps)?;
        print!("{}", table.to_text());
        Ok(())
    }

    /// Classes of both phases so that every class is measured.
    fn similarity(&self) -> Result<(), Failure> {
        self.write_manifest(&[("pairs_per_object", self.config.pairs_per_object.to_string())])?;
        let mut eps = self.episodes(Phase::Test)?;
        eps.extend(self.episodes(Phase::Val)?);
        let report = measure_similarity(self.model(), &eps, self.config.pairs_per_object, self.config.seed).map_err(runtime)?;
        self.write("similarity.txt", output::records(&report.to_records()))?;
        self.write_episodes("episodes.txt", &eps)?;
        print!("{}", report.to_text());
        Ok(())
    }

    fn diagnostics(&self) -> Result<(), Failure> {
        self.write_manifest(&[])?;
        let eps = self.episodes(Phase::Test)?;
        self.write_episodes("episodes.txt", &eps)?;
        self.dump(&eps, &EvalOptions { workers: self.config.workers, ..Default::default() })
    }

    /// `diagnostics.txt` plus one named-array file per episode.
    fn dump(&self, eps: &[Episode], opts: &EvalOptions) -> Result<(), Failure> {
        let dir = self.path("diagnostics");
        std::fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        let mut summary = Vec::with_capacity(eps.len());
        for (i, ep) in eps.iter().enumerate() {
            let p = predict(self.model(), ep, opts).map_err(runtime)?;
            let rec = output::diagnostic_record(i, ep, &p);
            let bytes = output::diagnostics_bytes(&rec, &p).map_err(runtime)?;
            output::write(&dir.join(format!("episode-{i:05}.safetensors")), bytes).map_err(runtime)?;
            summary.push(rec);
        }
        self.write("diagnostics.txt", output::records(&summary))
    }
}

enum StudyKind {
    Erosion(Vec<f32>),
    Labels(Vec<WeakLabelKind>),
}
