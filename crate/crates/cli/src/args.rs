use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use qfss_core::episodes::WeakLabelKind;

/// Query-centric few-shot segmentation: data, training, evaluation and studies.
///
/// Settings come from built-in defaults, then `--config`, then flags; a later
/// source wins. Commands that take `--checkpoint` start from the configuration
/// stored in it unless `--config` is given.
#[derive(Debug, Parser)]
#[command(name = "qfss", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed; every random choice derives from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for outputs and the run manifest.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Worker threads for evaluation.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct Sampling {
    /// Cross-validation fold, 0 to 3.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Supports per episode.
    #[arg(long)]
    pub k_shot: Option<usize>,
    /// Number of episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct Trained {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

fn label_kind(s: &str) -> Result<WeakLabelKind, String> {
    WeakLabelKind::parse(s).map_err(|e| e.to_string())
}

fn keep_ratio(s: &str) -> Result<f32, String> {
    let r: f32 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if r > 0.0 && r <= 1.0 {
        Ok(r)
    } else {
        Err(format!("keep ratio {r} outside (0, 1]"))
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic test episodes as PNG files with an episode manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Train both networks; `--k-shot` and `--episodes` set the training
    /// shot count and the episodes per epoch.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// mIoU and FB-IoU on novel-class episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        #[command(flatten)]
        trained: Trained,
        /// Support label kind: mask, bbox or scribble.
        #[arg(long, value_parser = label_kind)]
        label_kind: Option<WeakLabelKind>,
        /// Also write per-episode diagnostics.
        #[arg(long)]
        dump_diagnostics: bool,
    },
    /// mIoU under random erosion of the support foreground.
    StudyErosion {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        #[command(flatten)]
        trained: Trained,
        /// Comma-separated keep ratios.
        #[arg(long, value_delimiter = ',', value_parser = keep_ratio, default_value = "0.2,0.35,0.5,0.65,0.8,1.0")]
        ratios: Vec<f32>,
    },
    /// mIoU with masks, boxes or scribbles as support labels.
    StudyWeakLabels {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        #[command(flatten)]
        trained: Trained,
        /// Comma-separated label kinds.
        #[arg(long, value_delimiter = ',', value_parser = label_kind, default_value = "mask,bbox,scribble")]
        label_kind: Vec<WeakLabelKind>,
    },
    /// Intra-object and inter-object feature similarity for every class.
    StudySimilarity {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        #[command(flatten)]
        trained: Trained,
    },
    /// Localization maps, masks and attention statistics per episode.
    DumpDiagnostics {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        #[command(flatten)]
        trained: Trained,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::StudyErosion { .. } => "study-erosion",
            Command::StudyWeakLabels { .. } => "study-weak-labels",
            Command::StudySimilarity { .. } => "study-similarity",
            Command::DumpDiagnostics { .. } => "dump-diagnostics",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::StudyErosion { common, .. }
            | Command::StudyWeakLabels { common, .. }
            | Command::StudySimilarity { common, .. }
            | Command::DumpDiagnostics { common, .. } => common,
        }
    }

    pub fn sampling(&self) -> &Sampling {
        match self {
            Command::GenData { sampling, .. }
            | Command::Train { sampling, .. }
            | Command::Eval { sampling, .. }
            | Command::StudyErosion { sampling, .. }
            | Command::StudyWeakLabels { sampling, .. }
            | Command::StudySimilarity { sampling, .. }
            | Command::DumpDiagnostics { sampling, .. } => sampling,
        }
    }

    pub fn checkpoint(&self) -> Option<&PathBuf> {
        match self {
            Command::Eval { trained, .. }
            | Command::StudyErosion { trained, .. }
            | Command::StudyWeakLabels { trained, .. }
            | Command::StudySimilarity { trained, .. }
            | Command::DumpDiagnostics { trained, .. } => Some(&trained.checkpoint),
            Command::GenData { .. } | Command::Train { .. } => None,
        }
    }
}
