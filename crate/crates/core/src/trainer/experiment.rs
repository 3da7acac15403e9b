use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{ModelConfig, PipelineConfig, TrainConfig};
use super::kfold::{train_full, train_kfold, EpochStats, KFoldOutcome, Split};
use crate::data::{Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::splitter::group_kfold;
use crate::tensor::{derive_seed, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    FrozenVsTrainable,
    CnnVsFusion,
}

#[derive(Clone, Debug)]
pub struct ArmOutcome {
    pub name: String,
    /// Parameters the optimizer may update in this arm.
    pub trainable_params: usize,
    pub outcome: KFoldOutcome,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub arms: Vec<ArmOutcome>,
}

/// Per-epoch means over folds for one split.
fn mean_curve(stats: &[EpochStats], split: Split, epochs: usize) -> Vec<(f64, f64)> {
    (1..=epochs)
        .map(|e| {
            let rows: Vec<&EpochStats> = stats.iter().filter(|s| s.epoch == e && s.split == split).collect();
            let n = rows.len().max(1) as f64;
            (rows.iter().map(|s| s.loss).sum::<f64>() / n, rows.iter().map(|s| s.acc).sum::<f64>() / n)
        })
        .collect()
}

impl ExperimentReport {
    pub fn arm(&self, name: &str) -> Option<&ArmOutcome> {
        self.arms.iter().find(|a| a.name == name)
    }

    /// Fold-mean curves per epoch, then the final OOF metrics, arms side by side.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let names: Vec<&str> = self.arms.iter().map(|a| a.name.as_str()).collect();
        let epochs = self.arms.iter().flat_map(|a| a.outcome.all_stats()).map(|st| st.epoch).max().unwrap_or(0);
        let _ = writeln!(s, "experiment {:?}", self.kind);
        let _ = write!(s, "{:>5}", "epoch");
        for n in &names {
            let _ = write!(s, " {:>14} {:>14} {:>14} {:>14}", format!("{n}.train_loss"), format!("{n}.train_acc"), format!("{n}.val_loss"), format!("{n}.val_acc"));
        }
        s.push('\n');
        let curves: Vec<(Vec<(f64, f64)>, Vec<(f64, f64)>)> = self
            .arms
            .iter()
            .map(|a| {
                let st = a.outcome.all_stats();
                (mean_curve(&st, Split::Train, epochs), mean_curve(&st, Split::Val, epochs))
            })
            .collect();
        for e in 0..epochs {
            let _ = write!(s, "{:>5}", e + 1);
            for (train, val) in &curves {
                let _ = write!(s, " {:>14.6} {:>14.6} {:>14.6} {:>14.6}", train[e].0, train[e].1, val[e].0, val[e].1);
            }
            s.push('\n');
        }
        for a in &self.arms {
            let r = &a.outcome.oof_report;
            let opt = |v: Option<f64>| v.map_or_else(|| "undefined".into(), |x| format!("{x:.6}"));
            let _ = writeln!(
                s,
                "{}: trainable_params={} oof_auc={} accuracy={} recall_malignant={} recall_benign={}",
                a.name,
                a.trainable_params,
                opt(r.auc),
                opt(r.rates.accuracy),
                opt(r.rates.tpr),
                opt(r.rates.tnr),
            );
        }
        s
    }
}

/// Synthetic source task for backbone pretraining: same extent, other seed.
pub fn pretraining_source(target: &Dataset, seed: u64) -> Result<Dataset> {
    let extent = target.images.first().map(|im| im.height()).ok_or_else(|| Error::Config("empty dataset".into()))?;
    let n = target.len().clamp(10, 400);
    Dataset::synthetic(&SynthConfig::new(n, 0.3, extent, derive_seed(seed, &[b"pretrain"])))
}

/// Train an image-only model on `source` and keep its image branch.
pub fn pretrain_backbone(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    pipeline: &PipelineConfig,
    source: &Dataset,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<Checkpoint> {
    let image_only = ModelConfig { use_metadata: false, ..model_cfg.clone() };
    let pre_seed = derive_seed(cfg.seed, &[b"pretrain-model"]);
    let mut model = image_only.build(0, pre_seed)?;
    let pre_cfg = TrainConfig { seed: pre_seed, freeze_image_branch: false, ..cfg.clone() };
    train_full(&mut model, source, &pre_cfg, pipeline, progress)?;
    Ok(Checkpoint::from_graph(&model.image, &SeededRng::new(pre_seed)))
}

/// Two controlled arms on identical folds and seeds.
///
/// `FrozenVsTrainable` starts both arms from `pretrained` (pretraining on
/// [`pretraining_source`] when absent) and differs only in
/// `freeze_image_branch`. `CnnVsFusion` compares an image-only model with
/// the full fusion model.
pub fn run_experiment(
    kind: ExperimentKind,
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    pipeline: &PipelineConfig,
    pretrained: Option<&Checkpoint>,
    progress: &mut dyn FnMut(&str, &EpochStats),
) -> Result<ExperimentReport> {
    cfg.validate()?;
    model_cfg.validate()?;
    let assignment = group_kfold(&dataset.groups(), cfg.folds)?;
    let mut arms = Vec::new();
    match kind {
        ExperimentKind::CnnVsFusion => {
            for (name, use_metadata) in [("image_only", false), ("fusion", true)] {
                let mc = ModelConfig { use_metadata, ..model_cfg.clone() };
                let builder = |w: usize| mc.build(w, cfg.seed);
                let outcome = train_kfold(&builder, dataset, &assignment, cfg, pipeline, &mut |s| progress(name, s))?;
                let trainable_params = outcome.folds[0].trainable_params;
                arms.push(ArmOutcome { name: name.into(), trainable_params, outcome });
            }
        }
        ExperimentKind::FrozenVsTrainable => {
            let owned;
            let ckpt = match pretrained {
                Some(c) => c,
                None => {
                    let source = pretraining_source(dataset, cfg.seed)?;
                    owned = pretrain_backbone(model_cfg, cfg, pipeline, &source, &mut |s| progress("pretrain", s))?;
                    &owned
                }
            };
            let builder = |w: usize| {
                let mut m = model_cfg.build(w, cfg.seed)?;
                let report = ckpt.apply(&mut m, true)?;
                if report.loaded.is_empty() {
                    return Err(Error::Compatibility("pretrained checkpoint shares no tensor with the model".into()));
                }
                Ok(m)
            };
            for (name, freeze) in [("frozen", true), ("trainable", false)] {
                let arm_cfg = TrainConfig { freeze_image_branch: freeze, ..cfg.clone() };
                let outcome =
                    train_kfold(&builder, dataset, &assignment, &arm_cfg, pipeline, &mut |s| progress(name, s))?;
                let trainable_params = outcome.folds[0].trainable_params;
                arms.push(ArmOutcome { name: name.into(), trainable_params, outcome });
            }
        }
    }
    Ok(ExperimentReport { kind, arms })
}
