//! Forgetting comparison: plain fine-tuning against fine-tuning with
//! distillation from the pre-fine-tune snapshot.

use serde::{Deserialize, Serialize};

use super::config::{GemConfig, TrainConfig};
use super::network::GemModel;
use super::task::{SyntheticTask, TaskSpec};
use super::train::{evaluate, train, train_with, AdamW, EpochStats};
use crate::error::{GemError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgettingSetup {
    pub model: GemConfig,
    pub base_train: TrainConfig,
    /// Shared by both fine-tuned copies; `kd_enabled` is overridden per copy.
    pub finetune: TrainConfig,
}

impl Default for ForgettingSetup {
    fn default() -> Self {
        Self::reference(0)
    }
}

impl ForgettingSetup {
    /// Settings of the reference task pair. The learning rates are far above
    /// the full-scale default because the toy model trains for only a few
    /// hundred steps.
    pub fn reference(seed: u64) -> Self {
        Self {
            model: GemConfig { seed, ..GemConfig::default() },
            base_train: TrainConfig {
                learning_rate: 1e-2,
                batch_size: 32,
                epochs: 6,
                seed,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                learning_rate: 1e-2,
                batch_size: 32,
                epochs: 6,
                kd_temperature: 1.0,
                seed: seed.wrapping_add(1),
                ..TrainConfig::default()
            },
        }
    }
}

/// Base task (domain 0) and new task (domain 1) of the reference experiment.
pub fn reference_task_pair(seed: u64) -> Result<(SyntheticTask, SyntheticTask)> {
    let spec = TaskSpec::default();
    Ok((SyntheticTask::generate(0, &spec, seed)?, SyntheticTask::generate(1, &spec, seed)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub base_acc: f64,
    pub new_acc: f64,
    pub task_loss: f64,
    pub kd_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchReport {
    pub base_acc_after: f64,
    pub new_acc_after: f64,
    /// `base_acc_after / base_acc_before`.
    pub retention: f64,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub base_domain: usize,
    pub new_domain: usize,
    pub general_acc_before: f64,
    pub new_acc_before: f64,
    pub general_acc_after_plain: f64,
    pub general_acc_after_kd: f64,
    pub new_task_acc_plain: f64,
    pub new_task_acc_kd: f64,
    /// `retention_kd − retention_plain`.
    pub retention_advantage: f64,
    pub base_history: Vec<EpochStats>,
    pub plain: BranchReport,
    pub kd: BranchReport,
}

fn finetune_branch(
    start: &GemModel,
    teacher: &GemModel,
    base: &SyntheticTask,
    new: &SyntheticTask,
    cfg: &TrainConfig,
    base_before: f64,
) -> Result<BranchReport> {
    let mut model = start.clone();
    let mut opt = AdamW::new(&model);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let teacher = cfg.kd_enabled.then_some(teacher);
    train_with(&mut model, &mut opt, new, cfg, teacher, |m, stats| {
        curve.push(CurvePoint {
            epoch: stats.epoch + 1,
            base_acc: evaluate(m, &base.samples)?,
            new_acc: evaluate(m, &new.samples)?,
            task_loss: stats.task_loss,
            kd_loss: stats.kd_loss,
        });
        Ok(())
    })?;
    let base_acc_after = evaluate(&model, &base.samples)?;
    Ok(BranchReport {
        base_acc_after,
        new_acc_after: evaluate(&model, &new.samples)?,
        retention: if base_before > 0.0 { base_acc_after / base_before } else { 1.0 },
        curve,
    })
}

/// Trains a model on `base`, then fine-tunes two copies on `new`, one plain
/// and one distilling from the model as it was before fine-tuning.
pub fn forgetting_experiment(base: &SyntheticTask, new: &SyntheticTask, setup: &ForgettingSetup) -> Result<ForgettingReport> {
    if base.is_empty() || new.is_empty() {
        return Err(GemError::EmptyInput);
    }
    setup.finetune.validate("finetune")?;
    let mut model = GemModel::new(setup.model.clone())?;
    let mut opt = AdamW::new(&model);
    let base_history = train(&mut model, &mut opt, base, &setup.base_train, None)?;
    let general_acc_before = evaluate(&model, &base.samples)?;
    let new_acc_before = evaluate(&model, &new.samples)?;

    let plain_cfg = TrainConfig { kd_enabled: false, ..setup.finetune.clone() };
    let kd_cfg = TrainConfig { kd_enabled: true, ..setup.finetune.clone() };
    let (plain, kd) = rayon::join(
        || finetune_branch(&model, &model, base, new, &plain_cfg, general_acc_before),
        || finetune_branch(&model, &model, base, new, &kd_cfg, general_acc_before),
    );
    let (plain, kd) = (plain?, kd?);
    Ok(ForgettingReport {
        base_domain: base.domain_id,
        new_domain: new.domain_id,
        general_acc_before,
        new_acc_before,
        general_acc_after_plain: plain.base_acc_after,
        general_acc_after_kd: kd.base_acc_after,
        new_task_acc_plain: plain.new_acc_after,
        new_task_acc_kd: kd.new_acc_after,
        retention_advantage: kd.retention - plain.retention,
        base_history,
        plain,
        kd,
    })
}
