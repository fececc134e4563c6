//! Finite-difference check of the hand-written backward pass.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{softmax, GemModel};
use super::task::Sample;
use crate::error::{GemError, Result};
use crate::scar::SparsityMask;

/// Deviations are measured relative to `max(|analytic|, |numeric|, FLOOR)`,
/// so entries whose true gradient is zero are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub samples: usize,
    pub seed: u64,
    /// Also sample entries of the classification head.
    pub include_head: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { epsilon: 1e-4, samples: 100, seed: 0, include_head: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradCheckStatus {
    Checked,
    /// Quantizers are piecewise constant; finite differences are meaningless.
    #[serde(rename = "non-smooth")]
    SkippedNonSmooth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub status: GradCheckStatus,
    pub max_relative_deviation: f64,
    pub entries: Vec<GradCheckEntry>,
}

fn mean_task_loss(model: &GemModel, eff: &[Array2<f64>], batch: &[Sample], masks: &[Vec<Vec<SparsityMask>>]) -> Result<f64> {
    let mut total = 0.0;
    for (s, m) in batch.iter().zip(masks) {
        let trace = model.forward_trace(eff, &s.tokens, Some(m))?;
        let p = softmax(trace.seq_logits.view());
        total -= p[s.label].ln();
    }
    Ok(total / batch.len() as f64)
}

/// Compares analytic task-loss gradients with central differences on a
/// random subset of parameter entries. Cluster masks are computed once at the
/// unperturbed point and held fixed, since reclustering is not differentiable.
pub fn gradient_check(model: &GemModel, batch: &[Sample], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if model.config().quantize {
        return Ok(GradCheckReport {
            status: GradCheckStatus::SkippedNonSmooth,
            max_relative_deviation: 0.0,
            entries: Vec::new(),
        });
    }
    if batch.is_empty() {
        return Err(GemError::EmptyInput);
    }
    if !(opts.epsilon > 0.0) {
        return Err(GemError::InvalidArgument { name: "epsilon", reason: format!("{} must be > 0", opts.epsilon) });
    }
    let classes = model.config().num_classes;
    let base = model.effective_params()?;
    let mut grads = model.zero_grads();
    let mut masks = Vec::with_capacity(batch.len());
    for s in batch {
        if s.label >= classes {
            return Err(GemError::InvalidArgument { name: "label", reason: format!("{} >= {classes}", s.label) });
        }
        let trace = model.forward_trace(&base, &s.tokens, None)?;
        let mut dseq = softmax(trace.seq_logits.view());
        dseq[s.label] -= 1.0;
        model.backward(&base, &trace, &dseq, &mut grads);
        masks.push(trace.masks());
    }
    let n = batch.len() as f64;
    for g in &mut grads {
        g.mapv_inplace(|x| x / n);
    }

    // Tensors that influence the loss: those reached by some token, plus the head.
    let head = [model.layout.head_w, model.layout.head_b];
    let active: Vec<usize> = (0..grads.len())
        .filter(|&i| {
            if head.contains(&i) {
                opts.include_head
            } else {
                grads[i].iter().any(|&g| g != 0.0)
            }
        })
        .collect();
    let total: usize = active.iter().map(|&i| grads[i].len()).sum();
    if total == 0 {
        return Ok(GradCheckReport { status: GradCheckStatus::Checked, max_relative_deviation: 0.0, entries: Vec::new() });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut eff = base.clone();
    let mut entries = Vec::with_capacity(opts.samples);
    for _ in 0..opts.samples {
        let mut flat = rng.random_range(0..total);
        let mut tensor = active[0];
        for &i in &active {
            if flat < grads[i].len() {
                tensor = i;
                break;
            }
            flat -= grads[i].len();
        }
        let cols = grads[tensor].ncols();
        let (r, c) = (flat / cols, flat % cols);
        let orig = eff[tensor][[r, c]];
        eff[tensor][[r, c]] = orig + opts.epsilon;
        let plus = mean_task_loss(model, &eff, batch, &masks)?;
        eff[tensor][[r, c]] = orig - opts.epsilon;
        let minus = mean_task_loss(model, &eff, batch, &masks)?;
        eff[tensor][[r, c]] = orig;
        let numeric = (plus - minus) / (2.0 * opts.epsilon);
        let analytic = grads[tensor][[r, c]];
        let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        entries.push(GradCheckEntry {
            param: model.params()[tensor].name.clone(),
            row: r,
            col: c,
            analytic,
            numeric,
            relative_deviation: (analytic - numeric).abs() / denom,
        });
    }
    let max_relative_deviation = entries.iter().map(|e| e.relative_deviation).fold(0.0, f64::max);
    Ok(GradCheckReport { status: GradCheckStatus::Checked, max_relative_deviation, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::GemConfig;
    use crate::model::task::{SyntheticTask, TaskSpec};

    fn smooth() -> GemConfig {
        GemConfig { vocab_size: 32, embed_dim: 8, ffn_dim: 12, domains: 4, num_classes: 8, quantize: false, ..GemConfig::default() }
    }

    fn batch() -> Vec<Sample> {
        let spec = TaskSpec { vocab_size: 32, domains: 4, seq_len: 6, sample_count: 4, ..TaskSpec::default() };
        SyntheticTask::generate(1, &spec, 3).unwrap().samples
    }

    #[test]
    fn analytic_matches_finite_differences() {
        let m = GemModel::new(smooth()).unwrap();
        let r = gradient_check(&m, &batch(), &GradCheckOptions::default()).unwrap();
        assert_eq!(r.status, GradCheckStatus::Checked);
        assert_eq!(r.entries.len(), 100);
        assert!(r.max_relative_deviation < 1e-3, "{}", r.max_relative_deviation);
    }

    #[test]
    fn quantized_model_is_skipped() {
        let m = GemModel::new(GemConfig { quantize: true, ..smooth() }).unwrap();
        let r = gradient_check(&m, &batch(), &GradCheckOptions::default()).unwrap();
        assert_eq!(r.status, GradCheckStatus::SkippedNonSmooth);
        assert_eq!(serde_json::to_string(&r.status).unwrap(), "\"non-smooth\"");
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut m = GemModel::new(smooth()).unwrap();
        m.param_mut("head.w").unwrap().value.fill(0.0);
        let opts = GradCheckOptions { include_head: false, ..GradCheckOptions::default() };
        let r = gradient_check(&m, &batch(), &opts).unwrap();
        assert!(r.entries.iter().all(|e| e.analytic.abs() < 1e-12 && e.numeric.abs() < 1e-9));
    }
}
