//! Training: composite loss, straight-through gradients and AdamW.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::network::{softmax, GemModel};
use super::task::{Sample, SyntheticTask};
use crate::error::{GemError, Result};
use crate::quant::{qakp_loss, QakpLossParts};

/// Samples per gradient-accumulation chunk. Fixed so that the summation order,
/// and therefore every result, is independent of the thread count.
const CHUNK: usize = 8;

/// KL divergence `KL(softmax(t/T) ‖ softmax(s/T))`, i.e. the teacher-student
/// cross-entropy minus the teacher's entropy.
pub fn distill_loss(student_logits: &[f64], teacher_logits: &[f64], temperature: f64) -> Result<f64> {
    let (ps, pt) = tempered(student_logits, teacher_logits, temperature)?;
    Ok(kl(&pt, &ps))
}

fn tempered(student: &[f64], teacher: &[f64], temperature: f64) -> Result<(Array1<f64>, Array1<f64>)> {
    if student.len() != teacher.len() {
        return Err(GemError::dims(format!("{} logits", teacher.len()), format!("{} logits", student.len())));
    }
    if student.is_empty() {
        return Err(GemError::EmptyInput);
    }
    if !(temperature > 0.0) {
        return Err(GemError::InvalidArgument { name: "temperature", reason: format!("{temperature} must be > 0") });
    }
    let s = Array1::from_iter(student.iter().map(|x| x / temperature));
    let t = Array1::from_iter(teacher.iter().map(|x| x / temperature));
    Ok((softmax(s.view()), softmax(t.view())))
}

fn kl(p: &Array1<f64>, q: &Array1<f64>) -> f64 {
    let v: f64 = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum();
    v.max(0.0)
}

/// Adam with decoupled weight decay. Biases are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(model: &GemModel) -> Self {
        Self { step: 0, m: model.zero_grads(), v: model.zero_grads() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn apply(&mut self, model: &mut GemModel, grads: &[Array2<f64>], cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let decay = if p.is_weight { cfg.weight_decay } else { 0.0 };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(&grads[i])
                .for_each(|w, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.adam_eps);
                    *w -= cfg.learning_rate * (update + decay * *w);
                });
        }
    }
}

struct ChunkResult {
    task: f64,
    kd: f64,
    correct: usize,
    grads: Vec<Array2<f64>>,
}

/// Mean task loss, distillation loss and gradients of
/// `task + λ_kd · kd` over `batch`.
fn batch_gradients(
    model: &GemModel,
    eff: &[Array2<f64>],
    batch: &[Sample],
    teacher: Option<(&GemModel, &[Array2<f64>])>,
    cfg: &TrainConfig,
) -> Result<ChunkResult> {
    let classes = model.config().num_classes;
    let chunks: Vec<ChunkResult> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = ChunkResult { task: 0.0, kd: 0.0, correct: 0, grads: model.zero_grads() };
            for s in chunk {
                if s.label >= classes {
                    return Err(GemError::InvalidArgument {
                        name: "label",
                        reason: format!("{} >= num_classes {classes}", s.label),
                    });
                }
                let trace = model.forward_trace(eff, &s.tokens, None)?;
                let p = softmax(trace.seq_logits.view());
                acc.task -= p[s.label].max(f64::MIN_POSITIVE).ln();
                if argmax(&trace.seq_logits) == s.label {
                    acc.correct += 1;
                }
                let mut dseq = p;
                dseq[s.label] -= 1.0;
                if let Some((tm, teff)) = teacher {
                    let t_logits = tm.sequence_logits(teff, &s.tokens)?;
                    let temp = cfg.kd_temperature;
                    let (ps, pt) = tempered(
                        trace.seq_logits.as_slice().expect("contiguous"),
                        t_logits.as_slice().expect("contiguous"),
                        temp,
                    )?;
                    acc.kd += kl(&pt, &ps);
                    dseq = dseq + (&ps - &pt) * (cfg.lambda_kd / temp);
                }
                model.backward(eff, &trace, &dseq, &mut acc.grads);
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = batch.len() as f64;
    let mut total = ChunkResult { task: 0.0, kd: 0.0, correct: 0, grads: model.zero_grads() };
    for c in chunks {
        total.task += c.task;
        total.kd += c.kd;
        total.correct += c.correct;
        for (g, cg) in total.grads.iter_mut().zip(&c.grads) {
            *g += cg;
        }
    }
    total.task /= n;
    total.kd /= n;
    for g in &mut total.grads {
        g.mapv_inplace(|x| x / n);
    }
    Ok(total)
}

pub(crate) fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Sum of `‖W − Q(W)‖²` over every weight tensor and its gradient, with
/// `Q(W)` treated as a constant.
fn quant_penalty(model: &GemModel, eff: &[Array2<f64>]) -> (f64, Vec<Array2<f64>>) {
    let mut grads = model.zero_grads();
    let mut total = 0.0;
    if !model.config().quantize {
        return (0.0, grads);
    }
    for (i, p) in model.params().iter().enumerate() {
        if !p.is_weight {
            continue;
        }
        let diff = &p.value - &eff[i];
        total += diff.iter().map(|x| x * x).sum::<f64>();
        grads[i] = diff * 2.0;
    }
    (total, grads)
}

/// One optimisation step on the composite loss over `batch`.
///
/// `teacher` is required when distillation is enabled. With a zero learning
/// rate the model and optimiser are left untouched.
pub fn train_step(
    model: &mut GemModel,
    opt: &mut AdamW,
    batch: &[Sample],
    cfg: &TrainConfig,
    teacher: Option<&GemModel>,
) -> Result<QakpLossParts> {
    Ok(train_step_inner(model, opt, batch, cfg, teacher, 0)?.0)
}

fn train_step_inner(
    model: &mut GemModel,
    opt: &mut AdamW,
    batch: &[Sample],
    cfg: &TrainConfig,
    teacher: Option<&GemModel>,
    step: usize,
) -> Result<(QakpLossParts, usize)> {
    if batch.is_empty() {
        return Err(GemError::EmptyInput);
    }
    let teacher = match (cfg.kd_enabled, teacher) {
        (true, Some(t)) => Some((t, t.effective_params()?)),
        (true, None) => {
            return Err(GemError::config("train.kd_enabled", "distillation needs a teacher model"));
        }
        (false, _) => None,
    };
    let eff = model.effective_params()?;
    let r = batch_gradients(model, &eff, batch, teacher.as_ref().map(|(m, e)| (*m, e.as_slice())), cfg)?;
    let (penalty, penalty_grads) = quant_penalty(model, &eff);
    let parts = QakpLossParts {
        task_loss: r.task,
        quant_penalty: penalty,
        kd_loss: r.kd,
        lambda_quant: cfg.lambda_quant,
        lambda_kd: if cfg.kd_enabled { cfg.lambda_kd } else { 0.0 },
    };
    let total = qakp_loss(&parts).map_err(|_| GemError::Divergence { step })?;
    if !total.is_finite() {
        return Err(GemError::Divergence { step });
    }
    if cfg.learning_rate == 0.0 {
        return Ok((parts, r.correct));
    }
    let mut grads = r.grads;
    if cfg.lambda_quant > 0.0 {
        for (g, pg) in grads.iter_mut().zip(&penalty_grads) {
            g.scaled_add(cfg.lambda_quant, pg);
        }
    }
    opt.apply(model, &grads, cfg);
    Ok((parts, r.correct))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub task_loss: f64,
    pub quant_penalty: f64,
    pub kd_loss: f64,
    pub total_loss: f64,
    pub train_accuracy: f64,
}

/// Trains for `cfg.epochs` epochs over a seeded shuffle of the task.
pub fn train(
    model: &mut GemModel,
    opt: &mut AdamW,
    task: &SyntheticTask,
    cfg: &TrainConfig,
    teacher: Option<&GemModel>,
) -> Result<Vec<EpochStats>> {
    train_with(model, opt, task, cfg, teacher, |_, _| Ok(()))
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    model: &mut GemModel,
    opt: &mut AdamW,
    task: &SyntheticTask,
    cfg: &TrainConfig,
    teacher: Option<&GemModel>,
    mut on_epoch: impl FnMut(&GemModel, &EpochStats) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    cfg.validate("train")?;
    if task.is_empty() {
        return Err(GemError::EmptyInput);
    }
    let mut order: Vec<usize> = (0..task.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut correct = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = idx.iter().map(|&i| task.samples[i].clone()).collect();
            let (parts, c) = train_step_inner(model, opt, &batch, cfg, teacher, step)?;
            let w = batch.len() as f64;
            sums[0] += parts.task_loss * w;
            sums[1] += parts.quant_penalty * w;
            sums[2] += parts.kd_loss * w;
            sums[3] += qakp_loss(&parts)? * w;
            correct += c;
            step += 1;
        }
        let n = task.len() as f64;
        let stats = EpochStats {
            epoch,
            task_loss: sums[0] / n,
            quant_penalty: sums[1] / n,
            kd_loss: sums[2] / n,
            total_loss: sums[3] / n,
            train_accuracy: correct as f64 / n,
        };
        on_epoch(model, &stats)?;
        history.push(stats);
    }
    Ok(history)
}

/// Fraction of samples whose argmax sequence prediction equals the label.
pub fn evaluate(model: &GemModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(GemError::EmptyInput);
    }
    let eff = model.effective_params()?;
    let correct = samples
        .par_iter()
        .map(|s| model.sequence_logits(&eff, &s.tokens).map(|l| usize::from(argmax(&l) == s.label)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::GemConfig;
    use crate::model::task::TaskSpec;

    #[test]
    fn distillation_examples() {
        let a = [0.3, -1.0, 2.0];
        assert_eq!(distill_loss(&a, &a, 1.0).unwrap(), 0.0);
        // teacher uniform, student one-hot-ish: CE(t, s) − H(t)
        let s = [10.0, 0.0, 0.0];
        let t = [0.0, 0.0, 0.0];
        let z = 10f64.exp() + 2.0;
        let log_q = [10.0 - z.ln(), -z.ln(), -z.ln()];
        let ce: f64 = -log_q.iter().map(|l| l / 3.0).sum::<f64>();
        let h = 3f64.ln();
        assert!((distill_loss(&s, &t, 1.0).unwrap() - (ce - h)).abs() < 1e-12);
        assert!(distill_loss(&s, &[1.0, 5.0, -2.0], 1e6).unwrap() < 1e-9);
        assert!(distill_loss(&s, &t, 0.0).is_err());
        assert!(distill_loss(&s, &t[..2], 1.0).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_state_identical() {
        let cfg = GemConfig { vocab_size: 32, embed_dim: 8, ffn_dim: 8, num_classes: 8, domains: 4, ..GemConfig::default() };
        let mut m = GemModel::new(cfg).unwrap();
        let before = m.params().to_vec();
        let mut opt = AdamW::new(&m);
        let task = SyntheticTask::generate(0, &TaskSpec { vocab_size: 32, domains: 4, sample_count: 16, ..TaskSpec::default() }, 1).unwrap();
        let t = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        let parts = train_step(&mut m, &mut opt, &task.samples, &t, None).unwrap();
        assert!(parts.task_loss > 0.0);
        assert_eq!(m.params(), &before[..]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn kd_requires_teacher_and_empty_batch_fails() {
        let cfg = GemConfig { vocab_size: 32, embed_dim: 8, ffn_dim: 8, num_classes: 8, domains: 4, ..GemConfig::default() };
        let mut m = GemModel::new(cfg).unwrap();
        let mut opt = AdamW::new(&m);
        let t = TrainConfig { kd_enabled: true, ..TrainConfig::default() };
        let s = vec![Sample { tokens: vec![1, 2], label: 0 }];
        assert!(train_step(&mut m, &mut opt, &s, &t, None).is_err());
        assert!(matches!(train_step(&mut m, &mut opt, &[], &TrainConfig::default(), None), Err(GemError::EmptyInput)));
    }
}
