//! Experiment configuration, loaded from TOML.
//!
//! Every section and field is optional; missing values take the defaults
//! below. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};
use crate::metrics::{builtin_platforms, reference_records, MetricRecord, PlatformProfile};
use crate::model::{ForgettingSetup, GemConfig, TaskSpec, TrainConfig};
use crate::quant::PrecisionMap;
use crate::router::RouterConfig;
use crate::scar::MaskMode;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub route: RouteSection,
    pub scar: ScarSection,
    pub quantize: QuantizeSection,
    pub metrics: MetricsSection,
    pub cost: CostSection,
    pub train: TrainSection,
    pub forget: ForgetSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            route: RouteSection::default(),
            scar: ScarSection::default(),
            quantize: QuantizeSection::default(),
            metrics: MetricsSection::default(),
            cost: CostSection::default(),
            train: TrainSection::default(),
            forget: ForgetSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouteSection {
    /// Token ids to route when none are given on the command line.
    pub tokens: Vec<u32>,
    /// Router shape; its `seed` is replaced by the experiment seed.
    pub router: RouterConfig,
}

impl Default for RouteSection {
    fn default() -> Self {
        Self { tokens: vec![101, 2054, 2024, 1996, 8030, 1997, 20714, 102], router: RouterConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScarSection {
    /// Sequence length of the synthetic embeddings.
    pub n: usize,
    pub k: usize,
    pub dim: usize,
    pub max_iters: usize,
    pub mask_mode: MaskMode,
    /// JSON file holding a list of embedding rows; replaces the synthetic ones.
    pub embeddings: Option<String>,
    /// Cluster counts for the operation-count sweep. Counts above the point
    /// count are skipped.
    pub sweep_k: Vec<usize>,
}

impl Default for ScarSection {
    fn default() -> Self {
        Self {
            n: 128,
            k: 16,
            dim: 32,
            max_iters: 25,
            mask_mode: MaskMode::Exclude,
            embeddings: None,
            sweep_k: vec![4, 8, 16, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizeSection {
    pub bits: Vec<u32>,
    pub sample_count: usize,
    /// Spread used for the modelled noise `σ² / b²`.
    pub sigma: f64,
    pub precision_map: PrecisionMap,
}

impl Default for QuantizeSection {
    fn default() -> Self {
        Self { bits: (1..=8).collect(), sample_count: 100_000, sigma: 1.0, precision_map: PrecisionMap::reference_80m() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub records: Vec<MetricRecord>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { records: reference_records() }
    }
}

/// Architecture and measurements fed to the cost formulas. Defaults describe
/// the 12-layer, 128-unit chatbot measured at 2.5 W and 50 ms per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    pub platform: String,
    /// Extra or replacement platform profiles, matched by name.
    pub platforms: Vec<PlatformProfile>,
    pub layers: u64,
    pub hidden: u64,
    pub params: u64,
    pub bits: u32,
    pub latency_s_per_token: f64,
    /// Measured power; the platform's typical power when absent.
    pub power_w: Option<f64>,
    pub session_tokens: u64,
    pub scar_n: u64,
    pub scar_k: u64,
    pub sweep_k: Vec<u64>,
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            platform: "raspberry-pi-4".into(),
            platforms: Vec::new(),
            layers: 12,
            hidden: 128,
            params: 10_500_000,
            bits: 4,
            latency_s_per_token: 0.050,
            power_w: Some(2.5),
            session_tokens: 10,
            scar_n: 128,
            scar_k: 16,
            sweep_k: vec![8, 16],
        }
    }
}

impl CostSection {
    pub fn resolve_platform(&self) -> Result<PlatformProfile> {
        let p = self
            .platforms
            .iter()
            .find(|p| p.name.eq_ignore_ascii_case(&self.platform))
            .cloned()
            .or_else(|| builtin_platforms().into_iter().find(|p| p.name.eq_ignore_ascii_case(&self.platform)))
            .ok_or_else(|| {
                let known: Vec<String> = builtin_platforms().into_iter().map(|p| p.name).collect();
                GemError::config("cost.platform", format!("unknown platform `{}` (built in: {})", self.platform, known.join(", ")))
            })?;
        p.validate()?;
        Ok(p)
    }
}

/// Toy-scale training run. The learning rate is far above the full-scale
/// default of 5e-5 because the toy model trains for only a few hundred steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub domain: usize,
    pub model: GemConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            domain: 0,
            model: GemConfig::default(),
            task: TaskSpec::default(),
            train: TrainConfig { learning_rate: 1e-2, batch_size: 32, epochs: 5, ..TrainConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgetSection {
    pub base_domain: usize,
    pub new_domain: usize,
    /// Independent repetitions; run `i` uses seed `seed + i`.
    pub runs: usize,
    pub task: TaskSpec,
    pub setup: ForgettingSetup,
}

impl Default for ForgetSection {
    fn default() -> Self {
        Self { base_domain: 0, new_domain: 1, runs: 5, task: TaskSpec::default(), setup: ForgettingSetup::default() }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| text[s].trim().to_string())
                .filter(|s| !s.is_empty() && s.len() < 60)
                .unwrap_or_else(|| "config".to_string());
            GemError::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| GemError::config("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.route.tokens.is_empty() {
            return Err(GemError::config("route.tokens", "must not be empty"));
        }
        self.route.router.validate().map_err(|e| prefix("route.", e))?;

        let s = &self.scar;
        for (field, v) in [("scar.n", s.n), ("scar.k", s.k), ("scar.dim", s.dim)] {
            if v == 0 {
                return Err(GemError::config(field, "must be positive"));
            }
        }
        if s.k > s.n {
            return Err(GemError::config("scar.k", format!("{} exceeds n = {}", s.k, s.n)));
        }
        if s.sweep_k.contains(&0) {
            return Err(GemError::config("scar.sweep_k", "cluster counts must be positive"));
        }

        let q = &self.quantize;
        if let Some(&b) = q.bits.iter().find(|&&b| !(1..=32).contains(&b)) {
            return Err(GemError::config("quantize.bits", format!("{b} is outside 1..=32")));
        }
        if q.sample_count == 0 {
            return Err(GemError::config("quantize.sample_count", "must be positive"));
        }
        if !(q.sigma >= 0.0 && q.sigma.is_finite()) {
            return Err(GemError::config("quantize.sigma", "must be finite and >= 0"));
        }
        q.precision_map.validate(false).map_err(|e| prefix("quantize.", e))?;

        for (i, r) in self.metrics.records.iter().enumerate() {
            r.validate().map_err(|e| match e {
                GemError::Config { field, reason } => GemError::config(format!("metrics.records[{i}].{field}"), reason),
                GemError::OutOfUnitRange { name, value } => {
                    GemError::config(format!("metrics.records[{i}].{name}"), format!("{value} is outside [0, 1]"))
                }
                other => other,
            })?;
        }

        let c = &self.cost;
        c.resolve_platform()?;
        if !(1..=32).contains(&c.bits) {
            return Err(GemError::config("cost.bits", format!("{} is outside 1..=32", c.bits)));
        }
        if !(c.latency_s_per_token >= 0.0 && c.latency_s_per_token.is_finite()) {
            return Err(GemError::config("cost.latency_s_per_token", "must be finite and >= 0"));
        }
        if let Some(p) = c.power_w {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(GemError::config("cost.power_w", "must be finite and >= 0"));
            }
        }
        if c.scar_n == 0 {
            return Err(GemError::config("cost.scar_n", "must be positive"));
        }

        let t = &self.train;
        t.model.validate().map_err(|e| prefix("train.", e))?;
        t.train.validate("train.train")?;
        check_task("train", &t.task, &t.model, &[t.domain])?;

        let f = &self.forget;
        f.setup.model.validate().map_err(|e| prefix("forget.setup.", e))?;
        f.setup.base_train.validate("forget.setup.base_train")?;
        f.setup.finetune.validate("forget.setup.finetune")?;
        if f.runs == 0 {
            return Err(GemError::config("forget.runs", "must be at least 1"));
        }
        check_task("forget", &f.task, &f.setup.model, &[f.base_domain, f.new_domain])?;
        Ok(())
    }
}

fn prefix(p: &str, e: GemError) -> GemError {
    match e {
        GemError::Config { field, reason } => GemError::config(format!("{p}{field}"), reason),
        other => other,
    }
}

fn check_task(section: &str, task: &TaskSpec, model: &GemConfig, domains: &[usize]) -> Result<()> {
    if task.vocab_size != model.vocab_size {
        return Err(GemError::config(
            format!("{section}.task.vocab_size"),
            format!("{} differs from the model's {}", task.vocab_size, model.vocab_size),
        ));
    }
    if task.seq_len > model.max_seq_len {
        return Err(GemError::config(
            format!("{section}.task.seq_len"),
            format!("{} exceeds max_seq_len {}", task.seq_len, model.max_seq_len),
        ));
    }
    if task.domains * crate::model::task::LABELS_PER_DOMAIN > model.num_classes {
        return Err(GemError::config(
            format!("{section}.task.domains"),
            format!("{} domains need {} classes", task.domains, task.domains * crate::model::task::LABELS_PER_DOMAIN),
        ));
    }
    if task.sample_count == 0 {
        return Err(GemError::config(format!("{section}.task.sample_count"), "must be positive"));
    }
    if let Some(&d) = domains.iter().find(|&&d| d >= task.domains) {
        return Err(GemError::config(format!("{section}.domain"), format!("{d} >= task domains {}", task.domains)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn errors_name_the_field() {
        let e = ExperimentConfig::from_toml("[scar]\nk = 500\n").unwrap_err().to_string();
        assert!(e.contains("scar.k"), "{e}");
        let e = ExperimentConfig::from_toml("[route.router]\ntau = 1.5\n").unwrap_err().to_string();
        assert!(e.contains("route.router.tau"), "{e}");
        let e = ExperimentConfig::from_toml("[train.train]\nbatch_size = 0\n").unwrap_err().to_string();
        assert!(e.contains("train.train.batch_size"), "{e}");
        let e = ExperimentConfig::from_toml("[cost]\nplatform = \"toaster\"\n").unwrap_err().to_string();
        assert!(e.contains("cost.platform"), "{e}");
        let e = ExperimentConfig::from_toml("[scar]\nbogus = 1\n").unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
    }
}
