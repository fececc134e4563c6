//! Cross-domain evaluation metrics, per-token cost formulas and device profiles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(GemError::OutOfUnitRange { name: name.to_string(), value: v })
    }
}

/// Generalization gap `(in − out) / in`.
pub fn generalization_gap(in_perf: f64, out_perf: f64) -> Result<f64> {
    check_unit("in_perf", in_perf)?;
    check_unit("out_perf", out_perf)?;
    if in_perf == 0.0 {
        return Err(GemError::UndefinedGap);
    }
    Ok((in_perf - out_perf) / in_perf)
}

/// Cross-domain transfer ratio `target / source`.
pub fn cdtr(perf_target: f64, perf_source: f64) -> Result<f64> {
    if perf_source == 0.0 {
        return Err(GemError::ZeroDenominator("cdtr"));
    }
    Ok(perf_target / perf_source)
}

/// In-domain and out-of-domain scores for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Row label, e.g. "Healthcare Chatbot".
    #[serde(default)]
    pub model: String,
    pub source_domain: String,
    pub in_domain_perf: f64,
    /// Per-target out-of-domain scores; transfer ratios are reported against each.
    pub out_domain_perfs: BTreeMap<String, f64>,
    /// Out-of-domain average when only the aggregate is published. Defaults to
    /// the mean of `out_domain_perfs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_domain_mean: Option<f64>,
    /// Out-of-domain score used for the gap. Defaults to the out-of-domain mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_reference: Option<f64>,
    /// Target domain of the headline transfer pair. Defaults to the first target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_target: Option<String>,
}

impl MetricRecord {
    pub fn new(source_domain: &str, in_domain_perf: f64, outs: &[(&str, f64)]) -> Self {
        Self {
            model: source_domain.to_string(),
            source_domain: source_domain.to_string(),
            in_domain_perf,
            out_domain_perfs: outs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            out_domain_mean: None,
            gap_reference: None,
            pair_target: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_domain_perfs.is_empty() {
            return Err(GemError::config(
                format!("metrics.records[{}].out_domain_perfs", self.model),
                "need at least one out-of-domain entry",
            ));
        }
        check_unit("in_domain_perf", self.in_domain_perf)?;
        for (k, v) in &self.out_domain_perfs {
            check_unit(&format!("out_domain_perfs.{k}"), *v)?;
        }
        for (name, v) in [("out_domain_mean", self.out_domain_mean), ("gap_reference", self.gap_reference)] {
            if let Some(v) = v {
                check_unit(name, v)?;
            }
        }
        if let Some(t) = &self.pair_target {
            if !self.out_domain_perfs.contains_key(t) {
                return Err(GemError::config("pair_target", format!("`{t}` is not an out-of-domain entry")));
            }
        }
        Ok(())
    }

    pub fn out_mean(&self) -> f64 {
        self.out_domain_mean.unwrap_or_else(|| {
            self.out_domain_perfs.values().sum::<f64>() / self.out_domain_perfs.len() as f64
        })
    }

    fn headline_pair(&self) -> (&str, f64) {
        match &self.pair_target {
            Some(t) => (t.as_str(), self.out_domain_perfs[t]),
            None => {
                let (k, v) = self.out_domain_perfs.iter().next().expect("validated non-empty");
                (k.as_str(), *v)
            }
        }
    }
}

/// Domain specialization index: in-domain score over mean out-of-domain score.
pub fn dsi(record: &MetricRecord) -> Result<f64> {
    record.validate()?;
    let mean = record.out_mean();
    if mean == 0.0 {
        return Err(GemError::ZeroDenominator("dsi"));
    }
    Ok(record.in_domain_perf / mean)
}

/// One row of the metric table, in the published column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub in_domain: f64,
    pub out_domain_avg: f64,
    pub gg: f64,
    pub cdtr: f64,
    pub dsi: f64,
    pub domain_pair: String,
    /// Transfer ratio against every out-of-domain target.
    pub cdtr_all: BTreeMap<String, f64>,
}

pub const METRIC_CSV_HEADER: &str = "model,in_domain,out_domain_avg,gg,cdtr,dsi,domain_pair";

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.model, self.in_domain, self.out_domain_avg, self.gg, self.cdtr, self.dsi, self.domain_pair
        )
    }
}

pub fn compute_all(records: &[MetricRecord]) -> Result<Vec<MetricRow>> {
    records
        .iter()
        .map(|r| {
            r.validate()?;
            let out_avg = r.out_mean();
            let gg = generalization_gap(r.in_domain_perf, r.gap_reference.unwrap_or(out_avg))?;
            let cdtr_all = r
                .out_domain_perfs
                .iter()
                .map(|(k, &v)| cdtr(v, r.in_domain_perf).map(|c| (k.clone(), c)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let (target, _) = r.headline_pair();
            Ok(MetricRow {
                model: r.model.clone(),
                in_domain: r.in_domain_perf,
                out_domain_avg: out_avg,
                gg,
                cdtr: cdtr_all[target],
                dsi: dsi(r)?,
                domain_pair: format!("{}-{}", r.source_domain, target),
                cdtr_all,
            })
        })
        .collect()
}

/// The three worked examples behind the published metric table.
pub fn reference_records() -> Vec<MetricRecord> {
    let mut health = MetricRecord::new(
        "Health",
        0.95,
        &[("General", 0.40), ("General-B", 0.45), ("General-C", 0.50)],
    );
    health.model = "Healthcare Chatbot".into();
    // The gap and transfer ratio use the measured general-task score, the
    // specialization index the three-task mean.
    health.gap_reference = Some(0.40);
    health.pair_target = Some("General".into());

    let mut finance = MetricRecord::new("Finance", 0.90, &[("Legal", 0.60)]);
    finance.model = "Finance Model".into();
    finance.out_domain_mean = Some(0.30);

    let mut legal = MetricRecord::new("Legal", 0.90, &[("Finance", 0.62)]);
    legal.model = "Legal Model".into();
    vec![health, finance, legal]
}

/// Joules per token: `power × latency`.
pub fn energy_per_token(power_w: f64, latency_s: f64) -> f64 {
    power_w * latency_s
}

/// FLOPs per token: `layers × hidden² × 2`.
pub fn flops_per_token(layers: u64, hidden: u64) -> u64 {
    layers * hidden * hidden * 2
}

/// ALU energy ratio when moving from `bits_b` to `bits_a`, `(a / b)²`.
pub fn energy_ratio(bits_a: u32, bits_b: u32) -> Result<f64> {
    if bits_b == 0 {
        return Err(GemError::ZeroDenominator("energy_ratio"));
    }
    let r = bits_a as f64 / bits_b as f64;
    Ok(r * r)
}

/// Relative change from `from` to `to`, in percent.
pub fn relative_change_pct(from: f64, to: f64) -> Result<f64> {
    if from == 0.0 {
        return Err(GemError::ZeroDenominator("relative_change_pct"));
    }
    Ok((to - from) / from * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionCost {
    pub total_latency_s: f64,
    pub total_energy_j: f64,
}

pub fn session_cost(tokens: u64, latency_s_per_token: f64, energy_j_per_token: f64) -> SessionCost {
    let n = tokens as f64;
    SessionCost {
        total_latency_s: n * latency_s_per_token,
        total_energy_j: n * energy_j_per_token,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformProfile {
    pub name: String,
    pub ram_bytes: f64,
    pub peak_flops: f64,
    pub typical_power_watts: f64,
}

impl PlatformProfile {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("ram_bytes", self.ram_bytes),
            ("peak_flops", self.peak_flops),
            ("typical_power_watts", self.typical_power_watts),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(GemError::config(format!("platform.{field}"), format!("{v} must be positive")));
            }
        }
        Ok(())
    }
}

/// Built-in device profiles. Power is the per-device figure measured for the
/// full model.
pub fn builtin_platforms() -> Vec<PlatformProfile> {
    let gb = 1.0e9;
    vec![
        PlatformProfile { name: "raspberry-pi-4".into(), ram_bytes: 4.0 * gb, peak_flops: 12.0e9, typical_power_watts: 2.7 },
        PlatformProfile { name: "pixel-6".into(), ram_bytes: 8.0 * gb, peak_flops: 20.0e12, typical_power_watts: 2.8 },
        PlatformProfile { name: "iphone-13".into(), ram_bytes: 6.0 * gb, peak_flops: 15.8e12, typical_power_watts: 2.9 },
        PlatformProfile { name: "custom-npu".into(), ram_bytes: 8.0 * gb, peak_flops: 20.0e12, typical_power_watts: 2.6 },
    ]
}

pub fn find_platform(name: &str) -> Option<PlatformProfile> {
    builtin_platforms().into_iter().find(|p| p.name.eq_ignore_ascii_case(name))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops_per_token: u64,
    pub latency_s_per_token: f64,
    pub power_w: f64,
    pub energy_j_per_token: f64,
    pub memory_bytes: f64,
}

impl CostReport {
    /// Builds a report, deriving energy from power and latency.
    pub fn new(flops_per_token: u64, latency_s_per_token: f64, power_w: f64, memory_bytes: f64) -> Self {
        Self {
            flops_per_token,
            latency_s_per_token,
            power_w,
            energy_j_per_token: energy_per_token(power_w, latency_s_per_token),
            memory_bytes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gap_examples() {
        assert!((generalization_gap(0.95, 0.40).unwrap() - 0.578947368).abs() < 1e-9);
        assert!((generalization_gap(0.90, 0.62).unwrap() - 0.311111111).abs() < 1e-9);
        assert_eq!(generalization_gap(0.7, 0.7).unwrap(), 0.0);
        let err = generalization_gap(0.0, 0.3).unwrap_err();
        assert!(err.to_string().contains("undefined gap"));
        assert!(generalization_gap(1.2, 0.3).is_err());
    }

    #[test]
    fn transfer_examples() {
        assert!((cdtr(0.60, 0.90).unwrap() - 0.666666667).abs() < 1e-9);
        assert!((cdtr(0.40, 0.95).unwrap() - 0.421052632).abs() < 1e-9);
        assert_eq!(cdtr(0.3, 0.3).unwrap(), 1.0);
        assert!(cdtr(0.3, 0.0).is_err());
    }

    #[test]
    fn specialization_examples() {
        let mut r = MetricRecord::new("Finance", 0.90, &[("a", 0.30)]);
        assert_relative_eq!(dsi(&r).unwrap(), 3.0, epsilon = 1e-12);
        r = MetricRecord::new("Health", 0.95, &[("a", 0.40), ("b", 0.45), ("c", 0.50)]);
        assert!((dsi(&r).unwrap() - 2.111111111).abs() < 1e-9);
        r = MetricRecord::new("x", 0.5, &[("a", 0.5), ("b", 0.5)]);
        assert_eq!(dsi(&r).unwrap(), 1.0);
        r = MetricRecord::new("x", 0.5, &[("a", 0.0)]);
        assert!(dsi(&r).is_err());
        r = MetricRecord::new("x", 0.5, &[]);
        assert!(dsi(&r).is_err());
    }

    #[test]
    fn energy_and_flops() {
        assert_relative_eq!(energy_per_token(2.5, 0.050), 0.125, max_relative = 1e-12);
        assert_relative_eq!(energy_per_token(2.7, 0.070), 0.189, max_relative = 1e-12);
        assert_relative_eq!(relative_change_pct(0.125, 0.189).unwrap(), 51.2, max_relative = 1e-9);
        assert_eq!(energy_per_token(0.0, 3.0), 0.0);
        assert_eq!(flops_per_token(12, 128), 393_216);
        assert_eq!(flops_per_token(0, 128), 0);
        assert_eq!(flops_per_token(2, 32), 4096);
        assert_eq!(energy_ratio(4, 8).unwrap(), 0.25);
        assert_eq!(energy_ratio(6, 6).unwrap(), 1.0);
        assert_eq!(energy_ratio(6, 8).unwrap(), 0.5625);
    }

    #[test]
    fn session_examples() {
        let s = session_cost(10, 0.0824, 0.23);
        assert_relative_eq!(s.total_latency_s, 0.824, max_relative = 1e-12);
        assert_relative_eq!(s.total_energy_j, 2.3, max_relative = 1e-12);
        let z = session_cost(0, 0.0824, 0.23);
        assert_eq!((z.total_latency_s, z.total_energy_j), (0.0, 0.0));
        let s = session_cost(100, 0.05, 0.125);
        assert_relative_eq!(s.total_latency_s, 5.0, max_relative = 1e-12);
        assert_relative_eq!(s.total_energy_j, 12.5, max_relative = 1e-12);
    }

    #[test]
    fn reference_table_rows() {
        let rows = compute_all(&reference_records()).unwrap();
        let gg: Vec<f64> = rows.iter().map(|r| r.gg).collect();
        let dsi: Vec<f64> = rows.iter().map(|r| r.dsi).collect();
        for (got, want) in gg.iter().zip([0.5789, 0.6667, 0.3111]) {
            assert!((got - want).abs() < 5e-5, "{got} vs {want}");
        }
        for (got, want) in dsi.iter().zip([2.1111, 3.0, 1.4516]) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
        let cd: Vec<f64> = rows.iter().map(|r| r.cdtr).collect();
        for (got, want) in cd.iter().zip([0.4211, 0.6667, 0.6889]) {
            assert!((got - want).abs() < 5e-5, "{got} vs {want}");
        }
        assert_eq!(rows[0].out_domain_avg, 0.45);
        assert_eq!(rows[0].domain_pair, "Health-General");
    }

    #[test]
    fn identical_perf_row() {
        let rows = compute_all(&[MetricRecord::new("a", 0.8, &[("b", 0.8)])]).unwrap();
        assert_eq!((rows[0].gg, rows[0].dsi, rows[0].cdtr), (0.0, 1.0, 1.0));
    }

    #[test]
    fn platforms() {
        let p = find_platform("Raspberry-Pi-4").unwrap();
        assert_eq!(p.peak_flops, 12e9);
        assert_eq!(builtin_platforms().len(), 4);
        for p in builtin_platforms() {
            p.validate().unwrap();
        }
        let r = CostReport::new(1, 0.05, 2.5, 0.0);
        assert_relative_eq!(r.energy_j_per_token, 0.125, max_relative = 1e-12);
    }
}
