//! Simulated ("fake") quantization, hybrid-precision memory accounting, the
//! composite quantization/distillation loss and the analytic bound functions.
//!
//! Quantization is symmetric mid-tread: a `b`-bit quantizer over `[-r, r]` has
//! step `Δ = 2r / (2^b - 1)` and integer codes in `-(2^(b-1) - 1) ..= 2^(b-1) - 1`,
//! i.e. exactly `2^b - 1` levels with zero always representable. The code range
//! is clamped rather than the reconstructed value, so the cells of width `Δ`
//! tile `[-r, r]` exactly and the level count can never exceed `2^b - 1`.

use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};

pub const MIN_BITS: u32 = 1;
pub const MAX_BITS: u32 = 32;

/// Default weight of the quantization penalty in the composite loss.
pub const DEFAULT_LAMBDA_QUANT: f64 = 0.1;
/// Default weight of the distillation term in the composite loss.
pub const DEFAULT_LAMBDA_KD: f64 = 0.5;

/// Bytes in one (decimal) megabyte, the unit used by every memory figure.
pub const MB: f64 = 1.0e6;

fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(GemError::InvalidBitWidth(bits))
    }
}

/// Symmetric uniform quantizer with `2^bits - 1` levels over `[-range_max, range_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    bits: u32,
    range_max: f64,
}

impl Quantizer {
    pub fn new(bits: u32, range_max: f64) -> Result<Self> {
        check_bits(bits)?;
        if !(range_max.is_finite() && range_max > 0.0) {
            return Err(GemError::InvalidRange(range_max));
        }
        Ok(Self { bits, range_max })
    }

    /// Per-tensor calibration: the range is the largest absolute value.
    ///
    /// An all-zero tensor gets a unit range (every value maps to zero anyway).
    pub fn calibrated<'a>(bits: u32, values: impl IntoIterator<Item = &'a f64>) -> Result<Self> {
        let mut max_abs = 0.0f64;
        for (index, v) in values.into_iter().enumerate() {
            if !v.is_finite() {
                return Err(GemError::NonFinite { index });
            }
            max_abs = max_abs.max(v.abs());
        }
        Self::new(bits, if max_abs > 0.0 { max_abs } else { 1.0 })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn range_max(&self) -> f64 {
        self.range_max
    }

    /// Number of representable values, `2^b - 1`.
    pub fn levels(&self) -> u64 {
        (1u64 << self.bits) - 1
    }

    /// Grid spacing `Δ = 2r / (2^b - 1)`.
    pub fn step(&self) -> f64 {
        2.0 * self.range_max / self.levels() as f64
    }

    fn max_code(&self) -> f64 {
        ((1u64 << (self.bits - 1)) - 1) as f64
    }

    /// Quantizes one finite value. Callers are responsible for finiteness.
    #[inline]
    pub fn quantize_value(&self, v: f64) -> f64 {
        let step = self.step();
        let max_code = self.max_code();
        let code = (v / step).round().clamp(-max_code, max_code);
        code * step
    }
}

/// Quantizes every value onto `q`'s grid.
pub fn uniform_quantize(values: &[f64], q: &Quantizer) -> Result<Vec<f64>> {
    check_bits(q.bits)?;
    values
        .iter()
        .enumerate()
        .map(|(index, &v)| {
            if v.is_finite() {
                Ok(q.quantize_value(v))
            } else {
                Err(GemError::NonFinite { index })
            }
        })
        .collect()
}

/// Fake-quantizes a weight matrix with a per-tensor max-abs range.
pub fn fake_quantize(weights: &Array2<f64>, bits: u32) -> Result<Array2<f64>> {
    let q = Quantizer::calibrated(bits, weights.iter())?;
    Ok(weights.mapv(|v| q.quantize_value(v)))
}

/// `‖W - Q(W)‖²` for one tensor at the given bit-width.
pub fn quantization_residual(weights: &Array2<f64>, bits: u32) -> Result<f64> {
    let q = Quantizer::calibrated(bits, weights.iter())?;
    Ok(weights
        .iter()
        .map(|&v| {
            let d = v - q.quantize_value(v);
            d * d
        })
        .sum())
}

/// Which part of the network a parameter tensor belongs to; each class has its
/// own bit-width in a [`PrecisionMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerClass {
    DomainSpecific,
    Router,
    General,
}

impl LayerClass {
    pub const ALL: [LayerClass; 3] = [LayerClass::DomainSpecific, LayerClass::Router, LayerClass::General];

    /// Default hybrid precision: 4-bit domain layers, 6-bit router, 8-bit general.
    pub fn default_bits(self) -> u32 {
        match self {
            LayerClass::DomainSpecific => 4,
            LayerClass::Router => 6,
            LayerClass::General => 8,
        }
    }
}

impl fmt::Display for LayerClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerClass::DomainSpecific => "domain_specific",
            LayerClass::Router => "router",
            LayerClass::General => "general",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionEntry {
    pub class: LayerClass,
    pub params: u64,
    pub bits: u32,
}

/// Per-layer-class bit-width assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrecisionMap {
    pub entries: Vec<PrecisionEntry>,
}

impl Default for PrecisionMap {
    fn default() -> Self {
        Self {
            entries: LayerClass::ALL
                .iter()
                .map(|&class| PrecisionEntry {
                    class,
                    params: 0,
                    bits: class.default_bits(),
                })
                .collect(),
        }
    }
}

impl PrecisionMap {
    pub fn new(entries: Vec<PrecisionEntry>) -> Self {
        Self { entries }
    }

    /// Checks every bit-width. With `strict`, only the hybrid widths {4, 6, 8}
    /// are accepted; otherwise anything in `1..=32`.
    pub fn validate(&self, strict: bool) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            let ok = if strict {
                matches!(e.bits, 4 | 6 | 8)
            } else {
                (MIN_BITS..=MAX_BITS).contains(&e.bits)
            };
            if !ok {
                return Err(GemError::config(
                    format!("precision_map[{i}].bits"),
                    format!("{} is not an allowed bit-width", e.bits),
                ));
            }
        }
        Ok(())
    }

    /// Bit-width of the first entry for `class`, falling back to the class default.
    pub fn bits_for(&self, class: LayerClass) -> u32 {
        self.entries
            .iter()
            .find(|e| e.class == class)
            .map(|e| e.bits)
            .unwrap_or_else(|| class.default_bits())
    }

    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    /// The reference 80M-parameter split: 40M domain-specific, 20M general, 20M router.
    pub fn reference_80m() -> Self {
        Self::new(vec![
            PrecisionEntry { class: LayerClass::DomainSpecific, params: 40_000_000, bits: 4 },
            PrecisionEntry { class: LayerClass::General, params: 20_000_000, bits: 8 },
            PrecisionEntry { class: LayerClass::Router, params: 20_000_000, bits: 6 },
        ])
    }
}

/// Storage for `param_count` values at `bits` bits each, in bytes.
///
/// Integer arithmetic is used for the bit total, so the result is exact
/// whenever it is representable in an `f64`.
pub fn memory_bytes(param_count: u64, bits: u32) -> Result<f64> {
    if bits < MIN_BITS {
        return Err(GemError::InvalidBitWidth(bits));
    }
    let total_bits = param_count as u128 * bits as u128;
    if total_bits % 8 == 0 {
        Ok((total_bits / 8) as f64)
    } else {
        Ok(total_bits as f64 / 8.0)
    }
}

pub fn hybrid_memory(pm: &PrecisionMap) -> Result<f64> {
    let total_bits: u128 = pm
        .entries
        .iter()
        .map(|e| {
            if e.bits < MIN_BITS {
                Err(GemError::InvalidBitWidth(e.bits))
            } else {
                Ok(e.params as u128 * e.bits as u128)
            }
        })
        .sum::<Result<u128>>()?;
    Ok(if total_bits % 8 == 0 {
        (total_bits / 8) as f64
    } else {
        total_bits as f64 / 8.0
    })
}

/// Components of the composite training objective
/// `task + λ_q · Σ‖W − Q(W)‖² + λ_kd · kd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QakpLossParts {
    pub task_loss: f64,
    pub quant_penalty: f64,
    pub kd_loss: f64,
    #[serde(default = "default_lambda_quant")]
    pub lambda_quant: f64,
    #[serde(default = "default_lambda_kd")]
    pub lambda_kd: f64,
}

fn default_lambda_quant() -> f64 {
    DEFAULT_LAMBDA_QUANT
}

fn default_lambda_kd() -> f64 {
    DEFAULT_LAMBDA_KD
}

impl QakpLossParts {
    /// Parts with the default coefficients.
    pub fn new(task_loss: f64, quant_penalty: f64, kd_loss: f64) -> Self {
        Self {
            task_loss,
            quant_penalty,
            kd_loss,
            lambda_quant: DEFAULT_LAMBDA_QUANT,
            lambda_kd: DEFAULT_LAMBDA_KD,
        }
    }

    pub fn with_lambdas(mut self, lambda_quant: f64, lambda_kd: f64) -> Self {
        self.lambda_quant = lambda_quant;
        self.lambda_kd = lambda_kd;
        self
    }

    pub fn total(&self) -> Result<f64> {
        qakp_loss(self)
    }
}

pub fn qakp_loss(parts: &QakpLossParts) -> Result<f64> {
    for (name, value) in [
        ("task_loss", parts.task_loss),
        ("quant_penalty", parts.quant_penalty),
        ("kd_loss", parts.kd_loss),
    ] {
        // NaN fails this comparison too.
        if !(value >= 0.0) {
            return Err(GemError::NegativeLoss { name, value });
        }
    }
    Ok(parts.task_loss + parts.lambda_quant * parts.quant_penalty + parts.lambda_kd * parts.kd_loss)
}

/// Analytic performance perturbation `σ² / b²` (unit proportionality constant).
///
/// This is the modeled `1/b²` law, not the empirical error of [`Quantizer`];
/// see [`empirical_quant_mse`] for the latter.
pub fn quant_noise_model(sigma: f64, bits: u32) -> Result<f64> {
    if bits < MIN_BITS {
        return Err(GemError::InvalidBitWidth(bits));
    }
    if !sigma.is_finite() {
        return Err(GemError::NonFinite { index: 0 });
    }
    let b = bits as f64;
    Ok(sigma * sigma / (b * b))
}

/// Lower bound `c · CR / √N` on the generalization gap.
pub fn gg_lower_bound(c: f64, compression_ratio: f64, capacity: u64) -> Result<f64> {
    if capacity == 0 {
        return Err(GemError::ZeroCapacity);
    }
    if compression_ratio < 0.0 {
        return Err(GemError::InvalidArgument {
            name: "compression_ratio",
            reason: format!("{compression_ratio} is negative"),
        });
    }
    Ok(c * compression_ratio / (capacity as f64).sqrt())
}

/// Mean squared quantization error of `sample_count` values drawn uniformly
/// from `[-1, 1]` with a unit-range quantizer.
pub fn empirical_quant_mse(bits: u32, sample_count: usize, seed: u64) -> Result<f64> {
    if sample_count == 0 {
        return Err(GemError::InvalidArgument {
            name: "sample_count",
            reason: "must be at least 1".into(),
        });
    }
    let q = Quantizer::new(bits, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sum: f64 = (0..sample_count)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..=1.0);
            let e = v - q.quantize_value(v);
            e * e
        })
        .sum();
    Ok(sum / sample_count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_is_always_a_level() {
        for bits in 1..=32 {
            let q = Quantizer::new(bits, 1.0).unwrap();
            assert_eq!(uniform_quantize(&[0.0], &q).unwrap(), vec![0.0]);
        }
    }

    #[test]
    fn two_bit_rounding() {
        // Δ = 2/3, 0.7/Δ = 1.05 rounds to code 1.
        let q = Quantizer::new(2, 1.0).unwrap();
        assert_relative_eq!(q.step(), 2.0 / 3.0);
        let out = uniform_quantize(&[0.7], &q).unwrap();
        assert_relative_eq!(out[0], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn sixteen_bits_is_near_identity() {
        let q = Quantizer::new(16, 1.0).unwrap();
        let out = uniform_quantize(&[0.5], &q).unwrap();
        assert!((out[0] - 0.5).abs() <= 2f64.powi(-14));
    }

    #[test]
    fn one_bit_has_a_single_level() {
        let q = Quantizer::new(1, 1.0).unwrap();
        assert_eq!(q.levels(), 1);
        let out = uniform_quantize(&[-1.0, -0.3, 0.9, 1.0], &q).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn range_endpoints_stay_inside() {
        let q = Quantizer::new(2, 1.0).unwrap();
        let out = uniform_quantize(&[1.0, -1.0, 5.0], &q).unwrap();
        assert_relative_eq!(out[0], 2.0 / 3.0);
        assert_relative_eq!(out[1], -2.0 / 3.0);
        assert_relative_eq!(out[2], 2.0 / 3.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let q = Quantizer::new(4, 1.0).unwrap();
        let err = uniform_quantize(&[0.1, f64::NAN], &q).unwrap_err();
        assert!(err.to_string().contains("non-finite value"));
        let err = Quantizer::new(0, 1.0).unwrap_err();
        assert!(err.to_string().contains("invalid bit-width"));
        assert!(Quantizer::new(33, 1.0).is_err());
        assert!(Quantizer::new(4, 0.0).is_err());
        assert!(Quantizer::new(4, f64::INFINITY).is_err());
    }

    #[test]
    fn calibration_uses_max_abs() {
        let q = Quantizer::calibrated(8, [0.25, -3.0, 1.0].iter()).unwrap();
        assert_eq!(q.range_max(), 3.0);
        let q = Quantizer::calibrated(8, [0.0, 0.0].iter()).unwrap();
        assert_eq!(q.range_max(), 1.0);
    }

    #[test]
    fn memory_footprints() {
        assert_eq!(memory_bytes(10_500_000, 32).unwrap(), 42.0 * MB);
        assert_eq!(memory_bytes(0, 4).unwrap(), 0.0);
        assert_eq!(memory_bytes(10_500_000, 4).unwrap(), 5.25 * MB);
        assert_eq!(memory_bytes(3, 3).unwrap(), 1.125);
        assert!(memory_bytes(1, 0).is_err());
    }

    #[test]
    fn hybrid_memory_examples() {
        assert_eq!(hybrid_memory(&PrecisionMap::reference_80m()).unwrap(), 55.0 * MB);
        let single = PrecisionMap::new(vec![PrecisionEntry { class: LayerClass::General, params: 8, bits: 8 }]);
        assert_eq!(hybrid_memory(&single).unwrap(), 8.0);
        let two = PrecisionMap::new(vec![
            PrecisionEntry { class: LayerClass::DomainSpecific, params: 10_000_000, bits: 4 },
            PrecisionEntry { class: LayerClass::Router, params: 10_000_000, bits: 6 },
        ]);
        assert_eq!(hybrid_memory(&two).unwrap(), 12.5 * MB);
    }

    #[test]
    fn precision_map_lookup_and_validation() {
        let pm = PrecisionMap::default();
        assert_eq!(pm.bits_for(LayerClass::DomainSpecific), 4);
        assert_eq!(pm.bits_for(LayerClass::Router), 6);
        assert_eq!(pm.bits_for(LayerClass::General), 8);
        assert!(pm.validate(true).is_ok());
        let odd = PrecisionMap::new(vec![PrecisionEntry { class: LayerClass::General, params: 1, bits: 5 }]);
        assert!(odd.validate(false).is_ok());
        let err = odd.validate(true).unwrap_err();
        assert!(err.to_string().contains("precision_map[0].bits"));
    }

    #[test]
    fn composite_loss() {
        assert_eq!(qakp_loss(&QakpLossParts::new(1.0, 0.0, 0.0)).unwrap(), 1.0);
        assert_relative_eq!(qakp_loss(&QakpLossParts::new(2.0, 1.0, 4.0)).unwrap(), 4.1, epsilon = 1e-12);
        let p = QakpLossParts::new(0.0, 10.0, 0.0).with_lambdas(0.1, 0.0);
        assert_relative_eq!(qakp_loss(&p).unwrap(), 1.0, epsilon = 1e-12);
        let p = QakpLossParts::new(3.5, 7.0, 9.0).with_lambdas(0.0, 0.0);
        assert_eq!(qakp_loss(&p).unwrap(), 3.5);
        let err = qakp_loss(&QakpLossParts::new(1.0, -0.1, 0.0)).unwrap_err();
        assert!(err.to_string().contains("negative loss component"));
    }

    #[test]
    fn noise_model_follows_inverse_square() {
        let r = quant_noise_model(1.0, 4).unwrap() / quant_noise_model(1.0, 8).unwrap();
        assert_relative_eq!(r, 4.0);
        assert_eq!(quant_noise_model(0.0, 5).unwrap(), 0.0);
        assert_relative_eq!(quant_noise_model(2.0, 2).unwrap(), 1.0);
        assert!(quant_noise_model(1.0, 0).is_err());
    }

    #[test]
    fn gg_bound() {
        assert_relative_eq!(
            gg_lower_bound(1.0, 8.0, 10_500_000).unwrap(),
            8.0 / 10_500_000f64.sqrt(),
            max_relative = 1e-12
        );
        assert_relative_eq!(gg_lower_bound(1.0, 8.0, 10_500_000).unwrap(), 0.002469, epsilon = 1e-6);
        assert_eq!(gg_lower_bound(1.0, 0.0, 77).unwrap(), 0.0);
        assert_eq!(gg_lower_bound(2.0, 4.0, 64).unwrap(), 1.0);
        let err = gg_lower_bound(1.0, 1.0, 0).unwrap_err();
        assert!(err.to_string().contains("zero capacity"));
    }

    #[test]
    fn empirical_mse_basics() {
        assert!(empirical_quant_mse(16, 100_000, 1).unwrap() < 1e-7);
        assert!(empirical_quant_mse(1, 10_000, 3).unwrap() > empirical_quant_mse(8, 10_000, 3).unwrap());
        assert_eq!(empirical_quant_mse(6, 5000, 9).unwrap(), empirical_quant_mse(6, 5000, 9).unwrap());
        assert!(empirical_quant_mse(4, 0, 1).is_err());
    }

    #[test]
    fn four_bit_mse_matches_uniform_noise() {
        let delta = 2.0 / 15.0;
        let expected = delta * delta / 12.0;
        let mse = empirical_quant_mse(4, 100_000, 7).unwrap();
        assert!((mse - expected).abs() / expected < 0.05, "mse {mse} vs {expected}");
    }
}
