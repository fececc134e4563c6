//! Threshold-gated dynamic token routing.
//!
//! Each token is encoded independently by a small post-norm transformer stack
//! with fake-quantized weights, projected to per-domain logits, and sent to the
//! argmax domain pathway only when that domain's probability strictly exceeds
//! the threshold `tau`. Everything else goes to the general pathway.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};
use crate::quant::fake_quantize;

/// Names of the eight routing domains, in index order.
pub const DOMAIN_NAMES: [&str; 8] = [
    "healthcare",
    "legal",
    "finance",
    "stem",
    "commonsense",
    "conversational",
    "multilingual",
    "domain_adaptive",
];

/// Parameter count claimed for the reference router encoder.
pub const REFERENCE_ROUTER_PARAMS: f64 = 7.4e6;

/// Logit scale of the freshly initialised domain projection. Unit-variance
/// hidden states give logits with this standard deviation.
const PROJECTION_GAIN: f64 = 3.0;
const LAYER_NORM_EPS: f64 = 1e-12;

pub fn domain_name(index: usize) -> String {
    DOMAIN_NAMES
        .get(index)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("domain_{index}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub domains: usize,
    pub tau: f64,
    pub vocab_size: u32,
    /// FFN width as a multiple of `hidden`.
    pub ffn_mult: usize,
    /// Bit-width of the encoder weights; `None` keeps full precision.
    pub encoder_bits: Option<u32>,
    /// Bit-width of the domain projection; `None` keeps full precision.
    pub projection_bits: Option<u32>,
    pub seed: u64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            hidden: 256,
            heads: 12,
            domains: 8,
            tau: 0.7,
            vocab_size: 30_522,
            ffn_mult: 4,
            encoder_bits: Some(4),
            projection_bits: Some(6),
            seed: 42,
        }
    }
}

impl RouterConfig {
    /// Small router used inside the toy model.
    pub fn toy(vocab_size: u32, hidden: usize, domains: usize, tau: f64, seed: u64) -> Self {
        Self {
            layers: 1,
            hidden,
            heads: 4,
            domains,
            tau,
            vocab_size,
            ffn_mult: 2,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(GemError::config("router.hidden", "must be positive"));
        }
        if self.heads == 0 {
            return Err(GemError::config("router.heads", "must be positive"));
        }
        if self.domains < 2 {
            return Err(GemError::config("router.domains", "need at least 2 domains"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(GemError::config("router.tau", format!("{} is outside (0, 1]", self.tau)));
        }
        if self.vocab_size == 0 {
            return Err(GemError::config("router.vocab_size", "must be positive"));
        }
        if self.ffn_mult == 0 {
            return Err(GemError::config("router.ffn_mult", "must be positive"));
        }
        for (field, bits) in [("router.encoder_bits", self.encoder_bits), ("router.projection_bits", self.projection_bits)] {
            if let Some(b) = bits {
                if !(1..=32).contains(&b) {
                    return Err(GemError::config(field, format!("{b} is outside 1..=32")));
                }
            }
        }
        Ok(())
    }

    /// Number of parameters the encoder and projection actually hold.
    /// Token embeddings are hash-derived and not stored.
    pub fn param_count(&self) -> u64 {
        let h = self.hidden as u64;
        let f = (self.hidden * self.ffn_mult) as u64;
        let attention = 4 * (h * h + h);
        let ffn = h * f + f + f * h + h;
        let norms = 4 * h;
        self.layers as u64 * (attention + ffn + norms) + self.domains as u64 * h
    }
}

/// Router compute per token: `layers × hidden² × heads × 2`.
pub fn router_flops(config: &RouterConfig) -> u64 {
    let h = config.hidden as u64;
    config.layers as u64 * h * h * config.heads as u64 * 2
}

/// Scales a FLOP count by the fraction of parameters kept after pruning.
pub fn pruned_router_flops(base_flops: f64, params_before: f64, params_after: f64) -> Result<f64> {
    if params_before <= 0.0 {
        return Err(GemError::ZeroDenominator("pruned_router_flops"));
    }
    Ok(base_flops * (params_after / params_before))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderLayer {
    wq: Array2<f64>,
    bq: Array1<f64>,
    wk: Array2<f64>,
    bk: Array1<f64>,
    wv: Array2<f64>,
    bv: Array1<f64>,
    wo: Array2<f64>,
    bo: Array1<f64>,
    ln1_gamma: Array1<f64>,
    ln1_beta: Array1<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    ln2_gamma: Array1<f64>,
    ln2_beta: Array1<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

fn maybe_quantize(w: Array2<f64>, bits: Option<u32>) -> Result<Array2<f64>> {
    match bits {
        Some(b) => fake_quantize(&w, b),
        None => Ok(w),
    }
}

fn layer_norm(x: &Array1<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> Array1<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.mapv(|v| (v - mean) * inv) * gamma + beta
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

impl EncoderLayer {
    fn new(rng: &mut ChaCha8Rng, hidden: usize, ffn: usize, bits: Option<u32>) -> Result<Self> {
        let s = 1.0 / (hidden as f64).sqrt();
        let sf = 1.0 / (ffn as f64).sqrt();
        Ok(Self {
            wq: maybe_quantize(gaussian(rng, hidden, hidden, s), bits)?,
            bq: Array1::zeros(hidden),
            wk: maybe_quantize(gaussian(rng, hidden, hidden, s), bits)?,
            bk: Array1::zeros(hidden),
            wv: maybe_quantize(gaussian(rng, hidden, hidden, s), bits)?,
            bv: Array1::zeros(hidden),
            wo: maybe_quantize(gaussian(rng, hidden, hidden, s), bits)?,
            bo: Array1::zeros(hidden),
            ln1_gamma: Array1::ones(hidden),
            ln1_beta: Array1::zeros(hidden),
            w1: maybe_quantize(gaussian(rng, hidden, ffn, s), bits)?,
            b1: Array1::zeros(ffn),
            w2: maybe_quantize(gaussian(rng, ffn, hidden, sf), bits)?,
            b2: Array1::zeros(hidden),
            ln2_gamma: Array1::ones(hidden),
            ln2_beta: Array1::zeros(hidden),
        })
    }

    fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        // Each token is encoded on its own, so self-attention sees a single key
        // and every attention weight is exactly 1: the context vector is the
        // value projection. The query and key projections do not affect the result.
        let value = x.dot(&self.wv) + &self.bv;
        let attended = value.dot(&self.wo) + &self.bo;
        let h = layer_norm(&(x + &attended), &self.ln1_gamma, &self.ln1_beta);
        let inner = (h.dot(&self.w1) + &self.b1).mapv(gelu);
        let ffn = inner.dot(&self.w2) + &self.b2;
        layer_norm(&(&h + &ffn), &self.ln2_gamma, &self.ln2_beta)
    }
}

/// Frozen parameters of the token router: encoder stack plus domain projection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouterEncoder {
    config: RouterConfig,
    layers: Vec<EncoderLayer>,
    projection: Array2<f64>,
}

impl RouterEncoder {
    pub fn new(config: RouterConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // Stream 0 holds weights; token embeddings use streams 1.. (see `embed`).
        rng.set_stream(0);
        let ffn = config.hidden * config.ffn_mult;
        let layers = (0..config.layers)
            .map(|_| EncoderLayer::new(&mut rng, config.hidden, ffn, config.encoder_bits))
            .collect::<Result<Vec<_>>>()?;
        let projection = maybe_quantize(
            gaussian(&mut rng, config.domains, config.hidden, PROJECTION_GAIN / (config.hidden as f64).sqrt()),
            config.projection_bits,
        )?;
        Ok(Self { config, layers, projection })
    }

    pub fn config(&self) -> &RouterConfig {
        &self.config
    }

    /// Domain projection, `domains × hidden`.
    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }

    pub fn param_count(&self) -> u64 {
        let layer: usize = self
            .layers
            .iter()
            .map(|l| {
                l.wq.len() + l.bq.len() + l.wk.len() + l.bk.len() + l.wv.len() + l.bv.len() + l.wo.len()
                    + l.bo.len() + l.ln1_gamma.len() + l.ln1_beta.len() + l.w1.len() + l.b1.len() + l.w2.len()
                    + l.b2.len() + l.ln2_gamma.len() + l.ln2_beta.len()
            })
            .sum();
        (layer + self.projection.len()) as u64
    }

    /// Hash-style toy embedding: a standard-normal vector drawn from a
    /// per-token ChaCha stream.
    fn embed(&self, token_id: u32) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(token_id as u64 + 1);
        Array1::from_shape_simple_fn(self.config.hidden, || StandardNormal.sample(&mut rng))
    }

    /// Encodes one token into a `hidden`-dimensional vector.
    pub fn encode_token(&self, token_id: u32) -> Result<Array1<f64>> {
        if token_id >= self.config.vocab_size {
            return Err(GemError::OutOfVocabulary {
                token: token_id,
                vocab_size: self.config.vocab_size,
            });
        }
        let mut x = self.embed(token_id);
        for layer in &self.layers {
            x = layer.forward(&x);
        }
        Ok(x)
    }

    pub fn token_probs(&self, token_id: u32) -> Result<DomainProbabilities> {
        let e = self.encode_token(token_id)?;
        domain_probs(e.view(), &self.projection)
    }
}

/// Softmax output over the routing domains for one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainProbabilities {
    pub probs: Vec<f64>,
}

impl DomainProbabilities {
    /// Numerically stable softmax of raw logits.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(GemError::EmptyInput);
        }
        if let Some(index) = logits.iter().position(|v| !v.is_finite()) {
            return Err(GemError::NonFinite { index });
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Ok(Self {
            probs: exps.into_iter().map(|e| e / sum).collect(),
        })
    }

    /// Maximum probability and its index; ties go to the lowest index.
    pub fn argmax(&self) -> (usize, f64) {
        let mut best = (0, self.probs[0]);
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > best.1 {
                best = (i, p);
            }
        }
        best
    }
}

pub fn domain_probs(embedding: ArrayView1<f64>, projection: &Array2<f64>) -> Result<DomainProbabilities> {
    if projection.ncols() != embedding.len() {
        return Err(GemError::dims(
            format!("embedding of length {}", projection.ncols()),
            format!("length {}", embedding.len()),
        ));
    }
    let logits = projection.dot(&embedding);
    DomainProbabilities::from_logits(logits.as_slice().expect("contiguous"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteTarget {
    Domain(usize),
    General,
}

impl fmt::Display for RouteTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RouteTarget::Domain(d) => f.write_str(&domain_name(*d)),
            RouteTarget::General => f.write_str("general"),
        }
    }
}

/// One routing-log record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub token_index: usize,
    pub max_prob: f64,
    pub target: RouteTarget,
}

/// Routes to the argmax domain when its probability is strictly above `tau`.
pub fn route(probs: &DomainProbabilities, tau: f64, token_index: usize) -> RoutingDecision {
    let (domain, max_prob) = probs.argmax();
    let target = if max_prob > tau {
        RouteTarget::Domain(domain)
    } else {
        RouteTarget::General
    };
    RoutingDecision {
        token_index,
        max_prob,
        target,
    }
}

/// Routes every token independently; decisions come back in input order.
pub fn route_sequence(tokens: &[u32], tau: f64, encoder: &RouterEncoder) -> Result<Vec<RoutingDecision>> {
    if tokens.is_empty() {
        return Err(GemError::EmptyInput);
    }
    tokens
        .par_iter()
        .enumerate()
        .map(|(i, &t)| encoder.token_probs(t).map(|p| route(&p, tau, i)))
        .collect()
}

/// Token counts per domain followed by the general pathway.
pub fn domain_histogram(decisions: &[RoutingDecision], domains: usize) -> Vec<(String, usize)> {
    let mut counts = vec![0usize; domains + 1];
    for d in decisions {
        match d.target {
            RouteTarget::Domain(i) if i < domains => counts[i] += 1,
            _ => counts[domains] += 1,
        }
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (if i == domains { "general".to_string() } else { domain_name(i) }, c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn probs_with_max(index: usize, max: f64, domains: usize) -> DomainProbabilities {
        let rest = (1.0 - max) / (domains - 1) as f64;
        let mut probs = vec![rest; domains];
        probs[index] = max;
        DomainProbabilities { probs }
    }

    #[test]
    fn flops_match_reference_shape() {
        assert_eq!(router_flops(&RouterConfig::default()), 9_437_184);
        let zero = RouterConfig { layers: 0, ..RouterConfig::default() };
        assert_eq!(router_flops(&zero), 0);
    }

    #[test]
    fn pruning_scales_flops() {
        let f = pruned_router_flops(9.4e6, 7.4e6, 5e6).unwrap();
        assert!((f / 1e6 - 6.35).abs() < 0.01);
        assert_eq!(pruned_router_flops(123.0, 7.0, 7.0).unwrap(), 123.0);
        assert_relative_eq!(pruned_router_flops(100.0, 10.0, 1.0).unwrap(), 10.0);
        assert!(pruned_router_flops(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn threshold_rule() {
        let d = route(&probs_with_max(0, 0.85, 8), 0.7, 0);
        assert_eq!(d.target, RouteTarget::Domain(0));
        let d = route(&probs_with_max(3, 0.62, 8), 0.7, 1);
        assert_eq!(d.target, RouteTarget::General);
        let uniform = DomainProbabilities { probs: vec![0.125; 8] };
        assert_eq!(route(&uniform, 0.7, 0).target, RouteTarget::General);
        // Equality falls to general.
        let d = route(&probs_with_max(2, 0.7, 8), 0.7, 0);
        assert_eq!(d.target, RouteTarget::General);
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        let p = DomainProbabilities { probs: vec![0.1, 0.45, 0.45] };
        assert_eq!(p.argmax().0, 1);
        assert_eq!(route(&p, 0.4, 0).target, RouteTarget::Domain(1));
    }

    #[test]
    fn softmax_examples() {
        let zero = Array1::<f64>::zeros(4);
        let proj = Array2::<f64>::from_elem((8, 4), 0.3);
        let p = domain_probs(zero.view(), &proj).unwrap();
        for v in &p.probs {
            assert_relative_eq!(*v, 0.125, epsilon = 1e-15);
        }
        let mut logits = vec![0.0; 8];
        logits[0] = 1.0;
        let p = DomainProbabilities::from_logits(&logits).unwrap();
        let e = std::f64::consts::E;
        assert_relative_eq!(p.probs[0], e / (e + 7.0), epsilon = 1e-15);
        assert_relative_eq!(p.probs[0], 0.2797, epsilon = 1e-4);
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn projection_dimension_mismatch() {
        let e = Array1::<f64>::zeros(5);
        let proj = Array2::<f64>::zeros((8, 4));
        assert!(matches!(domain_probs(e.view(), &proj), Err(GemError::DimensionMismatch { .. })));
    }

    #[test]
    fn encoder_shape_and_determinism() {
        let enc = RouterEncoder::new(RouterConfig::default()).unwrap();
        let a = enc.encode_token(7).unwrap();
        assert_eq!(a.len(), 256);
        assert_eq!(a, enc.encode_token(7).unwrap());
        assert_ne!(a, enc.encode_token(8).unwrap());
        let err = enc.encode_token(30_522).unwrap_err();
        assert!(err.to_string().contains("out-of-vocabulary"));
    }

    #[test]
    fn reported_param_count_matches_constructed() {
        let cfg = RouterConfig::default();
        let enc = RouterEncoder::new(cfg.clone()).unwrap();
        assert_eq!(enc.param_count(), cfg.param_count());
    }

    #[test]
    fn sequence_routing_preserves_order() {
        let enc = RouterEncoder::new(RouterConfig::toy(64, 32, 8, 0.7, 3)).unwrap();
        let tokens = [5, 9, 5, 60, 1];
        let out = route_sequence(&tokens, 0.7, &enc).unwrap();
        assert_eq!(out.len(), 5);
        for (i, d) in out.iter().enumerate() {
            assert_eq!(d.token_index, i);
        }
        assert_eq!(out[0].target, out[2].target);
        assert_eq!(out[0].max_prob, out[2].max_prob);
        assert!(matches!(route_sequence(&[], 0.7, &enc), Err(GemError::EmptyInput)));
    }

    #[test]
    fn histogram_counts_every_token() {
        let decisions = vec![
            RoutingDecision { token_index: 0, max_prob: 0.9, target: RouteTarget::Domain(0) },
            RoutingDecision { token_index: 1, max_prob: 0.5, target: RouteTarget::General },
            RoutingDecision { token_index: 2, max_prob: 0.8, target: RouteTarget::Domain(0) },
        ];
        let h = domain_histogram(&decisions, 8);
        assert_eq!(h.len(), 9);
        assert_eq!(h[0], ("healthcare".to_string(), 2));
        assert_eq!(h[8], ("general".to_string(), 1));
    }

    #[test]
    fn config_validation_names_the_field() {
        let bad = RouterConfig { tau: 0.0, ..RouterConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("router.tau"));
        let bad = RouterConfig { domains: 1, ..RouterConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("router.domains"));
    }
}
