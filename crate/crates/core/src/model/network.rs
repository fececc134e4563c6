//! Toy-scale model assembly: embeddings, frozen token router, one stack of
//! transformer blocks per pathway (eight domain pathways plus the general
//! one), clustered sparse attention inside each pathway and a shared
//! classification head.
//!
//! Tokens are processed by the pathway they are routed to; attention only
//! sees tokens of the same pathway, and within a pathway only tokens of the
//! same cluster. Outputs are reassembled by position. Sequence logits are the
//! mean of the per-token logits.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::GemConfig;
use crate::error::{GemError, Result};
use crate::quant::{fake_quantize, LayerClass, PrecisionEntry, PrecisionMap};
use crate::router::{route, DomainProbabilities, RouteTarget, RouterConfig, RouterEncoder, RoutingDecision};
use crate::scar::{kmeans_cosine, masked_attention_with, ClusterPlan, SparsityMask};

/// Bit-width of the router's encoder stack when quantization is on.
pub const ROUTER_ENCODER_BITS: u32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub class: LayerClass,
    /// Weight matrices are fake-quantized, weight-decayed and penalised; biases are not.
    pub is_weight: bool,
    pub value: Array2<f64>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockIdx {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embedding: usize,
    /// Indexed by pathway; the last pathway is the general one.
    pub pathways: Vec<Vec<BlockIdx>>,
    pub head_w: usize,
    pub head_b: usize,
}

pub fn pathway_name(pathway: usize, domains: usize) -> String {
    if pathway == domains {
        "general".to_string()
    } else {
        crate::router::domain_name(pathway)
    }
}

pub(crate) struct BlockCache {
    pub h: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub a: Array2<f64>,
    pub c: Array2<f64>,
    pub u: Array2<f64>,
    pub g: Array2<f64>,
    pub mask: SparsityMask,
}

pub(crate) struct GroupTrace {
    pub pathway: usize,
    pub positions: Vec<usize>,
    pub blocks: Vec<BlockCache>,
    pub plans: Vec<ClusterPlan>,
}

pub(crate) struct Trace {
    pub tokens: Vec<u32>,
    pub routing: Vec<RoutingDecision>,
    pub groups: Vec<GroupTrace>,
    pub hidden: Array2<f64>,
    pub token_logits: Array2<f64>,
    pub seq_logits: Array1<f64>,
}

impl Trace {
    /// Masks of every block, grouped like `groups`, for replaying a forward
    /// pass with the cluster structure held fixed.
    pub fn masks(&self) -> Vec<Vec<SparsityMask>> {
        self.groups
            .iter()
            .map(|g| g.blocks.iter().map(|b| b.mask.clone()).collect())
            .collect()
    }
}

/// Cluster plan of one block of one pathway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwayPlan {
    pub pathway: String,
    pub layer: usize,
    /// Sequence positions processed by this pathway, in order.
    pub positions: Vec<usize>,
    pub plan: ClusterPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardOutput {
    /// Per-token class distributions, `n × classes`.
    pub token_probs: Array2<f64>,
    /// Class distribution of the mean-pooled sequence logits.
    pub sequence_probs: Vec<f64>,
    pub routing: Vec<RoutingDecision>,
    pub cluster_plans: Vec<PathwayPlan>,
}

pub(crate) fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e = logits.mapv(|x| (x - max).exp());
    let s = e.sum();
    e / s
}

#[derive(Debug, Clone)]
pub struct GemModel {
    config: GemConfig,
    params: Vec<Param>,
    pub(crate) layout: Layout,
    router: RouterEncoder,
    route_cache: Vec<DomainProbabilities>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

impl GemModel {
    pub fn new(config: GemConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let d = config.embed_dim;
        let f = config.ffn_dim;
        let mut params = Vec::new();
        let mut push = |name: String, class, is_weight, value| {
            params.push(Param { name, class, is_weight, value });
            params.len() - 1
        };
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        let embedding = push(
            "embedding".into(),
            LayerClass::General,
            true,
            gaussian(&mut rng, config.vocab_size as usize, d, 1.0),
        );
        let mut pathways = Vec::with_capacity(config.domains + 1);
        for p in 0..=config.domains {
            let class = if p == config.domains { LayerClass::General } else { LayerClass::DomainSpecific };
            let prefix = format!("pathway.{}", pathway_name(p, config.domains));
            let blocks = (0..config.pathway_layers)
                .map(|l| {
                    let name = |t: &str| format!("{prefix}.block{l}.{t}");
                    BlockIdx {
                        wq: push(name("wq"), class, true, gaussian(&mut rng, d, d, sd)),
                        wk: push(name("wk"), class, true, gaussian(&mut rng, d, d, sd)),
                        wv: push(name("wv"), class, true, gaussian(&mut rng, d, d, sd)),
                        wo: push(name("wo"), class, true, gaussian(&mut rng, d, d, sd)),
                        w1: push(name("w1"), class, true, gaussian(&mut rng, d, f, sd)),
                        b1: push(name("b1"), class, false, Array2::zeros((1, f))),
                        w2: push(name("w2"), class, true, gaussian(&mut rng, f, d, sf)),
                        b2: push(name("b2"), class, false, Array2::zeros((1, d))),
                    }
                })
                .collect();
            pathways.push(blocks);
        }
        let head_w = push(
            "head.w".into(),
            LayerClass::General,
            true,
            gaussian(&mut rng, d, config.num_classes, sd),
        );
        let head_b = push("head.b".into(), LayerClass::General, false, Array2::zeros((1, config.num_classes)));
        let layout = Layout { embedding, pathways, head_w, head_b };
        let router = RouterEncoder::new(Self::router_config(&config))?;
        let route_cache = (0..config.vocab_size)
            .map(|t| router.token_probs(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, params, layout, router, route_cache })
    }

    fn router_config(config: &GemConfig) -> RouterConfig {
        RouterConfig {
            layers: config.router_layers,
            encoder_bits: config.quantize.then_some(ROUTER_ENCODER_BITS),
            projection_bits: config
                .quantize
                .then(|| config.precision_map.bits_for(LayerClass::Router)),
            ..RouterConfig::toy(
                config.vocab_size,
                config.router_hidden,
                config.domains,
                config.tau,
                config.seed ^ 0x5EED_0001,
            )
        }
    }

    pub fn config(&self) -> &GemConfig {
        &self.config
    }

    pub fn router(&self) -> &RouterEncoder {
        &self.router
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Changing the threshold only changes routing, never parameters.
    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(GemError::config("model.tau", format!("{tau} is outside (0, 1]")));
        }
        self.config.tau = tau;
        Ok(())
    }

    /// Trainable parameter count (router excluded).
    pub fn trainable_param_count(&self) -> u64 {
        self.params.iter().map(|p| p.value.len() as u64).sum()
    }

    /// Actual per-class parameter counts with the configured bit-widths.
    /// The router's frozen parameters are reported under the router class.
    pub fn precision_map(&self) -> PrecisionMap {
        let entries = LayerClass::ALL
            .iter()
            .map(|&class| {
                let mut params: u64 = self
                    .params
                    .iter()
                    .filter(|p| p.class == class)
                    .map(|p| p.value.len() as u64)
                    .sum();
                if class == LayerClass::Router {
                    params += self.router.param_count();
                }
                PrecisionEntry { class, params, bits: self.config.precision_map.bits_for(class) }
            })
            .collect();
        PrecisionMap::new(entries)
    }

    /// Copies the general pathway's weights into every domain pathway.
    pub fn tie_pathways_to_general(&mut self) {
        let general = self.layout.pathways[self.config.domains].clone();
        for p in 0..self.config.domains {
            for (dst, src) in self.layout.pathways[p].clone().iter().zip(&general) {
                for (di, si) in [
                    (dst.wq, src.wq),
                    (dst.wk, src.wk),
                    (dst.wv, src.wv),
                    (dst.wo, src.wo),
                    (dst.w1, src.w1),
                    (dst.b1, src.b1),
                    (dst.w2, src.w2),
                    (dst.b2, src.b2),
                ] {
                    let v = self.params[si].value.clone();
                    self.params[di].value = v;
                }
            }
        }
    }

    /// Weights as seen by the forward pass: fake-quantized per class when
    /// quantization is on, otherwise copies of the stored values.
    pub fn effective_params(&self) -> Result<Vec<Array2<f64>>> {
        self.params
            .iter()
            .map(|p| {
                if self.config.quantize && p.is_weight {
                    fake_quantize(&p.value, self.config.precision_map.bits_for(p.class))
                } else {
                    Ok(p.value.clone())
                }
            })
            .collect()
    }

    pub fn zero_grads(&self) -> Vec<Array2<f64>> {
        self.params.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(GemError::EmptyInput);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(GemError::SequenceTooLong { len: tokens.len(), max: self.config.max_seq_len });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(GemError::OutOfVocabulary { token: t, vocab_size: self.config.vocab_size });
        }
        Ok(())
    }

    /// Routing decisions for a token sequence (identical to running the
    /// router's `route_sequence` with the model's threshold).
    pub fn route_tokens(&self, tokens: &[u32]) -> Result<Vec<RoutingDecision>> {
        self.check_tokens(tokens)?;
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| route(&self.route_cache[t as usize], self.config.tau, i))
            .collect())
    }

    fn pathway_index(&self, target: RouteTarget) -> usize {
        match target {
            RouteTarget::Domain(d) if d < self.config.domains => d,
            _ => self.config.domains,
        }
    }

    fn kmeans_seed(&self, pathway: usize, layer: usize) -> u64 {
        self.config.seed.wrapping_add((pathway * 1_000 + layer) as u64)
    }

    pub(crate) fn forward_trace(
        &self,
        eff: &[Array2<f64>],
        tokens: &[u32],
        frozen: Option<&[Vec<SparsityMask>]>,
    ) -> Result<Trace> {
        let routing = self.route_tokens(tokens)?;
        let n = tokens.len();
        let d = self.config.embed_dim;
        let emb = &eff[self.layout.embedding];
        let mut hidden = Array2::<f64>::zeros((n, d));
        for (i, &t) in tokens.iter().enumerate() {
            hidden.row_mut(i).assign(&emb.row(t as usize));
        }

        let mut groups = Vec::new();
        for p in 0..=self.config.domains {
            let positions: Vec<usize> = routing
                .iter()
                .filter(|r| self.pathway_index(r.target) == p)
                .map(|r| r.token_index)
                .collect();
            if positions.is_empty() {
                continue;
            }
            let group_index = groups.len();
            let mut h = hidden.select(Axis(0), &positions);
            let mut blocks = Vec::with_capacity(self.config.pathway_layers);
            let mut plans = Vec::new();
            for (l, idx) in self.layout.pathways[p].iter().enumerate() {
                let mask = match frozen {
                    Some(masks) => masks
                        .get(group_index)
                        .and_then(|g| g.get(l))
                        .cloned()
                        .ok_or_else(|| GemError::dims("a frozen mask per block", "missing mask"))?,
                    None => {
                        let k = self.config.scar_k.min(positions.len());
                        let plan = kmeans_cosine(h.view(), k, self.config.scar_max_iters, self.kmeans_seed(p, l))?;
                        let mask = plan.mask();
                        plans.push(plan);
                        mask
                    }
                };
                let (out, cache) = self.block_forward(eff, idx, h, mask)?;
                blocks.push(cache);
                h = out;
            }
            for (r, &pos) in positions.iter().enumerate() {
                hidden.row_mut(pos).assign(&h.row(r));
            }
            groups.push(GroupTrace { pathway: p, positions, blocks, plans });
        }

        let token_logits = hidden.dot(&eff[self.layout.head_w]) + &eff[self.layout.head_b];
        let seq_logits = token_logits.mean_axis(Axis(0)).expect("non-empty sequence");
        Ok(Trace { tokens: tokens.to_vec(), routing, groups, hidden, token_logits, seq_logits })
    }

    fn block_forward(
        &self,
        eff: &[Array2<f64>],
        idx: &BlockIdx,
        h: Array2<f64>,
        mask: SparsityMask,
    ) -> Result<(Array2<f64>, BlockCache)> {
        let q = h.dot(&eff[idx.wq]);
        let k = h.dot(&eff[idx.wk]);
        let v = h.dot(&eff[idx.wv]);
        let att = masked_attention_with(q.view(), k.view(), v.view(), &mask, self.config.mask_mode)?;
        let u = &h + &att.outputs.dot(&eff[idx.wo]);
        let g = (u.dot(&eff[idx.w1]) + &eff[idx.b1]).mapv(f64::tanh);
        let out = &u + &g.dot(&eff[idx.w2]) + &eff[idx.b2];
        Ok((out, BlockCache { h, q, k, v, a: att.weights, c: att.outputs, u, g, mask }))
    }

    /// Accumulates gradients of a loss with sequence-logit gradient `dseq`
    /// into `grads`. Gradients are taken with respect to the effective
    /// weights and applied to the stored ones (straight-through).
    pub(crate) fn backward(&self, eff: &[Array2<f64>], trace: &Trace, dseq: &Array1<f64>, grads: &mut [Array2<f64>]) {
        let n = trace.tokens.len() as f64;
        let l = &self.layout;
        let mean_h = trace.hidden.mean_axis(Axis(0)).expect("non-empty sequence");
        {
            let outer = mean_h
                .view()
                .insert_axis(Axis(1))
                .dot(&dseq.view().insert_axis(Axis(0)));
            grads[l.head_w] += &outer;
            let mut hb = grads[l.head_b].row_mut(0);
            hb += dseq;
        }
        let dh_row = eff[l.head_w].dot(dseq) / n;

        for group in &trace.groups {
            let m = group.positions.len();
            let mut dh = Array2::<f64>::zeros((m, self.config.embed_dim));
            for mut row in dh.axis_iter_mut(Axis(0)) {
                row.assign(&dh_row);
            }
            for (cache, idx) in group.blocks.iter().zip(&l.pathways[group.pathway]).rev() {
                dh = self.block_backward(eff, idx, cache, &dh, grads);
            }
            let emb = &mut grads[l.embedding];
            for (r, &pos) in group.positions.iter().enumerate() {
                let mut row = emb.row_mut(trace.tokens[pos] as usize);
                row += &dh.row(r);
            }
        }
    }

    fn block_backward(
        &self,
        eff: &[Array2<f64>],
        idx: &BlockIdx,
        c: &BlockCache,
        dout: &Array2<f64>,
        grads: &mut [Array2<f64>],
    ) -> Array2<f64> {
        let d = self.config.embed_dim;
        let scale = 1.0 / (d as f64).sqrt();

        // out = u + tanh(u·w1 + b1)·w2 + b2
        grads[idx.w2] += &c.g.t().dot(dout);
        grads[idx.b2] += &dout.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dg = dout.dot(&eff[idx.w2].t());
        let dz = &dg * &c.g.mapv(|g| 1.0 - g * g);
        grads[idx.w1] += &c.u.t().dot(&dz);
        grads[idx.b1] += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));
        let du = dout + &dz.dot(&eff[idx.w1].t());

        // u = h + (a·v)·wo
        grads[idx.wo] += &c.c.t().dot(&du);
        let dctx = du.dot(&eff[idx.wo].t());
        let mut dh = du;
        let da = dctx.dot(&c.v.t());
        let dv = c.a.t().dot(&dctx);

        // softmax rows, then the (masked) scaled scores
        let row_dot = (&da * &c.a).sum_axis(Axis(1));
        let mut ds = &c.a * &(&da - &row_dot.insert_axis(Axis(1)));
        let m = ds.nrows();
        for i in 0..m {
            for j in 0..m {
                ds[[i, j]] = if c.mask.get(i, j) { ds[[i, j]] * scale } else { 0.0 };
            }
        }
        let dq = ds.dot(&c.k);
        let dk = ds.t().dot(&c.q);
        grads[idx.wq] += &c.h.t().dot(&dq);
        grads[idx.wk] += &c.h.t().dot(&dk);
        grads[idx.wv] += &c.h.t().dot(&dv);
        dh += &dq.dot(&eff[idx.wq].t());
        dh += &dk.dot(&eff[idx.wk].t());
        dh += &dv.dot(&eff[idx.wv].t());
        dh
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardOutput> {
        let eff = self.effective_params()?;
        self.forward_with(&eff, tokens)
    }

    /// Forward pass against precomputed effective weights.
    pub fn forward_with(&self, eff: &[Array2<f64>], tokens: &[u32]) -> Result<ForwardOutput> {
        let trace = self.forward_trace(eff, tokens, None)?;
        let mut token_probs = trace.token_logits.clone();
        for mut row in token_probs.axis_iter_mut(Axis(0)) {
            let p = softmax(row.view());
            row.assign(&p);
        }
        let cluster_plans = trace
            .groups
            .into_iter()
            .flat_map(|g| {
                let name = pathway_name(g.pathway, self.config.domains);
                let positions = g.positions;
                g.plans.into_iter().enumerate().map(move |(layer, plan)| PathwayPlan {
                    pathway: name.clone(),
                    layer,
                    positions: positions.clone(),
                    plan,
                })
            })
            .collect();
        Ok(ForwardOutput {
            token_probs,
            sequence_probs: softmax(trace.seq_logits.view()).to_vec(),
            routing: trace.routing,
            cluster_plans,
        })
    }

    /// Sequence logits only.
    pub fn sequence_logits(&self, eff: &[Array2<f64>], tokens: &[u32]) -> Result<Array1<f64>> {
        Ok(self.forward_trace(eff, tokens, None)?.seq_logits)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(GemError::config(
                "checkpoint.format",
                format!("unsupported {} v{}", ckpt.format, ckpt.version),
            ));
        }
        let mut model = Self::new(ckpt.config)?;
        if model.params.len() != ckpt.params.len() {
            return Err(GemError::dims(
                format!("{} tensors", model.params.len()),
                format!("{} tensors", ckpt.params.len()),
            ));
        }
        for (dst, src) in model.params.iter_mut().zip(ckpt.params) {
            if dst.name != src.name || dst.value.dim() != src.value.dim() {
                return Err(GemError::dims(
                    format!("{} {:?}", dst.name, dst.value.dim()),
                    format!("{} {:?}", src.name, src.value.dim()),
                ));
            }
            *dst = src;
        }
        Ok(model)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, &self.checkpoint())?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::from_checkpoint(serde_json::from_reader(f)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "gem-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing model snapshot. The router is rebuilt from the embedded
/// config and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: GemConfig,
    pub params: Vec<Param>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GemConfig {
        GemConfig { vocab_size: 32, embed_dim: 8, ffn_dim: 12, num_classes: 4, ..GemConfig::default() }
    }

    #[test]
    fn single_token_distribution() {
        let m = GemModel::new(small()).unwrap();
        let out = m.forward(&[3]).unwrap();
        assert_eq!(out.token_probs.nrows(), 1);
        assert!((out.token_probs.row(0).sum() - 1.0).abs() < 1e-12);
        assert!((out.sequence_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tau_one_sends_everything_to_general() {
        let mut m = GemModel::new(GemConfig { tau: 1.0, ..small() }).unwrap();
        let out = m.forward(&[0, 5, 9, 17, 31, 2]).unwrap();
        assert!(out.routing.iter().all(|r| r.target == RouteTarget::General));
        assert!(out.cluster_plans.iter().all(|p| p.pathway == "general"));
        m.set_tau(0.7).unwrap();
        assert!(m.set_tau(0.0).is_err());
    }

    #[test]
    fn input_errors() {
        let m = GemModel::new(small()).unwrap();
        assert!(matches!(m.forward(&[]), Err(GemError::EmptyInput)));
        assert!(matches!(m.forward(&[99]), Err(GemError::OutOfVocabulary { .. })));
        let long = vec![1u32; 33];
        assert!(matches!(m.forward(&long), Err(GemError::SequenceTooLong { .. })));
    }

    #[test]
    fn precision_map_counts_everything() {
        let m = GemModel::new(small()).unwrap();
        let pm = m.precision_map();
        assert_eq!(pm.total_params(), m.trainable_param_count() + m.router().param_count());
        assert_eq!(pm.bits_for(LayerClass::DomainSpecific), 4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = GemModel::new(small()).unwrap();
        let json = serde_json::to_string(&m.checkpoint()).unwrap();
        let back = GemModel::from_checkpoint(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(m.params(), back.params());
        assert_eq!(m.forward(&[1, 2, 3]).unwrap(), back.forward(&[1, 2, 3]).unwrap());
    }
}
