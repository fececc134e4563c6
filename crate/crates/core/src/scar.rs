//! Clustered sparse attention.
//!
//! Token representations are clustered with cosine k-means; tokens attend only
//! to tokens in their own cluster. Operation counts follow the closed forms
//! `k·n + n` (clustered) and `n²` (dense).

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};

const ZERO_NORM: f64 = 1e-12;

/// `1 − a·b / (‖a‖‖b‖)`, clamped to `[0, 2]`.
pub fn cosine_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(GemError::dims(format!("length {}", a.len()), format!("length {}", b.len())));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na <= ZERO_NORM || nb <= ZERO_NORM {
        return Err(GemError::ZeroNorm);
    }
    Ok((1.0 - a.dot(&b) / (na * nb)).clamp(0.0, 2.0))
}

/// Result of cosine k-means over one sequence.
///
/// Points are normalised to unit length before clustering (cosine distance
/// ignores scale), so `centroids` are means of unit-normalised members. With
/// that normalisation the mean is the exact minimiser of the cluster's
/// summed cosine distance, which is what makes the objective monotone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPlan {
    pub k: usize,
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    /// Summed cosine distance of every point to its assigned centroid.
    pub objective: f64,
    /// Objective after each assignment step.
    pub objective_history: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
}

impl ClusterPlan {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        cluster_sizes(&self.assignments, self.k)
    }

    pub fn mask(&self) -> SparsityMask {
        build_mask(&self.assignments)
    }
}

pub fn cluster_sizes(assignments: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![0; k];
    for &a in assignments {
        if a < k {
            sizes[a] += 1;
        }
    }
    sizes
}

fn unit_rows(points: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut unit = points.to_owned();
    for (i, mut row) in unit.axis_iter_mut(Axis(0)).enumerate() {
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(GemError::NonFinite { index: i * points.ncols() + j });
        }
        let norm = row.dot(&row).sqrt();
        if norm <= ZERO_NORM {
            return Err(GemError::ZeroNorm);
        }
        row /= norm;
    }
    Ok(unit)
}

/// Distance from a unit vector to an arbitrary non-zero centroid.
#[inline]
fn unit_distance(x: ArrayView1<f64>, centroid: ArrayView1<f64>, centroid_norm: f64) -> f64 {
    (1.0 - x.dot(&centroid) / centroid_norm).clamp(0.0, 2.0)
}

fn assign(unit: &Array2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    let norms: Vec<f64> = centroids.axis_iter(Axis(0)).map(|c| c.dot(&c).sqrt()).collect();
    (0..unit.nrows())
        .into_par_iter()
        .map(|i| {
            let x = unit.row(i);
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.axis_iter(Axis(0)).enumerate() {
                let d = unit_distance(x, c, norms[j]);
                // strict: ties keep the lowest index
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .unzip()
}

/// Replaces each non-empty cluster's centroid by the mean of its members. A
/// cluster whose members cancel to the zero vector keeps its old centroid
/// (every direction is equally good for it).
fn update_means(unit: &Array2<f64>, assignments: &[usize], centroids: &mut Array2<f64>) -> Vec<usize> {
    let k = centroids.nrows();
    let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
    let mut counts = vec![0usize; k];
    for (x, &a) in unit.axis_iter(Axis(0)).zip(assignments) {
        let mut row = sums.row_mut(a);
        row += &x;
        counts[a] += 1;
    }
    for j in 0..k {
        if counts[j] == 0 {
            continue;
        }
        let mean = sums.row(j).mapv(|v| v / counts[j] as f64);
        if mean.dot(&mean).sqrt() > ZERO_NORM {
            centroids.row_mut(j).assign(&mean);
        }
    }
    counts
}

/// Seeds each empty cluster with the point farthest from its own centroid,
/// drawn from clusters that can spare a member.
fn repair_empty(unit: &Array2<f64>, assignments: &mut [usize], centroids: &mut Array2<f64>, counts: &mut [usize]) {
    let k = centroids.nrows();
    for empty in 0..k {
        if counts[empty] != 0 {
            continue;
        }
        let norms: Vec<f64> = centroids.axis_iter(Axis(0)).map(|c| c.dot(&c).sqrt()).collect();
        let mut pick: Option<(usize, f64)> = None;
        for (i, x) in unit.axis_iter(Axis(0)).enumerate() {
            let a = assignments[i];
            if counts[a] < 2 {
                continue;
            }
            let d = unit_distance(x, centroids.row(a), norms[a]);
            if pick.is_none_or(|(_, best)| d > best) {
                pick = Some((i, d));
            }
        }
        // n >= k guarantees some cluster holds two or more points.
        let (i, _) = pick.expect("a cluster with at least two members");
        counts[assignments[i]] -= 1;
        assignments[i] = empty;
        counts[empty] = 1;
        centroids.row_mut(empty).assign(&unit.row(i));
    }
}

/// Farthest-point seeding from a seeded first pick.
fn seed_centroids(unit: &Array2<f64>, k: usize, seed: u64) -> Array2<f64> {
    let n = unit.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..n);
    let mut chosen = vec![first];
    let mut taken = vec![false; n];
    taken[first] = true;
    let mut min_dist: Vec<f64> = unit
        .axis_iter(Axis(0))
        .map(|x| unit_distance(x, unit.row(first), 1.0))
        .collect();
    while chosen.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if !taken[i] && best.is_none_or(|(_, d)| min_dist[i] > d) {
                best = Some((i, min_dist[i]));
            }
        }
        let (next, _) = best.expect("k <= n");
        taken[next] = true;
        chosen.push(next);
        for i in 0..n {
            min_dist[i] = min_dist[i].min(unit_distance(unit.row(i), unit.row(next), 1.0));
        }
    }
    let d = unit.ncols();
    let mut centroids = Array2::zeros((k, d));
    for (j, &i) in chosen.iter().enumerate() {
        centroids.row_mut(j).assign(&unit.row(i));
    }
    centroids
}

fn objective(unit: &Array2<f64>, centroids: &Array2<f64>, assignments: &[usize]) -> f64 {
    let norms: Vec<f64> = centroids.axis_iter(Axis(0)).map(|c| c.dot(&c).sqrt()).collect();
    unit.axis_iter(Axis(0))
        .zip(assignments)
        .map(|(x, &a)| unit_distance(x, centroids.row(a), norms[a]))
        .sum()
}

/// Lloyd-style cosine k-means over the rows of `points`.
///
/// At least one assignment step always runs, even with `max_iters == 0`.
pub fn kmeans_cosine(points: ArrayView2<f64>, k: usize, max_iters: usize, seed: u64) -> Result<ClusterPlan> {
    let n = points.nrows();
    if n == 0 {
        return Err(GemError::EmptyInput);
    }
    if k == 0 {
        return Err(GemError::InvalidArgument {
            name: "k",
            reason: "need at least one cluster".into(),
        });
    }
    if k > n {
        return Err(GemError::TooManyClusters { k, n });
    }
    let unit = unit_rows(points)?;
    let mut centroids = seed_centroids(&unit, k, seed);
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;

    for _ in 0..max_iters.max(1) {
        let (next, dists) = assign(&unit, &centroids);
        history.push(dists.iter().sum());
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        let mut counts = update_means(&unit, &assignments, &mut centroids);
        if counts.contains(&0) {
            repair_empty(&unit, &mut assignments, &mut centroids, &mut counts);
        }
    }

    update_means(&unit, &assignments, &mut centroids);
    let objective = objective(&unit, &centroids, &assignments);
    Ok(ClusterPlan {
        k,
        centroids,
        assignments,
        objective,
        iterations_run: history.len(),
        objective_history: history,
        converged,
    })
}

/// Square binary co-membership mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityMask {
    n: usize,
    bits: Vec<bool>,
}

impl SparsityMask {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..n * n).map(|idx| f(idx / n, idx % n)).collect();
        Self { n, bits }
    }

    pub fn all_ones(n: usize) -> Self {
        Self { n, bits: vec![true; n * n] }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of set entries.
    pub fn density(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.count_ones() as f64 / (self.n * self.n) as f64
    }

    /// Plain (ASCII, `P1`) portable bitmap; a set bit is drawn black.
    pub fn to_pbm(&self) -> String {
        let mut out = format!("P1\n{} {}\n", self.n, self.n);
        for i in 0..self.n {
            let row: Vec<&str> = (0..self.n).map(|j| if self.get(i, j) { "1" } else { "0" }).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }
}

/// `M_ij = 1` iff tokens `i` and `j` share a cluster.
pub fn build_mask(assignments: &[usize]) -> SparsityMask {
    SparsityMask::from_fn(assignments.len(), |i, j| assignments[i] == assignments[j])
}

/// How masked-out logits enter the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Masked positions are excluded (logit −∞), giving exact zeros.
    #[default]
    Exclude,
    /// Elementwise product `M ⊙ QKᵀ`: masked positions get logit 0 and still
    /// receive attention.
    LiteralZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionResult {
    pub weights: Array2<f64>,
    pub outputs: Array2<f64>,
}

pub fn masked_attention(
    q: ArrayView2<f64>,
    kmat: ArrayView2<f64>,
    v: ArrayView2<f64>,
    mask: &SparsityMask,
) -> Result<AttentionResult> {
    masked_attention_with(q, kmat, v, mask, MaskMode::Exclude)
}

pub fn masked_attention_with(
    q: ArrayView2<f64>,
    kmat: ArrayView2<f64>,
    v: ArrayView2<f64>,
    mask: &SparsityMask,
    mode: MaskMode,
) -> Result<AttentionResult> {
    let n = q.nrows();
    let dk = q.ncols();
    if kmat.dim() != (n, dk) {
        return Err(GemError::dims(format!("keys {n}x{dk}"), format!("{:?}", kmat.dim())));
    }
    if v.nrows() != n {
        return Err(GemError::dims(format!("values with {n} rows"), format!("{} rows", v.nrows())));
    }
    if mask.len() != n {
        return Err(GemError::dims(format!("{n}x{n} mask"), format!("{0}x{0}", mask.len())));
    }
    if dk == 0 {
        return Err(GemError::dims("key dimension >= 1", "0"));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let mut weights = q.dot(&kmat.t());
    for (i, mut row) in weights.axis_iter_mut(Axis(0)).enumerate() {
        match mode {
            MaskMode::Exclude => {
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    if mask.get(i, j) {
                        row[j] *= scale;
                        max = max.max(row[j]);
                    }
                }
                let mut sum = 0.0;
                for j in 0..n {
                    if mask.get(i, j) {
                        row[j] = (row[j] - max).exp();
                        sum += row[j];
                    } else {
                        row[j] = 0.0;
                    }
                }
                if sum == 0.0 {
                    return Err(GemError::InvalidArgument {
                        name: "mask",
                        reason: format!("row {i} has no set bit"),
                    });
                }
                row /= sum;
            }
            MaskMode::LiteralZero => {
                for j in 0..n {
                    row[j] = if mask.get(i, j) { row[j] * scale } else { 0.0 };
                }
                let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                row.mapv_inplace(|x| (x - max).exp());
                let sum = row.sum();
                row /= sum;
            }
        }
    }
    let outputs = weights.dot(&v);
    Ok(AttentionResult { weights, outputs })
}

/// Clustered attention operation count, `k·n + n`.
pub fn scar_ops(n: u64, k: u64) -> u64 {
    k * n + n
}

/// Dense attention operation count, `n²`.
pub fn dense_ops(n: u64) -> u64 {
    n * n
}

/// Fractional saving `1 − new / baseline`.
pub fn reduction(baseline_ops: u64, new_ops: u64) -> Result<f64> {
    if baseline_ops == 0 {
        return Err(GemError::ZeroDenominator("reduction"));
    }
    Ok(1.0 - new_ops as f64 / baseline_ops as f64)
}
