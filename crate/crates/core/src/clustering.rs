//! 1-D k-means over per-neuron coefficient scores, cluster ranking by mean
//! effect, and cluster-level masks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concept::ConceptVector;
use crate::error::{Error, Result};
use crate::math::Scalar;
use crate::model::{forward, AblationMask, ModelInput, ModelWeights, TraceLevel};

const KMEANS_TOL: f64 = 1e-6;
const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_RESTARTS: u64 = 10;

/// Where the coefficient scores come from.
///
/// `Literal` evaluates `sigma(fc1_k . c)` with the concept vector applied
/// directly at every layer (no bias, no layernorm). `Forward` records the
/// activations of the actual concept pass, where deeper layers see the
/// transformed stream. Both ship because the two definitions genuinely
/// differ; reports carry the mode used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientMode {
    Literal,
    Forward,
}

impl std::str::FromStr for CoefficientMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "forward" => Ok(Self::Forward),
            other => Err(Error::InvalidArgument(format!(
                "mode must be literal or forward, got {other:?}"
            ))),
        }
    }
}

/// One score per neuron, flattened layer-major (`flat = layer * d_ffn + k`).
pub fn coefficient_scores<F: Scalar>(
    weights: &ModelWeights<F>,
    concept: &ConceptVector,
    mode: CoefficientMode,
) -> Result<Vec<f64>> {
    let cfg = &weights.config;
    concept.validate(cfg.d_model)?;
    match mode {
        CoefficientMode::Literal => {
            let c: Vec<F> = concept.as_embedding();
            let mut out = Vec::with_capacity(cfg.total_neurons());
            for lw in &weights.layers {
                for k in 0..cfg.d_ffn {
                    let pre = crate::math::dot(lw.subkey(k), &c);
                    out.push(cfg.activation.apply(pre).to_f64());
                }
            }
            Ok(out)
        }
        CoefficientMode::Forward => {
            let rows = vec![concept.as_embedding::<F>()];
            let trace = forward(
                weights,
                ModelInput::Embeddings {
                    rows: &rows,
                    add_positions: false,
                },
                &AblationMask::empty(),
                TraceLevel::Full,
            )?;
            let mut out = Vec::with_capacity(cfg.total_neurons());
            for l in 0..cfg.n_layers {
                out.extend(trace.coeffs(l, 0).iter().map(|v| v.to_f64()));
            }
            Ok(out)
        }
    }
}

/// A k-means partition of the neuron scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub seed: u64,
    pub mode: CoefficientMode,
    pub labels: Vec<usize>,
    pub centroids: Vec<f64>,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l == cluster)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn nearest(centroids: &[f64], x: f64) -> usize {
    let mut best = 0;
    let mut best_d = (x - centroids[0]).abs();
    for (i, &c) in centroids.iter().enumerate().skip(1) {
        let d = (x - c).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

fn wcss(scores: &[f64], labels: &[usize], centroids: &[f64]) -> f64 {
    scores
        .iter()
        .zip(labels.iter())
        .map(|(&x, &l)| {
            let d = x - centroids[l];
            d * d
        })
        .sum()
}

/// k-means++ initialization (D^2 sampling).
fn init_pp(scores: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(scores[rng.random_range(0..scores.len())]);
    let mut dist2: Vec<f64> = scores
        .iter()
        .map(|&x| {
            let d = x - centroids[0];
            d * d
        })
        .collect();
    while centroids.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = scores.len() - 1;
            for (i, &d) in dist2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            scores[pick]
        } else {
            scores[rng.random_range(0..scores.len())]
        };
        centroids.push(next);
        for (d, &x) in dist2.iter_mut().zip(scores.iter()) {
            let nd = x - next;
            *d = d.min(nd * nd);
        }
    }
    centroids
}

fn lloyd(scores: &[f64], mut centroids: Vec<f64>) -> (Vec<usize>, Vec<f64>) {
    let k = centroids.len();
    let mut labels: Vec<usize> = scores.iter().map(|&x| nearest(&centroids, x)).collect();
    for _ in 0..KMEANS_MAX_ITERS {
        // Update step: empty clusters keep their centroid.
        let mut sums = vec![0.0f64; k];
        let mut counts = vec![0usize; k];
        for (&x, &l) in scores.iter().zip(labels.iter()) {
            sums[l] += x;
            counts[l] += 1;
        }
        let mut shift = 0.0f64;
        for i in 0..k {
            if counts[i] > 0 {
                let next = sums[i] / counts[i] as f64;
                shift = shift.max((next - centroids[i]).abs());
                centroids[i] = next;
            }
        }
        let next_labels: Vec<usize> = scores.iter().map(|&x| nearest(&centroids, x)).collect();
        let stable = next_labels == labels;
        labels = next_labels;
        if stable && shift <= KMEANS_TOL {
            break;
        }
    }
    (labels, centroids)
}

/// Seeded 1-D k-means: k-means++ init, Lloyd iterations, best of 10
/// restarts by within-cluster sum of squares (ties keep the earliest
/// restart). Cluster ids are canonicalized by ascending centroid, so the
/// same seed always yields identical output.
pub fn kmeans_1d(
    scores: &[f64],
    k: usize,
    seed: u64,
    mode: CoefficientMode,
) -> Result<ClusterAssignment> {
    if k < 2 || k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "k must be in [2, {}], got {k}",
            scores.len()
        )));
    }
    if !scores.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("coefficient scores".into()));
    }

    let mut best: Option<(f64, Vec<usize>, Vec<f64>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart);
        let centroids = init_pp(scores, k, &mut rng);
        let (labels, centroids) = lloyd(scores, centroids);
        let cost = wcss(scores, &labels, &centroids);
        if best.as_ref().is_none_or(|(c, _, _)| cost < *c) {
            best = Some((cost, labels, centroids));
        }
    }
    let (_, labels, centroids) = best.expect("at least one restart ran");

    // Canonical ids: ascending centroid value.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]).then(a.cmp(&b)));
    let mut remap = vec![0usize; k];
    for (new_id, &old_id) in order.iter().enumerate() {
        remap[old_id] = new_id;
    }
    let labels = labels.into_iter().map(|l| remap[l]).collect();
    let centroids = order.iter().map(|&o| centroids[o]).collect();

    Ok(ClusterAssignment {
        k,
        seed,
        mode,
        labels,
        centroids,
    })
}

/// Clusters ordered by mean target effect score, descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRanking {
    pub entries: Vec<ClusterScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterScore {
    pub cluster: usize,
    pub mean_effect: f64,
    pub size: usize,
}

impl ClusterRanking {
    pub fn top(&self) -> &ClusterScore {
        &self.entries[0]
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Rank clusters by the mean effect of their members. Empty clusters are
/// excluded with a warning; ties break by cluster id.
pub fn rank_clusters(assignment: &ClusterAssignment, effects: &[f64]) -> Result<ClusterRanking> {
    if effects.len() != assignment.labels.len() {
        return Err(Error::Shape(format!(
            "effects length {} != {} labeled neurons",
            effects.len(),
            assignment.labels.len()
        )));
    }
    let mut sums = vec![0.0f64; assignment.k];
    let mut counts = vec![0usize; assignment.k];
    for (&e, &l) in effects.iter().zip(assignment.labels.iter()) {
        sums[l] += e;
        counts[l] += 1;
    }
    let mut entries = Vec::new();
    for u in 0..assignment.k {
        if counts[u] == 0 {
            log::warn!("cluster {u} is empty; excluded from ranking");
            continue;
        }
        entries.push(ClusterScore {
            cluster: u,
            mean_effect: sums[u] / counts[u] as f64,
            size: counts[u],
        });
    }
    entries.sort_by(|a, b| {
        b.mean_effect
            .total_cmp(&a.mean_effect)
            .then(a.cluster.cmp(&b.cluster))
    });
    Ok(ClusterRanking { entries })
}

/// Which cluster(s) to deactivate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterSelector {
    /// The cluster with the highest mean effect.
    Top,
    /// An explicit cluster id.
    Id(usize),
    /// Every neuron outside the top cluster.
    ComplementOfTop,
}

impl std::str::FromStr for ClusterSelector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Self::Top),
            "complement" => Ok(Self::ComplementOfTop),
            other => other
                .parse::<usize>()
                .map(Self::Id)
                .map_err(|_| Error::InvalidArgument(format!("bad cluster selector {other:?}"))),
        }
    }
}

/// Mask of all members of the selected cluster(s). `d_ffn` converts flat
/// neuron indices back to (layer, neuron) pairs.
pub fn cluster_mask(
    assignment: &ClusterAssignment,
    ranking: &ClusterRanking,
    selector: ClusterSelector,
    d_ffn: usize,
) -> Result<AblationMask> {
    if ranking.entries.is_empty() {
        return Err(Error::InvalidArgument("cluster ranking is empty".into()));
    }
    let top = ranking.top().cluster;
    let keep: Box<dyn Fn(usize) -> bool> = match selector {
        ClusterSelector::Top => Box::new(move |l| l == top),
        ClusterSelector::Id(id) => {
            if id >= assignment.k {
                return Err(Error::IndexOutOfRange(format!(
                    "cluster {id} >= k={}",
                    assignment.k
                )));
            }
            Box::new(move |l| l == id)
        }
        ClusterSelector::ComplementOfTop => Box::new(move |l| l != top),
    };
    Ok(AblationMask::from_pairs(
        assignment
            .labels
            .iter()
            .enumerate()
            .filter(|&(_, &l)| keep(l))
            .map(|(flat, _)| (flat / d_ffn, flat % d_ffn)),
    ))
}
