//! Cached single-pass neuron scoring.
//!
//! One forward pass over the concept embedding caches, per layer, the
//! pre-FFN residual, the FFN coefficients, the layer output, and the target
//! log-probabilities under direct vocabulary projection. Every neuron's
//! effect is then a rank-one subtraction from the cached layer output plus
//! one logit recomputation: no further forward passes. The per-layer output
//! is projected straight through LN_f and the unembedding, bypassing later
//! layers; that locality is what makes the scoring cheap. A slow
//! full-propagation audit exists in `baseline_scores` method `a`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concept::ConceptVector;
use crate::error::{Error, Result};
use crate::math::{l2_norm, Scalar};
use crate::model::{
    forward, next_token_distribution, project_to_vocab, AblationMask, ModelInput, ModelWeights,
    TraceLevel, VocabDistribution,
};

/// Per-layer state cached from the single concept pass.
#[derive(Debug, Clone)]
pub struct ConceptLayer<F> {
    /// Pre-FFN residual `r^(l)`.
    pub pre_ffn: Vec<F>,
    /// FFN coefficients `a^(l)` at the concept position.
    pub coeffs: Vec<F>,
    /// Unmodified layer output `o_orig^(l) = r^(l) + FFN(r^(l))`.
    pub layer_out: Vec<F>,
    /// `log p_orig(t)` for each cached target, from projecting `layer_out`.
    pub orig_log_probs: Vec<f64>,
}

/// Everything needed to score every neuron without another forward pass.
#[derive(Debug, Clone)]
pub struct ConceptTrace<F> {
    pub layers: Vec<ConceptLayer<F>>,
    pub targets: Vec<u32>,
    /// Pass-counter value recorded by the caching pass.
    pub pass_index: u64,
}

impl<F: Scalar> ConceptTrace<F> {
    fn target_position(&self, token: u32) -> Result<usize> {
        self.targets
            .iter()
            .position(|&t| t == token)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("token {token} was not cached in the trace"))
            })
    }
}

/// Run the one cached pass: the concept vector enters as a length-1 raw
/// embedding (no token or position embedding added).
pub fn cache_concept_pass<F: Scalar>(
    weights: &ModelWeights<F>,
    concept: &ConceptVector,
    targets: &[u32],
) -> Result<ConceptTrace<F>> {
    let cfg = &weights.config;
    concept.validate(cfg.d_model)?;
    if targets.is_empty() {
        return Err(Error::EmptyTargetSet("no target tokens".into()));
    }
    for &t in targets {
        if (t as usize) >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: t,
                vocab: cfg.vocab_size,
            });
        }
    }

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

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let layer_out = trace.hidden(l, 0).to_vec();
        let dist = project_to_vocab(weights, &layer_out)?;
        let orig_log_probs = targets.iter().map(|&t| dist.log_prob(t)).collect();
        layers.push(ConceptLayer {
            pre_ffn: trace.pre_ffn(l, 0).to_vec(),
            coeffs: trace.coeffs(l, 0).to_vec(),
            layer_out,
            orig_log_probs,
        });
    }
    Ok(ConceptTrace {
        layers,
        targets: targets.to_vec(),
        pass_index: trace.pass_index,
    })
}

/// Target log-probabilities after deactivating neuron `(layer, j)`:
/// subtract the neuron's cached contribution from the layer output and
/// re-project. Consumes no forward pass.
fn deactivated_log_probs<F: Scalar>(
    trace: &ConceptTrace<F>,
    weights: &ModelWeights<F>,
    layer: usize,
    j: usize,
) -> Result<Vec<f64>> {
    let cfg = &weights.config;
    if layer >= cfg.n_layers {
        return Err(Error::IndexOutOfRange(format!(
            "layer {layer} >= {}",
            cfg.n_layers
        )));
    }
    if j >= cfg.d_ffn {
        return Err(Error::IndexOutOfRange(format!("neuron {j} >= {}", cfg.d_ffn)));
    }
    let cached = &trace.layers[layer];
    let coeff = cached.coeffs[j];
    let subvalue = weights.layers[layer].subvalue(j);
    let o_mod: Vec<F> = cached
        .layer_out
        .iter()
        .zip(subvalue.iter())
        .map(|(&o, &v)| o - coeff * v)
        .collect();
    let dist = project_to_vocab(weights, &o_mod)?;
    Ok(trace.targets.iter().map(|&t| dist.log_prob(t)).collect())
}

/// Target effect score: total absolute log-probability change over the
/// cached targets when neuron `(layer, j)` is deactivated. Non-negative.
pub fn neuron_effect<F: Scalar>(
    trace: &ConceptTrace<F>,
    weights: &ModelWeights<F>,
    layer: usize,
    j: usize,
) -> Result<f64> {
    let modified = deactivated_log_probs(trace, weights, layer, j)?;
    let orig = &trace.layers[layer].orig_log_probs;
    Ok(modified
        .iter()
        .zip(orig.iter())
        .map(|(m, o)| (m - o).abs())
        .sum())
}

/// Which gendered set a bias score should favor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasDirection {
    Male,
    Female,
}

impl std::str::FromStr for BiasDirection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "male" => Ok(Self::Male),
            "female" => Ok(Self::Female),
            other => Err(Error::InvalidArgument(format!(
                "direction must be male or female, got {other:?}"
            ))),
        }
    }
}

fn check_disjoint(male: &[u32], female: &[u32]) -> Result<()> {
    if male.is_empty() || female.is_empty() {
        return Err(Error::EmptyTargetSet("both gendered sets must be non-empty".into()));
    }
    for &t in male {
        if female.contains(&t) {
            return Err(Error::OverlappingTargets(t));
        }
    }
    Ok(())
}

/// Signed stereotype score: the absolute log-probability change summed over
/// one gendered set minus the other. On a shared trace the male and female
/// scores of a neuron negate each other exactly.
pub fn bias_effect<F: Scalar>(
    trace: &ConceptTrace<F>,
    weights: &ModelWeights<F>,
    layer: usize,
    j: usize,
    male_tokens: &[u32],
    female_tokens: &[u32],
    direction: BiasDirection,
) -> Result<f64> {
    check_disjoint(male_tokens, female_tokens)?;
    let modified = deactivated_log_probs(trace, weights, layer, j)?;
    let orig = &trace.layers[layer].orig_log_probs;
    let sum_over = |tokens: &[u32]| -> Result<f64> {
        let mut acc = 0.0;
        for &t in tokens {
            let idx = trace.target_position(t)?;
            acc += (modified[idx] - orig[idx]).abs();
        }
        Ok(acc)
    };
    let male_sum = sum_over(male_tokens)?;
    let female_sum = sum_over(female_tokens)?;
    Ok(match direction {
        BiasDirection::Male => male_sum - female_sum,
        BiasDirection::Female => female_sum - male_sum,
    })
}

/// One neuron's effect record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronScore {
    pub layer: usize,
    pub index: usize,
    pub score: f64,
    /// Sign of the net (non-absolute) log-probability change over the
    /// targets; recorded as metadata, never used for ranking.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub net_sign: Option<i8>,
}

/// Scores in descending order with deterministic ties (layer, then index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NeuronRanking {
    entries: Vec<NeuronScore>,
}

impl NeuronRanking {
    pub fn from_scores(mut scores: Vec<NeuronScore>, m: usize) -> Self {
        scores.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.layer.cmp(&b.layer))
                .then(a.index.cmp(&b.index))
        });
        scores.truncate(m);
        Self { entries: scores }
    }

    pub fn entries(&self) -> &[NeuronScore] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &std::path::Path) -> Result<Self> {
        let parsed: Vec<NeuronScore> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(Self { entries: parsed })
    }
}

fn net_sign(modified: &[f64], orig: &[f64]) -> i8 {
    let net: f64 = modified.iter().zip(orig.iter()).map(|(m, o)| m - o).sum();
    if net > 0.0 {
        1
    } else if net < 0.0 {
        -1
    } else {
        0
    }
}

/// Score every neuron against the concept targets and keep the top `m`.
/// Exactly one full forward pass is consumed (the caching pass).
pub fn locate_concept_neurons<F: Scalar>(
    weights: &ModelWeights<F>,
    concept: &ConceptVector,
    targets: &[u32],
    m: usize,
) -> Result<NeuronRanking> {
    if m < 1 {
        return Err(Error::InvalidArgument("top-M must be >= 1".into()));
    }
    let trace = cache_concept_pass(weights, concept, targets)?;
    let cfg = &weights.config;
    let n = cfg.d_ffn;
    let scores: Result<Vec<NeuronScore>> = (0..cfg.total_neurons())
        .into_par_iter()
        .map(|flat| {
            let (layer, j) = (flat / n, flat % n);
            let modified = deactivated_log_probs(&trace, weights, layer, j)?;
            let orig = &trace.layers[layer].orig_log_probs;
            let score = modified
                .iter()
                .zip(orig.iter())
                .map(|(m, o)| (m - o).abs())
                .sum();
            Ok(NeuronScore {
                layer,
                index: j,
                score,
                net_sign: Some(net_sign(&modified, orig)),
            })
        })
        .collect();
    Ok(NeuronRanking::from_scores(scores?, m))
}

/// Score every neuron by the signed gendered-set difference under the given
/// direction's concept vector, and keep the top `m`.
pub fn locate_bias_neurons<F: Scalar>(
    weights: &ModelWeights<F>,
    concept: &ConceptVector,
    male_tokens: &[u32],
    female_tokens: &[u32],
    m: usize,
    direction: BiasDirection,
) -> Result<NeuronRanking> {
    if m < 1 {
        return Err(Error::InvalidArgument("top-M must be >= 1".into()));
    }
    check_disjoint(male_tokens, female_tokens)?;
    let mut union: Vec<u32> = male_tokens.to_vec();
    union.extend_from_slice(female_tokens);
    let trace = cache_concept_pass(weights, concept, &union)?;
    let cfg = &weights.config;
    let n = cfg.d_ffn;
    let scores: Result<Vec<NeuronScore>> = (0..cfg.total_neurons())
        .into_par_iter()
        .map(|flat| {
            let (layer, j) = (flat / n, flat % n);
            let modified = deactivated_log_probs(&trace, weights, layer, j)?;
            let orig = &trace.layers[layer].orig_log_probs;
            let take = |tokens: &[u32]| -> f64 {
                tokens
                    .iter()
                    .map(|t| {
                        let idx = union.iter().position(|u| u == t).unwrap();
                        (modified[idx] - orig[idx]).abs()
                    })
                    .sum()
            };
            let male_sum = take(male_tokens);
            let female_sum = take(female_tokens);
            let score = match direction {
                BiasDirection::Male => male_sum - female_sum,
                BiasDirection::Female => female_sum - male_sum,
            };
            Ok(NeuronScore {
                layer,
                index: j,
                score,
                net_sign: Some(net_sign(&modified, orig)),
            })
        })
        .collect();
    Ok(NeuronRanking::from_scores(scores?, m))
}

/// The comparison scorers, lettered as conventionally listed: (a) true
/// per-neuron ablation re-forward, (b) projecting the lone contribution,
/// (c) probability difference with vs without the contribution on the
/// residual, (d) subvalue weight norm, (e) activation magnitude,
/// (f) activation-weight product, (g) activation over target rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
}

impl std::str::FromStr for BaselineMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Self::A),
            "b" => Ok(Self::B),
            "c" => Ok(Self::C),
            "d" => Ok(Self::D),
            "e" => Ok(Self::E),
            "f" => Ok(Self::F),
            "g" => Ok(Self::G),
            other => Err(Error::InvalidArgument(format!(
                "baseline method must be a..g, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let c = match self {
            Self::A => 'a',
            Self::B => 'b',
            Self::C => 'c',
            Self::D => 'd',
            Self::E => 'e',
            Self::F => 'f',
            Self::G => 'g',
        };
        write!(f, "{c}")
    }
}

/// Score every neuron at the final position of a sentence with one of the
/// baseline scorers. The scored token `w*` is the model's top-1 prediction
/// unless `target_override` is given. Method `a` truly re-forwards per
/// neuron, so it consumes `n_layers * d_ffn + 1` passes; the others consume
/// only the clean pass.
pub fn baseline_scores<F: Scalar>(
    method: BaselineMethod,
    weights: &ModelWeights<F>,
    tokens: &[u32],
    target_override: Option<u32>,
) -> Result<NeuronRanking> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let cfg = &weights.config;
    let clean = forward(
        weights,
        ModelInput::Tokens(tokens),
        &AblationMask::empty(),
        TraceLevel::Full,
    )?;
    let clean_dist = VocabDistribution {
        probs: crate::math::softmax_f64(&clean.logits),
        logits: clean.logits.clone(),
    };
    let w_star = target_override.unwrap_or_else(|| clean_dist.top1());
    if (w_star as usize) >= cfg.vocab_size {
        return Err(Error::TokenOutOfRange {
            id: w_star,
            vocab: cfg.vocab_size,
        });
    }
    let last = clean.seq_len() - 1;
    let n = cfg.d_ffn;

    let score_one = |flat: usize| -> Result<f64> {
        let (layer, j) = (flat / n, flat % n);
        let lw = &weights.layers[layer];
        let coeff = clean.coeffs(layer, last)[j].to_f64();
        let subvalue = lw.subvalue(j);
        match method {
            BaselineMethod::A => {
                let mask = AblationMask::from_pairs([(layer, j)]);
                let ablated = next_token_distribution(weights, tokens, &mask)?;
                Ok(clean_dist.log_prob(w_star) - ablated.log_prob(w_star))
            }
            BaselineMethod::B => {
                let c = F::from_f64(coeff);
                let contribution: Vec<F> = subvalue.iter().map(|&v| c * v).collect();
                Ok(project_to_vocab(weights, &contribution)?.log_prob(w_star))
            }
            BaselineMethod::C => {
                let residual = clean.pre_ffn(layer, last);
                let c = F::from_f64(coeff);
                let with: Vec<F> = residual
                    .iter()
                    .zip(subvalue.iter())
                    .map(|(&r, &v)| r + c * v)
                    .collect();
                let p_with = project_to_vocab(weights, &with)?.prob(w_star);
                let p_without = project_to_vocab(weights, residual)?.prob(w_star);
                Ok(p_with - p_without)
            }
            BaselineMethod::D => Ok(l2_norm(subvalue).to_f64()),
            BaselineMethod::E => Ok(coeff.abs()),
            BaselineMethod::F => Ok(coeff.abs() * l2_norm(subvalue).to_f64()),
            BaselineMethod::G => Ok(coeff.abs() / clean_dist.rank_of(w_star) as f64),
        }
    };

    let scores: Result<Vec<NeuronScore>> = (0..cfg.total_neurons())
        .into_par_iter()
        .map(|flat| {
            Ok(NeuronScore {
                layer: flat / n,
                index: flat % n,
                score: score_one(flat)?,
                net_sign: None,
            })
        })
        .collect();
    Ok(NeuronRanking::from_scores(scores?, cfg.total_neurons()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::{concept_vector, ConceptCorpus};
    use crate::io::synth::synth_model;
    use crate::io::tokenizer::Tokenizer;
    use crate::math::add_assign;
    use crate::model::tests_config::tiny_config;

    fn setup() -> (ModelWeights<f32>, ConceptVector) {
        let w = synth_model(42, &tiny_config());
        let tok = Tokenizer::synthetic_ascii(50);
        let corpus = ConceptCorpus::new(vec!["abc".into(), "de f".into()], "t").unwrap();
        let c = concept_vector(&w, &tok, &corpus).unwrap();
        (w, c)
    }

    #[test]
    fn cache_pass_consumes_exactly_one_forward() {
        let (w, c) = setup();
        let before = w.forward_passes();
        cache_concept_pass(&w, &c, &[1, 2, 3]).unwrap();
        assert_eq!(w.forward_passes() - before, 1);
    }

    #[test]
    fn cached_coeffs_match_full_trace() {
        let (w, c) = setup();
        let trace = cache_concept_pass(&w, &c, &[1]).unwrap();
        let rows = vec![c.as_embedding::<f32>()];
        let full = forward(
            &w,
            ModelInput::Embeddings {
                rows: &rows,
                add_positions: false,
            },
            &AblationMask::empty(),
            TraceLevel::Full,
        )
        .unwrap();
        for l in 0..2 {
            assert_eq!(trace.layers[l].coeffs, full.coeffs(l, 0));
            assert_eq!(trace.layers[l].layer_out, full.hidden(l, 0));
        }
    }

    #[test]
    fn cached_layer_out_reconstructs_from_residual_and_coeffs() {
        let (w, c) = setup();
        let trace = cache_concept_pass(&w, &c, &[1]).unwrap();
        for l in 0..2 {
            let cached = &trace.layers[l];
            let mut rebuilt = w.layers[l].fc2_bias.clone();
            for (j, &m) in cached.coeffs.iter().enumerate() {
                for (acc, &v) in rebuilt.iter_mut().zip(w.layers[l].subvalue(j)) {
                    *acc += m * v;
                }
            }
            add_assign(&mut rebuilt, &cached.pre_ffn);
            for (a, b) in rebuilt.iter().zip(cached.layer_out.iter()) {
                assert!((a - b).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn zero_concept_vector_is_accepted() {
        let (w, _) = setup();
        let zero = ConceptVector {
            d_model: 8,
            n_examples: 1,
            values: vec![0.0; 8],
            source_digest: String::new(),
        };
        let trace = cache_concept_pass(&w, &zero, &[0]).unwrap();
        for l in &trace.layers {
            assert!(l.layer_out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn empty_targets_rejected() {
        let (w, c) = setup();
        assert!(matches!(
            cache_concept_pass(&w, &c, &[]),
            Err(Error::EmptyTargetSet(_))
        ));
    }

    #[test]
    fn zero_coefficient_neuron_has_zero_effect() {
        let (mut w, _) = setup();
        // Force coefficient of neuron (0, 4) to sigma(0) = 0.
        for v in w.layers[0].fc1.row_mut(4) {
            *v = 0.0;
        }
        w.layers[0].fc1_bias[4] = 0.0;
        let tok = Tokenizer::synthetic_ascii(50);
        let corpus = ConceptCorpus::new(vec!["abc".into()], "t").unwrap();
        let c = concept_vector(&w, &tok, &corpus).unwrap();
        let trace = cache_concept_pass(&w, &c, &[1, 2]).unwrap();
        assert_eq!(trace.layers[0].coeffs[4], 0.0);
        assert_eq!(neuron_effect(&trace, &w, 0, 4).unwrap(), 0.0);
    }

    #[test]
    fn effects_non_negative_everywhere() {
        let (w, c) = setup();
        let trace = cache_concept_pass(&w, &c, &[1, 2, 3]).unwrap();
        for l in 0..2 {
            for j in 0..16 {
                assert!(neuron_effect(&trace, &w, l, j).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn neuron_effect_index_errors() {
        let (w, c) = setup();
        let trace = cache_concept_pass(&w, &c, &[1]).unwrap();
        assert!(neuron_effect(&trace, &w, 2, 0).is_err());
        assert!(neuron_effect(&trace, &w, 0, 16).is_err());
    }

    #[test]
    fn locate_consumes_one_pass_and_is_deterministic() {
        let (w, c) = setup();
        let before = w.forward_passes();
        let a = locate_concept_neurons(&w, &c, &[1, 2, 3], 32).unwrap();
        assert_eq!(w.forward_passes() - before, 1);
        let b = locate_concept_neurons(&w, &c, &[1, 2, 3], 32).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 32);
        // Sorted descending with deterministic ties.
        for pair in a.entries().windows(2) {
            assert!(
                pair[0].score > pair[1].score
                    || (pair[0].score == pair[1].score
                        && (pair[0].layer, pair[0].index) < (pair[1].layer, pair[1].index))
            );
        }
    }

    #[test]
    fn full_ranking_covers_all_neurons() {
        let (w, c) = setup();
        let r = locate_concept_neurons(&w, &c, &[5], 32).unwrap();
        let mut seen: Vec<(usize, usize)> = r.entries().iter().map(|s| (s.layer, s.index)).collect();
        seen.sort();
        let expected: Vec<(usize, usize)> =
            (0..2).flat_map(|l| (0..16).map(move |j| (l, j))).collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn bias_scores_negate_exactly_between_directions() {
        let (w, c) = setup();
        let male = vec![1u32, 2];
        let female = vec![3u32, 4, 5];
        let mut union = male.clone();
        union.extend(&female);
        let trace = cache_concept_pass(&w, &c, &union).unwrap();
        for l in 0..2 {
            for j in 0..16 {
                let m = bias_effect(&trace, &w, l, j, &male, &female, BiasDirection::Male).unwrap();
                let f =
                    bias_effect(&trace, &w, l, j, &male, &female, BiasDirection::Female).unwrap();
                assert_eq!(m, -f);
            }
        }
    }

    #[test]
    fn overlapping_gendered_sets_rejected() {
        let (w, c) = setup();
        let trace = cache_concept_pass(&w, &c, &[1, 2, 3]).unwrap();
        assert!(matches!(
            bias_effect(&trace, &w, 0, 0, &[1, 2], &[2, 3], BiasDirection::Male),
            Err(Error::OverlappingTargets(2))
        ));
    }

    #[test]
    fn bias_top1_is_argmax_of_signed_scores() {
        let (w, c) = setup();
        let male = vec![1u32, 2];
        let female = vec![3u32, 4];
        let ranking =
            locate_bias_neurons(&w, &c, &male, &female, 11, BiasDirection::Male).unwrap();
        assert_eq!(ranking.len(), 11);
        let mut union = male.clone();
        union.extend(&female);
        let trace = cache_concept_pass(&w, &c, &union).unwrap();
        let mut best = f64::NEG_INFINITY;
        for l in 0..2 {
            for j in 0..16 {
                best = best
                    .max(bias_effect(&trace, &w, l, j, &male, &female, BiasDirection::Male).unwrap());
            }
        }
        assert_eq!(ranking.entries()[0].score, best);
    }

    #[test]
    fn baseline_a_single_neuron_matches_manual_two_forward_difference() {
        let (w, _) = setup();
        let tokens = vec![3u32, 7];
        let ranking = baseline_scores(BaselineMethod::A, &w, &tokens, None).unwrap();
        let clean = next_token_distribution(&w, &tokens, &AblationMask::empty()).unwrap();
        let w_star = clean.top1();
        let probe = ranking.entries()[5].clone();
        let ablated = next_token_distribution(
            &w,
            &tokens,
            &AblationMask::from_pairs([(probe.layer, probe.index)]),
        )
        .unwrap();
        let manual = clean.log_prob(w_star) - ablated.log_prob(w_star);
        assert!((probe.score - manual).abs() < 1e-12);
    }

    #[test]
    fn baseline_a_pass_count_is_total_neurons_plus_one() {
        let (w, _) = setup();
        let before = w.forward_passes();
        baseline_scores(BaselineMethod::A, &w, &[3, 7], None).unwrap();
        assert_eq!(w.forward_passes() - before, 2 * 16 + 1);
    }

    #[test]
    fn baseline_d_is_input_independent() {
        let (w, _) = setup();
        let r1 = baseline_scores(BaselineMethod::D, &w, &[3, 7], None).unwrap();
        let r2 = baseline_scores(BaselineMethod::D, &w, &[9, 1, 4], None).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn baseline_f_is_product_of_e_and_d() {
        let (w, _) = setup();
        let tokens = vec![3u32, 7];
        let d = baseline_scores(BaselineMethod::D, &w, &tokens, None).unwrap();
        let e = baseline_scores(BaselineMethod::E, &w, &tokens, None).unwrap();
        let f = baseline_scores(BaselineMethod::F, &w, &tokens, None).unwrap();
        let lookup = |r: &NeuronRanking, l: usize, j: usize| {
            r.entries()
                .iter()
                .find(|s| s.layer == l && s.index == j)
                .unwrap()
                .score
        };
        for l in 0..2 {
            for j in 0..16 {
                let prod = lookup(&d, l, j) * lookup(&e, l, j);
                assert!((lookup(&f, l, j) - prod).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn baseline_g_divides_by_rank_of_top1() {
        // With w* = top-1, rank is 1, so g equals e.
        let (w, _) = setup();
        let tokens = vec![3u32, 7];
        let e = baseline_scores(BaselineMethod::E, &w, &tokens, None).unwrap();
        let g = baseline_scores(BaselineMethod::G, &w, &tokens, None).unwrap();
        assert_eq!(e, g);
    }

    #[test]
    fn baseline_rejects_empty_sentence() {
        let (w, _) = setup();
        assert!(matches!(
            baseline_scores(BaselineMethod::E, &w, &[], None),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn ranking_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ranking.json");
        let r = NeuronRanking::from_scores(
            vec![
                NeuronScore {
                    layer: 0,
                    index: 3,
                    score: 1.5,
                    net_sign: Some(-1),
                },
                NeuronScore {
                    layer: 1,
                    index: 0,
                    score: 2.0,
                    net_sign: Some(1),
                },
            ],
            2,
        );
        r.write_json(&path).unwrap();
        let back = NeuronRanking::read_json(&path).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.entries()[0].layer, 1);
    }

    #[test]
    fn ranking_ties_break_by_layer_then_index() {
        let mk = |layer, index| NeuronScore {
            layer,
            index,
            score: 1.0,
            net_sign: None,
        };
        let r = NeuronRanking::from_scores(vec![mk(1, 0), mk(0, 5), mk(0, 2)], 3);
        let order: Vec<(usize, usize)> = r.entries().iter().map(|s| (s.layer, s.index)).collect();
        assert_eq!(order, vec![(0, 2), (0, 5), (1, 0)]);
    }
}
