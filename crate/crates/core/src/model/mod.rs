//! GPT-2-style transformer: parameters, ablation masks, and the traced
//! forward pass.
//!
//! The engine follows the real pre-layernorm GPT-2 computation (ln_1 before
//! attention, ln_2 before the FFN input) rather than the simplified
//! norm-free block sometimes written down for this family. FFN weights are
//! held in row-subkey / row-subvalue orientation so neuron-level reads are
//! contiguous.

mod forward;

pub use forward::{
    decompose_ffn, forward, next_token_distribution, project_to_vocab, LayerTrace, ModelInput,
    TraceLevel, VocabDistribution,
};

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Activation, Matrix, Scalar};

/// Static geometry of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub ln_epsilon: f64,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.ln_epsilon > 0.0) {
            return Err(Error::InvalidConfig("ln_epsilon must be > 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total FFN neuron count across layers (`n_layers * d_ffn`).
    pub fn total_neurons(&self) -> usize {
        self.n_layers * self.d_ffn
    }

    /// gpt2-small geometry.
    pub fn gpt2_small() -> Self {
        Self {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            d_ffn: 3072,
            vocab_size: 50257,
            max_positions: 1024,
            ln_epsilon: 1e-5,
            activation: Activation::GeluTanh,
        }
    }

    /// gpt2-large geometry.
    pub fn gpt2_large() -> Self {
        Self {
            n_layers: 36,
            d_model: 1280,
            n_heads: 20,
            d_ffn: 5120,
            vocab_size: 50257,
            max_positions: 1024,
            ln_epsilon: 1e-5,
            activation: Activation::GeluTanh,
        }
    }
}

/// Parameters of one transformer block.
///
/// Attention projections are stored row-major with rows as output
/// coordinates (`y = W x`). `fc1` holds the FFN subkeys as rows
/// (`[d_ffn x d_model]`); `fc2` holds the subvalues as rows in the same
/// orientation, i.e. row `k` of `fc2` is the column of the conventional
/// second projection that neuron `k` writes to the residual stream.
#[derive(Debug, Clone)]
pub struct LayerWeights<F> {
    pub ln1_gain: Vec<F>,
    pub ln1_shift: Vec<F>,
    pub w_q: Matrix<F>,
    pub b_q: Vec<F>,
    pub w_k: Matrix<F>,
    pub b_k: Vec<F>,
    pub w_v: Matrix<F>,
    pub b_v: Vec<F>,
    pub w_o: Matrix<F>,
    pub b_o: Vec<F>,
    pub ln2_gain: Vec<F>,
    pub ln2_shift: Vec<F>,
    pub fc1: Matrix<F>,
    pub fc1_bias: Vec<F>,
    pub fc2: Matrix<F>,
    pub fc2_bias: Vec<F>,
}

impl<F: Scalar> LayerWeights<F> {
    /// Subvalue (residual-stream write vector) of neuron `j`.
    pub fn subvalue(&self, j: usize) -> &[F] {
        self.fc2.row(j)
    }

    /// Subkey (detector vector) of neuron `j`.
    pub fn subkey(&self, j: usize) -> &[F] {
        self.fc1.row(j)
    }

    fn map<G: Scalar>(&self, f: &impl Fn(F) -> G) -> LayerWeights<G> {
        let v = |xs: &[F]| xs.iter().map(|&x| f(x)).collect::<Vec<G>>();
        LayerWeights {
            ln1_gain: v(&self.ln1_gain),
            ln1_shift: v(&self.ln1_shift),
            w_q: self.w_q.map(f),
            b_q: v(&self.b_q),
            w_k: self.w_k.map(f),
            b_k: v(&self.b_k),
            w_v: self.w_v.map(f),
            b_v: v(&self.b_v),
            w_o: self.w_o.map(f),
            b_o: v(&self.b_o),
            ln2_gain: v(&self.ln2_gain),
            ln2_shift: v(&self.ln2_shift),
            fc1: self.fc1.map(f),
            fc1_bias: v(&self.fc1_bias),
            fc2: self.fc2.map(f),
            fc2_bias: v(&self.fc2_bias),
        }
    }
}

/// Full parameter set plus the monotonic full-forward-pass counter.
///
/// Weights are immutable in normal operation; `forward` is a pure function
/// of (weights, input, mask) and safe to call from many threads. The pass
/// counter only ever increments.
#[derive(Debug)]
pub struct ModelWeights<F> {
    pub config: ModelConfig,
    /// Token embedding, also the tied unembedding (`[vocab x d_model]`).
    pub token_embedding: Matrix<F>,
    pub position_embedding: Matrix<F>,
    pub layers: Vec<LayerWeights<F>>,
    pub lnf_gain: Vec<F>,
    pub lnf_shift: Vec<F>,
    pass_counter: AtomicU64,
}

impl<F: Scalar> ModelWeights<F> {
    pub fn new(
        config: ModelConfig,
        token_embedding: Matrix<F>,
        position_embedding: Matrix<F>,
        layers: Vec<LayerWeights<F>>,
        lnf_gain: Vec<F>,
        lnf_shift: Vec<F>,
    ) -> Result<Self> {
        config.validate()?;
        let w = Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            lnf_gain,
            lnf_shift,
            pass_counter: AtomicU64::new(0),
        };
        w.validate_shapes()?;
        Ok(w)
    }

    pub fn validate_shapes(&self) -> Result<()> {
        let c = &self.config;
        let (d, n, b) = (c.d_model, c.d_ffn, c.vocab_size);
        let check = |ok: bool, what: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Shape(format!("{what} inconsistent with config")))
            }
        };
        check(
            self.token_embedding.rows() == b && self.token_embedding.cols() == d,
            "token_embedding",
        )?;
        check(
            self.position_embedding.rows() == c.max_positions
                && self.position_embedding.cols() == d,
            "position_embedding",
        )?;
        check(self.layers.len() == c.n_layers, "layer count")?;
        for (l, lw) in self.layers.iter().enumerate() {
            let ln_ok = lw.ln1_gain.len() == d
                && lw.ln1_shift.len() == d
                && lw.ln2_gain.len() == d
                && lw.ln2_shift.len() == d;
            check(ln_ok, &format!("layer {l} layernorm params"))?;
            for (m, bias) in [
                (&lw.w_q, &lw.b_q),
                (&lw.w_k, &lw.b_k),
                (&lw.w_v, &lw.b_v),
                (&lw.w_o, &lw.b_o),
            ] {
                check(
                    m.rows() == d && m.cols() == d && bias.len() == d,
                    &format!("layer {l} attention projection"),
                )?;
            }
            check(
                lw.fc1.rows() == n && lw.fc1.cols() == d && lw.fc1_bias.len() == n,
                &format!("layer {l} fc1"),
            )?;
            check(
                lw.fc2.rows() == n && lw.fc2.cols() == d && lw.fc2_bias.len() == d,
                &format!("layer {l} fc2"),
            )?;
        }
        check(
            self.lnf_gain.len() == d && self.lnf_shift.len() == d,
            "final layernorm",
        )?;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        let vf = |xs: &[F]| xs.iter().all(|v| v.is_finite());
        self.token_embedding.is_finite()
            && self.position_embedding.is_finite()
            && vf(&self.lnf_gain)
            && vf(&self.lnf_shift)
            && self.layers.iter().all(|l| {
                l.w_q.is_finite()
                    && l.w_k.is_finite()
                    && l.w_v.is_finite()
                    && l.w_o.is_finite()
                    && l.fc1.is_finite()
                    && l.fc2.is_finite()
                    && vf(&l.b_q)
                    && vf(&l.b_k)
                    && vf(&l.b_v)
                    && vf(&l.b_o)
                    && vf(&l.fc1_bias)
                    && vf(&l.fc2_bias)
                    && vf(&l.ln1_gain)
                    && vf(&l.ln1_shift)
                    && vf(&l.ln2_gain)
                    && vf(&l.ln2_shift)
            })
    }

    /// Total full forward passes executed against this weight set.
    pub fn forward_passes(&self) -> u64 {
        self.pass_counter.load(Ordering::Relaxed)
    }

    pub(crate) fn record_pass(&self) -> u64 {
        self.pass_counter.fetch_add(1, Ordering::Relaxed) + 1
    }

    /// Copy of the parameters with a fresh pass counter.
    pub fn clone_weights(&self) -> Self {
        Self {
            config: self.config.clone(),
            token_embedding: self.token_embedding.clone(),
            position_embedding: self.position_embedding.clone(),
            layers: self.layers.clone(),
            lnf_gain: self.lnf_gain.clone(),
            lnf_shift: self.lnf_shift.clone(),
            pass_counter: AtomicU64::new(0),
        }
    }

    /// Literally zero the subvalue of neuron `(layer, j)` in the stored
    /// weights ("plan B" ablation, for equivalence audits).
    pub fn zero_subvalue(&mut self, layer: usize, j: usize) {
        for v in self.layers[layer].fc2.row_mut(j) {
            *v = F::zero();
        }
    }

    pub fn map<G: Scalar>(&self, f: impl Fn(F) -> G) -> ModelWeights<G> {
        let v = |xs: &[F]| xs.iter().map(|&x| f(x)).collect::<Vec<G>>();
        ModelWeights {
            config: self.config.clone(),
            token_embedding: self.token_embedding.map(&f),
            position_embedding: self.position_embedding.map(&f),
            layers: self.layers.iter().map(|l| l.map(&f)).collect(),
            lnf_gain: v(&self.lnf_gain),
            lnf_shift: v(&self.lnf_shift),
            pass_counter: AtomicU64::new(0),
        }
    }
}

impl ModelWeights<f32> {
    /// Exact widening to f64 for wide-precision runs and oracle checks.
    pub fn widen(&self) -> ModelWeights<f64> {
        self.map(f64::from)
    }
}

/// Set of `(layer, neuron)` pairs whose FFN contributions are zeroed
/// during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AblationMask {
    neurons: BTreeSet<(usize, usize)>,
}

impl AblationMask {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_pairs<I: IntoIterator<Item = (usize, usize)>>(pairs: I) -> Self {
        Self {
            neurons: pairs.into_iter().collect(),
        }
    }

    pub fn insert(&mut self, layer: usize, neuron: usize) {
        self.neurons.insert((layer, neuron));
    }

    pub fn contains(&self, layer: usize, neuron: usize) -> bool {
        self.neurons.contains(&(layer, neuron))
    }

    pub fn len(&self) -> usize {
        self.neurons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neurons.iter().copied()
    }

    pub fn union(&self, other: &AblationMask) -> AblationMask {
        AblationMask {
            neurons: self.neurons.union(&other.neurons).copied().collect(),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for &(l, j) in &self.neurons {
            if l >= config.n_layers || j >= config.d_ffn {
                return Err(Error::IndexOutOfRange(format!(
                    "mask entry (layer {l}, neuron {j}) outside {}x{}",
                    config.n_layers, config.d_ffn
                )));
            }
        }
        Ok(())
    }

    /// Neurons of one layer as a dense flag vector, or None when the layer
    /// is untouched.
    pub(crate) fn layer_flags(&self, layer: usize, d_ffn: usize) -> Option<Vec<bool>> {
        let mut flags = None;
        for &(l, j) in self.neurons.range((layer, 0)..=(layer, usize::MAX)) {
            debug_assert_eq!(l, layer);
            flags.get_or_insert_with(|| vec![false; d_ffn])[j] = true;
        }
        flags
    }
}

#[derive(Serialize, Deserialize)]
struct MaskEntry {
    layer: usize,
    index: usize,
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    neurons: Vec<MaskEntry>,
}

impl Serialize for AblationMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let file = MaskFile {
            neurons: self
                .neurons
                .iter()
                .map(|&(layer, index)| MaskEntry { layer, index })
                .collect(),
        };
        file.serialize(s)
    }
}

impl<'de> Deserialize<'de> for AblationMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = MaskFile::deserialize(d)?;
        Ok(AblationMask::from_pairs(
            file.neurons.into_iter().map(|e| (e.layer, e.index)),
        ))
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    use tests_config::tiny_config;

    #[test]
    fn config_validation_catches_bad_geometry() {
        let mut c = tiny_config();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.ln_epsilon = 0.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.n_layers = 0;
        assert!(c.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn gpt2_large_geometry_is_valid() {
        let c = ModelConfig::gpt2_large();
        assert_eq!(c.n_layers, 36);
        assert_eq!(c.d_model, 1280);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn mask_set_semantics() {
        let mut m = AblationMask::empty();
        m.insert(1, 3);
        m.insert(1, 3);
        m.insert(0, 5);
        assert_eq!(m.len(), 2);
        assert!(m.contains(1, 3));
        assert!(!m.contains(1, 4));
    }

    #[test]
    fn mask_json_round_trip_sorted() {
        let m = AblationMask::from_pairs([(1, 3), (0, 5), (0, 1)]);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(
            json,
            r#"{"neurons":[{"layer":0,"index":1},{"layer":0,"index":5},{"layer":1,"index":3}]}"#
        );
        let back: AblationMask = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn mask_validate_rejects_out_of_range() {
        let c = tiny_config();
        assert!(AblationMask::from_pairs([(2, 0)]).validate(&c).is_err());
        assert!(AblationMask::from_pairs([(0, 16)]).validate(&c).is_err());
        assert!(AblationMask::from_pairs([(1, 15)]).validate(&c).is_ok());
    }

    #[test]
    fn layer_flags_only_for_touched_layers() {
        let m = AblationMask::from_pairs([(1, 3), (1, 7)]);
        assert!(m.layer_flags(0, 16).is_none());
        let flags = m.layer_flags(1, 16).unwrap();
        assert!(flags[3] && flags[7]);
        assert_eq!(flags.iter().filter(|&&f| f).count(), 2);
    }
}
