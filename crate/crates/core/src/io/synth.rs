//! Deterministic synthetic models for tests and desk-scale experiments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::math::Matrix;
use crate::model::{LayerWeights, ModelConfig, ModelWeights};

const WEIGHT_STD: f32 = 0.02;

struct Gen {
    rng: ChaCha8Rng,
    weight: Normal<f32>,
    gain: Normal<f32>,
}

impl Gen {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            weight: Normal::new(0.0, WEIGHT_STD).unwrap(),
            gain: Normal::new(1.0, WEIGHT_STD).unwrap(),
        }
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Matrix<f32> {
        let data = (0..rows * cols)
            .map(|_| self.weight.sample(&mut self.rng))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn vector(&mut self, len: usize) -> Vec<f32> {
        (0..len).map(|_| self.weight.sample(&mut self.rng)).collect()
    }

    fn gains(&mut self, len: usize) -> Vec<f32> {
        (0..len).map(|_| self.gain.sample(&mut self.rng)).collect()
    }
}

/// Generate pseudo-random weights (std ~0.02, gains near 1) with a fixed
/// draw order, so the same seed and config always produce bit-identical
/// parameters. Biases are drawn too, which keeps bias-handling bugs visible
/// in the oracle tests.
pub fn synth_model(seed: u64, config: &ModelConfig) -> ModelWeights<f32> {
    config.validate().expect("synth_model needs a valid config");
    let mut g = Gen::new(seed);
    let d = config.d_model;
    let n = config.d_ffn;

    let token_embedding = g.matrix(config.vocab_size, d);
    let position_embedding = g.matrix(config.max_positions, d);

    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            ln1_gain: g.gains(d),
            ln1_shift: g.vector(d),
            w_q: g.matrix(d, d),
            b_q: g.vector(d),
            w_k: g.matrix(d, d),
            b_k: g.vector(d),
            w_v: g.matrix(d, d),
            b_v: g.vector(d),
            w_o: g.matrix(d, d),
            b_o: g.vector(d),
            ln2_gain: g.gains(d),
            ln2_shift: g.vector(d),
            fc1: g.matrix(n, d),
            fc1_bias: g.vector(n),
            fc2: g.matrix(n, d),
            fc2_bias: g.vector(d),
        })
        .collect();

    let lnf_gain = g.gains(d);
    let lnf_shift = g.vector(d);

    ModelWeights::new(
        config.clone(),
        token_embedding,
        position_embedding,
        layers,
        lnf_gain,
        lnf_shift,
    )
    .expect("synth shapes follow the config by construction")
}
