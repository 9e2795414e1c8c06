//! GPT-2 checkpoint loading and saving in the safetensors container.
//!
//! Checkpoints store both projection matrices of each block in `[in x out]`
//! orientation (the Conv1D convention). On load, first-projection tensors
//! are transposed into the engine's row-subkey layout; `mlp.c_proj.weight`
//! already has subvalues as rows and is kept as stored.

use std::collections::BTreeMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::model::{LayerWeights, ModelConfig, ModelWeights};

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn f32_from_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

struct Reader<'a> {
    tensors: SafeTensors<'a>,
}

impl<'a> Reader<'a> {
    fn view(&self, name: &str) -> Result<TensorView<'a>> {
        self.tensors
            .tensor(name)
            .or_else(|_| self.tensors.tensor(&format!("transformer.{name}")))
            .map_err(|_| Error::MissingTensor(name.to_string()))
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix<f32>> {
        let view = self.view(name)?;
        if view.dtype() != Dtype::F32 {
            return Err(Error::CorruptContainer(format!(
                "{name}: expected F32, got {:?}",
                view.dtype()
            )));
        }
        if view.shape() != [rows, cols] {
            return Err(Error::Shape(format!(
                "{name}: expected [{rows}, {cols}], got {:?}",
                view.shape()
            )));
        }
        Matrix::from_vec(rows, cols, f32_from_bytes(view.data()))
    }

    fn vector(&self, name: &str, len: usize) -> Result<Vec<f32>> {
        let view = self.view(name)?;
        if view.dtype() != Dtype::F32 {
            return Err(Error::CorruptContainer(format!(
                "{name}: expected F32, got {:?}",
                view.dtype()
            )));
        }
        if view.shape() != [len] {
            return Err(Error::Shape(format!(
                "{name}: expected [{len}], got {:?}",
                view.shape()
            )));
        }
        Ok(f32_from_bytes(view.data()))
    }
}

/// Split the fused `c_attn` weight `[d x 3d]` (checkpoint orientation) into
/// transposed q/k/v matrices in engine orientation (`[d x d]`, rows = outputs).
fn split_qkv(fused: &Matrix<f32>, d: usize) -> (Matrix<f32>, Matrix<f32>, Matrix<f32>) {
    let mut q = Matrix::zeros(d, d);
    let mut k = Matrix::zeros(d, d);
    let mut v = Matrix::zeros(d, d);
    for i in 0..d {
        let row = fused.row(i);
        for o in 0..d {
            q.row_mut(o)[i] = row[o];
            k.row_mut(o)[i] = row[d + o];
            v.row_mut(o)[i] = row[2 * d + o];
        }
    }
    (q, k, v)
}

/// Load GPT-2-family weights from a safetensors file.
///
/// The unembedding is tied to `wte.weight`. Fails on missing tensors, shape
/// mismatches against `config`, non-F32 storage, non-finite values, or a
/// corrupt container.
pub fn load_model(path: &Path, config: &ModelConfig) -> Result<ModelWeights<f32>> {
    config.validate()?;
    let bytes = std::fs::read(path)?;
    let tensors = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::CorruptContainer(format!("{}: {e}", path.display())))?;
    let r = Reader { tensors };

    let d = config.d_model;
    let n = config.d_ffn;

    let token_embedding = r.matrix("wte.weight", config.vocab_size, d)?;
    let position_embedding = r.matrix("wpe.weight", config.max_positions, d)?;

    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = |suffix: &str| format!("h.{l}.{suffix}");
        let fused = r.matrix(&p("attn.c_attn.weight"), d, 3 * d)?;
        let (w_q, w_k, w_v) = split_qkv(&fused, d);
        let fused_bias = r.vector(&p("attn.c_attn.bias"), 3 * d)?;
        layers.push(LayerWeights {
            ln1_gain: r.vector(&p("ln_1.weight"), d)?,
            ln1_shift: r.vector(&p("ln_1.bias"), d)?,
            w_q,
            b_q: fused_bias[..d].to_vec(),
            w_k,
            b_k: fused_bias[d..2 * d].to_vec(),
            w_v,
            b_v: fused_bias[2 * d..].to_vec(),
            w_o: r.matrix(&p("attn.c_proj.weight"), d, d)?.transposed(),
            b_o: r.vector(&p("attn.c_proj.bias"), d)?,
            ln2_gain: r.vector(&p("ln_2.weight"), d)?,
            ln2_shift: r.vector(&p("ln_2.bias"), d)?,
            fc1: r.matrix(&p("mlp.c_fc.weight"), d, n)?.transposed(),
            fc1_bias: r.vector(&p("mlp.c_fc.bias"), n)?,
            fc2: r.matrix(&p("mlp.c_proj.weight"), n, d)?,
            fc2_bias: r.vector(&p("mlp.c_proj.bias"), d)?,
        });
    }

    let weights = ModelWeights::new(
        config.clone(),
        token_embedding,
        position_embedding,
        layers,
        r.vector("ln_f.weight", d)?,
        r.vector("ln_f.bias", d)?,
    )?;
    if !weights.all_finite() {
        return Err(Error::NonFinite(format!("weights in {}", path.display())));
    }
    Ok(weights)
}

/// Save weights as a safetensors file with GPT-2 tensor names, undoing the
/// engine's orientation changes so `load_model(save_model(w)) == w`.
pub fn save_model(path: &Path, weights: &ModelWeights<f32>) -> Result<()> {
    let d = weights.config.d_model;
    let n = weights.config.d_ffn;
    let mut entries: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();

    entries.insert(
        "wte.weight".into(),
        (
            vec![weights.config.vocab_size, d],
            weights.token_embedding.data().to_vec(),
        ),
    );
    entries.insert(
        "wpe.weight".into(),
        (
            vec![weights.config.max_positions, d],
            weights.position_embedding.data().to_vec(),
        ),
    );

    for (l, lw) in weights.layers.iter().enumerate() {
        let p = |suffix: &str| format!("h.{l}.{suffix}");
        let mut fused = vec![0.0f32; d * 3 * d];
        for o in 0..d {
            for i in 0..d {
                fused[i * 3 * d + o] = lw.w_q.row(o)[i];
                fused[i * 3 * d + d + o] = lw.w_k.row(o)[i];
                fused[i * 3 * d + 2 * d + o] = lw.w_v.row(o)[i];
            }
        }
        let mut fused_bias = lw.b_q.clone();
        fused_bias.extend_from_slice(&lw.b_k);
        fused_bias.extend_from_slice(&lw.b_v);

        entries.insert(p("ln_1.weight"), (vec![d], lw.ln1_gain.clone()));
        entries.insert(p("ln_1.bias"), (vec![d], lw.ln1_shift.clone()));
        entries.insert(p("attn.c_attn.weight"), (vec![d, 3 * d], fused));
        entries.insert(p("attn.c_attn.bias"), (vec![3 * d], fused_bias));
        entries.insert(
            p("attn.c_proj.weight"),
            (vec![d, d], lw.w_o.transposed().data().to_vec()),
        );
        entries.insert(p("attn.c_proj.bias"), (vec![d], lw.b_o.clone()));
        entries.insert(p("ln_2.weight"), (vec![d], lw.ln2_gain.clone()));
        entries.insert(p("ln_2.bias"), (vec![d], lw.ln2_shift.clone()));
        entries.insert(
            p("mlp.c_fc.weight"),
            (vec![d, n], lw.fc1.transposed().data().to_vec()),
        );
        entries.insert(p("mlp.c_fc.bias"), (vec![n], lw.fc1_bias.clone()));
        entries.insert(p("mlp.c_proj.weight"), (vec![n, d], lw.fc2.data().to_vec()));
        entries.insert(p("mlp.c_proj.bias"), (vec![d], lw.fc2_bias.clone()));
    }

    entries.insert("ln_f.weight".into(), (vec![d], weights.lnf_gain.clone()));
    entries.insert("ln_f.bias".into(), (vec![d], weights.lnf_shift.clone()));

    let byte_entries: Vec<(String, Vec<usize>, Vec<u8>)> = entries
        .into_iter()
        .map(|(name, (shape, data))| (name, shape, f32_bytes(&data)))
        .collect();
    let views: Vec<(&str, TensorView<'_>)> = byte_entries
        .iter()
        .map(|(name, shape, bytes)| {
            let view = TensorView::new(Dtype::F32, shape.clone(), bytes)
                .expect("shape and byte length are consistent by construction");
            (name.as_str(), view)
        })
        .collect();

    safetensors::serialize_to_file(views, None, path)
        .map_err(|e| Error::CorruptContainer(format!("serialize: {e}")))?;
    Ok(())
}
