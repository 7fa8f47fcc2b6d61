//! Sequence encoder that turns descriptor token rows into condition rows for
//! the denoiser: fixed sinusoidal position codes, one residual self-attention
//! layer, and one residual position-wise MLP. Token and condition width are
//! the same, so tuned slot rows and embedded id rows pass through identically.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{fan_in_std, gaussian_tensor, sinusoidal_table};
use crate::seeds::stream_rng;
use crate::tape::{Binding, Tape, ValueRef};
use crate::tensor::Tensor;
use crate::tokens::TokenBank;

/// Weight names owned by the encoder.
pub const ENCODER_WEIGHTS: [&str; 8] = [
    "encoder/attn/wq",
    "encoder/attn/wk",
    "encoder/attn/wv",
    "encoder/attn/wo",
    "encoder/mlp/w1",
    "encoder/mlp/b1",
    "encoder/mlp/w2",
    "encoder/mlp/b2",
];

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub d_model: usize,
    pub d_hidden: usize,
    weights: BTreeMap<String, Tensor>,
}

impl TextEncoder {
    /// Fresh encoder with fan-in scaled Gaussian weights and zero biases.
    pub fn init(d_model: usize, d_hidden: usize, seed: u64) -> Result<Self> {
        if d_model == 0 || d_model % 2 != 0 || d_hidden == 0 {
            return Err(Error::Domain(format!(
                "encoder widths must be positive with even d_model, got {d_model}/{d_hidden}"
            )));
        }
        let mut rng = stream_rng(seed, "encoder", 0);
        let mut weights = BTreeMap::new();
        for name in ["wq", "wk", "wv", "wo"] {
            weights.insert(
                format!("encoder/attn/{name}"),
                gaussian_tensor(&mut rng, vec![d_model, d_model], fan_in_std(d_model))?,
            );
        }
        weights.insert(
            "encoder/mlp/w1".into(),
            gaussian_tensor(&mut rng, vec![d_model, d_hidden], fan_in_std(d_model))?,
        );
        weights.insert("encoder/mlp/b1".into(), Tensor::zeros(vec![d_hidden]));
        weights.insert(
            "encoder/mlp/w2".into(),
            gaussian_tensor(&mut rng, vec![d_hidden, d_model], fan_in_std(d_hidden))?,
        );
        weights.insert("encoder/mlp/b2".into(), Tensor::zeros(vec![d_model]));
        Ok(Self { d_model, d_hidden, weights })
    }

    /// Rebuilds an encoder from checkpoint tensors; widths come from shapes.
    pub fn from_weights(map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut weights = BTreeMap::new();
        for name in ENCODER_WEIGHTS {
            let t = map
                .get(name)
                .cloned()
                .ok_or_else(|| Error::MissingArtifact(format!("tensor `{name}`")))?;
            weights.insert(name.to_string(), t);
        }
        let d_model = weights["encoder/attn/wq"].shape()[0];
        let w1 = weights["encoder/mlp/w1"].shape().to_vec();
        if w1[0] != d_model {
            return Err(Error::Format(format!(
                "encoder weight shapes disagree: attention width {d_model}, mlp input {}",
                w1[0]
            )));
        }
        Ok(Self { d_model, d_hidden: w1[1], weights })
    }

    /// Owned weights, keyed by checkpoint name.
    pub fn export(&self) -> BTreeMap<String, Tensor> {
        self.weights.clone()
    }

    fn resolve(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        name: &str,
    ) -> Result<ValueRef> {
        let fallback = self
            .weights
            .get(name)
            .ok_or_else(|| Error::Contract(format!("encoder has no weight `{name}`")))?;
        Ok(binding.resolve(tape, name, fallback))
    }

    /// Encodes `[len, d_model]` token rows into condition rows of the same
    /// shape. Gradients flow into `tokens` and into any bound weights.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: ValueRef,
        binding: &Binding,
    ) -> Result<ValueRef> {
        let shape = tape.value(tokens)?.shape().to_vec();
        if shape.len() != 2 || shape[1] != self.d_model {
            return Err(Error::Shape {
                op: "encoder".into(),
                detail: format!("expected [len, {}] token rows, got {shape:?}", self.d_model),
            });
        }
        let len = shape[0];
        let pos = tape.constant(sinusoidal_table(len, self.d_model)?);
        let x = tape.add(tokens, pos)?;

        let wq = self.resolve(tape, binding, "encoder/attn/wq")?;
        let wk = self.resolve(tape, binding, "encoder/attn/wk")?;
        let wv = self.resolve(tape, binding, "encoder/attn/wv")?;
        let wo = self.resolve(tape, binding, "encoder/attn/wo")?;
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let logits = tape.matmul_tb(q, k)?;
        let scaled = tape.scale(logits, 1.0 / (self.d_model as f64).sqrt())?;
        let attn = tape.softmax(scaled)?;
        let mixed = tape.matmul(attn, v)?;
        let proj = tape.matmul(mixed, wo)?;
        let x1 = tape.add(x, proj)?;

        let w1 = self.resolve(tape, binding, "encoder/mlp/w1")?;
        let b1 = self.resolve(tape, binding, "encoder/mlp/b1")?;
        let w2 = self.resolve(tape, binding, "encoder/mlp/w2")?;
        let b2 = self.resolve(tape, binding, "encoder/mlp/b2")?;
        let h = tape.affine(x1, w1, b1)?;
        let a = tape.tanh(h)?;
        let m = tape.affine(a, w2, b2)?;
        tape.add(x1, m)
    }

    /// Frozen encoding of plain token rows on a scratch tape.
    pub fn encode_plain(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.constant(tokens.clone());
        let out = self.forward(&mut tape, input, &Binding::none())?;
        Ok(tape.value(out)?.clone())
    }

    /// Frozen encoding of an id sequence via the bank's embedding table.
    pub fn encode_ids(&self, bank: &TokenBank, ids: &[usize]) -> Result<Tensor> {
        self.encode_plain(&bank.embed_plain(ids)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::tokens::VocabLayout;

    fn encoder() -> TextEncoder {
        TextEncoder::init(8, 12, 11).unwrap()
    }

    #[test]
    fn forward_shape_and_determinism() {
        let enc = encoder();
        let tokens = Tensor::new(vec![3, 8], (0..24).map(|i| (i as f64) * 0.05 - 0.5).collect())
            .unwrap();
        let a = enc.encode_plain(&tokens).unwrap();
        let b = enc.encode_plain(&tokens).unwrap();
        assert_eq!(a.shape(), &[3, 8]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn position_codes_break_order_symmetry() {
        let enc = encoder();
        let row_a: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let row_b: Vec<f64> = (0..8).map(|i| 0.7 - 0.1 * i as f64).collect();
        let ab = Tensor::from_rows(&[row_a.clone(), row_b.clone()]).unwrap();
        let ba = Tensor::from_rows(&[row_b, row_a]).unwrap();
        let e_ab = enc.encode_plain(&ab).unwrap();
        let e_ba = enc.encode_plain(&ba).unwrap();
        // Swapping the input rows must not merely swap the output rows.
        assert_ne!(e_ab.row(0).unwrap(), e_ba.row(1).unwrap());
        assert_ne!(e_ab.row(1).unwrap(), e_ba.row(0).unwrap());
    }

    #[test]
    fn round_trips_through_weight_map() {
        let enc = encoder();
        let map = enc.export();
        assert_eq!(map.len(), ENCODER_WEIGHTS.len());
        let back = TextEncoder::from_weights(&map).unwrap();
        assert_eq!(back.d_model, 8);
        assert_eq!(back.d_hidden, 12);
        let tokens = Tensor::full(vec![2, 8], 0.3);
        assert_eq!(
            enc.encode_plain(&tokens).unwrap().data(),
            back.encode_plain(&tokens).unwrap().data()
        );

        let mut broken = map.clone();
        broken.remove("encoder/mlp/w2");
        assert!(matches!(
            TextEncoder::from_weights(&broken),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn gradient_through_encoder_matches_finite_differences() {
        let enc = TextEncoder::init(4, 6, 5).unwrap();
        let layout = VocabLayout::new(2, 1, 2).unwrap();
        let bank = TokenBank::init(layout, 4, 9).unwrap();
        let ids = vec![3, 1, 5];
        let build = |tape: &mut Tape, params: &[ValueRef]| {
            let rows = tape.gather_rows(params[0], &ids)?;
            let out = enc.forward(tape, rows, &Binding::none())?;
            tape.sq_norm(out)
        };
        let err = finite_diff_check(&build, &[bank.embeddings.clone()], 1e-5).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn encode_ids_matches_manual_embed() {
        let enc = encoder();
        let layout = VocabLayout::new(3, 2, 3).unwrap();
        let bank = TokenBank::init(layout, 8, 2).unwrap();
        let ids = bank.layout.descriptor(1, &[0.0, 0.9]).unwrap();
        let direct = enc.encode_ids(&bank, &ids).unwrap();
        let manual = enc.encode_plain(&bank.embed_plain(&ids).unwrap()).unwrap();
        assert_eq!(direct.data(), manual.data());
        assert_eq!(direct.shape(), &[3, 8]);
    }
}
