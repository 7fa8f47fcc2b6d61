//! The full conditional generation engine: embedding bank, sequence encoder,
//! and denoiser bundled as one checkpointable unit. The vocabulary layout is
//! stored alongside the tensors, so a checkpoint alone rebuilds the engine.

use std::collections::BTreeMap;
use std::path::Path;

use crate::checkpoint::{load_tensors, save_tensors};
use crate::denoiser::{Denoiser, DenoiserDims};
use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::tape::{Binding, Tape, ValueRef};
use crate::tensor::Tensor;
use crate::tokens::{compose_condition, TokenBank, VocabLayout, NULL_ID, VOCAB_WEIGHT};

/// Checkpoint entry carrying the vocabulary layout (not a trainable weight).
pub const LAYOUT_TENSOR: &str = "vocab/layout";

#[derive(Debug, Clone)]
pub struct Engine {
    pub bank: TokenBank,
    pub encoder: TextEncoder,
    pub denoiser: Denoiser,
}

impl Engine {
    /// Fresh engine. Token width equals the denoiser's condition width, and
    /// the encoder preserves width, so slot rows, embedded ids, and condition
    /// rows all live in the same space.
    pub fn init(
        layout: VocabLayout,
        dims: DenoiserDims,
        encoder_hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            bank: TokenBank::init(layout, dims.d_cond, seed)?,
            encoder: TextEncoder::init(dims.d_cond, encoder_hidden, seed)?,
            denoiser: Denoiser::init(dims, seed)?,
        })
    }

    /// Every tensor of the engine, keyed by checkpoint name.
    pub fn export(&self) -> BTreeMap<String, Tensor> {
        let mut map = self.denoiser.export();
        map.extend(self.encoder.export());
        map.insert(VOCAB_WEIGHT.into(), self.bank.embeddings.clone());
        let l = self.bank.layout;
        map.insert(
            LAYOUT_TENSOR.into(),
            Tensor::new(
                vec![3],
                vec![l.n_categories as f64, l.residual_dim as f64, l.residual_bins as f64],
            )
            .expect("layout tensor"),
        );
        map
    }

    /// Names of every trainable weight (the layout entry is excluded).
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = vec![VOCAB_WEIGHT.to_string()];
        names.extend(self.encoder.export().into_keys());
        names.extend(Denoiser::weight_names(&self.denoiser.dims));
        names
    }

    pub fn from_weights(map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let layout_raw = map
            .get(LAYOUT_TENSOR)
            .ok_or_else(|| Error::MissingArtifact(format!("tensor `{LAYOUT_TENSOR}`")))?;
        if layout_raw.len() != 3 {
            return Err(Error::Format(format!(
                "`{LAYOUT_TENSOR}` must hold 3 entries, found {}",
                layout_raw.len()
            )));
        }
        let as_count = |x: f64, what: &str| -> Result<usize> {
            if x.fract() != 0.0 || x < 0.0 || x > u32::MAX as f64 {
                return Err(Error::Format(format!("invalid {what} count {x} in `{LAYOUT_TENSOR}`")));
            }
            Ok(x as usize)
        };
        let layout = VocabLayout::new(
            as_count(layout_raw.data()[0], "category")?,
            as_count(layout_raw.data()[1], "residual dim")?,
            as_count(layout_raw.data()[2], "residual bin")?,
        )?;
        let embeddings = map
            .get(VOCAB_WEIGHT)
            .cloned()
            .ok_or_else(|| Error::MissingArtifact(format!("tensor `{VOCAB_WEIGHT}`")))?;
        let bank = TokenBank::from_embeddings(layout, embeddings)?;
        let encoder = TextEncoder::from_weights(map)?;
        let denoiser = Denoiser::from_weights(map)?;
        if encoder.d_model != denoiser.dims.d_cond || bank.d_tok != denoiser.dims.d_cond {
            return Err(Error::Format(format!(
                "checkpoint widths disagree: tokens {}, encoder {}, condition {}",
                bank.d_tok, encoder.d_model, denoiser.dims.d_cond
            )));
        }
        Ok(Self { bank, encoder, denoiser })
    }

    /// Engine with tensors from `updates` replacing the current ones (used to
    /// fold trained values back in; unknown names are rejected).
    pub fn with_updates(&self, updates: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut map = self.export();
        for (name, tensor) in updates {
            match map.get(name) {
                Some(old) if old.shape() == tensor.shape() => {
                    map.insert(name.clone(), tensor.clone());
                }
                Some(old) => {
                    return Err(Error::Shape {
                        op: "engine_update",
                        detail: format!(
                            "tensor `{name}` has shape {:?}, engine expects {:?}",
                            tensor.shape(),
                            old.shape()
                        ),
                    })
                }
                None => {
                    return Err(Error::Contract(format!(
                        "engine has no tensor named `{name}`"
                    )))
                }
            }
        }
        Self::from_weights(&map)
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        save_tensors(stem, &self.export())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        Self::from_weights(&load_tensors(stem)?)
    }

    /// Encoded condition rows for an id sequence (frozen weights).
    pub fn encode_ids(&self, ids: &[usize]) -> Result<Tensor> {
        self.encoder.encode_ids(&self.bank, ids)
    }

    /// Encoded unconditional branch: the null token alone.
    pub fn null_condition(&self) -> Result<Tensor> {
        self.encode_ids(&[NULL_ID])
    }

    /// Encoded condition from plain slot rows: `[target, marker, residual]`
    /// when a residual block is present, otherwise the target rows alone.
    pub fn encode_slots(&self, target: &Tensor, residual: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let t = tape.constant(target.clone());
        let r = residual.map(|r| tape.constant(r.clone()));
        let composed = compose_condition(&mut tape, &self.bank, t, r, &Binding::none())?;
        let encoded = self.encoder.forward(&mut tape, composed, &Binding::none())?;
        Ok(tape.value(encoded)?.clone())
    }

    /// Graph-valued composed-and-encoded condition for training losses.
    pub fn encode_slots_graph(
        &self,
        tape: &mut Tape,
        target: ValueRef,
        residual: Option<ValueRef>,
        binding: &Binding,
    ) -> Result<ValueRef> {
        let composed = compose_condition(tape, &self.bank, target, residual, binding)?;
        self.encoder.forward(tape, composed, binding)
    }
}
