//! Discrete vocabulary over concept descriptors, the learned embedding bank,
//! and the continuous token slots tuned by the first pipeline stage.
//!
//! The vocabulary holds three reserved entries (null, composition marker,
//! padding), one entry per target category, and one entry per
//! (residual dimension, quantization bin) pair. A descriptor for item `i` is
//! the id sequence `[category, bin(r_0), .., bin(r_{d-1})]`; composed
//! conditions join learned slot rows with the embedded composition marker.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seeds::stream_rng;
use crate::tape::{Binding, Tape, ValueRef};
use crate::tensor::Tensor;

/// Id of the unconditional (null) vocabulary entry.
pub const NULL_ID: usize = 0;
/// Id of the composition marker joining target and residual segments.
pub const WITH_ID: usize = 1;
/// Id of the padding entry (kept in the vocabulary for length augmentation).
pub const PAD_ID: usize = 2;
const RESERVED: usize = 3;

/// Shape of the discrete descriptor vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct VocabLayout {
    /// Number of target categories.
    pub n_categories: usize,
    /// Number of residual coordinates per item.
    pub residual_dim: usize,
    /// Quantization bins per residual coordinate over [-1, 1].
    pub residual_bins: usize,
}

impl VocabLayout {
    pub fn new(n_categories: usize, residual_dim: usize, residual_bins: usize) -> Result<Self> {
        if n_categories == 0 || residual_bins == 0 {
            return Err(Error::Domain(
                "vocab layout needs at least one category and one bin".into(),
            ));
        }
        Ok(Self { n_categories, residual_dim, residual_bins })
    }

    /// Total number of vocabulary entries.
    pub fn vocab_size(&self) -> usize {
        RESERVED + self.n_categories + self.residual_dim * self.residual_bins
    }

    /// Vocabulary id of target category `k`.
    pub fn target_id(&self, category: usize) -> Result<usize> {
        if category >= self.n_categories {
            return Err(Error::Domain(format!(
                "category {category} out of range (have {})",
                self.n_categories
            )));
        }
        Ok(RESERVED + category)
    }

    /// Vocabulary id of bin `bin` on residual coordinate `dim`.
    pub fn residual_id(&self, dim: usize, bin: usize) -> Result<usize> {
        if dim >= self.residual_dim || bin >= self.residual_bins {
            return Err(Error::Domain(format!(
                "residual token ({dim}, {bin}) out of range ({} dims, {} bins)",
                self.residual_dim, self.residual_bins
            )));
        }
        Ok(RESERVED + self.n_categories + dim * self.residual_bins + bin)
    }

    /// Bin index of residual value `x`, clamping to the [-1, 1] support.
    pub fn quantize(&self, x: f64) -> usize {
        let b = self.residual_bins as f64;
        let t = (x.clamp(-1.0, 1.0) + 1.0) / 2.0 * b;
        (t.floor() as usize).min(self.residual_bins - 1)
    }

    /// Center of bin `bin` in [-1, 1].
    pub fn bin_center(&self, bin: usize) -> Result<f64> {
        if bin >= self.residual_bins {
            return Err(Error::Domain(format!("bin {bin} out of range")));
        }
        let width = 2.0 / self.residual_bins as f64;
        Ok(-1.0 + (bin as f64 + 0.5) * width)
    }

    /// Descriptor id sequence `[category, bin(r_0), .., bin(r_{d-1})]`.
    pub fn descriptor(&self, category: usize, residual: &[f64]) -> Result<Vec<usize>> {
        if residual.len() != self.residual_dim {
            return Err(Error::Domain(format!(
                "residual has {} coordinates, layout expects {}",
                residual.len(),
                self.residual_dim
            )));
        }
        let mut ids = Vec::with_capacity(1 + self.residual_dim);
        ids.push(self.target_id(category)?);
        for (dim, &x) in residual.iter().enumerate() {
            ids.push(self.residual_id(dim, self.quantize(x))?);
        }
        Ok(ids)
    }

    /// The residual-only tail of a descriptor (no category token).
    pub fn residual_descriptor(&self, residual: &[f64]) -> Result<Vec<usize>> {
        Ok(self.descriptor(0, residual)?[1..].to_vec())
    }

    /// Continuous residual vector reconstructed from a descriptor tail.
    pub fn dequantize(&self, ids: &[usize]) -> Result<Vec<f64>> {
        if ids.len() != self.residual_dim {
            return Err(Error::Domain(format!(
                "expected {} residual ids, got {}",
                self.residual_dim,
                ids.len()
            )));
        }
        let mut out = Vec::with_capacity(ids.len());
        for (dim, &id) in ids.iter().enumerate() {
            let base = RESERVED + self.n_categories + dim * self.residual_bins;
            if id < base || id >= base + self.residual_bins {
                return Err(Error::UnknownToken { id, vocab: self.vocab_size() });
            }
            out.push(self.bin_center(id - base)?);
        }
        Ok(out)
    }
}

/// Name under which the embedding table registers as a trainable weight.
pub const VOCAB_WEIGHT: &str = "vocab/embeddings";

/// Learned embedding table over the descriptor vocabulary.
#[derive(Debug, Clone)]
pub struct TokenBank {
    pub layout: VocabLayout,
    pub d_tok: usize,
    /// `[vocab_size, d_tok]` embedding rows.
    pub embeddings: Tensor,
}

impl TokenBank {
    /// Fresh bank with N(0, 0.1^2) rows drawn from a dedicated seed stream.
    pub fn init(layout: VocabLayout, d_tok: usize, seed: u64) -> Result<Self> {
        if d_tok == 0 {
            return Err(Error::Domain("token width must be positive".into()));
        }
        let mut rng = stream_rng(seed, "vocab", 0);
        let normal = Normal::new(0.0, 0.1).map_err(|e| Error::Domain(e.to_string()))?;
        let n = layout.vocab_size();
        let data: Vec<f64> = (0..n * d_tok).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self { layout, d_tok, embeddings: Tensor::new(vec![n, d_tok], data)? })
    }

    pub fn from_embeddings(layout: VocabLayout, embeddings: Tensor) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.rows()? != layout.vocab_size() {
            return Err(Error::Shape {
                op: "token_bank".into(),
                detail: format!(
                    "embedding table {:?} does not cover {} vocabulary entries",
                    embeddings.shape(),
                    layout.vocab_size()
                ),
            });
        }
        let d_tok = embeddings.cols()?;
        Ok(Self { layout, d_tok, embeddings })
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        let vocab = self.layout.vocab_size();
        for &id in ids {
            if id >= vocab {
                return Err(Error::UnknownToken { id, vocab });
            }
        }
        Ok(())
    }

    /// Embedded id sequence as a `[len, d_tok]` graph value. The table enters
    /// through `binding`, so gradients flow to it when bound.
    pub fn embed(&self, tape: &mut Tape, ids: &[usize], binding: &Binding) -> Result<ValueRef> {
        if ids.is_empty() {
            return Err(Error::Contract("cannot embed an empty id sequence".into()));
        }
        self.check_ids(ids)?;
        let table = binding.resolve(tape, VOCAB_WEIGHT, &self.embeddings);
        tape.gather_rows(table, ids)
    }

    /// Plain embedded id sequence as a `[len, d_tok]` tensor.
    pub fn embed_plain(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::Contract("cannot embed an empty id sequence".into()));
        }
        self.check_ids(ids)?;
        let rows: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| self.embeddings.row(id).map(|r| r.to_vec()))
            .collect::<Result<_>>()?;
        Tensor::from_rows(&rows)
    }

    /// The single embedding row for `id` as a `[1, d_tok]` tensor.
    pub fn embedding_row(&self, id: usize) -> Result<Tensor> {
        self.embed_plain(&[id])
    }
}

/// Continuous token slots produced by the first pipeline stage: one block of
/// target rows plus one block of residual rows per item.
#[derive(Debug, Clone)]
pub struct TokenSlots {
    /// `[target_len, d_tok]` target block.
    pub target: Tensor,
    /// Per-item `[residual_len, d_tok]` blocks; empty when `residual_len == 0`.
    pub residuals: Vec<Tensor>,
}

/// Checkpoint name of the target slot block.
pub const TARGET_SLOT: &str = "tokens/target";

/// Checkpoint name of residual slot block `i` (zero padded for stable order).
pub fn residual_slot_name(i: usize) -> String {
    format!("tokens/residual/{i:02}")
}

impl TokenSlots {
    pub fn n_items(&self) -> usize {
        self.residuals.len()
    }

    pub fn residual_len(&self) -> usize {
        self.residuals.first().map_or(0, |r| r.shape()[0])
    }

    pub fn export(&self) -> Result<std::collections::BTreeMap<String, Tensor>> {
        let mut map = std::collections::BTreeMap::new();
        map.insert(TARGET_SLOT.to_string(), self.target.clone());
        for (i, r) in self.residuals.iter().enumerate() {
            map.insert(residual_slot_name(i), r.clone());
        }
        Ok(map)
    }

    pub fn from_map(map: &std::collections::BTreeMap<String, Tensor>) -> Result<Self> {
        let target = map
            .get(TARGET_SLOT)
            .cloned()
            .ok_or_else(|| Error::MissingArtifact(format!("tensor `{TARGET_SLOT}`")))?;
        let mut residuals = Vec::new();
        loop {
            match map.get(&residual_slot_name(residuals.len())) {
                Some(r) => residuals.push(r.clone()),
                None => break,
            }
        }
        Ok(Self { target, residuals })
    }
}

/// Composed condition `[target rows, composition marker, residual rows]` on
/// the tape. `target`/`residual` may be bound slots (stage one) or constants.
pub fn compose_condition(
    tape: &mut Tape,
    bank: &TokenBank,
    target: ValueRef,
    residual: Option<ValueRef>,
    binding: &Binding,
) -> Result<ValueRef> {
    match residual {
        None => Ok(target),
        Some(residual) => {
            let table = binding.resolve(tape, VOCAB_WEIGHT, &bank.embeddings);
            let with = tape.gather_rows(table, &[WITH_ID])?;
            tape.concat_rows(&[target, with, residual])
        }
    }
}

/// Ids for the unconditional branch: the single null token.
pub fn null_ids() -> Vec<usize> {
    vec![NULL_ID]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> VocabLayout {
        VocabLayout::new(8, 4, 5).unwrap()
    }

    #[test]
    fn id_ranges_are_disjoint_and_dense() {
        let l = layout();
        assert_eq!(l.vocab_size(), 3 + 8 + 20);
        assert_eq!(l.target_id(0).unwrap(), 3);
        assert_eq!(l.target_id(7).unwrap(), 10);
        assert_eq!(l.residual_id(0, 0).unwrap(), 11);
        assert_eq!(l.residual_id(3, 4).unwrap(), 30);
        let mut seen = std::collections::BTreeSet::new();
        seen.extend([NULL_ID, WITH_ID, PAD_ID]);
        for k in 0..8 {
            assert!(seen.insert(l.target_id(k).unwrap()));
        }
        for d in 0..4 {
            for b in 0..5 {
                assert!(seen.insert(l.residual_id(d, b).unwrap()));
            }
        }
        assert_eq!(seen.len(), l.vocab_size());
        assert_eq!(*seen.iter().max().unwrap(), l.vocab_size() - 1);
    }

    #[test]
    fn quantization_and_centers_round_trip() {
        let l = layout();
        // Bin width 0.4: edges at -1.0, -0.6, -0.2, 0.2, 0.6, 1.0.
        assert_eq!(l.quantize(-1.0), 0);
        assert_eq!(l.quantize(-0.61), 0);
        assert_eq!(l.quantize(-0.59), 1);
        assert_eq!(l.quantize(0.0), 2);
        assert_eq!(l.quantize(0.59), 3);
        assert_eq!(l.quantize(1.0), 4);
        assert_eq!(l.quantize(7.0), 4);
        assert_eq!(l.quantize(-7.0), 0);
        assert!((l.bin_center(0).unwrap() - -0.8).abs() < 1e-15);
        assert!((l.bin_center(2).unwrap() - 0.0).abs() < 1e-15);
        assert!((l.bin_center(4).unwrap() - 0.8).abs() < 1e-15);
        // Every center quantizes back to its own bin.
        for b in 0..5 {
            assert_eq!(l.quantize(l.bin_center(b).unwrap()), b);
        }
    }

    #[test]
    fn descriptor_layout_and_dequantize() {
        let l = layout();
        let ids = l.descriptor(2, &[-0.9, 0.0, 0.9, 0.1]).unwrap();
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[0], l.target_id(2).unwrap());
        assert_eq!(ids[1], l.residual_id(0, 0).unwrap());
        assert_eq!(ids[2], l.residual_id(1, 2).unwrap());
        assert_eq!(ids[3], l.residual_id(2, 4).unwrap());
        assert_eq!(ids[4], l.residual_id(3, 2).unwrap());
        let back = l.dequantize(&ids[1..]).unwrap();
        assert_eq!(back, vec![-0.8, 0.0, 0.8, 0.0]);
        // A residual id presented on the wrong coordinate is rejected.
        let mut bad = ids[1..].to_vec();
        bad.swap(0, 1);
        assert!(matches!(l.dequantize(&bad), Err(Error::UnknownToken { .. })));
    }

    #[test]
    fn bank_embedding_matches_table_rows() {
        let bank = TokenBank::init(layout(), 16, 7).unwrap();
        let ids = vec![3, 11, WITH_ID, 3];
        let plain = bank.embed_plain(&ids).unwrap();
        assert_eq!(plain.shape(), &[4, 16]);
        assert_eq!(plain.row(0).unwrap(), bank.embeddings.row(3).unwrap());
        assert_eq!(plain.row(2).unwrap(), bank.embeddings.row(1).unwrap());
        assert_eq!(plain.row(0).unwrap(), plain.row(3).unwrap());

        let mut tape = Tape::new();
        let on_tape = bank.embed(&mut tape, &ids, &Binding::none()).unwrap();
        assert_eq!(tape.value(on_tape).unwrap().data(), plain.data());

        assert!(matches!(
            bank.embed_plain(&[999]),
            Err(Error::UnknownToken { id: 999, vocab: 31 })
        ));
    }

    #[test]
    fn bank_init_is_seed_deterministic() {
        let a = TokenBank::init(layout(), 16, 7).unwrap();
        let b = TokenBank::init(layout(), 16, 7).unwrap();
        let c = TokenBank::init(layout(), 16, 8).unwrap();
        assert_eq!(a.embeddings.data(), b.embeddings.data());
        assert_ne!(a.embeddings.data(), c.embeddings.data());
    }

    #[test]
    fn compose_condition_concatenates_with_marker() {
        let bank = TokenBank::init(layout(), 8, 3).unwrap();
        let mut tape = Tape::new();
        let target = tape.constant(Tensor::full(vec![2, 8], 1.0));
        let residual = tape.constant(Tensor::full(vec![3, 8], 2.0));
        let cond =
            compose_condition(&mut tape, &bank, target, Some(residual), &Binding::none()).unwrap();
        let v = tape.value(cond).unwrap();
        assert_eq!(v.shape(), &[6, 8]);
        assert_eq!(v.row(0).unwrap(), &[1.0; 8]);
        assert_eq!(v.row(2).unwrap(), bank.embeddings.row(WITH_ID).unwrap());
        assert_eq!(v.row(3).unwrap(), &[2.0; 8]);

        let target_only =
            compose_condition(&mut tape, &bank, target, None, &Binding::none()).unwrap();
        assert_eq!(tape.value(target_only).unwrap().shape(), &[2, 8]);
    }

    #[test]
    fn slots_round_trip_through_map() {
        let slots = TokenSlots {
            target: Tensor::full(vec![1, 4], 0.5),
            residuals: vec![Tensor::full(vec![2, 4], 1.0), Tensor::full(vec![2, 4], 2.0)],
        };
        let map = slots.export().unwrap();
        assert_eq!(
            map.keys().cloned().collect::<Vec<_>>(),
            vec!["tokens/residual/00", "tokens/residual/01", "tokens/target"]
        );
        let back = TokenSlots::from_map(&map).unwrap();
        assert_eq!(back.n_items(), 2);
        assert_eq!(back.residual_len(), 2);
        assert_eq!(back.target.data(), slots.target.data());
        assert_eq!(back.residuals[1].data(), slots.residuals[1].data());
    }
}
