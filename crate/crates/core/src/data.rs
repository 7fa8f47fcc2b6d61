//! Synthetic concept-set data with a known factorization: every clean vector
//! is a target-category direction plus a residual combination inside an
//! orthonormal frame, plus isotropic observation noise. Because the frame is
//! known, target and residual content of any vector can be read back exactly,
//! which is what the evaluation probes rely on.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_paths, decode_blob, encode_blob, TensorEntry, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::seeds::stream_rng;
use crate::tensor::Tensor;
use crate::tokens::VocabLayout;

/// Geometry and noise level of the synthetic data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataParams {
    /// Ambient dimension of the modeled vectors.
    pub data_dim: usize,
    /// Number of target categories (one frame direction each).
    pub n_categories: usize,
    /// Residual coordinates per item.
    pub residual_dim: usize,
    /// Quantization bins per residual coordinate for descriptors.
    pub residual_bins: usize,
    /// Std of the isotropic observation noise.
    pub noise_std: f64,
}

impl Default for DataParams {
    fn default() -> Self {
        Self { data_dim: 16, n_categories: 8, residual_dim: 4, residual_bins: 5, noise_std: 0.05 }
    }
}

impl DataParams {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim < self.n_categories + self.residual_dim {
            return Err(Error::Domain(format!(
                "data_dim {} cannot hold {} category + {} residual directions",
                self.data_dim, self.n_categories, self.residual_dim
            )));
        }
        if self.n_categories == 0 || self.residual_bins == 0 {
            return Err(Error::Domain("need at least one category and one bin".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Domain(format!("invalid noise_std {}", self.noise_std)));
        }
        Ok(())
    }

    /// Vocabulary layout matching this geometry.
    pub fn layout(&self) -> Result<VocabLayout> {
        VocabLayout::new(self.n_categories, self.residual_dim, self.residual_bins)
    }
}

/// Orthonormal frame `[target basis | residual basis]` over the data space.
#[derive(Debug, Clone)]
pub struct FactorFrame {
    /// `[data_dim, n_categories]`, one unit column per category.
    pub target_basis: Tensor,
    /// `[data_dim, residual_dim]`, one unit column per residual coordinate.
    pub residual_basis: Tensor,
}

impl FactorFrame {
    /// Seeded random orthonormal frame via modified Gram-Schmidt (two
    /// passes, so mutual overlaps stay at the 1e-15 level).
    pub fn generate(params: &DataParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let d = params.data_dim;
        let n = params.n_categories + params.residual_dim;
        let mut rng = stream_rng(seed, "data/frame", 0);
        let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Domain(e.to_string()))?;
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        for _pass in 0..2 {
            for i in 0..n {
                for j in 0..i {
                    let dot: f64 = (0..d).map(|k| cols[i][k] * cols[j][k]).sum();
                    for k in 0..d {
                        cols[i][k] -= dot * cols[j][k];
                    }
                }
                let norm: f64 = (0..d).map(|k| cols[i][k] * cols[i][k]).sum::<f64>().sqrt();
                if norm < 1e-8 {
                    return Err(Error::Data(
                        "degenerate random frame: near-dependent columns".into(),
                    ));
                }
                for k in 0..d {
                    cols[i][k] /= norm;
                }
            }
        }
        let column_major = |range: std::ops::Range<usize>| -> Result<Tensor> {
            let width = range.len();
            let mut data = vec![0.0; d * width];
            for (out_col, col) in range.enumerate() {
                for k in 0..d {
                    data[k * width + out_col] = cols[col][k];
                }
            }
            Tensor::new(vec![d, width], data)
        };
        Ok(Self {
            target_basis: column_major(0..params.n_categories)?,
            residual_basis: column_major(params.n_categories..n)?,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.target_basis.shape()[0]
    }

    /// Largest deviation of the joint frame from exact orthonormality.
    pub fn orthonormality_error(&self) -> f64 {
        let d = self.data_dim();
        let nt = self.target_basis.shape()[1];
        let nr = self.residual_basis.shape()[1];
        let col = |j: usize, k: usize| -> f64 {
            if j < nt {
                self.target_basis.data()[k * nt + j]
            } else {
                self.residual_basis.data()[k * nr + (j - nt)]
            }
        };
        let n = nt + nr;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..d).map(|k| col(i, k) * col(j, k)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }

    /// Clean vector for `(category, residual)` as a `[1, data_dim]` row.
    pub fn compose(&self, category: usize, residual: &[f64]) -> Result<Tensor> {
        let nt = self.target_basis.shape()[1];
        let nr = self.residual_basis.shape()[1];
        if category >= nt {
            return Err(Error::Domain(format!("category {category} out of range ({nt})")));
        }
        if residual.len() != nr {
            return Err(Error::Domain(format!(
                "residual has {} coordinates, frame expects {nr}",
                residual.len()
            )));
        }
        let d = self.data_dim();
        let mut out = vec![0.0; d];
        for k in 0..d {
            out[k] = self.target_basis.data()[k * nt + category];
            for (j, &r) in residual.iter().enumerate() {
                out[k] += r * self.residual_basis.data()[k * nr + j];
            }
        }
        Tensor::new(vec![1, d], out)
    }

    /// Coordinates of `x` (a `[1, data_dim]` row) in the target basis.
    pub fn project_target(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.project(x, &self.target_basis)
    }

    /// Coordinates of `x` in the residual basis.
    pub fn project_residual(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.project(x, &self.residual_basis)
    }

    fn project(&self, x: &Tensor, basis: &Tensor) -> Result<Vec<f64>> {
        let d = self.data_dim();
        if x.shape() != [1, d] {
            return Err(Error::Shape {
                op: "frame_project",
                detail: format!("expected [1, {d}], got {:?}", x.shape()),
            });
        }
        let width = basis.shape()[1];
        let mut out = vec![0.0; width];
        for j in 0..width {
            out[j] = (0..d).map(|k| x.data()[k] * basis.data()[k * width + j]).sum();
        }
        Ok(out)
    }
}

/// One personalization item: a residual vector under the set's category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptItem {
    pub residual: Vec<f64>,
}

/// A small set of items sharing one target category, plus the generating
/// frame and parameters.
#[derive(Debug, Clone)]
pub struct ConceptSet {
    pub params: DataParams,
    pub seed: u64,
    pub target_category: usize,
    pub items: Vec<ConceptItem>,
    pub frame: FactorFrame,
}

impl ConceptSet {
    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// Clean vector of item `i`.
    pub fn clean(&self, item: usize) -> Result<Tensor> {
        let it = self
            .items
            .get(item)
            .ok_or_else(|| Error::Domain(format!("item {item} out of range")))?;
        self.frame.compose(self.target_category, &it.residual)
    }

    /// Noisy observation of item `i`.
    pub fn sample<R: Rng>(&self, item: usize, rng: &mut R) -> Result<Tensor> {
        let clean = self.clean(item)?;
        if self.params.noise_std == 0.0 {
            return Ok(clean);
        }
        let normal =
            Normal::new(0.0, self.params.noise_std).map_err(|e| Error::Domain(e.to_string()))?;
        Ok(clean.map(|x| x + normal.sample(rng)))
    }

    /// Full descriptor ids `[category, residual bins..]` of item `i`.
    pub fn descriptor(&self, item: usize) -> Result<Vec<usize>> {
        let it = self
            .items
            .get(item)
            .ok_or_else(|| Error::Domain(format!("item {item} out of range")))?;
        self.params.layout()?.descriptor(self.target_category, &it.residual)
    }

    /// Residual-only descriptor ids of item `i`.
    pub fn residual_descriptor(&self, item: usize) -> Result<Vec<usize>> {
        Ok(self.descriptor(item)?[1..].to_vec())
    }
}

/// Items in the broad pretraining corpus: any category, any residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub category: usize,
    pub residual: Vec<f64>,
}

/// Broad corpus over all categories, sharing the concept sets' frame.
#[derive(Debug, Clone)]
pub struct PretrainCorpus {
    pub params: DataParams,
    pub seed: u64,
    pub items: Vec<CorpusItem>,
    pub frame: FactorFrame,
}

impl PretrainCorpus {
    pub fn clean(&self, item: usize) -> Result<Tensor> {
        let it = self
            .items
            .get(item)
            .ok_or_else(|| Error::Domain(format!("item {item} out of range")))?;
        self.frame.compose(it.category, &it.residual)
    }

    pub fn sample<R: Rng>(&self, item: usize, rng: &mut R) -> Result<Tensor> {
        let clean = self.clean(item)?;
        if self.params.noise_std == 0.0 {
            return Ok(clean);
        }
        let normal =
            Normal::new(0.0, self.params.noise_std).map_err(|e| Error::Domain(e.to_string()))?;
        Ok(clean.map(|x| x + normal.sample(rng)))
    }

    pub fn descriptor(&self, item: usize) -> Result<Vec<usize>> {
        let it = self
            .items
            .get(item)
            .ok_or_else(|| Error::Domain(format!("item {item} out of range")))?;
        self.params.layout()?.descriptor(it.category, &it.residual)
    }
}

/// Generates a concept set with `n_items` pairwise-distinct residuals (their
/// quantized descriptors differ, so items stay distinguishable after
/// tokenization). The frame depends only on `(params, seed)`, so concept sets
/// and corpora from one seed share a frame.
pub fn generate_concept_set(
    params: &DataParams,
    n_items: usize,
    target_category: usize,
    seed: u64,
) -> Result<ConceptSet> {
    params.validate()?;
    if n_items < 2 {
        return Err(Error::Data(format!("a concept set needs at least 2 items, got {n_items}")));
    }
    if target_category >= params.n_categories {
        return Err(Error::Domain(format!(
            "target category {target_category} out of range ({})",
            params.n_categories
        )));
    }
    let frame = FactorFrame::generate(params, seed)?;
    let layout = params.layout()?;
    let mut rng = stream_rng(seed, "data/items", target_category as u64);
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut items = Vec::with_capacity(n_items);
    let mut attempts = 0usize;
    while items.len() < n_items {
        attempts += 1;
        if attempts > 1000 * n_items {
            return Err(Error::Data(format!(
                "could not draw {n_items} items with distinct descriptors \
                 ({} bins over {} dims)",
                params.residual_bins, params.residual_dim
            )));
        }
        let residual: Vec<f64> =
            (0..params.residual_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let key = layout.residual_descriptor(&residual)?;
        if seen.insert(key) {
            items.push(ConceptItem { residual });
        }
    }
    Ok(ConceptSet { params: *params, seed, target_category, items, frame })
}

/// Generates the broad pretraining corpus: `n_items` i.i.d. category and
/// residual draws. Requires at least 10 items per category so every target
/// direction is represented.
pub fn generate_pretrain_corpus(
    params: &DataParams,
    n_items: usize,
    seed: u64,
) -> Result<PretrainCorpus> {
    params.validate()?;
    if n_items < 10 * params.n_categories {
        return Err(Error::Data(format!(
            "corpus of {n_items} items is too small for {} categories (need at least {})",
            params.n_categories,
            10 * params.n_categories
        )));
    }
    let frame = FactorFrame::generate(params, seed)?;
    let mut rng = stream_rng(seed, "data/corpus", 0);
    let items = (0..n_items)
        .map(|_| CorpusItem {
            category: rng.random_range(0..params.n_categories),
            residual: (0..params.residual_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    Ok(PretrainCorpus { params: *params, seed, items, frame })
}

const DATASET_KIND: &str = "concept_set";

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    kind: String,
    schema_version: u32,
    params: DataParams,
    seed: u64,
    target_category: usize,
    n_items: usize,
    tensors: Vec<TensorEntry>,
}

/// Writes a concept set as `<stem>.json` + `<stem>.bin`.
pub fn save_concept_set(stem: &Path, set: &ConceptSet) -> Result<()> {
    let mut tensors = std::collections::BTreeMap::new();
    tensors.insert("frame/target".to_string(), set.frame.target_basis.clone());
    tensors.insert("frame/residual".to_string(), set.frame.residual_basis.clone());
    let residual_rows: Vec<Vec<f64>> = set.items.iter().map(|it| it.residual.clone()).collect();
    tensors.insert("items/residuals".to_string(), Tensor::from_rows(&residual_rows)?);
    let (entries, blob) = encode_blob(&tensors);
    let manifest = DatasetManifest {
        kind: DATASET_KIND.into(),
        schema_version: SCHEMA_VERSION,
        params: set.params,
        seed: set.seed,
        target_category: set.target_category,
        n_items: set.items.len(),
        tensors: entries,
    };
    let (json_path, bin_path) = checkpoint_paths(stem);
    if let Some(parent) = json_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&json_path, text)?;
    std::fs::write(&bin_path, blob)?;
    Ok(())
}

/// Reads a concept set back; validates kind, schema, shapes, and that the
/// stored frame is still orthonormal.
pub fn load_concept_set(stem: &Path) -> Result<ConceptSet> {
    let (json_path, bin_path) = checkpoint_paths(stem);
    let text = std::fs::read_to_string(&json_path)
        .map_err(|_| Error::MissingArtifact(json_path.display().to_string()))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("dataset manifest: {e}")))?;
    if manifest.kind != DATASET_KIND {
        return Err(Error::Format(format!(
            "expected a `{DATASET_KIND}` dataset, found kind `{}`",
            manifest.kind
        )));
    }
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion { found: manifest.schema_version, expected: SCHEMA_VERSION });
    }
    manifest.params.validate()?;
    let blob = std::fs::read(&bin_path)
        .map_err(|_| Error::MissingArtifact(bin_path.display().to_string()))?;
    let tensors = decode_blob(&manifest.tensors, &blob)?;
    let need = |name: &str| -> Result<Tensor> {
        tensors
            .get(name)
            .cloned()
            .ok_or_else(|| Error::MissingArtifact(format!("tensor `{name}`")))
    };
    let frame = FactorFrame {
        target_basis: need("frame/target")?,
        residual_basis: need("frame/residual")?,
    };
    let p = &manifest.params;
    if frame.target_basis.shape() != [p.data_dim, p.n_categories]
        || frame.residual_basis.shape() != [p.data_dim, p.residual_dim]
    {
        return Err(Error::Format("stored frame shapes disagree with params".into()));
    }
    if frame.orthonormality_error() > 1e-10 {
        return Err(Error::Format("stored frame is not orthonormal".into()));
    }
    let residuals = need("items/residuals")?;
    if residuals.shape() != [manifest.n_items, p.residual_dim] {
        return Err(Error::Format("stored residuals disagree with manifest".into()));
    }
    let items = (0..manifest.n_items)
        .map(|i| Ok(ConceptItem { residual: residuals.row(i)?.to_vec() }))
        .collect::<Result<Vec<_>>>()?;
    if manifest.target_category >= p.n_categories {
        return Err(Error::Format(format!(
            "target category {} out of range",
            manifest.target_category
        )));
    }
    Ok(ConceptSet {
        params: manifest.params,
        seed: manifest.seed,
        target_category: manifest.target_category,
        items,
        frame,
    })
}
