//! Low-rank adapters for the denoiser's cross-attention projections. Each
//! adapted projection `W` gains a parallel bottleneck `x A^T B^T * scaling`
//! with `A` drawn small and `B` zero, so a freshly attached adapter leaves
//! every forward output bit-identical until training moves `B`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::gaussian_tensor;
use crate::seeds::stream_rng;
use crate::tape::{Binding, Tape, ValueRef};
use crate::tensor::Tensor;

/// The four cross-attention projections that receive adapters.
pub const ADAPTED_PROJECTIONS: [&str; 4] = ["wq", "wk", "wv", "wo"];

/// Checkpoint name of the down-projection of `proj`.
pub fn adapter_a_name(proj: &str) -> String {
    format!("adapter/{proj}/a")
}

/// Checkpoint name of the up-projection of `proj`.
pub fn adapter_b_name(proj: &str) -> String {
    format!("adapter/{proj}/b")
}

const SCALING_NAME: &str = "adapter/scaling";

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub scaling: f64,
    pub init_std: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 4, scaling: 1.0, init_std: 0.01 }
    }
}

/// One bottleneck pair: `a` is `[rank, d_in]`, `b` is `[d_out, rank]`.
#[derive(Debug, Clone)]
pub struct LowRankAdapter {
    pub a: Tensor,
    pub b: Tensor,
}

/// Adapters for all four cross-attention projections plus a shared scaling.
#[derive(Debug, Clone)]
pub struct AdapterSet {
    pub scaling: f64,
    pairs: BTreeMap<String, LowRankAdapter>,
}

impl AdapterSet {
    /// Fresh set: `a ~ N(0, init_std^2)`, `b = 0`.
    pub fn init(
        cfg: AdapterConfig,
        d_model: usize,
        d_cond: usize,
        d_attn: usize,
        seed: u64,
    ) -> Result<Self> {
        if cfg.rank == 0 {
            return Err(Error::Domain("adapter rank must be positive".into()));
        }
        let mut rng = stream_rng(seed, "adapter", 0);
        let mut pairs = BTreeMap::new();
        for proj in ADAPTED_PROJECTIONS {
            let (d_in, d_out) = match proj {
                "wq" => (d_model, d_attn),
                "wk" | "wv" => (d_cond, d_attn),
                _ => (d_attn, d_model),
            };
            let a = gaussian_tensor(&mut rng, vec![cfg.rank, d_in], cfg.init_std)?;
            let b = Tensor::zeros(vec![d_out, cfg.rank]);
            pairs.insert(proj.to_string(), LowRankAdapter { a, b });
        }
        Ok(Self { scaling: cfg.scaling, pairs })
    }

    pub fn rank(&self) -> usize {
        self.pairs["wq"].a.shape()[0]
    }

    pub fn pair(&self, proj: &str) -> Result<&LowRankAdapter> {
        self.pairs
            .get(proj)
            .ok_or_else(|| Error::Contract(format!("no adapter for projection `{proj}`")))
    }

    /// Number of trainable scalars across all pairs.
    pub fn n_trainable(&self) -> usize {
        self.pairs.values().map(|p| p.a.len() + p.b.len()).sum()
    }

    /// Adapter contribution `x a^T b^T * scaling` for projection `proj`.
    /// `a`/`b` resolve through `binding` so they can be trained.
    pub fn delta(
        &self,
        tape: &mut Tape,
        proj: &str,
        x: ValueRef,
        binding: &Binding,
    ) -> Result<ValueRef> {
        let pair = self.pair(proj)?;
        let a = binding.resolve(tape, &adapter_a_name(proj), &pair.a);
        let b = binding.resolve(tape, &adapter_b_name(proj), &pair.b);
        let down = tape.matmul_tb(x, a)?;
        let up = tape.matmul_tb(down, b)?;
        tape.scale(up, self.scaling)
    }

    /// All tensors (pairs plus scaling) keyed by checkpoint name.
    pub fn export(&self) -> BTreeMap<String, Tensor> {
        let mut map = BTreeMap::new();
        for (proj, pair) in &self.pairs {
            map.insert(adapter_a_name(proj), pair.a.clone());
            map.insert(adapter_b_name(proj), pair.b.clone());
        }
        map.insert(SCALING_NAME.into(), Tensor::scalar(self.scaling));
        map
    }

    /// Rebuilds a set from checkpoint tensors; `Ok(None)` when the map holds
    /// no adapter entries at all.
    pub fn from_map(map: &BTreeMap<String, Tensor>) -> Result<Option<Self>> {
        if !map.keys().any(|k| k.starts_with("adapter/")) {
            return Ok(None);
        }
        let scaling = map
            .get(SCALING_NAME)
            .ok_or_else(|| Error::MissingArtifact(format!("tensor `{SCALING_NAME}`")))?
            .scalar_value()?;
        let mut pairs = BTreeMap::new();
        for proj in ADAPTED_PROJECTIONS {
            let a = map
                .get(&adapter_a_name(proj))
                .cloned()
                .ok_or_else(|| Error::MissingArtifact(format!("tensor `adapter/{proj}/a`")))?;
            let b = map
                .get(&adapter_b_name(proj))
                .cloned()
                .ok_or_else(|| Error::MissingArtifact(format!("tensor `adapter/{proj}/b`")))?;
            if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[1] {
                return Err(Error::Format(format!(
                    "adapter `{proj}` has inconsistent shapes {:?} / {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            pairs.insert(proj.to_string(), LowRankAdapter { a, b });
        }
        Ok(Some(Self { scaling, pairs }))
    }
}
