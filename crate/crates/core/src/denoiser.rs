//! Conditional noise-prediction network: a residual MLP over the data vector
//! whose hidden activations are feature-wise modulated by the diffusion step
//! and the pooled condition, with a single cross-attention block mid-stack
//! reading the full condition row sequence. The cross-attention projections
//! optionally carry low-rank adapters.

use std::collections::BTreeMap;

use crate::adapter::AdapterSet;
use crate::error::{Error, Result};
use crate::nn::{fan_in_std, gaussian_tensor, sinusoidal_code};
use crate::sampler::NoisePredictor;
use crate::seeds::stream_rng;
use crate::tape::{Binding, Tape, ValueRef};
use crate::tensor::Tensor;

/// Widths and depth of the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserDims {
    /// Width of the modeled data vectors.
    pub data_dim: usize,
    /// Trunk width.
    pub d_model: usize,
    /// Width of condition rows (encoder output).
    pub d_cond: usize,
    /// Width of cross-attention queries/keys/values.
    pub d_attn: usize,
    /// Hidden width of the modulated residual blocks.
    pub d_hidden: usize,
    /// Width of the sinusoidal step features.
    pub d_time: usize,
    /// Number of modulated residual blocks.
    pub n_blocks: usize,
}

impl Default for DenoiserDims {
    fn default() -> Self {
        Self {
            data_dim: 16,
            d_model: 32,
            d_cond: 32,
            d_attn: 32,
            d_hidden: 64,
            d_time: 32,
            n_blocks: 4,
        }
    }
}

impl DenoiserDims {
    fn validate(&self) -> Result<()> {
        let all = [
            self.data_dim,
            self.d_model,
            self.d_cond,
            self.d_attn,
            self.d_hidden,
            self.d_time,
            self.n_blocks,
        ];
        if all.iter().any(|&d| d == 0) || self.d_time % 2 != 0 {
            return Err(Error::Domain(format!(
                "denoiser dims must be positive with even d_time: {self:?}"
            )));
        }
        Ok(())
    }

    /// Block index in front of which the cross-attention block sits.
    pub fn cross_before_block(&self) -> usize {
        self.n_blocks / 2
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub dims: DenoiserDims,
    weights: BTreeMap<String, Tensor>,
    pub adapters: Option<AdapterSet>,
}

fn block_name(k: usize, leaf: &str) -> String {
    format!("denoiser/block{k}/{leaf}")
}

impl Denoiser {
    /// Fresh denoiser. Projections use fan-in scaled Gaussians; the
    /// modulation maps start near zero so every block opens close to a plain
    /// residual MLP.
    pub fn init(dims: DenoiserDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = stream_rng(seed, "denoiser", 0);
        let mut w = BTreeMap::new();
        let g = gaussian_tensor::<rand_chacha::ChaCha12Rng>;

        w.insert(
            "denoiser/in/w".into(),
            g(&mut rng, vec![dims.data_dim, dims.d_model], fan_in_std(dims.data_dim))?,
        );
        w.insert("denoiser/in/b".into(), Tensor::zeros(vec![dims.d_model]));
        w.insert(
            "denoiser/time/w1".into(),
            g(&mut rng, vec![dims.d_time, dims.d_hidden], fan_in_std(dims.d_time))?,
        );
        w.insert("denoiser/time/b1".into(), Tensor::zeros(vec![dims.d_hidden]));
        w.insert(
            "denoiser/time/w2".into(),
            g(&mut rng, vec![dims.d_hidden, dims.d_model], fan_in_std(dims.d_hidden))?,
        );
        w.insert("denoiser/time/b2".into(), Tensor::zeros(vec![dims.d_model]));

        for k in 0..dims.n_blocks {
            w.insert(
                block_name(k, "w1"),
                g(&mut rng, vec![dims.d_model, dims.d_hidden], fan_in_std(dims.d_model))?,
            );
            w.insert(block_name(k, "b1"), Tensor::zeros(vec![dims.d_hidden]));
            for leaf in ["gain_t", "shift_t"] {
                w.insert(block_name(k, leaf), g(&mut rng, vec![dims.d_model, dims.d_hidden], 0.02)?);
            }
            for leaf in ["gain_p", "shift_p"] {
                w.insert(block_name(k, leaf), g(&mut rng, vec![dims.d_cond, dims.d_hidden], 0.02)?);
            }
            w.insert(block_name(k, "gain_b"), Tensor::zeros(vec![dims.d_hidden]));
            w.insert(block_name(k, "shift_b"), Tensor::zeros(vec![dims.d_hidden]));
            w.insert(
                block_name(k, "w2"),
                g(&mut rng, vec![dims.d_hidden, dims.d_model], fan_in_std(dims.d_hidden))?,
            );
            w.insert(block_name(k, "b2"), Tensor::zeros(vec![dims.d_model]));
        }

        w.insert(
            "denoiser/cross/wq".into(),
            g(&mut rng, vec![dims.d_model, dims.d_attn], fan_in_std(dims.d_model))?,
        );
        w.insert(
            "denoiser/cross/wk".into(),
            g(&mut rng, vec![dims.d_cond, dims.d_attn], fan_in_std(dims.d_cond))?,
        );
        w.insert(
            "denoiser/cross/wv".into(),
            g(&mut rng, vec![dims.d_cond, dims.d_attn], fan_in_std(dims.d_cond))?,
        );
        w.insert(
            "denoiser/cross/wo".into(),
            g(&mut rng, vec![dims.d_attn, dims.d_model], fan_in_std(dims.d_attn))?,
        );
        w.insert(
            "denoiser/out/w".into(),
            g(&mut rng, vec![dims.d_model, dims.data_dim], fan_in_std(dims.d_model))?,
        );
        w.insert("denoiser/out/b".into(), Tensor::zeros(vec![dims.data_dim]));

        Ok(Self { dims, weights: w, adapters: None })
    }

    /// Rebuilds a denoiser from checkpoint tensors. Dims come from shapes;
    /// adapter tensors, when present, are restored too.
    pub fn from_weights(map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let need = |name: &str| -> Result<&Tensor> {
            map.get(name)
                .ok_or_else(|| Error::MissingArtifact(format!("tensor `{name}`")))
        };
        let in_w = need("denoiser/in/w")?;
        let time_w1 = need("denoiser/time/w1")?;
        let cross_wq = need("denoiser/cross/wq")?;
        let cross_wk = need("denoiser/cross/wk")?;
        let block0_w1 = need("denoiser/block0/w1")?;
        let mut n_blocks = 0;
        while map.contains_key(&block_name(n_blocks, "w1")) {
            n_blocks += 1;
        }
        let dims = DenoiserDims {
            data_dim: in_w.shape()[0],
            d_model: in_w.shape()[1],
            d_cond: cross_wk.shape()[0],
            d_attn: cross_wq.shape()[1],
            d_hidden: block0_w1.shape()[1],
            d_time: time_w1.shape()[0],
            n_blocks,
        };
        dims.validate()?;
        let mut weights = BTreeMap::new();
        for name in Self::weight_names(&dims) {
            weights.insert(name.clone(), need(&name)?.clone());
        }
        let adapters = AdapterSet::from_map(map)?;
        Ok(Self { dims, weights, adapters })
    }

    /// All weight names for `dims`, in checkpoint (lexicographic) order.
    pub fn weight_names(dims: &DenoiserDims) -> Vec<String> {
        let mut names = vec!["denoiser/in/b".to_string(), "denoiser/in/w".to_string()];
        for k in 0..dims.n_blocks {
            for leaf in ["b1", "b2", "gain_b", "gain_p", "gain_t", "shift_b", "shift_p", "shift_t", "w1", "w2"] {
                names.push(block_name(k, leaf));
            }
        }
        for leaf in ["wk", "wo", "wq", "wv"] {
            names.push(format!("denoiser/cross/{leaf}"));
        }
        names.push("denoiser/out/b".into());
        names.push("denoiser/out/w".into());
        for leaf in ["b1", "b2", "w1", "w2"] {
            names.push(format!("denoiser/time/{leaf}"));
        }
        names.sort();
        names
    }

    /// Owned tensors (weights plus adapters if attached) by checkpoint name.
    pub fn export(&self) -> BTreeMap<String, Tensor> {
        let mut map = self.weights.clone();
        if let Some(adapters) = &self.adapters {
            map.extend(adapters.export());
        }
        map
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor> {
        self.weights
            .get(name)
            .ok_or_else(|| Error::Contract(format!("denoiser has no weight `{name}`")))
    }

    fn resolve(&self, tape: &mut Tape, binding: &Binding, name: &str) -> Result<ValueRef> {
        Ok(binding.resolve(tape, name, self.weight(name)?))
    }

    /// Projection with optional adapter contribution.
    fn project(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        proj: &str,
        x: ValueRef,
    ) -> Result<ValueRef> {
        let w = self.resolve(tape, binding, &format!("denoiser/cross/{proj}"))?;
        let base = tape.matmul(x, w)?;
        match &self.adapters {
            None => Ok(base),
            Some(set) => {
                let delta = set.delta(tape, proj, x, binding)?;
                tape.add(base, delta)
            }
        }
    }

    fn cross_attention(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        h: ValueRef,
        cond: ValueRef,
    ) -> Result<ValueRef> {
        let q = self.project(tape, binding, "wq", h)?;
        let k = self.project(tape, binding, "wk", cond)?;
        let v = self.project(tape, binding, "wv", cond)?;
        let logits = tape.matmul_tb(q, k)?;
        let scaled = tape.scale(logits, 1.0 / (self.dims.d_attn as f64).sqrt())?;
        let attn = tape.softmax(scaled)?;
        let mixed = tape.matmul(attn, v)?;
        self.project(tape, binding, "wo", mixed)
    }

    /// Predicted noise for `z` (`[1, data_dim]`) at step `t` under condition
    /// rows `cond` (`[len, d_cond]`), as a graph value.
    pub fn forward(
        &self,
        tape: &mut Tape,
        z: ValueRef,
        t: usize,
        cond: ValueRef,
        binding: &Binding,
    ) -> Result<ValueRef> {
        let z_shape = tape.value(z)?.shape().to_vec();
        if z_shape != [1, self.dims.data_dim] {
            return Err(Error::Shape {
                op: "denoiser",
                detail: format!("expected z of shape [1, {}], got {z_shape:?}", self.dims.data_dim),
            });
        }
        let cond_shape = tape.value(cond)?.shape().to_vec();
        if cond_shape.len() != 2 || cond_shape[1] != self.dims.d_cond {
            return Err(Error::Shape {
                op: "denoiser",
                detail: format!(
                    "expected condition rows [len, {}], got {cond_shape:?}",
                    self.dims.d_cond
                ),
            });
        }
        let len = cond_shape[0];

        let in_w = self.resolve(tape, binding, "denoiser/in/w")?;
        let in_b = self.resolve(tape, binding, "denoiser/in/b")?;
        let mut h = tape.affine(z, in_w, in_b)?;

        let tf = tape.constant(Tensor::new(
            vec![1, self.dims.d_time],
            sinusoidal_code(t as f64, self.dims.d_time)?,
        )?);
        let tw1 = self.resolve(tape, binding, "denoiser/time/w1")?;
        let tb1 = self.resolve(tape, binding, "denoiser/time/b1")?;
        let tw2 = self.resolve(tape, binding, "denoiser/time/w2")?;
        let tb2 = self.resolve(tape, binding, "denoiser/time/b2")?;
        let t1 = tape.affine(tf, tw1, tb1)?;
        let ta = tape.tanh(t1)?;
        let temb = tape.affine(ta, tw2, tb2)?;

        let pool = tape.constant(Tensor::full(vec![1, len], 1.0 / len as f64));
        let pooled = tape.matmul(pool, cond)?;
        let ones = tape.constant(Tensor::full(vec![1, self.dims.d_hidden], 1.0));

        for k in 0..self.dims.n_blocks {
            if k == self.dims.cross_before_block() {
                let attended = self.cross_attention(tape, binding, h, cond)?;
                h = tape.add(h, attended)?;
            }
            let w1 = self.resolve(tape, binding, &block_name(k, "w1"))?;
            let b1 = self.resolve(tape, binding, &block_name(k, "b1"))?;
            let u = tape.affine(h, w1, b1)?;

            let gain_t = self.resolve(tape, binding, &block_name(k, "gain_t"))?;
            let gain_p = self.resolve(tape, binding, &block_name(k, "gain_p"))?;
            let gain_b = self.resolve(tape, binding, &block_name(k, "gain_b"))?;
            let shift_t = self.resolve(tape, binding, &block_name(k, "shift_t"))?;
            let shift_p = self.resolve(tape, binding, &block_name(k, "shift_p"))?;
            let shift_b = self.resolve(tape, binding, &block_name(k, "shift_b"))?;
            let gt = tape.affine(temb, gain_t, gain_b)?;
            let gp = tape.matmul(pooled, gain_p)?;
            let gain = tape.add(gt, gp)?;
            let st = tape.affine(temb, shift_t, shift_b)?;
            let sp = tape.matmul(pooled, shift_p)?;
            let shift = tape.add(st, sp)?;

            let one_plus_gain = tape.add(gain, ones)?;
            let modulated = tape.mul(u, one_plus_gain)?;
            let shifted = tape.add(modulated, shift)?;
            let act = tape.tanh(shifted)?;

            let w2 = self.resolve(tape, binding, &block_name(k, "w2"))?;
            let b2 = self.resolve(tape, binding, &block_name(k, "b2"))?;
            let update = tape.affine(act, w2, b2)?;
            h = tape.add(h, update)?;
        }

        let out_w = self.resolve(tape, binding, "denoiser/out/w")?;
        let out_b = self.resolve(tape, binding, "denoiser/out/b")?;
        tape.affine(h, out_w, out_b)
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, z_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let z = tape.constant(z_t.clone());
        let c = tape.constant(cond.clone());
        let out = self.forward(&mut tape, z, t, c, &Binding::none())?;
        Ok(tape.value(out)?.clone())
    }
}
