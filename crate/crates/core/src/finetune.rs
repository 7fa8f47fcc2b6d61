//! Stage two: with the tuned slots frozen, attach low-rank adapters to the
//! cross-attention projections and train only those. The rest of the engine
//! (and the slots) stay bit-identical, so personalization remains a small,
//! detachable delta on top of the shared model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{adapter_a_name, adapter_b_name, AdapterConfig, AdapterSet, ADAPTED_PROJECTIONS};
use crate::data::ConceptSet;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::optim::{AdamParams, ParamStore};
use crate::pretrain::{draw_noise, noise_loss_graph};
use crate::schedule::NoiseSchedule;
use crate::seeds::stream_rng;
use crate::tape::{Binding, Tape};
use crate::tokenopt::LossRow;
use crate::tokens::TokenSlots;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub grad_accum: usize,
    pub lr: f64,
    pub adapter: AdapterConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 120, grad_accum: 4, lr: 4e-4, adapter: AdapterConfig::default() }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.grad_accum == 0 {
            return Err(Error::Config("steps and grad_accum must be positive".into()));
        }
        if self.adapter.rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        Ok(())
    }
}

/// Engine with fresh (output-neutral) adapters attached.
pub fn attach_adapters(engine: &Engine, cfg: AdapterConfig, seed: u64) -> Result<Engine> {
    let dims = engine.denoiser.dims;
    let mut out = engine.clone();
    out.denoiser.adapters =
        Some(AdapterSet::init(cfg, dims.d_model, dims.d_cond, dims.d_attn, seed)?);
    Ok(out)
}

/// Trains adapters against the frozen slots and returns the adapted engine
/// plus the per-step loss log (no exclusion term in this stage, so the
/// exclusion column is identically zero).
pub fn finetune(
    engine: &Engine,
    set: &ConceptSet,
    slots: &TokenSlots,
    sched: &NoiseSchedule,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(Engine, Vec<LossRow>)> {
    cfg.validate()?;
    let dims = engine.denoiser.dims;
    if set.params.data_dim != dims.data_dim {
        return Err(Error::Contract(format!(
            "concept set data_dim {} does not match engine data_dim {}",
            set.params.data_dim, dims.data_dim
        )));
    }
    let n = set.n_items();
    if !slots.residuals.is_empty() && slots.residuals.len() != n {
        return Err(Error::Contract(format!(
            "slots carry {} residual blocks for {} items",
            slots.residuals.len(),
            n
        )));
    }

    let adapted = attach_adapters(engine, cfg.adapter, seed)?;
    let adapters = adapted.denoiser.adapters.as_ref().expect("just attached");

    let mut store = ParamStore::new();
    for proj in ADAPTED_PROJECTIONS {
        let pair = adapters.pair(proj)?;
        store.register(&adapter_a_name(proj), pair.a.clone())?;
        store.register(&adapter_b_name(proj), pair.b.clone())?;
    }
    let hp = AdamParams::with_lr(cfg.lr);

    let mut rng = stream_rng(seed, "finetune/steps", 0);
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rec_sum = 0.0;
        for _ in 0..cfg.grad_accum {
            let i = rng.random_range(0..n);
            let t = 1 + rng.random_range(0..sched.timesteps() - 1);
            let x0 = set.sample(i, &mut rng)?;
            let eps = draw_noise(&mut rng, dims.data_dim);

            let mut tape = Tape::new();
            let mut binding = Binding::none();
            let ids: Vec<_> = store.ids().collect();
            for &id in &ids {
                binding.insert(store.name(id), store.bind(&mut tape, id)?);
            }
            // Slots are frozen in this stage: they enter as constants.
            let target_ref = tape.constant(slots.target.clone());
            let residual_ref = slots
                .residuals
                .get(i)
                .map(|r| tape.constant(r.clone()));
            let cond = adapted.encode_slots_graph(&mut tape, target_ref, residual_ref, &binding)?;
            let rec = noise_loss_graph(
                &mut tape,
                &adapted.denoiser,
                sched,
                &x0,
                t,
                &eps,
                cond,
                &binding,
            )?;
            let rec_value = tape.scalar_value(rec)?;
            if !rec_value.is_finite() || rec_value > 1e6 {
                return Err(Error::Diverged {
                    step,
                    message: format!("adapter training loss reached {rec_value}"),
                });
            }
            rec_sum += rec_value;
            let scaled = tape.scale(rec, 1.0 / cfg.grad_accum as f64)?;
            let grads = tape.backward(scaled)?;
            store.accumulate(&grads)?;
        }
        store.step(&hp);
        let loss_rec = rec_sum / cfg.grad_accum as f64;
        rows.push(LossRow { step, loss_rec, loss_excl: 0.0, loss_total: loss_rec });
    }

    let trained = adapted.with_updates(&store.export())?;
    Ok((trained, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_concept_set, DataParams};
    use crate::denoiser::DenoiserDims;
    use crate::sampler::NoisePredictor;
    use crate::tensor::Tensor;
    use crate::tokenopt::{init_tokens, TokenOptConfig};

    fn small_setup() -> (Engine, ConceptSet, NoiseSchedule, TokenSlots) {
        let params = DataParams {
            data_dim: 6,
            n_categories: 3,
            residual_dim: 2,
            residual_bins: 3,
            noise_std: 0.05,
        };
        let set = generate_concept_set(&params, 4, 1, 13).unwrap();
        let dims = DenoiserDims {
            data_dim: 6,
            d_model: 8,
            d_cond: 8,
            d_attn: 8,
            d_hidden: 12,
            d_time: 8,
            n_blocks: 2,
        };
        let engine = Engine::init(params.layout().unwrap(), dims, 12, 51).unwrap();
        let sched = NoiseSchedule::linear(40, 1e-4, 0.03).unwrap();
        let cfg = TokenOptConfig { target_len: 1, residual_len: 2, ..TokenOptConfig::default() };
        let slots = init_tokens(&engine, &set, &cfg, 5).unwrap();
        (engine, set, sched, slots)
    }

    fn small_cfg() -> FinetuneConfig {
        FinetuneConfig { steps: 8, grad_accum: 2, lr: 1e-3, adapter: AdapterConfig::default() }
    }

    #[test]
    fn fresh_adapters_change_nothing() {
        let (engine, _, _, _) = small_setup();
        let adapted = attach_adapters(&engine, AdapterConfig::default(), 77).unwrap();
        let z = Tensor::new(vec![1, 6], vec![0.3, -0.1, 0.4, 0.0, -0.5, 0.2]).unwrap();
        let cond = engine.null_condition().unwrap();
        let a = engine.denoiser.predict(&z, 3, &cond).unwrap();
        let b = adapted.denoiser.predict(&z, 3, &cond).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn only_adapter_tensors_move() {
        let (engine, set, sched, slots) = small_setup();
        let cfg = small_cfg();
        let before = attach_adapters(&engine, cfg.adapter, 9).unwrap().export();
        let (trained, rows) = finetune(&engine, &set, &slots, &sched, &cfg, 9).unwrap();
        let after = trained.export();
        assert_eq!(before.len(), after.len());
        let mut moved = 0;
        for (name, t) in &after {
            let same = t.data() == before[name].data();
            if name.starts_with("adapter/") && name != "adapter/scaling" {
                if !same {
                    moved += 1;
                }
            } else {
                assert!(same, "non-adapter tensor `{name}` moved");
            }
        }
        assert!(moved >= 4, "expected several adapter tensors to move, got {moved}");
        assert_eq!(rows.len(), 8);
        for (k, r) in rows.iter().enumerate() {
            assert_eq!(r.step, k);
            assert_eq!(r.loss_excl, 0.0);
            assert_eq!(r.loss_total, r.loss_rec);
        }
    }

    #[test]
    fn finetune_is_deterministic() {
        let (engine, set, sched, slots) = small_setup();
        let cfg = small_cfg();
        let (a, rows_a) = finetune(&engine, &set, &slots, &sched, &cfg, 4).unwrap();
        let (b, rows_b) = finetune(&engine, &set, &slots, &sched, &cfg, 4).unwrap();
        assert_eq!(rows_a, rows_b);
        let wa = a.export();
        for (name, t) in &b.export() {
            assert_eq!(t.data(), wa[name].data(), "{name} differs across reruns");
        }
    }

    #[test]
    fn target_only_slots_are_accepted() {
        let (engine, set, sched, _) = small_setup();
        let slots = TokenSlots { target: Tensor::full(vec![1, 8], 0.01), residuals: vec![] };
        let cfg = small_cfg();
        let (_, rows) = finetune(&engine, &set, &slots, &sched, &cfg, 4).unwrap();
        assert_eq!(rows.len(), 8);
    }

    #[test]
    fn wrong_slot_count_is_rejected() {
        let (engine, set, sched, mut slots) = small_setup();
        slots.residuals.pop();
        let cfg = small_cfg();
        assert!(matches!(
            finetune(&engine, &set, &slots, &sched, &cfg, 4),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let (engine, set, sched, slots) = small_setup();
        let cfg = FinetuneConfig { lr: 1e9, steps: 120, ..small_cfg() };
        match finetune(&engine, &set, &slots, &sched, &cfg, 4) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }
}
