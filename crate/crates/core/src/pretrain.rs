//! Stage zero: train the full engine (embeddings, encoder, denoiser) for
//! conditional noise prediction on the broad corpus. Conditions are sampled
//! in mixed forms — null, target-only, residual-only, and full composed
//! descriptors with varied repetition — so that later stages meet no
//! unfamiliar condition shapes or sequence lengths.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::PretrainCorpus;
use crate::denoiser::Denoiser;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::optim::{AdamParams, ParamStore};
use crate::schedule::NoiseSchedule;
use crate::seeds::stream_rng;
use crate::tape::{Binding, Tape, ValueRef};
use crate::tensor::Tensor;
use crate::tokens::{VocabLayout, NULL_ID, WITH_ID};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of corpus items held out of training and used for the
    /// conditional-vs-null gate measurement.
    pub holdout_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 4000, batch_size: 8, lr: 2e-3, holdout_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    /// Mean loss over the final 50 optimizer steps.
    pub final_loss: f64,
    /// Mean held-out loss under the full composed condition.
    pub holdout_cond_loss: f64,
    /// Mean held-out loss under the null condition (same draws).
    pub holdout_null_loss: f64,
    /// Whether conditioning beat the null branch on held-out items.
    pub gate_passed: bool,
    /// Per-step mean batch losses.
    pub losses: Vec<f64>,
}

/// Noise-matching loss term on the tape: embed `z_t` from `(x0, t, eps)`,
/// predict through the denoiser under `cond` rows, and return
/// `w_t * ||pred - eps||^2 / data_dim`.
pub fn noise_loss_graph(
    tape: &mut Tape,
    denoiser: &Denoiser,
    sched: &NoiseSchedule,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    cond: ValueRef,
    binding: &Binding,
) -> Result<ValueRef> {
    let z_t = sched.forward_noise(x0, t, eps)?;
    let z = tape.constant(z_t);
    let pred = denoiser.forward(tape, z, t, cond, binding)?;
    let e = tape.constant(eps.clone());
    let diff = tape.sub(pred, e)?;
    let sq = tape.sq_norm(diff)?;
    tape.scale(sq, sched.loss_weight(t) / x0.len() as f64)
}

/// Unit Gaussian noise row shaped like the data.
pub fn draw_noise<R: Rng>(rng: &mut R, data_dim: usize) -> Tensor {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::new(vec![1, data_dim], (0..data_dim).map(|_| normal.sample(rng)).collect())
        .expect("noise shape")
}

/// Random condition form for one pretraining example.
fn draw_condition_ids<R: Rng>(
    layout: &VocabLayout,
    category: usize,
    residual: &[f64],
    rng: &mut R,
) -> Result<Vec<usize>> {
    let residual_ids = layout.residual_descriptor(residual)?;
    let target = layout.target_id(category)?;
    let u: f64 = rng.random();
    if u < 0.10 {
        return Ok(vec![NULL_ID]);
    }
    if u < 0.25 {
        let reps = [1usize, 2, 4, 8][rng.random_range(0..4)];
        return Ok(vec![target; reps]);
    }
    if u < 0.45 {
        let reps = 1 + rng.random_range(0..2usize);
        let mut ids = Vec::with_capacity(residual_ids.len() * reps);
        for _ in 0..reps {
            ids.extend_from_slice(&residual_ids);
        }
        return Ok(ids);
    }
    let target_reps = if rng.random::<f64>() < 0.55 {
        1
    } else {
        [2usize, 4, 8][rng.random_range(0..3)]
    };
    let residual_reps = 1 + rng.random_range(0..2usize);
    let mut ids = vec![target; target_reps];
    ids.push(WITH_ID);
    for _ in 0..residual_reps {
        ids.extend_from_slice(&residual_ids);
    }
    Ok(ids)
}

fn mean_of_losses(tape: &mut Tape, losses: &[ValueRef]) -> Result<ValueRef> {
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = tape.add(acc, l)?;
    }
    tape.scale(acc, 1.0 / losses.len() as f64)
}

struct GateDraw {
    item: usize,
    t: usize,
    eps: Tensor,
    x0: Tensor,
}

/// Trains the engine on the corpus and returns the trained engine plus the
/// conditional-vs-null gate measurement (reported, not enforced).
pub fn pretrain(
    engine: &Engine,
    corpus: &PretrainCorpus,
    sched: &NoiseSchedule,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(Engine, PretrainReport)> {
    let dims = engine.denoiser.dims;
    if corpus.params.data_dim != dims.data_dim {
        return Err(Error::Contract(format!(
            "corpus data_dim {} does not match engine data_dim {}",
            corpus.params.data_dim, dims.data_dim
        )));
    }
    if corpus.params.layout()? != engine.bank.layout {
        return Err(Error::Contract(
            "corpus vocabulary layout does not match the engine's".into(),
        ));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("pretrain steps and batch size must be positive".into()));
    }
    if !(0.0..=0.5).contains(&cfg.holdout_fraction) {
        return Err(Error::Config(format!(
            "holdout fraction {} outside [0, 0.5]",
            cfg.holdout_fraction
        )));
    }

    let m = corpus.items.len();
    let holdout = ((m as f64) * cfg.holdout_fraction).floor() as usize;
    let train_items = m - holdout;
    let layout = engine.bank.layout;

    let mut store = ParamStore::new();
    let initial = engine.export();
    for name in engine.trainable_names() {
        store.register(&name, initial[&name].clone())?;
    }
    let hp = AdamParams::with_lr(cfg.lr);

    let mut rng = stream_rng(seed, "pretrain/steps", 0);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let mut binding = Binding::none();
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            binding.insert(store.name(id), store.bind(&mut tape, id)?);
        }

        let mut micro = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let item = rng.random_range(0..train_items);
            let t = 1 + rng.random_range(0..sched.timesteps() - 1);
            let x0 = corpus.sample(item, &mut rng)?;
            let eps = draw_noise(&mut rng, dims.data_dim);
            let it = &corpus.items[item];
            let cond_ids = draw_condition_ids(&layout, it.category, &it.residual, &mut rng)?;
            let embedded = engine.bank.embed(&mut tape, &cond_ids, &binding)?;
            let cond = engine.encoder.forward(&mut tape, embedded, &binding)?;
            micro.push(noise_loss_graph(
                &mut tape,
                &engine.denoiser,
                sched,
                &x0,
                t,
                &eps,
                cond,
                &binding,
            )?);
        }
        let loss = mean_of_losses(&mut tape, &micro)?;
        let loss_value = tape.scalar_value(loss)?;
        if !loss_value.is_finite() || loss_value > 1e6 {
            return Err(Error::Diverged {
                step,
                message: format!("pretraining loss reached {loss_value}"),
            });
        }
        losses.push(loss_value);
        let grads = tape.backward(loss)?;
        store.accumulate(&grads)?;
        store.step(&hp);
    }

    let trained = engine.with_updates(&store.export())?;

    // Gate measurement: same noisy draws under the full composed condition
    // and under the null condition; conditioning should fit better.
    let gate_items: Vec<usize> =
        if holdout > 0 { (train_items..m).collect() } else { (0..m).collect() };
    let mut gate_rng = stream_rng(seed, "pretrain/gate", 0);
    let mut draws = Vec::new();
    for &item in &gate_items {
        for _ in 0..4 {
            let t = 1 + gate_rng.random_range(0..sched.timesteps() - 1);
            let x0 = corpus.sample(item, &mut gate_rng)?;
            let eps = draw_noise(&mut gate_rng, dims.data_dim);
            draws.push(GateDraw { item, t, eps, x0 });
        }
    }
    let null_cond = trained.null_condition()?;
    let mut cond_total = 0.0;
    let mut null_total = 0.0;
    for d in &draws {
        let it = &corpus.items[d.item];
        let mut ids = vec![layout.target_id(it.category)?, WITH_ID];
        ids.extend(layout.residual_descriptor(&it.residual)?);
        let cond = trained.encode_ids(&ids)?;
        cond_total += holdout_loss(&trained, sched, d, &cond)?;
        null_total += holdout_loss(&trained, sched, d, &null_cond)?;
    }
    let n = draws.len() as f64;
    let holdout_cond_loss = cond_total / n;
    let holdout_null_loss = null_total / n;

    let tail = losses.len().min(50);
    let final_loss = losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64;
    let report = PretrainReport {
        steps: cfg.steps,
        final_loss,
        holdout_cond_loss,
        holdout_null_loss,
        gate_passed: holdout_cond_loss < holdout_null_loss,
        losses,
    };
    Ok((trained, report))
}

fn holdout_loss(
    engine: &Engine,
    sched: &NoiseSchedule,
    d: &GateDraw,
    cond: &Tensor,
) -> Result<f64> {
    let mut tape = Tape::new();
    let c = tape.constant(cond.clone());
    let loss = noise_loss_graph(
        &mut tape,
        &engine.denoiser,
        sched,
        &d.x0,
        d.t,
        &d.eps,
        c,
        &Binding::none(),
    )?;
    tape.scalar_value(loss)
}
