//! One-at-a-time ablation sweeps over the token-optimization knobs.
//!
//! Each axis (exclusion weight, residual slot count, target slot count) is
//! swept independently while the other knobs stay at their base values; every
//! cell runs under several derived seeds and is scored with [`evaluate`].
//! Cells run in parallel, but results are collected in grid order and every
//! per-cell RNG stream is derived from the root seed, so reruns are
//! bit-identical.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ConceptSet;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::finetune::{attach_adapters, finetune, FinetuneConfig};
use crate::metrics::{evaluate, EvalConfig, EvalReport};
use crate::sampler::SamplerConfig;
use crate::schedule::NoiseSchedule;
use crate::seeds::derive_seed;
use crate::tokenopt::{optimize_tokens, TokenOptConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Exclusion-weight axis.
    pub betas: Vec<f64>,
    /// Residual-slot-count axis.
    pub residual_lens: Vec<usize>,
    /// Target-slot-count axis.
    pub target_lens: Vec<usize>,
    /// Independent repetitions per cell.
    pub seeds_per_cell: usize,
    /// Also run the adapter stage before scoring. Off by default: the sweep
    /// isolates the token-stage knobs, and cells stay an order of magnitude
    /// cheaper.
    pub include_finetune: bool,
    /// Base token-stage settings; the swept knob is overridden per cell.
    pub base: TokenOptConfig,
    /// Adapter-stage settings, used only when `include_finetune` is set.
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub sampler: SamplerConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            betas: vec![0.0, 0.01, 0.05, 0.1, 0.5],
            residual_lens: vec![0, 1, 2, 4, 8],
            target_lens: vec![1, 2, 4, 8],
            seeds_per_cell: 3,
            include_finetune: false,
            base: TokenOptConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

/// Outcome of one (axis value, seed) cell. `report` is `None` when the cell
/// failed (e.g. diverged); failures are recorded, not propagated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    /// Swept knob: `beta`, `residual_len`, or `target_len`.
    pub param: String,
    /// Knob value, already formatted.
    pub value: String,
    /// Fully derived seed for this cell (reusable to reproduce it standalone).
    pub seed: u64,
    pub report: Option<EvalReport>,
}

fn apply_override(base: &TokenOptConfig, param: &str, value: &str) -> Result<TokenOptConfig> {
    let mut cfg = base.clone();
    match param {
        "beta" => cfg.beta = value.parse().map_err(|_| Error::Config(format!("bad beta {value}")))?,
        "residual_len" => {
            cfg.residual_len =
                value.parse().map_err(|_| Error::Config(format!("bad residual_len {value}")))?
        }
        "target_len" => {
            cfg.target_len =
                value.parse().map_err(|_| Error::Config(format!("bad target_len {value}")))?
        }
        other => return Err(Error::Config(format!("unknown sweep parameter {other}"))),
    }
    Ok(cfg)
}

fn run_cell(
    engine: &Engine,
    set: &ConceptSet,
    sched: &NoiseSchedule,
    cfg: &SweepConfig,
    tok_cfg: &TokenOptConfig,
    seed: u64,
) -> Result<EvalReport> {
    let (slots, _) = optimize_tokens(engine, set, sched, tok_cfg, seed)?;
    let eval_seed = derive_seed(seed, "cell/eval", 0);
    if cfg.include_finetune {
        let attached =
            attach_adapters(engine, cfg.finetune.adapter, derive_seed(seed, "cell/adapter", 0))?;
        let (tuned, _) =
            finetune(&attached, set, &slots, sched, &cfg.finetune, derive_seed(seed, "cell/ft", 0))?;
        evaluate(&tuned, set, &slots, sched, &cfg.sampler, &cfg.eval, eval_seed)
    } else {
        evaluate(engine, set, &slots, sched, &cfg.sampler, &cfg.eval, eval_seed)
    }
}

/// Runs the full grid and returns cells in grid order (axes in declaration
/// order, values in config order, seeds ascending).
pub fn run_sweep(
    engine: &Engine,
    set: &ConceptSet,
    sched: &NoiseSchedule,
    cfg: &SweepConfig,
    root_seed: u64,
) -> Result<Vec<CellResult>> {
    if cfg.betas.is_empty() && cfg.residual_lens.is_empty() && cfg.target_lens.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if cfg.seeds_per_cell == 0 {
        return Err(Error::Config("seeds_per_cell must be positive".into()));
    }
    cfg.base.validate()?;

    let mut jobs: Vec<(String, String)> = Vec::new();
    for beta in &cfg.betas {
        jobs.push(("beta".into(), beta.to_string()));
    }
    for len in &cfg.residual_lens {
        jobs.push(("residual_len".into(), len.to_string()));
    }
    for len in &cfg.target_lens {
        jobs.push(("target_len".into(), len.to_string()));
    }

    let cells: Vec<(String, String, u64)> = jobs
        .into_iter()
        .flat_map(|(param, value)| {
            (0..cfg.seeds_per_cell).map(move |idx| {
                let seed = derive_seed(root_seed, &format!("ablate/{param}={value}"), idx as u64);
                (param.clone(), value.clone(), seed)
            })
        })
        .collect();

    Ok(cells
        .into_par_iter()
        .map(|(param, value, seed)| {
            let tok_cfg = apply_override(&cfg.base, &param, &value)
                .expect("axis values were formatted by this module");
            let report = run_cell(engine, set, sched, cfg, &tok_cfg, seed).ok();
            CellResult { param, value, seed, report }
        })
        .collect())
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

fn push_row(out: &mut String, fields: &[&str]) {
    out.push_str(&fields.join(","));
    out.push('\n');
}

/// Renders cells as CSV: one row per cell in input order, then `mean` and
/// `std` rows per (param, value) group computed over its succeeded cells.
/// Failed cells read `failed`; the residual column is blank when leakage was
/// not measured (no residual slots).
pub fn sweep_csv(cells: &[CellResult]) -> String {
    let mut out = String::from("param,value,seed,fidelity,alignment,residual_info\n");
    let mut order: Vec<(String, String)> = Vec::new();
    for cell in cells {
        let key = (cell.param.clone(), cell.value.clone());
        if !order.contains(&key) {
            order.push(key);
        }
        let seed = cell.seed.to_string();
        match &cell.report {
            Some(r) => {
                let leak = r.residual_leakage.map(fmt_metric).unwrap_or_default();
                push_row(
                    &mut out,
                    &[
                        &cell.param,
                        &cell.value,
                        &seed,
                        &fmt_metric(r.fidelity),
                        &fmt_metric(r.alignment),
                        &leak,
                    ],
                );
            }
            None => {
                push_row(&mut out, &[&cell.param, &cell.value, &seed, "failed", "failed", "failed"]);
            }
        }
    }

    for (param, value) in order {
        let group: Vec<&EvalReport> = cells
            .iter()
            .filter(|c| c.param == param && c.value == value)
            .filter_map(|c| c.report.as_ref())
            .collect();
        if group.is_empty() {
            push_row(&mut out, &[&param, &value, "mean", "failed", "failed", "failed"]);
            push_row(&mut out, &[&param, &value, "std", "failed", "failed", "failed"]);
            continue;
        }
        let stats = |extract: &dyn Fn(&EvalReport) -> Option<f64>| -> (String, String) {
            let vals: Vec<f64> = group.iter().filter_map(|r| extract(r)).collect();
            if vals.is_empty() {
                return (String::new(), String::new());
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (fmt_metric(mean), fmt_metric(std))
        };
        let (fid_mean, fid_std) = stats(&|r| Some(r.fidelity));
        let (ali_mean, ali_std) = stats(&|r| Some(r.alignment));
        let (leak_mean, leak_std) = stats(&|r| r.residual_leakage);
        push_row(&mut out, &[&param, &value, "mean", &fid_mean, &ali_mean, &leak_mean]);
        push_row(&mut out, &[&param, &value, "std", &fid_std, &ali_std, &leak_std]);
    }
    out
}

/// Writes [`sweep_csv`] to disk.
pub fn write_sweep_csv(path: &Path, cells: &[CellResult]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(sweep_csv(cells).as_bytes())?;
    Ok(())
}
