//! Subcommand implementations.
//!
//! Every command resolves its configuration, derives all randomness from the
//! root seed via named streams, writes its artifacts into the output
//! directory, and finishes by writing `manifest.json` describing the run.
//! Manifests are byte-identical across reruns except for the wall-clock
//! entry.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use facet_core::checkpoint::{checkpoint_paths, load_tensors, save_tensors};
use facet_core::data::{generate_concept_set, generate_pretrain_corpus, ConceptSet};
use facet_core::engine::Engine;
use facet_core::error::{Error, Result};
use facet_core::finetune::{attach_adapters, finetune};
use facet_core::metrics::{
    evaluate, generate_samples, verify_derivation, verify_derivation_with_bad_coefficient,
    DerivationReport,
};
use facet_core::pretrain::pretrain;
use facet_core::seeds::derive_seed;
use facet_core::sweep::{run_sweep, write_sweep_csv, SweepConfig};
use facet_core::tensor::Tensor;
use facet_core::tokenopt::{optimize_tokens, write_loss_csv};
use facet_core::tokens::TokenSlots;

use crate::config::RunConfig;

pub const MODEL_STEM: &str = "model.ckpt";
pub const TOKENS_STEM: &str = "tokens.ckpt";
pub const ADAPTED_STEM: &str = "adapted.ckpt";

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    artifacts: Vec<String>,
    wall_clock_seconds: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Records the checkpoint stem's two on-disk files in the artifact list.
fn push_checkpoint(artifacts: &mut Vec<String>, stem: &str) {
    let (json, bin) = checkpoint_paths(Path::new(stem));
    artifacts.push(json.display().to_string());
    artifacts.push(bin.display().to_string());
}

fn finish(
    out: &Path,
    command: &str,
    seed: u64,
    cfg: &RunConfig,
    mut artifacts: Vec<String>,
    started: Instant,
) -> Result<()> {
    artifacts.push("manifest.json".to_string());
    artifacts.sort();
    let manifest = Manifest {
        command,
        seed,
        config: cfg,
        artifacts,
        wall_clock_seconds: (started.elapsed().as_secs_f64() * 1000.0).round() / 1000.0,
    };
    write_json(&out.join("manifest.json"), &manifest)
}

fn checkpoint_present(stem: &Path) -> bool {
    checkpoint_paths(stem).0.exists()
}

fn load_engine_at(stem: &Path) -> Result<Engine> {
    if !checkpoint_present(stem) {
        return Err(Error::MissingArtifact(format!(
            "{} (run `facet pretrain` first)",
            stem.display()
        )));
    }
    Engine::load(stem)
}

/// Adapted engine when present, otherwise the pretrained one.
fn load_preferred_engine(out: &Path) -> Result<(Engine, &'static str)> {
    let adapted = out.join(ADAPTED_STEM);
    if checkpoint_present(&adapted) {
        Ok((Engine::load(&adapted)?, ADAPTED_STEM))
    } else {
        Ok((load_engine_at(&out.join(MODEL_STEM))?, MODEL_STEM))
    }
}

fn load_slots(out: &Path) -> Result<TokenSlots> {
    let stem = out.join(TOKENS_STEM);
    if !checkpoint_present(&stem) {
        return Err(Error::MissingArtifact(format!(
            "{} (run `facet optimize` first)",
            stem.display()
        )));
    }
    TokenSlots::from_map(&load_tensors(&stem)?)
}

/// The concept set is regenerated, not stored: it is a pure function of the
/// data section and the root seed, so every stage sees the same set.
fn concept_set(cfg: &RunConfig, seed: u64) -> Result<ConceptSet> {
    generate_concept_set(
        &cfg.data,
        cfg.concept.n_items,
        cfg.concept.target_category,
        derive_seed(seed, "cli/data", 0),
    )
}

pub fn cmd_pretrain(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let started = Instant::now();
    std::fs::create_dir_all(out)?;
    let corpus =
        generate_pretrain_corpus(&cfg.data, cfg.corpus.n_items, derive_seed(seed, "cli/data", 0))?;
    let engine = Engine::init(
        cfg.data.layout()?,
        cfg.model.dims(cfg.data.data_dim),
        cfg.model.encoder_hidden,
        derive_seed(seed, "cli/engine", 0),
    )?;
    let sched = cfg.schedule.build()?;
    let (trained, report) =
        pretrain(&engine, &corpus, &sched, &cfg.pretrain, derive_seed(seed, "cli/pretrain", 0))?;
    trained.save(&out.join(MODEL_STEM))?;
    write_json(&out.join("pretrain_report.json"), &report)?;
    if !report.gate_passed {
        eprintln!(
            "warning: conditioning gate not passed (cond {:.6} vs null {:.6})",
            report.holdout_cond_loss, report.holdout_null_loss
        );
    }
    println!(
        "pretrain: {} steps, final loss {:.6}, gate {}",
        report.steps, report.final_loss, report.gate_passed
    );
    let mut artifacts = vec!["pretrain_report.json".to_string()];
    push_checkpoint(&mut artifacts, MODEL_STEM);
    finish(out, "pretrain", seed, cfg, artifacts, started)
}

pub fn cmd_optimize(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let started = Instant::now();
    std::fs::create_dir_all(out)?;
    let engine = load_engine_at(&out.join(MODEL_STEM))?;
    let set = concept_set(cfg, seed)?;
    let sched = cfg.schedule.build()?;
    let (slots, rows) =
        optimize_tokens(&engine, &set, &sched, &cfg.tokenopt, derive_seed(seed, "cli/tokens", 0))?;
    save_tensors(&out.join(TOKENS_STEM), &slots.export()?)?;
    write_loss_csv(&out.join("tokens_loss.csv"), &rows)?;
    let last = rows.last().map(|r| r.loss_total).unwrap_or(f64::NAN);
    println!("optimize: {} steps, final loss {last:.6}", rows.len());
    let mut artifacts = vec!["tokens_loss.csv".to_string()];
    push_checkpoint(&mut artifacts, TOKENS_STEM);
    finish(out, "optimize", seed, cfg, artifacts, started)
}

pub fn cmd_finetune(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let started = Instant::now();
    std::fs::create_dir_all(out)?;
    let engine = load_engine_at(&out.join(MODEL_STEM))?;
    let slots = load_slots(out)?;
    let set = concept_set(cfg, seed)?;
    let sched = cfg.schedule.build()?;
    let attached =
        attach_adapters(&engine, cfg.finetune.adapter, derive_seed(seed, "cli/adapter", 0))?;
    let (tuned, rows) = finetune(
        &attached,
        &set,
        &slots,
        &sched,
        &cfg.finetune,
        derive_seed(seed, "cli/finetune", 0),
    )?;
    tuned.save(&out.join(ADAPTED_STEM))?;
    write_loss_csv(&out.join("finetune_loss.csv"), &rows)?;
    let last = rows.last().map(|r| r.loss_total).unwrap_or(f64::NAN);
    println!("finetune: {} steps, final loss {last:.6}", rows.len());
    let mut artifacts = vec!["finetune_loss.csv".to_string()];
    push_checkpoint(&mut artifacts, ADAPTED_STEM);
    finish(out, "finetune", seed, cfg, artifacts, started)
}

fn rows_of(samples: &[Tensor]) -> Vec<Vec<f64>> {
    samples.iter().map(|s| s.data().to_vec()).collect()
}

pub fn cmd_sample(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let started = Instant::now();
    std::fs::create_dir_all(out)?;
    let (engine, source) = load_preferred_engine(out)?;
    let slots = load_slots(out)?;
    let sched = cfg.schedule.build()?;
    let null_cond = engine.null_condition()?;

    let target_cond = engine.encode_slots(&slots.target, None)?;
    let target_samples = generate_samples(
        &engine,
        &sched,
        &target_cond,
        &null_cond,
        &cfg.sampler,
        cfg.sample.n_samples,
        derive_seed(seed, "cli/sample/target", 0),
    )?;
    let mut full = Vec::new();
    for (i, residual) in slots.residuals.iter().enumerate() {
        let cond = engine.encode_slots(&slots.target, Some(residual))?;
        let samples = generate_samples(
            &engine,
            &sched,
            &cond,
            &null_cond,
            &cfg.sampler,
            cfg.sample.n_samples,
            derive_seed(seed, "cli/sample/full", i as u64),
        )?;
        full.push(rows_of(&samples));
    }
    let payload = serde_json::json!({
        "engine": source,
        "target": rows_of(&target_samples),
        "full": full,
    });
    write_json(&out.join("samples.json"), &payload)?;
    println!(
        "sample: {} target-only and {} composed generations from {source}",
        cfg.sample.n_samples,
        cfg.sample.n_samples * slots.residuals.len()
    );
    finish(out, "sample", seed, cfg, vec!["samples.json".to_string()], started)
}

pub fn cmd_eval(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let started = Instant::now();
    std::fs::create_dir_all(out)?;
    let (engine, source) = load_preferred_engine(out)?;
    let slots = load_slots(out)?;
    let set = concept_set(cfg, seed)?;
    let sched = cfg.schedule.build()?;
    let report = evaluate(
        &engine,
        &set,
        &slots,
        &sched,
        &cfg.sampler,
        &cfg.eval,
        derive_seed(seed, "cli/eval", 0),
    )?;
    let payload = serde_json::json!({ "engine": source, "report": report });
    write_json(&out.join("probe_report.json"), &payload)?;
    println!(
        "eval: fidelity {:.4}, alignment {:.4}, leakage {}",
        report.fidelity,
        report.alignment,
        report
            .residual_leakage
            .map(|l| format!("{l:.4}"))
            .unwrap_or_else(|| "n/a".to_string())
    );
    finish(out, "eval", seed, cfg, vec!["probe_report.json".to_string()], started)
}

pub fn cmd_ablate(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let started = Instant::now();
    std::fs::create_dir_all(out)?;
    let engine = load_engine_at(&out.join(MODEL_STEM))?;
    let set = concept_set(cfg, seed)?;
    let sched = cfg.schedule.build()?;
    let sweep_cfg = SweepConfig {
        betas: cfg.ablate.betas.clone(),
        residual_lens: cfg.ablate.residual_lens.clone(),
        target_lens: cfg.ablate.target_lens.clone(),
        seeds_per_cell: cfg.ablate.seeds_per_cell,
        include_finetune: cfg.ablate.include_finetune,
        base: cfg.tokenopt,
        finetune: cfg.finetune,
        eval: cfg.eval,
        sampler: cfg.sampler.clone(),
    };
    let cells = run_sweep(&engine, &set, &sched, &sweep_cfg, derive_seed(seed, "cli/ablate", 0))?;
    write_sweep_csv(&out.join("sweep.csv"), &cells)?;
    let failed = cells.iter().filter(|c| c.report.is_none()).count();
    println!("ablate: {} cells ({failed} failed)", cells.len());
    finish(out, "ablate", seed, cfg, vec!["sweep.csv".to_string()], started)
}

pub fn cmd_verify_derivation(
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
    inject_bad_coefficient: bool,
) -> Result<()> {
    let started = Instant::now();
    std::fs::create_dir_all(out)?;
    // A pretrained engine is used when available; the identities hold for any
    // weights, so a seeded fresh engine works just as well.
    let model_stem = out.join(MODEL_STEM);
    let engine = if checkpoint_present(&model_stem) {
        Engine::load(&model_stem)?
    } else {
        Engine::init(
            cfg.data.layout()?,
            cfg.model.dims(cfg.data.data_dim),
            cfg.model.encoder_hidden,
            derive_seed(seed, "cli/engine", 0),
        )?
    };
    let sched = cfg.schedule.build()?;
    let layout = cfg.data.layout()?;
    let mut conds = Vec::new();
    for c in 0..cfg.data.n_categories.min(4) {
        conds.push(engine.encode_ids(&[layout.target_id(c)?])?);
    }
    let null_cond = engine.null_condition()?;
    let run = if inject_bad_coefficient {
        verify_derivation_with_bad_coefficient
    } else {
        verify_derivation
    };
    let report: DerivationReport = run(
        &sched,
        &engine.denoiser,
        &conds,
        &null_cond,
        cfg.data.data_dim,
        cfg.derivation.trials,
        derive_seed(seed, "cli/derivation", 0),
    )?;
    let passed = report.kl_max_err <= cfg.derivation.tolerance
        && report.mean_diff_max_err <= cfg.derivation.tolerance;
    let payload = serde_json::json!({
        "report": report,
        "tolerance": cfg.derivation.tolerance,
        "passed": passed,
    });
    write_json(&out.join("derivation_report.json"), &payload)?;
    println!(
        "verify-derivation: kl_max_err {:.3e}, mean_diff_max_err {:.3e}, passed {passed}",
        report.kl_max_err, report.mean_diff_max_err
    );
    finish(
        out,
        "verify-derivation",
        seed,
        cfg,
        vec!["derivation_report.json".to_string()],
        started,
    )?;
    if !passed {
        return Err(Error::Verification(format!(
            "kl_max_err {:.3e} / mean_diff_max_err {:.3e} exceed tolerance {:.3e}",
            report.kl_max_err, report.mean_diff_max_err, cfg.derivation.tolerance
        )));
    }
    Ok(())
}

/// Resolves a config path option against the filesystem.
pub fn resolve_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    RunConfig::load(path.map(|p| p.as_path()))
}
