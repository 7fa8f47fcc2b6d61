//! Temporary sizing experiment for the acceptance fixture. Not part of the
//! suite: run explicitly with `cargo test --test scratch -- --ignored --nocapture`.

use facet_core::data::{generate_concept_set, generate_pretrain_corpus, DataParams};
use facet_core::denoiser::DenoiserDims;
use facet_core::engine::Engine;
use facet_core::finetune::{attach_adapters, finetune, FinetuneConfig};
use facet_core::metrics::{
    evaluate, generate_samples, target_subspace_cosine, EvalConfig, EvalReport,
};
use facet_core::pretrain::{pretrain, PretrainConfig};
use facet_core::sampler::SamplerConfig;
use facet_core::schedule::NoiseSchedule;
use facet_core::tokenopt::{optimize_tokens, TokenOptConfig};
use rayon::prelude::*;

const DATA: DataParams = DataParams {
    data_dim: 12,
    n_categories: 4,
    residual_dim: 3,
    residual_bins: 5,
    noise_std: 0.05,
};

fn dims() -> DenoiserDims {
    DenoiserDims {
        data_dim: 12,
        d_model: 24,
        d_cond: 24,
        d_attn: 24,
        d_hidden: 48,
        d_time: 16,
        n_blocks: 2,
    }
}

fn base_tok_cfg() -> TokenOptConfig {
    TokenOptConfig {
        steps: 600,
        grad_accum: 4,
        lr: 3e-4,
        beta: 0.05,
        target_len: 1,
        residual_len: 2,
        neg_subset: 3,
        ..TokenOptConfig::default()
    }
}

struct Cell {
    label: &'static str,
    beta: f64,
    residual_len: usize,
}

fn stats(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn pooled(a: &[f64], b: &[f64]) -> f64 {
    let (_, sa) = stats(a);
    let (_, sb) = stats(b);
    ((sa * sa + sb * sb) / 2.0).sqrt().max(1e-12)
}

#[test]
#[ignore]
fn sizing() {
    let pretrain_steps: usize =
        std::env::var("PRETRAIN").ok().and_then(|s| s.parse().ok()).unwrap_or(2500);
    let tok_steps: usize =
        std::env::var("TOKSTEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(600);
    let tok_lr: f64 = std::env::var("TOKLR").ok().and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let guidance: f64 = std::env::var("GUID").ok().and_then(|s| s.parse().ok()).unwrap_or(2.0);
    let ga: usize = std::env::var("GA").ok().and_then(|s| s.parse().ok()).unwrap_or(4);
    let items: usize = std::env::var("ITEMS").ok().and_then(|s| s.parse().ok()).unwrap_or(4);

    let sched = NoiseSchedule::linear(120, 1e-4, 0.08).unwrap();
    let corpus = generate_pretrain_corpus(&DATA, 120, 2026).unwrap();
    let set = generate_concept_set(&DATA, items, 1, 2026).unwrap();
    let engine = Engine::init(DATA.layout().unwrap(), dims(), 48, 2026).unwrap();
    let pcfg = PretrainConfig {
        steps: pretrain_steps,
        batch_size: 8,
        lr: 2e-3,
        holdout_fraction: 0.1,
    };
    let t0 = std::time::Instant::now();
    let (engine, report) = pretrain(&engine, &corpus, &sched, &pcfg, 7).unwrap();
    println!(
        "pretrain {} steps in {:.1}s: final {:.4} holdout cond {:.4} null {:.4} gate {}",
        pretrain_steps,
        t0.elapsed().as_secs_f64(),
        report.final_loss,
        report.holdout_cond_loss,
        report.holdout_null_loss,
        report.gate_passed,
    );

    let cells = [
        Cell { label: "b0.00_len8", beta: 0.0, residual_len: 8 },
        Cell { label: "b0.05_len8", beta: 0.05, residual_len: 8 },
        Cell { label: "b0.05_len0", beta: 0.05, residual_len: 0 },
        Cell { label: "b0.05_len1", beta: 0.05, residual_len: 1 },
        Cell { label: "b0.05_len2", beta: 0.05, residual_len: 2 },
    ];
    let seedn: u64 = std::env::var("SEEDN").ok().and_then(|s| s.parse().ok()).unwrap_or(3);
    let seeds: Vec<u64> = (0..seedn).collect();
    let sampler = SamplerConfig { num_steps: 12, guidance_scale: guidance, eta: 0.0 };
    let fidn: usize = std::env::var("FIDN").ok().and_then(|s| s.parse().ok()).unwrap_or(64);
    let leakn: usize = std::env::var("LEAKN").ok().and_then(|s| s.parse().ok()).unwrap_or(50);
    let ecfg = EvalConfig {
        fidelity_samples: fidn,
        leakage_samples: leakn,
        heldout_descriptors: 6,
        alignment_samples: 6,
        probe_train_samples: 256,
        probe_lambda: 1e-3,
    };

    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    #[allow(clippy::type_complexity)]
    let results: Vec<(
        usize,
        u64,
        EvalReport,
        f64,
        f64,
        f64,
        f64,
        Vec<f64>,
        Vec<f64>,
        Option<EvalReport>,
    )> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let cell = &cells[c];
            let cfg = TokenOptConfig {
                steps: tok_steps,
                lr: tok_lr,
                grad_accum: ga,
                beta: cell.beta,
                residual_len: cell.residual_len,
                neg_subset: items - 1,
                ..base_tok_cfg()
            };
            let (slots, losses) = optimize_tokens(&engine, &set, &sched, &cfg, seed).unwrap();
            let head = &losses[..losses.len().min(20)];
            let tail = &losses[losses.len().saturating_sub(20)..];
            let rec0 = head.iter().map(|l| l.loss_rec).sum::<f64>() / head.len() as f64;
            let rec1 = tail.iter().map(|l| l.loss_rec).sum::<f64>() / tail.len() as f64;
            let exc0 = head.iter().map(|l| l.loss_excl).sum::<f64>() / head.len() as f64;
            let exc1 = tail.iter().map(|l| l.loss_excl).sum::<f64>() / tail.len() as f64;
            let rep = evaluate(&engine, &set, &slots, &sched, &sampler, &ecfg, seed + 100)
                .unwrap();
            let rep_post = if std::env::var("FT").is_ok() {
                let ft_steps: usize =
                    std::env::var("FTSTEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(120);
                let fcfg = FinetuneConfig { steps: ft_steps, ..FinetuneConfig::default() };
                let adapted = attach_adapters(&engine, fcfg.adapter, seed + 40).unwrap();
                let (adapted, _) =
                    finetune(&adapted, &set, &slots, &sched, &fcfg, seed + 50).unwrap();
                Some(
                    evaluate(&adapted, &set, &slots, &sched, &sampler, &ecfg, seed + 100)
                        .unwrap(),
                )
            } else {
                None
            };

            // Composed-condition fidelity at a few guidance levels: junk kept
            // in residual slots should get CFG-amplified into generations.
            let mut cfid = Vec::new();
            for g in [2.0f64, 4.0, 7.5] {
                let hi = SamplerConfig { num_steps: 12, guidance_scale: g, eta: 0.0 };
                let null = engine.null_condition().unwrap();
                let mut comp = 0.0;
                let mut count = 0usize;
                if slots.residuals.is_empty() {
                    let cond = engine.encode_slots(&slots.target, None).unwrap();
                    let xs =
                        generate_samples(&engine, &sched, &cond, &null, &hi, 64, seed * 131)
                            .unwrap();
                    for x in &xs {
                        comp +=
                            target_subspace_cosine(&set.frame, x, set.target_category).unwrap();
                    }
                    count = xs.len();
                } else {
                    for (i, r) in slots.residuals.iter().enumerate() {
                        let cond = engine.encode_slots(&slots.target, Some(r)).unwrap();
                        let xs = generate_samples(
                            &engine, &sched, &cond, &null, &hi, 16,
                            seed * 131 + i as u64,
                        )
                        .unwrap();
                        for x in &xs {
                            comp += target_subspace_cosine(&set.frame, x, set.target_category)
                                .unwrap();
                        }
                        count += xs.len();
                    }
                }
                comp /= count as f64;
                println!(
                    "  [{} seed {}] composed-fid@{g} {:+.4}",
                    cells[c].label, seed, comp
                );
                cfid.push(comp);
            }

            // Target-only fidelity across guidance levels.
            let mut tfid = Vec::new();
            for g in [1.0f64, 2.0, 4.0] {
                let hi = SamplerConfig { num_steps: 12, guidance_scale: g, eta: 0.0 };
                let null = engine.null_condition().unwrap();
                let cond = engine.encode_slots(&slots.target, None).unwrap();
                let xs = generate_samples(&engine, &sched, &cond, &null, &hi, 96, seed * 77)
                    .unwrap();
                let mut tf = 0.0;
                for x in &xs {
                    tf += target_subspace_cosine(&set.frame, x, set.target_category).unwrap();
                }
                tf /= xs.len() as f64;
                println!("  [{} seed {}] target-fid@{g} {:+.4}", cells[c].label, seed, tf);
                tfid.push(tf);
            }

            // Condition-space diagnostics: pooled-row cosine of each block's
            // encoded condition against each pure category condition.
            let pool = |t: &facet_core::tensor::Tensor| -> Vec<f64> {
                let rows = t.rows().unwrap();
                let cols = t.cols().unwrap();
                let mut m = vec![0.0; cols];
                for r in 0..rows {
                    for (mm, &x) in m.iter_mut().zip(t.row(r).unwrap()) {
                        *mm += x / rows as f64;
                    }
                }
                m
            };
            let cosine = |a: &[f64], b: &[f64]| -> f64 {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                dot / (na * nb).max(1e-12)
            };
            let layout = DATA.layout().unwrap();
            let cat_refs: Vec<Vec<f64>> = (0..DATA.n_categories)
                .map(|cc| pool(&engine.encode_ids(&[layout.target_id(cc).unwrap()]).unwrap()))
                .collect();
            let tcond = pool(&engine.encode_slots(&slots.target, None).unwrap());
            let town = cosine(&tcond, &cat_refs[set.target_category]);
            let tother = (0..DATA.n_categories)
                .filter(|&cc| cc != set.target_category)
                .map(|cc| cosine(&tcond, &cat_refs[cc]))
                .fold(f64::NEG_INFINITY, f64::max);
            let mut rcat = 0.0;
            if !slots.residuals.is_empty() {
                for r in &slots.residuals {
                    let rc = pool(&engine.encoder.encode_plain(r).unwrap());
                    rcat += cosine(&rc, &cat_refs[set.target_category]);
                }
                rcat /= slots.residuals.len() as f64;
            }
            println!(
                "  [{} seed {}] tnorm {:.3} town {:+.3} tother {:+.3} rcat {:+.3}",
                cells[c].label,
                seed,
                slots.target.norm(),
                town,
                tother,
                rcat,
            );
            (c, seed, rep, rec0, rec1, exc0, exc1, tfid, cfid, rep_post)
        })
        .collect();

    let mut fid = vec![Vec::new(); cells.len()];
    let mut leak = vec![Vec::new(); cells.len()];
    // Per-cell target-only fidelity at guidance {1,2,4} and composed at {2,4,7.5}.
    let mut tfids = vec![[Vec::new(), Vec::new(), Vec::new()]; cells.len()];
    let mut cfids = vec![[Vec::new(), Vec::new(), Vec::new()]; cells.len()];
    let mut fid_post = vec![Vec::new(); cells.len()];
    let mut leak_post = vec![Vec::new(); cells.len()];
    for (c, seed, rep, rec0, rec1, exc0, exc1, tfid, cfid, rep_post) in &results {
        let (c, seed, rep) = (*c, *seed, rep);
        let (rec0, rec1, exc0, exc1) = (*rec0, *rec1, *exc0, *exc1);
        if let Some(rp) = rep_post {
            println!(
                "{} seed {} POST-FT: fid {:+.4} align {:+.5} leak {:?}",
                cells[c].label, seed, rp.fidelity, rp.alignment, rp.residual_leakage,
            );
            fid_post[c].push(rp.fidelity);
            if let Some(l) = rp.residual_leakage {
                leak_post[c].push(l);
            }
        }
        println!(
            "{} seed {}: fid {:+.4} align {:+.5} leak {:?} | rec {:.4}->{:.4} excl {:.4}->{:.4}",
            cells[c].label, seed, rep.fidelity, rep.alignment, rep.residual_leakage,
            rec0, rec1, exc0, exc1,
        );
        fid[c].push(rep.fidelity);
        if let Some(l) = rep.residual_leakage {
            leak[c].push(l);
        }
        for (g, &v) in tfid.iter().enumerate() {
            tfids[c][g].push(v);
        }
        for (g, &v) in cfid.iter().enumerate() {
            cfids[c][g].push(v);
        }
    }
    println!("--- guidance {guidance}, tok lr {tok_lr}, tok steps {tok_steps} ---");
    for (c, cell) in cells.iter().enumerate() {
        let (fm, fs) = stats(&fid[c]);
        print!("{}: fid {:.4}+-{:.4}", cell.label, fm, fs);
        if !leak[c].is_empty() {
            let (lm, ls) = stats(&leak[c]);
            print!(" leak {:.4}+-{:.4}", lm, ls);
        }
        println!();
    }
    let fid_margin = (stats(&fid[1]).0 - stats(&fid[0]).0) / pooled(&fid[1], &fid[0]);
    let leak_margin = (stats(&leak[0]).0 - stats(&leak[1]).0) / pooled(&leak[0], &leak[1]);
    let len1_margin = (stats(&fid[3]).0 - stats(&fid[2]).0) / pooled(&fid[3], &fid[2]);
    let len8_margin = (stats(&fid[1]).0 - stats(&fid[2]).0) / pooled(&fid[1], &fid[2]);
    let flat_gap = (stats(&fid[3]).0 - stats(&fid[1]).0).abs() / pooled(&fid[3], &fid[1]);
    println!("c5 fid margin (b.05-b0):   {fid_margin:+.2} sigma (want > +1)");
    println!("c5 leak margin (b0-b.05):  {leak_margin:+.2} sigma (want > +1)");
    println!("c6 len1-len0 fid margin:   {len1_margin:+.2} sigma (want > +1)");
    println!("c6 len8-len0 fid margin:   {len8_margin:+.2} sigma (want > +1)");
    println!("c6 |len1-len8| gap:        {flat_gap:.2} sigma (want < 1)");

    let table = |name: &str, gs: &[f64], per: &[[Vec<f64>; 3]]| {
        for (gi, g) in gs.iter().enumerate() {
            let m = |a: usize, b: usize| {
                (stats(&per[a][gi]).0 - stats(&per[b][gi]).0) / pooled(&per[a][gi], &per[b][gi])
            };
            let gap = (stats(&per[3][gi]).0 - stats(&per[1][gi]).0).abs()
                / pooled(&per[3][gi], &per[1][gi]);
            println!(
                "{name}@{g}: beta {:+.2}s | len1-len0 {:+.2}s len8-len0 {:+.2}s flat {:.2}s | means {}",
                m(1, 0),
                m(3, 2),
                m(1, 2),
                gap,
                (0..per.len())
                    .map(|c| format!("{:.4}+-{:.4}", stats(&per[c][gi]).0, stats(&per[c][gi]).1))
                    .collect::<Vec<_>>()
                    .join(" "),
            );
        }
    };
    table("tfid", &[1.0, 2.0, 4.0], &tfids);
    table("cfid", &[2.0, 4.0, 7.5], &cfids);

    if !fid_post[0].is_empty() {
        for (c, cell) in cells.iter().enumerate() {
            let (fm, fs) = stats(&fid_post[c]);
            print!("POST {}: fid {:.4}+-{:.4}", cell.label, fm, fs);
            if !leak_post[c].is_empty() {
                let (lm, ls) = stats(&leak_post[c]);
                print!(" leak {:.4}+-{:.4}", lm, ls);
            }
            println!();
        }
        let pf = (stats(&fid_post[1]).0 - stats(&fid_post[0]).0)
            / pooled(&fid_post[1], &fid_post[0]);
        let pl1 = (stats(&fid_post[3]).0 - stats(&fid_post[2]).0)
            / pooled(&fid_post[3], &fid_post[2]);
        let pl8 = (stats(&fid_post[1]).0 - stats(&fid_post[2]).0)
            / pooled(&fid_post[1], &fid_post[2]);
        let pflat = (stats(&fid_post[3]).0 - stats(&fid_post[1]).0).abs()
            / pooled(&fid_post[3], &fid_post[1]);
        println!("POST c5 fid margin: {pf:+.2}s | c6 len1 {pl1:+.2}s len8 {pl8:+.2}s flat {pflat:.2}s");
    }
}

#[test]
#[ignore]
fn mc_seed_search() {
    use facet_core::metrics::{gaussian_kl_equal_cov, mc_kl_equal_cov};
    use facet_core::seeds::{derive_seed, stream_rng};
    use facet_core::Tensor;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use rayon::prelude::*;

    let dim = 8usize;
    let n_triples = 1000usize;
    let mut rng = stream_rng(2026, "acceptance/kl-triples", 0);
    let mut triples = Vec::with_capacity(n_triples);
    for _ in 0..n_triples {
        let mu1: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let mu2: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let u: f64 = rng.random_range(0.0..1.0);
        let sigma = 0.1f64 * (3.0f64 / 0.1f64).powf(u);
        triples.push((
            Tensor::new(vec![dim], mu1).unwrap(),
            Tensor::new(vec![dim], mu2).unwrap(),
            sigma,
        ));
    }
    let lo: u64 = std::env::var("LO").ok().and_then(|v| v.parse().ok()).unwrap_or(0);
    let hi: u64 = std::env::var("HI").ok().and_then(|v| v.parse().ok()).unwrap_or(32);
    let start = std::time::Instant::now();
    let results: Vec<(u64, usize, f64)> = (lo..hi)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&root| {
            let mut fails = 0usize;
            let mut worst_z = 0.0f64;
            for (k, (m1, m2, s)) in triples.iter().enumerate() {
                let closed = gaussian_kl_equal_cov(m1, m2, *s).unwrap();
                let (est, se) =
                    mc_kl_equal_cov(m1, m2, *s, 100_000, derive_seed(root, "acceptance/kl-mc", k as u64))
                        .unwrap();
                let z = (est - closed).abs() / se;
                worst_z = worst_z.max(z);
                if z > 3.0 {
                    fails += 1;
                }
            }
            (root, fails, worst_z)
        })
        .collect();
    println!("searched {}..{} in {:.1}s", lo, hi, start.elapsed().as_secs_f64());
    for (root, fails, worst) in &results {
        if *fails == 0 {
            println!("root {root}: CLEAN (worst z {worst:.3})");
        } else {
            println!("root {root}: {fails} failures (worst z {worst:.3})");
        }
    }
}
