//! Numeric oracles and evaluation probes.
//!
//! Oracles: the closed-form KL between equal-covariance Gaussians, a Monte
//! Carlo estimator of the same quantity, and exact identities tying a
//! noise-prediction gap to the reverse-step posterior-mean gap and its KL.
//!
//! Probes: a bias-free ridge classifier over data vectors, plus three
//! sampling-based scores — target fidelity (cosine in the target subspace),
//! compositional alignment (negative MSE against ground-truth compositions
//! under held-out descriptors), and residual target leakage (how well a
//! probe recovers the target category from residual-only generations).

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ConceptSet;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::pretrain::draw_noise;
use crate::sampler::{ddim_sample, NoisePredictor, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::seeds::{derive_seed, stream_rng};
use crate::tensor::Tensor;
use crate::tokens::{TokenSlots, WITH_ID};

/// KL(N(mu1, sigma^2 I) || N(mu2, sigma^2 I)) = ||mu1 - mu2||^2 / (2 sigma^2).
pub fn gaussian_kl_equal_cov(mu1: &Tensor, mu2: &Tensor, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let diff = mu1.minus(mu2)?;
    Ok(diff.sq_norm() / (2.0 * sigma * sigma))
}

/// Monte Carlo estimate of the same KL from `n` draws of the first Gaussian:
/// mean and standard error of `(||x - mu2||^2 - ||x - mu1||^2) / (2 sigma^2)`.
pub fn mc_kl_equal_cov(
    mu1: &Tensor,
    mu2: &Tensor,
    sigma: f64,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    if n < 2 {
        return Err(Error::Domain("need at least 2 samples for a standard error".into()));
    }
    if mu1.shape() != mu2.shape() {
        return Err(Error::Shape {
            op: "mc_kl",
            detail: format!("{:?} vs {:?}", mu1.shape(), mu2.shape()),
        });
    }
    let mut rng = stream_rng(seed, "mc_kl", 0);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    // Hot loop: draws scalars straight from the stream (same sequence a
    // tensor draw would consume) to avoid one allocation per sample.
    for _ in 0..n {
        let mut to_mu1 = 0.0;
        let mut to_mu2 = 0.0;
        for (&m1, &m2) in mu1.data().iter().zip(mu2.data()) {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            let x = m1 + sigma * e;
            to_mu1 += (x - m1) * (x - m1);
            to_mu2 += (x - m2) * (x - m2);
        }
        let y = (to_mu2 - to_mu1) / (2.0 * sigma * sigma);
        sum += y;
        sum_sq += y * y;
    }
    let mean = sum / n as f64;
    let var = (sum_sq - sum * sum / n as f64) / (n as f64 - 1.0);
    Ok((mean, (var.max(0.0) / n as f64).sqrt()))
}

/// Exercises the posterior-mean difference identity on random tuples
/// `(z_t, eps_a, eps_b, t)` and returns the worst relative error between the
/// directly computed mean difference and the closed-form rescaled noise gap.
pub fn verify_mean_difference_identity(
    sched: &NoiseSchedule,
    dim: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials == 0 || dim == 0 {
        return Err(Error::Domain("need at least one trial and one dimension".into()));
    }
    let mut rng = stream_rng(seed, "identity", 0);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let t = 1 + rng.random_range(0..sched.timesteps() - 1);
        let z = draw_noise(&mut rng, dim);
        let eps_a = draw_noise(&mut rng, dim);
        let eps_b = draw_noise(&mut rng, dim);
        worst = worst.max(mean_difference_error(sched, &z, &eps_a, &eps_b, t)?);
    }
    Ok(worst)
}

/// Relative error of `mu(z, eps_a) - mu(z, eps_b)` against
/// `-(beta_t / (sqrt(1-abar_t) sqrt(1-beta_t))) (eps_a - eps_b)`.
fn mean_difference_error(
    sched: &NoiseSchedule,
    z: &Tensor,
    eps_a: &Tensor,
    eps_b: &Tensor,
    t: usize,
) -> Result<f64> {
    let mu_a = sched.posterior_mean(z, eps_a, t)?;
    let mu_b = sched.posterior_mean(z, eps_b, t)?;
    let direct = mu_a.minus(&mu_b)?;
    let coef = -sched.beta(t)
        / ((1.0 - sched.alpha_bar(t)).sqrt() * (1.0 - sched.beta(t)).sqrt());
    let formula = eps_a.minus(eps_b)?.scaled(coef);
    let num = direct.minus(&formula)?.norm();
    let den = direct.norm().max(formula.norm()).max(1e-300);
    Ok(num / den)
}

/// Result of [`verify_derivation`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DerivationReport {
    pub trials: usize,
    /// Worst relative error of the posterior-mean difference identity.
    pub mean_diff_max_err: f64,
    /// Worst relative error of the closed-form KL against the direct KL.
    pub kl_max_err: f64,
}

/// Checks, on live model predictions, that the KL between the two reverse
/// posteriors (conditional vs null) equals the closed form
/// `kl_coefficient(t) * ||eps_c - eps_0||^2 / (2 * posterior_variance(t))`.
pub fn verify_derivation(
    sched: &NoiseSchedule,
    model: &dyn NoisePredictor,
    conds: &[Tensor],
    null_cond: &Tensor,
    dim: usize,
    trials: usize,
    seed: u64,
) -> Result<DerivationReport> {
    verify_derivation_inner(sched, model, conds, null_cond, dim, trials, seed, false)
}

/// Same check with a deliberately wrong closed-form coefficient (the first
/// power of beta instead of the second); exists so failure paths stay tested.
pub fn verify_derivation_with_bad_coefficient(
    sched: &NoiseSchedule,
    model: &dyn NoisePredictor,
    conds: &[Tensor],
    null_cond: &Tensor,
    dim: usize,
    trials: usize,
    seed: u64,
) -> Result<DerivationReport> {
    verify_derivation_inner(sched, model, conds, null_cond, dim, trials, seed, true)
}

#[allow(clippy::too_many_arguments)]
fn verify_derivation_inner(
    sched: &NoiseSchedule,
    model: &dyn NoisePredictor,
    conds: &[Tensor],
    null_cond: &Tensor,
    dim: usize,
    trials: usize,
    seed: u64,
    bad_coefficient: bool,
) -> Result<DerivationReport> {
    if conds.is_empty() || trials == 0 {
        return Err(Error::Domain("need at least one condition and one trial".into()));
    }
    let mut rng = stream_rng(seed, "derivation", 0);
    let mut mean_diff_max = 0.0f64;
    let mut kl_max = 0.0f64;
    for trial in 0..trials {
        let t = 1 + rng.random_range(0..sched.timesteps() - 1);
        let z = draw_noise(&mut rng, dim);
        let cond = &conds[trial % conds.len()];
        let eps_c = model.predict(&z, t, cond)?;
        let eps_0 = model.predict(&z, t, null_cond)?;

        mean_diff_max = mean_diff_max.max(mean_difference_error(sched, &z, &eps_c, &eps_0, t)?);

        let var = sched.posterior_variance(t)?;
        let mu_c = sched.posterior_mean(&z, &eps_c, t)?;
        let mu_0 = sched.posterior_mean(&z, &eps_0, t)?;
        let direct = gaussian_kl_equal_cov(&mu_c, &mu_0, var.sqrt())?;
        let coef = if bad_coefficient {
            sched.beta(t) / ((1.0 - sched.alpha_bar(t)) * (1.0 - sched.beta(t)))
        } else {
            sched.kl_coefficient(t)?
        };
        let closed = coef * eps_c.minus(&eps_0)?.sq_norm() / (2.0 * var);
        let den = direct.abs().max(closed.abs()).max(1e-300);
        kl_max = kl_max.max((direct - closed).abs() / den);
    }
    Ok(DerivationReport { trials, mean_diff_max_err: mean_diff_max, kl_max_err: kl_max })
}

/// Bias-free multiclass ridge regression onto one-hot labels; prediction is
/// the argmax score. No intercept, so uniform rescaling of the inputs (the
/// kind of magnitude overshoot strong guidance produces) cannot flip the
/// argmax.
#[derive(Debug, Clone)]
pub struct ProbeClassifier {
    /// `[d, n_classes]` read-out weights.
    pub weights: Tensor,
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix
/// given row-major.
fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::Metric(
                        "probe normal matrix is not positive definite".into(),
                    ));
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * y[k];
        }
        y[i] = s / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = y[i];
        for k in i + 1..d {
            s -= l[k * d + i] * x[k];
        }
        x[i] = s / l[i * d + i];
    }
    x
}

/// Fits `W = (X^T X + lambda I)^{-1} X^T Y` with one-hot `Y`.
pub fn fit_ridge_probe(
    features: &Tensor,
    labels: &[usize],
    n_classes: usize,
    lambda: f64,
) -> Result<ProbeClassifier> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("ridge lambda must be positive, got {lambda}")));
    }
    let n = features.rows()?;
    let d = features.cols()?;
    if labels.len() != n {
        return Err(Error::Contract(format!("{n} feature rows but {} labels", labels.len())));
    }
    if n_classes < 2 {
        return Err(Error::Domain("need at least two classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Contract(format!("label {bad} out of range ({n_classes} classes)")));
    }
    let x = features.data();
    let total_var: f64 = (0..d)
        .map(|j| {
            let mean: f64 = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
            (0..n).map(|i| (x[i * d + j] - mean).powi(2)).sum::<f64>()
        })
        .sum();
    if total_var == 0.0 {
        return Err(Error::Metric("probe features have zero variance".into()));
    }

    // Normal matrix X^T X + lambda I.
    let mut a = vec![0.0; d * d];
    for i in 0..n {
        for p in 0..d {
            let xp = x[i * d + p];
            for q in 0..d {
                a[p * d + q] += xp * x[i * d + q];
            }
        }
    }
    for p in 0..d {
        a[p * d + p] += lambda;
    }
    // Right-hand sides X^T Y, one column per class.
    let mut b = vec![0.0; d * n_classes];
    for (i, &label) in labels.iter().enumerate() {
        for p in 0..d {
            b[p * n_classes + label] += x[i * d + p];
        }
    }
    let l = cholesky(&a, d)?;
    let mut w = vec![0.0; d * n_classes];
    for c in 0..n_classes {
        let col: Vec<f64> = (0..d).map(|p| b[p * n_classes + c]).collect();
        let sol = cholesky_solve(&l, d, &col);
        for p in 0..d {
            w[p * n_classes + c] = sol[p];
        }
    }
    Ok(ProbeClassifier { weights: Tensor::new(vec![d, n_classes], w)? })
}

impl ProbeClassifier {
    /// Argmax class score for a `[1, d]` vector (ties break low).
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        let d = self.weights.rows()?;
        let k = self.weights.cols()?;
        if x.shape() != [1, d] {
            return Err(Error::Shape {
                op: "probe_predict",
                detail: format!("expected [1, {d}], got {:?}", x.shape()),
            });
        }
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..k {
            let score: f64 =
                (0..d).map(|p| x.data()[p] * self.weights.data()[p * k + c]).sum();
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        Ok(best)
    }

    pub fn accuracy(&self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        let n = features.rows()?;
        if labels.len() != n || n == 0 {
            return Err(Error::Contract("features and labels disagree".into()));
        }
        let d = features.cols()?;
        let mut hits = 0usize;
        for (i, &label) in labels.iter().enumerate() {
            let row = Tensor::new(vec![1, d], features.row(i)?.to_vec())?;
            if self.predict(&row)? == label {
                hits += 1;
            }
        }
        Ok(hits as f64 / n as f64)
    }
}

/// Draws `n` DDIM samples under a fixed condition.
pub fn generate_samples(
    engine: &Engine,
    sched: &NoiseSchedule,
    cond: &Tensor,
    null_cond: &Tensor,
    sampler: &SamplerConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let mut rng = stream_rng(seed, "gen/init", 0);
    let dim = engine.denoiser.dims.data_dim;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let z_init = draw_noise(&mut rng, dim);
        out.push(ddim_sample(
            &engine.denoiser,
            sched,
            cond,
            Some(null_cond),
            &z_init,
            sampler,
            derive_seed(seed, "gen/ddim", k as u64),
        )?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Target-only generations scored for fidelity.
    pub fidelity_samples: usize,
    /// Generations per residual slot for the leakage probe (at least 50).
    pub leakage_samples: usize,
    /// Held-out residual descriptors for alignment.
    pub heldout_descriptors: usize,
    /// Generations per held-out descriptor.
    pub alignment_samples: usize,
    /// Labeled clean draws used to fit the leakage probe.
    pub probe_train_samples: usize,
    /// Ridge strength of the leakage probe.
    pub probe_lambda: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fidelity_samples: 64,
            leakage_samples: 50,
            heldout_descriptors: 8,
            alignment_samples: 8,
            probe_train_samples: 256,
            probe_lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean cosine, in the target subspace, between generations conditioned
    /// on the target block alone and the set's category direction. Higher is
    /// better.
    pub fidelity: f64,
    /// Negative mean per-dimension squared error of generations under
    /// held-out composed descriptors against their ground-truth clean
    /// vectors. Higher (closer to zero) is better.
    pub alignment: f64,
    /// Probe accuracy at recovering the target category from residual-only
    /// generations; `None` when there are no residual slots. Lower is better.
    pub residual_leakage: Option<f64>,
}

/// Cosine between a generation's target-subspace projection and the
/// `category` axis of that subspace. A vanishing projection scores zero.
pub fn target_subspace_cosine(
    frame: &crate::data::FactorFrame,
    x: &Tensor,
    category: usize,
) -> Result<f64> {
    let v = frame.project_target(x)?;
    if category >= v.len() {
        return Err(Error::Contract(format!(
            "category {category} out of range for {} target axes",
            v.len()
        )));
    }
    let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm > 1e-12 {
        Ok(v[category] / norm)
    } else {
        Ok(0.0)
    }
}

/// Scores tuned slots against the generating frame.
pub fn evaluate(
    engine: &Engine,
    set: &ConceptSet,
    slots: &TokenSlots,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    if cfg.fidelity_samples == 0 || cfg.heldout_descriptors == 0 || cfg.alignment_samples == 0 {
        return Err(Error::Config("evaluation sample counts must be positive".into()));
    }
    let null_cond = engine.null_condition()?;
    let layout = set.params.layout()?;
    let cat = set.target_category;

    // Fidelity: cosine between generations' target-subspace projection and
    // the set's category direction, over generations conditioned on the
    // target block alone. This isolates what the shared block itself
    // captured, independent of the per-item residual blocks.
    let target_cond = engine.encode_slots(&slots.target, None)?;
    let fid_samples = generate_samples(
        engine,
        sched,
        &target_cond,
        &null_cond,
        sampler,
        cfg.fidelity_samples,
        derive_seed(seed, "eval/fidelity", 0),
    )?;
    let mut fidelity = 0.0;
    for x in &fid_samples {
        fidelity += target_subspace_cosine(&set.frame, x, cat)?;
    }
    fidelity /= fid_samples.len() as f64;

    // Alignment: compose the tuned target block with *embedded* held-out
    // residual descriptors and compare generations to the ground truth.
    let taken: BTreeSet<Vec<usize>> = (0..set.n_items())
        .map(|i| set.residual_descriptor(i))
        .collect::<Result<_>>()?;
    let mut heldout = Vec::new();
    let mut rng = stream_rng(seed, "eval/heldout", 0);
    let mut attempts = 0;
    while heldout.len() < cfg.heldout_descriptors {
        attempts += 1;
        if attempts > 200 * cfg.heldout_descriptors {
            return Err(Error::Metric(
                "could not draw held-out residual descriptors distinct from the set".into(),
            ));
        }
        let bins: Vec<usize> =
            (0..set.params.residual_dim).map(|_| rng.random_range(0..set.params.residual_bins)).collect();
        let ids: Vec<usize> = bins
            .iter()
            .enumerate()
            .map(|(d, &b)| layout.residual_id(d, b))
            .collect::<Result<_>>()?;
        if !taken.contains(&ids) {
            heldout.push((bins, ids));
        }
    }
    let mut alignment_mse = 0.0;
    let mut alignment_count = 0usize;
    for (hi, (bins, ids)) in heldout.iter().enumerate() {
        let centers: Vec<f64> =
            bins.iter().map(|&b| layout.bin_center(b)).collect::<Result<_>>()?;
        let truth = set.frame.compose(cat, &centers)?;
        // Slot rows, the composition marker, then embedded descriptor rows.
        let marker = engine.bank.embedding_row(WITH_ID)?;
        let residual_rows = engine.bank.embed_plain(ids)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for r in 0..slots.target.rows()? {
            rows.push(slots.target.row(r)?.to_vec());
        }
        rows.push(marker.row(0)?.to_vec());
        for r in 0..residual_rows.rows()? {
            rows.push(residual_rows.row(r)?.to_vec());
        }
        let cond = engine.encoder.encode_plain(&Tensor::from_rows(&rows)?)?;
        let samples = generate_samples(
            engine,
            sched,
            &cond,
            &null_cond,
            sampler,
            cfg.alignment_samples,
            derive_seed(seed, "eval/alignment", hi as u64),
        )?;
        for x in &samples {
            alignment_mse += x.minus(&truth)?.sq_norm() / truth.len() as f64;
            alignment_count += 1;
        }
    }
    let alignment = -(alignment_mse / alignment_count as f64);

    // Leakage: can a probe trained on labeled clean data recover the target
    // category from residual-only generations?
    let residual_leakage = if slots.residual_len() == 0 {
        None
    } else {
        if cfg.leakage_samples < 50 {
            return Err(Error::Metric(format!(
                "leakage probe needs at least 50 samples per slot, got {}",
                cfg.leakage_samples
            )));
        }
        let mut probe_rng = stream_rng(seed, "eval/probe", 0);
        let mut rows = Vec::with_capacity(cfg.probe_train_samples);
        let mut labels = Vec::with_capacity(cfg.probe_train_samples);
        for _ in 0..cfg.probe_train_samples {
            let c = probe_rng.random_range(0..set.params.n_categories);
            let r: Vec<f64> =
                (0..set.params.residual_dim).map(|_| probe_rng.random_range(-1.0..1.0)).collect();
            let clean = set.frame.compose(c, &r)?;
            let noisy = if set.params.noise_std > 0.0 {
                let noise = draw_noise(&mut probe_rng, clean.len());
                clean.zip(&noise, |a, e| a + set.params.noise_std * e)?
            } else {
                clean
            };
            rows.push(noisy.data().to_vec());
            labels.push(c);
        }
        let probe = fit_ridge_probe(
            &Tensor::from_rows(&rows)?,
            &labels,
            set.params.n_categories,
            cfg.probe_lambda,
        )?;

        // The probe asks what the model produces *under* the residual-only
        // condition, so it samples the pure conditional: guidance against
        // the null branch would re-amplify exactly the content being
        // measured.
        let probe_sampler = SamplerConfig { guidance_scale: 1.0, ..*sampler };
        let mut hits = 0usize;
        let mut total = 0usize;
        let mut variance_probe = 0.0f64;
        let mut first: Option<Vec<f64>> = None;
        for (i, residual_block) in slots.residuals.iter().enumerate() {
            let cond = engine.encoder.encode_plain(residual_block)?;
            let samples = generate_samples(
                engine,
                sched,
                &cond,
                &null_cond,
                &probe_sampler,
                cfg.leakage_samples,
                derive_seed(seed, "eval/leakage", i as u64),
            )?;
            for x in &samples {
                match &first {
                    None => first = Some(x.data().to_vec()),
                    Some(f) => {
                        variance_probe += x
                            .data()
                            .iter()
                            .zip(f)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    }
                }
                if probe.predict(x)? == cat {
                    hits += 1;
                }
                total += 1;
            }
        }
        if variance_probe == 0.0 {
            return Err(Error::Metric(
                "residual-only generations are degenerate (zero variance)".into(),
            ));
        }
        Some(hits as f64 / total as f64)
    };

    Ok(EvalReport { fidelity, alignment, residual_leakage })
}
