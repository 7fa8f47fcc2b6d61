//! Forward-noising schedule and the posterior quantities built on it.
//!
//! The schedule is the usual variance-preserving discrete-time construction:
//! `alpha_bar[t]` is the running product of `(1 - beta[s])` for `s <= t`,
//! `signal_scale = sqrt(alpha_bar)`, `noise_scale = sqrt(1 - alpha_bar)`, and
//! the per-step loss weight is fixed at 1 so reconstruction and exclusion
//! terms stay on the same scale.
//!
//! `posterior_mean` and `kl_coefficient` implement the closed-form pieces used
//! by the derivation check: with the reverse covariance pinned to
//! `beta_t * I`, the squared distance between two posterior means induced by
//! two noise predictions collapses to
//! `beta_t^2 / ((1 - alpha_bar_t) * (1 - beta_t))` times the squared distance
//! between the predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` over `timesteps`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::Domain(format!("need at least 2 timesteps, got {timesteps}")));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Domain(format!(
                "betas must satisfy 0 < start < end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let n = timesteps as f64;
        let betas = (0..timesteps)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (n - 1.0))
            .collect();
        Self::from_betas(betas)
    }

    /// Builds a schedule from explicit betas (used by tests with tiny hand
    /// schedules). Betas must lie strictly inside (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Domain("empty beta sequence".into()));
        }
        if betas.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::Domain("all betas must lie strictly inside (0, 1)".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// The default schedule used throughout the engine: T = 1000 linear betas
    /// from 1e-4 to 0.02.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule parameters are valid")
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize, op: &str) -> Result<()> {
        if t >= self.betas.len() {
            return Err(Error::Domain(format!(
                "{op}: timestep {t} out of range [0, {})",
                self.betas.len()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn signal_scale(&self, t: usize) -> f64 {
        self.alpha_bars[t].sqrt()
    }

    pub fn noise_scale(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bars[t]).sqrt()
    }

    /// Per-step loss weight; identically 1 so that reconstruction and
    /// exclusion magnitudes are directly comparable.
    pub fn loss_weight(&self, _t: usize) -> f64 {
        1.0
    }

    /// `z_t = signal_scale[t] * z0 + noise_scale[t] * eps`.
    pub fn forward_noise(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t, "forward_noise")?;
        if z0.shape() != eps.shape() {
            return Err(Error::Shape {
                op: "forward_noise",
                detail: format!("z0 {:?} vs eps {:?}", z0.shape(), eps.shape()),
            });
        }
        let (s, n) = (self.signal_scale(t), self.noise_scale(t));
        z0.zip(eps, |z, e| s * z + n * e)
    }

    /// `loss_weight[t] * mean((eps - eps_pred)^2)`.
    pub fn noise_matching_loss(&self, eps_pred: &Tensor, eps: &Tensor, t: usize) -> Result<f64> {
        self.check_t(t, "noise_matching_loss")?;
        if eps_pred.shape() != eps.shape() {
            return Err(Error::Shape {
                op: "noise_matching_loss",
                detail: format!("{:?} vs {:?}", eps_pred.shape(), eps.shape()),
            });
        }
        let diff = eps_pred.minus(eps)?;
        Ok(self.loss_weight(t) * diff.sq_norm() / diff.len() as f64)
    }

    /// Posterior mean of the reverse step given a noise prediction:
    /// `(z_t - (beta_t / sqrt(1 - alpha_bar_t)) * eps_pred) / sqrt(1 - beta_t)`.
    /// Undefined at `t = 0` (there is no step before the data).
    pub fn posterior_mean(&self, z_t: &Tensor, eps_pred: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t, "posterior_mean")?;
        if t == 0 {
            return Err(Error::Domain("posterior_mean is undefined at t = 0".into()));
        }
        if z_t.shape() != eps_pred.shape() {
            return Err(Error::Shape {
                op: "posterior_mean",
                detail: format!("z_t {:?} vs eps_pred {:?}", z_t.shape(), eps_pred.shape()),
            });
        }
        let coef = self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt();
        let scale = 1.0 / (1.0 - self.beta(t)).sqrt();
        z_t.zip(eps_pred, |z, e| (z - coef * e) * scale)
    }

    /// `beta_t^2 / ((1 - alpha_bar_t) * (1 - beta_t))`: the factor that maps a
    /// squared noise-prediction gap onto the squared posterior-mean gap.
    pub fn kl_coefficient(&self, t: usize) -> Result<f64> {
        self.check_t(t, "kl_coefficient")?;
        if t == 0 {
            return Err(Error::Domain("kl_coefficient is undefined at t = 0".into()));
        }
        let b = self.beta(t);
        Ok(b * b / ((1.0 - self.alpha_bar(t)) * (1.0 - b)))
    }

    /// Shared variance of the reverse-step posterior,
    /// `beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        self.check_t(t, "posterior_variance")?;
        if t == 0 {
            return Err(Error::Domain("posterior_variance is undefined at t = 0".into()));
        }
        Ok(self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap()
    }

    #[test]
    fn alpha_bar_is_the_running_product() {
        let s = tiny();
        assert!((s.alpha_bar(0) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.72).abs() < 1e-15);

        let big = NoiseSchedule::default_linear();
        // Spot-check against a naive product and the pinned endpoints.
        assert_eq!(big.timesteps(), 1000);
        assert!((big.beta(0) - 1e-4).abs() < 1e-18);
        assert!((big.beta(999) - 0.02).abs() < 1e-18);
        let mut prod = 1.0;
        for t in 0..big.timesteps() {
            prod *= 1.0 - big.beta(t);
            assert!((big.alpha_bar(t) - prod).abs() <= 1e-15 * prod.abs().max(1.0));
        }
    }

    #[test]
    fn schedules_are_monotone() {
        let s = NoiseSchedule::default_linear();
        for t in 1..s.timesteps() {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn signal_and_noise_scales_are_pythagorean() {
        let s = NoiseSchedule::default_linear();
        for t in 0..s.timesteps() {
            let gap = s.signal_scale(t).powi(2) + s.noise_scale(t).powi(2) - 1.0;
            assert!(gap.abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_noise_matches_hand_value() {
        let s = tiny();
        let z0 = Tensor::new(vec![1], vec![1.0]).unwrap();
        let eps = Tensor::new(vec![1], vec![1.0]).unwrap();
        let z1 = s.forward_noise(&z0, 1, &eps).unwrap();
        let expect = 0.72f64.sqrt() + 0.28f64.sqrt();
        assert!((z1.data()[0] - expect).abs() < 1e-15);
        assert!((z1.data()[0] - 1.37766).abs() < 1e-4);
        // eps = 0 leaves a pure rescale of the input.
        let zero = Tensor::new(vec![1], vec![0.0]).unwrap();
        let z = s.forward_noise(&z0, 0, &zero).unwrap();
        assert!((z.data()[0] - 0.9f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn noise_matching_loss_is_weighted_mse() {
        let s = tiny();
        let pred = Tensor::new(vec![4], vec![0.5, -0.5, 1.0, 0.0]).unwrap();
        let eps = Tensor::new(vec![4], vec![0.0, 0.5, 1.0, -1.0]).unwrap();
        let loss = s.noise_matching_loss(&pred, &eps, 1).unwrap();
        let expect = (0.25 + 1.0 + 0.0 + 1.0) / 4.0;
        assert!((loss - expect).abs() < 1e-15);
        // Perfect prediction is exactly zero.
        assert_eq!(s.noise_matching_loss(&eps, &eps, 0).unwrap(), 0.0);
    }

    #[test]
    fn kl_coefficient_matches_hand_value() {
        let s = tiny();
        let c = s.kl_coefficient(1).unwrap();
        assert!((c - 0.04 / (0.28 * 0.8)).abs() < 1e-15);
        assert!((c - 0.178571).abs() < 1e-6);
        assert!(matches!(s.kl_coefficient(0), Err(Error::Domain(_))));
    }

    #[test]
    fn posterior_variance_matches_hand_value() {
        let s = tiny();
        // beta_1 * (1 - abar_0) / (1 - abar_1) = 0.2 * 0.1 / 0.28.
        let v = s.posterior_variance(1).unwrap();
        assert!((v - 0.2 * 0.1 / 0.28).abs() < 1e-15);
        assert!(v > 0.0);
        assert!(matches!(s.posterior_variance(0), Err(Error::Domain(_))));
    }

    #[test]
    fn posterior_mean_rejects_t_zero_and_bad_shapes() {
        let s = tiny();
        let z = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(s.posterior_mean(&z, &z, 0), Err(Error::Domain(_))));
        let short = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(s.posterior_mean(&z, &short, 1).is_err());
        assert!(s.forward_noise(&z, 5, &z).is_err());
    }

    #[test]
    fn mean_difference_identity_on_the_tiny_schedule() {
        // || mu(eps1) - mu(eps2) ||^2 == kl_coefficient * || eps1 - eps2 ||^2
        let s = tiny();
        let z = Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap();
        let e1 = Tensor::new(vec![3], vec![1.0, 0.0, -0.5]).unwrap();
        let e2 = Tensor::new(vec![3], vec![-0.2, 0.7, 0.1]).unwrap();
        let m1 = s.posterior_mean(&z, &e1, 1).unwrap();
        let m2 = s.posterior_mean(&z, &e2, 1).unwrap();
        let lhs = m1.minus(&m2).unwrap().sq_norm();
        let rhs = s.kl_coefficient(1).unwrap() * e1.minus(&e2).unwrap().sq_norm();
        assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
    }

    #[test]
    fn constructor_domain_errors() {
        assert!(NoiseSchedule::linear(1, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.02, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.01, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
    }
}
