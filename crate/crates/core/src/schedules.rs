//! Noise schedules and the closed-form forward (noising) process.

use ndarray::{Array, ArrayView, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};

/// Parameters from which a [`NoiseSchedule`] is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Beta sequence and cumulative signal fractions of a diffusion process.
///
/// Timesteps are 1-indexed: `beta(t)` is defined for `t in 1..=T`, and
/// `alpha_bar(0) = 1` so that `t = 0` is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Evenly spaced betas from `beta_start` (at t = 1) to `beta_end` (at t = T).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(format!(
                "beta bounds must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas = if steps == 1 {
            if beta_start != beta_end {
                return Err(Error::param(
                    "a single-step schedule needs beta_start == beta_end",
                ));
            }
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            let last = (steps - 1) as f64;
            (0..steps)
                .map(|i| {
                    if i == steps - 1 {
                        beta_end
                    } else {
                        beta_start + span * i as f64 / last
                    }
                })
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Builds a schedule from an explicit beta sequence (`betas[0]` is beta at t = 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::param("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::param(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * (1.0 - b));
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// Beta at 1-indexed step `t`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps(), "beta index {t} out of 1..={}", self.steps());
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative products, length T + 1, starting with 1.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        let ab = self.alpha_bars[t];
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            Err(Error::param(format!(
                "timestep {t} outside 0..={}",
                self.steps()
            )))
        } else {
            Ok(())
        }
    }

    /// Samples `x_t ~ q(x_t | x_0)` as `sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps`.
    pub fn forward_noise<D: Dimension>(
        &self,
        x0: ArrayView<f32, D>,
        t: usize,
        eps: ArrayView<f32, D>,
    ) -> Result<Array<f32, D>> {
        ensure_same_shape(x0.shape(), eps.shape())?;
        let (signal, noise) = self.coefficients(t)?;
        if t == 0 {
            return Ok(x0.to_owned());
        }
        let (signal, noise) = (signal as f32, noise as f32);
        let mut out = x0.to_owned();
        out.zip_mut_with(&eps, |x, &e| *x = signal * *x + noise * e);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn linear_endpoints() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 2e-2);
        assert!(s.betas().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.betas(), &[0.1]);
        assert_eq!(s.alpha_bars(), &[1.0, 0.9]);
    }

    #[test]
    fn two_step_half_betas() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5, 0.25]);
    }

    #[test]
    fn alpha_bars_follow_sequential_product() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let mut prod = 1.0f64;
        for t in 1..=1000 {
            prod *= 1.0 - s.beta(t);
            assert_eq!(s.alpha_bar(t), prod);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(0, 1e-4, 2e-2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 2e-2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
    }

    #[test]
    fn forward_noise_identity_at_zero() {
        let s = NoiseSchedule::linear(10, 1e-4, 2e-2).unwrap();
        let x0 = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| (i * 4 + j) as f32 * 0.1);
        let eps = Array3::from_elem((1, 4, 4), 3.0f32);
        let out = s.forward_noise(x0.view(), 0, eps.view()).unwrap();
        assert_eq!(out, x0);
    }

    #[test]
    fn forward_noise_pure_noise_limit() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        assert!(s.alpha_bar(1000) < 1e-4);
        let x0 = Array3::from_elem((1, 3, 3), 0.7f32);
        let eps = Array3::from_shape_fn((1, 3, 3), |(_, i, j)| i as f32 - j as f32);
        let out = s.forward_noise(x0.view(), 1000, eps.view()).unwrap();
        for (o, e) in out.iter().zip(eps.iter()) {
            assert!((o - e).abs() < 1e-2);
        }
    }

    #[test]
    fn forward_noise_hand_evaluation_matches_one_step_composition() {
        // alpha_bar = 0.25 at t = 2 when both betas are 0.5.
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        let x0 = Array3::from_elem((1, 2, 2), 2.0f32);
        let eps = Array3::from_elem((1, 2, 2), 1.0f32);
        let out = s.forward_noise(x0.view(), 2, eps.view()).unwrap();
        let expected = 0.5f64 * 2.0 + 0.75f64.sqrt();
        // Iterating x_t = sqrt(1-b) x_{t-1} + sqrt(b) e_t with independent unit
        // noises gives the same mean and total noise variance 1 - alpha_bar.
        let (mut mean, mut var) = (2.0f64, 0.0f64);
        for t in 1..=2 {
            let b = s.beta(t);
            mean *= (1.0 - b).sqrt();
            var = var * (1.0 - b) + b;
        }
        assert!((mean - 1.0).abs() < 1e-12);
        assert!((var - 0.75).abs() < 1e-12);
        for v in out.iter() {
            assert!((*v as f64 - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_noise_errors() {
        let s = NoiseSchedule::linear(10, 1e-4, 2e-2).unwrap();
        let x0 = Array3::<f32>::zeros((1, 2, 2));
        let eps = Array3::<f32>::zeros((1, 2, 3));
        assert!(matches!(
            s.forward_noise(x0.view(), 1, eps.view()),
            Err(Error::Shape { .. })
        ));
        assert!(s.forward_noise(x0.view(), 11, x0.view()).is_err());
    }

    #[test]
    fn coefficients_are_monotone() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        for t in 1..=1000 {
            let (a, b) = s.coefficients(t).unwrap();
            let (pa, pb) = s.coefficients(t - 1).unwrap();
            assert!(a < pa && b > pb);
        }
    }

    #[test]
    fn empirical_moments_match_marginal() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = ndarray::Array1::from_elem(100_000, 0.8f32);
        for t in [1usize, 500, 1000] {
            let eps = ndarray::Array1::from_shape_fn(100_000, |_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            });
            let xt = s.forward_noise(x0.view(), t, eps.view()).unwrap();
            let n = xt.len() as f64;
            let mean = xt.iter().map(|v| *v as f64).sum::<f64>() / n;
            let var = xt.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
            let ab = s.alpha_bar(t);
            let want_mean = ab.sqrt() * 0.8;
            let want_var = 1.0 - ab;
            // Near t = T the mean is ~0, so its tolerance is relative to the
            // marginal's scale rather than to the mean alone.
            let scale = want_mean.abs().max(want_var.sqrt());
            assert!((mean - want_mean).abs() <= 0.02 * scale, "t={t}");
            assert!((var - want_var).abs() <= 0.02 * want_var, "t={t}");
        }
    }
}
