//! Diffusion noise schedules over discrete timesteps 0..=1000.
//!
//! Both kinds are variance-preserving (alpha^2 + sigma^2 = 1): `CosineVp`
//! is the squared-cosine signal schedule, `LinearVp` accumulates a linear
//! beta ramp. tau = 0 is the identity (alpha = 1, sigma = 0).

use crate::nn::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_TAU: usize = 1000;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("timestep {0} outside [0, {MAX_TAU}]")]
    TauOutOfRange(usize),
    #[error("noise shape {0:?} does not match image shape {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    CosineVp,
    LinearVp,
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind) -> Self {
        let n = MAX_TAU + 1;
        let mut alpha_bar = vec![0.0; n];
        match kind {
            ScheduleKind::CosineVp => {
                let s = 0.008;
                let f = |t: f64| (((t / MAX_TAU as f64 + s) / (1.0 + s))
                    * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2);
                let f0 = f(0.0);
                for (t, a) in alpha_bar.iter_mut().enumerate() {
                    *a = (f(t as f64) / f0).clamp(0.0, 1.0);
                }
            }
            ScheduleKind::LinearVp => {
                let (beta_min, beta_max) = (1e-4, 0.02);
                let mut prod = 1.0;
                alpha_bar[0] = 1.0;
                for t in 1..n {
                    let beta =
                        beta_min + (beta_max - beta_min) * (t - 1) as f64 / (n - 2) as f64;
                    prod *= 1.0 - beta;
                    alpha_bar[t] = prod;
                }
            }
        }
        // tau = 0 is exactly the identity.
        alpha_bar[0] = 1.0;
        let alpha: Vec<f64> = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sigma: Vec<f64> = alpha_bar.iter().map(|a| (1.0 - a).max(0.0).sqrt()).collect();
        Self { kind, alpha, sigma }
    }

    pub fn alpha(&self, tau: usize) -> Result<f64, ScheduleError> {
        self.check(tau)?;
        Ok(self.alpha[tau])
    }

    pub fn sigma(&self, tau: usize) -> Result<f64, ScheduleError> {
        self.check(tau)?;
        Ok(self.sigma[tau])
    }

    fn check(&self, tau: usize) -> Result<(), ScheduleError> {
        if tau > MAX_TAU {
            return Err(ScheduleError::TauOutOfRange(tau));
        }
        Ok(())
    }

    /// x_tau = alpha_tau * x + sigma_tau * eps.
    pub fn add_noise(&self, x: &Tensor, tau: usize, eps: &Tensor) -> Result<Tensor, ScheduleError> {
        self.check(tau)?;
        if x.shape != eps.shape {
            return Err(ScheduleError::ShapeMismatch(eps.shape.clone(), x.shape.clone()));
        }
        let (a, s) = (self.alpha[tau], self.sigma[tau]);
        let data = x.data.iter().zip(&eps.data).map(|(xv, ev)| a * xv + s * ev).collect();
        Ok(Tensor { shape: x.shape.clone(), data })
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(ScheduleKind::CosineVp)
    }
}
