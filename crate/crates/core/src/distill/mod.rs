//! Teacher forcing, distribution matching distillation with optional
//! per-frame reward reweighting, and a closed-form Gaussian testbed.

mod dmd;
mod gaussian;
mod teacher_forcing;

pub use dmd::{dmd_cotangent, dmd_step, train_fake_score, DmdConfig, DmdReport, DmdState};
pub use gaussian::{
    exact_velocity, gaussian_dmd_run, marginal, posterior_mean, score, AffineFakeScore,
    GaussianOracle, GaussianRun, GaussianRunConfig, GaussianVelocity,
};
pub use teacher_forcing::{teacher_forcing_loop_loss, teacher_forcing_step, TfSample};

use crate::codec::Codec;
use crate::error::{invalid, Error, Result};

/// `A_i = exp(−R_i/τ) / Σ_j exp(−R_j/τ)`.
pub fn reweight(rewards: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(invalid(format!("temperature {tau} must be positive")));
    }
    if rewards.is_empty() {
        return Err(invalid("no rewards to reweight"));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("rewards".into()));
    }
    let logits: Vec<f64> = rewards.iter().map(|r| -r / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / total).collect())
}

/// Uniform weights `1/f`.
pub fn uniform_weights(f: usize) -> Vec<f64> {
    vec![1.0 / f as f64; f]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardTarget {
    Latent,
    Pixel,
}

/// `R(frame) = −| ‖frame‖₂ − radius |`, on the latent or its decoded still.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardAdapter {
    pub radius: f64,
    pub target: RewardTarget,
}

impl Default for RewardAdapter {
    fn default() -> Self {
        Self {
            radius: 1.0,
            target: RewardTarget::Latent,
        }
    }
}

impl RewardAdapter {
    pub fn reward(&self, latent_frame: &[f64], codec: Option<&Codec>) -> Result<f64> {
        let norm = match self.target {
            RewardTarget::Latent => latent_frame.iter().map(|v| v * v).sum::<f64>().sqrt(),
            RewardTarget::Pixel => {
                let codec = codec.ok_or_else(|| invalid("pixel rewards need a codec"))?;
                codec
                    .decode_image(latent_frame)?
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            }
        };
        Ok(-(norm - self.radius).abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spot_values() {
        let w = reweight(&[0.0, 1.0, 2.0], 1.0).unwrap();
        // Direct evaluation of e^{-r} / (1 + e^{-1} + e^{-2}).
        let z = 1.0 + (-1.0f64).exp() + (-2.0f64).exp();
        for (got, want) in w
            .iter()
            .zip([1.0 / z, (-1.0f64).exp() / z, (-2.0f64).exp() / z])
        {
            assert!((got - want).abs() < 1e-15);
        }
        for (got, want) in w.iter().zip([0.66524, 0.24473, 0.09003]) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn limits_and_errors() {
        assert_eq!(reweight(&[3.0; 4], 0.2).unwrap(), vec![0.25; 4]);
        let w = reweight(&[0.0, 1.0, 5.0], 1e6).unwrap();
        assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-6));
        assert!(reweight(&[1.0], 0.0).is_err());
        assert!(reweight(&[f64::NAN], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn weights_are_a_monotone_distribution(r in prop::collection::vec(-5.0f64..5.0, 1..12), tau in 0.05f64..10.0, shift in -50.0f64..50.0) {
            let w = reweight(&r, tau).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|x| *x > 0.0));
            let shifted: Vec<f64> = r.iter().map(|x| x + shift).collect();
            let ws = reweight(&shifted, tau).unwrap();
            for (a, b) in w.iter().zip(&ws) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for i in 0..r.len() {
                for j in 0..r.len() {
                    if r[i] < r[j] {
                        prop_assert!(w[i] > w[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn reward_is_deterministic_and_peaks_on_the_sphere() {
        let a = RewardAdapter::default();
        let on = [0.6, 0.8];
        assert_eq!(a.reward(&on, None).unwrap(), 0.0);
        assert_eq!(a.reward(&[3.0, 4.0], None).unwrap(), -4.0);
        assert_eq!(
            a.reward(&[3.0, 4.0], None).unwrap(),
            a.reward(&[3.0, 4.0], None).unwrap()
        );
        let pixel = RewardAdapter {
            target: RewardTarget::Pixel,
            ..a
        };
        assert!(pixel.reward(&on, None).is_err());
    }
}
