//! One-dimensional Gaussian testbed with closed-form scores.
//!
//! Data `N(μ, σ²)` pushed through `z_t = (1 − t)x + tε` has marginal
//! `N((1 − t)μ, (1 − t)²σ² + t²)`. The generator is `x = aε + b`, so its
//! samples follow `N(b, a²)` and the fake score is available exactly.

use crate::backbone::ConditionSet;
use crate::codec::LatentSequence;
use crate::error::{invalid, Result};
use crate::flow::{StepSchedule, VelocityField};
use crate::tensor::{Rng, Tensor};

use super::{reweight, uniform_weights};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianOracle {
    pub mu_r: f64,
    pub sigma_r: f64,
    pub a: f64,
    pub b: f64,
}

/// Mean and variance of the noisy marginal of `N(m, s²)` at `t`.
pub fn marginal(m: f64, s: f64, t: f64) -> (f64, f64) {
    ((1.0 - t) * m, (1.0 - t).powi(2) * s * s + t * t)
}

/// `∇ log p_t(x)` for data `N(m, s²)`.
pub fn score(x: f64, t: f64, m: f64, s: f64) -> f64 {
    let (mean, var) = marginal(m, s, t);
    -(x - mean) / var
}

/// `E[z_0 | z_t = z]` for data `N(m, s²)`.
pub fn posterior_mean(z: f64, t: f64, m: f64, s: f64) -> f64 {
    let (mean, var) = marginal(m, s, t);
    m + (1.0 - t) * s * s / var * (z - mean)
}

/// `E[ε − z_0 | z_t = z]` for data `N(m, s²)`.
pub fn exact_velocity(z: f64, t: f64, m: f64, s: f64) -> f64 {
    let (mean, var) = marginal(m, s, t);
    let eps = t / var * (z - mean);
    eps - posterior_mean(z, t, m, s)
}

/// Element-wise exact velocity field of `N(m, s²)` data.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVelocity {
    pub m: f64,
    pub s: f64,
}

impl VelocityField for GaussianVelocity {
    fn velocity(&self, _: &ConditionSet, zt: &LatentSequence) -> Result<Tensor> {
        let t = zt.timesteps()[0];
        Ok(zt.data().map(|z| exact_velocity(z, t, self.m, self.s)))
    }
}

impl GaussianOracle {
    pub fn new(mu_r: f64, sigma_r: f64, a: f64, b: f64) -> Result<Self> {
        if !(sigma_r > 0.0) {
            return Err(invalid("σ_r must be positive"));
        }
        Ok(Self {
            mu_r,
            sigma_r,
            a,
            b,
        })
    }

    pub fn real_score(&self, x: f64, t: f64) -> f64 {
        score(x, t, self.mu_r, self.sigma_r)
    }

    pub fn fake_score(&self, x: f64, t: f64) -> f64 {
        score(x, t, self.b, self.a.abs())
    }

    /// Gradient of the weighted surrogate with respect to `(a, b)`.
    ///
    /// Sample `i` is `x_i = a·eps[i] + b`, re-noised with `noise[i]` at `t`;
    /// its cotangent is `−weights[i]·(1 − t)·(s_real − s_fake)`.
    pub fn dmd_gradient(&self, eps: &[f64], noise: &[f64], t: f64, weights: &[f64]) -> (f64, f64) {
        let mut ga = 0.0;
        let mut gb = 0.0;
        for i in 0..eps.len() {
            let x = self.a * eps[i] + self.b;
            let phi = (1.0 - t) * x + t * noise[i];
            let g = -weights[i] * (1.0 - t) * (self.real_score(phi, t) - self.fake_score(phi, t));
            ga += g * eps[i];
            gb += g;
        }
        (ga, gb)
    }
}

#[derive(Debug, Clone)]
pub struct GaussianRun {
    /// `(a, b)` before the first step and after every step.
    pub trajectory: Vec<(f64, f64)>,
}

impl GaussianRun {
    pub fn last(&self) -> (f64, f64) {
        *self
            .trajectory
            .last()
            .expect("trajectory starts with the initial point")
    }
}

/// Settings for [`gaussian_dmd_run`].
pub struct GaussianRunConfig<'a> {
    pub steps: usize,
    pub lr: f64,
    /// Samples ("frames") per step.
    pub batch: usize,
    pub seed: u64,
    pub schedule: StepSchedule,
    /// Per-sample reward and temperature; `None` gives uniform weights.
    pub reward: Option<(&'a dyn Fn(f64) -> f64, f64)>,
}

impl Default for GaussianRunConfig<'_> {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 0.05,
            batch: 256,
            seed: 0,
            schedule: StepSchedule::few_step(),
            reward: None,
        }
    }
}

/// Gradient descent on `(a, b)` with exact real and fake scores.
pub fn gaussian_dmd_run(
    mut oracle: GaussianOracle,
    cfg: &GaussianRunConfig,
) -> Result<GaussianRun> {
    let mut rng = Rng::new(cfg.seed);
    let times = cfg.schedule.times();
    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    trajectory.push((oracle.a, oracle.b));
    for _ in 0..cfg.steps {
        let eps = rng.normals(cfg.batch);
        let noise = rng.normals(cfg.batch);
        let t = times[rng.below(times.len())];
        let weights = match &cfg.reward {
            Some((r, tau)) => {
                let rewards: Vec<f64> = eps.iter().map(|e| r(oracle.a * e + oracle.b)).collect();
                reweight(&rewards, *tau)?
            }
            None => uniform_weights(cfg.batch),
        };
        let (ga, gb) = oracle.dmd_gradient(&eps, &noise, t, &weights);
        oracle.a -= cfg.lr * ga;
        oracle.b -= cfg.lr * gb;
        trajectory.push((oracle.a, oracle.b));
    }
    Ok(GaussianRun { trajectory })
}

/// Learned fake score for one-dimensional samples: at each timestep the
/// velocity is affine in `z`, which is exact for Gaussian data.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFakeScore {
    pub times: Vec<f64>,
    /// `(slope, intercept)` per timestep.
    pub coef: Vec<(f64, f64)>,
}

impl AffineFakeScore {
    pub fn new(times: Vec<f64>) -> Self {
        let coef = vec![(0.0, 0.0); times.len()];
        Self { times, coef }
    }

    fn index(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|&s| s == t)
            .ok_or_else(|| invalid(format!("untrained timestep {t}")))
    }

    pub fn velocity(&self, z: f64, t: f64) -> Result<f64> {
        let (w, c) = self.coef[self.index(t)?];
        Ok(w * z + c)
    }

    /// `∇ log p_t` implied by the velocity: `−(z + (1 − t)v)/t`.
    pub fn score(&self, z: f64, t: f64) -> Result<f64> {
        Ok(-(z + (1.0 - t) * self.velocity(z, t)?) / t)
    }

    /// One SGD step of the velocity regression loss on generator samples.
    pub fn train_step(&mut self, samples: &[f64], lr: f64, rng: &mut Rng) -> Result<f64> {
        let mut loss = 0.0;
        for k in 0..self.times.len() {
            let t = self.times[k];
            let (w, c) = self.coef[k];
            let (mut gw, mut gc) = (0.0, 0.0);
            for &x in samples {
                let e = rng.normal();
                let z = (1.0 - t) * x + t * e;
                let r = w * z + c - (e - x);
                loss += r * r;
                gw += 2.0 * r * z;
                gc += 2.0 * r;
            }
            let n = samples.len() as f64;
            self.coef[k] = (w - lr * gw / n, c - lr * gc / n);
        }
        Ok(loss / (samples.len() * self.times.len()) as f64)
    }
}
