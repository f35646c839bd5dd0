//! AdamW over named parameter maps.

use crate::error::{invalid, Result};
use crate::tensor::{Checkpoint, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamConfig,
    m: Checkpoint,
    v: Checkpoint,
    steps: u64,
}

impl AdamW {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Checkpoint::new(),
            v: Checkpoint::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update for every parameter that has a gradient.
    pub fn step(&mut self, params: &mut Checkpoint, grads: &Checkpoint) -> Result<()> {
        let norm = grads
            .values()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(crate::error::Error::NonFinite("gradient".into()));
        }
        let scale = match self.config.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| invalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(invalid(format!("gradient shape for `{name}`")));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i] * scale;
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * pd[i]);
            }
        }
        Ok(())
    }
}

/// Element-wise sum of two gradient maps with matching keys.
pub fn accumulate(into: &mut Checkpoint, other: &Checkpoint, weight: f64) -> Result<()> {
    for (name, g) in other {
        match into.get_mut(name) {
            Some(acc) => acc.axpy(weight, g)?,
            None => {
                into.insert(name.clone(), g.scale(weight));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_a_quadratic() {
        let mut params = Checkpoint::new();
        params.insert("x".into(), Tensor::matrix(1, 2, vec![3.0, -4.0]).unwrap());
        let mut opt = AdamW::new(AdamConfig {
            lr: 0.05,
            clip: None,
            ..Default::default()
        });
        for _ in 0..2000 {
            let mut g = Checkpoint::new();
            g.insert("x".into(), params["x"].scale(2.0));
            opt.step(&mut params, &g).unwrap();
        }
        assert!(params["x"].norm() < 1e-3);
        assert_eq!(opt.steps(), 2000);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = Checkpoint::new();
        params.insert("x".into(), Tensor::scalar(1.0));
        let mut g = Checkpoint::new();
        g.insert("x".into(), Tensor::scalar(0.3));
        let mut opt = AdamW::new(AdamConfig {
            lr: 0.1,
            eps: 0.0,
            clip: None,
            ..Default::default()
        });
        opt.step(&mut params, &g).unwrap();
        assert!((params["x"].data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn unknown_parameter_rejected() {
        let mut g = Checkpoint::new();
        g.insert("y".into(), Tensor::scalar(1.0));
        assert!(AdamW::new(AdamConfig::default())
            .step(&mut Checkpoint::new(), &g)
            .is_err());
    }
}
