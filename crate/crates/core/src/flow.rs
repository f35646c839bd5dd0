//! Flow matching: forward interpolation, the velocity regression loss and
//! the two samplers.
//!
//! With `z_t = (1 − t)·z_0 + t·ε` the regression target is `v = ε − z_0`,
//! and a velocity prediction turns into a clean estimate by
//! `x̂_0 = z_t − t·v`.

use crate::backbone::{Backbone, ConditionSet, UnifiedSequence};
use crate::codec::LatentSequence;
use crate::error::{invalid, Error, Result};
use crate::masking::teacher_mask;
use crate::tensor::{Checkpoint, Rng, Tape, Tensor};

/// Integer steps on the `0..=1000` scale, strictly decreasing and positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSchedule {
    steps: Vec<u32>,
}

impl StepSchedule {
    pub fn new(steps: Vec<u32>) -> Result<Self> {
        if steps.is_empty() {
            return Err(invalid("empty step schedule"));
        }
        if steps[0] > 1000 || *steps.last().expect("non-empty") == 0 {
            return Err(invalid(format!("schedule {steps:?} must lie in 1..=1000")));
        }
        if steps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(invalid(format!(
                "schedule {steps:?} is not strictly decreasing"
            )));
        }
        Ok(Self { steps })
    }

    /// `[1000, 750, 500, 250]`.
    pub fn few_step() -> Self {
        Self {
            steps: vec![1000, 750, 500, 250],
        }
    }

    pub fn steps(&self) -> &[u32] {
        &self.steps
    }

    pub fn times(&self) -> Vec<f64> {
        self.steps.iter().map(|&s| f64::from(s) / 1000.0).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let steps = text
            .split(|c: char| c == ',' || c.is_whitespace() || c == '[' || c == ']')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<u32>()
                    .map_err(|e| Error::Config(format!("schedule entry `{s}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(steps)
    }
}

/// Per-frame timesteps and noise for one latent sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePlan {
    pub t: Vec<f64>,
    /// Same shape as the latent data (`f·P × C`).
    pub eps: Tensor,
}

impl NoisePlan {
    /// Standard-normal noise for `frames` frames, timestep `t[i]` for frame `i`.
    pub fn sample(t: Vec<f64>, tokens: usize, channels: usize, rng: &mut Rng) -> Self {
        let eps = Tensor::randn(&[t.len() * tokens, channels], 1.0, rng);
        Self { t, eps }
    }
}

/// `(1 − t)·z_0 + t·ε` frame by frame.
pub fn forward_noise(z0: &LatentSequence, plan: &NoisePlan) -> Result<LatentSequence> {
    if plan.t.len() != z0.frames() || plan.eps.shape() != z0.data().shape() {
        return Err(crate::error::shape_err("noise plan does not match latents"));
    }
    if let Some(t) = plan.t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(invalid(format!("timestep {t} outside [0, 1]")));
    }
    let w = z0.tokens_per_frame() * z0.channels();
    let mut out = z0.data().clone();
    for (i, &t) in plan.t.iter().enumerate() {
        let span = i * w..(i + 1) * w;
        for (o, e) in out.data_mut()[span.clone()]
            .iter_mut()
            .zip(&plan.eps.data()[span])
        {
            *o = (1.0 - t) * *o + t * e;
        }
    }
    LatentSequence::new(out, z0.tokens_per_frame(), plan.t.clone())
}

/// `ε − z_0`.
pub fn velocity_target(z0: &LatentSequence, plan: &NoisePlan) -> Result<Tensor> {
    plan.eps.sub(z0.data())
}

/// Anything that predicts a velocity for noisy video frames under conditions.
pub trait VelocityField {
    fn velocity(&self, cond: &ConditionSet, zt: &LatentSequence) -> Result<Tensor>;
}

impl VelocityField for Backbone {
    /// Bidirectional pass over `[conditions | frames 0..f]`.
    fn velocity(&self, cond: &ConditionSet, zt: &LatentSequence) -> Result<Tensor> {
        let mut seq = UnifiedSequence::conditions(cond);
        seq.push_frames(zt, 0)?;
        let mask = teacher_mask(
            self.config().cond_layout(),
            seq.len() - self.config().cond_layout().len(),
        );
        Ok(self.forward(&seq, &mask)?.pred)
    }
}

/// Loss value and parameter gradients.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Checkpoint,
}

/// Velocity regression loss of the bidirectional backbone on video tokens.
pub fn cfm_loss(
    model: &Backbone,
    z0: &LatentSequence,
    cond: &ConditionSet,
    plan: &NoisePlan,
) -> Result<LossGrad> {
    let zt = forward_noise(z0, plan)?;
    let target = velocity_target(z0, plan)?;
    let mut seq = UnifiedSequence::conditions(cond);
    seq.push_frames(&zt, 0)?;
    let layout = model.config().cond_layout();
    let mask = teacher_mask(layout, seq.len() - layout.len());
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = model.forward_on(&mut tape, &bound, &seq, None, &mask)?;
    let loss = tape.mse(out.pred, &target)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("flow-matching loss".into()));
    }
    let grads = tape.backward(loss)?;
    Ok(LossGrad {
        loss: value,
        grads: bound.grads(&tape, &grads),
    })
}

/// Euler integration of `dz/dt = v` from `t = 1` down to `t = 0` in `steps` uniform steps.
pub fn sample_multistep(
    model: &dyn VelocityField,
    cond: &ConditionSet,
    frames: usize,
    tokens: usize,
    channels: usize,
    steps: usize,
    rng: &mut Rng,
) -> Result<LatentSequence> {
    if steps == 0 {
        return Err(invalid("at least one sampling step"));
    }
    let mut z = Tensor::randn(&[frames * tokens, channels], 1.0, rng);
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let zt = LatentSequence::new(z.clone(), tokens, vec![t; frames])?;
        let v = model.velocity(cond, &zt)?;
        z.axpy(-dt, &v)?;
        z.ensure_finite("multistep sample")?;
    }
    LatentSequence::clean(z, tokens)
}

/// One visited step of the few-step sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct FewStepTrace {
    pub t: f64,
    pub z_t: Tensor,
    pub x0_hat: Tensor,
}

/// Predict-then-renoise sampling over `schedule`, starting from `noise`.
///
/// `velocity(z_t, t)` supplies the model. Returns the final `x̂_0` and the
/// per-step trace.
pub fn fewstep_denoise<F>(
    schedule: &StepSchedule,
    noise: Tensor,
    rng: &mut Rng,
    mut velocity: F,
) -> Result<(Tensor, Vec<FewStepTrace>)>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let times = schedule.times();
    let mut z = noise;
    let mut trace = Vec::with_capacity(times.len());
    for (i, &t) in times.iter().enumerate() {
        let v = velocity(&z, t)?;
        let mut x0 = z.clone();
        x0.axpy(-t, &v)?;
        x0.ensure_finite("few-step estimate")?;
        trace.push(FewStepTrace {
            t,
            z_t: z.clone(),
            x0_hat: x0.clone(),
        });
        if let Some(&next) = times.get(i + 1) {
            let eps = Tensor::randn(x0.shape(), 1.0, rng);
            z = x0.scale(1.0 - next);
            z.axpy(next, &eps)?;
        }
    }
    let out = trace.last().expect("non-empty schedule").x0_hat.clone();
    Ok((out, trace))
}

pub fn sample_fewstep(
    model: &dyn VelocityField,
    cond: &ConditionSet,
    frames: usize,
    tokens: usize,
    channels: usize,
    schedule: &StepSchedule,
    rng: &mut Rng,
) -> Result<(LatentSequence, Vec<FewStepTrace>)> {
    let noise = Tensor::randn(&[frames * tokens, channels], 1.0, rng);
    let (x0, trace) = fewstep_denoise(schedule, noise, rng, |z, t| {
        model.velocity(
            cond,
            &LatentSequence::new(z.clone(), tokens, vec![t; frames])?,
        )
    })?;
    Ok((LatentSequence::clean(x0, tokens)?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::tensor::{finite_diff_check, Rng};
    use proptest::prelude::*;

    /// Exact velocity field when every clean sample equals `c`.
    struct PointMass(Tensor);

    impl VelocityField for PointMass {
        fn velocity(&self, _: &ConditionSet, zt: &LatentSequence) -> Result<Tensor> {
            let t = zt.timesteps()[0];
            Ok(zt.data().sub(&self.0)?.scale(1.0 / t))
        }
    }

    fn seq(data: Vec<f64>) -> LatentSequence {
        LatentSequence::clean(Tensor::matrix(1, data.len(), data).unwrap(), 1).unwrap()
    }

    fn dummy_cond(c: usize) -> ConditionSet {
        ConditionSet::new(Tensor::zeros(&[1, c]), Tensor::zeros(&[1, c])).unwrap()
    }

    #[test]
    fn forward_noise_boundaries() {
        let z0 = seq(vec![2.0, -1.0]);
        let eps = Tensor::matrix(1, 2, vec![0.5, 3.0]).unwrap();
        let at = |t: f64| {
            forward_noise(
                &z0,
                &NoisePlan {
                    t: vec![t],
                    eps: eps.clone(),
                },
            )
            .unwrap()
        };
        assert_eq!(at(0.0).data(), z0.data());
        assert_eq!(at(1.0).data(), &eps);
        let mid = forward_noise(
            &seq(vec![2.0]),
            &NoisePlan {
                t: vec![0.5],
                eps: Tensor::zeros(&[1, 1]),
            },
        )
        .unwrap();
        assert_eq!(mid.data().data(), &[1.0]);
        assert!(forward_noise(&z0, &NoisePlan { t: vec![1.5], eps }).is_err());
    }

    proptest! {
        #[test]
        fn forward_noise_is_affine(seed in any::<u64>(), t in 0.0f64..=1.0, a in -3.0f64..3.0) {
            let mut rng = Rng::new(seed);
            let z1 = LatentSequence::clean(Tensor::randn(&[4, 3], 1.0, &mut rng), 2).unwrap();
            let z2 = LatentSequence::clean(Tensor::randn(&[4, 3], 1.0, &mut rng), 2).unwrap();
            let e1 = Tensor::randn(&[4, 3], 1.0, &mut rng);
            let e2 = Tensor::randn(&[4, 3], 1.0, &mut rng);
            let plan = |e: Tensor| NoisePlan { t: vec![t, t], eps: e };
            let mixed_z = LatentSequence::clean(z1.data().scale(a).add(z2.data()).unwrap(), 2).unwrap();
            let mixed = forward_noise(&mixed_z, &plan(e1.scale(a).add(&e2).unwrap())).unwrap();
            let sep = forward_noise(&z1, &plan(e1)).unwrap().data().scale(a)
                .add(forward_noise(&z2, &plan(e2)).unwrap().data()).unwrap();
            prop_assert!(mixed.data().max_abs_diff(&sep) < 1e-12);
        }

        #[test]
        fn exact_velocity_reconstructs_clean(seed in any::<u64>(), t in 0.0f64..=1.0) {
            let mut rng = Rng::new(seed);
            let z0 = LatentSequence::clean(Tensor::randn(&[2, 3], 2.0, &mut rng), 2).unwrap();
            let plan = NoisePlan::sample(vec![t], 2, 3, &mut rng);
            let zt = forward_noise(&z0, &plan).unwrap();
            let v = velocity_target(&z0, &plan).unwrap();
            let mut x0 = zt.data().clone();
            x0.axpy(-t, &v).unwrap();
            prop_assert!(x0.max_abs_diff(z0.data()) < 1e-12);
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(StepSchedule::new(vec![1000, 750, 500, 250]).is_ok());
        assert!(StepSchedule::new(vec![500, 750]).is_err());
        assert!(StepSchedule::new(vec![1000, 0]).is_err());
        assert!(StepSchedule::new(vec![]).is_err());
        assert_eq!(
            StepSchedule::parse("[1000, 750,500 250]").unwrap(),
            StepSchedule::few_step()
        );
        assert_eq!(StepSchedule::few_step().times(), vec![1.0, 0.75, 0.5, 0.25]);
    }

    #[test]
    fn samplers_recover_point_mass() {
        let c = Tensor::matrix(1, 3, vec![0.5, -2.0, 1.0]).unwrap();
        let model = PointMass(c.clone());
        let cond = dummy_cond(3);
        for n in [1, 2, 7, 50] {
            let out = sample_multistep(&model, &cond, 1, 1, 3, n, &mut Rng::new(n as u64)).unwrap();
            assert!(out.data().max_abs_diff(&c) < 1e-12, "steps {n}");
        }
        let (out, trace) = sample_fewstep(
            &model,
            &cond,
            1,
            1,
            3,
            &StepSchedule::few_step(),
            &mut Rng::new(3),
        )
        .unwrap();
        assert!(out.data().max_abs_diff(&c) < 1e-12);
        for step in trace {
            assert!(step.x0_hat.max_abs_diff(&c) < 1e-12);
        }
    }

    #[test]
    fn single_euler_step_equals_single_fewstep() {
        let mut rng = Rng::new(8);
        let model = Backbone::new(
            BackboneConfig {
                tokens: 1,
                channels: 2,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        let cond = ConditionSet::new(
            Tensor::randn(&[1, 2], 1.0, &mut rng),
            Tensor::randn(&[1, 2], 1.0, &mut rng),
        )
        .unwrap();
        let euler = sample_multistep(&model, &cond, 3, 1, 2, 1, &mut Rng::new(4)).unwrap();
        let (few, _) = sample_fewstep(
            &model,
            &cond,
            3,
            1,
            2,
            &StepSchedule::new(vec![1000]).unwrap(),
            &mut Rng::new(4),
        )
        .unwrap();
        assert_eq!(euler.data(), few.data());
    }

    #[test]
    fn zero_model_loss_is_about_two() {
        // E‖ε − z0‖² per element with independent unit normals.
        let mut rng = Rng::new(21);
        let n = 100_000;
        let z0 = rng.normals(n);
        let eps = rng.normals(n);
        let sq: Vec<f64> = z0.iter().zip(&eps).map(|(a, b)| (b - a).powi(2)).collect();
        let mean = sq.iter().sum::<f64>() / n as f64;
        let var = sq.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(
            (mean - 2.0).abs() <= 3.0 * (var / n as f64).sqrt(),
            "{mean}"
        );
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_loss_is_nonnegative() {
        let mut rng = Rng::new(2);
        let mut model = Backbone::new(
            BackboneConfig {
                tokens: 1,
                channels: 2,
                layers: 1,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        let z0 = LatentSequence::clean(Tensor::randn(&[3, 2], 1.0, &mut rng), 1).unwrap();
        let cond = ConditionSet::new(
            Tensor::randn(&[1, 2], 1.0, &mut rng),
            Tensor::randn(&[1, 2], 1.0, &mut rng),
        )
        .unwrap();
        let plan = NoisePlan::sample(vec![0.3; 3], 1, 2, &mut rng);
        assert!(cfm_loss(&model, &z0, &cond, &plan).unwrap().loss > 0.0);
        // Zero the output weights and put the target in the bias: only valid
        // when the target is the same for every token, so use a constant target.
        let z0 = LatentSequence::clean(Tensor::filled(&[3, 2], 0.25), 1).unwrap();
        let plan = NoisePlan {
            t: vec![0.3; 3],
            eps: Tensor::filled(&[3, 2], 1.0),
        };
        model
            .params_mut()
            .insert("out.w".into(), Tensor::zeros(&[16, 2]));
        model
            .params_mut()
            .insert("out.b".into(), Tensor::filled(&[1, 2], 0.75));
        assert!(cfm_loss(&model, &z0, &cond, &plan).unwrap().loss < 1e-30);
    }

    #[test]
    fn cfm_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let cfg = BackboneConfig {
            tokens: 2,
            channels: 4,
            layers: 1,
            ..Default::default()
        };
        let model = Backbone::new(cfg, &mut rng).unwrap();
        let z0 = LatentSequence::clean(Tensor::randn(&[6, 4], 1.0, &mut rng), 2).unwrap();
        let cond = ConditionSet::new(
            Tensor::randn(&[2, 4], 1.0, &mut rng),
            Tensor::randn(&[2, 4], 1.0, &mut rng),
        )
        .unwrap();
        let plan = NoisePlan::sample(vec![0.2, 0.5, 0.9], 2, 4, &mut rng);
        let lg = cfm_loss(&model, &z0, &cond, &plan).unwrap();
        for name in [
            "layers.0.attn.q",
            "embed.slots",
            "out.w",
            "layers.0.norm2.gain",
        ] {
            let params = model.params()[name].clone();
            let err = finite_diff_check(
                |p| {
                    let mut m = model.clone();
                    m.params_mut().insert(name.into(), p.clone());
                    cfm_loss(&m, &z0, &cond, &plan).unwrap().loss
                },
                &lg.grads[name],
                &params,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{name}: {err}");
        }
    }
}
