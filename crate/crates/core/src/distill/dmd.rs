use crate::backbone::{Backbone, ConditionSet};
use crate::codec::{Codec, LatentSequence};
use crate::error::{invalid, Error, Result};
use crate::flow::{cfm_loss, NoisePlan, StepSchedule, VelocityField};
use crate::kvcache::KvCache;
use crate::masking::AttentionMask;
use crate::optim::{AdamConfig, AdamW};
use crate::session::{chunk_sequence, clean_chunk_kv, denoise_chunk};
use crate::tensor::{Rng, Tape, Tensor, Var};

use super::{reweight, uniform_weights, RewardAdapter};

#[derive(Debug, Clone, PartialEq)]
pub struct DmdConfig {
    /// Frames per rolled-out clip; a multiple of the chunk size.
    pub frames: usize,
    /// Softmax temperature; `None` gives uniform `1/f` weights.
    pub tau: Option<f64>,
    pub reward: RewardAdapter,
    /// Fake-score updates per generator update.
    pub ratio: usize,
    pub generator_adam: AdamConfig,
    pub fake_adam: AdamConfig,
    pub schedule: StepSchedule,
    pub max_slots: usize,
    /// Divide the cotangent by the mean absolute gap between the clip and
    /// the real model's clean estimate.
    pub normalize: bool,
}

impl Default for DmdConfig {
    fn default() -> Self {
        let adam = AdamConfig {
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.999,
            weight_decay: 0.01,
            ..Default::default()
        };
        Self {
            frames: 6,
            tau: Some(0.2),
            reward: RewardAdapter::default(),
            ratio: 5,
            generator_adam: adam,
            fake_adam: adam,
            schedule: StepSchedule::few_step(),
            max_slots: 23,
            normalize: false,
        }
    }
}

/// Generator, trainable fake score, frozen real score and their optimizers.
#[derive(Debug, Clone)]
pub struct DmdState {
    pub generator: Backbone,
    pub fake: Backbone,
    real: Backbone,
    pub codec: Codec,
    pub config: DmdConfig,
    gen_opt: AdamW,
    fake_opt: AdamW,
    pub gen_steps: usize,
    pub fake_steps: usize,
    pub skipped: usize,
    rng: Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmdReport {
    pub t: f64,
    pub rewards: Vec<f64>,
    pub weights: Vec<f64>,
    pub fake_loss: f64,
    /// Norm of the cotangent applied to the generator output.
    pub cotangent_norm: f64,
    pub skipped: bool,
}

/// Rolled-out clip with the final denoising step of every chunk on a tape.
struct Rollout {
    clip: LatentSequence,
    x0: Var,
}

impl DmdState {
    /// Generator and fake score both start from the teacher.
    pub fn new(teacher: Backbone, codec: Codec, config: DmdConfig, seed: u64) -> Result<Self> {
        if config.frames == 0 || !config.frames.is_multiple_of(teacher.config().chunk) {
            return Err(invalid(format!(
                "{} frames is not a whole number of chunks",
                config.frames
            )));
        }
        if config.ratio == 0 {
            return Err(invalid("update ratio must be positive"));
        }
        Ok(Self {
            generator: teacher.clone(),
            fake: teacher.clone(),
            real: teacher,
            codec,
            gen_opt: AdamW::new(config.generator_adam),
            fake_opt: AdamW::new(config.fake_adam),
            config,
            gen_steps: 0,
            fake_steps: 0,
            skipped: 0,
            rng: Rng::new(seed),
        })
    }

    /// Starts from a teacher-forced student instead of the teacher.
    pub fn with_generator(mut self, generator: Backbone) -> Result<Self> {
        if generator.config() != self.real.config() {
            return Err(invalid("generator and teacher configs differ"));
        }
        self.generator = generator;
        Ok(self)
    }

    pub fn real(&self) -> &Backbone {
        &self.real
    }

    /// Self-forcing rollout of `frames` frames through a rolling cache.
    pub fn rollout(&mut self, cond: &ConditionSet) -> Result<LatentSequence> {
        let mut tape = Tape::new();
        Ok(self.rollout_on(&mut tape, None, cond)?.clip)
    }

    fn rollout_on(
        &mut self,
        tape: &mut Tape,
        bound: Option<&crate::backbone::Bound>,
        cond: &ConditionSet,
    ) -> Result<Rollout> {
        let g = &self.generator;
        let cfg = *g.config();
        let mut cache = KvCache::new(self.config.max_slots, g, cond.clone())?;
        let mut parts = Vec::new();
        let mut chunks = Vec::new();
        for _ in 0..self.config.frames / cfg.chunk {
            let ctx = cache.context()?;
            let pos = cache.next_position();
            let noise = Tensor::randn(&[cfg.chunk * cfg.tokens, cfg.channels], 1.0, &mut self.rng);
            let (x0, trace, _) =
                denoise_chunk(g, &ctx, pos, &self.config.schedule, noise, &mut self.rng)?;
            let x0 = match bound {
                Some(bound) => {
                    let last = trace.last().expect("non-empty schedule");
                    let n = last.z_t.rows();
                    let seq = chunk_sequence(&last.z_t, pos, cfg.tokens, last.t)?;
                    let mask = AttentionMask::full(n, ctx[0].len() + n);
                    let pred = g.forward_on(tape, bound, &seq, Some(&ctx), &mask)?.pred;
                    let z = tape.leaf(last.z_t.clone());
                    let step = tape.scale(pred, -last.t);
                    let v = tape.add(z, step)?;
                    parts.push(v);
                    tape.value(v).clone()
                }
                None => x0,
            };
            let kv = clean_chunk_kv(g, &ctx, pos, &x0)?;
            let first = cache.next_frame();
            cache.append_and_evict(
                kv.into_iter()
                    .enumerate()
                    .map(|(j, k)| (first + j, k))
                    .collect(),
            )?;
            chunks.push(x0);
        }
        let refs: Vec<&Tensor> = chunks.iter().collect();
        let clip = LatentSequence::clean(Tensor::concat_rows(&refs)?, cfg.tokens)?;
        let x0 = if parts.is_empty() {
            tape.leaf(clip.data().clone())
        } else {
            tape.concat_rows(&parts)?
        };
        Ok(Rollout { clip, x0 })
    }

    /// Per-frame rewards of a clip and the resulting weights.
    pub fn frame_weights(&self, clip: &LatentSequence) -> Result<(Vec<f64>, Vec<f64>)> {
        let rewards = (0..clip.frames())
            .map(|i| {
                self.config
                    .reward
                    .reward(clip.frame_vec(i), Some(&self.codec))
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = match self.config.tau {
            Some(tau) => reweight(&rewards, tau)?,
            None => uniform_weights(clip.frames()),
        };
        Ok((rewards, weights))
    }
}

/// One flow-matching update of the fake score on a fresh generator clip.
pub fn train_fake_score(state: &mut DmdState, cond: &ConditionSet) -> Result<f64> {
    let clip = state.rollout(cond)?;
    let t = state.rng.uniform().max(1e-3);
    let plan = NoisePlan::sample(
        vec![t; clip.frames()],
        clip.tokens_per_frame(),
        clip.channels(),
        &mut state.rng,
    );
    let lg = cfm_loss(&state.fake, &clip, cond, &plan)?;
    state.fake_opt.step(state.fake.params_mut(), &lg.grads)?;
    state.fake_steps += 1;
    Ok(lg.loss)
}

/// `ratio` fake-score updates followed by one generator update.
///
/// The generator receives the cotangent `A_i·(1 − t)²/t·(v_real − v_fake)`
/// on frame `i` of its clean estimate, which is the reweighted score gap
/// written in terms of velocities.
pub fn dmd_step(state: &mut DmdState, cond: &ConditionSet) -> Result<DmdReport> {
    let mut fake_loss = 0.0;
    for _ in 0..state.config.ratio {
        fake_loss += train_fake_score(state, cond)? / state.config.ratio as f64;
    }

    let mut tape = Tape::new();
    let bound = state.generator.bind(&mut tape);
    let Rollout { clip, x0 } = state.rollout_on(&mut tape, Some(&bound), cond)?;
    let (rewards, weights) = state.frame_weights(&clip)?;

    let times = state.config.schedule.times();
    let t = times[state.rng.below(times.len())];
    let plan = NoisePlan::sample(
        vec![t; clip.frames()],
        clip.tokens_per_frame(),
        clip.channels(),
        &mut state.rng,
    );
    let zt = crate::flow::forward_noise(&clip, &plan)?;
    let gap = state
        .real
        .velocity(cond, &zt)?
        .sub(&state.fake.velocity(cond, &zt)?)?;
    let cot = dmd_cotangent(&gap, &weights, t, clip.tokens_per_frame())?;
    let cot = if state.config.normalize {
        let mut real_x0 = zt.data().clone();
        real_x0.axpy(-t, &state.real.velocity(cond, &zt)?)?;
        let scale = clip
            .data()
            .sub(&real_x0)?
            .data()
            .iter()
            .map(|v| v.abs())
            .sum::<f64>()
            / clip.data().len() as f64;
        cot.scale(1.0 / scale.max(1e-8))
    } else {
        cot
    };

    let cotangent_norm = cot.norm();
    if !cot.is_finite() {
        state.skipped += 1;
        return Ok(DmdReport {
            t,
            rewards,
            weights,
            fake_loss,
            cotangent_norm,
            skipped: true,
        });
    }
    let grads = tape.backward_from(x0, &cot)?;
    let grads = bound.grads(&tape, &grads);
    if grads.values().any(|g| !g.is_finite()) {
        state.skipped += 1;
        return Ok(DmdReport {
            t,
            rewards,
            weights,
            fake_loss,
            cotangent_norm,
            skipped: true,
        });
    }
    state.gen_opt.step(state.generator.params_mut(), &grads)?;
    state.gen_steps += 1;
    Ok(DmdReport {
        t,
        rewards,
        weights,
        fake_loss,
        cotangent_norm,
        skipped: false,
    })
}

/// Frame-weighted cotangent from a velocity gap `v_real − v_fake`.
pub fn dmd_cotangent(gap: &Tensor, weights: &[f64], t: f64, tokens: usize) -> Result<Tensor> {
    if gap.rows() != weights.len() * tokens {
        return Err(invalid("one weight per frame"));
    }
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} must be positive"
        )));
    }
    let c = (1.0 - t).powi(2) / t;
    let mut out = gap.clone();
    for (r, row) in out.data_mut().chunks_mut(gap.cols()).enumerate() {
        let w = weights[r / tokens] * c;
        row.iter_mut().for_each(|v| *v *= w);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn state(tau: Option<f64>) -> (DmdState, ConditionSet) {
        let mut rng = Rng::new(3);
        let cfg = BackboneConfig {
            tokens: 2,
            channels: 4,
            layers: 1,
            ..Default::default()
        };
        let teacher = Backbone::new(cfg, &mut rng).unwrap();
        let codec = Codec::new(16, 2, 4, 1).unwrap();
        let cond = ConditionSet::new(
            Tensor::randn(&[2, 4], 1.0, &mut rng),
            Tensor::randn(&[2, 4], 1.0, &mut rng),
        )
        .unwrap();
        let config = DmdConfig {
            tau,
            ratio: 2,
            ..Default::default()
        };
        (DmdState::new(teacher, codec, config, 8).unwrap(), cond)
    }

    #[test]
    fn cotangent_matches_score_form() {
        let mut rng = Rng::new(1);
        let (vr, vf) = (
            Tensor::randn(&[4, 3], 1.0, &mut rng),
            Tensor::randn(&[4, 3], 1.0, &mut rng),
        );
        let (t, w) = (0.5, [0.3, 0.7]);
        let cot = dmd_cotangent(&vr.sub(&vf).unwrap(), &w, t, 2).unwrap();
        // Scores from velocities: s = −(z + (1 − t)v)/t with any shared z.
        let z = Tensor::randn(&[4, 3], 1.0, &mut rng);
        for r in 0..4 {
            for c in 0..3 {
                let sr = -(z.get(r, c) + (1.0 - t) * vr.get(r, c)) / t;
                let sf = -(z.get(r, c) + (1.0 - t) * vf.get(r, c)) / t;
                let want = -w[r / 2] * (1.0 - t) * (sr - sf);
                assert!((cot.get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn real_score_is_frozen_and_counters_follow_the_ratio() {
        let (mut s, cond) = state(Some(0.2));
        let real = s.real().clone();
        for _ in 0..3 {
            dmd_step(&mut s, &cond).unwrap();
        }
        assert_eq!(s.real(), &real);
        assert_eq!(s.gen_steps + s.skipped, 3);
        assert_eq!(s.fake_steps, 6);
        assert_ne!(s.fake.params(), real.params());
    }

    #[test]
    fn identical_scores_leave_the_generator_unmoved() {
        let (mut s, cond) = state(Some(0.2));
        s.config.ratio = 1;
        s.fake_opt.config.lr = 0.0;
        s.gen_opt.config.weight_decay = 0.0;
        let before = s.generator.clone();
        let report = dmd_step(&mut s, &cond).unwrap();
        assert_eq!(report.cotangent_norm, 0.0);
        for (name, p) in s.generator.params() {
            assert!(p.max_abs_diff(&before.params()[name]) < 1e-12, "{name}");
        }
    }

    #[test]
    fn uniform_rewards_match_vanilla_bit_for_bit() {
        let (mut weighted, cond) = state(Some(0.2));
        let (mut vanilla, _) = state(None);
        // Every frame norm vanishes against this radius, so all rewards tie.
        weighted.config.reward.radius = 1e300;
        for _ in 0..2 {
            let a = dmd_step(&mut weighted, &cond).unwrap();
            let b = dmd_step(&mut vanilla, &cond).unwrap();
            assert_eq!(a.weights, b.weights);
        }
        assert_eq!(weighted.generator.params(), vanilla.generator.params());
    }

    #[test]
    fn rollout_matches_a_streaming_session() {
        let (mut s, cond) = state(None);
        let clip = s.rollout(&cond).unwrap();
        let mut session = crate::session::Session::start(
            s.generator.clone(),
            s.codec.clone(),
            crate::session::SessionConfig::default(),
            cond,
            8,
        )
        .unwrap();
        let a = session.step().unwrap();
        let b = session.step().unwrap();
        let want = Tensor::concat_rows(&[&a, &b]).unwrap();
        assert!(clip.data().max_abs_diff(&want) < 1e-12);
    }
}
