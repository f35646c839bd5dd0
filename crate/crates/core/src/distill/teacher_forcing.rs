use crate::backbone::{Backbone, ConditionSet, LayerKv, UnifiedSequence};
use crate::codec::LatentSequence;
use crate::error::{invalid, Error, Result};
use crate::flow::{forward_noise, velocity_target, LossGrad, NoisePlan};
use crate::masking::{build_tf_mask, AttentionMask, TfLayout};
use crate::tensor::{Rng, Tape};

/// Clean clip, its conditions, and a noise plan constant within each chunk.
#[derive(Debug, Clone)]
pub struct TfSample {
    pub clean: LatentSequence,
    pub cond: ConditionSet,
    pub plan: NoisePlan,
    pub chunk: usize,
}

impl TfSample {
    /// Draws one uniform timestep per chunk and fresh noise.
    pub fn draw(
        clean: LatentSequence,
        cond: ConditionSet,
        chunk: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if chunk == 0 || !clean.frames().is_multiple_of(chunk) {
            return Err(invalid(format!(
                "{} frames not divisible into chunks of {chunk}",
                clean.frames()
            )));
        }
        let mut t = Vec::with_capacity(clean.frames());
        for _ in 0..clean.frames() / chunk {
            let tc = rng.uniform();
            t.extend(std::iter::repeat_n(tc, chunk));
        }
        let plan = NoisePlan::sample(t, clean.tokens_per_frame(), clean.channels(), rng);
        Ok(Self {
            clean,
            cond,
            plan,
            chunk,
        })
    }
}

/// Velocity loss on the noisy half of `[cond | clean | cond | noisy]` under
/// the teacher-forcing mask.
pub fn teacher_forcing_step(student: &Backbone, sample: &TfSample) -> Result<LossGrad> {
    let p = student.config().tokens;
    let f = sample.clean.frames();
    let layout = TfLayout::new(student.config().cond_layout(), f, p, sample.chunk)?;
    let noisy = forward_noise(&sample.clean, &sample.plan)?;
    let target = velocity_target(&sample.clean, &sample.plan)?;
    let mut seq = UnifiedSequence::conditions(&sample.cond);
    seq.push_frames(&sample.clean, 0)?;
    seq.push_conditions(&sample.cond);
    seq.push_frames(&noisy, 0)?;
    if seq.len() != layout.len() {
        return Err(invalid(
            "sequence does not match the teacher-forcing layout",
        ));
    }
    let mask = build_tf_mask(&layout);
    let mut tape = Tape::new();
    let bound = student.bind(&mut tape);
    let out = student.forward_on(&mut tape, &bound, &seq, None, &mask)?;
    let pred = tape.slice_rows(out.pred, f * p, f * p)?;
    let loss = tape.mse(pred, &target)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("teacher-forcing loss".into()));
    }
    let grads = tape.backward(loss)?;
    Ok(LossGrad {
        loss: value,
        grads: bound.grads(&tape, &grads),
    })
}

/// The same loss computed chunk by chunk: each noisy chunk attends the
/// condition K/V plus the K/V of the ground-truth clean chunks before it.
pub fn teacher_forcing_loop_loss(student: &Backbone, sample: &TfSample) -> Result<f64> {
    let p = student.config().tokens;
    let c = sample.chunk;
    let noisy = forward_noise(&sample.clean, &sample.plan)?;
    let target = velocity_target(&sample.clean, &sample.plan)?;
    let mut ctx = student.condition_kv(&sample.cond)?;
    let mut total = 0.0;
    for k in 0..sample.clean.frames() / c {
        let mut ns = UnifiedSequence::new();
        ns.push_frames(&noisy.slice(k * c, c)?, k * c)?;
        let full = AttentionMask::full(c * p, ctx[0].len() + c * p);
        let pred = student.forward_incremental(&ns, &ctx, &full)?.pred;
        let tgt = target.slice_rows(k * c * p, c * p)?;
        total += pred.sub(&tgt)?.data().iter().map(|d| d * d).sum::<f64>();
        let mut cs = UnifiedSequence::new();
        cs.push_frames(&sample.clean.slice(k * c, c)?, k * c)?;
        let kv = student.forward_incremental(&cs, &ctx, &full)?.kv;
        ctx = ctx
            .iter()
            .zip(&kv)
            .map(|(a, b)| LayerKv::concat(&[a, b]))
            .collect::<Result<_>>()?;
    }
    Ok(total / target.len() as f64)
}
