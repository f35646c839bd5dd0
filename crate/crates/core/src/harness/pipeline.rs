//! Teacher pre-training, teacher-forcing initialization and reweighted DMD.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::backbone::Backbone;
use crate::distill::{
    dmd_step, teacher_forcing_step, DmdConfig, DmdReport, DmdState, RewardAdapter, RewardTarget,
    TfSample,
};
use crate::error::{Error, Result};
use crate::flow::{cfm_loss, LossGrad, NoisePlan};
use crate::optim::{accumulate, AdamConfig, AdamW};
use crate::tensor::{write_checkpoint, Checkpoint, Rng};

use super::data::{generate_dataset, Dataset, SyntheticSample};
use super::HarnessConfig;

fn diverged(stage: &str, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged {
            stage: stage.into(),
            detail: format!("non-finite {what}"),
        },
        other => other,
    }
}

/// Linear decay to a tenth of the base rate.
fn decayed(lr: f64, step: usize, total: usize) -> f64 {
    lr * (1.0 - 0.9 * step as f64 / total.max(1) as f64)
}

/// Averaged loss and gradients over `batch` draws from the training split.
fn batch_step(
    model: &mut Backbone,
    opt: &mut AdamW,
    data: &Dataset,
    batch: usize,
    rng: &mut Rng,
    mut loss: impl FnMut(&Backbone, &SyntheticSample, &mut Rng) -> Result<LossGrad>,
) -> Result<f64> {
    let mut grads = Checkpoint::new();
    let mut total = 0.0;
    for _ in 0..batch {
        let sample = &data.train[rng.below(data.train.len())];
        let lg = loss(model, sample, rng)?;
        total += lg.loss / batch as f64;
        accumulate(&mut grads, &lg.grads, 1.0 / batch as f64)?;
    }
    opt.step(model.params_mut(), &grads)?;
    Ok(total)
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    stage: &str,
    model: &mut Backbone,
    lr: f64,
    steps: usize,
    cfg: &HarnessConfig,
    data: &Dataset,
    rng: &mut Rng,
    mut loss: impl FnMut(&Backbone, &SyntheticSample, &mut Rng) -> Result<LossGrad>,
) -> Result<Vec<f64>> {
    let mut opt = AdamW::new(AdamConfig {
        lr,
        ..Default::default()
    });
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        opt.config.lr = decayed(lr, step, steps);
        let l = batch_step(model, &mut opt, data, cfg.batch, rng, &mut loss)
            .map_err(|e| diverged(stage, e))?;
        if !l.is_finite() {
            return Err(Error::Diverged {
                stage: stage.into(),
                detail: format!("loss {l} at step {step}"),
            });
        }
        log.push(l);
    }
    Ok(log)
}

/// Flow-matching pre-training of the bidirectional teacher.
pub fn train_teacher(cfg: &HarnessConfig, data: &Dataset) -> Result<(Backbone, Vec<f64>)> {
    let mut rng = Rng::new(cfg.seed).fork(1);
    let mut teacher = Backbone::new(cfg.backbone(), &mut rng)?;
    let log = train_loop(
        "teacher",
        &mut teacher,
        cfg.teacher_lr,
        cfg.teacher_steps,
        cfg,
        data,
        &mut rng,
        |m, s, rng| {
            let t = rng.uniform().max(1e-3);
            let plan =
                NoisePlan::sample(vec![t; s.latents.frames()], cfg.tokens, cfg.channels, rng);
            cfm_loss(m, &s.latents, &s.conditions, &plan)
        },
    )?;
    Ok((teacher, log))
}

/// Teacher-forcing stage; the student starts from the teacher's weights.
pub fn distill_tf(
    cfg: &HarnessConfig,
    teacher: &Backbone,
    data: &Dataset,
) -> Result<(Backbone, Vec<f64>)> {
    let mut rng = Rng::new(cfg.seed).fork(2);
    let mut student = teacher.clone();
    let log = train_loop(
        "teacher-forcing",
        &mut student,
        cfg.tf_lr,
        cfg.tf_steps,
        cfg,
        data,
        &mut rng,
        |m, s, rng| {
            let sample = TfSample::draw(s.latents.clone(), s.conditions.clone(), cfg.chunk, rng)?;
            teacher_forcing_step(m, &sample)
        },
    )?;
    Ok((student, log))
}

pub fn dmd_config(cfg: &HarnessConfig) -> DmdConfig {
    let base = DmdConfig::default();
    DmdConfig {
        frames: cfg.clip_frames,
        tau: (cfg.tau > 0.0).then_some(cfg.tau),
        reward: RewardAdapter {
            radius: cfg.reward_radius,
            target: RewardTarget::Latent,
        },
        ratio: cfg.ratio,
        generator_adam: AdamConfig {
            lr: cfg.dmd_lr,
            ..base.generator_adam
        },
        fake_adam: AdamConfig {
            lr: cfg.fake_lr,
            ..base.fake_adam
        },
        schedule: cfg.schedule.clone(),
        max_slots: cfg.max_slots,
        normalize: false,
    }
}

/// Reweighted DMD with self-forcing rollouts, starting from the student.
pub fn distill_dmd(
    cfg: &HarnessConfig,
    teacher: &Backbone,
    student: &Backbone,
    data: &Dataset,
) -> Result<(Backbone, Vec<DmdReport>)> {
    let mut rng = Rng::new(cfg.seed).fork(3);
    let mut state = DmdState::new(
        teacher.clone(),
        data.codec.clone(),
        dmd_config(cfg),
        cfg.seed ^ 0xD3D,
    )?
    .with_generator(student.clone())?;
    let mut log = Vec::with_capacity(cfg.dmd_steps);
    for _ in 0..cfg.dmd_steps {
        let s = &data.train[rng.below(data.train.len())];
        log.push(dmd_step(&mut state, &s.conditions).map_err(|e| diverged("dmd", e))?);
    }
    if cfg.dmd_steps > 0 && state.gen_steps == 0 {
        return Err(Error::Diverged {
            stage: "dmd".into(),
            detail: format!("all {} generator steps skipped", state.skipped),
        });
    }
    Ok((state.generator, log))
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub config: HarnessConfig,
    pub data: Dataset,
    pub teacher: Backbone,
    pub student: Backbone,
    pub generator: Backbone,
    pub teacher_log: Vec<f64>,
    pub tf_log: Vec<f64>,
    pub dmd_log: Vec<DmdReport>,
}

impl Trained {
    /// Mean of the last tenth of the teacher losses over the mean of the first tenth.
    pub fn teacher_loss_ratio(&self) -> f64 {
        let n = (self.teacher_log.len() / 10).max(1);
        let head: f64 = self.teacher_log[..n].iter().sum::<f64>() / n as f64;
        let tail: f64 = self.teacher_log[self.teacher_log.len() - n..]
            .iter()
            .sum::<f64>()
            / n as f64;
        tail / head
    }
}

/// All three training stages on a freshly generated dataset.
pub fn train_all(cfg: &HarnessConfig) -> Result<Trained> {
    cfg.validate()?;
    let data = generate_dataset(cfg.samples, cfg.seed, cfg)?;
    let (teacher, teacher_log) = train_teacher(cfg, &data)?;
    let (student, tf_log) = distill_tf(cfg, &teacher, &data)?;
    let (generator, dmd_log) = distill_dmd(cfg, &teacher, &student, &data)?;
    Ok(Trained {
        config: cfg.clone(),
        data,
        teacher,
        student,
        generator,
        teacher_log,
        tf_log,
        dmd_log,
    })
}

pub fn save_backbone(model: &Backbone, prefix: &str, path: &Path) -> Result<()> {
    write_checkpoint(
        BufWriter::new(File::create(path)?),
        &model.to_checkpoint(prefix),
    )
}

pub fn load_backbone(path: &Path, prefix: &str) -> Result<Backbone> {
    let ck = crate::tensor::read_checkpoint(std::io::BufReader::new(File::open(path)?))?;
    Backbone::from_checkpoint(&ck, prefix)
}

pub fn write_loss_csv<W: Write>(stage: &str, losses: &[f64], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["stage", "step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        out.write_record([stage.to_string(), i.to_string(), format!("{l:.12e}")])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_dmd_csv<W: Write>(log: &[DmdReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "step",
        "t",
        "generator_surrogate",
        "fake_score_loss",
        "max_frame_weight",
        "reward_mean",
        "skipped",
    ])?;
    for (i, r) in log.iter().enumerate() {
        let wmax = r.weights.iter().copied().fold(0.0, f64::max);
        let rmean = r.rewards.iter().sum::<f64>() / r.rewards.len() as f64;
        out.write_record([
            i.to_string(),
            r.t.to_string(),
            format!("{:.12e}", r.cotangent_norm),
            format!("{:.12e}", r.fake_loss),
            format!("{wmax:.12e}"),
            format!("{rmean:.12e}"),
            r.skipped.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes checkpoints, the codec and the training logs under `dir`.
pub fn write_artifacts(t: &Trained, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), t.config.to_text())?;
    t.data.codec.save(&dir.join("codec.ck"))?;
    save_backbone(&t.teacher, "teacher", &dir.join("teacher.ck"))?;
    save_backbone(&t.student, "student", &dir.join("student.ck"))?;
    save_backbone(&t.generator, "generator", &dir.join("generator.ck"))?;
    write_loss_csv(
        "teacher",
        &t.teacher_log,
        File::create(dir.join("teacher_loss.csv"))?,
    )?;
    write_loss_csv(
        "teacher-forcing",
        &t.tf_log,
        File::create(dir.join("tf_loss.csv"))?,
    )?;
    write_dmd_csv(&t.dmd_log, File::create(dir.join("dmd_log.csv"))?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> HarnessConfig {
        HarnessConfig {
            samples: 5,
            clip_frames: 6,
            head_dim: 8,
            layers: 1,
            batch: 1,
            teacher_steps: 3,
            tf_steps: 3,
            dmd_steps: 2,
            ratio: 1,
            ..Default::default()
        }
    }

    #[test]
    fn rerun_gives_identical_checkpoints() {
        let a = train_all(&tiny()).unwrap();
        let b = train_all(&tiny()).unwrap();
        assert_eq!(a.generator, b.generator);
        assert_eq!(a.teacher_log, b.teacher_log);
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_artifacts(&a, da.path()).unwrap();
        write_artifacts(&b, db.path()).unwrap();
        for f in ["generator.ck", "teacher.ck", "dmd_log.csv", "config.txt"] {
            assert_eq!(
                std::fs::read(da.path().join(f)).unwrap(),
                std::fs::read(db.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let g = load_backbone(&da.path().join("generator.ck"), "generator").unwrap();
        assert_eq!(g, a.generator);
    }

    #[test]
    fn divergence_is_tagged_with_the_stage() {
        let cfg = HarnessConfig {
            teacher_lr: f64::NAN,
            ..tiny()
        };
        let data = generate_dataset(cfg.samples, cfg.seed, &cfg).unwrap();
        match train_teacher(&cfg, &data) {
            Err(Error::Diverged { stage, .. }) => assert_eq!(stage, "teacher"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
