//! Streaming rollouts with scripted garment switches and their readouts.

use crate::backbone::{Backbone, ConditionSet};
use crate::codec::LatentSequence;
use crate::error::{invalid, Result};
use crate::session::{ScriptLine, Session, SessionConfig, SwitchCommand};

use super::data::Dataset;
use super::metrics::{switch_metrics, SwitchMetrics};
use super::HarnessConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchMode {
    RefreshOnly,
    NoDisentangle,
    Full,
}

impl SwitchMode {
    pub fn flags(self) -> (bool, bool) {
        match self {
            Self::RefreshOnly => (false, false),
            Self::NoDisentangle => (true, false),
            Self::Full => (true, true),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::RefreshOnly => "refresh-only",
            Self::NoDisentangle => "no-disentangle",
            Self::Full => "full",
        }
    }
}

pub fn session_config(cfg: &HarnessConfig) -> SessionConfig {
    SessionConfig {
        max_slots: cfg.max_slots,
        schedule: cfg.schedule.clone(),
    }
}

/// Runs `chunks` chunks, applying `script` with garment ids resolved
/// through the dataset codebook. Returns the finished session.
pub fn run_script(
    generator: &Backbone,
    data: &Dataset,
    cfg: &HarnessConfig,
    conditions: ConditionSet,
    script: &[ScriptLine],
    chunks: usize,
    seed: u64,
) -> Result<Session> {
    let mut session = Session::start(
        generator.clone(),
        data.codec.clone(),
        session_config(cfg),
        conditions,
        seed,
    )?;
    for line in script {
        session.enqueue_switch(SwitchCommand {
            target_chunk: line.chunk,
            garment: data.garment_latent(line.garment)?,
            withdraw: line.withdraw,
            disentangle: line.disentangle,
        })?;
    }
    for _ in 0..chunks {
        session.step()?;
    }
    Ok(session)
}

/// Per-switch readouts of a finished stream; each switch is scored up to
/// the next one. `initial` is the garment id at the start of the stream.
pub fn evaluate_switch(
    data: &Dataset,
    latents: &LatentSequence,
    chunk: usize,
    initial: usize,
    script: &[ScriptLine],
) -> Result<Vec<SwitchMetrics>> {
    let mut out = Vec::new();
    let mut old = initial;
    for (k, line) in script.iter().enumerate() {
        let start = script.get(k.wrapping_sub(1)).map_or(0, |l| l.chunk * chunk);
        let boundary = line.chunk * chunk;
        let end = script
            .get(k + 1)
            .map_or(latents.frames(), |l| l.chunk * chunk);
        if boundary >= end.min(latents.frames()) || boundary == start {
            return Err(invalid(format!(
                "switch at chunk {} has no frames on both sides",
                line.chunk
            )));
        }
        let segment = latents.slice(start, end - start)?;
        out.push(switch_metrics(
            &data.layout,
            &segment,
            boundary - start,
            &data.codebook[old],
            &data.codebook[line.garment],
        ));
        old = line.garment;
    }
    Ok(out)
}

/// One scripted switch on an evaluation sample under `mode`.
pub fn switch_trial(
    generator: &Backbone,
    data: &Dataset,
    cfg: &HarnessConfig,
    sample: usize,
    new_garment: usize,
    mode: SwitchMode,
    seed: u64,
) -> Result<SwitchMetrics> {
    let s = data
        .eval
        .get(sample)
        .ok_or_else(|| invalid(format!("no eval sample {sample}")))?;
    let (withdraw, disentangle) = mode.flags();
    let script = [ScriptLine {
        chunk: cfg.switch_chunk,
        garment: new_garment,
        withdraw,
        disentangle,
    }];
    let session = run_script(
        generator,
        data,
        cfg,
        s.conditions.clone(),
        &script,
        cfg.rollout_chunks,
        seed,
    )?;
    Ok(evaluate_switch(data, &session.latents()?, cfg.chunk, s.garment_id, &script)?[0])
}

/// Averages of [`switch_trial`] over every evaluation sample, each switched
/// to the next codebook entry.
pub fn switch_study(
    generator: &Backbone,
    data: &Dataset,
    cfg: &HarnessConfig,
    mode: SwitchMode,
) -> Result<SwitchSummary> {
    let mut rows = Vec::new();
    for (i, s) in data.eval.iter().enumerate() {
        let new = (s.garment_id + 1) % data.codebook.len();
        rows.push(switch_trial(
            generator,
            data,
            cfg,
            i,
            new,
            mode,
            cfg.seed + i as u64,
        )?);
    }
    Ok(SwitchSummary::new(mode, rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchSummary {
    pub mode: SwitchMode,
    pub trials: Vec<SwitchMetrics>,
}

impl SwitchSummary {
    fn new(mode: SwitchMode, trials: Vec<SwitchMetrics>) -> Self {
        Self { mode, trials }
    }

    fn mean(&self, f: impl Fn(&SwitchMetrics) -> f64) -> f64 {
        self.trials.iter().map(f).sum::<f64>() / self.trials.len() as f64
    }

    pub fn post_vs_old(&self) -> f64 {
        self.mean(|m| m.post_vs_old)
    }

    pub fn post_vs_new(&self) -> f64 {
        self.mean(|m| m.post_vs_new)
    }

    pub fn pre_vs_old(&self) -> f64 {
        self.mean(|m| m.pre_vs_old)
    }

    /// Mean boundary delta over mean median intra-segment delta.
    pub fn continuity_ratio(&self) -> f64 {
        self.mean(|m| m.continuity.boundary) / self.mean(|m| m.continuity.median_intra)
    }
}

pub fn write_switch_csv<W: std::io::Write>(rows: &[SwitchSummary], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "mode",
        "trials",
        "pre_vs_old",
        "post_vs_old",
        "post_vs_new",
        "continuity_ratio",
    ])?;
    for r in rows {
        out.write_record([
            r.mode.label().to_string(),
            r.trials.len().to_string(),
            format!("{:.6}", r.pre_vs_old()),
            format!("{:.6}", r.post_vs_old()),
            format!("{:.6}", r.post_vs_new()),
            format!("{:.6}", r.continuity_ratio()),
        ])?;
    }
    out.flush()?;
    Ok(())
}
