//! Chunk-wise streaming generation with garment-switch events.

use crate::backbone::{Backbone, ConditionSet, KvContext, LayerKv, UnifiedSequence};
use crate::codec::{Codec, LatentSequence};
use crate::error::{invalid, Error, Result};
use crate::flow::{fewstep_denoise, FewStepTrace, StepSchedule};
use crate::kvcache::{order_events, CacheEvent, EventKind, KvCache, TraceRow};
use crate::masking::AttentionMask;
use crate::tensor::{Rng, Tensor};

/// `chunk` frames starting at segment position `first_pos`, all at timestep `t`.
pub fn chunk_sequence(
    data: &Tensor,
    first_pos: usize,
    tokens: usize,
    t: f64,
) -> Result<UnifiedSequence> {
    let frames = data.rows() / tokens;
    let mut seq = UnifiedSequence::new();
    for j in 0..frames {
        seq.push_frame(first_pos + j, data.slice_rows(j * tokens, tokens)?, t)?;
    }
    Ok(seq)
}

/// Few-step denoising of one chunk against a fixed context.
///
/// Returns the clean estimate, the per-step trace and the head-averaged
/// attention of the final step.
pub fn denoise_chunk(
    generator: &Backbone,
    context: &KvContext,
    first_pos: usize,
    schedule: &StepSchedule,
    noise: Tensor,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<FewStepTrace>, Vec<Tensor>)> {
    let cfg = generator.config();
    let n = noise.rows();
    let mask = AttentionMask::full(n, context[0].len() + n);
    let mut attention = Vec::new();
    let (x0, trace) = fewstep_denoise(schedule, noise, rng, |z, t| {
        let out = generator.forward_incremental(
            &chunk_sequence(z, first_pos, cfg.tokens, t)?,
            context,
            &mask,
        )?;
        attention = out.attention;
        Ok(out.pred)
    })?;
    Ok((x0, trace, attention))
}

/// K/V of a clean chunk, split per frame, for appending to the cache.
pub fn clean_chunk_kv(
    generator: &Backbone,
    context: &KvContext,
    first_pos: usize,
    data: &Tensor,
) -> Result<Vec<Vec<LayerKv>>> {
    let p = generator.config().tokens;
    let n = data.rows();
    let mask = AttentionMask::full(n, context[0].len() + n);
    let out =
        generator.forward_incremental(&chunk_sequence(data, first_pos, p, 0.0)?, context, &mask)?;
    (0..n / p)
        .map(|j| out.kv.iter().map(|l| l.rows(j * p..(j + 1) * p)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    /// Cache size `M` in frame slots, condition slots included.
    pub max_slots: usize,
    pub schedule: StepSchedule,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            max_slots: 23,
            schedule: StepSchedule::few_step(),
        }
    }
}

/// A garment switch requested for a future chunk boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchCommand {
    pub target_chunk: usize,
    pub garment: Tensor,
    pub withdraw: bool,
    pub disentangle: bool,
}

impl SwitchCommand {
    /// Full rescheduling: refresh, withdraw and disentangle.
    pub fn full(target_chunk: usize, garment: Tensor) -> Self {
        Self {
            target_chunk,
            garment,
            withdraw: true,
            disentangle: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Session {
    generator: Backbone,
    codec: Codec,
    config: SessionConfig,
    cache: KvCache,
    chunk: usize,
    events: Vec<CacheEvent>,
    rng: Rng,
    /// Generated chunks, each `chunk·P × C`.
    output: Vec<Tensor>,
    trace: Vec<TraceRow>,
    failed: Option<String>,
}

impl Session {
    pub fn start(
        generator: Backbone,
        codec: Codec,
        config: SessionConfig,
        conditions: ConditionSet,
        seed: u64,
    ) -> Result<Self> {
        let cfg = *generator.config();
        if codec.tokens() != cfg.tokens || codec.channels() != cfg.channels {
            return Err(crate::error::shape_err(
                "codec and generator disagree on latent frame shape",
            ));
        }
        let cache = KvCache::new(config.max_slots, &generator, conditions)?;
        Ok(Self {
            generator,
            codec,
            config,
            cache,
            chunk: 0,
            events: Vec::new(),
            rng: Rng::new(seed),
            output: Vec::new(),
            trace: Vec::new(),
            failed: None,
        })
    }

    pub fn chunk_counter(&self) -> usize {
        self.chunk
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn failure(&self) -> Option<&str> {
        self.failed.as_deref()
    }

    pub fn pending_events(&self) -> &[CacheEvent] {
        &self.events
    }

    /// Queues the events of `cmd` for its target chunk.
    pub fn enqueue_switch(&mut self, cmd: SwitchCommand) -> Result<()> {
        if cmd.target_chunk < self.chunk || cmd.target_chunk == 0 {
            return Err(invalid(format!(
                "switch at chunk {} is not after the current chunk {}",
                cmd.target_chunk, self.chunk
            )));
        }
        let at = cmd.target_chunk;
        self.events.push(CacheEvent {
            chunk: at,
            kind: EventKind::GarmentRefresh(cmd.garment),
        });
        if cmd.withdraw {
            self.events.push(CacheEvent {
                chunk: at,
                kind: EventKind::HistoricalWithdraw,
            });
        }
        if cmd.disentangle {
            self.events.push(CacheEvent {
                chunk: at,
                kind: EventKind::ReferenceDisentangle,
            });
        }
        order_events(&mut self.events);
        Ok(())
    }

    /// Generates the next chunk, applying due events first.
    pub fn step(&mut self) -> Result<Tensor> {
        if let Some(why) = &self.failed {
            return Err(Error::SessionFailed(why.clone()));
        }
        match self.step_inner() {
            Ok(chunk) => Ok(chunk),
            Err(e) => {
                let why = format!("chunk {}: {e}", self.chunk);
                self.failed = Some(why.clone());
                Err(Error::SessionFailed(why))
            }
        }
    }

    fn step_inner(&mut self) -> Result<Tensor> {
        let cfg = *self.generator.config();
        let due: Vec<CacheEvent> = self
            .events
            .iter()
            .filter(|e| e.chunk == self.chunk)
            .cloned()
            .collect();
        self.events.retain(|e| e.chunk != self.chunk);
        let mut labels = Vec::new();
        for event in due {
            labels.push(event.kind.label());
            match event.kind {
                EventKind::GarmentRefresh(g) => self.cache.garment_refresh(g, &self.generator)?,
                EventKind::HistoricalWithdraw => self.cache.historical_withdraw(),
                EventKind::ReferenceDisentangle => {
                    let last = self
                        .output
                        .last()
                        .ok_or_else(|| Error::Cache("no generated frame yet".into()))?;
                    let w = cfg.tokens * cfg.channels;
                    let flat = &last.data()[last.len() - w..];
                    let index = self.cache.next_frame() - 1;
                    self.cache
                        .reference_disentangle(flat, index, &self.codec, &self.generator)?;
                }
            }
        }

        let context = self.cache.context()?;
        let first_pos = self.cache.next_position();
        let noise = Tensor::randn(&[cfg.chunk * cfg.tokens, cfg.channels], 1.0, &mut self.rng);
        let (x0, _, attention) = denoise_chunk(
            &self.generator,
            &context,
            first_pos,
            &self.config.schedule,
            noise,
            &mut self.rng,
        )?;
        x0.ensure_finite("generated chunk")?;
        self.cache.record_attention(attention);
        let mass = self.cache.attention_mass().ok();

        let kv = clean_chunk_kv(&self.generator, &context, first_pos, &x0)?;
        let first = self.cache.next_frame();
        self.cache.append_and_evict(
            kv.into_iter()
                .enumerate()
                .map(|(j, k)| (first + j, k))
                .collect(),
        )?;
        self.trace.push(TraceRow {
            chunk: self.chunk,
            retained: self.cache.retained_frames(),
            events: labels,
            mass,
        });
        self.output.push(x0.clone());
        self.chunk += 1;
        Ok(x0)
    }

    /// All generated latent frames so far.
    pub fn latents(&self) -> Result<LatentSequence> {
        let p = self.generator.config().tokens;
        if self.output.is_empty() {
            return Ok(LatentSequence::zeros(
                0,
                p,
                self.generator.config().channels,
            ));
        }
        let refs: Vec<&Tensor> = self.output.iter().collect();
        LatentSequence::clean(Tensor::concat_rows(&refs)?, p)
    }

    /// Decoded pixel stream of everything generated so far.
    pub fn pixels(&self) -> Result<crate::codec::PixelVideo> {
        self.codec.decode(&self.latents()?)
    }
}

/// One line of an event script: `chunk_index garment_id [--no-withdraw] [--no-disentangle]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptLine {
    pub chunk: usize,
    pub garment: usize,
    pub withdraw: bool,
    pub disentangle: bool,
}

/// Parses an event script; blank lines and `#` comments are ignored.
pub fn parse_event_script(text: &str) -> Result<Vec<ScriptLine>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(
            parse_script_line(line)
                .map_err(|e| Error::Config(format!("event script line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

pub fn parse_script_line(line: &str) -> std::result::Result<ScriptLine, String> {
    let mut parts = line.split_whitespace();
    let chunk = parts
        .next()
        .ok_or("missing chunk index")?
        .parse()
        .map_err(|e| format!("chunk index: {e}"))?;
    let garment = parts
        .next()
        .ok_or("missing garment id")?
        .parse()
        .map_err(|e| format!("garment id: {e}"))?;
    let mut s = ScriptLine {
        chunk,
        garment,
        withdraw: true,
        disentangle: true,
    };
    for flag in parts {
        match flag {
            "--no-withdraw" => s.withdraw = false,
            "--no-disentangle" => s.disentangle = false,
            other => return Err(format!("unknown flag `{other}`")),
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::oracle::retained_frames;

    fn session(seed: u64, max_slots: usize) -> Session {
        let mut rng = Rng::new(1);
        let cfg = BackboneConfig {
            tokens: 2,
            channels: 4,
            ..Default::default()
        };
        let b = Backbone::new(cfg, &mut rng).unwrap();
        let codec = Codec::new(16, 2, 4, 2).unwrap();
        let cond = ConditionSet::new(
            Tensor::randn(&[2, 4], 1.0, &mut rng),
            Tensor::randn(&[2, 4], 1.0, &mut rng),
        )
        .unwrap();
        Session::start(
            b,
            codec,
            SessionConfig {
                max_slots,
                ..Default::default()
            },
            cond,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = session(5, 23);
        let mut b = session(5, 23);
        for _ in 0..4 {
            assert_eq!(a.step().unwrap(), b.step().unwrap());
        }
        let mut c = session(6, 23);
        assert_ne!(c.step().unwrap(), session(5, 23).step().unwrap());
    }

    #[test]
    fn cache_follows_retention_formula() {
        let mut s = session(2, 11);
        for k in 0..30 {
            s.step().unwrap();
            assert_eq!(s.chunk_counter(), k + 1);
            let expect: Vec<usize> = retained_frames(3 * k + 2, 11).into_iter().collect();
            assert_eq!(s.cache().retained_frames(), expect);
        }
    }

    #[test]
    fn switch_validation_and_event_expansion() {
        let mut s = session(2, 23);
        assert!(s
            .enqueue_switch(SwitchCommand::full(0, Tensor::zeros(&[2, 4])))
            .is_err());
        s.step().unwrap();
        s.step().unwrap();
        assert!(s
            .enqueue_switch(SwitchCommand::full(1, Tensor::zeros(&[2, 4])))
            .is_err());
        s.enqueue_switch(SwitchCommand {
            withdraw: false,
            ..SwitchCommand::full(3, Tensor::zeros(&[2, 4]))
        })
        .unwrap();
        let labels: Vec<&str> = s.pending_events().iter().map(|e| e.kind.label()).collect();
        assert_eq!(labels, vec!["refresh", "disentangle"]);
    }

    #[test]
    fn full_switch_restarts_history() {
        let mut s = session(3, 23);
        for _ in 0..3 {
            s.step().unwrap();
        }
        let g = Tensor::filled(&[2, 4], 0.5);
        s.enqueue_switch(SwitchCommand::full(3, g.clone())).unwrap();
        s.step().unwrap();
        assert_eq!(s.cache().retained_frames(), vec![9, 10, 11]);
        assert_eq!(s.cache().conditions().garment, g);
        assert_eq!(
            s.trace()[3].events,
            vec!["refresh", "withdraw", "disentangle"]
        );
        assert_eq!(s.latents().unwrap().frames(), 12);
        assert_eq!(s.pixels().unwrap().frame_count(), 1 + 4 * 11);
    }

    #[test]
    fn script_parsing() {
        let lines =
            parse_event_script("# switch twice\n4 2\n\n9 0 --no-withdraw --no-disentangle\n")
                .unwrap();
        assert_eq!(
            lines[0],
            ScriptLine {
                chunk: 4,
                garment: 2,
                withdraw: true,
                disentangle: true
            }
        );
        assert_eq!(
            lines[1],
            ScriptLine {
                chunk: 9,
                garment: 0,
                withdraw: false,
                disentangle: false
            }
        );
        assert!(parse_event_script("4 x").is_err());
        assert!(parse_event_script("4 1 --loud").is_err());
    }
}
