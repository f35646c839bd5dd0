//! Flat `key = value` run configuration.

use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::flow::StepSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub seed: u64,

    pub pixel_dim: usize,
    pub tokens: usize,
    pub channels: usize,
    pub garment_channels: usize,
    pub codebook: usize,
    /// Latent frames per training clip.
    pub clip_frames: usize,
    pub samples: usize,
    /// Amplitude of the shared illumination drift on garment channels.
    pub lighting: f64,
    /// Standard deviation of the per-sample garment fit offset.
    pub fit: f64,

    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub chunk: usize,

    pub batch: usize,
    pub teacher_steps: usize,
    pub teacher_lr: f64,
    pub tf_steps: usize,
    pub tf_lr: f64,
    pub dmd_steps: usize,
    pub dmd_lr: f64,
    pub fake_lr: f64,
    pub ratio: usize,
    /// `0` selects vanilla uniform weighting.
    pub tau: f64,
    pub reward_radius: f64,

    pub max_slots: usize,
    pub schedule: StepSchedule,
    pub sample_steps: usize,

    pub switch_chunk: usize,
    pub rollout_chunks: usize,
    pub continuity_factor: f64,
    pub teacher_loss_drop: f64,
}

impl Default for HarnessConfig {
    /// The smoke configuration.
    fn default() -> Self {
        Self {
            seed: 7,
            pixel_dim: 64,
            tokens: 4,
            channels: 16,
            garment_channels: 4,
            codebook: 4,
            clip_frames: 12,
            samples: 1000,
            lighting: 0.3,
            fit: 0.8,
            layers: 2,
            heads: 2,
            head_dim: 16,
            chunk: 3,
            batch: 4,
            teacher_steps: 2000,
            teacher_lr: 3e-3,
            tf_steps: 1500,
            tf_lr: 2e-3,
            dmd_steps: 20,
            dmd_lr: 1e-5,
            fake_lr: 1e-4,
            ratio: 5,
            tau: 0.2,
            reward_radius: 1.0,
            max_slots: 23,
            schedule: StepSchedule::few_step(),
            sample_steps: 20,
            switch_chunk: 3,
            rollout_chunks: 5,
            continuity_factor: 3.0,
            teacher_loss_drop: 0.5,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

impl HarnessConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            layers: self.layers,
            heads: self.heads,
            head_dim: self.head_dim,
            tokens: self.tokens,
            channels: self.channels,
            chunk: self.chunk,
            mlp_ratio: 4,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "pixel_dim" => self.pixel_dim = parse(key, value)?,
            "tokens" => self.tokens = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "garment_channels" => self.garment_channels = parse(key, value)?,
            "codebook" => self.codebook = parse(key, value)?,
            "clip_frames" => self.clip_frames = parse(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            "lighting" => self.lighting = parse(key, value)?,
            "fit" => self.fit = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "head_dim" => self.head_dim = parse(key, value)?,
            "chunk" => self.chunk = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "teacher_steps" => self.teacher_steps = parse(key, value)?,
            "teacher_lr" => self.teacher_lr = parse(key, value)?,
            "tf_steps" => self.tf_steps = parse(key, value)?,
            "tf_lr" => self.tf_lr = parse(key, value)?,
            "dmd_steps" => self.dmd_steps = parse(key, value)?,
            "dmd_lr" => self.dmd_lr = parse(key, value)?,
            "fake_lr" => self.fake_lr = parse(key, value)?,
            "ratio" => self.ratio = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "reward_radius" => self.reward_radius = parse(key, value)?,
            "max_slots" => self.max_slots = parse(key, value)?,
            "schedule" => self.schedule = StepSchedule::parse(value)?,
            "sample_steps" => self.sample_steps = parse(key, value)?,
            "switch_chunk" => self.switch_chunk = parse(key, value)?,
            "rollout_chunks" => self.rollout_chunks = parse(key, value)?,
            "continuity_factor" => self.continuity_factor = parse(key, value)?,
            "teacher_loss_drop" => self.teacher_loss_drop = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Defaults overridden by the `key = value` lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.into()))
            }
        };
        check(
            self.clip_frames.is_multiple_of(self.chunk),
            "clip_frames must be a multiple of chunk",
        )?;
        check(self.codebook >= 2, "codebook needs at least two entries")?;
        check(self.samples >= 1, "samples must be at least 1")?;
        check(self.batch >= 1, "batch must be at least 1")?;
        check(
            self.garment_channels > 0 && self.garment_channels < self.channels,
            "garment_channels must be a proper subset of channels",
        )?;
        check(
            self.pixel_dim >= self.tokens * self.channels,
            "pixel_dim must be at least tokens × channels",
        )?;
        check(self.tau >= 0.0, "tau must be non-negative")?;
        check(self.ratio >= 1, "ratio must be at least 1")?;
        check(
            self.max_slots >= 2 + self.chunk,
            "max_slots must hold the conditions and a chunk",
        )?;
        check(
            self.switch_chunk >= 1 && self.switch_chunk < self.rollout_chunks,
            "switch_chunk must fall inside the rollout",
        )?;
        check(
            self.continuity_factor > 0.0,
            "continuity_factor must be positive",
        )?;
        Ok(())
    }

    /// Serialized as `key = value` lines that [`HarnessConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let steps: Vec<String> = self
            .schedule
            .steps()
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("pixel_dim", self.pixel_dim.to_string());
        kv("tokens", self.tokens.to_string());
        kv("channels", self.channels.to_string());
        kv("garment_channels", self.garment_channels.to_string());
        kv("codebook", self.codebook.to_string());
        kv("clip_frames", self.clip_frames.to_string());
        kv("samples", self.samples.to_string());
        kv("lighting", self.lighting.to_string());
        kv("fit", self.fit.to_string());
        kv("layers", self.layers.to_string());
        kv("heads", self.heads.to_string());
        kv("head_dim", self.head_dim.to_string());
        kv("chunk", self.chunk.to_string());
        kv("batch", self.batch.to_string());
        kv("teacher_steps", self.teacher_steps.to_string());
        kv("teacher_lr", self.teacher_lr.to_string());
        kv("tf_steps", self.tf_steps.to_string());
        kv("tf_lr", self.tf_lr.to_string());
        kv("dmd_steps", self.dmd_steps.to_string());
        kv("dmd_lr", self.dmd_lr.to_string());
        kv("fake_lr", self.fake_lr.to_string());
        kv("ratio", self.ratio.to_string());
        kv("tau", self.tau.to_string());
        kv("reward_radius", self.reward_radius.to_string());
        kv("max_slots", self.max_slots.to_string());
        kv("schedule", steps.join(","));
        kv("sample_steps", self.sample_steps.to_string());
        kv("switch_chunk", self.switch_chunk.to_string());
        kv("rollout_chunks", self.rollout_chunks.to_string());
        kv("continuity_factor", self.continuity_factor.to_string());
        kv("teacher_loss_drop", self.teacher_loss_drop.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = HarnessConfig {
            seed: 99,
            tau: 0.0,
            schedule: StepSchedule::new(vec![1000, 500]).unwrap(),
            ..Default::default()
        };
        assert_eq!(HarnessConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn overrides_comments_and_errors() {
        let cfg = HarnessConfig::parse("# smoke\nseed = 3\n\nmax_slots=11 # small\n").unwrap();
        assert_eq!((cfg.seed, cfg.max_slots), (3, 11));
        for bad in [
            "seed",
            "seed = x",
            "colour = red",
            "clip_frames = 10",
            "max_slots = 2",
        ] {
            assert!(
                matches!(HarnessConfig::parse(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }
}
