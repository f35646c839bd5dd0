//! Synthetic try-on clips with a linear garment/motion channel split.
//!
//! Every latent frame holds motion values (a per-value sum of two seeded
//! sinusoids) in the motion channels. The garment channels hold the garment
//! code, a per-sample fit offset that the flat garment image does not show,
//! and a shared illumination drift. The reference image is frame 0 wearing a
//! different codebook entry with its own fit; the garment image renders the
//! bare code.

use std::f64::consts::TAU;

use crate::backbone::ConditionSet;
use crate::codec::{ChannelLayout, Codec, LatentSequence, PixelVideo};
use crate::error::{invalid, Result};
use crate::tensor::{Rng, Tensor};

use super::HarnessConfig;

/// Per-value motion path `Σ_k A_k sin(ω_k i + φ_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionPath {
    /// `(A, ω, φ)` terms, two per motion value.
    pub terms: Vec<[(f64, f64, f64); 2]>,
}

impl MotionPath {
    fn sample(values: usize, rng: &mut Rng) -> Self {
        let terms = (0..values)
            .map(|_| {
                [0, 1].map(|_| {
                    let a = 0.2 + 0.4 * rng.uniform();
                    let w = 0.1 + 0.25 * rng.uniform();
                    (a, w, TAU * rng.uniform())
                })
            })
            .collect();
        Self { terms }
    }

    pub fn at(&self, i: f64) -> Vec<f64> {
        self.terms
            .iter()
            .map(|t| t.iter().map(|(a, w, p)| a * (w * i + p).sin()).sum())
            .collect()
    }

    /// Largest possible per-frame change of any value, `Σ A·ω`.
    pub fn step_budget(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| t.iter().map(|(a, w, _)| a * w).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub garment_id: usize,
    pub worn_id: usize,
    pub motion: MotionPath,
    /// How the garment sits on this subject; added to the code in every frame.
    pub fit: Vec<f64>,
    /// Illumination offset of garment channels at frame `i`: `L sin(ω i + φ)`.
    pub lighting: (f64, f64, f64),
    pub video: PixelVideo,
    pub latents: LatentSequence,
    pub reference_image: Vec<f64>,
    pub garment_image: Vec<f64>,
    pub conditions: ConditionSet,
}

impl SyntheticSample {
    pub fn lighting_at(&self, i: f64) -> f64 {
        let (a, w, p) = self.lighting;
        a * (w * i + p).sin()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub codec: Codec,
    pub layout: ChannelLayout,
    /// Garment codes, each `P × G` values token-major.
    pub codebook: Vec<Vec<f64>>,
    pub train: Vec<SyntheticSample>,
    pub eval: Vec<SyntheticSample>,
}

impl Dataset {
    /// Latent of a garment image: code in the garment channels, zero motion.
    pub fn garment_latent(&self, id: usize) -> Result<Tensor> {
        let code = self
            .codebook
            .get(id)
            .ok_or_else(|| invalid(format!("no garment {id}")))?;
        let mut frame = vec![0.0; self.layout.frame_width()];
        self.layout.fill(&mut frame, code, true);
        let image = self.codec.decode_image(&frame)?;
        Ok(self.codec.encode_image(&image)?.into_data())
    }

    pub fn samples(&self) -> impl Iterator<Item = &SyntheticSample> {
        self.train.iter().chain(&self.eval)
    }
}

/// One row per sample: index, split, target and worn garment ids.
pub fn write_samples_csv<W: std::io::Write>(data: &Dataset, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["sample", "split", "garment_id", "worn_id", "frames"])?;
    let rows = data
        .train
        .iter()
        .map(|s| ("train", s))
        .chain(data.eval.iter().map(|s| ("eval", s)));
    for (i, (split, s)) in rows.enumerate() {
        out.write_record([
            i.to_string(),
            split.to_string(),
            s.garment_id.to_string(),
            s.worn_id.to_string(),
            s.latents.frames().to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

fn frame_latent(layout: &ChannelLayout, motion: &[f64], garment: &[f64], light: f64) -> Vec<f64> {
    let mut frame = vec![0.0; layout.frame_width()];
    layout.fill(&mut frame, motion, false);
    let g: Vec<f64> = garment.iter().map(|v| v + light).collect();
    layout.fill(&mut frame, &g, true);
    frame
}

/// `n` samples; every fifth sample goes to the evaluation split.
pub fn generate_dataset(n: usize, seed: u64, cfg: &HarnessConfig) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("dataset needs at least one sample"));
    }
    let layout = ChannelLayout::new(cfg.tokens, cfg.channels, cfg.garment_channels)?;
    let codec = Codec::new(cfg.pixel_dim, cfg.tokens, cfg.channels, seed ^ 0xC0DEC)?;
    let root = Rng::new(seed);
    let mut book_rng = root.fork(u64::MAX);
    let codebook: Vec<Vec<f64>> = (0..cfg.codebook)
        .map(|_| book_rng.normals(layout.garment_width()))
        .collect();

    let mut train = Vec::new();
    let mut eval = Vec::new();
    for s in 0..n {
        let mut rng = root.fork(s as u64);
        let garment_id = rng.below(cfg.codebook);
        let worn_id = (garment_id + 1 + rng.below(cfg.codebook - 1)) % cfg.codebook;
        let motion = MotionPath::sample(layout.motion_width(), &mut rng);
        let fit: Vec<f64> = rng
            .normals(layout.garment_width())
            .iter()
            .map(|v| v * cfg.fit)
            .collect();
        let worn_fit: Vec<f64> = rng
            .normals(layout.garment_width())
            .iter()
            .map(|v| v * cfg.fit)
            .collect();
        let worn_code: Vec<f64> = codebook[worn_id]
            .iter()
            .zip(&worn_fit)
            .map(|(a, b)| a + b)
            .collect();
        let code: Vec<f64> = codebook[garment_id]
            .iter()
            .zip(&fit)
            .map(|(a, b)| a + b)
            .collect();
        let lighting = (cfg.lighting, 0.1 + 0.2 * rng.uniform(), TAU * rng.uniform());
        let light = |i: f64| lighting.0 * (lighting.1 * i + lighting.2).sin();

        let f = cfg.clip_frames;
        let mut z = Vec::with_capacity(f * layout.frame_width());
        for i in 0..f {
            z.extend(frame_latent(
                &layout,
                &motion.at(i as f64),
                &code,
                light(i as f64),
            ));
        }
        let z =
            LatentSequence::clean(Tensor::matrix(f * cfg.tokens, cfg.channels, z)?, cfg.tokens)?;
        let video = codec.decode(&z)?;
        let latents = codec.encode(&video)?;

        let worn = frame_latent(&layout, &motion.at(0.0), &worn_code, light(0.0));
        let reference_image = codec.decode_image(&worn)?;
        let mut g = vec![0.0; layout.frame_width()];
        layout.fill(&mut g, &codebook[garment_id], true);
        let garment_image = codec.decode_image(&g)?;
        let conditions = ConditionSet::new(
            codec.encode_image(&reference_image)?.into_data(),
            codec.encode_image(&garment_image)?.into_data(),
        )?;

        let sample = SyntheticSample {
            garment_id,
            worn_id,
            motion,
            fit,
            lighting,
            video,
            latents,
            reference_image,
            garment_image,
            conditions,
        };
        if s % 5 == 4 {
            eval.push(sample);
        } else {
            train.push(sample);
        }
    }
    if train.is_empty() {
        train = eval.clone();
    }
    Ok(Dataset {
        codec,
        layout,
        codebook,
        train,
        eval,
    })
}
