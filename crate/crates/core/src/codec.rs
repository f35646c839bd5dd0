//! Fixed linear stand-in for a video VAE with 4:1 temporal compression.
//!
//! Pixel frame 0 is encoded alone; every later group of four pixel frames
//! maps to one latent frame, so `F` pixel frames give `(F − 1)/4 + 1`
//! latent frames.
//!
//! A latent frame is a `P × C` block stored token-major: the flat vector of
//! length `P·C` has token `p`, channel `c` at index `p·C + c`.
//!
//! Decoding a latent `z` renders `Q z` for a single image and
//! `Q (I + α_j W) z`, `j = 1..4`, for the four frames of a group, where `Q`
//! has orthonormal columns, `W` is a fixed seeded mixing matrix and the
//! `α_j` sum to zero. Encoding a group averages `Qᵀ p_j`, so
//! `encode(decode(z)) == z` up to rounding.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{Checkpoint, Rng, Tensor};

pub const GROUP: usize = 4;

/// Ordered latent frames (`f·P` rows × `C` columns) with a timestep per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    data: Tensor,
    tokens_per_frame: usize,
    timesteps: Vec<f64>,
}

impl LatentSequence {
    pub fn new(data: Tensor, tokens_per_frame: usize, timesteps: Vec<f64>) -> Result<Self> {
        if tokens_per_frame == 0 || !data.rows().is_multiple_of(tokens_per_frame) {
            return Err(shape_err(format!(
                "{} rows is not a whole number of {tokens_per_frame}-token frames",
                data.rows()
            )));
        }
        let frames = data.rows() / tokens_per_frame;
        if timesteps.len() != frames {
            return Err(shape_err(format!(
                "{} timesteps for {frames} frames",
                timesteps.len()
            )));
        }
        if let Some(t) = timesteps.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(invalid(format!("timestep {t} outside [0, 1]")));
        }
        Ok(Self {
            data,
            tokens_per_frame,
            timesteps,
        })
    }

    /// Clean (t = 0) sequence.
    pub fn clean(data: Tensor, tokens_per_frame: usize) -> Result<Self> {
        let frames = data.rows() / tokens_per_frame.max(1);
        Self::new(data, tokens_per_frame, vec![0.0; frames])
    }

    pub fn zeros(frames: usize, tokens_per_frame: usize, channels: usize) -> Self {
        Self {
            data: Tensor::zeros(&[frames * tokens_per_frame, channels]),
            tokens_per_frame,
            timesteps: vec![0.0; frames],
        }
    }

    pub fn frames(&self) -> usize {
        self.timesteps.len()
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }

    pub fn with_timesteps(mut self, timesteps: Vec<f64>) -> Result<Self> {
        if timesteps.len() != self.frames() {
            return Err(shape_err("timestep count"));
        }
        self.timesteps = timesteps;
        Ok(self)
    }

    /// Flat token-major vector of frame `i`.
    pub fn frame_vec(&self, i: usize) -> &[f64] {
        let w = self.tokens_per_frame * self.channels();
        &self.data.data()[i * w..(i + 1) * w]
    }

    /// Frame `i` as a `P × C` tensor.
    pub fn frame_block(&self, i: usize) -> Tensor {
        let p = self.tokens_per_frame;
        Tensor::matrix(p, self.channels(), self.frame_vec(i).to_vec()).expect("frame block shape")
    }

    pub fn frame(&self, i: usize) -> Result<LatentSequence> {
        self.slice(i, 1)
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<LatentSequence> {
        let p = self.tokens_per_frame;
        Ok(Self {
            data: self.data.slice_rows(start * p, len * p)?,
            tokens_per_frame: p,
            timesteps: self.timesteps[start..start + len].to_vec(),
        })
    }

    /// CSV with one row per token: frame, token, then the channel values.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["frame".to_string(), "token".to_string()];
        header.extend((0..self.channels()).map(|c| format!("c{c}")));
        out.write_record(&header)?;
        let p = self.tokens_per_frame;
        for r in 0..self.data.rows() {
            let mut rec = vec![(r / p).to_string(), (r % p).to_string()];
            rec.extend(self.data.row(r).iter().map(|v| format!("{v:e}")));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn concat(parts: &[&LatentSequence]) -> Result<LatentSequence> {
        let Some(first) = parts.first() else {
            return Err(invalid("concat of zero sequences"));
        };
        if parts
            .iter()
            .any(|s| s.tokens_per_frame != first.tokens_per_frame)
        {
            return Err(shape_err("tokens per frame differ"));
        }
        let data = Tensor::concat_rows(&parts.iter().map(|s| &s.data).collect::<Vec<_>>())?;
        let timesteps = parts
            .iter()
            .flat_map(|s| s.timesteps.iter().copied())
            .collect();
        Self::new(data, first.tokens_per_frame, timesteps)
    }
}

/// `F` pixel frames of dimension `Dp`, stored as an `F × Dp` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelVideo {
    frames: Tensor,
}

impl PixelVideo {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.shape().len() != 2 || frames.rows() == 0 {
            return Err(shape_err("pixel video must be a non-empty F × Dp matrix"));
        }
        Ok(Self { frames })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.rows()
    }

    pub fn pixel_dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        self.frames.row(i)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    /// CSV with one row per frame: frame index, then the pixel values.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["frame".to_string()];
        header.extend((0..self.pixel_dim()).map(|i| format!("p{i}")));
        out.write_record(&header)?;
        for f in 0..self.frame_count() {
            let mut rec = vec![f.to_string()];
            rec.extend(self.frame(f).iter().map(|v| format!("{v:e}")));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Latent frame count for `pixel_frames` pixel frames.
pub fn latent_frames_for(pixel_frames: usize) -> Result<usize> {
    if pixel_frames == 0 || !(pixel_frames - 1).is_multiple_of(GROUP) {
        return Err(invalid(format!(
            "{pixel_frames} pixel frames is not 1 mod {GROUP}"
        )));
    }
    Ok((pixel_frames - 1) / GROUP + 1)
}

pub fn pixel_frames_for(latent_frames: usize) -> usize {
    if latent_frames == 0 {
        0
    } else {
        (latent_frames - 1) * GROUP + 1
    }
}

/// Which latent channels carry garment appearance; the rest carry motion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelLayout {
    pub tokens: usize,
    pub channels: usize,
    pub garment: Range<usize>,
}

impl ChannelLayout {
    pub fn new(tokens: usize, channels: usize, garment_channels: usize) -> Result<Self> {
        if garment_channels == 0 || garment_channels >= channels {
            return Err(invalid(
                "garment channels must be a proper, non-empty subset",
            ));
        }
        Ok(Self {
            tokens,
            channels,
            garment: channels - garment_channels..channels,
        })
    }

    pub fn frame_width(&self) -> usize {
        self.tokens * self.channels
    }

    pub fn is_garment(&self, channel: usize) -> bool {
        self.garment.contains(&channel)
    }

    /// Garment values of a flat frame, token-major.
    pub fn garment_of(&self, frame: &[f64]) -> Vec<f64> {
        self.select(frame, true)
    }

    pub fn motion_of(&self, frame: &[f64]) -> Vec<f64> {
        self.select(frame, false)
    }

    fn select(&self, frame: &[f64], garment: bool) -> Vec<f64> {
        frame
            .iter()
            .enumerate()
            .filter(|(i, _)| self.is_garment(i % self.channels) == garment)
            .map(|(_, &v)| v)
            .collect()
    }

    /// Writes `values` into the garment (or motion) slots of `frame`.
    pub fn fill(&self, frame: &mut [f64], values: &[f64], garment: bool) {
        let mut it = values.iter();
        for (i, v) in frame.iter_mut().enumerate() {
            if self.is_garment(i % self.channels) == garment {
                *v = *it.next().expect("enough values for the selected channels");
            }
        }
    }

    pub fn garment_width(&self) -> usize {
        self.tokens * self.garment.len()
    }

    pub fn motion_width(&self) -> usize {
        self.tokens * (self.channels - self.garment.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    tokens: usize,
    channels: usize,
    /// `Dp × (P·C)`, orthonormal columns.
    render: Tensor,
    /// `(P·C) × (P·C)` intra-group mixing.
    wobble: Tensor,
    alphas: [f64; GROUP],
}

impl Codec {
    pub fn new(pixel_dim: usize, tokens: usize, channels: usize, seed: u64) -> Result<Self> {
        let width = tokens * channels;
        if pixel_dim < width {
            return Err(invalid(format!(
                "pixel dim {pixel_dim} < latent frame width {width}"
            )));
        }
        let mut rng = Rng::new(seed);
        let render = orthonormal_columns(pixel_dim, width, &mut rng);
        let wobble = Tensor::randn(&[width, width], 1.0 / (width as f64).sqrt(), &mut rng);
        let beta = 0.02;
        let alphas = [-1.5 * beta, -0.5 * beta, 0.5 * beta, 1.5 * beta];
        Ok(Self {
            tokens,
            channels,
            render,
            wobble,
            alphas,
        })
    }

    pub fn pixel_dim(&self) -> usize {
        self.render.rows()
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn width(&self) -> usize {
        self.tokens * self.channels
    }

    /// Single-image encoder `Qᵀ` (`(P·C) × Dp`).
    pub fn image_encoder(&self) -> Tensor {
        self.render.transpose()
    }

    /// Decoder for pixel frame `j` (0-based) of a four-frame group: `Q (I + α_j W)`.
    pub fn group_frame_decoder(&self, j: usize) -> Tensor {
        let mut mix = Tensor::identity(self.width());
        mix.axpy(self.alphas[j], &self.wobble).expect("square mix");
        self.render.matmul(&mix).expect("render · mix")
    }

    fn project_in(&self, pixel: &[f64]) -> Vec<f64> {
        let (dp, w) = (self.pixel_dim(), self.width());
        let q = self.render.data();
        let mut out = vec![0.0; w];
        for (i, &p) in pixel.iter().enumerate().take(dp) {
            for (k, o) in out.iter_mut().enumerate() {
                *o += q[i * w + k] * p;
            }
        }
        out
    }

    fn render_out(&self, latent: &[f64]) -> Vec<f64> {
        let w = self.width();
        self.render
            .data()
            .chunks_exact(w)
            .map(|row| row.iter().zip(latent).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn mix(&self, latent: &[f64], alpha: f64) -> Vec<f64> {
        let w = self.width();
        let m = self.wobble.data();
        (0..w)
            .map(|i| {
                latent[i]
                    + alpha
                        * m[i * w..(i + 1) * w]
                            .iter()
                            .zip(latent)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
            })
            .collect()
    }

    /// The four pixel frames of one non-initial latent frame.
    pub fn decode_group(&self, latent: &[f64]) -> Vec<Vec<f64>> {
        self.alphas
            .iter()
            .map(|&a| self.render_out(&self.mix(latent, a)))
            .collect()
    }

    pub fn encode(&self, video: &PixelVideo) -> Result<LatentSequence> {
        if video.pixel_dim() != self.pixel_dim() {
            return Err(shape_err(format!(
                "pixel dim {} vs codec {}",
                video.pixel_dim(),
                self.pixel_dim()
            )));
        }
        video.frames.ensure_finite("pixel video")?;
        let f = latent_frames_for(video.frame_count())?;
        let mut data = Vec::with_capacity(f * self.width());
        data.extend(self.project_in(video.frame(0)));
        for g in 0..f - 1 {
            let mut acc = vec![0.0; self.width()];
            for j in 0..GROUP {
                for (a, v) in acc
                    .iter_mut()
                    .zip(self.project_in(video.frame(1 + g * GROUP + j)))
                {
                    *a += v / GROUP as f64;
                }
            }
            data.extend(acc);
        }
        LatentSequence::clean(
            Tensor::matrix(f * self.tokens, self.channels, data)?,
            self.tokens,
        )
    }

    pub fn decode(&self, latents: &LatentSequence) -> Result<PixelVideo> {
        self.check_latents(latents)?;
        latents.data().ensure_finite("latents")?;
        let f = latents.frames();
        let mut out = Vec::with_capacity(pixel_frames_for(f) * self.pixel_dim());
        out.extend(self.render_out(latents.frame_vec(0)));
        for i in 1..f {
            for frame in self.decode_group(latents.frame_vec(i)) {
                out.extend(frame);
            }
        }
        PixelVideo::new(Tensor::matrix(pixel_frames_for(f), self.pixel_dim(), out)?)
    }

    pub fn encode_image(&self, frame: &[f64]) -> Result<LatentSequence> {
        let video = PixelVideo::new(Tensor::matrix(1, frame.len(), frame.to_vec())?)?;
        self.encode(&video)
    }

    /// Pixel rendering of a single latent frame as a still image.
    pub fn decode_image(&self, latent: &[f64]) -> Result<Vec<f64>> {
        if latent.len() != self.width() {
            return Err(shape_err("latent frame width"));
        }
        Ok(self.render_out(latent))
    }

    /// Decodes latent frame `i` of `latents` and re-encodes its final pixel
    /// frame as a standalone single-frame latent at t = 0.
    pub fn reencode_last_pixel(
        &self,
        latents: &LatentSequence,
        i: usize,
    ) -> Result<LatentSequence> {
        if i >= latents.frames() {
            return Err(invalid(format!("frame {i} of {}", latents.frames())));
        }
        self.check_latents(latents)?;
        self.reencode_tail(latents.frame_vec(i), i == 0)
    }

    /// As [`Codec::reencode_last_pixel`] for one flat latent frame; `initial`
    /// marks the video's first latent frame, which decodes to a single pixel frame.
    pub fn reencode_tail(&self, latent: &[f64], initial: bool) -> Result<LatentSequence> {
        if latent.len() != self.width() {
            return Err(shape_err("latent frame width"));
        }
        let last = if initial {
            self.render_out(latent)
        } else {
            self.decode_group(latent).pop().expect("four frames")
        };
        self.encode_image(&last)
    }

    fn check_latents(&self, latents: &LatentSequence) -> Result<()> {
        if latents.tokens_per_frame() != self.tokens || latents.channels() != self.channels {
            return Err(shape_err(format!(
                "latent frames are {}×{}, codec expects {}×{}",
                latents.tokens_per_frame(),
                latents.channels(),
                self.tokens,
                self.channels
            )));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("codec.render".into(), self.render.clone());
        ck.insert("codec.wobble".into(), self.wobble.clone());
        ck.insert(
            "codec.alphas".into(),
            Tensor::new(vec![GROUP], self.alphas.to_vec()).expect("4 alphas"),
        );
        ck.insert(
            "codec.dims".into(),
            Tensor::new(vec![2], vec![self.tokens as f64, self.channels as f64]).expect("2 dims"),
        );
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ck.get(k)
                .ok_or_else(|| Error::Format(format!("missing `{k}`")))
        };
        let dims = get("codec.dims")?.data();
        let alphas = get("codec.alphas")?.data();
        let codec = Self {
            tokens: dims[0] as usize,
            channels: dims[1] as usize,
            render: get("codec.render")?.clone(),
            wobble: get("codec.wobble")?.clone(),
            alphas: alphas
                .try_into()
                .map_err(|_| Error::Format("alphas".into()))?,
        };
        if codec.render.cols() != codec.width() || codec.wobble.rows() != codec.width() {
            return Err(Error::Format("codec matrix shapes".into()));
        }
        Ok(codec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        crate::tensor::write_checkpoint(file, &self.to_checkpoint())
    }
}

/// Gram–Schmidt on a seeded Gaussian matrix.
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v = rng.normals(rows);
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= d * y;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut t = Tensor::zeros(&[rows, cols]);
    for (c, b) in basis.iter().enumerate() {
        for (r, v) in b.iter().enumerate() {
            t.set(r, c, *v);
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn codec() -> Codec {
        Codec::new(64, 4, 16, 9).unwrap()
    }

    fn random_latents(f: usize, seed: u64) -> LatentSequence {
        let mut rng = Rng::new(seed);
        LatentSequence::clean(Tensor::randn(&[f * 4, 16], 1.0, &mut rng), 4).unwrap()
    }

    #[test]
    fn temporal_length_law() {
        assert_eq!(latent_frames_for(81).unwrap(), 21);
        assert_eq!(latent_frames_for(165).unwrap(), 42);
        assert_eq!(latent_frames_for(1).unwrap(), 1);
        assert!(latent_frames_for(80).is_err());
        assert!(latent_frames_for(0).is_err());
        assert_eq!(pixel_frames_for(21), 81);
    }

    #[test]
    fn encode_rejects_bad_frame_count() {
        let c = codec();
        let video = PixelVideo::new(Tensor::zeros(&[6, 64])).unwrap();
        assert!(matches!(c.encode(&video), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn decode_lengths_and_round_trip() {
        let c = codec();
        let z = random_latents(21, 1);
        let video = c.decode(&z).unwrap();
        assert_eq!(video.frame_count(), 81);
        let back = c.encode(&video).unwrap();
        assert!(back.data().max_abs_diff(z.data()) <= 1e-12);
        assert_eq!(back.timesteps(), &[0.0; 21]);
    }

    #[test]
    fn render_columns_are_orthonormal() {
        let c = codec();
        let gram = c.render.transpose().matmul(&c.render).unwrap();
        assert!(gram.max_abs_diff(&Tensor::identity(64)) < 1e-12);
    }

    #[test]
    fn reencoded_last_pixel_matches_matrix_oracle() {
        let c = codec();
        let z = random_latents(3, 2);
        let got = c.reencode_last_pixel(&z, 2).unwrap();
        assert_eq!(got.frames(), 1);
        assert_eq!(got.timesteps(), &[0.0]);
        // Qᵀ · Q(I + α₄W) · z, formed with explicit matrix products.
        let zcol = Tensor::matrix(64, 1, z.frame_vec(2).to_vec()).unwrap();
        let want = c
            .image_encoder()
            .matmul(&c.group_frame_decoder(3))
            .unwrap()
            .matmul(&zcol)
            .unwrap();
        let gv = Tensor::matrix(64, 1, got.frame_vec(0).to_vec()).unwrap();
        assert!(gv.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn image_round_trips() {
        let c = codec();
        let zero = c.encode_image(&[0.0; 64]).unwrap();
        assert!(zero.data().data().iter().all(|v| *v == 0.0));
        let z = random_latents(1, 3);
        let img = c.decode_image(z.frame_vec(0)).unwrap();
        let back = c.encode_image(&img).unwrap();
        assert!(back.data().max_abs_diff(z.data()) <= 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = codec();
        let back = Codec::from_checkpoint(&c.to_checkpoint()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn channel_layout_split() {
        let layout = ChannelLayout::new(4, 16, 4).unwrap();
        let frame: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let g = layout.garment_of(&frame);
        assert_eq!(g.len(), 16);
        assert_eq!(&g[..4], &[12.0, 13.0, 14.0, 15.0]);
        assert_eq!(layout.motion_of(&frame).len(), 48);
        let mut copy = vec![0.0; 64];
        layout.fill(&mut copy, &g, true);
        layout.fill(&mut copy, &layout.motion_of(&frame), false);
        assert_eq!(copy, frame);
    }

    #[test]
    fn csv_has_frame_column() {
        let c = codec();
        let video = c.decode(&random_latents(2, 4)).unwrap();
        let mut buf = Vec::new();
        video.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 5);
        assert!(text.starts_with("frame,p0,"));
    }

    proptest! {
        #[test]
        fn encode_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let c = codec();
            let mut rng = Rng::new(seed);
            let x = PixelVideo::new(Tensor::randn(&[5, 64], 1.0, &mut rng)).unwrap();
            let y = PixelVideo::new(Tensor::randn(&[5, 64], 1.0, &mut rng)).unwrap();
            let mut mix = x.frames().scale(a);
            mix.axpy(b, y.frames()).unwrap();
            let lhs = c.encode(&PixelVideo::new(mix).unwrap()).unwrap();
            let mut rhs = c.encode(&x).unwrap().data().scale(a);
            rhs.axpy(b, c.encode(&y).unwrap().data()).unwrap();
            prop_assert!(lhs.data().max_abs_diff(&rhs) < 1e-12);
        }

        #[test]
        fn decode_encode_is_identity(seed in any::<u64>(), f in 1usize..6) {
            let c = codec();
            let z = random_latents(f, seed);
            let back = c.encode(&c.decode(&z).unwrap()).unwrap();
            prop_assert!(back.data().max_abs_diff(z.data()) <= 1e-12);
        }
    }
}
