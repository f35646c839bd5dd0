//! Channel readouts and continuity statistics over latent streams.

use crate::codec::{ChannelLayout, LatentSequence};

/// RMS distance between a frame's garment channels and `code`.
pub fn garment_error(layout: &ChannelLayout, frame: &[f64], code: &[f64]) -> f64 {
    let g = layout.garment_of(frame);
    let ss: f64 = g.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum();
    (ss / g.len() as f64).sqrt()
}

/// Mean garment error of frames `range` against `code`.
pub fn segment_garment_error(
    layout: &ChannelLayout,
    latents: &LatentSequence,
    range: std::ops::Range<usize>,
    code: &[f64],
) -> f64 {
    let n = range.len() as f64;
    range
        .map(|i| garment_error(layout, latents.frame_vec(i), code))
        .sum::<f64>()
        / n
}

/// `‖motion(i + 1) − motion(i)‖₂` for consecutive frames.
pub fn motion_deltas(layout: &ChannelLayout, latents: &LatentSequence) -> Vec<f64> {
    (1..latents.frames())
        .map(|i| {
            let a = layout.motion_of(latents.frame_vec(i - 1));
            let b = layout.motion_of(latents.frame_vec(i));
            a.iter()
                .zip(&b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Continuity {
    /// Delta between the last frame before `boundary` and the frame at it.
    pub boundary: f64,
    /// Median of every other consecutive delta.
    pub median_intra: f64,
}

impl Continuity {
    pub fn ratio(&self) -> f64 {
        self.boundary / self.median_intra
    }
}

pub fn continuity(layout: &ChannelLayout, latents: &LatentSequence, boundary: usize) -> Continuity {
    let deltas = motion_deltas(layout, latents);
    let intra: Vec<f64> = deltas
        .iter()
        .enumerate()
        .filter(|(i, _)| i + 1 != boundary)
        .map(|(_, d)| *d)
        .collect();
    Continuity {
        boundary: deltas[boundary - 1],
        median_intra: median(&intra),
    }
}

/// Readout of a switched stream against the old and new garment codes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchMetrics {
    pub pre_vs_old: f64,
    pub post_vs_old: f64,
    pub post_vs_new: f64,
    pub continuity: Continuity,
}

/// Whole-array metrics of a stream switched at frame `boundary`.
pub fn switch_metrics(
    layout: &ChannelLayout,
    latents: &LatentSequence,
    boundary: usize,
    old: &[f64],
    new: &[f64],
) -> SwitchMetrics {
    let f = latents.frames();
    SwitchMetrics {
        pre_vs_old: segment_garment_error(layout, latents, 0..boundary, old),
        post_vs_old: segment_garment_error(layout, latents, boundary..f, old),
        post_vs_new: segment_garment_error(layout, latents, boundary..f, new),
        continuity: continuity(layout, latents, boundary),
    }
}

/// The same metrics accumulated one frame at a time.
#[derive(Debug, Clone)]
pub struct StreamingMetrics<'a> {
    layout: &'a ChannelLayout,
    old: &'a [f64],
    new: &'a [f64],
    boundary: usize,
    frames: usize,
    prev_motion: Option<Vec<f64>>,
    pre_old: f64,
    post_old: f64,
    post_new: f64,
    boundary_delta: f64,
    intra: Vec<f64>,
}

impl<'a> StreamingMetrics<'a> {
    pub fn new(layout: &'a ChannelLayout, boundary: usize, old: &'a [f64], new: &'a [f64]) -> Self {
        Self {
            layout,
            old,
            new,
            boundary,
            frames: 0,
            prev_motion: None,
            pre_old: 0.0,
            post_old: 0.0,
            post_new: 0.0,
            boundary_delta: f64::NAN,
            intra: Vec::new(),
        }
    }

    pub fn push(&mut self, frame: &[f64]) {
        let i = self.frames;
        if i < self.boundary {
            self.pre_old += garment_error(self.layout, frame, self.old);
        } else {
            self.post_old += garment_error(self.layout, frame, self.old);
            self.post_new += garment_error(self.layout, frame, self.new);
        }
        let motion = self.layout.motion_of(frame);
        if let Some(prev) = &self.prev_motion {
            let d = prev
                .iter()
                .zip(&motion)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if i == self.boundary {
                self.boundary_delta = d;
            } else {
                self.intra.push(d);
            }
        }
        self.prev_motion = Some(motion);
        self.frames += 1;
    }

    pub fn finish(&self) -> SwitchMetrics {
        let post = (self.frames - self.boundary) as f64;
        SwitchMetrics {
            pre_vs_old: self.pre_old / self.boundary as f64,
            post_vs_old: self.post_old / post,
            post_vs_new: self.post_new / post,
            continuity: Continuity {
                boundary: self.boundary_delta,
                median_intra: median(&self.intra),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Tensor};
    use proptest::prelude::*;

    #[test]
    fn spot_values() {
        let layout = ChannelLayout::new(1, 4, 2).unwrap();
        assert_eq!(
            garment_error(&layout, &[9.0, 9.0, 1.0, 3.0], &[1.0, 1.0]),
            2f64.sqrt()
        );
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let z = LatentSequence::clean(
            Tensor::from_rows(&[
                vec![0.0, 0.0, 0.0, 0.0],
                vec![3.0, 4.0, 0.0, 0.0],
                vec![3.0, 4.0, 0.0, 0.0],
            ])
            .unwrap(),
            1,
        )
        .unwrap();
        assert_eq!(motion_deltas(&layout, &z), vec![5.0, 0.0]);
        let c = continuity(&layout, &z, 1);
        assert_eq!((c.boundary, c.median_intra), (5.0, 0.0));
    }

    proptest! {
        #[test]
        fn streaming_and_whole_array_agree(seed in 0u64..1000, frames in 4usize..20, cut in 1usize..3) {
            let layout = ChannelLayout::new(2, 6, 2).unwrap();
            let mut rng = Rng::new(seed);
            let z = LatentSequence::clean(Tensor::randn(&[frames * 2, 6], 1.0, &mut rng), 2).unwrap();
            let old = rng.normals(4);
            let new = rng.normals(4);
            let boundary = frames / 2 + cut - 1;
            let whole = switch_metrics(&layout, &z, boundary, &old, &new);
            let mut s = StreamingMetrics::new(&layout, boundary, &old, &new);
            for i in 0..frames {
                s.push(z.frame_vec(i));
            }
            let streamed = s.finish();
            for (a, b) in [
                (whole.pre_vs_old, streamed.pre_vs_old),
                (whole.post_vs_old, streamed.post_vs_old),
                (whole.post_vs_new, streamed.post_vs_new),
                (whole.continuity.boundary, streamed.continuity.boundary),
                (whole.continuity.median_intra, streamed.continuity.median_intra),
            ] {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
