use std::ops::Range;

use crate::codec::LatentSequence;
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Reference and garment latents, both at noise level zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    pub reference: Tensor,
    pub garment: Tensor,
}

impl ConditionSet {
    pub fn new(reference: Tensor, garment: Tensor) -> Result<Self> {
        if reference.shape() != garment.shape() || reference.shape().len() != 2 {
            return Err(shape_err(format!(
                "reference {:?} and garment {:?} must be equal P×C blocks",
                reference.shape(),
                garment.shape()
            )));
        }
        Ok(Self { reference, garment })
    }

    /// From two single-frame latent sequences.
    pub fn from_latents(reference: &LatentSequence, garment: &LatentSequence) -> Result<Self> {
        if reference.frames() != 1 || garment.frames() != 1 {
            return Err(invalid("conditions must be single latent frames"));
        }
        if reference.timesteps()[0] != 0.0 || garment.timesteps()[0] != 0.0 {
            return Err(invalid("condition latents must be at t = 0"));
        }
        Self::new(reference.data().clone(), garment.data().clone())
    }

    pub fn with_garment(&self, garment: Tensor) -> Result<Self> {
        Self::new(self.reference.clone(), garment)
    }

    pub fn with_reference(&self, reference: Tensor) -> Result<Self> {
        Self::new(reference, self.garment.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenRole {
    /// Null-context token followed by the reference tokens.
    Reference,
    Garment,
    /// Video frame with its segment-relative frame index.
    Frame(usize),
}

impl TokenRole {
    pub fn is_video(self) -> bool {
        matches!(self, TokenRole::Frame(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub role: TokenRole,
    /// `P × C` latent tokens. The reference block's null token is implicit.
    pub latents: Tensor,
    pub t: f64,
}

impl Block {
    pub fn token_count(&self) -> usize {
        self.latents.rows() + usize::from(self.role == TokenRole::Reference)
    }
}

/// Ordered token blocks fed to the backbone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnifiedSequence {
    blocks: Vec<Block>,
}

impl UnifiedSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn conditions(cond: &ConditionSet) -> Self {
        let mut s = Self::new();
        s.push_conditions(cond);
        s
    }

    pub fn push_conditions(&mut self, cond: &ConditionSet) {
        self.blocks.push(Block {
            role: TokenRole::Reference,
            latents: cond.reference.clone(),
            t: 0.0,
        });
        self.blocks.push(Block {
            role: TokenRole::Garment,
            latents: cond.garment.clone(),
            t: 0.0,
        });
    }

    /// Appends every frame of `latents`, numbering them from `first_index`.
    pub fn push_frames(&mut self, latents: &LatentSequence, first_index: usize) -> Result<()> {
        for i in 0..latents.frames() {
            self.push_frame(
                first_index + i,
                latents.frame_block(i),
                latents.timesteps()[i],
            )?;
        }
        Ok(())
    }

    pub fn push_frame(&mut self, index: usize, latents: Tensor, t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid(format!("timestep {t} outside [0, 1]")));
        }
        self.blocks.push(Block {
            role: TokenRole::Frame(index),
            latents,
            t,
        });
        Ok(())
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(Block::token_count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Token span of each block, in order.
    pub fn spans(&self) -> Vec<(TokenRole, Range<usize>)> {
        let mut at = 0;
        self.blocks
            .iter()
            .map(|b| {
                let r = at..at + b.token_count();
                at = r.end;
                (b.role, r)
            })
            .collect()
    }

    /// Token indices of video tokens, in sequence order.
    pub fn video_rows(&self) -> Vec<usize> {
        self.spans()
            .into_iter()
            .filter(|(r, _)| r.is_video())
            .flat_map(|(_, s)| s)
            .collect()
    }
}
