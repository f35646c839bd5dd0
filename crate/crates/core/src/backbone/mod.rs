//! Toy diffusion transformer over unified condition + video token sequences.
//!
//! Token embedding is `latent·W_in + b_in + slot + time(t) + frame(i)`:
//! a learned row per role slot (null token, reference tokens, garment
//! tokens, and video tokens by position inside their chunk), a learned
//! projection of a sinusoidal embedding of `1000·t`, and a fixed
//! sinusoidal embedding of the segment-relative frame index for video
//! tokens. Blocks are pre-norm attention + SiLU MLP; all roles share the
//! same projections. Only video tokens are projected back to latents.

mod sequence;

pub use sequence::{Block, ConditionSet, TokenRole, UnifiedSequence};

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{invalid, shape_err, Error, Result};
use crate::masking::{condition_mask, AttentionMask, CondLayout};
use crate::tensor::{Checkpoint, Grads, Rng, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Tokens per latent frame.
    pub tokens: usize,
    pub channels: usize,
    /// Frames per chunk; sets how many video slot embeddings exist.
    pub chunk: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            head_dim: 8,
            tokens: 4,
            channels: 16,
            chunk: 3,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn cond_layout(&self) -> CondLayout {
        CondLayout::for_tokens(self.tokens)
    }

    fn slot_rows(&self) -> usize {
        1 + 2 * self.tokens + self.chunk * self.tokens
    }

    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            self.layers,
            self.heads,
            self.head_dim,
            self.tokens,
            self.channels,
            self.chunk,
            self.mlp_ratio,
        ];
        if nonzero.contains(&0) {
            return Err(Error::Config(format!(
                "backbone dimensions must be positive: {self:?}"
            )));
        }
        if !self.d_model().is_multiple_of(2) {
            return Err(Error::Config(
                "model dim must be even for sinusoidal embeddings".into(),
            ));
        }
        if !self.d_model().is_multiple_of(self.channels)
            && !self.channels.is_multiple_of(self.d_model())
        {
            return Err(Error::Config(format!(
                "model dim {} and channels {} are not commensurate",
                self.d_model(),
                self.channels
            )));
        }
        Ok(())
    }

    fn to_tensor(&self) -> Tensor {
        let v = [
            self.layers,
            self.heads,
            self.head_dim,
            self.tokens,
            self.channels,
            self.chunk,
            self.mlp_ratio,
        ];
        Tensor::new(vec![v.len()], v.iter().map(|&x| x as f64).collect()).expect("config tensor")
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 7 || d.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
            return Err(Error::Format(
                "backbone.config must hold 7 non-negative integers".into(),
            ));
        }
        let u = |i: usize| d[i] as usize;
        let c = Self {
            layers: u(0),
            heads: u(1),
            head_dim: u(2),
            tokens: u(3),
            channels: u(4),
            chunk: u(5),
            mlp_ratio: u(6),
        };
        c.validate()?;
        Ok(c)
    }
}

/// Keys and values (`n × d_model`, heads side by side) for a span of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub keys: Tensor,
    pub values: Tensor,
}

impl LayerKv {
    pub fn empty(d_model: usize) -> Self {
        Self {
            keys: Tensor::zeros(&[0, d_model]),
            values: Tensor::zeros(&[0, d_model]),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self, range: Range<usize>) -> Result<LayerKv> {
        Ok(Self {
            keys: self.keys.slice_rows(range.start, range.len())?,
            values: self.values.slice_rows(range.start, range.len())?,
        })
    }

    pub fn concat(parts: &[&LayerKv]) -> Result<LayerKv> {
        let keys: Vec<&Tensor> = parts.iter().map(|p| &p.keys).collect();
        let values: Vec<&Tensor> = parts.iter().map(|p| &p.values).collect();
        Ok(Self {
            keys: Tensor::concat_rows(&keys)?,
            values: Tensor::concat_rows(&values)?,
        })
    }
}

/// Per-layer K/V of the tokens a new sequence may attend besides itself.
pub type KvContext = Vec<LayerKv>;

/// Parameters bound to a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// Gradient of every parameter, zero where the output did not depend on it.
    pub fn grads(&self, tape: &Tape, grads: &Grads) -> Checkpoint {
        self.vars
            .iter()
            .map(|(n, &v)| (n.clone(), grads.get_or_zeros(v, tape.value(v))))
            .collect()
    }
}

/// Result of a forward pass recorded on a tape.
#[derive(Debug)]
pub struct Forward {
    /// Predictions for the video tokens of the sequence, in order (`n_video × C`).
    pub pred: Var,
    /// K/V of every token of the sequence, per layer.
    pub kv: Vec<LayerKv>,
    /// Head-averaged attention weights per layer, `n × (context + n)`.
    pub attention: Vec<Tensor>,
}

/// Untaped forward result.
#[derive(Debug, Clone)]
pub struct Output {
    pub pred: Tensor,
    pub kv: Vec<LayerKv>,
    pub attention: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    params: Checkpoint,
}

fn ln_names(prefix: &str) -> [String; 2] {
    [format!("{prefix}.gain"), format!("{prefix}.bias")]
}

impl Backbone {
    pub fn new(config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model();
        let c = config.channels;
        let h = d * config.mlp_ratio;
        let mut p = Checkpoint::new();
        let mut put = |name: String, t: Tensor| {
            p.insert(name, t);
        };
        let dense = |rows: usize, cols: usize, gain: f64, rng: &mut Rng| {
            Tensor::randn(&[rows, cols], gain / (rows as f64).sqrt(), rng)
        };
        put("embed.in.w".into(), dense(c, d, 1.0, rng));
        put("embed.in.b".into(), Tensor::zeros(&[1, d]));
        put(
            "embed.slots".into(),
            Tensor::randn(&[config.slot_rows(), d], 0.5, rng),
        );
        put("embed.time.w".into(), dense(d, d, 1.0, rng));
        put("embed.time.b".into(), Tensor::zeros(&[1, d]));
        for l in 0..config.layers {
            for norm in ["norm1", "norm2"] {
                let [g, b] = ln_names(&format!("layers.{l}.{norm}"));
                put(g, Tensor::filled(&[1, d], 1.0));
                put(b, Tensor::zeros(&[1, d]));
            }
            for w in ["q", "k", "v", "o"] {
                put(format!("layers.{l}.attn.{w}"), dense(d, d, 1.0, rng));
            }
            put(format!("layers.{l}.mlp.w1"), dense(d, h, 1.0, rng));
            put(format!("layers.{l}.mlp.b1"), Tensor::zeros(&[1, h]));
            put(format!("layers.{l}.mlp.w2"), dense(h, d, 1.0, rng));
            put(format!("layers.{l}.mlp.b2"), Tensor::zeros(&[1, d]));
        }
        let [g, b] = ln_names("out.norm");
        put(g, Tensor::filled(&[1, d], 1.0));
        put(b, Tensor::zeros(&[1, d]));
        put("out.w".into(), dense(d, c, 0.1, rng));
        put("out.b".into(), Tensor::zeros(&[1, c]));
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &Checkpoint {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Checkpoint {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameters plus a `backbone.config` entry, all under a `prefix.` namespace.
    pub fn to_checkpoint(&self, prefix: &str) -> Checkpoint {
        let mut ck: Checkpoint = self
            .params
            .iter()
            .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
            .collect();
        ck.insert(format!("{prefix}.backbone.config"), self.config.to_tensor());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let cfg = ck
            .get(&format!("{prefix}.backbone.config"))
            .ok_or_else(|| Error::Format(format!("missing `{prefix}.backbone.config`")))?;
        let config = BackboneConfig::from_tensor(cfg)?;
        let template = Self::new(config, &mut Rng::new(0))?;
        let mut params = Checkpoint::new();
        for (name, t) in &template.params {
            let stored = ck
                .get(&format!("{prefix}.{name}"))
                .ok_or_else(|| Error::Format(format!("missing `{prefix}.{name}`")))?;
            if stored.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "`{prefix}.{name}` has shape {:?}, expected {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            params.insert(name.clone(), stored.clone());
        }
        Ok(Self { config, params })
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), tape.leaf(t.clone())))
                .collect(),
        }
    }

    /// Records a forward pass over `seq`, which may additionally attend the
    /// per-layer `context` K/V. `mask` is `n × (context + n)`, context columns first.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        seq: &UnifiedSequence,
        context: Option<&KvContext>,
        mask: &AttentionMask,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let d = cfg.d_model();
        let n = seq.len();
        let ctx_len = match context {
            Some(c) => {
                if c.len() != cfg.layers {
                    return Err(shape_err(format!(
                        "context has {} layers, backbone {}",
                        c.len(),
                        cfg.layers
                    )));
                }
                let len = c[0].len();
                if c.iter()
                    .any(|l| l.len() != len || l.keys.cols() != d || l.values.cols() != d)
                {
                    return Err(shape_err("context layers disagree in length or width"));
                }
                len
            }
            None => 0,
        };
        if mask.rows() != n || mask.cols() != ctx_len + n {
            return Err(shape_err(format!(
                "mask {}×{} for {n} tokens with {ctx_len} context tokens",
                mask.rows(),
                mask.cols()
            )));
        }
        mask.check_self_attention(ctx_len)?;
        let inputs = self.embed_inputs(seq)?;
        let allowed = mask.shared();

        let lat = tape.leaf(inputs.latents);
        let x = tape.matmul(lat, bound.get("embed.in.w"))?;
        let x = tape.add_row(x, bound.get("embed.in.b"))?;
        let slots = tape.gather_rows(bound.get("embed.slots"), &inputs.slots)?;
        let x = tape.add(x, slots)?;
        let tf = tape.leaf(inputs.time_features);
        let te = tape.matmul(tf, bound.get("embed.time.w"))?;
        let te = tape.add_row(te, bound.get("embed.time.b"))?;
        let x = tape.add(x, te)?;
        let pos = tape.leaf(inputs.frame_features);
        let mut x = tape.add(x, pos)?;

        let scale = 1.0 / (cfg.head_dim as f64).sqrt();
        let mut kv = Vec::with_capacity(cfg.layers);
        let mut attention = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = |s: &str| format!("layers.{l}.{s}");
            let a = tape.layer_norm(
                x,
                bound.get(&name("norm1.gain")),
                bound.get(&name("norm1.bias")),
                LN_EPS,
            )?;
            let q = tape.matmul(a, bound.get(&name("attn.q")))?;
            let k_new = tape.matmul(a, bound.get(&name("attn.k")))?;
            let v_new = tape.matmul(a, bound.get(&name("attn.v")))?;
            kv.push(LayerKv {
                keys: tape.value(k_new).clone(),
                values: tape.value(v_new).clone(),
            });
            let (k, v) = match context {
                Some(c) if ctx_len > 0 => {
                    let ck = tape.leaf(c[l].keys.clone());
                    let cv = tape.leaf(c[l].values.clone());
                    (
                        tape.concat_rows(&[ck, k_new])?,
                        tape.concat_rows(&[cv, v_new])?,
                    )
                }
                _ => (k_new, v_new),
            };
            let mut heads = Vec::with_capacity(cfg.heads);
            let mut weights = Tensor::zeros(&[n, ctx_len + n]);
            for h in 0..cfg.heads {
                let qh = tape.slice_cols(q, h * cfg.head_dim, cfg.head_dim)?;
                let kh = tape.slice_cols(k, h * cfg.head_dim, cfg.head_dim)?;
                let vh = tape.slice_cols(v, h * cfg.head_dim, cfg.head_dim)?;
                let s = tape.matmul_nt(qh, kh)?;
                let s = tape.scale(s, scale);
                let p = tape.masked_softmax(s, Some(allowed.clone()))?;
                weights.axpy(1.0 / cfg.heads as f64, tape.value(p))?;
                heads.push(tape.matmul(p, vh)?);
            }
            attention.push(weights);
            let o = tape.concat_cols(&heads)?;
            let o = tape.matmul(o, bound.get(&name("attn.o")))?;
            x = tape.add(x, o)?;
            let m = tape.layer_norm(
                x,
                bound.get(&name("norm2.gain")),
                bound.get(&name("norm2.bias")),
                LN_EPS,
            )?;
            let m = tape.matmul(m, bound.get(&name("mlp.w1")))?;
            let m = tape.add_row(m, bound.get(&name("mlp.b1")))?;
            let m = tape.silu(m);
            let m = tape.matmul(m, bound.get(&name("mlp.w2")))?;
            let m = tape.add_row(m, bound.get(&name("mlp.b2")))?;
            x = tape.add(x, m)?;
        }
        let video = seq.video_rows();
        let pred = if video.is_empty() {
            tape.leaf(Tensor::zeros(&[0, cfg.channels]))
        } else {
            let xv = tape.gather_rows(x, &video)?;
            let y = tape.layer_norm(
                xv,
                bound.get("out.norm.gain"),
                bound.get("out.norm.bias"),
                LN_EPS,
            )?;
            let y = tape.matmul(y, bound.get("out.w"))?;
            tape.add_row(y, bound.get("out.b"))?
        };
        if !tape.value(pred).is_finite() {
            return Err(Error::NonFinite("backbone prediction".into()));
        }
        Ok(Forward {
            pred,
            kv,
            attention,
        })
    }

    /// Forward over a self-contained sequence with a square mask.
    pub fn forward(&self, seq: &UnifiedSequence, mask: &AttentionMask) -> Result<Output> {
        self.run(seq, None, mask)
    }

    /// Forward over new tokens that also attend `context` K/V.
    pub fn forward_incremental(
        &self,
        seq: &UnifiedSequence,
        context: &KvContext,
        mask: &AttentionMask,
    ) -> Result<Output> {
        self.run(seq, Some(context), mask)
    }

    fn run(
        &self,
        seq: &UnifiedSequence,
        context: Option<&KvContext>,
        mask: &AttentionMask,
    ) -> Result<Output> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let f = self.forward_on(&mut tape, &bound, seq, context, mask)?;
        Ok(Output {
            pred: tape.value(f.pred).clone(),
            kv: f.kv,
            attention: f.attention,
        })
    }

    /// K/V of the condition block (null + reference tokens, then garment
    /// tokens) under span-causal order.
    pub fn condition_kv(&self, cond: &ConditionSet) -> Result<Vec<LayerKv>> {
        if cond.reference.shape() != [self.config.tokens, self.config.channels] {
            return Err(shape_err(format!(
                "condition latents {:?}, expected [{}, {}]",
                cond.reference.shape(),
                self.config.tokens,
                self.config.channels
            )));
        }
        let seq = UnifiedSequence::conditions(cond);
        Ok(self
            .forward(&seq, &condition_mask(self.config.cond_layout()))?
            .kv)
    }

    fn embed_inputs(&self, seq: &UnifiedSequence) -> Result<EmbedInputs> {
        let cfg = &self.config;
        let (p, c, d) = (cfg.tokens, cfg.channels, cfg.d_model());
        let n = seq.len();
        let mut latents = Vec::with_capacity(n * c);
        let mut slots = Vec::with_capacity(n);
        let mut time_features = Vec::with_capacity(n * d);
        let mut frame_features = Vec::with_capacity(n * d);
        for block in seq.blocks() {
            if block.latents.shape() != [p, c] {
                return Err(shape_err(format!(
                    "block {:?} has shape {:?}, expected [{p}, {c}]",
                    block.role,
                    block.latents.shape()
                )));
            }
            block.latents.ensure_finite("backbone input")?;
            let time = sinusoid(block.t * 1000.0, d, 10_000.0);
            let (first_slot, frame) = match block.role {
                TokenRole::Reference => {
                    latents.extend(std::iter::repeat_n(0.0, c));
                    slots.push(0);
                    time_features.extend_from_slice(&time);
                    frame_features.extend(std::iter::repeat_n(0.0, d));
                    (1, None)
                }
                TokenRole::Garment => (1 + p, None),
                TokenRole::Frame(i) => (
                    1 + 2 * p + (i % cfg.chunk) * p,
                    Some(sinusoid(i as f64, d, 200.0)),
                ),
            };
            latents.extend_from_slice(block.latents.data());
            for j in 0..p {
                slots.push(first_slot + j);
                time_features.extend_from_slice(&time);
                match &frame {
                    Some(f) => frame_features.extend_from_slice(f),
                    None => frame_features.extend(std::iter::repeat_n(0.0, d)),
                }
            }
        }
        if slots.is_empty() {
            return Err(invalid("empty sequence"));
        }
        Ok(EmbedInputs {
            latents: Tensor::matrix(n, c, latents)?,
            slots,
            time_features: Tensor::matrix(n, d, time_features)?,
            frame_features: Tensor::matrix(n, d, frame_features)?,
        })
    }
}

struct EmbedInputs {
    latents: Tensor,
    slots: Vec<usize>,
    time_features: Tensor,
    frame_features: Tensor,
}

/// `[sin(x·ω_0), cos(x·ω_0), …]` with `ω_i = base^(−2i/d)`.
pub fn sinusoid(x: f64, d: usize, base: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(d);
    for i in 0..d / 2 {
        let w = base.powf(-2.0 * i as f64 / d as f64);
        out.push((x * w).sin());
        out.push((x * w).cos());
    }
    out
}

#[cfg(test)]
mod tests;
