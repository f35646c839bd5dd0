//! Frame-granular K/V cache with sink + rolling-window retention and the
//! three garment-switch operations.
//!
//! Retention within a segment whose first frame has global index `o`, after
//! frame `k` (both global) has been appended, with `j = k − o`:
//!
//! ```text
//! { Reference, Garment, Sink = frame o } ∪ { o + max(1, j − M + 4) ..= k }
//! ```
//!
//! `M` counts the two condition slots, so a saturated cache holds `M − 2`
//! frames. A historical withdraw drops every frame; the next appended frame
//! starts a new segment and becomes the new sink.

use std::collections::VecDeque;
use std::io::Write;

use crate::backbone::{Backbone, ConditionSet, KvContext, LayerKv};
use crate::codec::Codec;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotRole {
    Reference,
    Garment,
    Sink,
    Rolling(usize),
}

#[derive(Debug, Clone, PartialEq)]
struct FrameEntry {
    frame: usize,
    kv: Vec<LayerKv>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    GarmentRefresh(Tensor),
    HistoricalWithdraw,
    ReferenceDisentangle,
}

impl EventKind {
    /// Application order among events due at the same chunk.
    pub fn rank(&self) -> u8 {
        match self {
            EventKind::GarmentRefresh(_) => 0,
            EventKind::HistoricalWithdraw => 1,
            EventKind::ReferenceDisentangle => 2,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            EventKind::GarmentRefresh(_) => "refresh",
            EventKind::HistoricalWithdraw => "withdraw",
            EventKind::ReferenceDisentangle => "disentangle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEvent {
    pub chunk: usize,
    pub kind: EventKind,
}

/// Stable sort into (chunk, Refresh → Withdraw → Disentangle) order.
pub fn order_events(events: &mut [CacheEvent]) {
    events.sort_by_key(|e| (e.chunk, e.kind.rank()));
}

/// Mean attention of new-chunk queries over column groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionMass {
    pub conditional: f64,
    pub historical: f64,
    pub intra: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    max_slots: usize,
    layers: usize,
    conditions: ConditionSet,
    reference: Vec<LayerKv>,
    garment: Vec<LayerKv>,
    frames: VecDeque<FrameEntry>,
    /// First global frame index of the current segment; `None` right after a withdraw.
    origin: Option<usize>,
    /// Global index the next appended frame must carry.
    next_frame: usize,
    last_attention: Option<Vec<Tensor>>,
}

impl KvCache {
    /// Cache holding only the condition K/V of `conditions`.
    pub fn new(max_slots: usize, backbone: &Backbone, conditions: ConditionSet) -> Result<Self> {
        if max_slots < 4 {
            return Err(invalid(format!(
                "cache size {max_slots} leaves no rolling window"
            )));
        }
        let kv = backbone.condition_kv(&conditions)?;
        let r = backbone.config().cond_layout().reference;
        let (reference, garment) = split_conditions(&kv, r)?;
        Ok(Self {
            max_slots,
            layers: backbone.config().layers,
            conditions,
            reference,
            garment,
            frames: VecDeque::new(),
            origin: None,
            next_frame: 0,
            last_attention: None,
        })
    }

    pub fn max_slots(&self) -> usize {
        self.max_slots
    }

    pub fn conditions(&self) -> &ConditionSet {
        &self.conditions
    }

    pub fn next_frame(&self) -> usize {
        self.next_frame
    }

    /// Segment-relative index of the next appended frame.
    pub fn next_position(&self) -> usize {
        self.origin.map_or(0, |o| self.next_frame - o)
    }

    /// Global indices of retained frames, oldest first.
    pub fn retained_frames(&self) -> Vec<usize> {
        self.frames.iter().map(|e| e.frame).collect()
    }

    /// Roles in context order.
    pub fn roles(&self) -> Vec<SlotRole> {
        let mut out = vec![SlotRole::Reference, SlotRole::Garment];
        for e in &self.frames {
            out.push(if Some(e.frame) == self.origin {
                SlotRole::Sink
            } else {
                SlotRole::Rolling(e.frame)
            });
        }
        out
    }

    /// Condition slots plus retained frames.
    pub fn occupied_slots(&self) -> usize {
        2 + self.frames.len()
    }

    pub fn reference_kv(&self) -> &[LayerKv] {
        &self.reference
    }

    pub fn garment_kv(&self) -> &[LayerKv] {
        &self.garment
    }

    pub fn condition_tokens(&self) -> usize {
        self.reference[0].len() + self.garment[0].len()
    }

    pub fn context_tokens(&self) -> usize {
        self.condition_tokens() + self.frames.iter().map(|e| e.kv[0].len()).sum::<usize>()
    }

    /// Per-layer K/V in the order Reference, Garment, Sink, Rolling….
    pub fn context(&self) -> Result<KvContext> {
        (0..self.layers)
            .map(|l| {
                let mut parts = vec![&self.reference[l], &self.garment[l]];
                parts.extend(self.frames.iter().map(|e| &e.kv[l]));
                LayerKv::concat(&parts)
            })
            .collect()
    }

    /// Appends consecutive frames starting at [`KvCache::next_frame`] and evicts
    /// rolling entries outside the retention window.
    pub fn append_and_evict(&mut self, new_frames: Vec<(usize, Vec<LayerKv>)>) -> Result<()> {
        for (i, (frame, kv)) in new_frames.iter().enumerate() {
            if *frame != self.next_frame + i {
                return Err(Error::Cache(format!(
                    "expected frame {}, got {frame}",
                    self.next_frame + i
                )));
            }
            if kv.len() != self.layers {
                return Err(Error::Cache(format!(
                    "frame {frame} has {} layers, cache {}",
                    kv.len(),
                    self.layers
                )));
            }
        }
        for (frame, kv) in new_frames {
            self.origin.get_or_insert(frame);
            self.frames.push_back(FrameEntry { frame, kv });
            self.next_frame = frame + 1;
        }
        if let Some(o) = self.origin {
            let k = self.next_frame.saturating_sub(1);
            let lo = o + (k - o + 4).saturating_sub(self.max_slots).max(1);
            self.frames.retain(|e| e.frame == o || e.frame >= lo);
        }
        Ok(())
    }

    /// Replaces the garment condition and its K/V, leaving everything else untouched.
    pub fn garment_refresh(&mut self, garment: Tensor, backbone: &Backbone) -> Result<()> {
        if self.garment.is_empty() {
            return Err(Error::Cache("no garment slot".into()));
        }
        let cond = self.conditions.with_garment(garment)?;
        let kv = backbone.condition_kv(&cond)?;
        let (_, garment_kv) = split_conditions(&kv, self.reference[0].len())?;
        self.garment = garment_kv;
        self.conditions = cond;
        Ok(())
    }

    /// Removes the sink and every rolling frame.
    pub fn historical_withdraw(&mut self) {
        self.frames.clear();
        self.origin = None;
    }

    /// Decodes `last_frame` (flat latent of global frame `frame_index`), re-encodes
    /// its final pixel frame and installs it as the new reference.
    ///
    /// The garment K/V are recomputed as well: garment tokens attend the
    /// reference span, so their K/V depend on it.
    pub fn reference_disentangle(
        &mut self,
        last_frame: &[f64],
        frame_index: usize,
        codec: &Codec,
        backbone: &Backbone,
    ) -> Result<()> {
        if last_frame.is_empty() {
            return Err(Error::Cache(
                "no generated frame to disentangle from".into(),
            ));
        }
        let latent = codec.reencode_tail(last_frame, frame_index == 0)?;
        let cond = self.conditions.with_reference(latent.into_data())?;
        let kv = backbone.condition_kv(&cond)?;
        let (reference, garment) = split_conditions(&kv, self.reference[0].len())?;
        self.reference = reference;
        self.garment = garment;
        self.conditions = cond;
        Ok(())
    }

    /// Keeps the head-averaged attention of the latest incremental pass.
    pub fn record_attention(&mut self, attention: Vec<Tensor>) {
        self.last_attention = Some(attention);
    }

    pub fn attention_mass(&self) -> Result<AttentionMass> {
        let att = self
            .last_attention
            .as_ref()
            .ok_or_else(|| Error::Cache("no recorded attention".into()))?;
        attention_mass(att, self.condition_tokens(), self.context_tokens())
    }
}

fn split_conditions(kv: &[LayerKv], reference: usize) -> Result<(Vec<LayerKv>, Vec<LayerKv>)> {
    let mut r = Vec::with_capacity(kv.len());
    let mut g = Vec::with_capacity(kv.len());
    for l in kv {
        r.push(l.rows(0..reference)?);
        g.push(l.rows(reference..l.len())?);
    }
    Ok((r, g))
}

/// Average over layers and query rows of attention mass on the first
/// `conditional` columns, the following history columns up to `context`,
/// and the remaining intra-chunk columns.
pub fn attention_mass(
    attention: &[Tensor],
    conditional: usize,
    context: usize,
) -> Result<AttentionMass> {
    if attention.is_empty() {
        return Err(Error::Cache("no recorded attention".into()));
    }
    let mut acc = [0.0; 3];
    let mut rows = 0usize;
    for w in attention {
        if w.cols() < context {
            return Err(invalid("attention narrower than its context"));
        }
        for r in 0..w.rows() {
            let row = w.row(r);
            acc[0] += row[..conditional].iter().sum::<f64>();
            acc[1] += row[conditional..context].iter().sum::<f64>();
            acc[2] += row[context..].iter().sum::<f64>();
            rows += 1;
        }
    }
    let n = rows.max(1) as f64;
    Ok(AttentionMass {
        conditional: acc[0] / n,
        historical: acc[1] / n,
        intra: acc[2] / n,
    })
}

/// One line of the per-chunk cache trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub chunk: usize,
    pub retained: Vec<usize>,
    pub events: Vec<&'static str>,
    pub mass: Option<AttentionMass>,
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "chunk",
        "retained_frames",
        "events",
        "conditional_mass",
        "historical_mass",
    ])?;
    for r in rows {
        let retained: Vec<String> = r.retained.iter().map(ToString::to_string).collect();
        let (c, h) = match r.mass {
            Some(m) => (
                format!("{:.6}", m.conditional),
                format!("{:.6}", m.historical),
            ),
            None => (String::new(), String::new()),
        };
        out.write_record([
            r.chunk.to_string(),
            retained.join(" "),
            r.events.join("+"),
            c,
            h,
        ])?;
    }
    out.flush()?;
    Ok(())
}
