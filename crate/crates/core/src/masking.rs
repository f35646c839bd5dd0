//! Dense boolean attention masks over unified token sequences.
//!
//! Every sequence starts with a condition block: one null-context token and
//! the `P` reference tokens (the reference span), followed by the `P`
//! garment tokens. Inside the condition block attention is causal at span
//! granularity: reference → itself, garment → reference and itself.
//! Condition tokens never see video tokens.

use std::rc::Rc;

use crate::error::{invalid, shape_err, Result};

/// Token counts of the condition block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CondLayout {
    /// Null-context token plus reference tokens.
    pub reference: usize,
    pub garment: usize,
}

impl CondLayout {
    pub fn for_tokens(tokens_per_frame: usize) -> Self {
        Self {
            reference: 1 + tokens_per_frame,
            garment: tokens_per_frame,
        }
    }

    pub fn len(&self) -> usize {
        self.reference + self.garment
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `rows × cols` boolean matrix; `true` means attention is allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn denied(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![false; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.allowed[r * self.cols + c] = v;
    }

    fn allow_block(&mut self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) {
        for r in rows {
            for c in cols.clone() {
                self.set(r, c, true);
            }
        }
    }

    pub fn shared(&self) -> Rc<[bool]> {
        self.allowed.clone().into()
    }

    /// Sub-matrix on the given row and column indices.
    pub fn restrict(&self, rows: &[usize], cols: &[usize]) -> AttentionMask {
        let mut out = Self::denied(rows.len(), cols.len());
        for (i, &r) in rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                out.set(i, j, self.get(r, c));
            }
        }
        out
    }

    /// Appends `context` always-allowed columns in front of every row.
    pub fn with_context(&self, context: usize) -> AttentionMask {
        let mut out = Self::denied(self.rows, context + self.cols);
        for r in 0..self.rows {
            out.allow_block(r..r + 1, 0..context);
            for c in 0..self.cols {
                out.set(r, context + c, self.get(r, c));
            }
        }
        out
    }

    /// For square masks over a sequence of new tokens placed after
    /// `context` columns: every token must be allowed to see itself.
    pub fn check_self_attention(&self, context: usize) -> Result<()> {
        if self.cols != context + self.rows {
            return Err(shape_err(format!(
                "mask is {}×{}, expected {} context columns plus {} tokens",
                self.rows, self.cols, context, self.rows
            )));
        }
        if let Some(r) = (0..self.rows).find(|&r| !self.get(r, context + r)) {
            return Err(invalid(format!("token {r} may not attend itself")));
        }
        Ok(())
    }

    /// One line per row, `1` for allowed and `0` for masked.
    pub fn to_text_grid(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols + 1));
        for r in 0..self.rows {
            for c in 0..self.cols {
                s.push(if self.get(r, c) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text_grid(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        let cols = lines.first().map_or(0, |l| l.len());
        let mut out = Self::denied(lines.len(), cols);
        for (r, line) in lines.iter().enumerate() {
            if line.len() != cols {
                return Err(shape_err("ragged mask grid"));
            }
            for (c, ch) in line.chars().enumerate() {
                match ch {
                    '1' => out.set(r, c, true),
                    '0' => {}
                    other => return Err(invalid(format!("mask grid character {other:?}"))),
                }
            }
        }
        Ok(out)
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|v| **v).count()
    }
}

/// Causal-by-span mask over the condition block alone.
pub fn condition_mask(layout: CondLayout) -> AttentionMask {
    let mut m = AttentionMask::denied(layout.len(), layout.len());
    fill_conditions(&mut m, 0, layout);
    m
}

fn fill_conditions(m: &mut AttentionMask, at: usize, layout: CondLayout) {
    let r = at..at + layout.reference;
    let g = at + layout.reference..at + layout.len();
    m.allow_block(r.clone(), r.clone());
    m.allow_block(g.clone(), at..g.end);
}

/// Bidirectional teacher mask: `[conditions | video]`, video tokens see
/// everything, conditions see only their causal span.
pub fn teacher_mask(layout: CondLayout, video_tokens: usize) -> AttentionMask {
    let n = layout.len() + video_tokens;
    let mut m = AttentionMask::denied(n, n);
    fill_conditions(&mut m, 0, layout);
    m.allow_block(layout.len()..n, 0..n);
    m
}

/// Offsets of the teacher-forcing sequence
/// `[cond | clean frames | cond | noisy frames]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TfLayout {
    pub cond: CondLayout,
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub chunk: usize,
}

impl TfLayout {
    pub fn new(
        cond: CondLayout,
        frames: usize,
        tokens_per_frame: usize,
        chunk: usize,
    ) -> Result<Self> {
        if chunk == 0 || frames == 0 || !frames.is_multiple_of(chunk) {
            return Err(invalid(format!(
                "{frames} frames is not a positive multiple of chunk {chunk}"
            )));
        }
        Ok(Self {
            cond,
            frames,
            tokens_per_frame,
            chunk,
        })
    }

    fn video_len(&self) -> usize {
        self.frames * self.tokens_per_frame
    }

    pub fn clean_cond_start(&self) -> usize {
        0
    }

    pub fn clean_start(&self) -> usize {
        self.cond.len()
    }

    pub fn noisy_cond_start(&self) -> usize {
        self.clean_start() + self.video_len()
    }

    pub fn noisy_start(&self) -> usize {
        self.noisy_cond_start() + self.cond.len()
    }

    pub fn len(&self) -> usize {
        self.noisy_start() + self.video_len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chunks(&self) -> usize {
        self.frames / self.chunk
    }

    /// Token range of `frame` in the clean (or noisy) half.
    pub fn frame_tokens(&self, frame: usize, noisy: bool) -> std::ops::Range<usize> {
        let base = if noisy {
            self.noisy_start()
        } else {
            self.clean_start()
        };
        base + frame * self.tokens_per_frame..base + (frame + 1) * self.tokens_per_frame
    }

    pub fn chunk_frames(&self, chunk: usize) -> std::ops::Range<usize> {
        chunk * self.chunk..(chunk + 1) * self.chunk
    }
}

/// In-context teacher-forcing mask.
///
/// Layout `[cond | clean 0..f | cond | noisy 0..f]`:
/// - each condition pair is causal by span and sees nothing else;
/// - clean frame `i` sees the first condition pair and clean frames of
///   chunks up to and including its own;
/// - noisy frame `i` sees the second condition pair, clean frames of
///   strictly earlier chunks, and the noisy frames of its own chunk.
pub fn build_tf_mask(layout: &TfLayout) -> AttentionMask {
    let n = layout.len();
    let mut m = AttentionMask::denied(n, n);
    fill_conditions(&mut m, layout.clean_cond_start(), layout.cond);
    fill_conditions(&mut m, layout.noisy_cond_start(), layout.cond);
    let clean_conds = 0..layout.cond.len();
    let noisy_conds = layout.noisy_cond_start()..layout.noisy_start();
    for c in 0..layout.chunks() {
        let frames = layout.chunk_frames(c);
        let clean_rows = layout.frame_tokens(frames.start, false).start
            ..layout.frame_tokens(frames.end - 1, false).end;
        let noisy_rows = layout.frame_tokens(frames.start, true).start
            ..layout.frame_tokens(frames.end - 1, true).end;
        let history = layout.clean_start()..clean_rows.start;
        m.allow_block(clean_rows.clone(), clean_conds.clone());
        m.allow_block(clean_rows.clone(), layout.clean_start()..clean_rows.end);
        m.allow_block(noisy_rows.clone(), noisy_conds.clone());
        m.allow_block(noisy_rows.clone(), history);
        m.allow_block(noisy_rows.clone(), noisy_rows.clone());
    }
    m
}

/// Mask for streaming recomputation with a single condition pair:
/// `[cond | clean frames | noisy frames]`. Chunk `c` (clean or noisy)
/// sees the conditions, the clean frames listed by `retained(c)` and its
/// own chunk. Used to reproduce cached generation with one dense pass.
pub fn build_streaming_mask(
    cond: CondLayout,
    frames: usize,
    tokens_per_frame: usize,
    chunk: usize,
    retained: &dyn Fn(usize) -> Vec<usize>,
) -> Result<AttentionMask> {
    if chunk == 0 || !frames.is_multiple_of(chunk) {
        return Err(invalid("frames must be a multiple of chunk"));
    }
    let p = tokens_per_frame;
    let clean = cond.len();
    let noisy = clean + frames * p;
    let n = noisy + frames * p;
    let mut m = AttentionMask::denied(n, n);
    fill_conditions(&mut m, 0, cond);
    for c in 0..frames / chunk {
        let span = c * chunk * p..(c + 1) * chunk * p;
        for base in [clean, noisy] {
            let rows = base + span.start..base + span.end;
            m.allow_block(rows.clone(), 0..cond.len());
            for f in retained(c) {
                if f >= c * chunk {
                    return Err(invalid(format!("chunk {c} cannot retain frame {f}")));
                }
                m.allow_block(rows.clone(), clean + f * p..clean + (f + 1) * p);
            }
            m.allow_block(rows.clone(), rows.clone());
        }
    }
    Ok(m)
}

/// Rows for a new chunk during cached inference, over columns
/// `[conditions | retained history | new chunk]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferenceRows {
    pub cond: CondLayout,
    pub history_frames: usize,
    pub chunk: usize,
    pub tokens_per_frame: usize,
}

impl InferenceRows {
    pub fn context_tokens(&self) -> usize {
        self.cond.len() + self.history_frames * self.tokens_per_frame
    }

    pub fn chunk_tokens(&self) -> usize {
        self.chunk * self.tokens_per_frame
    }

    pub fn mask(&self) -> AttentionMask {
        AttentionMask::full(
            self.chunk_tokens(),
            self.context_tokens() + self.chunk_tokens(),
        )
    }

    /// Mask over the new chunk's own tokens only (context columns implied).
    pub fn chunk_mask(&self) -> AttentionMask {
        AttentionMask::full(self.chunk_tokens(), self.chunk_tokens())
    }
}

/// Inference row policy when `history_frames` clean frames are retained.
pub fn build_inference_mask(
    cond: CondLayout,
    history_frames: usize,
    chunk: usize,
    tokens_per_frame: usize,
) -> InferenceRows {
    InferenceRows {
        cond,
        history_frames,
        chunk,
        tokens_per_frame,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference construction from the rules, one (row, column) pair at a time.
    fn tf_reference(f: usize, p: usize, chunk: usize) -> AttentionMask {
        let cond = CondLayout::for_tokens(p);
        let cl = cond.len();
        let n = 2 * cl + 2 * f * p;
        let mut m = AttentionMask::denied(n, n);
        #[derive(Clone, Copy, PartialEq)]
        enum Kind {
            Ref(usize),
            Gar(usize),
            Clean(usize),
            Noisy(usize),
        }
        let kind = |i: usize| {
            let half = if i < cl + f * p { 0 } else { 1 };
            let j = i - half * (cl + f * p);
            if j < cond.reference {
                Kind::Ref(half)
            } else if j < cl {
                Kind::Gar(half)
            } else if half == 0 {
                Kind::Clean((j - cl) / p)
            } else {
                Kind::Noisy((j - cl) / p)
            }
        };
        for i in 0..n {
            for j in 0..n {
                let ok = match (kind(i), kind(j)) {
                    (Kind::Ref(a), Kind::Ref(b)) => a == b,
                    (Kind::Gar(a), Kind::Ref(b) | Kind::Gar(b)) => a == b,
                    (Kind::Ref(_) | Kind::Gar(_), _) => false,
                    (Kind::Clean(_), Kind::Ref(h) | Kind::Gar(h)) => h == 0,
                    (Kind::Clean(a), Kind::Clean(b)) => b / chunk <= a / chunk,
                    (Kind::Clean(_), Kind::Noisy(_)) => false,
                    (Kind::Noisy(_), Kind::Ref(h) | Kind::Gar(h)) => h == 1,
                    (Kind::Noisy(a), Kind::Clean(b)) => b / chunk < a / chunk,
                    (Kind::Noisy(a), Kind::Noisy(b)) => a / chunk == b / chunk,
                };
                m.set(i, j, ok);
            }
        }
        m
    }

    fn tf(f: usize, p: usize, chunk: usize) -> (TfLayout, AttentionMask) {
        let layout = TfLayout::new(CondLayout::for_tokens(p), f, p, chunk).unwrap();
        let m = build_tf_mask(&layout);
        (layout, m)
    }

    #[test]
    fn first_chunk_has_no_history() {
        let (layout, m) = tf(3, 1, 3);
        for r in layout.noisy_start()..layout.len() {
            let allowed: Vec<usize> = (0..layout.len()).filter(|&c| m.get(r, c)).collect();
            let expected: Vec<usize> = (layout.noisy_cond_start()..layout.len()).collect();
            assert_eq!(allowed, expected);
        }
    }

    #[test]
    fn second_chunk_sees_first_clean_chunk_only() {
        let (layout, m) = tf(6, 1, 3);
        assert_eq!(m, tf_reference(6, 1, 3));
        let row = layout.frame_tokens(4, true).start;
        for f in 0..3 {
            assert!(m.get(row, layout.frame_tokens(f, false).start));
            assert!(!m.get(row, layout.frame_tokens(f, true).start));
        }
        for f in 3..6 {
            assert!(!m.get(row, layout.frame_tokens(f, false).start));
            assert!(m.get(row, layout.frame_tokens(f, true).start));
        }
    }

    #[test]
    fn matches_reference_for_small_layouts() {
        for f in 1..=9 {
            for chunk in (1..=f).filter(|c| f % c == 0) {
                for p in 1..=3 {
                    assert_eq!(
                        tf(f, p, chunk).1,
                        tf_reference(f, p, chunk),
                        "f={f} chunk={chunk} p={p}"
                    );
                }
            }
        }
    }

    #[test]
    fn condition_rows_never_see_video() {
        let (layout, m) = tf(6, 2, 3);
        let cond_rows =
            (0..layout.clean_start()).chain(layout.noisy_cond_start()..layout.noisy_start());
        for r in cond_rows {
            for c in (layout.clean_start()..layout.noisy_cond_start())
                .chain(layout.noisy_start()..layout.len())
            {
                assert!(!m.get(r, c));
            }
        }
    }

    #[test]
    fn indivisible_frames_rejected() {
        assert!(TfLayout::new(CondLayout::for_tokens(1), 7, 1, 3).is_err());
    }

    #[test]
    fn inference_rows_are_tf_restrictions() {
        let p = 2;
        let (layout, m) = tf(9, p, 3);
        for k in 0..3 {
            let rows: Vec<usize> = (layout.frame_tokens(3 * k, true).start
                ..layout.frame_tokens(3 * k + 2, true).end)
                .collect();
            let mut cols: Vec<usize> = (layout.noisy_cond_start()..layout.noisy_start()).collect();
            cols.extend(layout.clean_start()..layout.frame_tokens(3 * k, false).start);
            cols.extend(rows.iter().copied());
            let inf = build_inference_mask(layout.cond, 3 * k, 3, p);
            assert_eq!(m.restrict(&rows, &cols), inf.mask());
        }
        let first = build_inference_mask(CondLayout::for_tokens(p), 0, 3, p);
        assert_eq!(first.context_tokens(), 1 + 2 * p);
        let second = build_inference_mask(CondLayout::for_tokens(p), 3, 3, p);
        assert_eq!(second.context_tokens(), 1 + 2 * p + 3 * p);
    }

    #[test]
    fn streaming_mask_with_full_history_is_single_pair_tf() {
        let p = 1;
        let cond = CondLayout::for_tokens(p);
        let s = build_streaming_mask(cond, 6, p, 3, &|c| (0..3 * c).collect()).unwrap();
        let (layout, m) = tf(6, p, 3);
        // Drop the duplicated condition pair and map the noisy rows onto it.
        let mut idx: Vec<usize> = (0..layout.noisy_cond_start()).collect();
        idx.extend(layout.noisy_start()..layout.len());
        let mut expect = m.restrict(&idx, &idx);
        for r in layout.noisy_cond_start()..expect.rows() {
            for c in 0..cond.len() {
                expect.set(r, c, true);
            }
        }
        assert_eq!(s, expect);
    }

    #[test]
    fn text_grid_round_trip() {
        let m = teacher_mask(CondLayout::for_tokens(1), 2);
        let grid = m.to_text_grid();
        assert_eq!(grid.lines().next().unwrap(), "11000");
        assert_eq!(grid.lines().last().unwrap(), "11111");
        assert_eq!(AttentionMask::from_text_grid(&grid).unwrap(), m);
    }

    #[test]
    fn self_attention_check() {
        let m = condition_mask(CondLayout::for_tokens(2)).with_context(3);
        m.check_self_attention(3).unwrap();
        let mut bad = AttentionMask::full(2, 2);
        bad.set(1, 1, false);
        assert!(bad.check_self_attention(0).is_err());
    }
}
