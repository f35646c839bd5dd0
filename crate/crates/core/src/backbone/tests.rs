use super::*;
use crate::masking::{build_streaming_mask, teacher_mask, TfLayout};
use crate::oracle::dense_forward;

fn small() -> (Backbone, Rng) {
    let mut rng = Rng::new(11);
    let b = Backbone::new(
        BackboneConfig {
            tokens: 2,
            channels: 4,
            ..Default::default()
        },
        &mut rng,
    )
    .unwrap();
    (b, rng)
}

fn conds(b: &Backbone, rng: &mut Rng) -> ConditionSet {
    let (p, c) = (b.config().tokens, b.config().channels);
    ConditionSet::new(
        Tensor::randn(&[p, c], 1.0, rng),
        Tensor::randn(&[p, c], 1.0, rng),
    )
    .unwrap()
}

fn frames(
    seq: &mut UnifiedSequence,
    b: &Backbone,
    range: std::ops::Range<usize>,
    t: f64,
    rng: &mut Rng,
) {
    let (p, c) = (b.config().tokens, b.config().channels);
    for i in range {
        seq.push_frame(i, Tensor::randn(&[p, c], 1.0, rng), t)
            .unwrap();
    }
}

fn max_diff(a: &Tensor, b: &[Vec<f64>]) -> f64 {
    let flat: Vec<f64> = b.iter().flatten().copied().collect();
    a.data()
        .iter()
        .zip(&flat)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn matches_loop_oracle_under_teacher_and_diagonal_masks() {
    let (b, mut rng) = small();
    let mut seq = UnifiedSequence::conditions(&conds(&b, &mut rng));
    frames(&mut seq, &b, 0..3, 0.6, &mut rng);
    let layout = b.config().cond_layout();
    let n = seq.len();
    let mut diag = AttentionMask::denied(n, n);
    for i in 0..n {
        diag.set(i, i, true);
    }
    for mask in [teacher_mask(layout, 3 * b.config().tokens), diag] {
        let fast = b.forward(&seq, &mask).unwrap();
        let slow = dense_forward(&b, &seq, &mask);
        assert!(max_diff(&fast.pred, &slow.pred) < 1e-12);
        for l in 0..b.config().layers {
            assert!(max_diff(&fast.kv[l].keys, &slow.keys[l]) < 1e-12);
            assert!(max_diff(&fast.kv[l].values, &slow.values[l]) < 1e-12);
        }
    }
}

#[test]
fn diagonal_mask_puts_all_weight_on_self() {
    let (b, mut rng) = small();
    let mut seq = UnifiedSequence::conditions(&conds(&b, &mut rng));
    frames(&mut seq, &b, 0..1, 0.3, &mut rng);
    let n = seq.len();
    let mut diag = AttentionMask::denied(n, n);
    for i in 0..n {
        diag.set(i, i, true);
    }
    let out = b.forward(&seq, &diag).unwrap();
    for w in &out.attention {
        for i in 0..n {
            for j in 0..n {
                assert_eq!(w.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }
}

#[test]
fn full_and_block_causal_masks_differ() {
    let (b, mut rng) = small();
    let layout = b.config().cond_layout();
    let mut seq = UnifiedSequence::conditions(&conds(&b, &mut rng));
    frames(&mut seq, &b, 0..3, 0.5, &mut rng);
    // Conditions + clean half of the streaming mask: span-causal conditions.
    let causal = build_streaming_mask(layout, 3, b.config().tokens, 3, &|_| vec![]).unwrap();
    let idx: Vec<usize> = (0..seq.len()).collect();
    let a = b.forward(&seq, &causal.restrict(&idx, &idx)).unwrap().pred;
    let full = b
        .forward(&seq, &AttentionMask::full(seq.len(), seq.len()))
        .unwrap()
        .pred;
    assert!(a.max_abs_diff(&full) > 1e-6);
}

#[test]
fn masked_pairs_get_exactly_zero_weight() {
    let (b, mut rng) = small();
    let mut seq = UnifiedSequence::conditions(&conds(&b, &mut rng));
    frames(&mut seq, &b, 0..3, 0.9, &mut rng);
    let mask = teacher_mask(b.config().cond_layout(), 3 * b.config().tokens);
    let out = b.forward(&seq, &mask).unwrap();
    for w in &out.attention {
        for i in 0..mask.rows() {
            for j in 0..mask.cols() {
                if !mask.get(i, j) {
                    assert!(w.get(i, j) < 1e-300);
                }
            }
        }
    }
}

#[test]
fn condition_kv_is_deterministic_and_causal() {
    let (b, mut rng) = small();
    let c = conds(&b, &mut rng);
    let a1 = b.condition_kv(&c).unwrap();
    let a2 = b.condition_kv(&c).unwrap();
    assert_eq!(a1, a2);
    let swapped = c
        .with_garment(Tensor::randn(c.garment.shape(), 1.0, &mut rng))
        .unwrap();
    let s = b.condition_kv(&swapped).unwrap();
    let r = b.config().cond_layout().reference;
    for l in 0..b.config().layers {
        assert_eq!(a1[l].rows(0..r).unwrap(), s[l].rows(0..r).unwrap());
        assert_ne!(
            a1[l].rows(r..a1[l].len()).unwrap(),
            s[l].rows(r..s[l].len()).unwrap()
        );
    }
}

#[test]
fn condition_kv_matches_teacher_forcing_condition_blocks() {
    let (b, mut rng) = small();
    let c = conds(&b, &mut rng);
    let p = b.config().tokens;
    let layout = TfLayout::new(b.config().cond_layout(), 6, p, 3).unwrap();
    let mut seq = UnifiedSequence::conditions(&c);
    frames(&mut seq, &b, 0..6, 0.0, &mut rng);
    seq.push_conditions(&c);
    frames(&mut seq, &b, 0..6, 0.7, &mut rng);
    let out = b
        .forward(&seq, &crate::masking::build_tf_mask(&layout))
        .unwrap();
    let kv = b.condition_kv(&c).unwrap();
    let cl = layout.cond.len();
    for l in 0..b.config().layers {
        for start in [0, layout.noisy_cond_start()] {
            let block = out.kv[l].rows(start..start + cl).unwrap();
            assert!(block.keys.max_abs_diff(&kv[l].keys) < 1e-12);
            assert!(block.values.max_abs_diff(&kv[l].values) < 1e-12);
        }
    }
}

#[test]
fn incremental_matches_full_recompute() {
    let (b, mut rng) = small();
    let c = conds(&b, &mut rng);
    let p = b.config().tokens;
    let layout = b.config().cond_layout();
    let mut ctx = b.condition_kv(&c).unwrap();
    let mut clean = Vec::new();
    let mut noisy = Vec::new();
    for chunk in 0..3 {
        let mut clean_seq = UnifiedSequence::new();
        let mut noisy_seq = UnifiedSequence::new();
        frames(&mut clean_seq, &b, 3 * chunk..3 * chunk + 3, 0.0, &mut rng);
        frames(&mut noisy_seq, &b, 3 * chunk..3 * chunk + 3, 0.5, &mut rng);
        let inc = b
            .forward_incremental(
                &noisy_seq,
                &ctx,
                &AttentionMask::full(3 * p, ctx[0].len() + 3 * p),
            )
            .unwrap();

        let mut full = UnifiedSequence::conditions(&c);
        for s in clean.iter().chain(std::iter::once(&clean_seq)) {
            for blk in UnifiedSequence::blocks(s) {
                full.push_frame(
                    match blk.role {
                        TokenRole::Frame(i) => i,
                        _ => unreachable!(),
                    },
                    blk.latents.clone(),
                    0.0,
                )
                .unwrap();
            }
        }
        for s in noisy.iter().chain(std::iter::once(&noisy_seq)) {
            for blk in UnifiedSequence::blocks(s) {
                full.push_frame(
                    match blk.role {
                        TokenRole::Frame(i) => i,
                        _ => unreachable!(),
                    },
                    blk.latents.clone(),
                    0.5,
                )
                .unwrap();
            }
        }
        let frames_so_far = 3 * (chunk + 1);
        let mask =
            build_streaming_mask(layout, frames_so_far, p, 3, &|k| (0..3 * k).collect()).unwrap();
        let dense = b.forward(&full, &mask).unwrap();
        let rows = dense
            .pred
            .slice_rows(dense.pred.rows() - 3 * p, 3 * p)
            .unwrap();
        assert!(rows.max_abs_diff(&inc.pred) < 1e-10, "chunk {chunk}");

        let re = b
            .forward_incremental(
                &clean_seq,
                &ctx,
                &AttentionMask::full(3 * p, ctx[0].len() + 3 * p),
            )
            .unwrap();
        for l in 0..b.config().layers {
            ctx[l] = LayerKv::concat(&[&ctx[l], &re.kv[l]]).unwrap();
        }
        clean.push(clean_seq);
        noisy.push(noisy_seq);
    }
}

#[test]
fn permuting_heads_leaves_output_unchanged() {
    let (b, mut rng) = small();
    let mut seq = UnifiedSequence::conditions(&conds(&b, &mut rng));
    frames(&mut seq, &b, 0..3, 0.4, &mut rng);
    let mask = teacher_mask(b.config().cond_layout(), 3 * b.config().tokens);
    let base = b.forward(&seq, &mask).unwrap();
    let mut permuted = b.clone();
    let dk = b.config().head_dim;
    let perm = |t: &Tensor, cols: bool| {
        let mut out = t.clone();
        for r in 0..t.rows() {
            for c in 0..t.cols() {
                let (rr, cc) = if cols {
                    (r, (c + dk) % (2 * dk))
                } else {
                    ((r + dk) % (2 * dk), c)
                };
                out.set(rr, cc, t.get(r, c));
            }
        }
        out
    };
    for l in 0..b.config().layers {
        for w in ["q", "k", "v"] {
            let name = format!("layers.{l}.attn.{w}");
            let t = perm(&b.params()[&name], true);
            permuted.params_mut().insert(name, t);
        }
        let name = format!("layers.{l}.attn.o");
        let t = perm(&b.params()[&name], false);
        permuted.params_mut().insert(name, t);
    }
    let out = permuted.forward(&seq, &mask).unwrap();
    assert!(out.pred.max_abs_diff(&base.pred) < 1e-12);
    let swapped = perm(&base.kv[0].keys, true);
    assert!(out.kv[0].keys.max_abs_diff(&swapped) < 1e-12);
}

#[test]
fn checkpoint_round_trip() {
    let (b, _) = small();
    let ck = b.to_checkpoint("student");
    assert_eq!(Backbone::from_checkpoint(&ck, "student").unwrap(), b);
    assert!(Backbone::from_checkpoint(&ck, "teacher").is_err());
}

#[test]
fn rejects_mismatched_mask_and_context() {
    let (b, mut rng) = small();
    let seq = UnifiedSequence::conditions(&conds(&b, &mut rng));
    assert!(b.forward(&seq, &AttentionMask::full(3, 3)).is_err());
    let ctx = vec![LayerKv::empty(b.config().d_model())];
    assert!(b
        .forward_incremental(&seq, &ctx, &AttentionMask::full(seq.len(), seq.len()))
        .is_err());
}
