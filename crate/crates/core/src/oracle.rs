//! Independent reference implementations used to cross-check the fast paths.
//!
//! Everything here is written with explicit loops over plain `f64` slices
//! and shares no arithmetic with the tape or the cache code.

use std::collections::BTreeSet;

use crate::backbone::{Backbone, TokenRole, UnifiedSequence};
use crate::masking::AttentionMask;

fn mat(b: &Backbone, name: &str) -> (Vec<f64>, usize, usize) {
    let t = &b.params()[name];
    (t.data().to_vec(), t.rows(), t.cols())
}

fn matmul(x: &[Vec<f64>], w: &(Vec<f64>, usize, usize)) -> Vec<Vec<f64>> {
    let (data, rows, cols) = w;
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), *rows);
            let mut out = vec![0.0; *cols];
            for (i, xv) in row.iter().enumerate() {
                for j in 0..*cols {
                    out[j] += xv * data[i * cols + j];
                }
            }
            out
        })
        .collect()
}

fn add_bias(x: &mut [Vec<f64>], b: &(Vec<f64>, usize, usize)) {
    for row in x.iter_mut() {
        for (v, bv) in row.iter_mut().zip(&b.0) {
            *v += bv;
        }
    }
}

fn layer_norm(
    x: &[Vec<f64>],
    g: &(Vec<f64>, usize, usize),
    b: &(Vec<f64>, usize, usize),
) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let s = (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / s * g.0[i] + b.0[i])
                .collect()
        })
        .collect()
}

fn sin_embed(x: f64, d: usize, base: f64) -> Vec<f64> {
    (0..d)
        .map(|k| {
            let w = 1.0 / base.powf((k - k % 2) as f64 / d as f64);
            if k % 2 == 0 {
                (x * w).sin()
            } else {
                (x * w).cos()
            }
        })
        .collect()
}

/// Result of [`dense_forward`].
pub struct DenseOut {
    /// Predictions for video tokens in sequence order.
    pub pred: Vec<Vec<f64>>,
    /// Per layer, keys and values for every token.
    pub keys: Vec<Vec<Vec<f64>>>,
    pub values: Vec<Vec<Vec<f64>>>,
}

/// Full masked forward pass with explicit loops over a square `mask`.
pub fn dense_forward(b: &Backbone, seq: &UnifiedSequence, mask: &AttentionMask) -> DenseOut {
    let cfg = *b.config();
    let (p, d) = (cfg.tokens, cfg.d_model());
    let slots = mat(b, "embed.slots");
    let w_in = mat(b, "embed.in.w");
    let b_in = mat(b, "embed.in.b");
    let w_t = mat(b, "embed.time.w");
    let b_t = mat(b, "embed.time.b");

    let mut lat = Vec::new();
    let mut slot_ix = Vec::new();
    let mut time = Vec::new();
    let mut frame = Vec::new();
    let mut video = Vec::new();
    for block in seq.blocks() {
        let te = sin_embed(1000.0 * block.t, d, 10_000.0);
        let base = match block.role {
            TokenRole::Reference => {
                lat.push(vec![0.0; cfg.channels]);
                slot_ix.push(0);
                time.push(te.clone());
                frame.push(vec![0.0; d]);
                1
            }
            TokenRole::Garment => 1 + p,
            TokenRole::Frame(i) => 1 + 2 * p + p * (i % cfg.chunk),
        };
        for j in 0..p {
            if block.role.is_video() {
                video.push(lat.len());
            }
            lat.push(block.latents.row(j).to_vec());
            slot_ix.push(base + j);
            time.push(te.clone());
            frame.push(match block.role {
                TokenRole::Frame(i) => sin_embed(i as f64, d, 200.0),
                _ => vec![0.0; d],
            });
        }
    }
    let n = lat.len();
    assert_eq!((mask.rows(), mask.cols()), (n, n));

    let mut x = matmul(&lat, &w_in);
    add_bias(&mut x, &b_in);
    let mut t = matmul(&time, &w_t);
    add_bias(&mut t, &b_t);
    for i in 0..n {
        for k in 0..d {
            x[i][k] += slots.0[slot_ix[i] * d + k] + t[i][k] + frame[i][k];
        }
    }

    let mut keys = Vec::new();
    let mut values = Vec::new();
    for l in 0..cfg.layers {
        let m = |s: &str| mat(b, &format!("layers.{l}.{s}"));
        let a = layer_norm(&x, &m("norm1.gain"), &m("norm1.bias"));
        let q = matmul(&a, &m("attn.q"));
        let k = matmul(&a, &m("attn.k"));
        let v = matmul(&a, &m("attn.v"));
        let mut heads = vec![vec![0.0; d]; n];
        for h in 0..cfg.heads {
            let cols = h * cfg.head_dim..(h + 1) * cfg.head_dim;
            for i in 0..n {
                let mut logits = vec![f64::NEG_INFINITY; n];
                for j in 0..n {
                    if mask.get(i, j) {
                        let dot: f64 = cols.clone().map(|c| q[i][c] * k[j][c]).sum();
                        logits[j] = dot / (cfg.head_dim as f64).sqrt();
                    }
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits
                    .iter()
                    .map(|z| if z.is_finite() { (z - mx).exp() } else { 0.0 })
                    .collect();
                let z: f64 = e.iter().sum();
                for j in 0..n {
                    for c in cols.clone() {
                        heads[i][c] += e[j] / z * v[j][c];
                    }
                }
            }
        }
        let o = matmul(&heads, &m("attn.o"));
        for i in 0..n {
            for c in 0..d {
                x[i][c] += o[i][c];
            }
        }
        let a2 = layer_norm(&x, &m("norm2.gain"), &m("norm2.bias"));
        let mut hdn = matmul(&a2, &m("mlp.w1"));
        add_bias(&mut hdn, &m("mlp.b1"));
        for row in hdn.iter_mut() {
            for v in row.iter_mut() {
                *v /= 1.0 + (-*v).exp();
            }
        }
        let mut y = matmul(&hdn, &m("mlp.w2"));
        add_bias(&mut y, &m("mlp.b2"));
        for i in 0..n {
            for c in 0..d {
                x[i][c] += y[i][c];
            }
        }
        keys.push(k);
        values.push(v);
    }
    let xv: Vec<Vec<f64>> = video.iter().map(|&i| x[i].clone()).collect();
    let mut pred = matmul(
        &layer_norm(&xv, &mat(b, "out.norm.gain"), &mat(b, "out.norm.bias")),
        &mat(b, "out.w"),
    );
    add_bias(&mut pred, &mat(b, "out.b"));
    DenseOut { pred, keys, values }
}

/// Frames retained by the cache after frame `k` is appended, straight from
/// the retention formula: the sink frame plus `max(1, k − M + 4) ..= k`.
/// The result does not include the two condition slots.
pub fn retained_frames(k: usize, m: usize) -> BTreeSet<usize> {
    let lo = (k as i64 - m as i64 + 4).max(1) as usize;
    let mut s: BTreeSet<usize> = (lo..=k).collect();
    s.insert(0);
    s
}
