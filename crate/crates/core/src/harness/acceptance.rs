//! The acceptance suite: ten pass/fail checks with measured runtimes.

use std::fmt;
use std::time::Instant;

use crate::backbone::{
    Backbone, BackboneConfig, ConditionSet, KvContext, LayerKv, UnifiedSequence,
};
use crate::codec::LatentSequence;
use crate::distill::{
    gaussian_dmd_run, reweight, teacher_forcing_step, GaussianOracle, GaussianRunConfig, TfSample,
};
use crate::error::Result;
use crate::flow::{cfm_loss, NoisePlan};
use crate::kvcache::KvCache;
use crate::masking::{
    build_inference_mask, build_streaming_mask, build_tf_mask, condition_mask, AttentionMask,
    CondLayout, TfLayout,
};
use crate::optim::{AdamConfig, AdamW};
use crate::oracle::retained_frames;
use crate::session::{chunk_sequence, clean_chunk_kv, Session};
use crate::tensor::{finite_diff_check, Rng, Tape, Tensor};

use super::metrics::segment_garment_error;
use super::pipeline::{train_all, Trained};
use super::switch::{run_script, session_config, switch_study, SwitchMode};
use super::HarnessConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:>2} {} ({:.2}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.seconds,
            self.detail
        )
    }
}

/// Runs `check`, failing it on error or when it takes longer than `limit` seconds.
fn timed(
    id: u8,
    name: &'static str,
    limit: Option<f64>,
    check: impl FnOnce() -> Result<(bool, String)>,
) -> Outcome {
    let start = Instant::now();
    let result = check();
    let seconds = start.elapsed().as_secs_f64();
    let (mut passed, mut detail) = match result {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    if let Some(limit) = limit {
        if seconds > limit {
            passed = false;
            detail.push_str(&format!("; over the {limit}s budget"));
        }
    }
    Outcome {
        id,
        name,
        passed,
        detail,
        seconds,
    }
}

fn tiny_backbone(tokens: usize, channels: usize, rng: &mut Rng) -> Result<Backbone> {
    Backbone::new(
        BackboneConfig {
            layers: 2,
            heads: 2,
            head_dim: 4,
            tokens,
            channels,
            chunk: 3,
            mlp_ratio: 2,
        },
        rng,
    )
}

fn random_conditions(tokens: usize, channels: usize, rng: &mut Rng) -> Result<ConditionSet> {
    ConditionSet::new(
        Tensor::randn(&[tokens, channels], 1.0, rng),
        Tensor::randn(&[tokens, channels], 1.0, rng),
    )
}

pub fn cache_policy() -> Outcome {
    timed(1, "cache-policy exactness", Some(1.0), || {
        let mut rng = Rng::new(1);
        let b = tiny_backbone(1, 2, &mut rng)?;
        let mut mismatches = 0;
        for m in [7, 11, 23] {
            let mut cache = KvCache::new(m, &b, random_conditions(1, 2, &mut rng)?)?;
            let d = b.config().d_model();
            let kv = |f: usize| -> Vec<LayerKv> {
                (0..b.config().layers)
                    .map(|_| LayerKv {
                        keys: Tensor::filled(&[1, d], f as f64),
                        values: Tensor::filled(&[1, d], -(f as f64)),
                    })
                    .collect()
            };
            cache.append_and_evict(vec![(0, kv(0))])?;
            for k in 1..=200 {
                cache.append_and_evict(vec![(k, kv(k))])?;
                let expect: Vec<usize> = retained_frames(k, m).into_iter().collect();
                if cache.retained_frames() != expect || cache.occupied_slots() > m {
                    mismatches += 1;
                }
            }
        }
        Ok((
            mismatches == 0,
            format!("{mismatches} mismatching (M, k) pairs out of 600"),
        ))
    })
}

/// Largest gap between cached chunk-by-chunk predictions and one dense pass
/// over the whole rollout under the equivalent mask.
pub fn incremental_gap(seed: u64, chunks: usize, max_slots: usize) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let (p, c) = (2, 4);
    let b = tiny_backbone(p, c, &mut rng)?;
    let chunk = b.config().chunk;
    let cond = random_conditions(p, c, &mut rng)?;
    let mut cache = KvCache::new(max_slots, &b, cond.clone())?;
    let mut clean = Vec::new();
    let mut noisy = Vec::new();
    let mut preds = Vec::new();
    let mut retained = Vec::new();
    for _ in 0..chunks {
        let context: KvContext = cache.context()?;
        let first = cache.next_position();
        retained.push(cache.retained_frames());
        let z = Tensor::randn(&[chunk * p, c], 1.0, &mut rng);
        let n = z.rows();
        let mask = AttentionMask::full(n, context[0].len() + n);
        let out = b.forward_incremental(&chunk_sequence(&z, first, p, 0.5)?, &context, &mask)?;
        preds.push(out.pred);
        let x = Tensor::randn(&[chunk * p, c], 1.0, &mut rng);
        let kv = clean_chunk_kv(&b, &context, first, &x)?;
        let f0 = cache.next_frame();
        cache.append_and_evict(
            kv.into_iter()
                .enumerate()
                .map(|(j, k)| (f0 + j, k))
                .collect(),
        )?;
        clean.push(x);
        noisy.push(z);
    }

    let frames = chunks * chunk;
    let mut seq = UnifiedSequence::conditions(&cond);
    for (t, parts) in [(0.0, &clean), (0.5, &noisy)] {
        for (k, x) in parts.iter().enumerate() {
            for j in 0..chunk {
                seq.push_frame(k * chunk + j, x.slice_rows(j * p, p)?, t)?;
            }
        }
    }
    let mask = build_streaming_mask(b.config().cond_layout(), frames, p, chunk, &|k| {
        retained[k].clone()
    })?;
    let dense = b.forward(&seq, &mask)?.pred;
    let mut worst = 0.0f64;
    for (k, pred) in preds.iter().enumerate() {
        let rows = dense.slice_rows((frames + k * chunk) * p, chunk * p)?;
        worst = worst.max(rows.max_abs_diff(pred));
    }
    Ok(worst)
}

pub fn incremental_equivalence() -> Outcome {
    timed(
        2,
        "incremental/full attention equivalence",
        Some(30.0),
        || {
            let mut worst = 0.0f64;
            for seed in 0..50 {
                worst = worst.max(incremental_gap(seed, 10, 11)?);
            }
            Ok((
                worst <= 1e-10,
                format!("max |incremental − full| = {worst:.3e} over 50 rollouts of 10 chunks"),
            ))
        },
    )
}

/// Worst relative finite-difference error over every parameter of both losses.
pub fn gradient_error(config: BackboneConfig, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let model = Backbone::new(config, &mut rng)?;
    let (p, c) = (config.tokens, config.channels);
    let frames = 2 * config.chunk;
    let z0 = LatentSequence::clean(Tensor::randn(&[frames * p, c], 1.0, &mut rng), p)?;
    let cond = random_conditions(p, c, &mut rng)?;
    let t: Vec<f64> = (0..frames).map(|_| 0.05 + 0.9 * rng.uniform()).collect();
    let plan = NoisePlan::sample(t, p, c, &mut rng);
    let tf = TfSample::draw(z0.clone(), cond.clone(), config.chunk, &mut rng)?;

    let cfm = cfm_loss(&model, &z0, &cond, &plan)?;
    let tfg = teacher_forcing_step(&model, &tf)?;
    let mut worst = 0.0f64;
    for (name, params) in model.params().iter() {
        let probe = |p: &Tensor| {
            let mut m = model.clone();
            m.params_mut().insert(name.clone(), p.clone());
            m
        };
        worst = worst.max(finite_diff_check(
            |p| cfm_loss(&probe(p), &z0, &cond, &plan).map_or(f64::NAN, |l| l.loss),
            &cfm.grads[name],
            params,
            1e-5,
        )?);
        worst = worst.max(finite_diff_check(
            |p| teacher_forcing_step(&probe(p), &tf).map_or(f64::NAN, |l| l.loss),
            &tfg.grads[name],
            params,
            1e-5,
        )?);
    }
    Ok(worst)
}

pub fn gradient_integrity() -> Outcome {
    timed(3, "gradient integrity", Some(120.0), || {
        let configs = [
            BackboneConfig {
                layers: 1,
                heads: 2,
                head_dim: 4,
                tokens: 2,
                channels: 4,
                chunk: 3,
                mlp_ratio: 2,
            },
            BackboneConfig {
                layers: 2,
                heads: 1,
                head_dim: 6,
                tokens: 1,
                channels: 3,
                chunk: 2,
                mlp_ratio: 2,
            },
            BackboneConfig {
                layers: 1,
                heads: 2,
                head_dim: 3,
                tokens: 3,
                channels: 2,
                chunk: 1,
                mlp_ratio: 3,
            },
        ];
        let mut errs = Vec::new();
        for (i, cfg) in configs.into_iter().enumerate() {
            errs.push(gradient_error(cfg, 100 + i as u64)?);
        }
        let worst = errs.iter().copied().fold(0.0, f64::max);
        Ok((
            worst <= 1e-4,
            format!(
                "worst relative error {worst:.2e} (per config: {})",
                errs.iter()
                    .map(|e| format!("{e:.1e}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        ))
    })
}

pub fn gaussian_oracle() -> Outcome {
    timed(4, "Gaussian distillation oracle", Some(60.0), || {
        let cfg = GaussianRunConfig::default();
        let vanilla = gaussian_dmd_run(GaussianOracle::new(2.0, 1.0, 1.0, 0.0)?, &cfg)?;
        let (a, b) = vanilla.last();
        let converged = (b - 2.0).abs() <= 0.02 && (a.abs() - 1.0).abs() <= 0.02;

        let fixed = gaussian_dmd_run(
            GaussianOracle::new(2.0, 1.0, 1.0, 2.0)?,
            &GaussianRunConfig {
                steps: 1000,
                ..Default::default()
            },
        )?;
        let drift = fixed
            .trajectory
            .iter()
            .map(|(a, b)| (a - 1.0).abs().max((b - 2.0).abs()))
            .fold(0.0, f64::max);

        let flat = |_: f64| 0.3;
        let weighted = gaussian_dmd_run(
            GaussianOracle::new(2.0, 1.0, 1.0, 0.0)?,
            &GaussianRunConfig {
                reward: Some((&flat, 0.2)),
                ..Default::default()
            },
        )?;
        let gap = vanilla
            .trajectory
            .iter()
            .zip(&weighted.trajectory)
            .map(|(v, w)| (v.0 - w.0).abs().max((v.1 - w.1).abs()))
            .fold(0.0, f64::max);
        Ok((
            converged && drift <= 1e-6 && gap <= 1e-12,
            format!(
                "(a, b) = ({a:.4}, {b:.4}) after 5000 steps; fixed-point drift {drift:.1e}; \
                 equal-reward gap {gap:.1e}"
            ),
        ))
    })
}

pub fn reweighting_law() -> Outcome {
    timed(5, "reweighting law", None, || {
        let mut rng = Rng::new(5);
        let (mut sum_err, mut shift_err, mut uniform_err) = (0.0f64, 0.0f64, 0.0f64);
        let mut monotone = true;
        for _ in 0..500 {
            let n = 1 + rng.below(16);
            let r: Vec<f64> = (0..n).map(|_| 6.0 * rng.uniform() - 3.0).collect();
            let tau = 0.1 + 10.0 * rng.uniform();
            let w = reweight(&r, tau)?;
            sum_err = sum_err.max((w.iter().sum::<f64>() - 1.0).abs());
            let shift = 20.0 * rng.uniform() - 10.0;
            let moved: Vec<f64> = r.iter().map(|v| v + shift).collect();
            let ws = reweight(&moved, tau)?;
            for (a, b) in w.iter().zip(&ws) {
                shift_err = shift_err.max((a - b).abs());
            }
            for i in 0..n {
                for j in 0..n {
                    if r[i] < r[j] && w[i] <= w[j] {
                        monotone = false;
                    }
                }
            }
            // |w_i − 1/n| ≈ |r_i − r̄| / (n τ): the limit is checked on the
            // spot example's reward scale, [0, 2].
            let unit: Vec<f64> = r.iter().map(|v| (v + 3.0) / 3.0).collect();
            let wu = reweight(&unit, 1e6)?;
            for v in wu {
                uniform_err = uniform_err.max((v - 1.0 / n as f64).abs());
            }
        }
        let spot = reweight(&[0.0, 1.0, 2.0], 1.0)?;
        let spot_err = spot
            .iter()
            .zip([0.66524, 0.24473, 0.09003])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        Ok((
            sum_err <= 1e-12
                && shift_err <= 1e-12
                && monotone
                && uniform_err <= 1e-6
                && spot_err <= 1e-5,
            format!(
                "sum {sum_err:.1e}, shift {shift_err:.1e}, monotone {monotone}, \
                 uniform {uniform_err:.1e}, spot [{:.5}, {:.5}, {:.5}]",
                spot[0], spot[1], spot[2]
            ),
        ))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Token {
    Reference(usize),
    Garment(usize),
    Clean(usize),
    Noisy(usize),
}

/// Role of position `i` in `[cond | clean | cond | noisy]`, worked out from
/// the counts alone.
fn tf_token(cond: CondLayout, frames: usize, p: usize, i: usize) -> Token {
    let half_len = cond.len() + frames * p;
    let (half, j) = (i / half_len, i % half_len);
    if j < cond.reference {
        Token::Reference(half)
    } else if j < cond.len() {
        Token::Garment(half)
    } else if half == 0 {
        Token::Clean((j - cond.len()) / p)
    } else {
        Token::Noisy((j - cond.len()) / p)
    }
}

/// Violations of each mask property, by name.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MaskViolations {
    pub leak: usize,
    pub isolation: usize,
    pub conditions: usize,
    pub inference: usize,
}

impl MaskViolations {
    fn total(&self) -> usize {
        self.leak + self.isolation + self.conditions + self.inference
    }

    fn add(&mut self, o: MaskViolations) {
        self.leak += o.leak;
        self.isolation += o.isolation;
        self.conditions += o.conditions;
        self.inference += o.inference;
    }
}

pub fn check_tf_mask(frames: usize, chunk: usize, p: usize) -> Result<MaskViolations> {
    let cond = CondLayout::for_tokens(p);
    let layout = TfLayout::new(cond, frames, p, chunk)?;
    let m = build_tf_mask(&layout);
    let n = layout.len();
    let mut v = MaskViolations::default();
    let ck = |f: usize| f / chunk;
    for i in 0..n {
        for j in 0..n {
            let allowed = m.get(i, j);
            let (a, b) = (tf_token(cond, frames, p, i), tf_token(cond, frames, p, j));
            use Token::*;
            match (a, b) {
                // Clean rows may not see their own or any later chunk of noise,
                // nor clean frames of later chunks.
                (Clean(_), Noisy(_))
                | (Noisy(_), Clean(_))
                | (Noisy(_), Noisy(_))
                | (Clean(_), Clean(_)) => {
                    let expect = match (a, b) {
                        (Clean(x), Clean(y)) => ck(y) <= ck(x),
                        (Noisy(x), Clean(y)) => ck(y) < ck(x),
                        (Noisy(x), Noisy(y)) => ck(y) == ck(x),
                        _ => false,
                    };
                    if allowed != expect {
                        match (a, b) {
                            (Clean(_), Noisy(_)) | (Noisy(_), Noisy(_)) => v.isolation += 1,
                            _ => v.leak += 1,
                        }
                    }
                }
                (Reference(_) | Garment(_), Clean(_) | Noisy(_)) => {
                    v.conditions += usize::from(allowed)
                }
                (Reference(x), Reference(y)) => v.conditions += usize::from(allowed != (x == y)),
                (Reference(_), Garment(_)) => v.conditions += usize::from(allowed),
                (Garment(x), Reference(y) | Garment(y)) => {
                    v.conditions += usize::from(allowed != (x == y))
                }
                (Clean(_), Reference(h) | Garment(h)) => {
                    v.conditions += usize::from(allowed != (h == 0))
                }
                (Noisy(_), Reference(h) | Garment(h)) => {
                    v.conditions += usize::from(allowed != (h == 1))
                }
            }
        }
    }
    for k in 0..frames / chunk {
        let rows: Vec<usize> = (layout.frame_tokens(k * chunk, true).start
            ..layout.frame_tokens(k * chunk + chunk - 1, true).end)
            .collect();
        let mut cols: Vec<usize> = (layout.noisy_cond_start()..layout.noisy_start()).collect();
        cols.extend(layout.clean_start()..layout.frame_tokens(k * chunk, false).start);
        cols.extend(rows.iter().copied());
        let inf = build_inference_mask(cond, k * chunk, chunk, p);
        if m.restrict(&rows, &cols) != inf.mask() {
            v.inference += 1;
        }
    }
    Ok(v)
}

pub fn tf_mask_soundness() -> Outcome {
    timed(6, "teacher-forcing mask soundness", Some(10.0), || {
        let mut v = MaskViolations::default();
        let mut cases = 0;
        for f in 1..=9 {
            for chunk in (1..=f).filter(|c| f % c == 0) {
                for p in 1..=3 {
                    v.add(check_tf_mask(f, chunk, p)?);
                    cases += 1;
                }
            }
        }
        let mut rng = Rng::new(6);
        for _ in 0..1000 {
            let chunk = 1 + rng.below(4);
            let f = chunk * (1 + rng.below(6));
            let p = 1 + rng.below(3);
            v.add(check_tf_mask(f, chunk, p)?);
        }
        Ok((
            v.total() == 0,
            format!(
                "{cases} exhaustive + 1000 random layouts; violations: leak {}, isolation {}, \
                 conditions {}, inference {}",
                v.leak, v.isolation, v.conditions, v.inference
            ),
        ))
    })
}

/// Mask for independent single-frame samples: every frame sees the conditions and itself.
fn independent_frames_mask(cond: CondLayout, frames: usize) -> AttentionMask {
    let cl = cond.len();
    let mut m = AttentionMask::denied(cl + frames, cl + frames);
    let cm = condition_mask(cond);
    for r in 0..cl {
        for c in 0..cl {
            m.set(r, c, cm.get(r, c));
        }
    }
    for r in cl..cl + frames {
        for c in 0..cl {
            m.set(r, c, true);
        }
        m.set(r, r, true);
    }
    m
}

fn independent_sequence(cond: &ConditionSet, z: &Tensor, t: &[f64]) -> Result<UnifiedSequence> {
    let mut seq = UnifiedSequence::conditions(cond);
    for (i, &ti) in t.iter().enumerate() {
        seq.push_frame(0, z.slice_rows(i, 1)?, ti)?;
    }
    Ok(seq)
}

/// Sample moments of a trained two-dimensional mixture model next to the data's.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentCheck {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub target_mean: [f64; 2],
    pub target_cov: [[f64; 2]; 2],
}

impl MomentCheck {
    pub fn mean_error(&self) -> f64 {
        let d = [
            self.mean[0] - self.target_mean[0],
            self.mean[1] - self.target_mean[1],
        ];
        (d[0] * d[0] + d[1] * d[1]).sqrt()
            / self.target_mean.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cov_error(&self) -> f64 {
        let fro = |m: &[[f64; 2]; 2]| m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let mut d = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                d[i][j] = self.cov[i][j] - self.target_cov[i][j];
            }
        }
        fro(&d) / fro(&self.target_cov)
    }
}

/// Trains a one-token, two-channel backbone on an equal mixture of
/// `N((1, 2), 0.4²I)` and `N((3, 0), 0.4²I)` and measures the moments of
/// `samples` Euler samples.
pub fn two_gaussian_moments(seed: u64, steps: usize, samples: usize) -> Result<MomentCheck> {
    let centers = [[1.0, 2.0], [3.0, 0.0]];
    let s = 0.4;
    let mut rng = Rng::new(seed);
    let cfg = BackboneConfig {
        layers: 2,
        heads: 2,
        head_dim: 16,
        tokens: 1,
        channels: 2,
        chunk: 1,
        mlp_ratio: 4,
    };
    let mut model = Backbone::new(cfg, &mut rng)?;
    let cond = ConditionSet::new(Tensor::zeros(&[1, 2]), Tensor::zeros(&[1, 2]))?;
    let layout = cfg.cond_layout();
    let draw = |rng: &mut Rng, n: usize| -> Result<Tensor> {
        let mut v = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let c = centers[rng.below(2)];
            v.push(c[0] + s * rng.normal());
            v.push(c[1] + s * rng.normal());
        }
        Tensor::matrix(n, 2, v)
    };

    let batch = 64;
    let mask = independent_frames_mask(layout, batch);
    let lr = 3e-3;
    let mut opt = AdamW::new(AdamConfig {
        lr,
        ..Default::default()
    });
    for step in 0..steps {
        opt.config.lr = lr * (1.0 - 0.9 * step as f64 / steps as f64);
        let x0 = draw(&mut rng, batch)?;
        let eps = Tensor::randn(&[batch, 2], 1.0, &mut rng);
        let t: Vec<f64> = (0..batch).map(|_| rng.uniform()).collect();
        let mut zt = x0.clone();
        for (i, &ti) in t.iter().enumerate() {
            for c in 0..2 {
                zt.set(i, c, (1.0 - ti) * x0.get(i, c) + ti * eps.get(i, c));
            }
        }
        let target = eps.sub(&x0)?;
        let seq = independent_sequence(&cond, &zt, &t)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = model.forward_on(&mut tape, &bound, &seq, None, &mask)?;
        let loss = tape.mse(out.pred, &target)?;
        let g = tape.backward(loss)?;
        opt.step(model.params_mut(), &bound.grads(&tape, &g))?;
    }

    let chunk = 500;
    let sample_mask = independent_frames_mask(layout, chunk);
    let euler = 50;
    let mut all = Vec::with_capacity(samples);
    while all.len() < samples {
        let mut z = Tensor::randn(&[chunk, 2], 1.0, &mut rng);
        for i in 0..euler {
            let t = 1.0 - i as f64 / euler as f64;
            let seq = independent_sequence(&cond, &z, &vec![t; chunk])?;
            let v = model.forward(&seq, &sample_mask)?.pred;
            z.axpy(-1.0 / euler as f64, &v)?;
        }
        z.ensure_finite("mixture samples")?;
        for i in 0..chunk {
            all.push([z.get(i, 0), z.get(i, 1)]);
        }
    }
    all.truncate(samples);
    let n = all.len() as f64;
    let mut mean = [0.0; 2];
    for x in &all {
        mean[0] += x[0] / n;
        mean[1] += x[1] / n;
    }
    let mut cov = [[0.0; 2]; 2];
    for x in &all {
        for i in 0..2 {
            for j in 0..2 {
                cov[i][j] += (x[i] - mean[i]) * (x[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    let gap = [centers[1][0] - centers[0][0], centers[1][1] - centers[0][1]];
    let mut target_cov = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            target_cov[i][j] = 0.25 * gap[i] * gap[j] + if i == j { s * s } else { 0.0 };
        }
    }
    Ok(MomentCheck {
        mean,
        cov,
        target_mean: [
            0.5 * (centers[0][0] + centers[1][0]),
            0.5 * (centers[0][1] + centers[1][1]),
        ],
        target_cov,
    })
}

pub fn flow_sanity() -> Outcome {
    timed(7, "flow-matching sanity", Some(300.0), || {
        let m = two_gaussian_moments(7, 2000, 10_000)?;
        let (me, ce) = (m.mean_error(), m.cov_error());
        Ok((
            me <= 0.1 && ce <= 0.1,
            format!(
                "mean ({:.3}, {:.3}) vs (2, 1), relative error {me:.3}; \
                 cov [[{:.3}, {:.3}], [{:.3}, {:.3}]], relative error {ce:.3}",
                m.mean[0], m.mean[1], m.cov[0][0], m.cov[0][1], m.cov[1][0], m.cov[1][1]
            ),
        ))
    })
}

/// `training_seconds` counts toward the end-to-end budget.
pub fn garment_switch(trained: &Trained, training_seconds: f64) -> Outcome {
    let mut out = timed(8, "garment-switch analog", None, || {
        let (g, d, cfg) = (&trained.generator, &trained.data, &trained.config);
        let refresh = switch_study(g, d, cfg, SwitchMode::RefreshOnly)?;
        let nodis = switch_study(g, d, cfg, SwitchMode::NoDisentangle)?;
        let full = switch_study(g, d, cfg, SwitchMode::Full)?;
        let k = cfg.continuity_factor;
        let a = refresh.post_vs_old() < refresh.post_vs_new();
        let b = full.post_vs_new() < full.post_vs_old();
        let c = full.continuity_ratio() <= k && nodis.continuity_ratio() > k;
        Ok((
            a && b && c,
            format!(
                "(a) refresh-only old {:.3} / new {:.3}; (b) full old {:.3} / new {:.3}; \
                 (c) boundary/intra full {:.2}, no-disentangle {:.2}, limit {k}",
                refresh.post_vs_old(),
                refresh.post_vs_new(),
                full.post_vs_old(),
                full.post_vs_new(),
                full.continuity_ratio(),
                nodis.continuity_ratio()
            ),
        ))
    });
    out.seconds += training_seconds;
    if out.seconds > 900.0 {
        out.passed = false;
        out.detail.push_str("; over the 900s budget");
    }
    out
}

/// Mean attention masses on history and conditions over chunks `from..chunks`
/// of unswitched rollouts on the first `samples` evaluation clips.
pub fn rollout_masses(
    trained: &Trained,
    samples: usize,
    chunks: usize,
    from: usize,
) -> Result<(f64, f64)> {
    let (mut hist, mut cond, mut n) = (0.0, 0.0, 0.0);
    for (i, s) in trained.data.eval.iter().take(samples).enumerate() {
        let mut session = Session::start(
            trained.generator.clone(),
            trained.data.codec.clone(),
            session_config(&trained.config),
            s.conditions.clone(),
            trained.config.seed + i as u64,
        )?;
        for _ in 0..chunks {
            session.step()?;
        }
        for row in &session.trace()[from..] {
            if let Some(m) = row.mass {
                hist += m.historical;
                cond += m.conditional;
                n += 1.0;
            }
        }
    }
    Ok((hist / n, cond / n))
}

pub fn attention_mass(trained: &Trained) -> Outcome {
    timed(9, "attention-mass observation", None, || {
        let (hist, cond) = rollout_masses(trained, 20, 8, 2)?;
        Ok((
            hist > cond,
            format!("historical {hist:.4} vs conditional {cond:.4} (chunks 2-7, 20 clips)"),
        ))
    })
}

/// Per-chunk step time: the fastest over `passes` identical rollouts, so
/// that slow spells of the host land on different chunks in different passes.
pub fn step_times(
    trained: &Trained,
    max_slots: usize,
    chunks: usize,
    passes: usize,
) -> Result<Vec<f64>> {
    let mut config = session_config(&trained.config);
    config.max_slots = max_slots;
    let mut times = vec![f64::INFINITY; chunks];
    for _ in 0..passes {
        let mut session = Session::start(
            trained.generator.clone(),
            trained.data.codec.clone(),
            config.clone(),
            trained.data.eval[0].conditions.clone(),
            trained.config.seed,
        )?;
        for t in times.iter_mut() {
            let start = Instant::now();
            session.step()?;
            *t = t.min(start.elapsed().as_secs_f64());
        }
    }
    Ok(times)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn streaming_cost(trained: &Trained) -> Outcome {
    timed(10, "streaming cost flatness", None, || {
        let evicting = step_times(trained, trained.config.max_slots, 80, 7)?;
        let (early, late) = (mean(&evicting[10..40]), mean(&evicting[40..80]));
        let drift = (late / early - 1.0).abs();
        let growing = step_times(trained, usize::MAX / 2, 80, 7)?;
        let windows: Vec<f64> = growing.chunks(20).map(mean).collect();
        let monotone = windows.windows(2).all(|w| w[1] > w[0]);
        Ok((
            drift <= 0.2 && monotone,
            format!(
                "evicting: chunks 10-39 {:.3} ms, 40-79 {:.3} ms ({:+.1}%); \
                 no eviction by 20-chunk window: {} ms",
                early * 1e3,
                late * 1e3,
                100.0 * (late / early - 1.0),
                windows
                    .iter()
                    .map(|w| format!("{:.3}", w * 1e3))
                    .collect::<Vec<_>>()
                    .join(" < ")
            ),
        ))
    })
}

/// Per evaluation clip of an unswitched rollout: whether the mean garment
/// error against the target code is below that against every other entry.
pub fn no_switch_readout(trained: &Trained) -> Result<(usize, usize)> {
    let (d, cfg) = (&trained.data, &trained.config);
    let mut closest = 0;
    for (i, s) in d.eval.iter().enumerate() {
        let session = run_script(
            &trained.generator,
            d,
            cfg,
            s.conditions.clone(),
            &[],
            cfg.rollout_chunks,
            cfg.seed + i as u64,
        )?;
        let z = session.latents()?;
        let errs: Vec<f64> = d
            .codebook
            .iter()
            .map(|code| segment_garment_error(&d.layout, &z, 0..z.frames(), code))
            .collect();
        if errs
            .iter()
            .enumerate()
            .all(|(k, e)| k == s.garment_id || *e > errs[s.garment_id])
        {
            closest += 1;
        }
    }
    Ok((closest, d.eval.len()))
}

/// The checks that need no trained model.
pub fn unit_checks() -> Vec<Outcome> {
    vec![
        cache_policy(),
        incremental_equivalence(),
        gradient_integrity(),
        gaussian_oracle(),
        reweighting_law(),
        tf_mask_soundness(),
        flow_sanity(),
    ]
}

/// The checks on a trained model.
pub fn model_checks(trained: &Trained, training_seconds: f64) -> Vec<Outcome> {
    vec![
        garment_switch(trained, training_seconds),
        attention_mass(trained),
        streaming_cost(trained),
    ]
}

/// Trains on `cfg` and runs all ten checks. The trained model is returned too.
pub fn run_all(cfg: &HarnessConfig) -> Result<(Vec<Outcome>, Trained)> {
    let mut out = unit_checks();
    let start = Instant::now();
    let trained = train_all(cfg)?;
    out.extend(model_checks(&trained, start.elapsed().as_secs_f64()));
    Ok((out, trained))
}
