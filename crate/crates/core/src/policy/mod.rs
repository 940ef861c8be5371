//! Permutation-invariant policy/value network with hand-written gradients.
//!
//! A per-point encoder (3 -> 16 -> 28, tanh) is max- and mean-pooled over the
//! crop and joined with an 8-value container summary. A two-layer tanh trunk
//! feeds a 5-way move head, a 3-way resize head and a scalar value head.
//! Training consumes stored state features, so the encoder is fixed after
//! initialization and its gradient is zero.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_HEADER};

use crate::env::{Actor, ActionPair, Container, Decision, Move, Observation, Resize};
use crate::geom::{PointCloud, Vec3};
use crate::seeding::DetRng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const N_MOVE: usize = 5;
pub const N_SIZE: usize = 3;
/// Container summary entries appended to the pooled embedding.
pub const SUMMARY_DIM: usize = 8;

/// Fixed-length state vector fed to the trunk.
pub type StateFeature = Vec<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("feature has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub enc_hidden: usize,
    pub enc_out: usize,
    pub hidden: usize,
    /// Crops larger than this are stride-subsampled after sorting.
    pub max_points: usize,
    /// Divisor for the diameter summary entry.
    pub cd_scale: f64,
    /// Divisor for the point-count summary entry.
    pub count_scale: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            enc_hidden: 16,
            enc_out: 28,
            hidden: 64,
            max_points: 512,
            cd_scale: 4.0,
            count_scale: 2000.0,
        }
    }
}

impl Architecture {
    pub fn feature_dim(&self) -> usize {
        2 * self.enc_out + SUMMARY_DIM
    }

    /// (name, rows, cols) for every parameter block, in storage order.
    /// Bias vectors have one column.
    pub fn blocks(&self) -> [(&'static str, usize, usize); 14] {
        let (e, o, h, d) = (self.enc_hidden, self.enc_out, self.hidden, self.feature_dim());
        [
            ("enc_w1", e, 3),
            ("enc_b1", e, 1),
            ("enc_w2", o, e),
            ("enc_b2", o, 1),
            ("w1", h, d),
            ("b1", h, 1),
            ("w2", h, h),
            ("b2", h, 1),
            ("move_w", N_MOVE, h),
            ("move_b", N_MOVE, 1),
            ("size_w", N_SIZE, h),
            ("size_b", N_SIZE, 1),
            ("value_w", 1, h),
            ("value_b", 1, 1),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, r, c)| r * c).sum()
    }

    fn offsets(&self) -> Offsets {
        let mut at = [0usize; 15];
        for (k, (_, r, c)) in self.blocks().iter().enumerate() {
            at[k + 1] = at[k] + r * c;
        }
        Offsets(at)
    }

    fn validate(&self) -> Result<(), PolicyError> {
        let sizes_ok = self.enc_hidden > 0 && self.enc_out > 0 && self.hidden > 0 && self.max_points > 0;
        let scales_ok = self.cd_scale > 0.0 && self.count_scale > 0.0;
        if sizes_ok && scales_ok && self.cd_scale.is_finite() && self.count_scale.is_finite() {
            Ok(())
        } else {
            Err(PolicyError::Checkpoint("invalid architecture".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Offsets([usize; 15]);

impl Offsets {
    fn range(&self, block: usize) -> std::ops::Range<usize> {
        self.0[block]..self.0[block + 1]
    }
}

const ENC_W1: usize = 0;
const ENC_B1: usize = 1;
const ENC_W2: usize = 2;
const ENC_B2: usize = 3;
const W1: usize = 4;
const B1: usize = 5;
const W2: usize = 6;
const B2: usize = 7;
const MOVE_W: usize = 8;
const MOVE_B: usize = 9;
const SIZE_W: usize = 10;
const SIZE_B: usize = 11;
const VALUE_W: usize = 12;
const VALUE_B: usize = 13;

/// All network weights as one flat vector, laid out by [`Architecture::blocks`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    arch: Architecture,
    offsets: Offsets,
    data: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            offsets: arch.offsets(),
            data: vec![0.0; arch.param_count()],
            arch,
        }
    }

    /// Weights uniform in ±1/sqrt(fan_in), zero biases, logit weights
    /// shrunk by 100 so the first policy is nearly uniform.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        for (k, (_, rows, cols)) in arch.blocks().iter().enumerate() {
            if *cols == 1 {
                continue;
            }
            let bound = 1.0 / (*cols as f64).sqrt();
            let shrink = if k == MOVE_W || k == SIZE_W { 0.01 } else { 1.0 };
            let range = p.offsets.range(k);
            debug_assert_eq!(range.len(), rows * cols);
            for w in &mut p.data[range] {
                *w = rng.gen_range(-bound..=bound) * shrink;
            }
        }
        p
    }

    pub fn from_vec(arch: Architecture, data: Vec<f64>) -> Result<Self, PolicyError> {
        arch.validate()?;
        if data.len() != arch.param_count() {
            return Err(PolicyError::Dimension {
                expected: arch.param_count(),
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFinite("parameters"));
        }
        Ok(Self {
            offsets: arch.offsets(),
            arch,
            data,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat index range of a named block.
    pub fn block_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let k = self.arch.blocks().iter().position(|(n, _, _)| *n == name)?;
        Some(self.offsets.range(k))
    }

    fn block(&self, k: usize) -> &[f64] {
        &self.data[self.offsets.range(k)]
    }
}

/// y = W x + b with W stored row-major.
fn affine(w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    let cols = x.len();
    for (i, out) in y.iter_mut().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        *out = b[i] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
    }
}

/// Encodes a crop relative to its container. Points are put in a canonical
/// order first, so the result does not depend on input order.
pub fn encode_state(params: &PolicyParams, points: &PointCloud, container: &Container) -> StateFeature {
    let arch = &params.arch;
    let o = arch.enc_out;
    let mut feature = vec![0.0; arch.feature_dim()];
    let half = container.cd / 2.0;
    let mut pts: Vec<Vec3> = points
        .iter()
        .map(|p| Vec3::new((p.x - container.cx) / half, (p.y - container.cy) / half, p.z / half))
        .collect();
    let summary = &mut feature[2 * o..];
    summary[0] = container.cd / arch.cd_scale;
    summary[1] = pts.len() as f64 / arch.count_scale;
    if pts.is_empty() {
        return feature;
    }
    pts.sort_by(|a, b| {
        a.x.total_cmp(&b.x)
            .then(a.y.total_cmp(&b.y))
            .then(a.z.total_cmp(&b.z))
    });
    let mut lo = pts[0];
    let mut hi = pts[0];
    let mut sum = Vec3::zeros();
    for p in &pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
        sum += p;
    }
    let mean = sum / pts.len() as f64;
    for a in 0..3 {
        summary[2 + a] = hi[a] - lo[a];
        summary[5 + a] = mean[a];
    }

    let n = pts.len();
    let used: Vec<&Vec3> = if n > arch.max_points {
        (0..arch.max_points).map(|k| &pts[k * n / arch.max_points]).collect()
    } else {
        pts.iter().collect()
    };
    let (w1, b1, w2, b2) = (
        params.block(ENC_W1),
        params.block(ENC_B1),
        params.block(ENC_W2),
        params.block(ENC_B2),
    );
    let mut h = vec![0.0; arch.enc_hidden];
    let mut e = vec![0.0; o];
    let (max_pool, rest) = feature.split_at_mut(o);
    let mean_pool = &mut rest[..o];
    max_pool.fill(f64::NEG_INFINITY);
    for p in &used {
        affine(w1, b1, p.as_slice(), &mut h);
        h.iter_mut().for_each(|v| *v = v.tanh());
        affine(w2, b2, &h, &mut e);
        for k in 0..o {
            let v = e[k].tanh();
            max_pool[k] = max_pool[k].max(v);
            mean_pool[k] += v;
        }
    }
    mean_pool.iter_mut().for_each(|v| *v /= used.len() as f64);
    feature
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub move_probs: [f64; N_MOVE],
    pub size_probs: [f64; N_SIZE],
    pub value: f64,
}

/// Intermediate values of one forward pass, kept for backprop.
struct Pass {
    h1: Vec<f64>,
    h2: Vec<f64>,
    move_logp: [f64; N_MOVE],
    size_logp: [f64; N_SIZE],
    value: f64,
}

fn log_softmax<const K: usize>(z: &[f64]) -> [f64; K] {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let mut out = [0.0; K];
    for (o, v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
    out
}

fn check_feature(params: &PolicyParams, feature: &[f64]) -> Result<(), PolicyError> {
    let expected = params.arch.feature_dim();
    if feature.len() != expected {
        return Err(PolicyError::Dimension {
            expected,
            got: feature.len(),
        });
    }
    Ok(())
}

fn pass(params: &PolicyParams, feature: &[f64]) -> Pass {
    let hdim = params.arch.hidden;
    let mut h1 = vec![0.0; hdim];
    affine(params.block(W1), params.block(B1), feature, &mut h1);
    h1.iter_mut().for_each(|v| *v = v.tanh());
    let mut h2 = vec![0.0; hdim];
    affine(params.block(W2), params.block(B2), &h1, &mut h2);
    h2.iter_mut().for_each(|v| *v = v.tanh());
    let mut zm = [0.0; N_MOVE];
    affine(params.block(MOVE_W), params.block(MOVE_B), &h2, &mut zm);
    let mut zs = [0.0; N_SIZE];
    affine(params.block(SIZE_W), params.block(SIZE_B), &h2, &mut zs);
    let mut v = [0.0];
    affine(params.block(VALUE_W), params.block(VALUE_B), &h2, &mut v);
    Pass {
        h1,
        h2,
        move_logp: log_softmax(&zm),
        size_logp: log_softmax(&zs),
        value: v[0],
    }
}

pub fn forward(params: &PolicyParams, feature: &[f64]) -> Result<PolicyOutput, PolicyError> {
    check_feature(params, feature)?;
    let p = pass(params, feature);
    Ok(PolicyOutput {
        move_probs: p.move_logp.map(f64::exp),
        size_probs: p.size_logp.map(f64::exp),
        value: p.value,
    })
}

fn draw(probs: &[f64], rng: &mut DetRng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Independent draws from both heads and their joint log-probability.
pub fn sample_action(output: &PolicyOutput, rng: &mut DetRng) -> (ActionPair, f64) {
    let m = draw(&output.move_probs, rng);
    let s = draw(&output.size_probs, rng);
    let action = ActionPair::new(Move::ALL[m], Resize::ALL[s]);
    (action, output.move_probs[m].ln() + output.size_probs[s].ln())
}

/// One training example for the PPO loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub feature: StateFeature,
    pub action: ActionPair,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub clip_ratio: f64,
    pub value_coeff: f64,
    pub clip_coeff: f64,
    pub entropy_coeff: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            clip_ratio: 0.2,
            value_coeff: 1.0,
            clip_coeff: 1.0,
            entropy_coeff: 0.1,
        }
    }
}

/// Batch-mean loss terms and the gradient of `loss` w.r.t. every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub value_loss: f64,
    pub clip_loss: f64,
    /// Sum of both heads' entropies.
    pub entropy: f64,
    /// Share of samples whose ratio lies outside the clip interval.
    pub clip_fraction: f64,
    /// Mean of old minus new log-probability.
    pub approx_kl: f64,
    pub grad: Vec<f64>,
}

/// d/dz of the head's share of the loss: `g_logp` scales the gradient of
/// the taken action's log-probability, `g_ent` scales that of the entropy.
fn head_grad<const K: usize>(logp: &[f64; K], taken: usize, g_logp: f64, g_ent: f64) -> [f64; K] {
    let p = logp.map(f64::exp);
    let h: f64 = -p.iter().zip(logp).map(|(a, b)| a * b).sum::<f64>();
    let mut dz = [0.0; K];
    for j in 0..K {
        let dlogp = if j == taken { 1.0 - p[j] } else { -p[j] };
        let dent = -p[j] * (logp[j] + h);
        dz[j] = g_logp * dlogp + g_ent * dent;
    }
    dz
}

fn entropy<const K: usize>(logp: &[f64; K]) -> f64 {
    -logp.iter().map(|l| l.exp() * l).sum::<f64>()
}

fn check_batch(params: &PolicyParams, batch: &[Sample]) -> Result<(), PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    for s in batch {
        check_feature(params, &s.feature)?;
        let scalars = [s.old_log_prob, s.advantage, s.ret];
        if s.feature.iter().chain(&scalars).any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFinite("batch"));
        }
    }
    Ok(())
}

/// The scalar loss of [`grad`] without the backward pass.
pub fn loss(params: &PolicyParams, batch: &[Sample], cfg: &LossConfig) -> Result<f64, PolicyError> {
    check_batch(params, batch)?;
    let (lo, hi) = (1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
    let (mut value_loss, mut clip_loss, mut ent) = (0.0, 0.0, 0.0);
    for s in batch {
        let p = pass(params, &s.feature);
        let logp = p.move_logp[s.action.movement.index()] + p.size_logp[s.action.resize.index()];
        let ratio = (logp - s.old_log_prob).exp();
        clip_loss -= (ratio * s.advantage).min(ratio.clamp(lo, hi) * s.advantage);
        ent += entropy(&p.move_logp) + entropy(&p.size_logp);
        value_loss += (p.value - s.ret).powi(2);
    }
    let n = batch.len() as f64;
    let loss = (cfg.value_coeff * value_loss + cfg.clip_coeff * clip_loss - cfg.entropy_coeff * ent) / n;
    if !loss.is_finite() {
        return Err(PolicyError::NonFinite("loss"));
    }
    Ok(loss)
}

/// PPO loss `value_coeff * mse + clip_coeff * clipped surrogate -
/// entropy_coeff * entropy`, averaged over the batch, with its gradient.
pub fn grad(params: &PolicyParams, batch: &[Sample], cfg: &LossConfig) -> Result<LossGrad, PolicyError> {
    check_batch(params, batch)?;
    let n = batch.len() as f64;
    let hdim = params.arch.hidden;
    let d = params.arch.feature_dim();
    let off = params.offsets;
    let mut g = vec![0.0; params.len()];
    let (mut value_loss, mut clip_loss, mut ent, mut clipped, mut kl) = (0.0, 0.0, 0.0, 0usize, 0.0);
    let (lo, hi) = (1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
    let w2 = params.block(W2);
    let wm = params.block(MOVE_W);
    let ws = params.block(SIZE_W);
    let wv = params.block(VALUE_W);
    let mut dh2 = vec![0.0; hdim];
    let mut da2 = vec![0.0; hdim];
    let mut da1 = vec![0.0; hdim];

    for s in batch {
        let p = pass(params, &s.feature);
        let (m, z) = (s.action.movement.index(), s.action.resize.index());
        let logp = p.move_logp[m] + p.size_logp[z];
        let ratio = (logp - s.old_log_prob).exp();
        let a = s.advantage;
        let unclipped = ratio * a;
        let clamped = ratio.clamp(lo, hi) * a;
        clip_loss -= unclipped.min(clamped);
        if !(lo..=hi).contains(&ratio) {
            clipped += 1;
        }
        kl += s.old_log_prob - logp;
        let h = entropy(&p.move_logp) + entropy(&p.size_logp);
        ent += h;
        let err = p.value - s.ret;
        value_loss += err * err;

        // d loss / d logp through the surrogate; the clamped branch is flat.
        let g_logp = if unclipped <= clamped { -cfg.clip_coeff * a * ratio / n } else { 0.0 };
        let g_ent = -cfg.entropy_coeff / n;
        let dzm = head_grad(&p.move_logp, m, g_logp, g_ent);
        let dzs = head_grad(&p.size_logp, z, g_logp, g_ent);
        let dv = cfg.value_coeff * 2.0 * err / n;

        dh2.fill(0.0);
        let mut head = |wk: usize, bk: usize, w: &[f64], dz: &[f64]| {
            let (wo, bo) = (off.0[wk], off.0[bk]);
            for (i, &dzi) in dz.iter().enumerate() {
                g[bo + i] += dzi;
                for j in 0..hdim {
                    g[wo + i * hdim + j] += dzi * p.h2[j];
                    dh2[j] += w[i * hdim + j] * dzi;
                }
            }
        };
        head(MOVE_W, MOVE_B, wm, &dzm);
        head(SIZE_W, SIZE_B, ws, &dzs);
        head(VALUE_W, VALUE_B, wv, &[dv]);

        for j in 0..hdim {
            da2[j] = dh2[j] * (1.0 - p.h2[j] * p.h2[j]);
        }
        let (w2o, b2o) = (off.0[W2], off.0[B2]);
        da1.fill(0.0);
        for i in 0..hdim {
            g[b2o + i] += da2[i];
            for j in 0..hdim {
                g[w2o + i * hdim + j] += da2[i] * p.h1[j];
                da1[j] += w2[i * hdim + j] * da2[i];
            }
        }
        let (w1o, b1o) = (off.0[W1], off.0[B1]);
        for i in 0..hdim {
            let gi = da1[i] * (1.0 - p.h1[i] * p.h1[i]);
            g[b1o + i] += gi;
            for j in 0..d {
                g[w1o + i * d + j] += gi * s.feature[j];
            }
        }
    }
    let (value_loss, clip_loss, ent) = (value_loss / n, clip_loss / n, ent / n);
    let loss = cfg.value_coeff * value_loss + cfg.clip_coeff * clip_loss - cfg.entropy_coeff * ent;
    if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(PolicyError::NonFinite("loss"));
    }
    Ok(LossGrad {
        loss,
        value_loss,
        clip_loss,
        entropy: ent,
        clip_fraction: clipped as f64 / n,
        approx_kl: kl / n,
        grad: g,
    })
}

impl Actor for PolicyParams {
    fn act(&self, obs: &Observation<'_>, rng: &mut DetRng) -> Decision {
        let feature = encode_state(self, obs.crop, obs.container);
        let out = forward(self, &feature).expect("encode_state yields the architecture's dimension");
        let (action, log_prob) = sample_action(&out, rng);
        Decision {
            feature,
            action,
            log_prob,
            value: out.value,
        }
    }
}
