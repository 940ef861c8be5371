//! PPO training: GAE, clipped-surrogate updates with Adam, and the outer loop
//! that alternates rollouts and updates.

use crate::env::{rollout, EnvConfig, RolloutSpec, Trajectory};
use crate::labelstore::LabelStore;
use crate::policy::{self, Checkpoint, LossConfig, PolicyError, PolicyParams, Sample};
use crate::prior::Prior;
use crate::sceneforge::SceneSample;
use crate::seeding::{child_rng, derive_seed, DetRng};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PpoError {
    #[error("invalid ppo config: {0}")]
    Config(String),
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("trajectory arrays differ in length")]
    Ragged,
    #[error("empty batch")]
    EmptyBatch,
    #[error("no training scenes")]
    NoScenes,
    #[error("non-finite loss; parameters restored")]
    NonFinite,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PPOConfig {
    pub clip_ratio: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub entropy_coeff: f64,
    pub value_coeff: f64,
    pub clip_coeff: f64,
    pub learning_rate: f64,
    pub update_epochs: usize,
    pub minibatch_size: usize,
    pub trajectories_per_update: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Emit a checkpoint every this many updates; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for PPOConfig {
    fn default() -> Self {
        Self {
            clip_ratio: 0.2,
            gae_lambda: 0.5,
            gamma: 0.9,
            entropy_coeff: 0.1,
            value_coeff: 1.0,
            clip_coeff: 1.0,
            learning_rate: 1e-4,
            update_epochs: 4,
            minibatch_size: 256,
            trajectories_per_update: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 50,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::Config(m.to_string()));
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return bad("clip_ratio must lie in (0, 1)");
        }
        if !((0.0..=1.0).contains(&self.gamma) && (0.0..=1.0).contains(&self.gae_lambda)) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        let coeffs = [self.entropy_coeff, self.value_coeff, self.clip_coeff];
        if coeffs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return bad("loss coefficients must be non-negative");
        }
        if self.update_epochs == 0 || self.minibatch_size == 0 || self.trajectories_per_update == 0 {
            return bad("update_epochs, minibatch_size and trajectories_per_update must be at least 1");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2) && self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            clip_ratio: self.clip_ratio,
            value_coeff: self.value_coeff,
            clip_coeff: self.clip_coeff,
            entropy_coeff: self.entropy_coeff,
        }
    }
}

/// Advantages and returns from per-step rewards, value estimates and done
/// flags. A done step does not bootstrap; neither does the final step.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let n = rewards.len();
    if n == 0 {
        return Err(PpoError::EmptyTrajectory);
    }
    if values.len() != n || dones.len() != n {
        return Err(PpoError::Ragged);
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        adv[t] = delta + gamma * lambda * live * next_adv;
        next_adv = adv[t];
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

pub fn compute_gae(traj: &Trajectory, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let rewards: Vec<f64> = traj.steps.iter().map(|s| s.reward).collect();
    let values: Vec<f64> = traj.steps.iter().map(|s| s.value).collect();
    let dones: Vec<bool> = traj.steps.iter().map(|s| s.done).collect();
    gae(&rewards, &values, &dones, gamma, lambda)
}

/// Shifts and scales to mean 0 and (population) standard deviation 1.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, cfg: &PPOConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One descent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Minibatch-size-weighted means over every gradient evaluation of an update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub loss: f64,
    pub value_loss: f64,
    pub clip_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub minibatches: usize,
}

/// `update_epochs` passes over shuffled minibatches with one Adam step
/// each. Advantages are used as given. On a non-finite loss or parameter
/// the parameters and optimizer state are restored.
pub fn update(
    params: &mut PolicyParams,
    adam: &mut Adam,
    batch: &[Sample],
    cfg: &PPOConfig,
    rng: &mut DetRng,
) -> Result<UpdateStats, PpoError> {
    if batch.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    let saved = (params.clone(), adam.clone());
    let loss_cfg = cfg.loss();
    let mut stats = UpdateStats::default();
    let mut seen = 0usize;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut mb = Vec::with_capacity(cfg.minibatch_size.min(batch.len()));
    for _ in 0..cfg.update_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            mb.clear();
            mb.extend(chunk.iter().map(|&i| batch[i].clone()));
            let out = match policy::grad(params, &mb, &loss_cfg) {
                Ok(out) => out,
                Err(PolicyError::NonFinite(_)) => {
                    (*params, *adam) = saved;
                    return Err(PpoError::NonFinite);
                }
                Err(e) => return Err(e.into()),
            };
            adam.step(params.as_mut_slice(), &out.grad);
            if params.as_slice().iter().any(|v| !v.is_finite()) {
                (*params, *adam) = saved;
                return Err(PpoError::NonFinite);
            }
            let w = chunk.len() as f64;
            stats.loss += w * out.loss;
            stats.value_loss += w * out.value_loss;
            stats.clip_loss += w * out.clip_loss;
            stats.entropy += w * out.entropy;
            stats.clip_fraction += w * out.clip_fraction;
            stats.approx_kl += w * out.approx_kl;
            stats.minibatches += 1;
            seen += chunk.len();
        }
    }
    let n = seen as f64;
    stats.loss /= n;
    stats.value_loss /= n;
    stats.clip_loss /= n;
    stats.entropy /= n;
    stats.clip_fraction /= n;
    stats.approx_kl /= n;
    Ok(stats)
}

/// Training samples from trajectories, advantages normalized across all.
pub fn build_batch(trajectories: &[Trajectory], cfg: &PPOConfig) -> Result<Vec<Sample>, PpoError> {
    let mut batch = Vec::new();
    for t in trajectories {
        let (adv, ret) = compute_gae(t, cfg.gamma, cfg.gae_lambda)?;
        for ((s, a), r) in t.steps.iter().zip(adv).zip(ret) {
            batch.push(Sample {
                feature: s.feature.clone(),
                action: s.action,
                old_log_prob: s.log_prob,
                advantage: a,
                ret: r,
            });
        }
    }
    let mut adv: Vec<f64> = batch.iter().map(|s| s.advantage).collect();
    normalize_advantages(&mut adv);
    batch.iter_mut().zip(adv).for_each(|(s, a)| s.advantage = a);
    Ok(batch)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: u64,
    pub scene_id: String,
    pub episodes: usize,
    pub mean_reward: f64,
    pub positive_rate: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub loss: f64,
    pub value_loss: f64,
    pub clip_loss: f64,
    pub entropy: f64,
    pub new_masks: usize,
    pub total_masks: usize,
    pub aborted: bool,
}

impl UpdateRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub enum TrainEvent<'a> {
    Update(&'a UpdateRecord),
    Checkpoint(&'a Checkpoint),
}

/// Scenes and settings shared by a training run.
pub struct TrainSetup<'a> {
    pub scenes: &'a [(String, SceneSample)],
    pub env: &'a EnvConfig,
    pub ppo: &'a PPOConfig,
    pub prior: &'a Prior,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<UpdateRecord>,
    /// Masks found during training rollouts.
    pub store: LabelStore,
}

/// Runs `n_updates` PPO updates starting from `init`. Update `k` (counting
/// from `init.step`) samples its scene and seeds its rollout from
/// `(seed, k)`, so a run is reproducible from the same inputs.
pub fn train(
    init: Checkpoint,
    setup: &TrainSetup<'_>,
    n_updates: usize,
    on_event: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<TrainOutput, PpoError> {
    let cfg = setup.ppo;
    cfg.validate()?;
    if setup.scenes.is_empty() {
        return Err(PpoError::NoScenes);
    }
    let mut params = init.params;
    let mut adam = Adam::new(params.len(), cfg);
    let mut store = LabelStore::default();
    let mut log = Vec::with_capacity(n_updates);
    let mut step = init.step;
    for _ in 0..n_updates {
        let stream = derive_seed(setup.seed, step);
        let mut rng = child_rng(stream, 0);
        let (scene_id, scene) = &setup.scenes[rng.gen_range(0..setup.scenes.len())];
        let spec = RolloutSpec {
            scene,
            scene_id,
            cfg: setup.env,
            prior: setup.prior,
            seed: derive_seed(stream, 1),
            discovered_at: step as usize,
        };
        let out = rollout(&spec, &params, cfg.trajectories_per_update);
        for (_, m) in out.masks {
            store.add(m);
        }
        let counts = store.stats(None);
        let episodes = out.trajectories.len();
        let total: f64 = out.trajectories.iter().map(Trajectory::total_reward).sum();
        let positive = out.trajectories.iter().filter(|t| t.is_positive(setup.env)).count();
        let batch = build_batch(&out.trajectories, cfg)?;
        let (stats, aborted) = match update(&mut params, &mut adam, &batch, cfg, &mut rng) {
            Ok(s) => (s, false),
            Err(PpoError::NonFinite) => (UpdateStats::default(), true),
            Err(e) => return Err(e),
        };
        step += 1;
        let record = UpdateRecord {
            update: step,
            scene_id: scene_id.clone(),
            episodes,
            mean_reward: total / episodes as f64,
            positive_rate: positive as f64 / episodes as f64,
            clip_fraction: stats.clip_fraction,
            approx_kl: stats.approx_kl,
            loss: stats.loss,
            value_loss: stats.value_loss,
            clip_loss: stats.clip_loss,
            entropy: stats.entropy,
            new_masks: counts.new_since_last,
            total_masks: counts.total,
            aborted,
        };
        on_event(TrainEvent::Update(&record));
        log.push(record);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every as u64 == 0 {
            on_event(TrainEvent::Checkpoint(&Checkpoint {
                params: params.clone(),
                step,
            }));
        }
    }
    Ok(TrainOutput {
        checkpoint: Checkpoint { params, step },
        log,
        store,
    })
}
