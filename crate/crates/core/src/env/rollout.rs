use super::{
    apply_action, block_for_agent, blocks, compute_reward_for_crop, points_in_container, random_start, ActionPair,
    Container, EnvConfig, Move, Resize,
};
use crate::geom::PointCloud;
use crate::labelstore::{FitSummary, MaskRecord};
use crate::prior::Prior;
use crate::sceneforge::SceneSample;
use crate::seeding::{child_rng, DetRng};
use rand::Rng;
use rayon::prelude::*;

/// What an actor sees: the cropped scene points and its container.
pub struct Observation<'a> {
    pub crop: &'a PointCloud,
    pub container: &'a Container,
    pub cfg: &'a EnvConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub feature: Vec<f64>,
    pub action: ActionPair,
    /// Joint log-probability of both action draws.
    pub log_prob: f64,
    pub value: f64,
}

/// Anything that picks actions from observations.
pub trait Actor: Sync {
    fn act(&self, obs: &Observation<'_>, rng: &mut DetRng) -> Decision;
}

/// Uniform random actions; the baseline policy.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformActor;

impl Actor for UniformActor {
    fn act(&self, _obs: &Observation<'_>, rng: &mut DetRng) -> Decision {
        let action = ActionPair::new(Move::ALL[rng.gen_range(0..5)], Resize::ALL[rng.gen_range(0..3)]);
        Decision {
            feature: Vec::new(),
            action,
            log_prob: (1.0f64 / 15.0).ln(),
            value: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub feature: Vec<f64>,
    pub action: ActionPair,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub episode: usize,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn is_positive(&self, cfg: &EnvConfig) -> bool {
        self.steps.iter().any(|s| s.reward == cfg.reward_pos)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RolloutOutput {
    pub trajectories: Vec<Trajectory>,
    /// Accepted masks with the episode that found them, in episode order.
    pub masks: Vec<(usize, MaskRecord)>,
}

/// Scene and settings shared by every episode of a rollout.
pub struct RolloutSpec<'a> {
    pub scene: &'a SceneSample,
    pub scene_id: &'a str,
    pub cfg: &'a EnvConfig,
    pub prior: &'a Prior,
    pub seed: u64,
    pub discovered_at: usize,
}

/// Runs `budget` episodes. Episode `e` uses agent `e mod n_agents` and its
/// own seeded stream, so a larger budget extends a smaller one. Episodes run
/// in parallel on the current rayon pool; results keep episode order.
pub fn rollout(spec: &RolloutSpec<'_>, actor: &dyn Actor, budget: usize) -> RolloutOutput {
    let episodes: Vec<(Trajectory, Option<MaskRecord>)> = (0..budget)
        .into_par_iter()
        .map(|e| run_episode(spec, actor, e))
        .collect();
    let mut out = RolloutOutput::default();
    for (t, m) in episodes {
        out.masks.extend(m.map(|m| (t.episode, m)));
        out.trajectories.push(t);
    }
    out
}

fn run_episode(spec: &RolloutSpec<'_>, actor: &dyn Actor, episode: usize) -> (Trajectory, Option<MaskRecord>) {
    let cfg = spec.cfg;
    let mut rng = child_rng(spec.seed, episode as u64);
    let tiles = blocks(spec.scene, cfg);
    let block = block_for_agent(&tiles, episode % cfg.n_agents);
    let mut container = random_start(&block, cfg, &mut rng);
    let mut crop = points_in_container(spec.scene, &container, cfg);
    let mut steps = Vec::with_capacity(cfg.max_steps);
    let mut found = None;
    for t in 0..cfg.max_steps {
        let points = spec.scene.cloud.select(crop.indices());
        let decision = actor.act(
            &Observation {
                crop: &points,
                container: &container,
                cfg,
            },
            &mut rng,
        );
        container = apply_action(&container, decision.action, cfg, &block);
        crop = points_in_container(spec.scene, &container, cfg);
        let outcome = compute_reward_for_crop(spec.scene, &crop, cfg, spec.prior);
        let last = t + 1 == cfg.max_steps;
        steps.push(Step {
            feature: decision.feature,
            action: decision.action,
            log_prob: decision.log_prob,
            value: decision.value,
            reward: outcome.reward,
            done: outcome.done || last,
        });
        if let (Some(mask), Some(fit), Some(chamfer)) = (outcome.mask, outcome.fit, outcome.chamfer) {
            found = Some(MaskRecord {
                scene_id: spec.scene_id.to_string(),
                confidence: MaskRecord::confidence_from_chamfer(chamfer, cfg.chamfer_threshold),
                mask,
                fit: FitSummary {
                    template_id: fit.latent.template_id.clone(),
                    yaw: fit.rotation.yaw(),
                    scale: fit.latent.scale,
                    residual: fit.residual,
                    chamfer,
                },
                discovered_at: spec.discovered_at,
            });
        }
        if outcome.done {
            break;
        }
    }
    (Trajectory { episode, steps }, found)
}
