//! The discovery environment: a vertical cylinder ("container") that moves
//! over the floor plan and resizes, cropping scene points. Each post-action
//! crop is scored by the shape prior: fit, carve, refit, reconstruct and
//! compare.

mod rollout;

pub use rollout::{rollout, Actor, Decision, Observation, RolloutOutput, RolloutSpec, Step, Trajectory, UniformActor};

use crate::geom::{self, IndexMask, PointCloud, Vec3};
use crate::prior::{FitOptions, FitResult, Prior};
use crate::sceneforge::SceneSample;
use crate::seeding::rng_from_seed;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid env config: {0}")]
    Config(String),
    #[error("bad action index {0}")]
    Action(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Move {
    Forward,
    Backward,
    Left,
    Right,
    Pause,
}

impl Move {
    pub const ALL: [Move; 5] = [Move::Forward, Move::Backward, Move::Left, Move::Right, Move::Pause];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self, EnvError> {
        Self::ALL.get(i).copied().ok_or(EnvError::Action(i))
    }

    pub fn inverse(self) -> Self {
        match self {
            Move::Forward => Move::Backward,
            Move::Backward => Move::Forward,
            Move::Left => Move::Right,
            Move::Right => Move::Left,
            Move::Pause => Move::Pause,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Resize {
    Enlarge,
    Reduce,
    Keep,
}

impl Resize {
    pub const ALL: [Resize; 3] = [Resize::Enlarge, Resize::Reduce, Resize::Keep];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self, EnvError> {
        Self::ALL.get(i).copied().ok_or(EnvError::Action(i))
    }
}

/// One action from each group, applied in the same step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionPair {
    pub movement: Move,
    pub resize: Resize,
}

impl ActionPair {
    pub fn new(movement: Move, resize: Resize) -> Self {
        Self { movement, resize }
    }
}

/// Cylinder centre on the floor plan and its diameter, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Container {
    pub cx: f64,
    pub cy: f64,
    pub cd: f64,
}

/// A square tile of the floor plan that an agent starts in and stays near.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block {
    pub index: usize,
    pub min: [f64; 2],
    pub max: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub step_size: f64,
    pub size_ratio: f64,
    /// Carving threshold on |sdf|, canonical units.
    pub sdf_threshold: f64,
    /// Acceptance threshold on the chamfer distance, canonical units.
    pub chamfer_threshold: f64,
    pub reward_pos: f64,
    pub reward_neg: f64,
    pub max_steps: usize,
    pub init_cd: f64,
    pub block_size: f64,
    pub n_agents: usize,
    pub min_points: usize,
    pub cd_min: f64,
    pub cd_max: f64,
    /// Drop floor and wall points from crops.
    pub filter_background: bool,
    pub background_band: f64,
    /// Seed for the dense reconstruction sample, fixed so rewards are pure.
    pub recon_seed: u64,
    /// Isolation radius as a multiple of the mask's median point spacing.
    pub isolation_factor: f64,
    /// Largest accepted ratio of non-mask foreground points within the
    /// isolation radius of the mask to the mask size.
    pub max_spill: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            step_size: 0.3,
            size_ratio: 0.25,
            sdf_threshold: 0.02,
            chamfer_threshold: 0.14,
            reward_pos: 10.0,
            reward_neg: -1.0,
            max_steps: 8,
            init_cd: 2.0,
            block_size: 2.0,
            n_agents: 50,
            min_points: 16,
            cd_min: 0.2,
            cd_max: 4.0,
            filter_background: true,
            background_band: 0.015,
            recon_seed: 0,
            isolation_factor: 4.0,
            max_spill: 0.15,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::Config(m.to_string()));
        let positive = [
            ("step_size", self.step_size),
            ("sdf_threshold", self.sdf_threshold),
            ("chamfer_threshold", self.chamfer_threshold),
            ("init_cd", self.init_cd),
            ("block_size", self.block_size),
            ("cd_min", self.cd_min),
            ("background_band", self.background_band),
            ("isolation_factor", self.isolation_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !(self.size_ratio > 0.0 && self.size_ratio < 1.0) {
            return bad("size_ratio must lie in (0, 1)");
        }
        if !(self.reward_neg < 0.0 && 0.0 < self.reward_pos) {
            return bad("rewards must satisfy reward_neg < 0 < reward_pos");
        }
        if !(self.max_spill >= 0.0) {
            return bad("max_spill must be non-negative");
        }
        if self.max_steps == 0 || self.n_agents == 0 {
            return bad("max_steps and n_agents must be at least 1");
        }
        if !(self.cd_min <= self.init_cd && self.init_cd <= self.cd_max) {
            return bad("init_cd must lie in [cd_min, cd_max]");
        }
        if self.sdf_threshold >= 0.5 || self.chamfer_threshold >= 1.0 || self.step_size > self.block_size {
            return bad("thresholds or step size out of range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardOutcome {
    pub reward: f64,
    pub done: bool,
    /// Carved points as scene indices; present only on success.
    pub mask: Option<IndexMask>,
    /// The refit on carved points, when the pipeline got that far.
    pub fit: Option<FitResult>,
    pub chamfer: Option<f64>,
}

impl RewardOutcome {
    fn negative(cfg: &EnvConfig) -> Self {
        Self {
            reward: cfg.reward_neg,
            done: false,
            mask: None,
            fit: None,
            chamfer: None,
        }
    }
}

/// Tiles the room's floor plan into `block_size` squares (row-major, edge
/// tiles clipped to the room).
pub fn blocks(scene: &SceneSample, cfg: &EnvConfig) -> Vec<Block> {
    let (min, max) = (scene.room.min, scene.room.max);
    let nx = (((max[0] - min[0]) / cfg.block_size).ceil() as usize).max(1);
    let ny = (((max[1] - min[1]) / cfg.block_size).ceil() as usize).max(1);
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let lo = [min[0] + i as f64 * cfg.block_size, min[1] + j as f64 * cfg.block_size];
            out.push(Block {
                index: out.len(),
                min: lo,
                max: [(lo[0] + cfg.block_size).min(max[0]), (lo[1] + cfg.block_size).min(max[1])],
            });
        }
    }
    out
}

/// Block assigned to agent `agent`: blocks are cycled.
pub fn block_for_agent(blocks: &[Block], agent: usize) -> Block {
    blocks[agent % blocks.len()]
}

pub fn random_start<R: Rng + ?Sized>(block: &Block, cfg: &EnvConfig, rng: &mut R) -> Container {
    Container {
        cx: block.min[0] + rng.gen::<f64>() * (block.max[0] - block.min[0]),
        cy: block.min[1] + rng.gen::<f64>() * (block.max[1] - block.min[1]),
        cd: cfg.init_cd,
    }
}

/// One container per agent, each at a uniform position in its block.
pub fn reset<R: Rng + ?Sized>(scene: &SceneSample, cfg: &EnvConfig, rng: &mut R) -> Vec<(Container, Block)> {
    let tiles = blocks(scene, cfg);
    (0..cfg.n_agents)
        .map(|a| {
            let b = block_for_agent(&tiles, a);
            (random_start(&b, cfg, rng), b)
        })
        .collect()
}

/// Moves and resizes in one step, then clamps the centre to the block
/// grown by half a block and the diameter to `[cd_min, cd_max]`.
pub fn apply_action(c: &Container, action: ActionPair, cfg: &EnvConfig, block: &Block) -> Container {
    let (mut cx, mut cy) = (c.cx, c.cy);
    match action.movement {
        Move::Forward => cx += cfg.step_size,
        Move::Backward => cx -= cfg.step_size,
        Move::Left => cy += cfg.step_size,
        Move::Right => cy -= cfg.step_size,
        Move::Pause => {}
    }
    let cd = match action.resize {
        Resize::Enlarge => c.cd * (1.0 + cfg.size_ratio),
        Resize::Reduce => c.cd * (1.0 - cfg.size_ratio),
        Resize::Keep => c.cd,
    };
    let r = cfg.block_size / 2.0;
    Container {
        cx: cx.clamp(block.min[0] - r, block.max[0] + r),
        cy: cy.clamp(block.min[1] - r, block.max[1] + r),
        cd: cd.clamp(cfg.cd_min, cfg.cd_max),
    }
}

pub fn is_background(p: &Vec3, scene: &SceneSample, cfg: &EnvConfig) -> bool {
    let band = cfg.background_band;
    let (min, max) = (scene.room.min, scene.room.max);
    p.z < min[2] + band
        || p.x < min[0] + band
        || p.x > max[0] - band
        || p.y < min[1] + band
        || p.y > max[1] - band
}

/// Points whose horizontal distance to the centre is at most `cd / 2`,
/// without background points when filtering is on.
pub fn points_in_container(scene: &SceneSample, c: &Container, cfg: &EnvConfig) -> IndexMask {
    let r2 = (c.cd / 2.0).powi(2);
    let indices: Vec<usize> = scene
        .cloud
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let (dx, dy) = (p.x - c.cx, p.y - c.cy);
            dx * dx + dy * dy <= r2 && !(cfg.filter_background && is_background(p, scene, cfg))
        })
        .map(|(i, _)| i)
        .collect();
    IndexMask::new(indices, scene.cloud.len()).expect("indices are increasing and in bounds")
}

/// Scores a container by querying the prior: crop, fit, carve, refit,
/// reconstruct and compare. Every failure is a negative reward.
pub fn compute_reward(scene: &SceneSample, c: &Container, cfg: &EnvConfig, prior: &Prior) -> RewardOutcome {
    let crop = points_in_container(scene, c, cfg);
    compute_reward_for_crop(scene, &crop, cfg, prior)
}

pub(crate) fn compute_reward_for_crop(
    scene: &SceneSample,
    crop: &IndexMask,
    cfg: &EnvConfig,
    prior: &Prior,
) -> RewardOutcome {
    let fail = RewardOutcome::negative(cfg);
    if crop.len() < cfg.min_points {
        return fail;
    }
    let points = scene.cloud.select(crop.indices());
    let Ok(fit) = prior.fit(&points) else {
        return fail;
    };
    let canonical = fit.cloud_to_canonical(&points);
    let Ok(sdf) = prior.sdf_query(&fit.latent, &canonical) else {
        return fail;
    };
    let carved: Vec<usize> = crop
        .indices()
        .iter()
        .zip(&sdf)
        .filter(|(_, d)| d.abs() < cfg.sdf_threshold)
        .map(|(&i, _)| i)
        .collect();
    if carved.len() < cfg.min_points {
        return fail;
    }
    let carved_points = scene.cloud.select(&carved);
    let template = prior.template_index(&fit.latent.template_id).ok();
    let opts = FitOptions {
        templates: template.map(|t| vec![t]),
        yaw_window: Some((fit.rotation.yaw(), 1)),
    };
    let Ok(refit) = prior.fit_with(&carved_points, &opts) else {
        return fail;
    };
    let mut rng = rng_from_seed(cfg.recon_seed);
    let Ok(dense) = prior.reconstruct(&refit.latent, prior.config().recon_points, &mut rng) else {
        return fail;
    };
    let carved_canonical = refit.cloud_to_canonical(&carved_points);
    let Ok(chamfer) = geom::chamfer_distance(&carved_canonical, &dense) else {
        return fail;
    };
    if chamfer < cfg.chamfer_threshold && spill(scene, &carved, &carved_points, cfg) <= cfg.max_spill {
        RewardOutcome {
            reward: cfg.reward_pos,
            done: true,
            mask: Some(IndexMask::new(carved, scene.cloud.len()).expect("carved indices follow crop order")),
            fit: Some(refit),
            chamfer: Some(chamfer),
        }
    } else {
        RewardOutcome {
            fit: Some(refit),
            chamfer: Some(chamfer),
            ..fail
        }
    }
}

/// Foreground points outside the mask but near it, per mask point. "Near"
/// is `isolation_factor` times the median spacing of the mask points. A
/// fragment of a larger surface scores high.
pub fn spill(scene: &SceneSample, mask: &[usize], mask_points: &PointCloud, cfg: &EnvConfig) -> f64 {
    let Some(b) = mask_points.bounds() else {
        return f64::INFINITY;
    };
    let tree = geom::KdTree::build(&mask_points.points);
    let mut spacing: Vec<f64> = mask_points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| tree.nearest_other(p, i).map(|(_, d2)| d2))
        .collect();
    if spacing.is_empty() {
        return f64::INFINITY;
    }
    let mid = spacing.len() / 2;
    let (_, median, _) = spacing.select_nth_unstable_by(mid, f64::total_cmp);
    let r = cfg.isolation_factor * median.sqrt();
    let mut near = 0usize;
    let mut k = 0;
    for (i, p) in scene.cloud.iter().enumerate() {
        while k < mask.len() && mask[k] < i {
            k += 1;
        }
        if k < mask.len() && mask[k] == i {
            continue;
        }
        let outside = (0..3).any(|a| p[a] < b.min[a] - r || p[a] > b.max[a] + r);
        if outside || (cfg.filter_background && is_background(p, scene, cfg)) {
            continue;
        }
        if tree.nearest(p).is_some_and(|(_, d2)| d2 < r * r) {
            near += 1;
        }
    }
    near as f64 / mask.len() as f64
}

/// Crop of scene points for an observation, scene frame.
pub fn crop_points(scene: &SceneSample, mask: &IndexMask) -> PointCloud {
    scene.cloud.select(mask.indices())
}
