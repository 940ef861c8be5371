//! Procedural rooms: a ground rectangle, four walls and 4-8 templated
//! objects placed with bounding-box rejection, sampled to a fixed point
//! budget with per-object ground-truth masks.

mod io;

pub use io::{read_scene, write_scene, SCENE_HEADER};

use crate::geom::{self, Aabb, GeomError, IndexMask, PointCloud, Rotation, TriangleMesh, Vec3};
use crate::prior::{Latent, Prior, PriorError};
use crate::seeding::{child_rng, DetRng};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Object points closer than this to the floor are not sampled (contact
/// regions are invisible to a scanner).
pub const CONTACT_CLEARANCE: f64 = 0.02;
/// Gap kept between any object footprint and the walls.
pub const WALL_MARGIN: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("could not place objects after {rounds} regeneration rounds")]
    PlacementFailed { rounds: usize },
    #[error("scene file header must be {SCENE_HEADER:?}, found {0:?}")]
    Version(String),
    #[error("scene file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGenConfig {
    pub n_objects_range: (usize, usize),
    pub total_points: usize,
    pub aspect_range: (f64, f64),
    /// Half-open (lo, hi].
    pub yaw_range: (f64, f64),
    pub max_attempts: usize,
    pub room_base_size: f64,
    pub wall_height: f64,
    /// Largest side of an object's bounding box, meters.
    pub object_size_range: (f64, f64),
    /// Class tags drawn uniformly per object; empty means every template.
    pub class_mix: Vec<String>,
    pub rescue_rounds: usize,
    /// Store point coordinates as a binary blob instead of text lines.
    pub binary_points: bool,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            n_objects_range: (4, 8),
            total_points: 20_000,
            aspect_range: (0.6, 1.0),
            yaw_range: (-PI, PI),
            max_attempts: 1000,
            room_base_size: 8.0,
            wall_height: 2.5,
            object_size_range: (0.6, 1.2),
            class_mix: Vec::new(),
            rescue_rounds: 10,
            binary_points: false,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::Config(m.to_string()));
        let (nlo, nhi) = self.n_objects_range;
        if nlo > nhi {
            return bad("n_objects_range is empty");
        }
        let (alo, ahi) = self.aspect_range;
        if !(alo > 0.0 && alo <= ahi && ahi.is_finite()) {
            return bad("aspect_range must be a non-empty positive interval");
        }
        if !(self.yaw_range.0 < self.yaw_range.1) {
            return bad("yaw_range is empty");
        }
        let (slo, shi) = self.object_size_range;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return bad("object_size_range must be a non-empty positive interval");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1");
        }
        if !(self.room_base_size > 0.0 && self.wall_height > 0.0) {
            return bad("room dimensions must be positive");
        }
        if self.total_points == 0 {
            return bad("total_points must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub latent: Latent,
    pub yaw: f64,
    /// Scene position of the canonical origin.
    pub position: Vec3,
    /// Meters per canonical unit.
    pub world_scale: f64,
    pub bbox: Aabb,
}

impl ObjectMeta {
    pub fn to_scene(&self, x: &Vec3) -> Vec3 {
        self.position + Rotation::from_yaw(self.yaw).apply(&(x * self.world_scale))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub cloud: PointCloud,
    pub gt_masks: Vec<IndexMask>,
    pub object_meta: Vec<ObjectMeta>,
    pub ground_aspect: f64,
    pub seed: u64,
    /// Regeneration round that succeeded (0 when no rescue was needed).
    pub round: usize,
    /// Ground and walls: x, y span the floor, z spans [0, wall height].
    pub room: Aabb,
    pub config: SceneGenConfig,
}

impl SceneSample {
    /// Object index per point, `None` for ground and walls.
    pub fn labels(&self) -> Vec<Option<usize>> {
        let mut labels = vec![None; self.cloud.len()];
        for (k, m) in self.gt_masks.iter().enumerate() {
            for &i in m.indices() {
                labels[i] = Some(k);
            }
        }
        labels
    }

    pub fn background_count(&self) -> usize {
        self.cloud.len() - self.gt_masks.iter().map(IndexMask::len).sum::<usize>()
    }

    /// Checks the structural invariants, returning the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let cfg = &self.config;
        if self.cloud.len() != cfg.total_points {
            return Err(format!("cloud has {} points, expected {}", self.cloud.len(), cfg.total_points));
        }
        let n = self.gt_masks.len();
        if n < cfg.n_objects_range.0 || n > cfg.n_objects_range.1 || n != self.object_meta.len() {
            return Err(format!("object count {n} outside configured range"));
        }
        let mut seen = vec![false; self.cloud.len()];
        for m in &self.gt_masks {
            if m.cloud_len() != self.cloud.len() {
                return Err("mask cloud length mismatch".into());
            }
            for &i in m.indices() {
                if i >= seen.len() {
                    return Err(format!("mask index {i} out of bounds"));
                }
                if seen[i] {
                    return Err(format!("point {i} appears in two masks"));
                }
                seen[i] = true;
            }
        }
        let (alo, ahi) = cfg.aspect_range;
        if !(alo..=ahi).contains(&self.ground_aspect) {
            return Err(format!("ground aspect {} outside range", self.ground_aspect));
        }
        for (k, o) in self.object_meta.iter().enumerate() {
            if !(o.yaw > -PI && o.yaw <= PI) {
                return Err(format!("object {k} yaw {} outside (-pi, pi]", o.yaw));
            }
            for other in &self.object_meta[..k] {
                if o.bbox.overlaps(&other.bbox) {
                    return Err(format!("object {k} overlaps an earlier object"));
                }
            }
        }
        Ok(())
    }
}

struct Placed {
    meta: ObjectMeta,
    mesh: TriangleMesh,
}

/// Generates the scene for `seed`. A room whose objects cannot all be
/// placed is dropped and regenerated from the next derived seed.
pub fn generate_scene(cfg: &SceneGenConfig, prior: &Prior, seed: u64) -> Result<SceneSample, SceneError> {
    cfg.validate()?;
    for round in 0..=cfg.rescue_rounds {
        let mut rng = child_rng(seed, round as u64);
        if let Some(scene) = try_generate(cfg, prior, &mut rng, seed, round)? {
            return Ok(scene);
        }
    }
    Err(SceneError::PlacementFailed {
        rounds: cfg.rescue_rounds,
    })
}

fn sample_yaw(cfg: &SceneGenConfig, rng: &mut DetRng) -> f64 {
    let (lo, hi) = cfg.yaw_range;
    // (lo, hi]: reflect a draw from [lo, hi).
    let yaw = hi - rng.gen::<f64>() * (hi - lo);
    if yaw > PI {
        geom::normalize_angle(yaw)
    } else {
        yaw
    }
}

fn try_generate(
    cfg: &SceneGenConfig,
    prior: &Prior,
    rng: &mut DetRng,
    seed: u64,
    round: usize,
) -> Result<Option<SceneSample>, SceneError> {
    let aspect = rng.gen_range(cfg.aspect_range.0..=cfg.aspect_range.1);
    let half_w = cfg.room_base_size / 2.0;
    let half_d = cfg.room_base_size * aspect / 2.0;
    let room = Aabb::new([-half_w, -half_d, 0.0], [half_w, half_d, cfg.wall_height]);
    let n_objects = rng.gen_range(cfg.n_objects_range.0..=cfg.n_objects_range.1);

    let mut placed: Vec<Placed> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let latent = match cfg.class_mix.choose(rng) {
            Some(tag) => prior.sample_latent(rng, Some(tag))?,
            None => prior.sample_latent(rng, None)?,
        };
        let canonical = prior.latent_mesh(&latent)?;
        let cb = canonical.bounds().ok_or(GeomError::EmptyMesh)?;
        let size = rng.gen_range(cfg.object_size_range.0..=cfg.object_size_range.1);
        let world_scale = size / cb.max_extent();
        let yaw = sample_yaw(cfg, rng);
        let rot = Rotation::from_yaw(yaw);
        let local = canonical.map_vertices(|v| rot.apply(&(v * world_scale)));
        let lb = local.bounds().ok_or(GeomError::EmptyMesh)?;
        let x_range = (room.min[0] + WALL_MARGIN - lb.min[0], room.max[0] - WALL_MARGIN - lb.max[0]);
        let y_range = (room.min[1] + WALL_MARGIN - lb.min[1], room.max[1] - WALL_MARGIN - lb.max[1]);
        let mut spot = None;
        for _ in 0..cfg.max_attempts {
            if x_range.0 > x_range.1 || y_range.0 > y_range.1 {
                break;
            }
            let position = Vec3::new(
                rng.gen_range(x_range.0..=x_range.1),
                rng.gen_range(y_range.0..=y_range.1),
                -lb.min[2],
            );
            let bbox = Aabb::new(
                [lb.min[0] + position.x, lb.min[1] + position.y, 0.0],
                [lb.max[0] + position.x, lb.max[1] + position.y, lb.max[2] - lb.min[2]],
            );
            if placed.iter().all(|p| !p.meta.bbox.overlaps(&bbox)) {
                spot = Some((position, bbox));
                break;
            }
        }
        let Some((position, bbox)) = spot else {
            return Ok(None);
        };
        let mesh = local.map_vertices(|v| v + position);
        placed.push(Placed {
            meta: ObjectMeta {
                latent,
                yaw,
                position,
                world_scale,
                bbox,
            },
            mesh,
        });
    }

    // Area-proportional budget: ground, four walls, then objects.
    let (w, d, h) = (2.0 * half_w, 2.0 * half_d, cfg.wall_height);
    let mut areas = vec![w * d, w * h, w * h, d * h, d * h];
    areas.extend(placed.iter().map(|p| p.mesh.area()));
    let counts = largest_remainder(&areas, cfg.total_points);

    let mut points: Vec<Vec3> = Vec::with_capacity(cfg.total_points);
    let mut labels: Vec<Option<usize>> = Vec::with_capacity(cfg.total_points);
    let planes = [
        (Vec3::new(-half_w, -half_d, 0.0), Vec3::new(w, 0.0, 0.0), Vec3::new(0.0, d, 0.0)),
        (Vec3::new(-half_w, -half_d, 0.0), Vec3::new(w, 0.0, 0.0), Vec3::new(0.0, 0.0, h)),
        (Vec3::new(-half_w, half_d, 0.0), Vec3::new(w, 0.0, 0.0), Vec3::new(0.0, 0.0, h)),
        (Vec3::new(-half_w, -half_d, 0.0), Vec3::new(0.0, d, 0.0), Vec3::new(0.0, 0.0, h)),
        (Vec3::new(half_w, -half_d, 0.0), Vec3::new(0.0, d, 0.0), Vec3::new(0.0, 0.0, h)),
    ];
    for (k, (origin, u, v)) in planes.iter().enumerate() {
        for _ in 0..counts[k] {
            points.push(origin + u * rng.gen::<f64>() + v * rng.gen::<f64>());
            labels.push(None);
        }
    }
    for (k, p) in placed.iter().enumerate() {
        let want = counts[5 + k];
        let mut got = 0;
        while got < want {
            let batch = geom::sample_mesh_surface(&p.mesh, (want - got).max(32), rng)?;
            for q in batch.points {
                if got < want && q.z >= CONTACT_CLEARANCE {
                    points.push(q);
                    labels.push(Some(k));
                    got += 1;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(rng);
    let cloud = PointCloud::new(order.iter().map(|&i| points[i]).collect());
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); placed.len()];
    for (new_index, &old) in order.iter().enumerate() {
        if let Some(k) = labels[old] {
            members[k].push(new_index);
        }
    }
    let n = cloud.len();
    let gt_masks = members
        .into_iter()
        .map(|m| IndexMask::from_unsorted(m, n))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Some(SceneSample {
        cloud,
        gt_masks,
        object_meta: placed.into_iter().map(|p| p.meta).collect(),
        ground_aspect: aspect,
        seed,
        round,
        room,
        config: cfg.clone(),
    }))
}

/// Splits `total` into integer parts proportional to `weights`, handing the
/// leftover units to the largest fractional remainders (ties to the lower
/// index).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || !(sum > 0.0) {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_is_exact() {
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.5, 0.25, 0.25], 8), vec![4, 2, 2]);
        assert_eq!(largest_remainder(&[2.0, 1.0], 0), vec![0, 0]);
        assert_eq!(largest_remainder(&[0.0, 0.0], 5), vec![0, 0]);
    }

    #[test]
    fn default_scenes_hold_invariants() {
        let prior = Prior::builtin();
        let cfg = SceneGenConfig::default();
        for seed in 0..20 {
            let scene = generate_scene(&cfg, &prior, seed).unwrap();
            scene.check_invariants().unwrap();
            let object_points: usize = scene.gt_masks.iter().map(IndexMask::len).sum();
            assert_eq!(object_points + scene.background_count(), cfg.total_points);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let prior = Prior::builtin();
        let cfg = SceneGenConfig::default();
        let a = generate_scene(&cfg, &prior, 42).unwrap();
        let b = generate_scene(&cfg, &prior, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.cloud, generate_scene(&cfg, &prior, 43).unwrap().cloud);
    }

    #[test]
    fn single_object_room() {
        let prior = Prior::builtin();
        let cfg = SceneGenConfig {
            n_objects_range: (1, 1),
            room_base_size: 2.0,
            aspect_range: (1.0, 1.0),
            ..Default::default()
        };
        for seed in 0..10 {
            let scene = generate_scene(&cfg, &prior, seed).unwrap();
            assert_eq!(scene.gt_masks.len(), 1);
            let labels = scene.labels();
            for (i, p) in scene.cloud.iter().enumerate() {
                let on_background = p.z == 0.0 || p.x.abs() == 1.0 || p.y.abs() == 1.0;
                assert_eq!(labels[i].is_none(), on_background, "point {i} at {p:?}");
            }
        }
    }

    #[test]
    fn object_points_lie_on_their_surfaces() {
        let prior = Prior::builtin();
        let scene = generate_scene(&SceneGenConfig::default(), &prior, 7).unwrap();
        for (m, meta) in scene.gt_masks.iter().zip(&scene.object_meta) {
            let rot = Rotation::from_yaw(-meta.yaw);
            let canonical: PointCloud = m
                .indices()
                .iter()
                .map(|&i| rot.apply(&(scene.cloud.points[i] - meta.position)) / meta.world_scale)
                .collect();
            let d = prior.sdf_query(&meta.latent, &canonical).unwrap();
            // Within a marching-cubes cell of the analytic surface.
            let cell = 3f64.sqrt() * 1.1 / 64.0 * 1.3;
            assert!(d.iter().all(|v| v.abs() < cell));
            let mut grown = meta.bbox;
            grown.min.iter_mut().for_each(|v| *v -= 1e-9);
            grown.max.iter_mut().for_each(|v| *v += 1e-9);
            for &i in m.indices() {
                assert!(grown.contains(&scene.cloud.points[i]));
            }
        }
    }

    #[test]
    fn impossible_rooms_fail_after_rescue() {
        let prior = Prior::builtin();
        let cfg = SceneGenConfig {
            n_objects_range: (8, 8),
            room_base_size: 1.5,
            max_attempts: 5,
            rescue_rounds: 2,
            ..Default::default()
        };
        assert!(matches!(
            generate_scene(&cfg, &prior, 1),
            Err(SceneError::PlacementFailed { rounds: 2 })
        ));
    }

    #[test]
    fn config_validation() {
        let cfg = SceneGenConfig {
            n_objects_range: (5, 4),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = SceneGenConfig {
            max_attempts: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
