//! Analytic object prior.
//!
//! Stands in for a learned orientation regressor and shape decoder: a small
//! library of canonical template SDFs, a pose/latent search that fits any
//! point subset to the library, exact SDF queries in the canonical frame,
//! marching-cubes reconstruction and latent sampling.

mod fit;
mod template;

pub use fit::{FitConfig, FitOptions, FitResult};
pub use template::{
    builtin_templates, parse_templates, write_templates, Combine, Primitive, TemplateShape,
    MAX_PRIMITIVES, TEMPLATE_HEADER,
};

use crate::geom::{self, Aabb, GeomError, PointCloud, TriangleMesh, Vec3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::OnceLock;
use thiserror::Error;

pub const ANISOTROPY_BOUNDS: (f64, f64) = (0.7, 1.3);

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("insufficient points for fit ({0})")]
    InsufficientPoints(usize),
    #[error("degenerate input: all points coincide")]
    DegenerateInput,
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("unknown class tag {0:?}")]
    UnknownClass(String),
    #[error("reconstruction produced an empty mesh")]
    EmptyReconstruction,
    #[error("invalid template: {0}")]
    Invalid(String),
    #[error("template file header must be {TEMPLATE_HEADER:?}, found {0:?}")]
    Version(String),
    #[error("template file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Low-dimensional shape code: which template, plus its stretch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub template_id: String,
    /// Fitting byproduct; does not affect the canonical shape.
    pub yaw_hint: f64,
    pub scale: f64,
    pub anisotropy: [f64; 3],
}

impl Latent {
    pub fn new(template_id: impl Into<String>, scale: f64, anisotropy: [f64; 3]) -> Self {
        Self {
            template_id: template_id.into(),
            yaw_hint: 0.0,
            scale,
            anisotropy,
        }
    }

    pub fn unit(template_id: impl Into<String>) -> Self {
        Self::new(template_id, 1.0, [1.0; 3])
    }

    pub fn is_valid(&self) -> bool {
        let (lo, hi) = ANISOTROPY_BOUNDS;
        self.scale > 0.0
            && self.scale.is_finite()
            && self.anisotropy.iter().all(|&a| (lo..=hi).contains(&a))
    }

    /// Per-axis stretch applied to the template.
    pub fn stretch(&self) -> Vec3 {
        Vec3::from(self.anisotropy) * self.scale
    }
}

/// Latent-stretched template SDF. The `min(stretch)` factor keeps it
/// 1-Lipschitz; the zero set is exactly the stretched template surface.
#[inline]
pub(crate) fn stretched_sdf(template: &TemplateShape, stretch: &Vec3, min_stretch: f64, x: &Vec3) -> f64 {
    min_stretch * template.sdf(&x.component_div(stretch))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Cells per axis for reconstruction.
    pub mc_resolution: usize,
    /// Half-width of the reconstruction cube.
    pub recon_half_extent: f64,
    /// Dense samples drawn from the reconstructed surface.
    pub recon_points: usize,
    pub fit: FitConfig,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            mc_resolution: 48,
            recon_half_extent: 0.7,
            recon_points: 4096,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug)]
struct TemplateCache {
    mesh: TriangleMesh,
    surface_centroid: Vec3,
    half_turn_symmetric: bool,
}

/// Template library plus the query interface used by the reward oracle.
#[derive(Debug)]
pub struct Prior {
    templates: Vec<TemplateShape>,
    config: PriorConfig,
    cache: Vec<OnceLock<TemplateCache>>,
}

const TEMPLATE_MESH_RESOLUTION: usize = 64;

impl Prior {
    pub fn new(templates: Vec<TemplateShape>, config: PriorConfig) -> Result<Self, PriorError> {
        if templates.is_empty() {
            return Err(PriorError::Invalid("empty template library".into()));
        }
        let cache = templates.iter().map(|_| OnceLock::new()).collect();
        Ok(Self {
            templates,
            config,
            cache,
        })
    }

    pub fn builtin() -> Self {
        Self::new(builtin_templates(), PriorConfig::default()).expect("builtin library")
    }

    pub fn with_config(config: PriorConfig) -> Self {
        Self::new(builtin_templates(), config).expect("builtin library")
    }

    pub fn from_template_file(path: &Path, config: PriorConfig) -> Result<Self, PriorError> {
        let text = std::fs::read_to_string(path)?;
        Self::new(parse_templates(&text)?, config)
    }

    pub fn templates(&self) -> &[TemplateShape] {
        &self.templates
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn template_index(&self, id: &str) -> Result<usize, PriorError> {
        self.templates
            .iter()
            .position(|t| t.id == id)
            .ok_or_else(|| PriorError::UnknownTemplate(id.to_string()))
    }

    pub fn template(&self, id: &str) -> Result<&TemplateShape, PriorError> {
        Ok(&self.templates[self.template_index(id)?])
    }

    fn cached(&self, index: usize) -> &TemplateCache {
        self.cache[index].get_or_init(|| {
            let t = &self.templates[index];
            let mesh = geom::extract_surface(|p| t.sdf(p), &Aabb::cube(0.55), TEMPLATE_MESH_RESOLUTION)
                .expect("valid grid");
            let mut area = 0.0;
            let mut acc = Vec3::zeros();
            for (k, tri) in mesh.triangles.iter().enumerate() {
                let a = mesh.triangle_area(k);
                let c = (mesh.vertices[tri[0]] + mesh.vertices[tri[1]] + mesh.vertices[tri[2]]) / 3.0;
                acc += c * a;
                area += a;
            }
            let surface_centroid = if area > 0.0 { acc / area } else { Vec3::zeros() };
            let half_turn_symmetric = mesh
                .vertices
                .iter()
                .all(|v| (t.sdf(&Vec3::new(-v.x, -v.y, v.z)) - t.sdf(v)).abs() < 1e-9);
            TemplateCache {
                mesh,
                surface_centroid,
                half_turn_symmetric,
            }
        })
    }

    /// Area-weighted centroid of the unit-scale template surface.
    pub fn surface_centroid(&self, index: usize) -> Vec3 {
        self.cached(index).surface_centroid
    }

    /// Whether the template is unchanged by a half turn about z. Such shapes
    /// are reported with yaw in (-pi/2, pi/2].
    pub fn half_turn_symmetric(&self, index: usize) -> bool {
        self.cached(index).half_turn_symmetric
    }

    /// High-resolution surface of a latent, from the cached template mesh.
    pub fn latent_mesh(&self, latent: &Latent) -> Result<TriangleMesh, PriorError> {
        let index = self.template_index(&latent.template_id)?;
        let stretch = latent.stretch();
        Ok(self.cached(index).mesh.map_vertices(|v| v.component_mul(&stretch)))
    }

    /// Signed distances of canonical-frame points to the latent's surface.
    pub fn sdf_query(&self, latent: &Latent, points: &PointCloud) -> Result<Vec<f64>, PriorError> {
        let t = self.template(&latent.template_id)?;
        let stretch = latent.stretch();
        let m = stretch.min();
        Ok(points.iter().map(|x| stretched_sdf(t, &stretch, m, x)).collect())
    }

    /// Marching-cubes reconstruction of the latent, resampled to `n_points`.
    pub fn reconstruct<R: Rng + ?Sized>(
        &self,
        latent: &Latent,
        n_points: usize,
        rng: &mut R,
    ) -> Result<PointCloud, PriorError> {
        let t = self.template(&latent.template_id)?;
        let stretch = latent.stretch();
        let m = stretch.min();
        let mesh = geom::extract_surface_lipschitz(
            |x| stretched_sdf(t, &stretch, m, x),
            &Aabb::cube(self.config.recon_half_extent),
            self.config.mc_resolution,
        )?;
        if mesh.is_empty() {
            return Err(PriorError::EmptyReconstruction);
        }
        Ok(geom::sample_mesh_surface(&mesh, n_points, rng)?)
    }

    /// Draws a latent: uniform template (optionally restricted to a class),
    /// scale in [0.8, 1.2], per-axis anisotropy in [0.9, 1.1].
    pub fn sample_latent<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        class_tag: Option<&str>,
    ) -> Result<Latent, PriorError> {
        let candidates: Vec<&TemplateShape> = match class_tag {
            Some(tag) => self.templates.iter().filter(|t| t.class_tag == tag).collect(),
            None => self.templates.iter().collect(),
        };
        let chosen = candidates
            .choose(rng)
            .ok_or_else(|| PriorError::UnknownClass(class_tag.unwrap_or_default().to_string()))?;
        let scale = rng.gen_range(0.8..=1.2);
        let anisotropy = [
            rng.gen_range(0.9..=1.1),
            rng.gen_range(0.9..=1.1),
            rng.gen_range(0.9..=1.1),
        ];
        Ok(Latent::new(chosen.id.clone(), scale, anisotropy))
    }

    pub fn class_tags(&self) -> Vec<&str> {
        let mut tags: Vec<&str> = self.templates.iter().map(|t| t.class_tag.as_str()).collect();
        tags.sort_unstable();
        tags.dedup();
        tags
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from_seed;

    #[test]
    fn sdf_query_examples() {
        let prior = Prior::builtin();
        let latent = Latent::unit("crate");
        let pts = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [0.5, 0.2, 0.1], [10.0, 0.0, 0.0]]);
        let d = prior.sdf_query(&latent, &pts).unwrap();
        assert_eq!(d[0], -0.5);
        assert!(d[1].abs() < 1e-9);
        assert!((d[2] - 9.5).abs() < 1e-12);
    }

    #[test]
    fn stretched_surface_is_exact() {
        let prior = Prior::builtin();
        let latent = Latent::new("ball", 1.1, [1.2, 0.9, 1.0]);
        let f = latent.stretch();
        let pts: PointCloud = (0..50)
            .map(|k| {
                let th = k as f64 * 0.37;
                let ph = k as f64 * 0.11;
                Vec3::new(th.cos() * ph.cos(), th.sin() * ph.cos(), ph.sin()).component_mul(&f) * 0.5
            })
            .collect();
        for d in prior.sdf_query(&latent, &pts).unwrap() {
            assert!(d.abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_reconstruction_radii() {
        let prior = Prior::builtin();
        let mut rng = rng_from_seed(5);
        let pts = prior.reconstruct(&Latent::unit("ball"), 2000, &mut rng).unwrap();
        let diag = 3f64.sqrt() * 1.4 / 48.0;
        for p in pts.iter() {
            assert!((p.norm() - 0.5).abs() <= diag);
        }
    }

    #[test]
    fn latent_sampling() {
        let prior = Prior::builtin();
        let a = prior.sample_latent(&mut rng_from_seed(1), None).unwrap();
        let b = prior.sample_latent(&mut rng_from_seed(1), None).unwrap();
        assert_eq!(a, b);
        let mut rng = rng_from_seed(2);
        for _ in 0..1000 {
            let l = prior.sample_latent(&mut rng, None).unwrap();
            assert!(l.is_valid());
            assert!((0.8..=1.2).contains(&l.scale));
            let c = prior.sample_latent(&mut rng, Some("chair-like")).unwrap();
            assert_eq!(prior.template(&c.template_id).unwrap().class_tag, "chair-like");
        }
        assert!(matches!(
            prior.sample_latent(&mut rng, Some("spaceship-like")),
            Err(PriorError::UnknownClass(_))
        ));
    }

    #[test]
    fn unknown_template_is_reported() {
        let prior = Prior::builtin();
        let err = prior.sdf_query(&Latent::unit("nope"), &PointCloud::default()).unwrap_err();
        assert!(matches!(err, PriorError::UnknownTemplate(_)));
    }

    #[test]
    fn half_turn_symmetry() {
        let prior = Prior::builtin();
        let symmetric: Vec<&str> = (0..prior.templates().len())
            .filter(|&i| prior.half_turn_symmetric(i))
            .map(|i| prior.templates()[i].id.as_str())
            .collect();
        assert_eq!(symmetric, ["table", "crate", "ball"]);
    }
}
