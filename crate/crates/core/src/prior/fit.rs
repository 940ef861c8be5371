//! Pose and latent search against the template library.
//!
//! Input points are normalized (centroid to the origin, largest bounding-box
//! side to 1), then every template is scored on a yaw x scale grid with a
//! trimmed mean |SDF| residual. The best candidates are polished with a
//! golden-section yaw search followed by coordinate descent over yaw, scale,
//! anisotropy and a translation offset.

use super::{stretched_sdf, Latent, Prior, PriorError, TemplateShape, ANISOTROPY_BOUNDS};
use crate::geom::{PointCloud, Rotation, Vec3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub yaw_bins: usize,
    pub scales: Vec<f64>,
    /// Fraction of smallest |sdf| values averaged into the residual.
    pub trim: f64,
    pub min_points: usize,
    /// Subsample size for the grid stage.
    pub search_points: usize,
    /// Subsample size for refinement.
    pub refine_points: usize,
    /// Number of templates carried from the grid into refinement.
    pub refine_candidates: usize,
    pub sweeps: usize,
    /// Levenberg-Marquardt iterations after coordinate descent.
    pub polish_iters: usize,
    pub scale_bounds: (f64, f64),
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            yaw_bins: 36,
            scales: vec![0.8, 1.0, 1.2],
            trim: 0.9,
            min_points: 16,
            search_points: 64,
            refine_points: 200,
            refine_candidates: 3,
            sweeps: 3,
            polish_iters: 8,
            scale_bounds: (0.5, 1.6),
        }
    }
}

/// Restricts the search, e.g. when refitting a carved subset.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub templates: Option<Vec<usize>>,
    /// Centre yaw and number of grid bins searched on either side of it.
    pub yaw_window: Option<(f64, usize)>,
}

/// Pose, latent and normalization mapping scene points into the canonical
/// frame of the fitted latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub rotation: Rotation,
    pub latent: Latent,
    /// Trimmed mean |sdf| over all fitted points, canonical units.
    pub residual: f64,
    /// Offset in the normalized frame.
    pub translation: Vec3,
    /// Scene units to canonical units.
    pub norm_scale: f64,
    /// Centroid of the fitted points, scene frame.
    pub centroid: Vec3,
}

impl FitResult {
    pub fn to_canonical(&self, p: &Vec3) -> Vec3 {
        self.rotation
            .inverse()
            .apply(&((p - self.centroid) * self.norm_scale - self.translation))
    }

    pub fn to_scene(&self, x: &Vec3) -> Vec3 {
        self.centroid + (self.rotation.apply(x) + self.translation) / self.norm_scale
    }

    pub fn cloud_to_canonical(&self, cloud: &PointCloud) -> PointCloud {
        cloud.iter().map(|p| self.to_canonical(p)).collect()
    }

    pub fn cloud_to_scene(&self, cloud: &PointCloud) -> PointCloud {
        cloud.iter().map(|x| self.to_scene(x)).collect()
    }
}

const N_PARAMS: usize = 8;
const YAW: usize = 0;
const SCALE: usize = 1;

/// yaw, scale, anisotropy xyz, offset xyz.
type Params = [f64; N_PARAMS];

struct Objective<'a> {
    template: &'a TemplateShape,
    centroid: Vec3,
    trim: f64,
    buf: Vec<f64>,
}

impl<'a> Objective<'a> {
    fn new(template: &'a TemplateShape, centroid: Vec3, trim: f64) -> Self {
        Self {
            template,
            centroid,
            trim,
            buf: Vec::new(),
        }
    }

    /// Normalized-frame translation implied by the parameters: the stretched
    /// template centroid lands on the origin, shifted by the offset.
    fn translation(&self, p: &Params) -> Vec3 {
        let stretch = stretch_of(p);
        -Rotation::from_yaw(p[YAW]).apply(&self.centroid.component_mul(&stretch)) + Vec3::new(p[5], p[6], p[7])
    }

    fn signed(&self, p: &Params, points: &[Vec3], out: &mut Vec<f64>) {
        let stretch = stretch_of(p);
        let m = stretch.min();
        let t = self.translation(p);
        let (s, c) = (-p[YAW]).sin_cos();
        out.clear();
        out.extend(points.iter().map(|q| {
            let d = q - t;
            let x = Vec3::new(c * d.x - s * d.y, s * d.x + c * d.y, d.z);
            stretched_sdf(self.template, &stretch, m, &x)
        }));
    }

    fn eval(&mut self, p: &Params, points: &[Vec3]) -> f64 {
        let mut buf = std::mem::take(&mut self.buf);
        self.signed(p, points, &mut buf);
        buf.iter_mut().for_each(|v| *v = v.abs());
        let r = trimmed_mean(&mut buf, self.trim);
        self.buf = buf;
        r
    }
}

fn stretch_of(p: &Params) -> Vec3 {
    Vec3::new(p[2], p[3], p[4]) * p[SCALE]
}

/// Mean of the smallest `ceil(trim * n)` values. Reorders `values`.
pub(crate) fn trimmed_mean(values: &mut [f64], trim: f64) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::INFINITY;
    }
    let k = ((trim * n as f64).ceil() as usize).clamp(1, n);
    if k < n {
        values.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    }
    values[..k].iter().sum::<f64>() / k as f64
}

fn subsample(points: &[Vec3], n: usize) -> Vec<Vec3> {
    if points.len() <= n {
        return points.to_vec();
    }
    (0..n).map(|k| points[k * points.len() / n]).collect()
}

impl Prior {
    /// Fits pose and latent to scene-frame points over the whole library.
    pub fn fit(&self, points: &PointCloud) -> Result<FitResult, PriorError> {
        self.fit_with(points, &FitOptions::default())
    }

    pub fn fit_with(&self, points: &PointCloud, opts: &FitOptions) -> Result<FitResult, PriorError> {
        let cfg = &self.config().fit;
        if points.len() < cfg.min_points {
            return Err(PriorError::InsufficientPoints(points.len()));
        }
        let centroid = points.centroid().ok_or(PriorError::InsufficientPoints(0))?;
        let extent = points.bounds().map(|b| b.max_extent()).unwrap_or(0.0);
        if !(extent > 1e-12) {
            return Err(PriorError::DegenerateInput);
        }
        let norm_scale = 1.0 / extent;
        let normalized: Vec<Vec3> = points.iter().map(|p| (p - centroid) * norm_scale).collect();
        let coarse = subsample(&normalized, cfg.search_points);
        let fine = subsample(&normalized, cfg.refine_points);

        let template_ids: Vec<usize> = match &opts.templates {
            Some(ids) => ids.clone(),
            None => (0..self.templates().len()).collect(),
        };
        let bin = 2.0 * PI / cfg.yaw_bins as f64;
        let yaws: Vec<f64> = match opts.yaw_window {
            Some((center, half)) => (-(half as i64)..=half as i64)
                .map(|k| center + k as f64 * bin)
                .collect(),
            None => (0..cfg.yaw_bins).map(|k| -PI + k as f64 * bin).collect(),
        };

        // Grid stage: best scale per (template, yaw) cell.
        let mut grid: Vec<(f64, usize, Params)> = Vec::new();
        for &ti in &template_ids {
            let template = self
                .templates()
                .get(ti)
                .ok_or_else(|| PriorError::UnknownTemplate(format!("#{ti}")))?;
            let mut obj = Objective::new(template, self.surface_centroid(ti), cfg.trim);
            for &yaw in &yaws {
                let mut best: Option<(f64, Params)> = None;
                for &scale in &cfg.scales {
                    let p = [yaw, scale, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
                    let score = obj.eval(&p, &coarse);
                    if best.map_or(true, |(b, _)| score < b) {
                        best = Some((score, p));
                    }
                }
                if let Some((score, p)) = best {
                    grid.push((score, ti, p));
                }
            }
        }
        grid.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        // Distinct starts: skip cells adjacent to an already chosen one.
        let mut candidates: Vec<(f64, usize, Params)> = Vec::new();
        for cell in grid {
            if candidates.len() >= cfg.refine_candidates.max(1) {
                break;
            }
            let near = candidates
                .iter()
                .any(|c| c.1 == cell.1 && crate::geom::angle_diff(c.2[YAW], cell.2[YAW]) < 1.5 * bin);
            if !near {
                candidates.push(cell);
            }
        }

        let mut best: Option<(f64, usize, Params)> = None;
        for (_, ti, start) in candidates {
            let template = &self.templates()[ti];
            let mut obj = Objective::new(template, self.surface_centroid(ti), cfg.trim);
            let p = self.refine(&mut obj, start, &fine, bin);
            let residual = obj.eval(&p, &normalized);
            if best.map_or(true, |(b, bi, _)| residual < b || (residual == b && ti < bi)) {
                best = Some((residual, ti, p));
            }
        }
        let (residual, ti, p) = best.ok_or_else(|| PriorError::Invalid("no templates to fit".into()))?;
        let obj = Objective::new(&self.templates()[ti], self.surface_centroid(ti), cfg.trim);
        let mut rotation = Rotation::from_yaw(p[YAW]);
        if self.half_turn_symmetric(ti) && !(-PI / 2.0 < rotation.yaw() && rotation.yaw() <= PI / 2.0) {
            rotation = Rotation::from_yaw(rotation.yaw() + PI);
        }
        Ok(FitResult {
            rotation,
            latent: Latent {
                template_id: self.templates()[ti].id.clone(),
                yaw_hint: rotation.yaw(),
                scale: p[SCALE],
                anisotropy: [p[2], p[3], p[4]],
            },
            residual,
            translation: obj.translation(&p),
            norm_scale,
            centroid,
        })
    }

    fn refine(&self, obj: &mut Objective<'_>, start: Params, points: &[Vec3], bin: f64) -> Params {
        let cfg = &self.config().fit;
        let mut p = start;

        // Golden-section search on yaw within one grid bin either side.
        let ratio = (5f64.sqrt() - 1.0) / 2.0;
        let (mut lo, mut hi) = (p[YAW] - bin, p[YAW] + bin);
        let at = |obj: &mut Objective<'_>, yaw: f64, base: &Params| {
            let mut q = *base;
            q[YAW] = yaw;
            obj.eval(&q, points)
        };
        let mut x1 = hi - ratio * (hi - lo);
        let mut x2 = lo + ratio * (hi - lo);
        let mut f1 = at(obj, x1, &p);
        let mut f2 = at(obj, x2, &p);
        for _ in 0..12 {
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - ratio * (hi - lo);
                f1 = at(obj, x1, &p);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + ratio * (hi - lo);
                f2 = at(obj, x2, &p);
            }
        }
        let mut best = obj.eval(&p, points);
        let (yaw, f) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
        if f < best {
            p[YAW] = yaw;
            best = f;
        }

        let initial: Params = [1.5f64.to_radians(), 0.04, 0.04, 0.04, 0.04, 0.03, 0.03, 0.03];
        let mut steps = initial;
        let (alo, ahi) = ANISOTROPY_BOUNDS;
        let clamp = |i: usize, v: f64| match i {
            SCALE => v.clamp(cfg.scale_bounds.0, cfg.scale_bounds.1),
            2..=4 => v.clamp(alo, ahi),
            _ => v,
        };
        for _ in 0..cfg.sweeps {
            for i in 0..N_PARAMS {
                let h = steps[i];
                let mut improved = false;
                for dir in [1.0, -1.0] {
                    // Keep stepping, doubling the stride, while the residual drops.
                    let mut stride = h;
                    for _ in 0..4 {
                        let mut q = p;
                        q[i] = clamp(i, p[i] + dir * stride);
                        if q[i] == p[i] {
                            break;
                        }
                        let f = obj.eval(&q, points);
                        if f >= best {
                            break;
                        }
                        best = f;
                        p = q;
                        improved = true;
                        stride *= 2.0;
                    }
                    if improved {
                        break;
                    }
                }
                steps[i] = if improved { (h * 1.5).min(2.0 * initial[i]) } else { h * 0.4 };
            }
        }
        self.polish(obj, p, best, points, &clamp)
    }

    /// Levenberg-Marquardt on the signed distances of the current inliers
    /// (the trimmed fraction). Steps are kept only if the trimmed residual
    /// drops.
    fn polish(
        &self,
        obj: &mut Objective<'_>,
        mut p: Params,
        mut best: f64,
        points: &[Vec3],
        clamp: &dyn Fn(usize, f64) -> f64,
    ) -> Params {
        const H: f64 = 1e-6;
        let mut lambda = 1e-3;
        let mut r = Vec::new();
        let mut shifted = Vec::new();
        for _ in 0..self.config().fit.polish_iters {
            obj.signed(&p, points, &mut r);
            let mut order: Vec<usize> = (0..r.len()).collect();
            let k = ((obj.trim * r.len() as f64).ceil() as usize).clamp(1, r.len());
            if k < r.len() {
                order.select_nth_unstable_by(k - 1, |&a, &b| r[a].abs().total_cmp(&r[b].abs()));
            }
            let inliers = &order[..k];
            let mut jac = nalgebra::DMatrix::<f64>::zeros(k, N_PARAMS);
            for j in 0..N_PARAMS {
                let mut q = p;
                q[j] += H;
                obj.signed(&q, points, &mut shifted);
                for (row, &i) in inliers.iter().enumerate() {
                    jac[(row, j)] = (shifted[i] - r[i]) / H;
                }
            }
            let res = nalgebra::DVector::from_iterator(k, inliers.iter().map(|&i| r[i]));
            let jtj = jac.transpose() * &jac;
            let jtr = jac.transpose() * res;
            let mut accepted = false;
            for _ in 0..4 {
                let mut a = jtj.clone();
                for d in 0..N_PARAMS {
                    a[(d, d)] += lambda * (jtj[(d, d)] + 1e-9);
                }
                let Some(delta) = a.cholesky().map(|c| c.solve(&(-&jtr))) else {
                    lambda *= 10.0;
                    continue;
                };
                let mut q = p;
                for d in 0..N_PARAMS {
                    q[d] = clamp(d, p[d] + delta[d]);
                }
                let f = obj.eval(&q, points);
                if f < best {
                    best = f;
                    p = q;
                    lambda = (lambda * 0.3).max(1e-9);
                    accepted = true;
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                break;
            }
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{angle_diff, sample_mesh_surface, transform_points};
    use crate::seeding::rng_from_seed;
    use rand::Rng;

    fn template_cloud(prior: &Prior, latent: &Latent, n: usize, seed: u64) -> PointCloud {
        let mesh = prior.latent_mesh(latent).unwrap();
        sample_mesh_surface(&mesh, n, &mut rng_from_seed(seed)).unwrap()
    }

    #[test]
    fn trimmed_mean_drops_largest() {
        let mut v = vec![5.0, 1.0, 100.0, 2.0, 3.0, 4.0, 6.0, 7.0, 8.0, 9.0];
        assert_eq!(trimmed_mean(&mut v, 0.9), 5.0);
        assert_eq!(trimmed_mean(&mut [], 0.9), f64::INFINITY);
    }

    #[test]
    fn refuses_small_inputs() {
        let prior = Prior::builtin();
        let cloud = PointCloud::new(vec![Vec3::new(0.1, 0.2, 0.3); 15]);
        let err = prior.fit(&cloud).unwrap_err();
        assert!(err.to_string().starts_with("insufficient points for fit"));
    }

    #[test]
    fn identity_round_trip() {
        let prior = Prior::builtin();
        for id in ["chair", "table", "sofa", "shelf"] {
            let cloud = template_cloud(&prior, &Latent::unit(id), 600, 11);
            let fit = prior.fit(&cloud).unwrap();
            assert_eq!(fit.latent.template_id, id);
            assert!(fit.rotation.yaw().abs() <= 5f64.to_radians(), "{id}: yaw {}", fit.rotation.yaw());
            assert!(fit.residual <= 0.01, "{id}: residual {}", fit.residual);
        }
    }

    #[test]
    fn recovers_rotation() {
        let prior = Prior::builtin();
        let cloud = template_cloud(&prior, &Latent::unit("chair"), 600, 12);
        let yaw = 40f64.to_radians();
        let rotated = transform_points(&cloud, Rotation::from_yaw(yaw), Vec3::new(3.0, -1.0, 0.4), 0.9).unwrap();
        let fit = prior.fit(&rotated).unwrap();
        assert_eq!(fit.latent.template_id, "chair");
        assert!(angle_diff(fit.rotation.yaw(), yaw) <= 3f64.to_radians());
    }

    #[test]
    fn canonical_mapping_round_trips() {
        let prior = Prior::builtin();
        let cloud = template_cloud(&prior, &Latent::unit("sofa"), 300, 4);
        let fit = prior.fit(&cloud).unwrap();
        for p in cloud.iter() {
            assert!((fit.to_scene(&fit.to_canonical(p)) - p).norm() < 1e-9);
        }
    }

    #[test]
    fn random_volume_does_not_fit() {
        let prior = Prior::builtin();
        let mut rng = rng_from_seed(99);
        let cloud: PointCloud = (0..500)
            .map(|_| Vec3::new(rng.gen(), rng.gen::<f64>() * 0.8, rng.gen::<f64>() * 0.6))
            .collect();
        let fit = prior.fit(&cloud).unwrap();
        assert!(fit.residual > 0.02, "residual {}", fit.residual);
        for ti in 0..prior.templates().len() {
            let only = prior
                .fit_with(
                    &cloud,
                    &FitOptions {
                        templates: Some(vec![ti]),
                        yaw_window: None,
                    },
                )
                .unwrap();
            assert!(only.residual > 0.02);
        }
    }

    #[test]
    fn yaw_is_pose_covariant() {
        let prior = Prior::builtin();
        let base = template_cloud(&prior, &Latent::new("table", 1.0, [1.0, 0.9, 1.1]), 500, 21);
        let yaw0 = prior.fit(&base).unwrap().rotation.yaw();
        for (k, r) in [-2.5f64, -1.0, 0.7, 2.0].into_iter().enumerate() {
            let moved = transform_points(&base, Rotation::from_yaw(r), Vec3::new(k as f64, 2.0, 0.0), 1.3).unwrap();
            let yaw = prior.fit(&moved).unwrap().rotation.yaw();
            // The table is symmetric under a half turn.
            let err = angle_diff(yaw, yaw0 + r).min(angle_diff(yaw, yaw0 + r + PI));
            assert!(err <= 3f64.to_radians(), "rotation {r}: error {err}");
        }
    }

    #[test]
    fn jittered_clouds_fit_within_threshold() {
        let prior = Prior::builtin();
        let mut rng = rng_from_seed(31);
        for id in ["chair", "sofa", "crate"] {
            let cloud = template_cloud(&prior, &Latent::unit(id), 500, 32);
            let jittered: PointCloud = cloud
                .iter()
                .map(|p| p + Vec3::new(gaussian(&mut rng), gaussian(&mut rng), gaussian(&mut rng)) * 0.005)
                .collect();
            let fit = prior.fit(&jittered).unwrap();
            assert!(fit.residual <= 0.02, "{id}: residual {}", fit.residual);
        }
    }

    fn gaussian(rng: &mut crate::seeding::DetRng) -> f64 {
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }

    #[test]
    fn partial_cloud_reconstructs_template() {
        let prior = Prior::builtin();
        for (id, seed) in [("chair", 41), ("shelf", 42), ("sofa", 43)] {
            let latent = Latent::new(id, 1.1, [1.05, 0.95, 1.0]);
            let full = template_cloud(&prior, &latent, 1500, seed);
            // Drop the points on one side: about 70% of the surface remains.
            let keep: PointCloud = full.iter().filter(|p| p.x < 0.2 * latent.stretch().x).copied().collect();
            assert!(keep.len() as f64 >= 0.6 * full.len() as f64);
            let fit = prior.fit(&keep).unwrap();
            assert_eq!(fit.latent.template_id, id);
            let recon = prior.reconstruct(&fit.latent, 4096, &mut rng_from_seed(1)).unwrap();
            let carved = fit.cloud_to_canonical(&keep);
            let cd = crate::geom::chamfer_distance(&carved, &recon).unwrap();
            assert!(cd <= 0.05, "{id}: chamfer {cd}");
        }
    }

    #[test]
    fn reconstruction_matches_projected_surface() {
        let prior = Prior::builtin();
        let mut rng = rng_from_seed(51);
        for id in ["chair", "table", "ball"] {
            let latent = Latent::new(id, 0.9, [1.1, 1.0, 0.95]);
            let t = prior.template(id).unwrap();
            let stretch = latent.stretch();
            let m = stretch.min();
            let f = |x: &Vec3| stretched_sdf(t, &stretch, m, x);
            // Oracle: random points pushed onto the zero set by Newton steps
            // along the finite-difference gradient.
            let mut dense = Vec::new();
            while dense.len() < 3000 {
                let mut x = Vec3::new(rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7));
                if f(&x).abs() > 0.05 {
                    continue;
                }
                for _ in 0..30 {
                    let h = 1e-6;
                    let g = Vec3::new(
                        f(&(x + Vec3::x() * h)) - f(&(x - Vec3::x() * h)),
                        f(&(x + Vec3::y() * h)) - f(&(x - Vec3::y() * h)),
                        f(&(x + Vec3::z() * h)) - f(&(x - Vec3::z() * h)),
                    ) / (2.0 * h);
                    let n2 = g.norm_squared();
                    if n2 < 1e-12 {
                        break;
                    }
                    x -= g * (f(&x) / n2);
                }
                if f(&x).abs() < 1e-9 {
                    dense.push(x);
                }
            }
            let recon = prior.reconstruct(&latent, 4096, &mut rng).unwrap();
            let cd = crate::geom::chamfer_distance(&recon, &PointCloud::new(dense)).unwrap();
            assert!(cd <= 0.02, "{id}: chamfer {cd}");
        }
    }
}
