//! Geometric kernel: point clouds, masks, rigid transforms, nearest-neighbour
//! queries, Chamfer distance and iso-surface extraction.

mod kdtree;
mod mcubes;
mod sample;

pub use kdtree::KdTree;
pub use mcubes::{extract_surface, extract_surface_lipschitz};
pub use sample::sample_mesh_surface;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("nothing to sample")]
    EmptyMesh,
    #[error("mask cloud lengths differ ({0} vs {1})")]
    CloudLenMismatch(usize, usize),
    #[error("mask index {index} out of bounds for cloud of {len} points")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("mask indices must be strictly increasing")]
    UnsortedMask,
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("resolution must be at least 2, got {0}")]
    Resolution(usize),
    #[error("degenerate bounds")]
    DegenerateBounds,
}

/// An ordered set of 3D points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points }
    }

    pub fn from_arrays(points: &[[f64; 3]]) -> Self {
        Self::new(points.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vec3> {
        self.points.iter()
    }

    /// Subset of the cloud in mask order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
        Some(sum / self.len() as f64)
    }

    pub fn bounds(&self) -> Option<Aabb> {
        Aabb::enclosing(&self.points)
    }
}

impl FromIterator<Vec3> for PointCloud {
    fn from_iter<I: IntoIterator<Item = Vec3>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn cube(half: f64) -> Self {
        Self::new([-half; 3], [half; 3])
    }

    pub fn enclosing(points: &[Vec3]) -> Option<Self> {
        let first = points.first()?;
        let mut bb = Self::new([first.x, first.y, first.z], [first.x, first.y, first.z]);
        for p in &points[1..] {
            bb.grow(p);
        }
        Some(bb)
    }

    pub fn grow(&mut self, p: &Vec3) {
        for a in 0..3 {
            self.min[a] = self.min[a].min(p[a]);
            self.max[a] = self.max[a].max(p[a]);
        }
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn max_extent(&self) -> f64 {
        let e = self.extent();
        e[0].max(e[1]).max(e[2])
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    /// Closed-interval overlap with positive-volume intersection required.
    pub fn overlaps(&self, other: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] < other.max[a] && other.min[a] < self.max[a])
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// Orientation about the vertical axis.
///
/// Roll and pitch are part of the data model but always zero: objects only
/// ever rotate about z.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Rotation {
    yaw: f64,
}

impl Rotation {
    pub fn from_yaw(yaw: f64) -> Self {
        Self {
            yaw: normalize_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Self { yaw: 0.0 }
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn roll(&self) -> f64 {
        0.0
    }

    pub fn pitch(&self) -> f64 {
        0.0
    }

    pub fn inverse(&self) -> Self {
        Self::from_yaw(-self.yaw)
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self::from_yaw(self.yaw + other.yaw)
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z)
    }
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Smallest absolute difference between two angles.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    normalize_angle(a - b).abs()
}

/// Sorted set of indices into a cloud of known length.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IndexMask {
    indices: Vec<usize>,
    cloud_len: usize,
}

impl IndexMask {
    pub fn new(indices: Vec<usize>, cloud_len: usize) -> Result<Self, GeomError> {
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(GeomError::UnsortedMask);
            }
        }
        if let Some(&last) = indices.last() {
            if last >= cloud_len {
                return Err(GeomError::IndexOutOfBounds {
                    index: last,
                    len: cloud_len,
                });
            }
        }
        Ok(Self { indices, cloud_len })
    }

    /// Sorts and dedups arbitrary indices.
    pub fn from_unsorted(mut indices: Vec<usize>, cloud_len: usize) -> Result<Self, GeomError> {
        indices.sort_unstable();
        indices.dedup();
        Self::new(indices, cloud_len)
    }

    pub fn empty(cloud_len: usize) -> Self {
        Self {
            indices: Vec::new(),
            cloud_len,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn cloud_len(&self) -> usize {
        self.cloud_len
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    /// Size of the intersection with another mask over the same cloud.
    pub fn intersection_len(&self, other: &IndexMask) -> usize {
        let (a, b) = (&self.indices, &other.indices);
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }
}

/// Intersection over union of two masks on the same cloud.
pub fn mask_iou(a: &IndexMask, b: &IndexMask) -> Result<f64, GeomError> {
    if a.cloud_len != b.cloud_len {
        return Err(GeomError::CloudLenMismatch(a.cloud_len, b.cloud_len));
    }
    let inter = a.intersection_len(b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Applies `scale`, then the yaw rotation, then `translation` to every point.
pub fn transform_points(
    cloud: &PointCloud,
    rot: Rotation,
    translation: Vec3,
    scale: f64,
) -> Result<PointCloud, GeomError> {
    if !(scale > 0.0) {
        return Err(GeomError::NonPositiveScale(scale));
    }
    Ok(cloud
        .iter()
        .map(|p| rot.apply(&(p * scale)) + translation)
        .collect())
}

/// Parameters of the inverse of [`transform_points`] with the same arguments.
pub fn inverse_transform(rot: Rotation, translation: Vec3, scale: f64) -> (Rotation, Vec3, f64) {
    let inv = rot.inverse();
    let inv_scale = 1.0 / scale;
    (inv, -inv.apply(&translation) * inv_scale, inv_scale)
}

/// Symmetric mean-of-means Euclidean Chamfer distance.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64, GeomError> {
    if a.is_empty() || b.is_empty() {
        return Err(GeomError::EmptyCloud);
    }
    let ta = KdTree::build(&a.points);
    let tb = KdTree::build(&b.points);
    Ok(0.5 * (mean_nearest(&a.points, &tb) + mean_nearest(&b.points, &ta)))
}

/// Chamfer distance against a prebuilt tree for `b`.
pub fn chamfer_with_tree(a: &PointCloud, b: &PointCloud, tb: &KdTree) -> Result<f64, GeomError> {
    if a.is_empty() || b.is_empty() {
        return Err(GeomError::EmptyCloud);
    }
    let ta = KdTree::build(&a.points);
    Ok(0.5 * (mean_nearest(&a.points, tb) + mean_nearest(&b.points, &ta)))
}

fn mean_nearest(points: &[Vec3], tree: &KdTree) -> f64 {
    let sum: f64 = points
        .iter()
        .map(|p| tree.nearest(p).map(|(_, d2)| d2.sqrt()).unwrap_or(f64::INFINITY))
        .sum();
    sum / points.len() as f64
}

/// Triangle soup with shared vertices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (a, b, c) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Copy with every vertex passed through `f`.
    pub fn map_vertices(&self, f: impl Fn(&Vec3) -> Vec3) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(f).collect(),
            triangles: self.triangles.clone(),
        }
    }

    pub fn bounds(&self) -> Option<Aabb> {
        Aabb::enclosing(&self.vertices)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
        let one_way = |x: &PointCloud, y: &PointCloud| {
            x.iter()
                .map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / x.len() as f64
        };
        0.5 * (one_way(a, b) + one_way(b, a))
    }

    #[test]
    fn chamfer_examples() {
        let a = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        let a = PointCloud::from_arrays(&[[0.0, 0.0, 0.0]]);
        let b = PointCloud::from_arrays(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer_distance(&a, &b).unwrap(), 1.0);
        let a = PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let expected = brute_chamfer(&a, &b);
        assert_eq!(expected, 1.0);
        assert!((chamfer_distance(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn chamfer_rejects_empty() {
        let a = PointCloud::from_arrays(&[[0.0, 0.0, 0.0]]);
        let err = chamfer_distance(&a, &PointCloud::default()).unwrap_err();
        assert_eq!(err.to_string(), "empty point cloud");
    }

    #[test]
    fn iou_examples() {
        let a = IndexMask::new(vec![1, 2, 3], 10).unwrap();
        let b = IndexMask::new(vec![2, 3, 4], 10).unwrap();
        let c = IndexMask::new(vec![7, 8], 10).unwrap();
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.5);
        assert_eq!(mask_iou(&IndexMask::empty(4), &IndexMask::empty(4)).unwrap(), 0.0);
        assert!(mask_iou(&a, &IndexMask::empty(11)).is_err());
    }

    #[test]
    fn mask_validation() {
        assert_eq!(IndexMask::new(vec![3, 2], 5), Err(GeomError::UnsortedMask));
        assert_eq!(IndexMask::new(vec![2, 2], 5), Err(GeomError::UnsortedMask));
        assert!(IndexMask::new(vec![5], 5).is_err());
        let m = IndexMask::from_unsorted(vec![4, 1, 4, 0], 5).unwrap();
        assert_eq!(m.indices(), &[0, 1, 4]);
    }

    #[test]
    fn transform_examples() {
        let cloud = PointCloud::from_arrays(&[[1.0, 0.0, 0.0], [0.3, -2.0, 5.0]]);
        let same = transform_points(&cloud, Rotation::identity(), Vec3::zeros(), 1.0).unwrap();
        assert_eq!(same, cloud);

        let flipped = transform_points(&cloud, Rotation::from_yaw(PI), Vec3::zeros(), 1.0).unwrap();
        assert!((flipped.points[0] - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-9);

        assert!(transform_points(&cloud, Rotation::identity(), Vec3::zeros(), 0.0).is_err());
        assert!(transform_points(&cloud, Rotation::identity(), Vec3::zeros(), -1.0).is_err());
    }

    #[test]
    fn yaw_normalization() {
        assert_eq!(Rotation::from_yaw(PI).yaw(), PI);
        assert!((Rotation::from_yaw(-PI).yaw() - PI).abs() < 1e-12);
        assert!((Rotation::from_yaw(3.0 * PI / 2.0).yaw() + PI / 2.0).abs() < 1e-12);
        let r = Rotation::from_yaw(3.0).compose(&Rotation::from_yaw(1.0));
        assert!(r.yaw() > -PI && r.yaw() <= PI);
        assert_eq!(r.roll(), 0.0);
        assert_eq!(r.pitch(), 0.0);
    }

    #[test]
    fn aabb_overlap_is_strict() {
        let a = Aabb::new([0.0; 3], [1.0; 3]);
        let touching = Aabb::new([1.0, 0.0, 0.0], [2.0, 1.0, 1.0]);
        let inside = Aabb::new([0.5; 3], [0.7; 3]);
        assert!(!a.overlaps(&touching));
        assert!(a.overlaps(&inside));
        assert!(inside.overlaps(&a));
    }
}
