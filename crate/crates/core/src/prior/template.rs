//! Canonical template shapes built from exact primitive SDFs.

use super::PriorError;
use crate::geom::{Aabb, Vec3};
use std::fmt::Write as _;

pub const TEMPLATE_HEADER: &str = "GRABS-TPL v1";
pub const MAX_PRIMITIVES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Box { center: Vec3, half: Vec3 },
    /// Vertical (z-aligned) capped cylinder.
    Cylinder { center: Vec3, radius: f64, half_height: f64 },
    Sphere { center: Vec3, radius: f64 },
}

impl Primitive {
    #[inline]
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match *self {
            Primitive::Box { center, half } => {
                let qx = (p.x - center.x).abs() - half.x;
                let qy = (p.y - center.y).abs() - half.y;
                let qz = (p.z - center.z).abs() - half.z;
                let ox = qx.max(0.0);
                let oy = qy.max(0.0);
                let oz = qz.max(0.0);
                (ox * ox + oy * oy + oz * oz).sqrt() + qx.max(qy).max(qz).min(0.0)
            }
            Primitive::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let dx = p.x - center.x;
                let dy = p.y - center.y;
                let r = (dx * dx + dy * dy).sqrt() - radius;
                let h = (p.z - center.z).abs() - half_height;
                let or = r.max(0.0);
                let oh = h.max(0.0);
                (or * or + oh * oh).sqrt() + r.max(h).min(0.0)
            }
            Primitive::Sphere { center, radius } => (p - center).norm() - radius,
        }
    }

    pub fn bounds(&self) -> Aabb {
        let (c, h) = match *self {
            Primitive::Box { center, half } => (center, half),
            Primitive::Cylinder {
                center,
                radius,
                half_height,
            } => (center, Vec3::new(radius, radius, half_height)),
            Primitive::Sphere { center, radius } => (center, Vec3::repeat(radius)),
        };
        Aabb::new(
            [c.x - h.x, c.y - h.y, c.z - h.z],
            [c.x + h.x, c.y + h.y, c.z + h.z],
        )
    }

    fn validate(&self) -> Result<(), String> {
        let ok = match *self {
            Primitive::Box { half, .. } => half.iter().all(|&h| h > 0.0),
            Primitive::Cylinder {
                radius, half_height, ..
            } => radius > 0.0 && half_height > 0.0,
            Primitive::Sphere { radius, .. } => radius > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err("primitive dimensions must be positive".into())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    Union,
    Intersect,
}

/// A unit-scale shape: primitives folded left to right with min (union) or
/// max (intersection). The first primitive's combine mode is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateShape {
    pub id: String,
    pub class_tag: String,
    pub parts: Vec<(Primitive, Combine)>,
}

impl TemplateShape {
    pub fn new(
        id: impl Into<String>,
        class_tag: impl Into<String>,
        parts: Vec<(Primitive, Combine)>,
    ) -> Result<Self, PriorError> {
        let shape = Self {
            id: id.into(),
            class_tag: class_tag.into(),
            parts,
        };
        shape.validate().map_err(PriorError::Invalid)?;
        Ok(shape)
    }

    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() || self.id.contains(char::is_whitespace) {
            return Err(format!("bad template id {:?}", self.id));
        }
        if self.class_tag.is_empty() || self.class_tag.contains(char::is_whitespace) {
            return Err(format!("bad class tag {:?}", self.class_tag));
        }
        if self.parts.is_empty() || self.parts.len() > MAX_PRIMITIVES {
            return Err(format!(
                "template {} has {} primitives (1..={MAX_PRIMITIVES} allowed)",
                self.id,
                self.parts.len()
            ));
        }
        for (p, _) in &self.parts {
            p.validate()?;
        }
        let b = self.union_bounds();
        if b.min.iter().any(|&v| v < -0.5 - 1e-9) || b.max.iter().any(|&v| v > 0.5 + 1e-9) {
            return Err(format!("template {} exceeds the unit cube", self.id));
        }
        Ok(())
    }

    /// Bounds of the union-combined primitives, an upper bound on the shape.
    pub fn union_bounds(&self) -> Aabb {
        let mut iter = self.parts.iter();
        let first = iter.next().map(|(p, _)| p.bounds()).unwrap_or(Aabb::cube(0.0));
        iter.fold(first, |mut acc, (p, mode)| {
            if *mode == Combine::Union {
                let b = p.bounds();
                acc.grow(&Vec3::from(b.min));
                acc.grow(&Vec3::from(b.max));
            }
            acc
        })
    }

    #[inline]
    pub fn sdf(&self, p: &Vec3) -> f64 {
        let mut parts = self.parts.iter();
        let mut d = match parts.next() {
            Some((prim, _)) => prim.sdf(p),
            None => return f64::INFINITY,
        };
        for (prim, mode) in parts {
            let v = prim.sdf(p);
            d = match mode {
                Combine::Union => d.min(v),
                Combine::Intersect => d.max(v),
            };
        }
        d
    }
}

fn boxp(c: [f64; 3], h: [f64; 3]) -> (Primitive, Combine) {
    (
        Primitive::Box {
            center: Vec3::from(c),
            half: Vec3::from(h),
        },
        Combine::Union,
    )
}

fn cyl(c: [f64; 3], radius: f64, half_height: f64) -> (Primitive, Combine) {
    (
        Primitive::Cylinder {
            center: Vec3::from(c),
            radius,
            half_height,
        },
        Combine::Union,
    )
}

/// The six shapes shipped with the library.
pub fn builtin_templates() -> Vec<TemplateShape> {
    let mut chair = vec![
        boxp([0.0, 0.0, -0.05], [0.3, 0.3, 0.05]),
        boxp([0.0, -0.26, 0.25], [0.3, 0.04, 0.25]),
    ];
    let mut table = vec![boxp([0.0, 0.0, 0.18], [0.5, 0.35, 0.04])];
    for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        chair.push(cyl([0.25 * sx, 0.25 * sy, -0.3], 0.035, 0.2));
        table.push(boxp([0.43 * sx, 0.28 * sy, -0.04], [0.04, 0.04, 0.18]));
    }
    let sofa = vec![
        boxp([0.0, 0.05, -0.15], [0.5, 0.25, 0.1]),
        boxp([0.0, -0.25, 0.0], [0.5, 0.07, 0.25]),
        boxp([0.45, 0.05, -0.05], [0.05, 0.25, 0.2]),
        boxp([-0.45, 0.05, -0.05], [0.05, 0.25, 0.2]),
    ];
    let shelf = vec![
        boxp([0.3, 0.0, 0.0], [0.03, 0.18, 0.5]),
        boxp([-0.3, 0.0, 0.0], [0.03, 0.18, 0.5]),
        boxp([0.0, 0.0, 0.47], [0.3, 0.18, 0.03]),
        boxp([0.0, 0.0, 0.0], [0.3, 0.18, 0.03]),
        boxp([0.0, 0.0, -0.47], [0.3, 0.18, 0.03]),
        boxp([0.0, -0.165, 0.0], [0.3, 0.015, 0.5]),
    ];
    let crate_box = vec![boxp([0.0; 3], [0.5; 3])];
    let ball = vec![(
        Primitive::Sphere {
            center: Vec3::zeros(),
            radius: 0.5,
        },
        Combine::Union,
    )];
    [
        ("chair", "chair-like", chair),
        ("table", "table-like", table),
        ("sofa", "sofa-like", sofa),
        ("shelf", "shelf-like", shelf),
        ("crate", "box-like", crate_box),
        ("ball", "ball-like", ball),
    ]
    .into_iter()
    .map(|(id, tag, parts)| TemplateShape::new(id, tag, parts).expect("builtin template is valid"))
    .collect()
}

/// Serializes templates to the versioned text format.
pub fn write_templates(templates: &[TemplateShape]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{TEMPLATE_HEADER}");
    for t in templates {
        let _ = writeln!(out, "template {} {}", t.id, t.class_tag);
        for (prim, mode) in &t.parts {
            let mode = match mode {
                Combine::Union => "union",
                Combine::Intersect => "intersect",
            };
            let _ = match prim {
                Primitive::Box { center, half } => writeln!(
                    out,
                    "box {mode} {} {} {} {} {} {}",
                    center.x, center.y, center.z, half.x, half.y, half.z
                ),
                Primitive::Cylinder {
                    center,
                    radius,
                    half_height,
                } => writeln!(
                    out,
                    "cylinder {mode} {} {} {} {radius} {half_height}",
                    center.x, center.y, center.z
                ),
                Primitive::Sphere { center, radius } => {
                    writeln!(out, "sphere {mode} {} {} {} {radius}", center.x, center.y, center.z)
                }
            };
        }
        let _ = writeln!(out, "end");
    }
    out
}

/// Parses the versioned text format. Blank lines and `#` comments are ignored.
pub fn parse_templates(text: &str) -> Result<Vec<TemplateShape>, PriorError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, TEMPLATE_HEADER)) => {}
        Some((_, other)) => return Err(PriorError::Version(other.to_string())),
        None => return Err(PriorError::Version(String::new())),
    }
    let parse_err = |line: usize, message: String| PriorError::Parse { line, message };
    let mut out: Vec<TemplateShape> = Vec::new();
    let mut current: Option<(usize, String, String, Vec<(Primitive, Combine)>)> = None;
    for (line, content) in lines {
        let tokens: Vec<&str> = content.split_whitespace().collect();
        match tokens[0] {
            "template" => {
                if current.is_some() {
                    return Err(parse_err(line, "nested template (missing `end`)".into()));
                }
                if tokens.len() != 3 {
                    return Err(parse_err(line, "expected `template <id> <class_tag>`".into()));
                }
                current = Some((line, tokens[1].to_string(), tokens[2].to_string(), Vec::new()));
            }
            "end" => {
                let (start, id, tag, parts) = current
                    .take()
                    .ok_or_else(|| parse_err(line, "`end` without `template`".into()))?;
                if out.iter().any(|t| t.id == id) {
                    return Err(parse_err(start, format!("duplicate template id {id}")));
                }
                let shape = TemplateShape::new(id, tag, parts).map_err(|e| parse_err(start, e.to_string()))?;
                out.push(shape);
            }
            kind @ ("box" | "cylinder" | "sphere") => {
                let parts = &mut current
                    .as_mut()
                    .ok_or_else(|| parse_err(line, "primitive outside a template".into()))?
                    .3;
                let mode = match tokens.get(1) {
                    Some(&"union") => Combine::Union,
                    Some(&"intersect") => Combine::Intersect,
                    _ => return Err(parse_err(line, "combine must be `union` or `intersect`".into())),
                };
                let nums = tokens[2..]
                    .iter()
                    .map(|t| {
                        t.parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .ok_or_else(|| parse_err(line, format!("bad number {t:?}")))
                    })
                    .collect::<Result<Vec<f64>, _>>()?;
                let want = match kind {
                    "box" => 6,
                    "cylinder" => 5,
                    _ => 4,
                };
                if nums.len() != want {
                    return Err(parse_err(line, format!("{kind} takes {want} numbers, got {}", nums.len())));
                }
                let center = Vec3::new(nums[0], nums[1], nums[2]);
                let prim = match kind {
                    "box" => Primitive::Box {
                        center,
                        half: Vec3::new(nums[3], nums[4], nums[5]),
                    },
                    "cylinder" => Primitive::Cylinder {
                        center,
                        radius: nums[3],
                        half_height: nums[4],
                    },
                    _ => Primitive::Sphere {
                        center,
                        radius: nums[3],
                    },
                };
                parts.push((prim, mode));
            }
            other => return Err(parse_err(line, format!("unknown keyword {other:?}"))),
        }
    }
    if let Some((start, id, ..)) = current {
        return Err(parse_err(start, format!("template {id} is missing `end`")));
    }
    if out.is_empty() {
        return Err(PriorError::Invalid("template file defines no shapes".into()));
    }
    Ok(out)
}
