//! GRABS-SCN v1 scene files.
//!
//! ```text
//! GRABS-SCN v1
//! config {json}
//! seed <seed> <round>
//! aspect <f64>
//! room <min xyz> <max xyz>
//! points <n> ascii|binary
//! <n lines "x y z">  |  <n * 24 bytes little-endian f64> "\n"
//! masks <k>
//! mask <object> <len> <indices...>
//! objects <k>
//! object {json}
//! end
//! ```
//!
//! Floats are written in shortest round-trip form, so reading a written
//! scene reproduces it bit for bit.

use super::{ObjectMeta, SceneError, SceneGenConfig, SceneSample};
use crate::geom::{Aabb, IndexMask, PointCloud, Vec3};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

pub const SCENE_HEADER: &str = "GRABS-SCN v1";

pub fn write_scene(scene: &SceneSample, path: &Path) -> Result<(), SceneError> {
    let mut out: Vec<u8> = Vec::with_capacity(scene.cloud.len() * 40);
    let json = |e: serde_json::Error| SceneError::Config(e.to_string());
    let mut text = String::new();
    writeln!(text, "{SCENE_HEADER}").unwrap();
    writeln!(text, "config {}", serde_json::to_string(&scene.config).map_err(json)?).unwrap();
    writeln!(text, "seed {} {}", scene.seed, scene.round).unwrap();
    writeln!(text, "aspect {}", scene.ground_aspect).unwrap();
    let (lo, hi) = (scene.room.min, scene.room.max);
    writeln!(text, "room {} {} {} {} {} {}", lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]).unwrap();
    let binary = scene.config.binary_points;
    writeln!(
        text,
        "points {} {}",
        scene.cloud.len(),
        if binary { "binary" } else { "ascii" }
    )
    .unwrap();
    if binary {
        out.extend_from_slice(text.as_bytes());
        text.clear();
        for p in scene.cloud.iter() {
            for c in [p.x, p.y, p.z] {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        text.push('\n');
    } else {
        for p in scene.cloud.iter() {
            writeln!(text, "{} {} {}", p.x, p.y, p.z).unwrap();
        }
    }
    writeln!(text, "masks {}", scene.gt_masks.len()).unwrap();
    for (k, m) in scene.gt_masks.iter().enumerate() {
        write!(text, "mask {k} {}", m.len()).unwrap();
        for i in m.indices() {
            write!(text, " {i}").unwrap();
        }
        text.push('\n');
    }
    writeln!(text, "objects {}", scene.object_meta.len()).unwrap();
    for o in &scene.object_meta {
        writeln!(text, "object {}", serde_json::to_string(o).map_err(json)?).unwrap();
    }
    text.push_str("end\n");
    out.extend_from_slice(text.as_bytes());
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> SceneError {
        SceneError::Parse {
            line: self.line,
            message: message.into(),
        }
    }

    fn next_line(&mut self) -> Result<&'a str, SceneError> {
        if self.pos >= self.bytes.len() {
            self.line += 1;
            return Err(self.err("unexpected end of file"));
        }
        let rest = &self.bytes[self.pos..];
        let len = rest.iter().position(|&b| b == b'\n');
        self.line += 1;
        let Some(len) = len else {
            return Err(self.err("unterminated line (file truncated?)"));
        };
        self.pos += len + 1;
        std::str::from_utf8(&rest[..len]).map_err(|_| self.err("line is not valid UTF-8"))
    }

    /// Next line, which must start with `key`; returns the remainder.
    fn keyed(&mut self, key: &str) -> Result<&'a str, SceneError> {
        let line = self.next_line()?;
        match line.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest),
            _ if line == key => Ok(""),
            _ => Err(self.err(format!("expected `{key}` record, found {:?}", truncate(line)))),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], SceneError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "binary block at byte {} needs {n} bytes, only {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(40).collect()
}

fn numbers<T: std::str::FromStr>(r: &Reader<'_>, text: &str, expect: Option<usize>) -> Result<Vec<T>, SceneError> {
    let values = text
        .split_ascii_whitespace()
        .map(|t| t.parse::<T>().map_err(|_| r.err(format!("bad number {t:?}"))))
        .collect::<Result<Vec<T>, _>>()?;
    if let Some(n) = expect {
        if values.len() != n {
            return Err(r.err(format!("expected {n} values, found {}", values.len())));
        }
    }
    Ok(values)
}

pub fn read_scene(path: &Path) -> Result<SceneSample, SceneError> {
    let bytes = std::fs::read(path)?;
    parse_scene(&bytes)
}

pub(crate) fn parse_scene(bytes: &[u8]) -> Result<SceneSample, SceneError> {
    let mut r = Reader { bytes, pos: 0, line: 0 };
    let header = match r.next_line() {
        Ok(h) => h,
        Err(_) => {
            let first = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
            return Err(SceneError::Version(String::from_utf8_lossy(first).into_owned()));
        }
    };
    if header != SCENE_HEADER {
        return Err(SceneError::Version(header.to_string()));
    }
    let config: SceneGenConfig =
        serde_json::from_str(r.keyed("config")?).map_err(|e| r.err(format!("bad config: {e}")))?;
    let seed_fields = r.keyed("seed")?;
    let seed_parts: Vec<u64> = numbers(&r, seed_fields, Some(2))?;
    let aspect_text = r.keyed("aspect")?;
    let aspect = numbers::<f64>(&r, aspect_text, Some(1))?[0];
    let room_text = r.keyed("room")?;
    let room: Vec<f64> = numbers(&r, room_text, Some(6))?;
    let header = r.keyed("points")?;
    let (count, mode) = header
        .split_once(' ')
        .ok_or_else(|| r.err("points record needs a count and a mode"))?;
    let count: usize = count.parse().map_err(|_| r.err(format!("bad point count {count:?}")))?;
    let mut points = Vec::with_capacity(count);
    match mode {
        "ascii" => {
            for _ in 0..count {
                let line = r.next_line()?;
                let v: Vec<f64> = numbers(&r, line, Some(3))?;
                points.push(Vec3::new(v[0], v[1], v[2]));
            }
        }
        "binary" => {
            let blob = r.take(count * 24)?;
            for chunk in blob.chunks_exact(24) {
                let c = |k: usize| f64::from_le_bytes(chunk[k * 8..k * 8 + 8].try_into().unwrap());
                points.push(Vec3::new(c(0), c(1), c(2)));
            }
            if r.next_line()? != "" {
                return Err(r.err("binary point block must be followed by a newline"));
            }
        }
        other => return Err(r.err(format!("unknown point mode {other:?}"))),
    }
    let n = points.len();
    let masks_text = r.keyed("masks")?;
    let k: usize = numbers(&r, masks_text, Some(1))?[0];
    let mut gt_masks = Vec::with_capacity(k);
    for expected in 0..k {
        let line = r.keyed("mask")?;
        let v: Vec<usize> = numbers(&r, line, None)?;
        if v.len() < 2 || v[0] != expected || v.len() != v[1] + 2 {
            return Err(r.err("mask record must be `mask <object> <len> <indices...>`"));
        }
        gt_masks.push(IndexMask::new(v[2..].to_vec(), n).map_err(|e| r.err(e.to_string()))?);
    }
    let objects_text = r.keyed("objects")?;
    let k_objects: usize = numbers(&r, objects_text, Some(1))?[0];
    let mut object_meta = Vec::with_capacity(k_objects);
    for _ in 0..k_objects {
        let text = r.keyed("object")?;
        let meta: ObjectMeta = serde_json::from_str(text).map_err(|e| r.err(format!("bad object: {e}")))?;
        object_meta.push(meta);
    }
    r.keyed("end")?;
    if r.pos != bytes.len() {
        return Err(r.err("trailing data after `end`"));
    }
    Ok(SceneSample {
        cloud: PointCloud::new(points),
        gt_masks,
        object_meta,
        ground_aspect: aspect,
        seed: seed_parts[0],
        round: seed_parts[1] as usize,
        room: Aabb::new([room[0], room[1], room[2]], [room[3], room[4], room[5]]),
        config,
    })
}
