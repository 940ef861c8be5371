//! Pseudo-mask bookkeeping: per-scene storage with overlap removal,
//! discovery statistics, final prediction lists and GRABS-MSK v1 files.

use crate::geom::{mask_iou, IndexMask};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

pub const MASK_HEADER: &str = "GRABS-MSK v1";

#[derive(Debug, Error)]
pub enum MaskFileError {
    #[error("mask file header must be {MASK_HEADER:?}, found {0:?}")]
    Version(String),
    #[error("mask file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The parts of a fit worth keeping alongside a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub template_id: String,
    pub yaw: f64,
    pub scale: f64,
    pub residual: f64,
    pub chamfer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskRecord {
    pub scene_id: String,
    pub mask: IndexMask,
    pub confidence: f64,
    pub fit: FitSummary,
    /// Update (training) or episode batch (discovery) that produced it.
    pub discovered_at: usize,
}

impl MaskRecord {
    /// Confidence from the chamfer margin: `max(0, 1 - chamfer / threshold)`.
    pub fn confidence_from_chamfer(chamfer: f64, threshold: f64) -> f64 {
        (1.0 - chamfer / threshold).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddOutcome {
    Stored,
    /// Stored, displacing this many lower-confidence overlapping masks.
    Replaced(usize),
    Duplicate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreStats {
    pub total: usize,
    pub new_since_last: usize,
    pub duplicates: usize,
    /// Fraction of stored masks with IoU > 0.5 against some gt mask.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
struct Entry {
    record: MaskRecord,
    seq: u64,
}

#[derive(Debug, Clone)]
pub struct LabelStore {
    dedup_iou: f64,
    scenes: BTreeMap<String, Vec<Entry>>,
    next_seq: u64,
    duplicates: usize,
    added_since_stats: usize,
}

impl Default for LabelStore {
    fn default() -> Self {
        Self::new(0.5)
    }
}

impl LabelStore {
    pub fn new(dedup_iou: f64) -> Self {
        Self {
            dedup_iou,
            scenes: BTreeMap::new(),
            next_seq: 0,
            duplicates: 0,
            added_since_stats: 0,
        }
    }

    pub fn dedup_iou(&self) -> f64 {
        self.dedup_iou
    }

    pub fn add(&mut self, record: MaskRecord) -> AddOutcome {
        let entries = self.scenes.entry(record.scene_id.clone()).or_default();
        let overlapping: Vec<usize> = entries
            .iter()
            .enumerate()
            .filter(|(_, e)| mask_iou(&e.record.mask, &record.mask).unwrap_or(0.0) >= self.dedup_iou)
            .map(|(i, _)| i)
            .collect();
        let beats_all = overlapping
            .iter()
            .all(|&i| record.confidence > entries[i].record.confidence);
        if !beats_all {
            self.duplicates += 1;
            return AddOutcome::Duplicate;
        }
        for &i in overlapping.iter().rev() {
            entries.remove(i);
        }
        entries.push(Entry {
            record,
            seq: self.next_seq,
        });
        self.next_seq += 1;
        self.duplicates += overlapping.len();
        if overlapping.is_empty() {
            self.added_since_stats += 1;
            AddOutcome::Stored
        } else {
            AddOutcome::Replaced(overlapping.len())
        }
    }

    pub fn len(&self) -> usize {
        self.scenes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scene_ids(&self) -> impl Iterator<Item = &str> {
        self.scenes.keys().map(String::as_str)
    }

    /// Totals, masks stored since the previous call, and accuracy against
    /// `gt` (scene id to gt masks) when given.
    pub fn stats(&mut self, gt: Option<&BTreeMap<String, Vec<IndexMask>>>) -> StoreStats {
        let total = self.len();
        let accuracy = match gt {
            Some(gt) if total > 0 => {
                let hits = self
                    .scenes
                    .iter()
                    .flat_map(|(id, entries)| entries.iter().map(move |e| (id, e)))
                    .filter(|(id, e)| {
                        gt.get(*id).is_some_and(|masks| {
                            masks.iter().any(|g| mask_iou(g, &e.record.mask).unwrap_or(0.0) > 0.5)
                        })
                    })
                    .count();
                Some(hits as f64 / total as f64)
            }
            _ => None,
        };
        let stats = StoreStats {
            total,
            new_since_last: self.added_since_stats,
            duplicates: self.duplicates,
            accuracy,
        };
        self.added_since_stats = 0;
        stats
    }

    /// Stored records for a scene, by descending confidence, ties in
    /// discovery order.
    pub fn records(&self, scene_id: &str) -> Vec<&MaskRecord> {
        let mut entries: Vec<&Entry> = self.scenes.get(scene_id).map(|v| v.iter().collect()).unwrap_or_default();
        entries.sort_by(|a, b| b.record.confidence.total_cmp(&a.record.confidence).then(a.seq.cmp(&b.seq)));
        entries.into_iter().map(|e| &e.record).collect()
    }

    /// Prediction list for evaluation.
    pub fn finalize(&self, scene_id: &str) -> Vec<(IndexMask, f64)> {
        self.records(scene_id)
            .into_iter()
            .map(|r| (r.mask.clone(), r.confidence))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), MaskFileError> {
        let mut text = format!("{MASK_HEADER}\n");
        for id in self.scenes.keys() {
            for r in self.records(id) {
                write_record(&mut text, r);
            }
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Loads records in file order through [`LabelStore::add`].
    pub fn read(path: &Path, dedup_iou: f64) -> Result<Self, MaskFileError> {
        let text = std::fs::read_to_string(path)?;
        let mut store = Self::new(dedup_iou);
        for r in parse_records(&text)? {
            store.add(r);
        }
        store.added_since_stats = 0;
        Ok(store)
    }
}

fn write_record(text: &mut String, r: &MaskRecord) {
    let f = &r.fit;
    write!(
        text,
        "mask {} {} {} {} {} {} {} {} {} {}",
        r.scene_id,
        r.mask.cloud_len(),
        r.confidence,
        r.discovered_at,
        f.template_id,
        f.yaw,
        f.scale,
        f.residual,
        f.chamfer,
        r.mask.len()
    )
    .unwrap();
    for i in r.mask.indices() {
        write!(text, " {i}").unwrap();
    }
    text.push('\n');
}

pub fn parse_records(text: &str) -> Result<Vec<MaskRecord>, MaskFileError> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    if header != MASK_HEADER {
        return Err(MaskFileError::Version(header.to_string()));
    }
    if !text.ends_with('\n') {
        return Err(MaskFileError::Parse {
            line: text.lines().count(),
            message: "file does not end with a newline (truncated?)".into(),
        });
    }
    let mut out = Vec::new();
    for (k, line) in lines {
        let err = |message: String| MaskFileError::Parse { line: k + 1, message };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let t: Vec<&str> = line.split_ascii_whitespace().collect();
        if t.len() < 11 || t[0] != "mask" {
            return Err(err("expected `mask` record with 10 header fields".into()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}")));
        let int = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad integer {s:?}")));
        let cloud_len = int(t[2])?;
        let n = int(t[10])?;
        if t.len() != 11 + n {
            return Err(err(format!("expected {n} indices, found {}", t.len() - 11)));
        }
        let indices = t[11..].iter().map(|s| int(s)).collect::<Result<Vec<_>, _>>()?;
        let mask = IndexMask::new(indices, cloud_len).map_err(|e| err(e.to_string()))?;
        let confidence = num(t[3])?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(err(format!("confidence {confidence} outside [0, 1]")));
        }
        out.push(MaskRecord {
            scene_id: t[1].to_string(),
            mask,
            confidence,
            discovered_at: int(t[4])?,
            fit: FitSummary {
                template_id: t[5].to_string(),
                yaw: num(t[6])?,
                scale: num(t[7])?,
                residual: num(t[8])?,
                chamfer: num(t[9])?,
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(scene: &str, indices: &[usize], confidence: f64) -> MaskRecord {
        MaskRecord {
            scene_id: scene.into(),
            mask: IndexMask::from_unsorted(indices.to_vec(), 100).unwrap(),
            confidence,
            fit: FitSummary {
                template_id: "crate".into(),
                yaw: 0.25,
                scale: 1.0,
                residual: 0.004,
                chamfer: 0.03,
            },
            discovered_at: 3,
        }
    }

    fn range(a: usize, b: usize) -> Vec<usize> {
        (a..b).collect()
    }

    #[test]
    fn duplicates_and_disjoint() {
        let mut store = LabelStore::default();
        assert_eq!(store.add(record("s", &range(0, 10), 0.5)), AddOutcome::Stored);
        assert_eq!(store.add(record("s", &range(0, 10), 0.5)), AddOutcome::Duplicate);
        assert_eq!(store.add(record("s", &range(20, 30), 0.5)), AddOutcome::Stored);
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn higher_confidence_wins() {
        // IoU 6/10.
        let a = range(0, 8);
        let b = range(2, 10);
        let mut store = LabelStore::default();
        store.add(record("s", &a, 0.7));
        assert_eq!(store.add(record("s", &b, 0.9)), AddOutcome::Replaced(1));
        assert_eq!(store.finalize("s"), vec![(IndexMask::new(b.clone(), 100).unwrap(), 0.9)]);
        let mut store = LabelStore::default();
        store.add(record("s", &b, 0.9));
        assert_eq!(store.add(record("s", &a, 0.7)), AddOutcome::Duplicate);
        assert_eq!(store.finalize("s")[0].1, 0.9);
    }

    #[test]
    fn scenes_are_independent() {
        let mut store = LabelStore::default();
        store.add(record("a", &range(0, 10), 0.5));
        assert_eq!(store.add(record("b", &range(0, 10), 0.5)), AddOutcome::Stored);
    }

    #[test]
    fn stats_and_accuracy() {
        let mut store = LabelStore::default();
        let empty = store.stats(Some(&BTreeMap::new()));
        assert_eq!((empty.total, empty.accuracy), (0, None));
        let gt: BTreeMap<String, Vec<IndexMask>> = [(
            "s".to_string(),
            vec![
                IndexMask::new(range(0, 10), 100).unwrap(),
                IndexMask::new(range(50, 60), 100).unwrap(),
            ],
        )]
        .into();
        store.add(record("s", &range(0, 10), 0.9));
        store.add(record("s", &range(50, 60), 0.8));
        let s = store.stats(Some(&gt));
        assert_eq!((s.total, s.new_since_last, s.accuracy), (2, 2, Some(1.0)));
        assert_eq!(store.stats(None).new_since_last, 0);

        // IoU 4/10 with the best gt mask.
        let mut store = LabelStore::default();
        store.add(record("s", &range(6, 16), 0.9));
        assert_eq!(store.stats(Some(&gt)).accuracy, Some(0.0));
        assert_eq!(store.stats(None).accuracy, None);
    }

    #[test]
    fn finalize_sorts_by_confidence_then_discovery() {
        let mut store = LabelStore::default();
        store.add(record("s", &range(0, 5), 0.3));
        store.add(record("s", &range(10, 15), 0.8));
        store.add(record("s", &range(20, 25), 0.3));
        store.add(record("s", &range(30, 35), 0.9));
        let conf: Vec<(usize, f64)> = store.finalize("s").iter().map(|(m, c)| (m.indices()[0], *c)).collect();
        assert_eq!(conf, vec![(30, 0.9), (10, 0.8), (0, 0.3), (20, 0.3)]);
        assert!(store.finalize("other").is_empty());
    }

    #[test]
    fn file_round_trip() {
        let mut store = LabelStore::default();
        store.add(record("scene-0001", &range(0, 5), 0.3));
        store.add(record("scene-0002", &[3, 9, 40], 1.0 / 3.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.msk");
        store.write(&path).unwrap();
        let back = LabelStore::read(&path, 0.5).unwrap();
        for id in ["scene-0001", "scene-0002"] {
            assert_eq!(back.records(id), store.records(id));
        }
        assert!(matches!(parse_records(""), Err(MaskFileError::Version(_))));
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(matches!(parse_records(&text[..text.len() - 3]), Err(MaskFileError::Parse { .. })));
        assert!(parse_records("GRABS-MSK v1\n").unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn stored_masks_never_overlap(ops in prop::collection::vec((0usize..60, 1usize..30, 0u8..10), 1..40)) {
            let mut store = LabelStore::default();
            for (start, len, c) in ops {
                let idx: Vec<usize> = (start..(start + len).min(100)).collect();
                store.add(record("s", &idx, c as f64 / 10.0));
            }
            let recs = store.records("s");
            for i in 0..recs.len() {
                for j in 0..i {
                    prop_assert!(mask_iou(&recs[i].mask, &recs[j].mask).unwrap() < 0.5);
                }
            }
        }

        #[test]
        fn add_is_idempotent(start in 0usize..50, len in 1usize..40, c in 0.0f64..1.0) {
            let idx: Vec<usize> = (start..start + len).collect();
            let mut store = LabelStore::default();
            store.add(record("s", &idx, c));
            let once = store.records("s").into_iter().cloned().collect::<Vec<_>>();
            store.add(record("s", &idx, c));
            let twice = store.records("s").into_iter().cloned().collect::<Vec<_>>();
            prop_assert_eq!(once, twice);
        }
    }
}
