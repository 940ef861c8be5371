//! Class-agnostic instance-segmentation metrics: AP over an IoU sweep, AP50,
//! AP25, and the matching recall and precision figures.

use crate::geom::{mask_iou, GeomError, IndexMask};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no ground truth")]
    NoGroundTruth,
    #[error("scene {scene}: {source}")]
    Mask { scene: String, source: GeomError },
    #[error("invalid eval config: {0}")]
    Config(String),
}

/// The 0.50:0.05:0.95 sweep.
pub fn default_sweep() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Thresholds averaged into AP, RC and PR.
    pub sweep: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { sweep: default_sweep() }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.sweep.is_empty() || self.sweep.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(EvalError::Config("sweep thresholds must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Predictions and ground truth of one scene. Predictions are ranked by
/// descending confidence; equal confidences keep their given order.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEval {
    pub scene_id: String,
    pub predictions: Vec<(IndexMask, f64)>,
    pub gt: Vec<IndexMask>,
}

impl SceneEval {
    pub fn new(scene_id: impl Into<String>, mut predictions: Vec<(IndexMask, f64)>, gt: Vec<IndexMask>) -> Self {
        predictions.sort_by(|a, b| b.1.total_cmp(&a.1));
        Self {
            scene_id: scene_id.into(),
            predictions,
            gt,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// One flag per prediction, in prediction order.
    pub tp: Vec<bool>,
    pub unmatched_gt: usize,
}

/// Greedy matching in prediction order: each prediction takes the unmatched
/// gt mask of highest IoU (lowest index on ties) if that IoU reaches the
/// threshold.
pub fn match_predictions(predictions: &[IndexMask], gt: &[IndexMask], threshold: f64) -> Result<MatchResult, GeomError> {
    let mut used = vec![false; gt.len()];
    let mut tp = Vec::with_capacity(predictions.len());
    for p in predictions {
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in gt.iter().enumerate() {
            if used[k] {
                continue;
            }
            let iou = mask_iou(p, g)?;
            if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((k, iou));
            }
        }
        if let Some((k, _)) = best {
            used[k] = true;
        }
        tp.push(best.is_some());
    }
    Ok(MatchResult {
        unmatched_gt: used.iter().filter(|u| !**u).count(),
        tp,
    })
}

/// Global ranking of (confidence, is_tp) across scenes plus the gt count.
/// Ties across scenes break by scene id, then by rank within the scene.
fn ranked(scenes: &[SceneEval], threshold: f64) -> Result<(Vec<bool>, usize), EvalError> {
    let mut rows: Vec<(f64, &str, usize, bool)> = Vec::new();
    let mut n_gt = 0;
    for s in scenes {
        let masks: Vec<IndexMask> = s.predictions.iter().map(|(m, _)| m.clone()).collect();
        let m = match_predictions(&masks, &s.gt, threshold).map_err(|source| EvalError::Mask {
            scene: s.scene_id.clone(),
            source,
        })?;
        n_gt += s.gt.len();
        for (rank, ((_, conf), tp)) in s.predictions.iter().zip(m.tp).enumerate() {
            rows.push((*conf, &s.scene_id, rank, tp));
        }
    }
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    rows.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
    Ok((rows.into_iter().map(|r| r.3).collect(), n_gt))
}

/// Area under the precision envelope of the ranked PR curve.
pub fn average_precision(scenes: &[SceneEval], threshold: f64) -> Result<f64, EvalError> {
    let (tp, n_gt) = ranked(scenes, threshold)?;
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let step = 1.0 / n_gt as f64;
    Ok(tp.iter().zip(&precision).filter(|(t, _)| **t).map(|(_, p)| step * p).sum())
}

/// (recall, precision) over all scenes; precision of no predictions is 0.
pub fn recall_precision(scenes: &[SceneEval], threshold: f64) -> Result<(f64, f64), EvalError> {
    let (tp, n_gt) = ranked(scenes, threshold)?;
    let hits = tp.iter().filter(|t| **t).count() as f64;
    let pr = if tp.is_empty() { 0.0 } else { hits / tp.len() as f64 };
    Ok((hits / n_gt as f64, pr))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene_id: String,
    pub n_gt: usize,
    pub n_pred: usize,
    /// Absent when the scene has no ground truth.
    pub ap50: Option<f64>,
    pub rc50: Option<f64>,
    pub pr50: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
    /// Mean recall over the sweep.
    pub rc: f64,
    pub rc50: f64,
    pub rc25: f64,
    /// Mean precision over the sweep.
    pub pr: f64,
    pub pr50: f64,
    pub pr25: f64,
    pub scenes: Vec<SceneReport>,
}

pub fn evaluate(scenes: &[SceneEval], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let n = cfg.sweep.len() as f64;
    let (mut ap, mut rc, mut pr) = (0.0, 0.0, 0.0);
    for &t in &cfg.sweep {
        ap += average_precision(scenes, t)?;
        let (r, p) = recall_precision(scenes, t)?;
        rc += r;
        pr += p;
    }
    let (rc50, pr50) = recall_precision(scenes, 0.5)?;
    let (rc25, pr25) = recall_precision(scenes, 0.25)?;
    let per_scene = scenes
        .iter()
        .map(|s| {
            let one = std::slice::from_ref(s);
            let metrics = match (average_precision(one, 0.5), recall_precision(one, 0.5)) {
                (Ok(a), Ok((r, p))) => (Some(a), Some(r), Some(p)),
                _ => (None, None, None),
            };
            SceneReport {
                scene_id: s.scene_id.clone(),
                n_gt: s.gt.len(),
                n_pred: s.predictions.len(),
                ap50: metrics.0,
                rc50: metrics.1,
                pr50: metrics.2,
            }
        })
        .collect();
    Ok(EvalReport {
        ap: ap / n,
        ap50: average_precision(scenes, 0.5)?,
        ap25: average_precision(scenes, 0.25)?,
        rc: rc / n,
        rc50,
        rc25,
        pr: pr / n,
        pr50,
        pr25,
        scenes: per_scene,
    })
}

impl EvalReport {
    /// Aligned table in percent, one header row and one value row, followed
    /// by the per-scene breakdown.
    pub fn to_table(&self) -> String {
        let cols = ["AP", "AP50", "AP25", "RC", "RC50", "RC25", "PR", "PR50", "PR25"];
        let vals = [
            self.ap, self.ap50, self.ap25, self.rc, self.rc50, self.rc25, self.pr, self.pr50, self.pr25,
        ];
        let mut out = String::from("# RC and PR are means over the AP threshold sweep\n");
        for c in cols {
            let _ = write!(out, "{c:>7}");
        }
        out.push('\n');
        for v in vals {
            let _ = write!(out, "{:>7.1}", 100.0 * v);
        }
        out.push('\n');
        if !self.scenes.is_empty() {
            let w = self.scenes.iter().map(|s| s.scene_id.len()).max().unwrap_or(5).max(5);
            let _ = writeln!(out, "\n{:<w$} {:>5} {:>5} {:>7} {:>7} {:>7}", "scene", "gt", "pred", "AP50", "RC50", "PR50");
            let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
            for s in &self.scenes {
                let _ = writeln!(
                    out,
                    "{:<w$} {:>5} {:>5} {:>7} {:>7} {:>7}",
                    s.scene_id,
                    s.n_gt,
                    s.n_pred,
                    pct(s.ap50),
                    pct(s.rc50),
                    pct(s.pr50)
                );
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(ix: &[usize], n: usize) -> IndexMask {
        IndexMask::from_unsorted(ix.to_vec(), n).unwrap()
    }

    fn range(a: usize, b: usize) -> IndexMask {
        IndexMask::new((a..b).collect(), 100).unwrap()
    }

    #[test]
    fn hand_fixture_ap50() {
        // Two gt objects; ranked predictions hit, miss, hit.
        let gt = vec![range(0, 10), range(20, 30)];
        let preds = vec![(range(0, 10), 0.9), (range(50, 60), 0.8), (range(20, 30), 0.7)];
        let s = [SceneEval::new("a", preds, gt)];
        assert_eq!(average_precision(&s, 0.5).unwrap(), 0.5 + (2.0 / 3.0) * 0.5);
        assert_eq!(recall_precision(&s, 0.5).unwrap(), (1.0, 2.0 / 3.0));
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gt = vec![range(0, 10), range(20, 30), range(40, 45)];
        let preds = gt.iter().map(|g| (g.clone(), 1.0)).collect();
        let r = evaluate(&[SceneEval::new("a", preds, gt)], &EvalConfig::default()).unwrap();
        for v in [r.ap, r.ap50, r.ap25, r.rc, r.rc50, r.rc25, r.pr, r.pr50, r.pr25] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn empty_predictions_score_zero() {
        let s = [SceneEval::new("a", vec![], vec![range(0, 10)])];
        let r = evaluate(&s, &EvalConfig::default()).unwrap();
        assert_eq!((r.ap, r.ap50, r.rc50, r.pr50, r.pr), (0.0, 0.0, 0.0, 0.0, 0.0));
        let m = match_predictions(&[], &[range(0, 10)], 0.5).unwrap();
        assert_eq!((m.tp.len(), m.unmatched_gt), (0, 1));
    }

    #[test]
    fn no_ground_truth_is_an_error() {
        let s = [SceneEval::new("a", vec![(range(0, 10), 1.0)], vec![])];
        assert_eq!(average_precision(&s, 0.5), Err(EvalError::NoGroundTruth));
        assert_eq!(recall_precision(&s, 0.5), Err(EvalError::NoGroundTruth));
        assert_eq!(
            evaluate(&s, &EvalConfig::default()).unwrap_err().to_string(),
            "no ground truth"
        );
    }

    #[test]
    fn one_gt_claimed_once() {
        let gt = [range(0, 10)];
        // IoU 0.7 and 0.6 against the same gt.
        let a = mask(&(0..7).collect::<Vec<_>>(), 100);
        let b = mask(&(4..10).collect::<Vec<_>>(), 100);
        assert!((mask_iou(&a, &gt[0]).unwrap() - 0.7).abs() < 1e-12);
        assert!((mask_iou(&b, &gt[0]).unwrap() - 0.6).abs() < 1e-12);
        let m = match_predictions(&[a, b], &gt, 0.5).unwrap();
        assert_eq!((m.tp, m.unmatched_gt), (vec![true, false], 0));
    }

    #[test]
    fn one_tp_one_fp_over_two_gt() {
        let gt = vec![range(0, 10), range(20, 30)];
        let s = [SceneEval::new("a", vec![(range(0, 10), 0.9), (range(60, 70), 0.5)], gt)];
        assert_eq!(recall_precision(&s, 0.5).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn scene_order_does_not_matter() {
        let a = SceneEval::new("a", vec![(range(0, 10), 0.5), (range(30, 40), 0.5)], vec![range(0, 10)]);
        let b = SceneEval::new("b", vec![(range(50, 60), 0.5)], vec![range(20, 30)]);
        let r1 = evaluate(&[a.clone(), b.clone()], &EvalConfig::default()).unwrap();
        let r2 = evaluate(&[b, a], &EvalConfig::default()).unwrap();
        assert_eq!((r1.ap, r1.ap50, r1.pr, r1.rc), (r2.ap, r2.ap50, r2.pr, r2.rc));
    }

    #[test]
    fn report_renders() {
        let gt = vec![range(0, 10)];
        let r = evaluate(&[SceneEval::new("scene-0", vec![(range(0, 10), 1.0)], gt)], &EvalConfig::default()).unwrap();
        let t = r.to_table();
        assert!(t.contains("   AP50"));
        assert!(t.contains("  100.0"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    /// Recomputes each prefix's matching from scratch and integrates the
    /// precision envelope over recall directly.
    fn ap_oracle(scenes: &[SceneEval], t: f64) -> f64 {
        let mut all: Vec<(f64, &str, usize)> = Vec::new();
        for s in scenes {
            for (k, (_, c)) in s.predictions.iter().enumerate() {
                all.push((*c, &s.scene_id, k));
            }
        }
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
        let n_gt: usize = scenes.iter().map(|s| s.gt.len()).sum();
        let mut curve = vec![(0.0, 1.0)];
        for cut in 1..=all.len() {
            let mut hits = 0;
            for s in scenes {
                let kept: Vec<IndexMask> = s
                    .predictions
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| all[..cut].iter().any(|(_, id, j)| *id == s.scene_id && j == k))
                    .map(|(_, (m, _))| m.clone())
                    .collect();
                // Brute-force greedy match.
                let mut used = vec![false; s.gt.len()];
                for p in &kept {
                    let mut best = None;
                    let mut best_iou = t;
                    for (g, gm) in s.gt.iter().enumerate() {
                        let iou = mask_iou(p, gm).unwrap();
                        if !used[g] && iou >= best_iou && (best.is_none() || iou > best_iou) {
                            best = Some(g);
                            best_iou = iou;
                        }
                    }
                    if let Some(g) = best {
                        used[g] = true;
                        hits += 1;
                    }
                }
            }
            curve.push((hits as f64 / n_gt as f64, hits as f64 / cut as f64));
        }
        let mut area = 0.0;
        let levels: Vec<f64> = curve.iter().map(|c| c.0).collect();
        for w in 1..levels.len() {
            let (lo, hi) = (levels[w - 1], levels[w]);
            if hi > lo {
                let env = curve.iter().filter(|c| c.0 >= hi).map(|c| c.1).fold(0.0, f64::max);
                area += (hi - lo) * env;
            }
        }
        area
    }

    fn tiny_instance() -> impl Strategy<Value = Vec<SceneEval>> {
        let scene = (
            prop::collection::vec(prop::collection::btree_set(0usize..12, 1..6), 0..=2),
            prop::collection::vec((prop::collection::btree_set(0usize..12, 1..6), 0u8..4), 0..=3),
        );
        prop::collection::vec(scene, 1..=2).prop_map(|scenes| {
            scenes
                .into_iter()
                .enumerate()
                .map(|(i, (gt, preds))| {
                    let gt = gt.into_iter().map(|g| IndexMask::new(g.into_iter().collect(), 12).unwrap()).collect();
                    let preds = preds
                        .into_iter()
                        .map(|(p, c)| (IndexMask::new(p.into_iter().collect(), 12).unwrap(), c as f64 / 4.0))
                        .collect();
                    SceneEval::new(format!("s{i}"), preds, gt)
                })
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn ap_matches_exhaustive_oracle(scenes in tiny_instance(), t in prop::sample::select(vec![0.25, 0.5, 0.75])) {
            let n_gt: usize = scenes.iter().map(|s| s.gt.len()).sum();
            prop_assume!(n_gt > 0);
            let ap = average_precision(&scenes, t).unwrap();
            prop_assert!((ap - ap_oracle(&scenes, t)).abs() < 1e-9);
        }

        #[test]
        fn ap_does_not_grow_with_threshold(scenes in tiny_instance()) {
            let n_gt: usize = scenes.iter().map(|s| s.gt.len()).sum();
            prop_assume!(n_gt > 0);
            let r = evaluate(&scenes, &EvalConfig::default()).unwrap();
            let mut prev = f64::INFINITY;
            for t in [0.05, 0.25, 0.4, 0.5, 0.6, 0.75, 0.9, 1.0] {
                let ap = average_precision(&scenes, t).unwrap();
                prop_assert!(ap <= prev + 1e-12);
                prev = ap;
            }
            prop_assert!(r.ap <= r.ap50 + 1e-12 && r.ap50 <= r.ap25 + 1e-12);
            for v in [r.ap, r.ap50, r.ap25, r.rc, r.rc50, r.rc25, r.pr, r.pr50, r.pr25] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
