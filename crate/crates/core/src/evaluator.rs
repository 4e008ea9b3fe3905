//! Mean average precision over IoU thresholds 0.50:0.05:0.95 with 101-point
//! interpolation, and the zero-shot protocol on held-out categories.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detector::{Detection, Model};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::scenes::{Scene, SplitSpec};
use crate::textspace::{Category, CategorySpace, PromptSet};

/// Detections kept per image, counted over (box, prompt) pairs.
pub const MAX_DETECTIONS: usize = 100;

pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// AP averaged over thresholds, per evaluated category.
    pub per_category_ap: BTreeMap<String, f64>,
    pub map_50_95: f64,
    pub map_50: f64,
    pub map_75: f64,
    pub num_images: usize,
    pub num_gt: usize,
}

impl EvalResult {
    pub const CSV_HEADER: &'static str = "map_50_95,map_50,map_75,num_images,num_gt";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.map_50_95, self.map_50, self.map_75, self.num_images, self.num_gt
        )
    }

    pub fn report(&self) -> String {
        let mut s = format!(
            "images {}  ground truths {}\nmAP@[.50:.95] {:.4}\nmAP@.50       {:.4}\nmAP@.75       {:.4}\n",
            self.num_images, self.num_gt, self.map_50_95, self.map_50, self.map_75
        );
        for (c, ap) in &self.per_category_ap {
            s.push_str(&format!("  {c:<16} {ap:.4}\n"));
        }
        s
    }
}

/// TP flags for detections already sorted by descending score. Each one
/// claims the unmatched ground truth of highest IoU at or above `threshold`.
pub fn match_detections(dets: &[BBox], gts: &[BBox], threshold: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let v = iou(d, g);
                if v >= threshold && best.is_none_or(|b| v > b.1) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated AP for TP flags in rank order. `None` when there
/// is nothing to score (no ground truths and no detections).
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let mut tp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // Running maximum of precision from the right.
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while k < curve.len() && curve[k].0 < level - 1e-12 {
            k += 1;
        }
        if k < curve.len() {
            sum += curve[k].1;
        }
    }
    Some(sum / 101.0)
}

/// One scored (box, category) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
}

/// Per-query detections expanded to (box, prompt) pairs, best
/// `MAX_DETECTIONS` kept; ties keep query then prompt order.
pub fn flatten_detections(dets: &[Detection]) -> Vec<ScoredBox> {
    let mut out: Vec<ScoredBox> = dets
        .iter()
        .flat_map(|d| {
            d.scores.iter().enumerate().map(|(c, &s)| ScoredBox {
                bbox: d.bbox,
                category: c,
                score: s,
            })
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(MAX_DETECTIONS);
    out
}

/// mAP of `predictions[i]` against `ground_truth[i]`, where categories are
/// indices into `num_categories`.
pub fn compute_map(
    predictions: &[Vec<ScoredBox>],
    ground_truth: &[Vec<(BBox, usize)>],
    category_names: &[String],
) -> EvalResult {
    let thresholds = iou_thresholds();
    let nc = category_names.len();
    let num_gt: usize = ground_truth.iter().map(Vec::len).sum();
    let mut per_threshold = vec![Vec::new(); thresholds.len()];
    let mut per_cat_sum = vec![0.0; nc];
    let mut per_cat_used = vec![false; nc];
    for (ti, &thr) in thresholds.iter().enumerate() {
        for c in 0..nc {
            // (score, is_tp) across images.
            let mut ranked: Vec<(f64, bool)> = Vec::new();
            let mut n_gt = 0;
            for (preds, gts) in predictions.iter().zip(ground_truth) {
                let g: Vec<BBox> = gts.iter().filter(|x| x.1 == c).map(|x| x.0).collect();
                n_gt += g.len();
                let d: Vec<&ScoredBox> = preds.iter().filter(|p| p.category == c).collect();
                let boxes: Vec<BBox> = d.iter().map(|p| p.bbox).collect();
                let flags = match_detections(&boxes, &g, thr);
                ranked.extend(d.iter().zip(flags).map(|(p, f)| (p.score, f)));
            }
            // Equal scores put false positives first so image order is irrelevant.
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let flags: Vec<bool> = ranked.iter().map(|r| r.1).collect();
            if let Some(ap) = average_precision(&flags, n_gt) {
                per_threshold[ti].push(ap);
                per_cat_sum[c] += ap;
                per_cat_used[c] = true;
            }
        }
    }
    let mean = |v: &Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let means: Vec<f64> = per_threshold.iter().map(mean).collect();
    let per_category_ap = (0..nc)
        .filter(|&c| per_cat_used[c])
        .map(|c| (category_names[c].clone(), per_cat_sum[c] / thresholds.len() as f64))
        .collect();
    EvalResult {
        per_category_ap,
        map_50_95: means.iter().sum::<f64>() / means.len() as f64,
        map_50: means[0],
        map_75: means[5],
        num_images: predictions.len(),
        num_gt,
    }
}

/// Evaluates `model` on `scenes` with `categories` as the full prompt set.
pub fn evaluate(
    model: &Model,
    space: &CategorySpace,
    categories: &[Category],
    scenes: &[Scene],
) -> Result<EvalResult> {
    let prompts = PromptSet::fixed(space, categories)?;
    let mut predictions = Vec::with_capacity(scenes.len());
    let mut ground_truth = Vec::with_capacity(scenes.len());
    for s in scenes {
        let mut gts = Vec::with_capacity(s.annotations.len());
        for a in &s.annotations {
            let c = prompts
                .index_of(&a.category)
                .ok_or_else(|| Error::UnknownCategory(a.category.to_string()))?;
            gts.push((a.bbox, c));
        }
        let dets = model.infer(&s.image.patches(model.config.patch_size)?, &prompts.embeddings)?;
        predictions.push(flatten_detections(&dets));
        ground_truth.push(gts);
    }
    let names: Vec<String> = categories.iter().map(|c| c.to_string()).collect();
    Ok(compute_map(&predictions, &ground_truth, &names))
}

/// Zero-shot evaluation: refuses to run if any evaluation category was a
/// training category of `train_split`.
pub fn evaluate_zero_shot(
    model: &Model,
    space: &CategorySpace,
    train_split: &SplitSpec,
    heldout: &[Category],
    scenes: &[Scene],
) -> Result<EvalResult> {
    let overlap = train_split.contaminated_with(heldout);
    if !overlap.is_empty() {
        return Err(Error::SplitContamination(overlap));
    }
    evaluate(model, space, heldout, scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> BBox {
        BBox::new(x, x, x + 0.2, x + 0.2)
    }

    #[test]
    fn matching_examples() {
        assert_eq!(match_detections(&[b(0.1)], &[b(0.1)], 0.5), vec![true]);
        assert_eq!(match_detections(&[b(0.1), b(0.1)], &[b(0.1)], 0.5), vec![true, false]);
        let half = BBox::new(0.1, 0.1, 0.3, 0.19);
        assert!(iou(&half, &b(0.1)) < 0.5);
        assert_eq!(match_detections(&[half], &[b(0.1)], 0.5), vec![false]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        assert!((average_precision(&[false, true], 1).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(average_precision(&[false, false], 2), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
        assert_eq!(average_precision(&[false], 0), Some(0.0));
    }

    #[test]
    fn oracle_detections_score_one() {
        let gts = vec![vec![(b(0.1), 0), (b(0.5), 1)], vec![(b(0.3), 1)]];
        let preds: Vec<Vec<ScoredBox>> = gts
            .iter()
            .map(|g| {
                g.iter()
                    .map(|&(bbox, category)| ScoredBox { bbox, category, score: 0.9 })
                    .collect()
            })
            .collect();
        let r = compute_map(&preds, &gts, &["a".into(), "b".into()]);
        assert_eq!(r.map_50_95, 1.0);
        assert_eq!(r.num_gt, 3);
    }
}
