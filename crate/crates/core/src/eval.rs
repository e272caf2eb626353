//! COCO-style mask average precision.
//!
//! Per image and category, detections are matched greedily in descending
//! score order to the unmatched ground truth of highest mask IoU, at each of
//! the ten IoU thresholds 0.50:0.05:0.95. Precision is interpolated at 101
//! recall points. At most 100 detections per image are kept.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Instance, Sample};
use crate::error::{Error, Result};
use crate::geometry::{mask_iou, rle_decode, rle_encode, BinaryMask, RleMask};

pub const MAX_DETECTIONS: usize = 100;

pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPrediction {
    pub image_id: u64,
    pub category_id: u32,
    pub score: f64,
    pub mask: BinaryMask,
}

/// Ground truth of one image.
#[derive(Debug, Clone, Copy)]
pub struct GtImage<'a> {
    pub image_id: u64,
    pub instances: &'a [Instance],
}

impl<'a> From<&'a Sample> for GtImage<'a> {
    fn from(s: &'a Sample) -> Self {
        Self {
            image_id: s.image_id,
            instances: &s.instances,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// Mask AP, AP50 and AP75, averaged over categories that have ground truth.
pub fn evaluate_ap(predictions: &[MaskPrediction], ground_truth: &[GtImage<'_>]) -> Result<ApMetrics> {
    let known: HashSet<u64> = ground_truth.iter().map(|g| g.image_id).collect();
    if let Some(p) = predictions.iter().find(|p| !known.contains(&p.image_id)) {
        return Err(Error::invalid(format!(
            "prediction references unknown image {}",
            p.image_id
        )));
    }

    let mut categories: Vec<u32> = ground_truth
        .iter()
        .flat_map(|g| g.instances.iter().map(|i| i.category_id))
        .collect();
    categories.sort_unstable();
    categories.dedup();
    if categories.is_empty() {
        return Ok(ApMetrics { ap: 0.0, ap50: 0.0, ap75: 0.0 });
    }

    let thresholds = iou_thresholds();
    let mut per_threshold = [0.0; 10];
    for &cat in &categories {
        let ap = category_ap(predictions, ground_truth, cat, &thresholds)?;
        for (acc, v) in per_threshold.iter_mut().zip(ap) {
            *acc += v;
        }
    }
    let n = categories.len() as f64;
    for v in &mut per_threshold {
        *v /= n;
    }
    Ok(ApMetrics {
        ap: per_threshold.iter().sum::<f64>() / 10.0,
        ap50: per_threshold[0],
        ap75: per_threshold[5],
    })
}

/// Score-descending order; ties are broken by mask content so the result is
/// independent of input order.
fn detection_order(a: &MaskPrediction, b: &MaskPrediction) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.mask.values().cmp(b.mask.values()))
}

fn category_ap(
    predictions: &[MaskPrediction],
    ground_truth: &[GtImage<'_>],
    cat: u32,
    thresholds: &[f64; 10],
) -> Result<[f64; 10]> {
    let mut dets_by_image: BTreeMap<u64, Vec<&MaskPrediction>> = BTreeMap::new();
    for p in predictions.iter().filter(|p| p.category_id == cat) {
        dets_by_image.entry(p.image_id).or_default().push(p);
    }
    let gt_by_image: HashMap<u64, Vec<&Instance>> = ground_truth
        .iter()
        .map(|g| {
            (
                g.image_id,
                g.instances.iter().filter(|i| i.category_id == cat).collect(),
            )
        })
        .collect();
    let n_pos: usize = gt_by_image.values().map(Vec::len).sum();

    // (score, tp flag per threshold), image order then score order
    let mut records: Vec<(f64, [bool; 10])> = Vec::new();
    for (image_id, dets) in dets_by_image.iter_mut() {
        dets.sort_by(|a, b| detection_order(a, b));
        dets.truncate(MAX_DETECTIONS);
        let gts = gt_by_image.get(image_id).map(Vec::as_slice).unwrap_or(&[]);
        let ious: Vec<Vec<f64>> = dets
            .iter()
            .map(|d| gts.iter().map(|g| mask_iou(&d.mask, &g.mask)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        let mut flags = vec![[false; 10]; dets.len()];
        for (t, &thr) in thresholds.iter().enumerate() {
            let mut taken = vec![false; gts.len()];
            for (d, row) in ious.iter().enumerate() {
                let mut best = None;
                let mut best_iou = thr.min(1.0 - 1e-10);
                for (g, &iou) in row.iter().enumerate() {
                    if taken[g] || iou < best_iou {
                        continue;
                    }
                    best_iou = iou;
                    best = Some(g);
                }
                if let Some(g) = best {
                    taken[g] = true;
                    flags[d][t] = true;
                }
            }
        }
        records.extend(dets.iter().zip(flags).map(|(d, f)| (d.score, f)));
    }

    let mut out = [0.0; 10];
    if n_pos == 0 {
        return Ok(out);
    }
    // stable: ties keep image order
    records.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    for (t, ap) in out.iter_mut().enumerate() {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut recall = Vec::with_capacity(records.len());
        let mut precision = Vec::with_capacity(records.len());
        for (_, flags) in &records {
            if flags[t] {
                tp += 1;
            } else {
                fp += 1;
            }
            recall.push(tp as f64 / n_pos as f64);
            precision.push(tp as f64 / (tp + fp) as f64);
        }
        for i in (1..precision.len()).rev() {
            if precision[i] > precision[i - 1] {
                precision[i - 1] = precision[i];
            }
        }
        let mut sum = 0.0;
        for r in 0..=100 {
            let r = r as f64 / 100.0;
            let idx = recall.partition_point(|&x| x < r);
            if idx < precision.len() {
                sum += precision[idx];
            }
        }
        *ap = sum / 101.0;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredictionRecord {
    image_id: u64,
    category_id: u32,
    score: f64,
    rle: RleMask,
}

pub fn save_predictions(predictions: &[MaskPrediction], path: &Path) -> Result<()> {
    let records: Vec<PredictionRecord> = predictions
        .iter()
        .map(|p| PredictionRecord {
            image_id: p.image_id,
            category_id: p.category_id,
            score: p.score,
            rle: rle_encode(&p.mask),
        })
        .collect();
    fs::write(path, serde_json::to_string(&records)?).map_err(|e| Error::io(path, e))
}

pub fn load_predictions(path: &Path) -> Result<Vec<MaskPrediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<PredictionRecord> = serde_json::from_str(&text)?;
    records
        .into_iter()
        .map(|r| {
            Ok(MaskPrediction {
                image_id: r.image_id,
                category_id: r.category_id,
                score: r.score,
                mask: rle_decode(&r.rle)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |u, v| u >= x0 && u <= x1 && v >= y0 && v <= y1).unwrap()
    }

    fn inst(mask: BinaryMask) -> Instance {
        Instance { category_id: 1, mask }
    }

    fn pred(image_id: u64, score: f64, mask: BinaryMask) -> MaskPrediction {
        MaskPrediction { image_id, category_id: 1, score, mask }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gts = vec![inst(rect(10, 10, 0, 0, 3, 3)), inst(rect(10, 10, 5, 5, 9, 9))];
        let gt = [GtImage { image_id: 1, instances: &gts }];
        let preds: Vec<_> = gts.iter().map(|g| pred(1, 1.0, g.mask.clone())).collect();
        let m = evaluate_ap(&preds, &gt).unwrap();
        assert_eq!((m.ap, m.ap50, m.ap75), (1.0, 1.0, 1.0));
    }

    #[test]
    fn no_predictions_is_zero() {
        let gts = vec![inst(rect(10, 10, 0, 0, 3, 3))];
        let gt = [GtImage { image_id: 1, instances: &gts }];
        let m = evaluate_ap(&[], &gt).unwrap();
        assert_eq!((m.ap, m.ap50, m.ap75), (0.0, 0.0, 0.0));
    }

    #[test]
    fn one_tp_one_fp_hand_computed() {
        let gts = vec![inst(rect(10, 10, 0, 0, 3, 3))];
        let gt = [GtImage { image_id: 1, instances: &gts }];
        let fp_mask = rect(10, 10, 6, 6, 9, 9);
        // TP ranked first: precision 1 at recall 1
        let preds = [pred(1, 0.9, gts[0].mask.clone()), pred(1, 0.8, fp_mask.clone())];
        assert_eq!(evaluate_ap(&preds, &gt).unwrap().ap50, 1.0);
        // FP ranked first: envelope precision 1/2 across all recall points
        let preds = [pred(1, 0.9, gts[0].mask.clone()), pred(1, 0.95, fp_mask)];
        assert!((evaluate_ap(&preds, &gt).unwrap().ap50 - 0.5).abs() < 0.01);
    }

    #[test]
    fn unknown_image_is_an_error() {
        let gts = vec![inst(rect(4, 4, 0, 0, 1, 1))];
        let gt = [GtImage { image_id: 1, instances: &gts }];
        let preds = [pred(2, 0.5, rect(4, 4, 0, 0, 1, 1))];
        assert!(evaluate_ap(&preds, &gt).is_err());
    }

    #[test]
    fn prediction_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.json");
        let preds = vec![pred(3, 0.25, rect(5, 6, 1, 1, 2, 4))];
        save_predictions(&preds, &path).unwrap();
        assert_eq!(load_predictions(&path).unwrap(), preds);
    }
}
