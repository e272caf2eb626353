//! Time-scheduled pseudo-label filtering.
//!
//! Class scores pass a rising threshold and then a decaying quantile cut;
//! survivors have their soft masks binarized, receive a box and are
//! optionally grouped with Multi-Label Matching.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::assignment::{multi_label_match, nms, ScoredBox};
use crate::error::{Error, Result};
use crate::geometry::{binarize, mask_to_box, BBox, BinaryMask, PixelBox};
use crate::losses::{InstancePrediction, InstanceTarget};

/// Box IoU above which NMS removes duplicates when MLM is disabled.
pub const PSEUDO_NMS_IOU: f64 = 0.7;
pub const RAMP_INTERVAL: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    ThresholdOnly,
    QuantileOnly,
    #[default]
    CascadeTq,
    CascadeQt,
}

impl FilterMode {
    pub const ALL: [FilterMode; 4] = [
        FilterMode::ThresholdOnly,
        FilterMode::QuantileOnly,
        FilterMode::CascadeTq,
        FilterMode::CascadeQt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterMode::ThresholdOnly => "threshold_only",
            FilterMode::QuantileOnly => "quantile_only",
            FilterMode::CascadeTq => "cascade_tq",
            FilterMode::CascadeQt => "cascade_qt",
        }
    }
}

impl FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FilterMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown filter mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSchedule {
    pub gamma_start: f64,
    pub gamma_peak: f64,
    pub step_interval: u64,
    pub a0: f64,
    pub total_steps: u64,
    pub mode: FilterMode,
}

impl Default for FilterSchedule {
    fn default() -> Self {
        Self {
            gamma_start: 0.5,
            gamma_peak: 0.85,
            step_interval: RAMP_INTERVAL,
            a0: 0.995,
            total_steps: 12_000,
            mode: FilterMode::CascadeTq,
        }
    }
}

impl FilterSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.gamma_start && self.gamma_start <= self.gamma_peak && self.gamma_peak <= 1.0) {
            return Err(Error::config("need 0 <= gamma_start <= gamma_peak <= 1"));
        }
        if !(0.0..=1.0).contains(&self.a0) {
            return Err(Error::config("a0 must lie in [0, 1]"));
        }
        if self.total_steps == 0 || self.step_interval == 0 {
            return Err(Error::config("total_steps and step_interval must be positive"));
        }
        Ok(())
    }

    fn check_step(&self, t: u64) -> Result<()> {
        if t > self.total_steps {
            return Err(Error::invalid(format!("step {t} outside [0, {}]", self.total_steps)));
        }
        Ok(())
    }

    /// Piecewise-constant threshold ramp, raised every `step_interval` steps.
    pub fn gamma_at(&self, t: u64) -> Result<f64> {
        self.check_step(t)?;
        let stepped = (t / self.step_interval * self.step_interval) as f64;
        let g = self.gamma_start + (self.gamma_peak - self.gamma_start) * stepped / self.total_steps as f64;
        Ok(g.min(self.gamma_peak))
    }

    /// Linearly decaying quantile probability `a0 (1 - t/T)`.
    pub fn quantile_prob_at(&self, t: u64) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.a0 * (1.0 - t as f64 / self.total_steps as f64))
    }
}

/// Empirical `p`-quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let q = sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]);
    Some(q.clamp(sorted[lo], sorted[hi]))
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("quantile probability {p} outside [0, 1]")));
    }
    Ok(())
}

fn above_quantile(scores: &[f64], candidates: &[usize], p: f64) -> Vec<usize> {
    let vals: Vec<f64> = candidates.iter().map(|&i| scores[i]).collect();
    match quantile(&vals, p) {
        Some(q) => candidates.iter().copied().filter(|&i| scores[i] >= q).collect(),
        None => Vec::new(),
    }
}

/// Threshold then quantile: keeps `{i : s_i > γ}` members scoring at least
/// the `p`-quantile of that set. Returns ascending indices.
pub fn cascade_filter(scores: &[f64], gamma: f64, p: f64) -> Result<Vec<usize>> {
    filter_scores(scores, gamma, p, FilterMode::CascadeTq)
}

/// The four filtering strategies over one score vector.
pub fn filter_scores(scores: &[f64], gamma: f64, p: f64, mode: FilterMode) -> Result<Vec<usize>> {
    check_p(p)?;
    let all: Vec<usize> = (0..scores.len()).collect();
    let threshold = |idx: &[usize]| idx.iter().copied().filter(|&i| scores[i] > gamma).collect::<Vec<_>>();
    Ok(match mode {
        FilterMode::ThresholdOnly => threshold(&all),
        FilterMode::QuantileOnly => above_quantile(scores, &all, p),
        FilterMode::CascadeTq => above_quantile(scores, &threshold(&all), p),
        FilterMode::CascadeQt => threshold(&above_quantile(scores, &all, p)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub label: usize,
    pub score: f64,
    /// Normalized continuous box.
    pub bbox: BBox,
    /// Pixel bound of the mask, present when the box came from M2B.
    pub pixel_box: Option<PixelBox>,
    pub mask: BinaryMask,
    /// Index of the prediction this label came from.
    pub source: usize,
}

impl PseudoLabel {
    pub fn to_target(&self) -> InstanceTarget {
        InstanceTarget {
            label: self.label,
            bbox: self.bbox,
            mask: self.mask.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabelSet {
    pub labels: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn targets(&self) -> Vec<InstanceTarget> {
        self.labels.iter().map(PseudoLabel::to_target).collect()
    }
}

/// Per-call counts, and the raw candidate scores for density reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterDiagnostics {
    pub step: u64,
    pub gamma: f64,
    pub p: f64,
    pub candidates: usize,
    pub survivors: usize,
    pub retained: usize,
    pub dropped_empty: usize,
    pub emitted: usize,
    pub scores: Vec<f64>,
}

impl FilterDiagnostics {
    pub const CSV_HEADER: &'static str = "step,gamma,p,candidates,survivors,retained,dropped_empty,emitted";

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{:.6},{:.6},{},{},{},{},{}",
            self.step, self.gamma, self.p, self.candidates, self.survivors, self.retained, self.dropped_empty, self.emitted
        );
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoBoxOptions {
    pub use_m2b: bool,
    pub use_mlm: bool,
    /// Mask binarization threshold; `None` follows the class threshold.
    pub mask_gamma: Option<f64>,
}

impl Default for PseudoBoxOptions {
    fn default() -> Self {
        Self {
            use_m2b: true,
            use_mlm: true,
            mask_gamma: None,
        }
    }
}

/// Turns weak-branch predictions into pseudo-labels for step `t`.
pub fn build_pseudo_labels(
    predictions: &[InstancePrediction],
    t: u64,
    schedule: &FilterSchedule,
    options: &PseudoBoxOptions,
) -> Result<(PseudoLabelSet, FilterDiagnostics)> {
    let gamma = schedule.gamma_at(t)?;
    let p = schedule.quantile_prob_at(t)?;
    let tops: Vec<(usize, f64)> = predictions.iter().map(InstancePrediction::top_class).collect();
    let scores: Vec<f64> = tops.iter().map(|t| t.1).collect();
    let retained = filter_scores(&scores, gamma, p, schedule.mode)?;
    let survivors = scores.iter().filter(|&&s| s > gamma).count();
    let mask_gamma = options.mask_gamma.unwrap_or(gamma);

    let mut labels = Vec::new();
    let mut dropped_empty = 0;
    for &i in &retained {
        let pred = &predictions[i];
        let mask = binarize(&pred.mask, mask_gamma);
        let Ok(pb) = mask_to_box(&mask) else {
            dropped_empty += 1;
            continue;
        };
        let (bbox, pixel_box) = if options.use_m2b {
            (pb.normalized(mask.height(), mask.width()), Some(pb))
        } else {
            (pred.bbox, None)
        };
        labels.push(PseudoLabel {
            label: tops[i].0,
            score: tops[i].1,
            bbox,
            pixel_box,
            mask,
            source: i,
        });
    }

    let boxes: Vec<ScoredBox> = labels
        .iter()
        .map(|l| ScoredBox {
            label: l.label,
            score: l.score,
            bbox: l.bbox,
        })
        .collect();
    let keep = if options.use_mlm {
        multi_label_match(&boxes)
    } else {
        nms(&boxes, PSEUDO_NMS_IOU)
    };
    let labels: Vec<PseudoLabel> = keep.into_iter().map(|k| labels[k].clone()).collect();

    let diag = FilterDiagnostics {
        step: t,
        gamma,
        p,
        candidates: predictions.len(),
        survivors,
        retained: retained.len(),
        dropped_empty,
        emitted: labels.len(),
        scores,
    };
    Ok((PseudoLabelSet { labels }, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SoftMask;
    use proptest::prelude::*;

    fn sched(total: u64) -> FilterSchedule {
        FilterSchedule {
            total_steps: total,
            ..FilterSchedule::default()
        }
    }

    #[test]
    fn gamma_ramp_examples() {
        let s = sched(12_000);
        assert_eq!(s.gamma_at(0).unwrap(), 0.5);
        assert!((s.gamma_at(12_000).unwrap() - 0.85).abs() < 1e-12);
        assert!((s.gamma_at(6_000).unwrap() - 0.675).abs() < 1e-12);
        assert_eq!(s.gamma_at(999).unwrap(), 0.5);
        assert!(s.gamma_at(12_001).is_err());
    }

    #[test]
    fn quantile_prob_examples() {
        let s = sched(12_000);
        assert_eq!(s.quantile_prob_at(0).unwrap(), 0.995);
        assert_eq!(s.quantile_prob_at(12_000).unwrap(), 0.0);
        assert!((s.quantile_prob_at(6_000).unwrap() - 0.4975).abs() < 1e-12);
    }

    #[test]
    fn cascade_examples() {
        assert_eq!(cascade_filter(&[0.9, 0.7, 0.6, 0.4], 0.5, 0.0).unwrap(), vec![0, 1, 2]);
        assert!(cascade_filter(&[0.9, 1.0, 0.3], 1.0, 0.5).unwrap().is_empty());
        assert_eq!(cascade_filter(&[0.9, 0.7], 0.5, 1.0).unwrap(), vec![0]);
        assert!(cascade_filter(&[0.9], 0.5, 1.5).is_err());
        assert!(cascade_filter(&[], 0.5, 0.5).unwrap().is_empty());
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[0.0, 1.0], 0.25), Some(0.25));
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), Some(2.0));
    }

    fn square_pred(score: f64, h: usize, w: usize, on: impl Fn(usize, usize) -> bool) -> InstancePrediction {
        let vals = (0..h * w).map(|i| if on(i % w, i / w) { 0.95 } else { 0.05 }).collect();
        InstancePrediction {
            scores: vec![score],
            bbox: BBox::new(0.0, 0.0, 0.5, 0.5).unwrap(),
            mask: SoftMask::from_vec(h, w, vals).unwrap(),
            embedding: vec![],
            anchor: None,
        }
    }

    #[test]
    fn confident_prediction_gets_m2b_box() {
        let pred = square_pred(0.99, 8, 10, |u, v| (2..=5).contains(&u) && (1..=3).contains(&v));
        let (set, diag) = build_pseudo_labels(&[pred], 0, &sched(100), &PseudoBoxOptions::default()).unwrap();
        assert_eq!(set.len(), 1);
        let l = &set.labels[0];
        assert_eq!(l.pixel_box, Some(mask_to_box(&l.mask).unwrap()));
        assert_eq!(l.pixel_box.unwrap().to_array(), [2, 1, 5, 3]);
        assert_eq!(l.bbox, BBox::new(0.2, 0.125, 0.6, 0.5).unwrap());
        assert_eq!(diag.emitted, 1);
    }

    #[test]
    fn low_scores_and_empty_masks_are_dropped() {
        let low = square_pred(0.2, 4, 4, |_, _| true);
        let (set, _) = build_pseudo_labels(&[low], 0, &sched(100), &PseudoBoxOptions::default()).unwrap();
        assert!(set.is_empty());
        let blank = square_pred(0.99, 4, 4, |_, _| false);
        let (set, diag) = build_pseudo_labels(&[blank], 0, &sched(100), &PseudoBoxOptions::default()).unwrap();
        assert!(set.is_empty());
        assert_eq!(diag.dropped_empty, 1);
    }

    #[test]
    fn standard_box_keeps_prediction() {
        let pred = square_pred(0.99, 8, 8, |u, _| u < 2);
        let opts = PseudoBoxOptions {
            use_m2b: false,
            ..PseudoBoxOptions::default()
        };
        let (set, _) = build_pseudo_labels(&[pred.clone()], 0, &sched(100), &opts).unwrap();
        assert_eq!(set.labels[0].bbox, pred.bbox);
        assert_eq!(set.labels[0].pixel_box, None);
    }

    #[test]
    fn mlm_keeps_duplicates_nms_does_not() {
        let a = square_pred(0.99, 8, 8, |u, v| u < 4 && v < 4);
        let mut b = a.clone();
        b.scores = vec![0.98];
        let s = sched(100);
        let (with, _) = build_pseudo_labels(&[a.clone(), b.clone()], 100, &s, &PseudoBoxOptions::default()).unwrap();
        assert_eq!(with.len(), 2);
        let opts = PseudoBoxOptions {
            use_mlm: false,
            ..PseudoBoxOptions::default()
        };
        let (without, _) = build_pseudo_labels(&[a, b], 100, &s, &opts).unwrap();
        assert_eq!(without.len(), 1);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in FilterMode::ALL {
            assert_eq!(m.name().parse::<FilterMode>().unwrap(), m);
        }
    }

    proptest! {
        #[test]
        fn cascade_limits(scores in prop::collection::vec(1e-9f64..=1.0, 0..30), gamma in 0.0f64..=1.0, p in 0.0f64..=1.0) {
            prop_assert_eq!(
                filter_scores(&scores, gamma, 0.0, FilterMode::CascadeTq).unwrap(),
                filter_scores(&scores, gamma, p, FilterMode::ThresholdOnly).unwrap()
            );
            prop_assert_eq!(
                filter_scores(&scores, 0.0, p, FilterMode::CascadeTq).unwrap(),
                filter_scores(&scores, 0.0, p, FilterMode::QuantileOnly).unwrap()
            );
        }

        #[test]
        fn retained_is_monotone(scores in prop::collection::vec(0.0f64..=1.0, 0..30), g1 in 0.0f64..=1.0, g2 in 0.0f64..=1.0, p1 in 0.0f64..=1.0, p2 in 0.0f64..=1.0) {
            let (glo, ghi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let (plo, phi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            let lo = cascade_filter(&scores, glo, plo).unwrap();
            let hi_p = cascade_filter(&scores, glo, phi).unwrap();
            prop_assert!(hi_p.len() <= lo.len());
            let hi_g = cascade_filter(&scores, ghi, plo).unwrap();
            prop_assert!(hi_g.len() <= lo.len());
            let surv: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > glo).collect();
            prop_assert!(lo.iter().all(|i| surv.contains(i)));
        }
    }
}
