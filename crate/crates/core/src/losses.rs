//! Training losses with analytic gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! the prediction quantities it reads (class probabilities, normalized box
//! corners, per-pixel mask probabilities, embeddings). The trainer feeds
//! these gradients back into the network, so there is no autodiff here.

use serde::{Deserialize, Serialize};

use crate::assignment::{assign, AssignConfig, Assignment};
use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask, SoftMask};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;
/// Additive smoothing of the soft dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 2.0,
            lambda2: 1.0,
            lambda3: 0.05,
            lambda4: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::config(format!("loss weights must be >= 0, got {all:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// One model output instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePrediction {
    /// Per-class probabilities.
    pub scores: Vec<f64>,
    /// Normalized continuous corners in `[0, 1]`.
    pub bbox: BBox,
    pub mask: SoftMask,
    pub embedding: Vec<f64>,
    /// Normalized `(x, y)` reference point of the producing query, if any.
    pub anchor: Option<[f64; 2]>,
}

impl InstancePrediction {
    /// Highest-scoring class and its probability.
    pub fn top_class(&self) -> (usize, f64) {
        self.scores
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, s)| if s > best.1 { (c, s) } else { best })
    }
}

/// A supervision target, either ground truth or a pseudo-label.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTarget {
    pub label: usize,
    /// Normalized continuous corners.
    pub bbox: BBox,
    pub mask: BinaryMask,
}

/// Gradient of a loss with respect to one prediction. Empty vectors mean zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionGrad {
    pub scores: Vec<f64>,
    pub bbox: [f64; 4],
    pub mask: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl PredictionGrad {
    pub fn add_scaled(&mut self, other: &PredictionGrad, scale: f64) {
        add_into(&mut self.scores, &other.scores, scale);
        for (a, b) in self.bbox.iter_mut().zip(other.bbox) {
            *a += scale * b;
        }
        add_into(&mut self.mask, &other.mask, scale);
        add_into(&mut self.embedding, &other.embedding, scale);
    }
}

fn add_into(dst: &mut Vec<f64>, src: &[f64], scale: f64) {
    if src.is_empty() || scale == 0.0 {
        return;
    }
    if dst.is_empty() {
        dst.resize(src.len(), 0.0);
    }
    for (a, b) in dst.iter_mut().zip(src) {
        *a += scale * b;
    }
}

/// Sigmoid focal loss of one probability against a 0/1 target, and its
/// derivative with respect to the probability.
pub fn focal_term(p: f64, target: bool, fp: FocalParams) -> (f64, f64) {
    let FocalParams { alpha, gamma } = fp;
    let clamped = !(PROB_EPS..=1.0 - PROB_EPS).contains(&p);
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let (value, grad) = if target {
        let q = 1.0 - p;
        let lp = p.ln();
        let v = -alpha * q.powf(gamma) * lp;
        let g = -alpha * (-gamma * q.powf(gamma - 1.0) * lp + q.powf(gamma) / p);
        (v, g)
    } else {
        let lq = (1.0 - p).ln();
        let v = -(1.0 - alpha) * p.powf(gamma) * lq;
        let g = -(1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * lq - p.powf(gamma) / (1.0 - p));
        (v, g)
    };
    (value, if clamped { 0.0 } else { grad })
}

/// Focal classification loss over all predictions and classes, normalized by
/// the number of assigned predictions. `labels[p]` is the target class of
/// prediction `p`, or `None` for background (all classes pushed to 0).
pub fn class_loss(scores: &[Vec<f64>], labels: &[Option<usize>], fp: FocalParams) -> (f64, Vec<Vec<f64>>) {
    let n_assigned = labels.iter().filter(|l| l.is_some()).count().max(1) as f64;
    let mut total = 0.0;
    let grads = scores
        .iter()
        .zip(labels)
        .map(|(row, label)| {
            row.iter()
                .enumerate()
                .map(|(c, &p)| {
                    let (v, g) = focal_term(p, *label == Some(c), fp);
                    total += v;
                    g / n_assigned
                })
                .collect()
        })
        .collect();
    (total / n_assigned, grads)
}

/// Generalized IoU of `pred` against `target` with its gradient with
/// respect to the four corners of `pred`.
pub fn giou_with_grad(pred: &[f64; 4], target: &BBox) -> (f64, [f64; 4]) {
    let [x1, y1, x2, y2] = *pred;
    let [tx1, ty1, tx2, ty2] = target.to_array();
    let (pw, ph) = (x2 - x1, y2 - y1);
    let area_p = pw * ph;
    let area_t = (tx2 - tx1) * (ty2 - ty1);

    let iw_raw = x2.min(tx2) - x1.max(tx1);
    let ih_raw = y2.min(ty2) - y1.max(ty1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = area_p + area_t - inter;
    let cw = x2.max(tx2) - x1.min(tx1);
    let ch = y2.max(ty2) - y1.min(ty1);
    let hull = cw * ch;
    if hull <= 0.0 || union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let giou = inter / union - 1.0 + union / hull;

    let d_area = [-ph, -pw, ph, pw];
    let mut d_inter = [0.0; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if x1 > tx1 {
            d_inter[0] = -ih;
        }
        if y1 > ty1 {
            d_inter[1] = -iw;
        }
        if x2 < tx2 {
            d_inter[2] = ih;
        }
        if y2 < ty2 {
            d_inter[3] = iw;
        }
    }
    let mut d_hull = [0.0; 4];
    if x1 < tx1 {
        d_hull[0] = -ch;
    }
    if y1 < ty1 {
        d_hull[1] = -cw;
    }
    if x2 > tx2 {
        d_hull[2] = ch;
    }
    if y2 > ty2 {
        d_hull[3] = cw;
    }
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        grad[k] = d_inter[k] / union - inter * d_union / (union * union) + d_union / hull
            - union * d_hull[k] / (hull * hull);
    }
    (giou, grad)
}

/// Mean L1 over the four normalized corners plus `1 - gIoU`.
pub fn box_loss(pred: &[f64; 4], target: &BBox) -> (f64, [f64; 4]) {
    let t = target.to_array();
    let (giou, dgiou) = giou_with_grad(pred, target);
    let mut l1 = 0.0;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d = pred[k] - t[k];
        l1 += d.abs() / 4.0;
        grad[k] = d.signum() * (d != 0.0) as u8 as f64 / 4.0 - dgiou[k];
    }
    (l1 + 1.0 - giou, grad)
}

/// Soft dice loss `1 - (2 Σpg + 1) / (Σp + Σg + 1)` and its gradient.
pub fn dice_loss(pred: &[f64], target: &BinaryMask) -> (f64, Vec<f64>) {
    let g = target.values();
    let sum_p: f64 = pred.iter().sum();
    let sum_g = target.area() as f64;
    let sum_pg: f64 = pred.iter().zip(g).map(|(p, &t)| p * t as f64).sum();
    let num = 2.0 * sum_pg + DICE_SMOOTH;
    let den = sum_p + sum_g + DICE_SMOOTH;
    let grad = g
        .iter()
        .map(|&t| -(2.0 * t as f64 * den - num) / (den * den))
        .collect();
    (1.0 - num / den, grad)
}

/// Dice value only, from precomputed sums (used by the matching cost).
pub fn dice_value(sum_p: f64, sum_g: f64, sum_pg: f64) -> f64 {
    1.0 - (2.0 * sum_pg + DICE_SMOOTH) / (sum_p + sum_g + DICE_SMOOTH)
}

/// Soft dice plus pixel-averaged focal loss.
pub fn mask_loss(pred: &SoftMask, target: &BinaryMask, fp: FocalParams) -> Result<(f64, Vec<f64>)> {
    if pred.height() != target.height() || pred.width() != target.width() {
        return Err(Error::invalid("mask loss: prediction and target dimensions differ"));
    }
    let (dice, mut grad) = dice_loss(pred.values(), target);
    let n = grad.len() as f64;
    let mut focal = 0.0;
    for ((g, &p), &t) in grad.iter_mut().zip(pred.values()).zip(target.values()) {
        let (v, d) = focal_term(p, t != 0, fp);
        focal += v;
        *g += d / n;
    }
    Ok((dice + focal / n, grad))
}

/// Components of `L_cls + λ1 L_box + λ2 L_mask`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SupervisedTerms {
    pub cls: f64,
    pub bbox: f64,
    pub mask: f64,
    pub total: f64,
}

/// Supervised (or, with pseudo-label targets, unsupervised) detection loss
/// over the assigned prediction/target pairs.
pub fn supervised_loss(
    predictions: &[InstancePrediction],
    targets: &[InstanceTarget],
    assignment: &Assignment,
    weights: &LossWeights,
    fp: FocalParams,
) -> Result<(SupervisedTerms, Vec<PredictionGrad>)> {
    if assignment.num_predictions() != predictions.len() || assignment.num_targets() != targets.len() {
        return Err(Error::invalid("assignment does not match predictions/targets"));
    }
    let labels: Vec<Option<usize>> = (0..predictions.len())
        .map(|p| assignment.target_of(p).map(|g| targets[g].label))
        .collect();
    let scores: Vec<Vec<f64>> = predictions.iter().map(|p| p.scores.clone()).collect();
    let (cls, cls_grad) = class_loss(&scores, &labels, fp);

    let mut grads: Vec<PredictionGrad> = cls_grad
        .into_iter()
        .map(|scores| PredictionGrad {
            scores,
            ..PredictionGrad::default()
        })
        .collect();

    let pairs = assignment.pairs();
    let n_pairs = pairs.len().max(1) as f64;
    let mut bbox = 0.0;
    let mut mask = 0.0;
    for &(p, g) in &pairs {
        let pred = &predictions[p];
        let (bv, bg) = box_loss(&pred.bbox.to_array(), &targets[g].bbox);
        bbox += bv / n_pairs;
        for k in 0..4 {
            grads[p].bbox[k] += weights.lambda1 * bg[k] / n_pairs;
        }
        let (mv, mg) = mask_loss(&pred.mask, &targets[g].mask, fp)?;
        mask += mv / n_pairs;
        add_into(&mut grads[p].mask, &mg, weights.lambda2 / n_pairs);
    }
    let total = cls + weights.lambda1 * bbox + weights.lambda2 * mask;
    Ok((SupervisedTerms { cls, bbox, mask, total }, grads))
}

/// Consistency loss of strong-view predictions against pseudo-labels. Same
/// form as [`supervised_loss`]; pseudo-labels are plain values so nothing
/// flows back into the predictions they were derived from.
pub fn unsupervised_loss(
    strong_predictions: &[InstancePrediction],
    pseudo_labels: &[InstanceTarget],
    assignment: &Assignment,
    weights: &LossWeights,
    fp: FocalParams,
) -> Result<(SupervisedTerms, Vec<PredictionGrad>)> {
    supervised_loss(strong_predictions, pseudo_labels, assignment, weights, fp)
}

/// Assigns predictions to targets and evaluates the detection loss.
pub fn matched_loss(
    predictions: &[InstancePrediction],
    targets: &[InstanceTarget],
    weights: &LossWeights,
    fp: FocalParams,
    assign_cfg: &AssignConfig,
) -> Result<(SupervisedTerms, Vec<PredictionGrad>, Assignment)> {
    let (assignment, _) = assign(predictions, targets, weights, assign_cfg)?;
    let (terms, grads) = supervised_loss(predictions, targets, &assignment, weights, fp)?;
    Ok((terms, grads, assignment))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_embeddings(z: &[Vec<f64>], what: &str) -> Result<usize> {
    let d = z.first().map(Vec::len).unwrap_or(0);
    if z.iter().any(|row| row.len() != d || row.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid(format!("{what}: embeddings must be finite with equal dimension")));
    }
    Ok(d)
}

/// Bidirectional softmax association score between frame-1 embeddings
/// `z1` (N×D) and frame-2 embeddings `z2` (M×D):
/// `f(i,j) = ½ [softmax_j(z_j·z_i) + softmax_i(z_j·z_i)]`.
pub fn association_scores(z1: &[Vec<f64>], z2: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if z1.is_empty() || z2.is_empty() {
        return Err(Error::invalid("association scores need at least one embedding per frame"));
    }
    let d1 = check_embeddings(z1, "frame 1")?;
    let d2 = check_embeddings(z2, "frame 2")?;
    if d1 != d2 {
        return Err(Error::invalid(format!("embedding dimensions differ: {d1} vs {d2}")));
    }
    let s: Vec<Vec<f64>> = z1.iter().map(|a| z2.iter().map(|b| dot(a, b)).collect()).collect();
    let (n, m) = (z1.len(), z2.len());
    let mut f = vec![vec![0.0; m]; n];
    for i in 0..n {
        let mx = s[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = s[i].iter().map(|v| (v - mx).exp()).sum();
        for j in 0..m {
            f[i][j] = 0.5 * (s[i][j] - mx).exp() / denom;
        }
    }
    for j in 0..m {
        let mx = (0..n).map(|i| s[i][j]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).map(|i| (s[i][j] - mx).exp()).sum();
        for i in 0..n {
            f[i][j] += 0.5 * (s[i][j] - mx).exp() / denom;
        }
    }
    Ok(f)
}

/// `argmax_j f(i, j)` when that score exceeds 0.5; ties go to the lowest index.
pub fn positive_match(f: &[Vec<f64>], i: usize) -> Option<usize> {
    let row = f.get(i)?;
    let mut best: Option<(usize, f64)> = None;
    for (j, &v) in row.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.filter(|&(_, v)| v > 0.5).map(|(j, _)| j)
}

/// How several positive views enter the contrastive loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveAggregation {
    /// `-log(Σ₊ e^{s₊} / (Σ₊ e^{s₊} + Σ₋ e^{s₋}))`
    #[default]
    Numerator,
    /// Mean over positives of the single-positive loss.
    PerPositive,
}

/// Value and gradients of the contrastive loss for one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedLossGrad {
    pub value: f64,
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Contrastive loss pulling `anchor` towards `positives` and away from
/// `negatives`, on raw dot products. `None` when there are no positives.
pub fn embed_loss(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    aggregation: PositiveAggregation,
) -> Option<EmbedLossGrad> {
    if positives.is_empty() {
        return None;
    }
    let sp: Vec<f64> = positives.iter().map(|z| dot(anchor, z)).collect();
    let sn: Vec<f64> = negatives.iter().map(|z| dot(anchor, z)).collect();
    let d = anchor.len();
    let mut g_anchor = vec![0.0; d];
    let mut g_pos = vec![vec![0.0; d]; positives.len()];
    let mut g_neg = vec![vec![0.0; d]; negatives.len()];

    // dL/ds for each similarity, then chain through the dot products.
    let (value, ds_pos, ds_neg) = match aggregation {
        PositiveAggregation::Numerator => {
            let lse_pos = log_sum_exp(sp.iter().copied());
            let lse_all = log_sum_exp(sp.iter().chain(&sn).copied());
            let ds_pos: Vec<f64> = sp
                .iter()
                .map(|s| (s - lse_all).exp() - (s - lse_pos).exp())
                .collect();
            let ds_neg: Vec<f64> = sn.iter().map(|s| (s - lse_all).exp()).collect();
            (lse_all - lse_pos, ds_pos, ds_neg)
        }
        PositiveAggregation::PerPositive => {
            let k = sp.len() as f64;
            let mut value = 0.0;
            let mut ds_pos = vec![0.0; sp.len()];
            let mut ds_neg = vec![0.0; sn.len()];
            for (a, &s) in sp.iter().enumerate() {
                let lse = log_sum_exp(std::iter::once(s).chain(sn.iter().copied()));
                value += (lse - s) / k;
                ds_pos[a] += ((s - lse).exp() - 1.0) / k;
                for (b, &t) in sn.iter().enumerate() {
                    ds_neg[b] += (t - lse).exp() / k;
                }
            }
            (value, ds_pos, ds_neg)
        }
    };
    for (a, z) in positives.iter().enumerate() {
        for k in 0..d {
            g_anchor[k] += ds_pos[a] * z[k];
            g_pos[a][k] = ds_pos[a] * anchor[k];
        }
    }
    for (b, z) in negatives.iter().enumerate() {
        for k in 0..d {
            g_anchor[k] += ds_neg[b] * z[k];
            g_neg[b][k] = ds_neg[b] * anchor[k];
        }
    }
    Some(EmbedLossGrad {
        value,
        anchor: g_anchor,
        positives: g_pos,
        negatives: g_neg,
    })
}

/// Unit-length copy of `v` (zero vectors are returned unchanged).
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

/// Pulls a gradient taken at `l2_normalize(v)` back to `v`.
pub fn l2_normalize_backward(v: &[f64], grad_unit: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    if n == 0.0 {
        return grad_unit.to_vec();
    }
    let z: Vec<f64> = v.iter().map(|x| x / n).collect();
    let gz = dot(grad_unit, &z);
    grad_unit.iter().zip(&z).map(|(g, zi)| (g - gz * zi) / n).collect()
}

/// Loss components of one batch item.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleLosses {
    pub labeled: bool,
    pub supervised: f64,
    pub embed: f64,
    pub unsupervised: f64,
}

impl SampleLosses {
    /// Multipliers applied to (supervised, embed, unsupervised) for this item.
    pub fn coefficients(labeled: bool, w: &LossWeights) -> (f64, f64, f64) {
        if labeled {
            (1.0, w.lambda3, 0.0)
        } else {
            (0.0, w.lambda3, w.lambda4)
        }
    }
}

/// `Σ 1[y≠∅] L_s + λ3 L_embed + 1[y=∅] λ4 L_u` over the batch, reduced in order.
pub fn total_loss(items: &[SampleLosses], weights: &LossWeights) -> f64 {
    items
        .iter()
        .map(|s| {
            let (cs, ce, cu) = SampleLosses::coefficients(s.labeled, weights);
            cs * s.supervised + ce * s.embed + cu * s.unsupervised
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::box_giou;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-4;

    fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        diff / na.max(nn).max(1e-12)
    }

    fn central(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[k] += STEP;
                b[k] -= STEP;
                (f(&a) - f(&b)) / (2.0 * STEP)
            })
            .collect()
    }

    #[test]
    fn focal_closed_form() {
        let fp = FocalParams::default();
        let (v, _) = focal_term(0.5, true, fp);
        assert!((v - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        let (scores, labels) = (vec![vec![1.0 - 1e-6]], vec![Some(0)]);
        assert!(class_loss(&scores, &labels, fp).0 < 1e-4);
    }

    #[test]
    fn focal_gradient_matches_differences() {
        let fp = FocalParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = rng.random_range(0.01..0.99);
            let t = rng.random_bool(0.5);
            let (_, g) = focal_term(p, t, fp);
            let n = central(|x| focal_term(x[0], t, fp).0, &[p]);
            assert!(rel_err(&[g], &n) < 1e-4);
        }
    }

    #[test]
    fn giou_with_grad_agrees_with_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let a = [rng.random_range(0.0..0.5), rng.random_range(0.0..0.5), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)];
            let b = BBox::new(rng.random_range(0.0..0.6), rng.random_range(0.0..0.6), rng.random_range(0.6..1.0), rng.random_range(0.6..1.0)).unwrap();
            let (g, _) = giou_with_grad(&a, &b);
            assert!((g - box_giou(&BBox::from_array(a).unwrap(), &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn box_loss_examples() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(box_loss(&a.to_array(), &a).0, 0.0);
        let b = BBox::new(2.0, 0.0, 3.0, 1.0).unwrap();
        // L1 = (2 + 0 + 2 + 0) / 4, 1 - gIoU = 4/3
        assert!((box_loss(&a.to_array(), &b).0 - (1.0 + 4.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn dice_extremes() {
        let g = BinaryMask::from_vec(2, 2, vec![1, 1, 0, 0]).unwrap();
        assert!(dice_loss(&[1.0, 1.0, 0.0, 0.0], &g).0.abs() < 1e-12);
        let far = dice_loss(&[0.0, 0.0, 1.0, 1.0], &g).0;
        assert!((far - 1.0).abs() <= 1.0 / 5.0 + 1e-12);
        assert!(far > 0.75);
    }

    #[test]
    fn association_examples() {
        let f = association_scores(&[vec![0.3, -1.0]], &[vec![2.0, 0.5]]).unwrap();
        assert_eq!(f, vec![vec![1.0]]);
        let z = vec![0.7, 0.1, -0.2];
        let f = association_scores(&vec![z.clone(); 2], &vec![z; 4]).unwrap();
        for row in &f {
            for &v in row {
                assert!((v - 0.375).abs() < 1e-15);
            }
        }
        assert!(association_scores(&[vec![f64::NAN]], &[vec![1.0]]).is_err());
        assert!(association_scores(&[], &[vec![1.0]]).is_err());
    }

    #[test]
    fn positive_match_examples() {
        let f = association_scores(&[vec![1.0]], &[vec![1.0]]).unwrap();
        assert_eq!(positive_match(&f, 0), Some(0));

        let z = vec![0.5, 0.5];
        let f = association_scores(&vec![z.clone(); 3], &vec![z; 3]).unwrap();
        // uniform: every entry is 1/3
        assert_eq!(positive_match(&f, 0), None);

        let basis: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|k| if k == i { 6.0 } else { 0.0 }).collect())
            .collect();
        let f = association_scores(&basis, &basis).unwrap();
        for i in 0..4 {
            assert_eq!(positive_match(&f, i), Some(i));
        }
    }

    #[test]
    fn embed_loss_examples() {
        let a = [0.2, 0.4];
        let p = [1.0, -0.5];
        let out = embed_loss(&a, &[&p], &[], PositiveAggregation::Numerator).unwrap();
        assert!(out.value.abs() < 1e-15);
        let out = embed_loss(&a, &[&p], &[&p], PositiveAggregation::Numerator).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-15);
        assert!(embed_loss(&a, &[], &[&p], PositiveAggregation::Numerator).is_none());
    }

    #[test]
    fn normalize_backward_matches_differences() {
        let v = [0.3, -1.2, 0.7];
        let w = [0.5, 0.1, -0.4];
        let g = l2_normalize_backward(&v, &w);
        let n = central(|x| dot(&l2_normalize(x), &w), &v);
        assert!(rel_err(&g, &n) < 1e-6);
    }

    #[test]
    fn total_loss_indicators() {
        let w = LossWeights::default();
        let l = SampleLosses { labeled: true, supervised: 3.0, embed: 2.0, unsupervised: 7.0 };
        assert_eq!(total_loss(&[l], &w), 3.0 + 0.05 * 2.0);
        let u = SampleLosses { labeled: false, ..l };
        assert_eq!(total_loss(&[u], &w), 0.05 * 2.0 + 7.0);
        let no_embed = LossWeights { lambda3: 0.0, ..w };
        assert_eq!(total_loss(&[l], &no_embed), 3.0);
    }
}
