//! Prediction-to-target assignment.
//!
//! [`ot_assign`] treats each target as a supplier of `k` units and each
//! prediction as a consumer of one unit, with a zero-cost background sink
//! (or a zero-cost dummy supplier when targets ask for more than there are
//! predictions). The transport plan is found by log-domain entropic
//! scaling, rounded greedily to an integral plan, and then polished by
//! negative-cycle cancelling so the returned plan is exactly optimal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_iou, BBox};
use crate::losses::{box_loss, dice_value, InstancePrediction, InstanceTarget, LossWeights};

pub const SINKHORN_TOLERANCE: f64 = 1e-6;
pub const SINKHORN_MAX_ITERS: usize = 1000;
/// Entropic regularization as a fraction of the mean cost.
pub const EPSILON_SCALE: f64 = 0.05;
pub const MLM_GROUP_IOU: f64 = 0.7;
/// Extra cost of a prediction outside a target's centre candidates.
pub const CENTER_PENALTY: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    /// Total cost, P×G.
    pub values: Vec<Vec<f64>>,
    pub class: Vec<Vec<f64>>,
    pub bbox: Vec<Vec<f64>>,
    pub dice: Vec<Vec<f64>>,
}

impl CostMatrix {
    /// A cost matrix with no per-term breakdown.
    pub fn from_values(values: Vec<Vec<f64>>) -> Self {
        Self {
            values,
            class: Vec::new(),
            bbox: Vec::new(),
            dice: Vec::new(),
        }
    }

    pub fn num_predictions(&self) -> usize {
        self.values.len()
    }

    pub fn num_targets(&self) -> usize {
        self.values.first().map(Vec::len).unwrap_or(0)
    }
}

/// `cost(p, g) = (1 - ĉ_p[label_g]) + λ1 (L1 + 1 - gIoU) + λ2 dice`.
pub fn pairwise_cost(predictions: &[InstancePrediction], targets: &[InstanceTarget], weights: &LossWeights) -> CostMatrix {
    let sums_p: Vec<f64> = predictions.iter().map(|p| p.mask.values().iter().sum()).collect();
    let target_pixels: Vec<Vec<usize>> = targets
        .iter()
        .map(|t| {
            t.mask
                .values()
                .iter()
                .enumerate()
                .filter_map(|(i, &v)| (v != 0).then_some(i))
                .collect()
        })
        .collect();

    let shape = || vec![vec![0.0; targets.len()]; predictions.len()];
    let (mut values, mut class, mut bbox, mut dice) = (shape(), shape(), shape(), shape());
    for (p, pred) in predictions.iter().enumerate() {
        let pm = pred.mask.values();
        for (g, tgt) in targets.iter().enumerate() {
            let c = 1.0 - pred.scores.get(tgt.label).copied().unwrap_or(0.0);
            let b = box_loss(&pred.bbox.to_array(), &tgt.bbox).0;
            let sum_pg: f64 = target_pixels[g].iter().map(|&i| pm[i]).sum();
            let d = dice_value(sums_p[p], target_pixels[g].len() as f64, sum_pg);
            class[p][g] = c;
            bbox[p][g] = b;
            dice[p][g] = d;
            values[p][g] = c + weights.lambda1 * b + weights.lambda2 * d;
        }
    }
    CostMatrix { values, class, bbox, dice }
}

/// Which predictions supervise which targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub per_target: Vec<Vec<usize>>,
    pub background: Vec<usize>,
    num_predictions: usize,
}

impl Assignment {
    /// Builds an assignment from per-target index sets; every other
    /// prediction becomes background.
    pub fn from_targets(num_predictions: usize, per_target: Vec<Vec<usize>>) -> Result<Self> {
        let mut owner = vec![false; num_predictions];
        for &p in per_target.iter().flatten() {
            if p >= num_predictions || owner[p] {
                return Err(Error::invalid(format!("prediction {p} assigned twice or out of range")));
            }
            owner[p] = true;
        }
        let background = (0..num_predictions).filter(|&p| !owner[p]).collect();
        let mut per_target = per_target;
        for set in &mut per_target {
            set.sort_unstable();
        }
        Ok(Self {
            per_target,
            background,
            num_predictions,
        })
    }

    pub fn empty(num_predictions: usize) -> Self {
        Self {
            per_target: Vec::new(),
            background: (0..num_predictions).collect(),
            num_predictions,
        }
    }

    pub fn num_predictions(&self) -> usize {
        self.num_predictions
    }

    pub fn num_targets(&self) -> usize {
        self.per_target.len()
    }

    pub fn target_of(&self, prediction: usize) -> Option<usize> {
        self.per_target.iter().position(|set| set.contains(&prediction))
    }

    /// (prediction, target) pairs ordered by target then prediction.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.per_target
            .iter()
            .enumerate()
            .flat_map(|(g, set)| set.iter().map(move |&p| (p, g)))
            .collect()
    }

    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs().iter().map(|&(p, g)| cost.values[p][g]).sum()
    }
}

/// Number of predictions each target receives: `k`, unless there are too
/// few predictions in total, in which case `min(P, G·k)` are assigned.
pub fn assigned_total(num_predictions: usize, num_targets: usize, k: usize) -> usize {
    num_predictions.min(num_targets * k)
}

/// Optimal transport assignment with demand `k_per_target` per target.
pub fn ot_assign(cost: &CostMatrix, k_per_target: usize) -> Result<Assignment> {
    let p = cost.num_predictions();
    let g = cost.num_targets();
    if k_per_target == 0 {
        return Err(Error::invalid("k per target must be positive"));
    }
    if cost.values.iter().any(|row| row.len() != g || row.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("cost matrix must be rectangular and finite"));
    }
    if p == 0 || g == 0 {
        return Ok(Assignment::empty(p));
    }
    let problem = Transport::new(cost, k_per_target);
    let plan = problem.sinkhorn();
    let mut flow = problem.round(&plan);
    problem.cancel_negative_cycles(&mut flow);

    let mut per_target = vec![Vec::new(); g];
    for (i, row) in flow.iter().enumerate().take(p) {
        for (j, &x) in row.iter().enumerate().take(g) {
            if x > 0 {
                per_target[j].push(i);
            }
        }
    }
    Assignment::from_targets(p, per_target)
}

/// Balanced transportation problem. Rows are predictions plus an optional
/// dummy supplier; columns are targets plus an optional background sink.
struct Transport {
    cost: Vec<Vec<f64>>,
    allowed: Vec<Vec<bool>>,
    supply: Vec<f64>,
    demand: Vec<f64>,
    n_pred: usize,
    n_target: usize,
}

impl Transport {
    fn new(cm: &CostMatrix, k: usize) -> Self {
        let (p, g) = (cm.num_predictions(), cm.num_targets());
        let shortfall = (g * k).saturating_sub(p);
        let surplus = p.saturating_sub(g * k);
        let rows = p + usize::from(shortfall > 0);
        let cols = g + usize::from(surplus > 0);
        let mut cost = vec![vec![0.0; cols]; rows];
        let mut allowed = vec![vec![true; cols]; rows];
        for i in 0..p {
            cost[i][..g].copy_from_slice(&cm.values[i]);
        }
        if shortfall > 0 && surplus > 0 {
            allowed[rows - 1][cols - 1] = false;
        }
        let mut supply = vec![1.0; rows];
        if shortfall > 0 {
            supply[p] = shortfall as f64;
        }
        let mut demand = vec![k as f64; cols];
        if surplus > 0 {
            demand[g] = surplus as f64;
        }
        Self {
            cost,
            allowed,
            supply,
            demand,
            n_pred: p,
            n_target: g,
        }
    }

    fn epsilon(&self) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for row in self.cost.iter().take(self.n_pred) {
            for v in row.iter().take(self.n_target) {
                sum += v.abs();
                n += 1;
            }
        }
        let mean = sum / n.max(1) as f64;
        if mean > 0.0 {
            EPSILON_SCALE * mean
        } else {
            1e-3
        }
    }

    /// Log-domain Sinkhorn; returns the (fractional) plan.
    fn sinkhorn(&self) -> Vec<Vec<f64>> {
        let eps = self.epsilon();
        let (rows, cols) = (self.supply.len(), self.demand.len());
        let log_a: Vec<f64> = self.supply.iter().map(|v| v.ln()).collect();
        let log_b: Vec<f64> = self.demand.iter().map(|v| v.ln()).collect();
        let kernel = |i: usize, j: usize| {
            if self.allowed[i][j] {
                -self.cost[i][j] / eps
            } else {
                f64::NEG_INFINITY
            }
        };
        let mut f = vec![0.0; rows];
        let mut g = vec![0.0; cols];
        let lse = |xs: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = xs.collect();
            let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                mx
            } else {
                mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
            }
        };
        for _ in 0..SINKHORN_MAX_ITERS {
            for i in 0..rows {
                f[i] = log_a[i] - lse(&mut (0..cols).map(|j| kernel(i, j) + g[j]));
            }
            for j in 0..cols {
                g[j] = log_b[j] - lse(&mut (0..rows).map(|i| kernel(i, j) + f[i]));
            }
            // columns are exact after the g update; check rows
            let err: f64 = (0..rows)
                .map(|i| {
                    let s: f64 = (0..cols).map(|j| (kernel(i, j) + f[i] + g[j]).exp()).sum();
                    (s - self.supply[i]).abs()
                })
                .sum();
            if err < SINKHORN_TOLERANCE {
                break;
            }
        }
        (0..rows)
            .map(|i| (0..cols).map(|j| (kernel(i, j) + f[i] + g[j]).exp()).collect())
            .collect()
    }

    /// Greedy integral rounding in decreasing plan mass.
    fn round(&self, plan: &[Vec<f64>]) -> Vec<Vec<i64>> {
        let (rows, cols) = (self.supply.len(), self.demand.len());
        let mut entries: Vec<(usize, usize)> = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .filter(|&(i, j)| self.allowed[i][j])
            .collect();
        entries.sort_by(|a, b| {
            plan[b.0][b.1]
                .partial_cmp(&plan[a.0][a.1])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(b))
        });
        let mut supply_left: Vec<i64> = self.supply.iter().map(|v| *v as i64).collect();
        let mut demand_left: Vec<i64> = self.demand.iter().map(|v| *v as i64).collect();
        let mut flow = vec![vec![0i64; cols]; rows];
        for (i, j) in entries {
            let q = supply_left[i].min(demand_left[j]);
            if q > 0 {
                flow[i][j] += q;
                supply_left[i] -= q;
                demand_left[j] -= q;
            }
        }
        flow
    }

    /// Cancels negative-cost cycles in the residual graph until none remain.
    fn cancel_negative_cycles(&self, flow: &mut [Vec<i64>]) {
        let (rows, cols) = (self.supply.len(), self.demand.len());
        let n = rows + cols;
        loop {
            // arcs: row -> col (cost c), col -> row (cost -c) when flow > 0
            let mut arcs: Vec<(usize, usize, f64)> = Vec::new();
            for i in 0..rows {
                for j in 0..cols {
                    if !self.allowed[i][j] {
                        continue;
                    }
                    arcs.push((i, rows + j, self.cost[i][j]));
                    if flow[i][j] > 0 {
                        arcs.push((rows + j, i, -self.cost[i][j]));
                    }
                }
            }
            let mut dist = vec![0.0; n];
            let mut pred: Vec<Option<usize>> = vec![None; n];
            let mut touched = None;
            for _ in 0..n {
                touched = None;
                for &(u, v, c) in &arcs {
                    if dist[u] + c < dist[v] - 1e-12 {
                        dist[v] = dist[u] + c;
                        pred[v] = Some(u);
                        touched = Some(v);
                    }
                }
                if touched.is_none() {
                    break;
                }
            }
            let Some(mut v) = touched else {
                return;
            };
            for _ in 0..n {
                v = pred[v].expect("relaxed node has a predecessor");
            }
            // collect cycle
            let start = v;
            let mut cycle = vec![start];
            let mut u = pred[start].expect("cycle node has a predecessor");
            while u != start {
                cycle.push(u);
                u = pred[u].expect("cycle node has a predecessor");
            }
            cycle.reverse();
            // cycle is a sequence of nodes; each consecutive pair is an arc pred -> node
            let mut delta = i64::MAX;
            let len = cycle.len();
            for idx in 0..len {
                let (a, b) = (cycle[idx], cycle[(idx + 1) % len]);
                if a >= rows && b < rows {
                    delta = delta.min(flow[b][a - rows]);
                }
            }
            if delta == 0 || delta == i64::MAX {
                return;
            }
            for idx in 0..len {
                let (a, b) = (cycle[idx], cycle[(idx + 1) % len]);
                if a < rows {
                    flow[a][b - rows] += delta;
                } else {
                    flow[b][a - rows] -= delta;
                }
            }
        }
    }
}

/// Baseline assignment without transport: a prediction is positive for its
/// best target when box IoU ≥ `hi`; everything else is background.
pub fn iou_threshold_assign(pred_boxes: &[BBox], target_boxes: &[BBox], hi: f64) -> Assignment {
    let mut per_target = vec![Vec::new(); target_boxes.len()];
    for (p, pb) in pred_boxes.iter().enumerate() {
        let best = target_boxes
            .iter()
            .enumerate()
            .map(|(g, tb)| (g, box_iou(pb, tb)))
            .fold(None, |acc: Option<(usize, f64)>, (g, iou)| match acc {
                Some((_, b)) if b >= iou => acc,
                _ => Some((g, iou)),
            });
        if let Some((g, iou)) = best {
            if iou >= hi {
                per_target[g].push(p);
            }
        }
    }
    Assignment::from_targets(pred_boxes.len(), per_target).expect("each prediction assigned once")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignerKind {
    #[default]
    OptimalTransport,
    IouThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssignConfig {
    pub kind: AssignerKind,
    pub k_per_target: usize,
    /// Positive threshold of the IoU baseline.
    pub iou_positive: f64,
    /// Centre prior: per target, only the predictions whose anchors are
    /// the this-many nearest to the box centre are cheap; 0 disables it.
    pub center_candidates: usize,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self {
            kind: AssignerKind::OptimalTransport,
            k_per_target: 4,
            iou_positive: 0.7,
            center_candidates: 0,
        }
    }
}

/// Adds [`CENTER_PENALTY`] to every anchored prediction that is not among
/// the `n` anchors nearest to a target's box centre. Unanchored predictions
/// and the per-term breakdown are left alone.
pub fn apply_center_prior(cost: &mut CostMatrix, predictions: &[InstancePrediction], targets: &[InstanceTarget], n: usize) {
    for (g, t) in targets.iter().enumerate() {
        let (cx, cy) = ((t.bbox.x_min + t.bbox.x_max) / 2.0, (t.bbox.y_min + t.bbox.y_max) / 2.0);
        let mut anchored: Vec<(f64, usize)> = predictions
            .iter()
            .enumerate()
            .filter_map(|(p, pred)| pred.anchor.map(|[x, y]| ((x - cx).powi(2) + (y - cy).powi(2), p)))
            .collect();
        anchored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, p) in anchored.iter().skip(n) {
            cost.values[p][g] += CENTER_PENALTY;
        }
    }
}

/// Builds the cost matrix and assigns predictions to targets.
pub fn assign(
    predictions: &[InstancePrediction],
    targets: &[InstanceTarget],
    weights: &LossWeights,
    cfg: &AssignConfig,
) -> Result<(Assignment, CostMatrix)> {
    let mut cost = pairwise_cost(predictions, targets, weights);
    if cfg.center_candidates > 0 {
        apply_center_prior(&mut cost, predictions, targets, cfg.center_candidates);
    }
    let assignment = match cfg.kind {
        AssignerKind::OptimalTransport => ot_assign(&cost, cfg.k_per_target)?,
        AssignerKind::IouThreshold => {
            let pb: Vec<BBox> = predictions.iter().map(|p| p.bbox).collect();
            let tb: Vec<BBox> = targets.iter().map(|t| t.bbox).collect();
            iou_threshold_assign(&pb, &tb, cfg.iou_positive)
        }
    };
    Ok((assignment, cost))
}

/// Positive and negative views per target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewSplit {
    pub positives: Vec<Vec<usize>>,
    num_predictions: usize,
}

impl ViewSplit {
    /// Every prediction that is not a positive view of `target`.
    pub fn negatives_for(&self, target: usize) -> Vec<usize> {
        let pos = &self.positives[target];
        (0..self.num_predictions).filter(|p| !pos.contains(p)).collect()
    }

    /// Predictions that are not positive for any target.
    pub fn shared_negatives(&self) -> Vec<usize> {
        (0..self.num_predictions)
            .filter(|p| !self.positives.iter().any(|set| set.contains(p)))
            .collect()
    }
}

/// Up to `cap` lowest-cost assigned predictions per target are positives.
pub fn select_views(assignment: &Assignment, cost: &CostMatrix, cap: usize) -> ViewSplit {
    let positives = assignment
        .per_target
        .iter()
        .enumerate()
        .map(|(g, set)| {
            let mut ranked = set.clone();
            ranked.sort_by(|&a, &b| {
                cost.values[a][g]
                    .partial_cmp(&cost.values[b][g])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            ranked.truncate(cap);
            ranked
        })
        .collect();
    ViewSplit {
        positives,
        num_predictions: assignment.num_predictions(),
    }
}

/// A scored, labeled box as seen by pseudo-label post-processing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub label: usize,
    pub score: f64,
    pub bbox: BBox,
}

fn score_order(items: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[b]
            .score
            .partial_cmp(&items[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Multi-Label Matching: greedy score-ordered grouping at box IoU > 0.7; in
/// each group only members sharing the leader's class survive, and all of
/// them do. Returns retained indices in ascending order.
pub fn multi_label_match(items: &[ScoredBox]) -> Vec<usize> {
    let order = score_order(items);
    let mut grouped = vec![false; items.len()];
    let mut keep = vec![false; items.len()];
    for (pos, &leader) in order.iter().enumerate() {
        if grouped[leader] {
            continue;
        }
        grouped[leader] = true;
        keep[leader] = true;
        for &m in &order[pos + 1..] {
            if !grouped[m] && box_iou(&items[leader].bbox, &items[m].bbox) > MLM_GROUP_IOU {
                grouped[m] = true;
                keep[m] = items[m].label == items[leader].label;
            }
        }
    }
    (0..items.len()).filter(|&i| keep[i]).collect()
}

/// Class-agnostic non-maximum suppression at box IoU > `iou`: the
/// single-survivor alternative to [`multi_label_match`].
pub fn nms(items: &[ScoredBox], iou: f64) -> Vec<usize> {
    let order = score_order(items);
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| box_iou(&items[k].bbox, &items[i].bbox) <= iou) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all maps prediction -> target/background with
    /// at most k per target and exactly min(P, G·k) assigned.
    pub(crate) fn brute_force_min(cost: &[Vec<f64>], k: usize) -> f64 {
        let p = cost.len();
        let g = cost[0].len();
        let need = assigned_total(p, g, k);
        let mut best = f64::INFINITY;
        let mut choice = vec![0usize; p];
        loop {
            let mut counts = vec![0usize; g];
            let mut total = 0.0;
            let mut assigned = 0;
            for (i, &c) in choice.iter().enumerate() {
                if c < g {
                    counts[c] += 1;
                    total += cost[i][c];
                    assigned += 1;
                }
            }
            if assigned == need && counts.iter().all(|&n| n <= k) && total < best {
                best = total;
            }
            let mut i = 0;
            loop {
                if i == p {
                    return best;
                }
                choice[i] += 1;
                if choice[i] <= g {
                    break;
                }
                choice[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn single_pair() {
        let a = ot_assign(&CostMatrix::from_values(vec![vec![0.3]]), 1).unwrap();
        assert_eq!(a.per_target, vec![vec![0]]);
        assert!(a.background.is_empty());
    }

    #[test]
    fn k_two_takes_both() {
        let a = ot_assign(&CostMatrix::from_values(vec![vec![0.9], vec![0.1]]), 2).unwrap();
        assert_eq!(a.per_target, vec![vec![0, 1]]);
    }

    #[test]
    fn matches_enumeration_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let p = rng.random_range(1..=6);
            let g = rng.random_range(1..=2);
            let k = rng.random_range(1..=2);
            let values: Vec<Vec<f64>> = (0..p).map(|_| (0..g).map(|_| rng.random_range(0.0..3.0)).collect()).collect();
            let cost = CostMatrix::from_values(values.clone());
            let a = ot_assign(&cost, k).unwrap();
            assert!(a.per_target.iter().all(|s| s.len() <= k));
            assert_eq!(a.pairs().len(), assigned_total(p, g, k));
            assert!((a.total_cost(&cost) - brute_force_min(&values, k)).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let cost = CostMatrix::from_values(vec![vec![f64::NAN]]);
        assert!(ot_assign(&cost, 1).is_err());
    }

    #[test]
    fn views_partition_predictions() {
        let cost = CostMatrix::from_values(vec![vec![0.5], vec![0.1], vec![0.9]]);
        let a = Assignment::from_targets(3, vec![vec![0, 1]]).unwrap();
        let v = select_views(&a, &cost, 10);
        assert_eq!(v.positives[0], vec![1, 0]);
        assert_eq!(v.negatives_for(0), vec![2]);
        let v1 = select_views(&a, &cost, 1);
        assert_eq!(v1.positives[0], vec![1]);
        assert_eq!(v1.shared_negatives(), vec![0, 2]);
    }

    fn sb(label: usize, score: f64, b: [f64; 4]) -> ScoredBox {
        ScoredBox { label, score, bbox: BBox::from_array(b).unwrap() }
    }

    #[test]
    fn mlm_examples() {
        let same = [sb(0, 0.9, [0.0, 0.0, 1.0, 1.0]), sb(0, 0.8, [0.0, 0.0, 1.0, 0.95])];
        assert_eq!(multi_label_match(&same), vec![0, 1]);
        assert_eq!(nms(&same, 0.7), vec![0]);
        let mixed = [sb(0, 0.9, [0.0, 0.0, 1.0, 1.0]), sb(1, 0.8, [0.0, 0.0, 1.0, 0.95])];
        assert_eq!(multi_label_match(&mixed), vec![0]);
        let apart = [sb(0, 0.9, [0.0, 0.0, 1.0, 1.0]), sb(1, 0.8, [2.0, 0.0, 3.0, 1.0])];
        assert_eq!(multi_label_match(&apart), vec![0, 1]);
    }

    #[test]
    fn mlm_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let n = rng.random_range(0..10);
            let items: Vec<ScoredBox> = (0..n)
                .map(|_| {
                    let x = rng.random_range(0.0..0.3);
                    let y = rng.random_range(0.0..0.3);
                    sb(rng.random_range(0..3), rng.random_range(0.0..1.0), [x, y, x + rng.random_range(0.4..0.7), y + rng.random_range(0.4..0.7)])
                })
                .collect();
            let once = multi_label_match(&items);
            let sub: Vec<ScoredBox> = once.iter().map(|&i| items[i]).collect();
            let twice = multi_label_match(&sub);
            assert_eq!(twice, (0..sub.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn iou_baseline() {
        let t = [BBox::from_array([0.0, 0.0, 1.0, 1.0]).unwrap()];
        let p = [
            BBox::from_array([0.0, 0.0, 1.0, 0.9]).unwrap(),
            BBox::from_array([0.5, 0.5, 1.5, 1.5]).unwrap(),
        ];
        let a = iou_threshold_assign(&p, &t, 0.7);
        assert_eq!(a.per_target, vec![vec![0]]);
        assert_eq!(a.background, vec![1]);
    }
}
