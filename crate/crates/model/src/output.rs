//! Raw network outputs, their decoding into per-instance predictions, and
//! the bridge that feeds externally computed gradients back into the graph.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use rise_core::eval::{MaskPrediction, MAX_DETECTIONS};
use rise_core::geometry::{binarize, mask_iou, BBox, SoftMask};
use rise_core::losses::{InstancePrediction, PredictionGrad};

use crate::error::Result;

/// Logits and embeddings for a batch of `B` images with `P` queries.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `B×P×C`.
    pub class_logits: Tensor,
    /// `B×P×4`, see [`decode_box`].
    pub box_logits: Tensor,
    /// `B×P×H×W`.
    pub mask_logits: Tensor,
    /// `B×P×D`, unnormalized.
    pub embeddings: Tensor,
    /// Normalized `(x, y)` reference point per query; may be empty.
    pub anchors: Vec<[f64; 2]>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps four logits to a valid normalized box:
/// `x_min = σ(a0)`, `x_max = x_min + (1 - x_min) σ(a2)` and likewise for y.
pub fn decode_box(a: [f64; 4]) -> [f64; 4] {
    let (s0, s1, s2, s3) = (sigmoid(a[0]), sigmoid(a[1]), sigmoid(a[2]), sigmoid(a[3]));
    [s0, s1, s0 + (1.0 - s0) * s2, s1 + (1.0 - s1) * s3]
}

/// Chain rule through [`decode_box`]: gradient with respect to the logits.
pub fn box_logit_grad(a: [f64; 4], g: [f64; 4]) -> [f64; 4] {
    let s: [f64; 4] = a.map(sigmoid);
    let ds: [f64; 4] = s.map(|v| v * (1.0 - v));
    [
        (g[0] + g[2] * (1.0 - s[2])) * ds[0],
        (g[1] + g[3] * (1.0 - s[3])) * ds[1],
        g[2] * (1.0 - s[0]) * ds[2],
        g[3] * (1.0 - s[1]) * ds[3],
    ]
}

fn flat(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_vec1::<f32>()?)
}

impl ModelOutput {
    pub fn detach(&self) -> Self {
        Self {
            class_logits: self.class_logits.detach(),
            box_logits: self.box_logits.detach(),
            mask_logits: self.mask_logits.detach(),
            embeddings: self.embeddings.detach(),
            anchors: self.anchors.clone(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.class_logits.dims()[0]
    }

    fn dims(&self) -> (usize, usize, usize, usize, usize, usize) {
        let cd = self.class_logits.dims();
        let md = self.mask_logits.dims();
        let d = self.embeddings.dims()[2];
        (cd[0], cd[1], cd[2], md[2], md[3], d)
    }

    /// Per-image predictions with probabilities in f64.
    pub fn decode(&self) -> Result<Vec<Vec<InstancePrediction>>> {
        let (b, p, c, h, w, d) = self.dims();
        let cls = flat(&self.class_logits)?;
        let boxes = flat(&self.box_logits)?;
        let masks = flat(&self.mask_logits)?;
        let emb = flat(&self.embeddings)?;
        let hw = h * w;
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let mut preds = Vec::with_capacity(p);
            for q in 0..p {
                let n = i * p + q;
                let scores = cls[n * c..(n + 1) * c].iter().map(|&v| sigmoid(v as f64)).collect();
                let a: [f64; 4] = std::array::from_fn(|k| boxes[n * 4 + k] as f64);
                let bbox = BBox::from_array(decode_box(a))?;
                let mask = SoftMask::from_vec(h, w, masks[n * hw..(n + 1) * hw].iter().map(|&v| sigmoid(v as f64)).collect())?;
                let embedding = emb[n * d..(n + 1) * d].iter().map(|&v| v as f64).collect();
                preds.push(InstancePrediction {
                    scores,
                    bbox,
                    mask,
                    embedding,
                    anchor: self.anchors.get(q).copied(),
                });
            }
            out.push(preds);
        }
        Ok(out)
    }

    /// Scalar whose parameter gradient equals the gradient of a loss whose
    /// derivatives with respect to the decoded predictions are `grads`
    /// (probabilities, box corners, mask probabilities, raw embeddings).
    /// Missing images or predictions contribute nothing.
    pub fn surrogate(&self, grads: &[Vec<PredictionGrad>]) -> Result<Tensor> {
        let (b, p, c, h, w, d) = self.dims();
        let hw = h * w;
        let cls = flat(&self.class_logits)?;
        let boxes = flat(&self.box_logits)?;
        let masks = flat(&self.mask_logits)?;
        let mut g_cls = vec![0f32; b * p * c];
        let mut g_box = vec![0f32; b * p * 4];
        let mut g_mask = vec![0f32; b * p * hw];
        let mut g_emb = vec![0f32; b * p * d];
        for (i, per_image) in grads.iter().enumerate().take(b) {
            for (q, g) in per_image.iter().enumerate().take(p) {
                let n = i * p + q;
                for (k, &gs) in g.scores.iter().enumerate().take(c) {
                    let s = sigmoid(cls[n * c + k] as f64);
                    g_cls[n * c + k] = (gs * s * (1.0 - s)) as f32;
                }
                let a: [f64; 4] = std::array::from_fn(|k| boxes[n * 4 + k] as f64);
                for (k, v) in box_logit_grad(a, g.bbox).into_iter().enumerate() {
                    g_box[n * 4 + k] = v as f32;
                }
                for (k, &gm) in g.mask.iter().enumerate().take(hw) {
                    if gm != 0.0 {
                        let s = sigmoid(masks[n * hw + k] as f64);
                        g_mask[n * hw + k] = (gm * s * (1.0 - s)) as f32;
                    }
                }
                for (k, &ge) in g.embedding.iter().enumerate().take(d) {
                    g_emb[n * d + k] = ge as f32;
                }
            }
        }
        let dev = self.class_logits.device();
        let term = |t: &Tensor, g: Vec<f32>| -> Result<Tensor> {
            let g = Tensor::from_vec(g, t.shape(), dev)?;
            Ok((t * g)?.sum_all()?)
        };
        let total = (term(&self.class_logits, g_cls)? + term(&self.box_logits, g_box)?)?;
        let total = (total + term(&self.mask_logits, g_mask)?)?;
        Ok((total + term(&self.embeddings, g_emb)?)?)
    }
}

/// Turning raw predictions into scored binary masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub mask_threshold: f64,
    /// Mask IoU above which a lower-scored duplicate is suppressed.
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            mask_threshold: 0.5,
            nms_iou: 0.5,
            max_detections: MAX_DETECTIONS,
        }
    }
}

/// Thresholds, binarizes and mask-NMSes one image's predictions.
pub fn postprocess(preds: &[InstancePrediction], image_id: u64, cfg: &DetectConfig) -> Result<Vec<MaskPrediction>> {
    let mut cands: Vec<MaskPrediction> = preds
        .iter()
        .filter_map(|p| {
            let (label, score) = p.top_class();
            let mask = binarize(&p.mask, cfg.mask_threshold);
            (score >= cfg.score_threshold && !mask.is_empty()).then_some(MaskPrediction {
                image_id,
                category_id: label as u32 + 1,
                score,
                mask,
            })
        })
        .collect();
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<MaskPrediction> = Vec::new();
    for c in cands {
        let mut dup = false;
        for k in &kept {
            if k.category_id == c.category_id && mask_iou(&k.mask, &c.mask)? > cfg.nms_iou {
                dup = true;
                break;
            }
        }
        if !dup {
            kept.push(c);
            if kept.len() == cfg.max_detections {
                break;
            }
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoded_boxes_are_valid() {
        for a in [[0.0; 4], [50.0, -50.0, -50.0, 50.0], [-3.0, 2.0, 1.0, -1.0]] {
            let b = decode_box(a);
            assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(b[0] <= b[2] && b[1] <= b[3]);
        }
        assert_eq!(decode_box([0.0; 4]), [0.5, 0.5, 0.75, 0.75]);
    }

    #[test]
    fn box_chain_rule_matches_differences() {
        let a = [0.3, -1.2, 0.8, 2.0];
        let g = [0.7, -0.4, 1.1, 0.25];
        let f = |a: [f64; 4]| decode_box(a).iter().zip(g).map(|(b, g)| b * g).sum::<f64>();
        let analytic = box_logit_grad(a, g);
        for k in 0..4 {
            let (mut ap, mut am) = (a, a);
            ap[k] += 1e-5;
            am[k] -= 1e-5;
            let numeric = (f(ap) - f(am)) / 2e-5;
            assert!((numeric - analytic[k]).abs() < 1e-8, "component {k}");
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
