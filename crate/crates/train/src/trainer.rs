//! The training loop: sequence synthesis, weak-branch pseudo-labels, loss
//! evaluation and the optimizer step.

use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rise_core::assignment::{assign, select_views, Assignment, CostMatrix, ViewSplit};
use rise_core::data::{split_labeled, Dataset, Sample, SplitSpec};
use rise_core::eval::{evaluate_ap, ApMetrics, GtImage};
use rise_core::filter::{build_pseudo_labels, FilterDiagnostics, PseudoLabelSet};
use rise_core::frame::RgbImage;
use rise_core::geometry::{binarize, mask_iou};
use rise_core::losses::{
    embed_loss, l2_normalize, l2_normalize_backward, supervised_loss, total_loss, unsupervised_loss, InstancePrediction,
    InstanceTarget, PredictionGrad, SampleLosses, SupervisedTerms,
};
use rise_core::synthesis::{build_bank, make_sequence, InstanceBank, PseudoSequence, SeqInstance, SourceId};
use rise_model::{DetectConfig, SegModel};

use crate::config::{EmbedConfig, NegativeSource, TrainConfig};
use crate::error::{Result, TrainError};

/// Labeled and unlabeled image ids of the training set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub labeled: Vec<u64>,
    pub unlabeled: Vec<u64>,
}

impl Split {
    pub fn new(train: &Dataset, labeled_fraction: f64, seed: u64) -> Result<Self> {
        let (labeled, unlabeled) = split_labeled(&train.image_ids(), &SplitSpec { labeled_fraction, seed })?;
        Ok(Self { labeled, unlabeled })
    }
}

/// Loss values of one step. Per-item terms are averaged over the items
/// that carry them; `total` is the summed objective that was minimized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub supervised: f64,
    pub cls: f64,
    pub bbox: f64,
    pub mask: f64,
    pub embed: f64,
    pub unsupervised: f64,
    /// Pseudo-labels used per unlabeled image.
    pub pseudo_labels: f64,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: u64,
    pub learning_rate: f64,
    pub losses: StepLosses,
    /// Weak-branch pseudo-labels of each unlabeled image.
    pub pseudo_labels: Vec<PseudoLabelSet>,
    pub diagnostics: Vec<FilterDiagnostics>,
}

/// Positions of a sequence's frames in the gradient batch.
#[derive(Debug, Clone, Copy, Default)]
struct Slots {
    x1: Option<usize>,
    x2: Option<usize>,
    x3: Option<usize>,
}

/// Embedding gradients per prediction of the two frames.
struct EmbedTerm {
    value: f64,
    grad1: Vec<Vec<f64>>,
    grad2: Vec<Vec<f64>>,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    model: SegModel,
    opt: AdamW,
    labeled: Vec<&'a Sample>,
    unlabeled: Vec<&'a Sample>,
    bank: InstanceBank,
    data_rng: ChaCha8Rng,
    synth_rng: ChaCha8Rng,
    step: u64,
}

fn targets_of<'s>(instances: impl IntoIterator<Item = &'s SeqInstance>) -> Vec<InstanceTarget> {
    instances
        .into_iter()
        .map(|s| InstanceTarget {
            label: s.label,
            bbox: s.pixel_box().normalized(s.mask.height(), s.mask.width()),
            mask: s.mask.clone(),
        })
        .collect()
}

fn accumulate(dst: &mut [PredictionGrad], src: &[PredictionGrad], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        d.add_scaled(s, scale);
    }
}

fn accumulate_embedding(dst: &mut [PredictionGrad], src: Vec<Vec<f64>>, scale: f64) {
    for (d, embedding) in dst.iter_mut().zip(src) {
        d.add_scaled(
            &PredictionGrad {
                embedding,
                ..PredictionGrad::default()
            },
            scale,
        );
    }
}

/// Contrastive loss between two frames: every positive view of a tracked
/// object in frame 1 is an anchor for that object's positive views in frame 2.
fn embed_term(
    p1: &[InstancePrediction],
    p2: &[InstancePrediction],
    v1: &ViewSplit,
    v2: &ViewSplit,
    correspondence: &[(u32, usize, usize)],
    cfg: &EmbedConfig,
) -> EmbedTerm {
    let prep = |p: &InstancePrediction| if cfg.normalize { l2_normalize(&p.embedding) } else { p.embedding.clone() };
    let z1: Vec<Vec<f64>> = p1.iter().map(prep).collect();
    let z2: Vec<Vec<f64>> = p2.iter().map(prep).collect();
    let d = z1.first().map_or(0, Vec::len);
    let mut grad1 = vec![vec![0.0; d]; z1.len()];
    let mut grad2 = vec![vec![0.0; d]; z2.len()];
    let mut value = 0.0;
    for &(_, i1, i2) in correspondence {
        let pos = &v2.positives[i2];
        if pos.is_empty() {
            continue;
        }
        let neg2 = v2.negatives_for(i2);
        let neg1 = match cfg.negatives {
            NegativeSource::SecondFrame => Vec::new(),
            NegativeSource::BothFrames => v1.negatives_for(i1),
        };
        let positives: Vec<&[f64]> = pos.iter().map(|&j| z2[j].as_slice()).collect();
        for &a in &v1.positives[i1] {
            let negatives: Vec<&[f64]> = neg2
                .iter()
                .map(|&j| z2[j].as_slice())
                .chain(neg1.iter().map(|&j| z1[j].as_slice()))
                .collect();
            let Some(r) = embed_loss(&z1[a], &positives, &negatives, cfg.aggregation) else {
                continue;
            };
            value += r.value;
            for (g, v) in grad1[a].iter_mut().zip(&r.anchor) {
                *g += v;
            }
            for (&j, gp) in pos.iter().zip(&r.positives) {
                for (g, v) in grad2[j].iter_mut().zip(gp) {
                    *g += v;
                }
            }
            for (k, gn) in r.negatives.iter().enumerate() {
                let target = if k < neg2.len() { &mut grad2[neg2[k]] } else { &mut grad1[neg1[k - neg2.len()]] };
                for (g, v) in target.iter_mut().zip(gn) {
                    *g += v;
                }
            }
        }
    }
    if cfg.normalize {
        for (g, p) in grad1.iter_mut().zip(p1) {
            *g = l2_normalize_backward(&p.embedding, g);
        }
        for (g, p) in grad2.iter_mut().zip(p2) {
            *g = l2_normalize_backward(&p.embedding, g);
        }
    }
    EmbedTerm { value, grad1, grad2 }
}

impl<'a> Trainer<'a> {
    /// Sets up a run. The instance bank is cut from the labeled split only.
    pub fn new(cfg: TrainConfig, train: &'a Dataset, split: &Split, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if split.labeled.is_empty() {
            return Err(TrainError::config("the labeled split is empty, so no instance bank can be built"));
        }
        let labeled = train.subset(&split.labeled);
        let unlabeled = if cfg.supervised_only { Vec::new() } else { train.subset(&split.unlabeled) };
        if labeled.len() != split.labeled.len() || (!cfg.supervised_only && unlabeled.len() != split.unlabeled.len()) {
            return Err(TrainError::config("split references images missing from the training set"));
        }
        let (h, w) = (cfg.model.height, cfg.model.width);
        if let Some(s) = labeled.iter().chain(&unlabeled).find(|s| s.image.height() != h || s.image.width() != w) {
            return Err(TrainError::config(format!(
                "image {} is {}x{}, the model expects {h}x{w}",
                s.image_id,
                s.image.height(),
                s.image.width()
            )));
        }
        let bank = build_bank(&labeled)?;
        let model = SegModel::new(cfg.model.clone(), seed)?;
        let opt = AdamW::new(
            model.vars(),
            ParamsAdamW {
                lr: cfg.learning_rate,
                weight_decay: cfg.weight_decay,
                ..ParamsAdamW::default()
            },
        )?;
        let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
        data_rng.set_stream(1);
        let mut synth_rng = ChaCha8Rng::seed_from_u64(seed);
        synth_rng.set_stream(2);
        Ok(Self {
            cfg,
            model,
            opt,
            labeled,
            unlabeled,
            bank,
            data_rng,
            synth_rng,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn into_model(self) -> SegModel {
        self.model
    }

    pub fn bank(&self) -> &InstanceBank {
        &self.bank
    }

    /// Number of completed steps.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    /// Runs one optimizer step.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.is_finished() {
            return Err(TrainError::config(format!("all {} steps are done", self.cfg.total_steps)));
        }
        let cfg = &self.cfg;
        let t = self.step;
        let lr = cfg.learning_rate_at(t);
        self.opt.set_learning_rate(lr);
        let w = cfg.loss_weights;
        let use_embed = w.lambda3 > 0.0;

        let lab: Vec<&Sample> = (0..cfg.labeled_batch)
            .map(|_| self.labeled[self.data_rng.random_range(0..self.labeled.len())])
            .collect();
        let unl: Vec<&Sample> = if self.unlabeled.is_empty() || t < cfg.burn_in_steps {
            Vec::new()
        } else {
            (0..cfg.unlabeled_batch)
                .map(|_| self.unlabeled[self.data_rng.random_range(0..self.unlabeled.len())])
                .collect()
        };
        let mut lab_seqs = Vec::with_capacity(lab.len());
        for s in &lab {
            lab_seqs.push(make_sequence(&s.image, Some(&s.instances), &self.bank, &cfg.augmentation, &cfg.sequence, &mut self.synth_rng)?);
        }
        let mut unl_seqs = Vec::with_capacity(unl.len());
        for s in &unl {
            unl_seqs.push(make_sequence(&s.image, None, &self.bank, &cfg.augmentation, &cfg.sequence, &mut self.synth_rng)?);
        }

        let mut frames: Vec<&RgbImage> = Vec::new();
        let mut push = |img| {
            frames.push(img);
            Some(frames.len() - 1)
        };
        let lab_slots: Vec<Slots> = lab_seqs
            .iter()
            .map(|s| Slots {
                x1: push(&s.x1),
                x2: push(&s.x2),
                x3: None,
            })
            .collect();
        let unl_slots: Vec<Slots> = unl_seqs
            .iter()
            .map(|s| Slots {
                x1: if use_embed { push(&s.x1) } else { None },
                x2: if use_embed { push(&s.x2) } else { None },
                x3: push(&s.x3),
            })
            .collect();

        // Weak branch: values only, outside the gradient graph.
        let weak = if unl_seqs.is_empty() {
            Vec::new()
        } else {
            let x1s: Vec<&RgbImage> = unl_seqs.iter().map(|s| &s.x1).collect();
            self.model.forward_no_grad(&self.model.images_to_tensor(&x1s)?)?.decode()?
        };
        let out = self.model.forward(&self.model.images_to_tensor(&frames)?)?;
        let preds = out.decode()?;
        let queries = cfg.model.queries;
        let mut grads = vec![vec![PredictionGrad::default(); queries]; frames.len()];
        let mut items = Vec::with_capacity(lab_seqs.len() + unl_seqs.len());
        let mut sup_terms = SupervisedTerms::default();
        let mut grown = Vec::new();

        for ((seq, slots), sample) in lab_seqs.iter().zip(&lab_slots).zip(&lab) {
            let (i1, i2) = (slots.x1.expect("labeled x1"), slots.x2.expect("labeled x2"));
            let (t1, t2) = (targets_of(&seq.gt1), targets_of(&seq.gt2));
            let (a1, c1) = assign(&preds[i1], &t1, &w, &cfg.assign)?;
            let (a2, c2) = assign(&preds[i2], &t2, &w, &cfg.assign)?;
            let (s1, g1) = supervised_loss(&preds[i1], &t1, &a1, &w, cfg.focal)?;
            let (s2, g2) = supervised_loss(&preds[i2], &t2, &a2, &w, cfg.focal)?;
            accumulate(&mut grads[i1], &g1, 0.5);
            accumulate(&mut grads[i2], &g2, 0.5);
            for (acc, v) in [
                (&mut sup_terms.cls, s1.cls + s2.cls),
                (&mut sup_terms.bbox, s1.bbox + s2.bbox),
                (&mut sup_terms.mask, s1.mask + s2.mask),
                (&mut sup_terms.total, s1.total + s2.total),
            ] {
                *acc += 0.5 * v / lab_seqs.len() as f64;
            }
            let embed = if use_embed {
                let e = self.embed_pair(&preds[i1], &preds[i2], (&a1, &c1), (&a2, &c2), seq);
                accumulate_embedding(&mut grads[i1], e.grad1, w.lambda3);
                accumulate_embedding(&mut grads[i2], e.grad2, w.lambda3);
                e.value
            } else {
                0.0
            };
            if cfg.bank_growth {
                grown.extend(growth_candidates(&preds[i1], &t1, &a1, &c1, seq, sample.image_id, cfg.bank_growth_iou)?);
            }
            items.push(SampleLosses {
                labeled: true,
                supervised: 0.5 * (s1.total + s2.total),
                embed,
                unsupervised: 0.0,
            });
        }

        let mut pseudo_sets = Vec::with_capacity(unl_seqs.len());
        let mut diagnostics = Vec::with_capacity(unl_seqs.len());
        let mut pseudo_used = 0usize;
        for ((seq, slots), weak_preds) in unl_seqs.iter().zip(&unl_slots).zip(&weak) {
            let (pseudo, diag) = build_pseudo_labels(weak_preds, t, &cfg.filter, &cfg.pseudo_box)?;
            let inserted: Vec<&SeqInstance> = seq.inserted_gt1().collect();
            let mut targets = targets_of(inserted.iter().copied());
            for l in &pseudo.labels {
                let mut clash = false;
                for s in &inserted {
                    if mask_iou(&l.mask, &s.mask)? > cfg.pseudo_overlap_iou {
                        clash = true;
                        break;
                    }
                }
                if !clash {
                    targets.push(l.to_target());
                    pseudo_used += 1;
                }
            }
            let i3 = slots.x3.expect("unlabeled x3");
            let (a3, _) = assign(&preds[i3], &targets, &w, &cfg.assign)?;
            let (u, g3) = unsupervised_loss(&preds[i3], &targets, &a3, &w, cfg.focal)?;
            accumulate(&mut grads[i3], &g3, w.lambda4);
            let embed = match (slots.x1, slots.x2) {
                (Some(i1), Some(i2)) => {
                    let (t1, t2) = (targets_of(&seq.gt1), targets_of(&seq.gt2));
                    let (a1, c1) = assign(&preds[i1], &t1, &w, &cfg.assign)?;
                    let (a2, c2) = assign(&preds[i2], &t2, &w, &cfg.assign)?;
                    let e = self.embed_pair(&preds[i1], &preds[i2], (&a1, &c1), (&a2, &c2), seq);
                    accumulate_embedding(&mut grads[i1], e.grad1, w.lambda3);
                    accumulate_embedding(&mut grads[i2], e.grad2, w.lambda3);
                    e.value
                }
                _ => 0.0,
            };
            items.push(SampleLosses {
                labeled: false,
                supervised: 0.0,
                embed,
                unsupervised: u.total,
            });
            pseudo_sets.push(pseudo);
            diagnostics.push(diag);
        }

        let store = out.surrogate(&grads)?.backward()?;
        self.opt.step(&store)?;
        for (image, mask, source) in grown {
            self.bank.add_cutout(&image, &mask, source);
        }
        self.step += 1;

        let n_unl = items.iter().filter(|i| !i.labeled).count().max(1) as f64;
        let losses = StepLosses {
            total: total_loss(&items, &w),
            supervised: sup_terms.total,
            cls: sup_terms.cls,
            bbox: sup_terms.bbox,
            mask: sup_terms.mask,
            embed: items.iter().map(|i| i.embed).sum::<f64>() / items.len().max(1) as f64,
            unsupervised: items.iter().map(|i| i.unsupervised).sum::<f64>() / n_unl,
            pseudo_labels: pseudo_used as f64 / n_unl,
        };
        Ok(StepRecord {
            step: t,
            learning_rate: lr,
            losses,
            pseudo_labels: pseudo_sets,
            diagnostics,
        })
    }

    fn embed_pair(
        &self,
        p1: &[InstancePrediction],
        p2: &[InstancePrediction],
        (a1, c1): (&Assignment, &CostMatrix),
        (a2, c2): (&Assignment, &CostMatrix),
        seq: &PseudoSequence,
    ) -> EmbedTerm {
        let cap = self.cfg.embed.view_cap;
        let v1 = select_views(a1, c1, cap);
        let v2 = select_views(a2, c2, cap);
        embed_term(p1, p2, &v1, &v2, &seq.correspondence, &self.cfg.embed)
    }
}

/// Best-matching frame-1 predictions whose binarized mask overlaps their
/// target by at least `min_iou`, as cutouts of `x1`.
fn growth_candidates(
    preds: &[InstancePrediction],
    targets: &[InstanceTarget],
    assignment: &Assignment,
    cost: &CostMatrix,
    seq: &PseudoSequence,
    image_id: u64,
    min_iou: f64,
) -> Result<Vec<(RgbImage, rise_core::geometry::BinaryMask, SourceId)>> {
    let mut out = Vec::new();
    for (g, set) in assignment.per_target.iter().enumerate() {
        let Some(&p) = set.iter().min_by(|&&a, &&b| cost.values[a][g].total_cmp(&cost.values[b][g])) else {
            continue;
        };
        let mask = binarize(&preds[p].mask, 0.5);
        if !mask.is_empty() && mask_iou(&mask, &targets[g].mask)? >= min_iou {
            let source = SourceId {
                image_id,
                instance: seq.gt1[g].id as usize,
            };
            out.push((seq.x1.clone(), mask, source));
        }
    }
    Ok(out)
}

/// Mask AP of `model` on every image of `data`.
pub fn evaluate(model: &SegModel, data: &Dataset, cfg: &DetectConfig) -> Result<ApMetrics> {
    let images: Vec<&RgbImage> = data.samples.iter().map(|s| &s.image).collect();
    let ids = data.image_ids();
    let preds = model.detect(&images, &ids, cfg, 16)?;
    let gt: Vec<GtImage> = data.samples.iter().map(GtImage::from).collect();
    Ok(evaluate_ap(&preds, &gt)?)
}
