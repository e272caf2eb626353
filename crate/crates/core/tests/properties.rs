//! Cross-module invariants checked on random inputs.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rise_core::assignment::{multi_label_match, ot_assign, select_views, CostMatrix, ScoredBox};
use rise_core::data::{generate_shapes, split_labeled, Instance, ShapesConfig, SplitSpec};
use rise_core::eval::{evaluate_ap, GtImage, MaskPrediction};
use rise_core::filter::{build_pseudo_labels, FilterSchedule, PseudoBoxOptions};
use rise_core::geometry::{mask_to_box, BBox, BinaryMask, SoftMask};
use rise_core::losses::{
    association_scores, box_loss, class_loss, embed_loss, mask_loss, total_loss, FocalParams, InstancePrediction,
    LossWeights, PositiveAggregation, SampleLosses,
};
use rise_core::synthesis::{build_bank, make_sequence, overlap_ratio, AugmentationSpec, InstanceBank, SequenceConfig, WeakSpec};

fn arb_mask(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(prop::bool::weighted(0.3), h * w)
        .prop_map(move |v| BinaryMask::from_vec(h, w, v.into_iter().map(u8::from).collect()).unwrap())
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0f64..0.8, 0.0f64..0.8, 0.01f64..0.2, 0.01f64..0.2).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn arb_embeddings(rows: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), rows)
}

fn bank() -> InstanceBank {
    let set = generate_shapes(4, 0, 11, &ShapesConfig::with_resolution(32, 40)).unwrap();
    let refs: Vec<_> = set.samples.iter().collect();
    build_bank(&refs).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn sequences_respect_cap_ids_and_range(seed in 0u64..10_000, annotated in any::<bool>()) {
        let bank = bank();
        let set = generate_shapes(1, 100, seed, &ShapesConfig::with_resolution(32, 40)).unwrap();
        let s = &set.samples[0];
        let cfg = SequenceConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ann = annotated.then_some(s.instances.as_slice());
        // identity weak view keeps the source masks comparable
        let mut spec = AugmentationSpec::default();
        if annotated {
            spec.weak = WeakSpec::identity();
        }
        let seq = make_sequence(&s.image, ann, &bank, &spec, &cfg, &mut rng).unwrap();

        for full in [&seq.inserted_full1, &seq.inserted_full2] {
            for i in 0..full.len() {
                for j in 0..i {
                    prop_assert!(overlap_ratio(&full[i], &full[j]).unwrap() <= cfg.overlap_cap);
                }
            }
        }
        if annotated {
            for new in &seq.inserted_full1 {
                for old in &s.instances {
                    prop_assert!(overlap_ratio(new, &old.mask).unwrap() <= cfg.overlap_cap);
                }
            }
        }
        for frame in [&seq.x1, &seq.x2, &seq.x3] {
            prop_assert!(frame.data().iter().all(|c| (0.0..=1.0).contains(c)));
        }
        for gt in [&seq.gt1, &seq.gt2] {
            let mut ids: Vec<u32> = gt.iter().map(|g| g.id).collect();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), gt.len());
            prop_assert!(gt.iter().all(|g| !g.mask.is_empty()));
        }
        for &(id, i, j) in &seq.correspondence {
            prop_assert_eq!(seq.gt1[i].id, id);
            prop_assert_eq!(seq.gt2[j].id, id);
            prop_assert!(!seq.removed.contains(&id) && !seq.added.contains(&id));
        }
        prop_assert!(seq.removed.iter().all(|id| !seq.added.contains(id)));
        prop_assert!(seq.removed.iter().all(|id| seq.gt2.iter().all(|g| g.id != *id)));
        prop_assert!(seq.added.iter().all(|id| seq.gt1.iter().all(|g| g.id != *id)));
        prop_assert!(seq.k <= cfg.k_max);
    }

    #[test]
    fn ot_partitions_and_views_cover(
        values in (1usize..8, 1usize..4).prop_flat_map(|(p, g)| prop::collection::vec(prop::collection::vec(0.0f64..5.0, g), p)),
        k in 1usize..4,
        cap in 1usize..4,
    ) {
        let cost = CostMatrix::from_values(values);
        let (p, g) = (cost.num_predictions(), cost.num_targets());
        let a = ot_assign(&cost, k).unwrap();
        let mut seen = vec![0; p];
        for &i in a.per_target.iter().flatten().chain(&a.background) {
            seen[i] += 1;
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        prop_assert_eq!(a.per_target.iter().map(Vec::len).sum::<usize>(), p.min(g * k));

        let views = select_views(&a, &cost, cap);
        for t in 0..g {
            let pos = &views.positives[t];
            prop_assert!(pos.len() <= cap && pos.iter().all(|i| a.per_target[t].contains(i)));
            let neg = views.negatives_for(t);
            let mut all: Vec<usize> = pos.iter().chain(&neg).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..p).collect::<Vec<_>>());
        }
    }

    #[test]
    fn multi_label_match_is_idempotent(
        items in prop::collection::vec((0usize..3, 0.0f64..1.0, arb_box()), 0..12)
    ) {
        let items: Vec<ScoredBox> = items.into_iter().map(|(label, score, bbox)| ScoredBox { label, score, bbox }).collect();
        let kept = multi_label_match(&items);
        let sub: Vec<ScoredBox> = kept.iter().map(|&i| items[i]).collect();
        prop_assert_eq!(multi_label_match(&sub), (0..sub.len()).collect::<Vec<_>>());
        let single: Vec<ScoredBox> = items.iter().map(|b| ScoredBox { label: 0, ..*b }).collect();
        prop_assert_eq!(multi_label_match(&single), (0..single.len()).collect::<Vec<_>>());
    }

    #[test]
    fn association_scores_are_doubly_stochastic_halves(
        (z1, z2) in (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(n, m, d)| (arb_embeddings(n, d), arb_embeddings(m, d)))
    ) {
        let f = association_scores(&z1, &z2).unwrap();
        let (n, m) = (z1.len() as f64, z2.len() as f64);
        let sum: f64 = f.iter().flatten().sum();
        prop_assert!((sum - (n + m) / 2.0).abs() < 1e-9);
        prop_assert!(f.iter().flatten().all(|&v| v > 0.0 && v < 1.0 || (n == 1.0 && m == 1.0 && v == 1.0)));
    }

    #[test]
    fn losses_are_nonnegative(
        pred in arb_box(),
        target in arb_box(),
        probs in prop::collection::vec(0.0f64..1.0, 36),
        gt in arb_mask(6, 6),
        scores in prop::collection::vec(prop::collection::vec(0.001f64..0.999, 2), 1..5),
        labels in prop::collection::vec(prop::option::of(0usize..2), 5),
        (anchor, pos, neg) in (1usize..4).prop_flat_map(|d| (prop::collection::vec(-2.0f64..2.0, d), arb_embeddings(2, d), arb_embeddings(3, d))),
    ) {
        let fp = FocalParams::default();
        prop_assert!(box_loss(&pred.to_array(), &target).0 >= 0.0);
        let soft = SoftMask::from_vec(6, 6, probs).unwrap();
        prop_assert!(mask_loss(&soft, &gt, fp).unwrap().0 >= 0.0);
        let labels = &labels[..scores.len()];
        prop_assert!(class_loss(&scores, labels, fp).0 >= 0.0);
        let pos: Vec<&[f64]> = pos.iter().map(Vec::as_slice).collect();
        let neg: Vec<&[f64]> = neg.iter().map(Vec::as_slice).collect();
        for agg in [PositiveAggregation::Numerator, PositiveAggregation::PerPositive] {
            prop_assert!(embed_loss(&anchor, &pos, &neg, agg).unwrap().value >= -1e-12);
        }
    }

    #[test]
    fn total_loss_is_linear_in_each_weight(
        items in prop::collection::vec((any::<bool>(), 0.0f64..5.0, 0.0f64..5.0, 0.0f64..5.0), 1..6),
        base in (0.0f64..2.0, 0.0f64..2.0),
        c in 0.0f64..3.0,
    ) {
        let items: Vec<SampleLosses> = items
            .into_iter()
            .map(|(labeled, supervised, embed, unsupervised)| SampleLosses { labeled, supervised, embed, unsupervised })
            .collect();
        let w = |l3: f64, l4: f64| LossWeights { lambda3: l3, lambda4: l4, ..LossWeights::default() };
        let (l3, l4) = base;
        let embed: f64 = items.iter().map(|s| s.embed).sum();
        let unsup: f64 = items.iter().filter(|s| !s.labeled).map(|s| s.unsupervised).sum();
        prop_assert!((total_loss(&items, &w(l3 + c, l4)) - total_loss(&items, &w(l3, l4)) - c * embed).abs() < 1e-9);
        prop_assert!((total_loss(&items, &w(l3, l4 + c)) - total_loss(&items, &w(l3, l4)) - c * unsup).abs() < 1e-9);
    }

    #[test]
    fn pseudo_boxes_bound_their_masks(
        preds in prop::collection::vec((0.0f64..1.0, prop::collection::vec(0.0f64..1.0, 48)), 0..8),
        t in 0u64..=2000,
        m2b in any::<bool>(),
        mlm in any::<bool>(),
    ) {
        let predictions: Vec<InstancePrediction> = preds
            .into_iter()
            .map(|(s, m)| InstancePrediction {
                scores: vec![s],
                bbox: BBox::new(0.1, 0.1, 0.5, 0.5).unwrap(),
                mask: SoftMask::from_vec(6, 8, m).unwrap(),
                embedding: vec![0.0; 2],
                anchor: None,
            })
            .collect();
        let schedule = FilterSchedule { total_steps: 2000, ..FilterSchedule::default() };
        let opts = PseudoBoxOptions { use_m2b: m2b, use_mlm: mlm, mask_gamma: None };
        let (set, diag) = build_pseudo_labels(&predictions, t, &schedule, &opts).unwrap();
        prop_assert!(set.len() <= diag.retained && diag.retained <= diag.survivors);
        for l in &set.labels {
            prop_assert!(!l.mask.is_empty());
            if m2b {
                prop_assert_eq!(l.pixel_box, Some(mask_to_box(&l.mask).unwrap()));
            }
        }
    }

    #[test]
    fn ap_is_order_invariant_and_ordered(
        gt_masks in prop::collection::vec(arb_mask(5, 5), 1..4),
        preds in prop::collection::vec((arb_mask(5, 5), 0.01f64..1.0), 0..6),
        perm_seed in any::<u64>(),
    ) {
        let instances: Vec<Instance> = gt_masks.into_iter().filter(|m| !m.is_empty()).map(|mask| Instance { category_id: 1, mask }).collect();
        prop_assume!(!instances.is_empty());
        let gt = [GtImage { image_id: 0, instances: &instances }];
        let mut p: Vec<MaskPrediction> = preds
            .into_iter()
            .map(|(mask, score)| MaskPrediction { image_id: 0, category_id: 1, score, mask })
            .collect();
        let m = evaluate_ap(&p, &gt).unwrap();
        prop_assert!(m.ap50 >= m.ap75 && m.ap75 >= 0.0 && m.ap <= m.ap50 + 1e-12);

        use rand::seq::SliceRandom;
        p.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        prop_assert_eq!(evaluate_ap(&p, &gt).unwrap(), m);

        // a last-ranked detection that covers no ground truth
        let covered: Vec<bool> = (0..25).map(|i| instances.iter().any(|g| g.mask.values()[i] == 1)).collect();
        if let Some(free) = covered.iter().position(|c| !c) {
            let mask = BinaryMask::from_fn(5, 5, |u, v| v * 5 + u == free).unwrap();
            p.push(MaskPrediction { image_id: 0, category_id: 1, score: 0.001, mask });
            let m2 = evaluate_ap(&p, &gt).unwrap();
            prop_assert!(m2.ap <= m.ap && m2.ap50 <= m.ap50 && m2.ap75 <= m.ap75);
        }
    }

    #[test]
    fn split_is_a_deterministic_partition(n in 1usize..200, fraction in 0.001f64..=1.0, seed in any::<u64>()) {
        let ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + 7).collect();
        let spec = SplitSpec { labeled_fraction: fraction, seed };
        let (l, u) = split_labeled(&ids, &spec).unwrap();
        prop_assert_eq!(split_labeled(&ids, &spec).unwrap(), (l.clone(), u.clone()));
        prop_assert!(!l.is_empty() && l.len() + u.len() == n);
        let mut all: Vec<u64> = l.iter().chain(&u).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, ids);
    }
}

#[test]
fn one_percent_of_the_full_corpus() {
    let ids: Vec<u64> = (0..30_992).collect();
    let (l, _) = split_labeled(&ids, &SplitSpec { labeled_fraction: 0.01, seed: 0 }).unwrap();
    assert_eq!(l.len(), 309);
}

#[test]
fn dataset_round_trips_through_disk() {
    let set = generate_shapes(3, 5, 2, &ShapesConfig::with_resolution(24, 30)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    set.save(dir.path()).unwrap();
    let back = rise_core::data::Dataset::load(dir.path()).unwrap();
    assert_eq!(back.samples.len(), set.samples.len());
    for (a, b) in set.samples.iter().zip(&back.samples) {
        assert_eq!(a.image_id, b.image_id);
        assert_eq!(a.instances, b.instances);
    }
    let ann = set.to_annotations();
    for a in &ann.annotations {
        let m = rise_core::geometry::rle_decode(&a.rle).unwrap();
        assert_eq!(mask_to_box(&m).unwrap().to_array(), a.bbox);
    }
}
