use ovdet::evaluator::{average_precision, compute_map, match_detections, ScoredBox};
use ovdet::geometry::BBox;
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..0.7f64, 0.0..0.7f64, 0.05..0.3f64, 0.05..0.3f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

/// Per image: ground truths `(box, category)` and scored detections.
fn arb_dataset() -> impl Strategy<Value = (Vec<Vec<(BBox, usize)>>, Vec<Vec<ScoredBox>>)> {
    prop::collection::vec(
        (
            prop::collection::vec((arb_box(), 0..3usize), 0..4),
            prop::collection::vec((arb_box(), 0..3usize, 0.0..1.0f64), 0..6),
        ),
        1..5,
    )
    .prop_map(|imgs| {
        let gts = imgs.iter().map(|i| i.0.clone()).collect();
        let preds = imgs
            .iter()
            .map(|i| {
                i.1.iter()
                    .map(|&(bbox, category, score)| ScoredBox { bbox, category, score })
                    .collect()
            })
            .collect();
        (gts, preds)
    })
}

fn names() -> Vec<String> {
    vec!["a".into(), "b".into(), "c".into()]
}

proptest! {
    #[test]
    fn flipping_a_tp_never_raises_ap(flags in prop::collection::vec(any::<bool>(), 1..30), extra in 0..5usize, pick in any::<prop::sample::Index>()) {
        let tps: Vec<usize> = flags.iter().enumerate().filter(|f| *f.1).map(|f| f.0).collect();
        prop_assume!(!tps.is_empty());
        let num_gt = tps.len() + extra;
        let before = average_precision(&flags, num_gt).unwrap();
        let mut flipped = flags.clone();
        flipped[tps[pick.index(tps.len())]] = false;
        let after = average_precision(&flipped, num_gt).unwrap();
        prop_assert!(after <= before + 1e-12);
        prop_assert!((0.0..=1.0).contains(&before));
    }

    #[test]
    fn image_order_does_not_change_map((gts, preds) in arb_dataset(), rot in 0..5usize) {
        let a = compute_map(&preds, &gts, &names());
        let k = rot % gts.len();
        let mut g2 = gts.clone();
        let mut p2 = preds.clone();
        g2.rotate_left(k);
        p2.rotate_left(k);
        g2.reverse();
        p2.reverse();
        let b = compute_map(&p2, &g2, &names());
        prop_assert_eq!(a.map_50_95, b.map_50_95);
        prop_assert_eq!(a.per_category_ap, b.per_category_ap);
    }

    #[test]
    fn map_is_the_mean_of_threshold_means((gts, preds) in arb_dataset()) {
        let r = compute_map(&preds, &gts, &names());
        for v in r.per_category_ap.values() {
            prop_assert!((0.0..=1.0).contains(v));
        }
        prop_assert!(r.map_50 >= r.map_75 - 1e-12);
        // Category means and threshold means average the same AP grid.
        if !r.per_category_ap.is_empty() {
            let cat_mean = r.per_category_ap.values().sum::<f64>() / r.per_category_ap.len() as f64;
            prop_assert!((cat_mean - r.map_50_95).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicates_of_one_gt_count_once(b in arb_box(), copies in 1..10usize) {
        let dets = vec![b; copies];
        let flags = match_detections(&dets, &[b], 0.5);
        prop_assert_eq!(flags.iter().filter(|&&f| f).count(), 1);
        prop_assert!(flags[0]);
    }
}

#[test]
fn fp_ahead_of_tp_halves_ap() {
    let g = BBox::new(0.1, 0.1, 0.3, 0.3);
    let far = BBox::new(0.6, 0.6, 0.8, 0.8);
    let preds = vec![vec![
        ScoredBox { bbox: far, category: 0, score: 0.95 },
        ScoredBox { bbox: g, category: 0, score: 0.9 },
    ]];
    let r = compute_map(&preds, &[vec![(g, 0)]], &["a".into()]);
    assert!((r.map_50_95 - 0.5).abs() < 1e-12);
}

#[test]
fn categories_without_gt_or_detections_are_skipped() {
    let g = BBox::new(0.1, 0.1, 0.3, 0.3);
    let preds = vec![vec![ScoredBox { bbox: g, category: 0, score: 0.9 }]];
    let r = compute_map(&preds, &[vec![(g, 0)]], &names());
    assert_eq!(r.per_category_ap.len(), 1);
    assert_eq!(r.map_50_95, 1.0);
    // A detection for a category with no ground truth scores zero for it.
    let preds = vec![vec![
        ScoredBox { bbox: g, category: 0, score: 0.9 },
        ScoredBox { bbox: g, category: 1, score: 0.8 },
    ]];
    let r = compute_map(&preds, &[vec![(g, 0)]], &names());
    assert_eq!(r.per_category_ap["b"], 0.0);
    assert!((r.map_50_95 - 0.5).abs() < 1e-12);
}
