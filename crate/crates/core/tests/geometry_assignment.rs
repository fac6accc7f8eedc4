//! Brute-force oracles for NMS, anchor assignment and attention targets.

use fan_core::assignment::{assign, AnchorLabel};
use fan_core::attention::build_attention_targets;
use fan_core::{generate_anchors, nms, AnchorSpec, BBox};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// IoU from corner arithmetic, written independently of the library.
fn ref_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// O(n²) NMS: repeatedly take the best remaining box and drop everything
/// overlapping it above the threshold.
fn ref_nms(boxes: &[[f64; 4]], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
                best = i;
            }
        }
        keep.push(best);
        alive.retain(|&i| i != best && ref_iou(boxes[i], boxes[best]) <= thr);
    }
    keep
}

fn random_box(rng: &mut ChaCha8Rng, extent: f64, max_side: f64) -> [f64; 4] {
    let w = rng.random_range(1.0..max_side);
    let h = rng.random_range(1.0..max_side);
    let x = rng.random_range(0.0..extent - w);
    let y = rng.random_range(0.0..extent - h);
    [x, y, x + w, y + h]
}

fn to_bbox(b: [f64; 4]) -> BBox {
    BBox::new(b[0], b[1], b[2], b[3]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nms_matches_exhaustive_reference(seed in any::<u64>(), n in 1usize..=50, thr in 0.1f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<[f64; 4]> = (0..n).map(|_| random_box(&mut rng, 100.0, 40.0)).collect();
        // coarse scores force ties
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect();
        let boxes: Vec<BBox> = raw.iter().copied().map(to_bbox).collect();
        prop_assert_eq!(nms(&boxes, &scores, thr), ref_nms(&raw, &scores, thr));
    }

    #[test]
    fn iou_matches_corner_arithmetic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_box(&mut rng, 50.0, 30.0);
        let b = random_box(&mut rng, 50.0, 30.0);
        let got = fan_core::iou(&to_bbox(a), &to_bbox(b));
        prop_assert!((got - ref_iou(a, b)).abs() <= 1e-12);
    }
}

/// Per-anchor labels recomputed from scratch over every (anchor, gt) pair.
fn oracle_labels(anchors: &[BBox], gt: &[[f64; 4]], pos: f64, bg: f64) -> Vec<AnchorLabel> {
    anchors
        .iter()
        .map(|a| {
            let mut best = (-1.0, 0usize);
            for (g, b) in gt.iter().enumerate() {
                let v = ref_iou(a.coords(), *b);
                if v > best.0 {
                    best = (v, g);
                }
            }
            if gt.is_empty() || best.0 < bg {
                AnchorLabel::Background
            } else if best.0 >= pos {
                AnchorLabel::Positive(best.1)
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect()
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 4]> {
    (0..n)
        .map(|_| {
            let side = 2f64.powf(rng.random_range(4.0..8.0)).min(250.0);
            let aspect = rng.random_range(0.7..1.5);
            let (w, h) = (side, (side * aspect).min(255.0));
            let x = rng.random_range(0.0..256.0 - w);
            let y = rng.random_range(0.0..256.0 - h);
            [x, y, x + w, y + h]
        })
        .collect()
}

#[test]
fn assignment_matches_brute_force_on_random_scenes() {
    let grid = generate_anchors(256, 256, &AnchorSpec::fan()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for scene in 0..100 {
        let gt = random_scene(&mut rng, 1 + scene % 5);
        let boxes: Vec<BBox> = gt.iter().copied().map(to_bbox).collect();
        let got = assign(&grid, &boxes, 0.5, 0.4);
        let want = oracle_labels(&grid.anchors, &gt, 0.5, 0.4);
        assert_eq!(got.labels, want, "scene {scene}");
        for (slot, counts) in got.levels.iter().enumerate() {
            let r = grid.level_range(slot);
            let pos = want[r.clone()].iter().filter(|l| matches!(l, AnchorLabel::Positive(_))).count();
            let non_ignored = want[r].iter().filter(|l| !matches!(l, AnchorLabel::Ignore)).count();
            assert_eq!(counts.n_positive, pos);
            assert_eq!(counts.n_classification, non_ignored);
        }
    }
}

#[test]
fn thresholds_are_monotone() {
    let grid = generate_anchors(256, 256, &AnchorSpec::fan()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let boxes: Vec<BBox> = random_scene(&mut rng, 3).into_iter().map(to_bbox).collect();
        let pos = rng.random_range(0.45..0.7);
        let bg = rng.random_range(0.2..0.45f64).min(pos);
        let d = rng.random_range(0.0..0.1);
        let base = assign(&grid, &boxes, pos, bg);
        let stricter = assign(&grid, &boxes, pos + d, bg);
        assert!(stricter.num_positive() <= base.num_positive());
        let lower_bg = assign(&grid, &boxes, pos, bg - d);
        assert!(lower_bg.num_background() <= base.num_background());
        for (l, m) in base.labels.iter().zip(&base.max_iou) {
            if matches!(l, AnchorLabel::Positive(_)) {
                assert!(*m >= pos);
            }
        }
    }
}

#[test]
fn small_face_attention_lives_on_level_three_only() {
    let grid = generate_anchors(256, 256, &AnchorSpec::fan()).unwrap();
    // exactly the 16-px anchor of cell (5, 5) on P3
    let face = BBox::new(36.0, 36.0, 52.0, 52.0).unwrap();
    let a = assign(&grid, &[face], 0.5, 0.4);
    assert!(a.levels[0].n_positive > 0);
    assert!(a.levels[1..].iter().all(|c| c.n_positive == 0));
    let t = build_attention_targets(&[face], &a, &grid);
    assert!(t.masks[0].count() > 0);
    assert!(t.masks[1..].iter().all(|m| m.count() == 0));
}

#[test]
fn attention_masks_follow_positive_levels() {
    let grid = generate_anchors(256, 256, &AnchorSpec::fan()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let boxes: Vec<BBox> = random_scene(&mut rng, 3).into_iter().map(to_bbox).collect();
        let a = assign(&grid, &boxes, 0.5, 0.4);
        let t = build_attention_targets(&boxes, &a, &grid);
        for (slot, (mask, level)) in t.masks.iter().zip(&grid.levels).enumerate() {
            assert!(mask.data.iter().all(|&v| v <= 1));
            // every set cell has its centre inside a gt box positive on this level
            let positive_gts: Vec<usize> = a.labels[grid.level_range(slot)]
                .iter()
                .filter_map(|l| if let AnchorLabel::Positive(g) = l { Some(*g) } else { None })
                .collect();
            for r in 0..level.height {
                for c in 0..level.width {
                    if mask.get(r, c) == 1 {
                        let (x, y) = level.cell_center(r, c);
                        assert!(positive_gts.iter().any(|&g| boxes[g].contains_point(x, y)));
                    }
                }
            }
            for &g in &positive_gts {
                let b = &boxes[g];
                let (x, y) = b.center();
                let (c, r) = ((x / level.stride as f64) as usize, (y / level.stride as f64) as usize);
                let hit = (r.saturating_sub(1)..=(r + 1).min(level.height - 1))
                    .any(|rr| (c.saturating_sub(1)..=(c + 1).min(level.width - 1)).any(|cc| mask.get(rr, cc) == 1));
                assert!(hit, "gt {g} positive on level {slot} but absent from its mask");
            }
        }
    }
}
