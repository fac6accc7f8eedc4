//! Decoder and evaluator against exhaustive reference implementations.

use fan_core::data::{RgbImage, SceneAnnotation};
use fan_core::inference_eval::{
    decode_predictions, detect, evaluate, multi_scale_detect, DecodeConfig, Detection, ImagePredictions, Subset,
};
use fan_core::model::{LevelOutput, Model, ModelConfig, PyramidOutput};
use fan_core::{generate_anchors, AnchorGrid, AnchorSpec, BBox, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let (a, b) = (a.coords(), b.coords());
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
}

fn two_level_spec() -> AnchorSpec {
    AnchorSpec { levels: vec![3, 4], base_sides: vec![16.0, 32.0], scale_multipliers: vec![1.0, 1.5], aspect_ratios: vec![1.0] }
}

fn output_from(grid: &AnchorGrid, mut f: impl FnMut(usize, usize) -> f64) -> PyramidOutput<f64> {
    let a = grid.anchors_per_location;
    grid.levels
        .iter()
        .enumerate()
        .map(|(slot, l)| {
            let (h, w) = (l.height, l.width);
            let cls = Tensor::from_fn(&[a, h, w], |i| f(slot, i));
            let reg = Tensor::from_fn(&[4 * a, h, w], |i| f(slot, 1_000_000 + i));
            LevelOutput { cls_logits: cls, reg_deltas: reg, att_logits: None }
        })
        .collect()
}

/// Visits every anchor: sigmoid, threshold, per-level top-k, decode, clip,
/// then greedy suppression over the union.
fn reference_decode(out: &PyramidOutput<f64>, grid: &AnchorGrid, cfg: &DecodeConfig) -> Vec<Detection> {
    let a = grid.anchors_per_location;
    let mut cand = Vec::new();
    for (slot, (o, l)) in out.iter().zip(&grid.levels).enumerate() {
        let hw = l.height * l.width;
        let mut level = Vec::new();
        for r in 0..l.height {
            for c in 0..l.width {
                for k in 0..a {
                    let cell = r * l.width + c;
                    let score = 1.0 / (1.0 + (-o.cls_logits.data()[k * hw + cell]).exp());
                    if score > cfg.score_thresh {
                        level.push((score, cell * a + k, cell, k));
                    }
                }
            }
        }
        level.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        level.truncate(cfg.pre_nms_topk);
        for (score, idx, cell, k) in level {
            let anchor = grid.anchors[grid.levels[slot].offset + idx];
            let d: Vec<f64> = (0..4).map(|j| o.reg_deltas.data()[(4 * k + j) * hw + cell]).collect();
            let [x0, y0, x1, y1] = anchor.coords();
            let (aw, ah) = (x1 - x0, y1 - y0);
            let (cx, cy) = (x0 + aw / 2.0 + d[0] * aw, y0 + ah / 2.0 + d[1] * ah);
            let (w, h) = (aw * d[2].min(1000f64.ln()).exp(), ah * d[3].min(1000f64.ln()).exp());
            let (iw, ih) = (grid.image_width as f64, grid.image_height as f64);
            let b = [(cx - w / 2.0).clamp(0.0, iw), (cy - h / 2.0).clamp(0.0, ih), (cx + w / 2.0).clamp(0.0, iw), (cy + h / 2.0).clamp(0.0, ih)];
            if b[2] > b[0] && b[3] > b[1] {
                cand.push(Detection { bbox: BBox::new(b[0], b[1], b[2], b[3]).unwrap(), score });
            }
        }
    }
    let mut alive: Vec<usize> = (0..cand.len()).collect();
    let mut keep = Vec::new();
    while let Some(&first) = alive.first() {
        let best = alive.iter().copied().fold(first, |b, i| if cand[i].score > cand[b].score { i } else { b });
        keep.push(cand[best]);
        alive.retain(|&i| i != best && ref_iou(&cand[i].bbox, &cand[best].bbox) <= cfg.nms_iou);
    }
    keep.truncate(cfg.max_det);
    keep
}

#[test]
fn prior_logits_give_no_detections() {
    let grid = generate_anchors(128, 128, &AnchorSpec::fan()).unwrap();
    let prior = -(99.0f64).ln();
    let out = output_from(&grid, |_, i| if i < 1_000_000 { prior } else { 0.0 });
    assert!(decode_predictions(&out, &grid, &DecodeConfig::default()).unwrap().is_empty());
}

#[test]
fn single_confident_anchor_decodes_to_itself() {
    let grid = generate_anchors(128, 128, &AnchorSpec::fan()).unwrap();
    let a = grid.anchors_per_location;
    // level 1, cell (2, 3), anchor 4
    let (slot, r, c, k) = (1usize, 2usize, 3usize, 4usize);
    let l = &grid.levels[slot];
    let cell = r * l.width + c;
    let out = output_from(&grid, |s, i| {
        if i >= 1_000_000 {
            0.0
        } else if s == slot && i == k * l.height * l.width + cell {
            10.0
        } else {
            -20.0
        }
    });
    let dets = decode_predictions(&out, &grid, &DecodeConfig::default()).unwrap();
    assert_eq!(dets.len(), 1);
    assert_eq!(dets[0].bbox, grid.anchors[l.offset + cell * a + k]);
    assert!((dets[0].score - 1.0 / (1.0 + (-10f64).exp())).abs() < 1e-15);
}

#[test]
fn decoder_matches_exhaustive_reference() {
    let grid = generate_anchors(64, 48, &two_level_spec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..40 {
        let cfg = DecodeConfig {
            score_thresh: rng.random_range(0.0..0.6),
            pre_nms_topk: [3, 10, 1000][trial % 3],
            nms_iou: rng.random_range(0.2..0.8),
            max_det: [5, 100][trial % 2],
        };
        let out = output_from(&grid, |_, i| if i < 1_000_000 { rng.random_range(-4.0..4.0) } else { rng.random_range(-0.5..0.5) });
        let got = decode_predictions(&out, &grid, &cfg).unwrap();
        let want = reference_decode(&out, &grid, &cfg);
        assert_eq!(got.len(), want.len(), "trial {trial}");
        for (g, w) in got.iter().zip(&want) {
            assert!((g.score - w.score).abs() < 1e-12);
            for (x, y) in g.bbox.coords().iter().zip(w.bbox.coords()) {
                assert!((x - y).abs() < 1e-9, "trial {trial}: {:?} vs {:?}", g.bbox, w.bbox);
            }
        }
    }
}

fn tiny_model() -> Model<f64> {
    let cfg = ModelConfig { backbone_channels: 4, subnet_channels: 4, subnet_depth: 1, init_sigma: 0.5, ..Default::default() };
    Model::new(cfg, 3).unwrap()
}

fn noise_image(w: usize, h: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RgbImage::new(w, h);
    img.data.iter_mut().for_each(|v| *v = rng.random());
    img
}

#[test]
fn multi_scale_degenerates_to_single_scale() {
    let model = tiny_model();
    let img = noise_image(128, 160, 4);
    let cfg = DecodeConfig { score_thresh: 0.0, ..Default::default() };
    let single = detect(&model, &img, &cfg).unwrap();
    assert!(!single.is_empty());
    let native = multi_scale_detect(&model, &img, &[128], cfg.nms_iou, &cfg).unwrap();
    assert_eq!(native, single);
    let once = multi_scale_detect(&model, &img, &[96], cfg.nms_iou, &cfg).unwrap();
    let twice = multi_scale_detect(&model, &img, &[96, 96], cfg.nms_iou, &cfg).unwrap();
    assert_eq!(once, twice);
}

fn det(b: [f64; 4], score: f64) -> Detection {
    Detection { bbox: BBox::new(b[0], b[1], b[2], b[3]).unwrap(), score }
}

fn annotated(path: &str, boxes: Vec<BBox>, occ: Vec<f64>) -> SceneAnnotation {
    let mut a = SceneAnnotation::new(boxes, occ);
    a.image_path = path.into();
    a
}

/// Per-image greedy matching by descending score, then AP as the sum over
/// true positives of `1/n_gt` times the best precision at or below that rank.
fn reference_ap(preds: &[ImagePredictions], anns: &[SceneAnnotation], thr: f64, sub: &Subset) -> f64 {
    // (score, Some(in subset) for a match, None for a false positive)
    let mut events: Vec<(f64, Option<bool>)> = Vec::new();
    for p in preds {
        let ann = anns.iter().find(|a| a.image_path == p.image).unwrap();
        let mut dets = p.detections.clone();
        dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let mut used = vec![false; ann.boxes.len()];
        for d in dets {
            let mut best: Option<(usize, f64)> = None;
            for (g, b) in ann.boxes.iter().enumerate() {
                let v = ref_iou(&d.bbox, b);
                if !used[g] && v >= thr && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            events.push((d.score, best.map(|(g, _)| {
                used[g] = true;
                sub.contains(&ann.boxes[g], ann.occlusion[g])
            })));
        }
    }
    let n_gt: usize = anns.iter().map(|a| a.boxes.iter().zip(&a.occlusion).filter(|(b, o)| sub.contains(b, **o)).count()).sum();
    if n_gt == 0 {
        return 0.0;
    }
    events.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let ranked: Vec<bool> = events.iter().filter(|e| e.1 != Some(false)).map(|e| e.1.is_some()).collect();
    let mut precision = Vec::new();
    let mut tp = 0.0;
    for (i, &hit) in ranked.iter().enumerate() {
        if hit {
            tp += 1.0;
        }
        precision.push(tp / (i + 1) as f64);
    }
    (0..ranked.len())
        .filter(|&i| ranked[i])
        .map(|i| precision[i..].iter().cloned().fold(0.0, f64::max) / n_gt as f64)
        .sum()
}

fn random_scenario(rng: &mut ChaCha8Rng, images: usize) -> (Vec<ImagePredictions>, Vec<SceneAnnotation>) {
    let mut preds = Vec::new();
    let mut anns = Vec::new();
    for i in 0..images {
        let n = rng.random_range(0..6);
        let mut boxes = Vec::new();
        let mut occ = Vec::new();
        for _ in 0..n {
            let s = 2f64.powf(rng.random_range(3.5..7.0));
            let (x, y) = (rng.random_range(0.0..256.0), rng.random_range(0.0..256.0));
            boxes.push(BBox::new(x, y, x + s, y + s).unwrap());
            occ.push(if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..0.9) });
        }
        let mut dets = Vec::new();
        for b in &boxes {
            for _ in 0..rng.random_range(0..3) {
                let j = b.width() * 0.25;
                let c = b.coords();
                let jit: Vec<f64> = (0..4).map(|_| rng.random_range(-j..j)).collect();
                if let Ok(d) = BBox::new(c[0] + jit[0], c[1] + jit[1], c[2] + jit[2], c[3] + jit[3]) {
                    dets.push(Detection { bbox: d, score: rng.random() });
                }
            }
        }
        for _ in 0..rng.random_range(0..4) {
            let (x, y, s) = (rng.random_range(0.0..300.0), rng.random_range(0.0..300.0), rng.random_range(8.0..100.0));
            dets.push(det([x, y, x + s, y + s], rng.random()));
        }
        let path = format!("img{i:03}.png");
        preds.push(ImagePredictions { image: path.clone(), detections: dets });
        anns.push(annotated(&path, boxes, occ));
    }
    (preds, anns)
}

#[test]
fn evaluator_matches_reference_on_random_scenarios() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let subsets = Subset::standard();
    for _ in 0..25 {
        let (preds, anns) = random_scenario(&mut rng, 20);
        let report = evaluate(&preds, &anns, 0.5, &subsets).unwrap();
        for s in &subsets {
            let want = reference_ap(&preds, &anns, 0.5, s);
            assert!((report.ap(&s.name) - want).abs() <= 1e-9, "{}: {} vs {}", s.name, report.ap(&s.name), want);
        }
    }
}

#[test]
fn evaluation_properties() {
    let subsets = Subset::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (preds, anns) = random_scenario(&mut rng, 20);
    let base = evaluate(&preds, &anns, 0.5, &subsets).unwrap();

    let perfect: Vec<ImagePredictions> = anns
        .iter()
        .map(|a| ImagePredictions { image: a.image_path.clone(), detections: a.boxes.iter().map(|b| Detection { bbox: *b, score: 0.9 }).collect() })
        .collect();
    assert_eq!(evaluate(&perfect, &anns, 0.5, &subsets).unwrap().ap("all"), 1.0);
    let empty: Vec<ImagePredictions> = anns.iter().map(|a| ImagePredictions { image: a.image_path.clone(), detections: vec![] }).collect();
    assert_eq!(evaluate(&empty, &anns, 0.5, &subsets).unwrap().ap("all"), 0.0);

    let mut shuffled = preds.clone();
    shuffled.shuffle(&mut rng);
    shuffled.iter_mut().for_each(|p| p.detections.shuffle(&mut rng));
    assert_eq!(evaluate(&shuffled, &anns, 0.5, &subsets).unwrap(), base);

    let mut low_fp = preds.clone();
    low_fp[0].detections.push(det([500.0, 500.0, 520.0, 520.0], -1.0));
    let with_fp = evaluate(&low_fp, &anns, 0.5, &subsets).unwrap();
    for s in &subsets {
        assert!(with_fp.ap(&s.name) <= base.ap(&s.name));
    }

    // a gt no detection overlaps at the matching threshold, found at the top
    let (img, g) = anns
        .iter()
        .enumerate()
        .find_map(|(i, a)| {
            a.boxes.iter().position(|b| preds[i].detections.iter().all(|d| ref_iou(&d.bbox, b) < 0.5)).map(|g| (i, g))
        })
        .expect("scenario has a missed face");
    let mut top_tp = preds.clone();
    top_tp[img].detections.push(Detection { bbox: anns[img].boxes[g], score: 2.0 });
    let with_tp = evaluate(&top_tp, &anns, 0.5, &subsets).unwrap();
    for s in &subsets {
        assert!(with_tp.ap(&s.name) >= base.ap(&s.name));
    }
}

#[test]
fn overall_ap_is_not_the_mean_of_subset_aps() {
    let u = BBox::new(0.0, 0.0, 20.0, 20.0).unwrap();
    let o = BBox::new(50.0, 50.0, 70.0, 70.0).unwrap();
    let anns = vec![annotated("a", vec![u, o], vec![0.0, 0.5])];
    let preds = vec![ImagePredictions {
        image: "a".into(),
        detections: vec![det([100.0, 100.0, 120.0, 120.0], 0.9), Detection { bbox: u, score: 0.8 }, Detection { bbox: o, score: 0.7 }],
    }];
    let r = evaluate(&preds, &anns, 0.5, &Subset::standard()).unwrap();
    assert!((r.ap("unoccluded") - 0.5).abs() < 1e-12);
    assert!((r.ap("occluded") - 0.5).abs() < 1e-12);
    assert!((r.ap("all") - 2.0 / 3.0).abs() < 1e-12);
}
