//! Anchor labelling by IoU thresholds, box delta encoding, and anchor
//! coverage statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FanError, Result};
use crate::geometry::{generate_anchors, iou, AnchorGrid, AnchorSpec, BBox};

pub const DEFAULT_POS_THRESH: f64 = 0.5;
pub const DEFAULT_BG_THRESH: f64 = 0.4;

/// Largest log-size delta accepted before exponentiation, `ln(1000)`.
pub const MAX_LOG_DELTA: f64 = 6.907_755_278_982_137;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the ground-truth box with this index.
    Positive(usize),
    Ignore,
    Background,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LevelCounts {
    /// Anchors taking part in classification (`N_k^c`): positives plus background.
    pub n_classification: usize,
    /// Positive anchors (`N_k^r`).
    pub n_positive: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorAssignment {
    pub labels: Vec<AnchorLabel>,
    /// Best IoU of each anchor over all ground truth (0 with no ground truth).
    pub max_iou: Vec<f64>,
    /// Encoded regression target per anchor; zeros unless positive.
    pub deltas: Vec<[f64; 4]>,
    pub levels: Vec<LevelCounts>,
}

impl AnchorAssignment {
    pub fn num_positive(&self) -> usize {
        self.levels.iter().map(|l| l.n_positive).sum()
    }

    pub fn num_background(&self) -> usize {
        self.labels.iter().filter(|l| **l == AnchorLabel::Background).count()
    }

    /// Classification targets: 1 positive, 0 background, -1 ignore.
    pub fn class_targets(&self) -> Vec<i8> {
        self.labels
            .iter()
            .map(|l| match l {
                AnchorLabel::Positive(_) => 1,
                AnchorLabel::Background => 0,
                AnchorLabel::Ignore => -1,
            })
            .collect()
    }
}

/// Labels every anchor: best IoU `>= pos_thresh` is positive (matched to the
/// arg-max box, lowest index on ties), `< bg_thresh` background, otherwise
/// ignored. No ground truth leaves every anchor background.
///
/// # Panics
/// If the thresholds do not satisfy `0 <= bg_thresh <= pos_thresh <= 1`.
pub fn assign(grid: &AnchorGrid, gt: &[BBox], pos_thresh: f64, bg_thresh: f64) -> AnchorAssignment {
    assert!(
        (0.0..=1.0).contains(&bg_thresh) && bg_thresh <= pos_thresh && pos_thresh <= 1.0,
        "assign: need 0 <= bg_thresh <= pos_thresh <= 1, got {bg_thresh}, {pos_thresh}"
    );
    let n = grid.len();
    let mut max_iou = vec![0.0f64; n];
    let mut arg = vec![usize::MAX; n];
    for (g, gbox) in gt.iter().enumerate() {
        for i in grid.candidates(gbox) {
            let v = iou(&grid.anchors[i], gbox);
            if v > max_iou[i] {
                max_iou[i] = v;
                arg[i] = g;
            }
        }
    }
    let mut labels = Vec::with_capacity(n);
    let mut deltas = vec![[0.0; 4]; n];
    for i in 0..n {
        let m = max_iou[i];
        let label = if arg[i] != usize::MAX && m >= pos_thresh {
            deltas[i] = encode_box(&grid.anchors[i], &gt[arg[i]]);
            AnchorLabel::Positive(arg[i])
        } else if m < bg_thresh {
            AnchorLabel::Background
        } else {
            AnchorLabel::Ignore
        };
        labels.push(label);
    }
    let levels = (0..grid.levels.len())
        .map(|slot| {
            let mut c = LevelCounts::default();
            for l in &labels[grid.level_range(slot)] {
                match l {
                    AnchorLabel::Positive(_) => {
                        c.n_positive += 1;
                        c.n_classification += 1;
                    }
                    AnchorLabel::Background => c.n_classification += 1,
                    AnchorLabel::Ignore => {}
                }
            }
            c
        })
        .collect();
    AnchorAssignment { labels, max_iou, deltas, levels }
}

/// Center offsets scaled by anchor size and log size ratios.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

/// Inverse of [`encode_box`]; size deltas are clamped to `ln(1000)`.
pub fn decode_box(anchor: &BBox, delta: [f64; 4]) -> Result<BBox> {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + delta[0] * aw;
    let cy = ay + delta[1] * ah;
    let w = aw * delta[2].min(MAX_LOG_DELTA).exp();
    let h = ah * delta[3].min(MAX_LOG_DELTA).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Best IoU of `b` over every anchor of the grid.
pub fn best_iou(grid: &AnchorGrid, b: &BBox) -> f64 {
    let mut best = 0.0f64;
    for i in grid.candidates(b) {
        best = best.max(iou(&grid.anchors[i], b));
    }
    best
}

/// Best IoU of an axis-aligned square of side `side` centred on a cell
/// centre of some pyramid level, maximised over levels. The image is large
/// enough to hold the box around the central cell of every level.
pub fn anchor_centered_best_iou(spec: &AnchorSpec, side: f64) -> Result<f64> {
    let image = coverage_image_side(spec, side);
    let grid = generate_anchors(image, image, spec)?;
    let mut best = 0.0f64;
    for level in &grid.levels {
        let (cx, cy) = level.cell_center(level.height / 2, level.width / 2);
        let b = BBox::from_center(cx, cy, side, side)?;
        best = best.max(best_iou(&grid, &b));
    }
    Ok(best)
}

fn coverage_image_side(spec: &AnchorSpec, side: f64) -> usize {
    let m = spec.max_stride() as f64;
    let need = (2.0 * side).max(4.0 * m).max(1024.0);
    ((need / m).ceil() * m) as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoverageRow {
    pub side: f64,
    pub mean_best_iou: f64,
    pub min_best_iou: f64,
    pub frac_ge_05: f64,
    pub frac_ge_06: f64,
}

pub const COVERAGE_IMAGE_SIDE: usize = 1024;

/// Monte-Carlo best-IoU statistics of squares placed uniformly at random
/// (fully inside a 1024×1024 image) for each side.
pub fn coverage_report(spec: &AnchorSpec, sides: &[f64], placements: usize, rng_seed: u64) -> Result<Vec<CoverageRow>> {
    coverage_report_in(spec, COVERAGE_IMAGE_SIDE, COVERAGE_IMAGE_SIDE, sides, placements, rng_seed)
}

/// [`coverage_report`] over an explicit image size. Each side draws from a
/// stream keyed by its value, so a side's statistics do not depend on the
/// other sides requested.
pub fn coverage_report_in(
    spec: &AnchorSpec,
    image_w: usize,
    image_h: usize,
    sides: &[f64],
    placements: usize,
    rng_seed: u64,
) -> Result<Vec<CoverageRow>> {
    if placements == 0 {
        return Err(FanError::Config("coverage: placements must be at least 1".into()));
    }
    let grid = generate_anchors(image_w, image_h, spec)?;
    let mut rows = Vec::with_capacity(sides.len());
    for &side in sides {
        if !(side > 0.0 && side.is_finite()) {
            return Err(FanError::Config(format!("coverage: side {side} must be positive")));
        }
        if side > image_w as f64 || side > image_h as f64 {
            return Err(FanError::Config(format!(
                "coverage: side {side} exceeds the {image_w}x{image_h} image"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        rng.set_stream(side.to_bits());
        let (mut sum, mut min, mut ge5, mut ge6) = (0.0, f64::INFINITY, 0usize, 0usize);
        for _ in 0..placements {
            let x = rng.random::<f64>() * (image_w as f64 - side);
            let y = rng.random::<f64>() * (image_h as f64 - side);
            let b = BBox::new(x, y, x + side, y + side)?;
            let v = best_iou(&grid, &b);
            sum += v;
            min = min.min(v);
            ge5 += usize::from(v >= 0.5);
            ge6 += usize::from(v >= 0.6);
        }
        let n = placements as f64;
        rows.push(CoverageRow {
            side,
            mean_best_iou: sum / n,
            min_best_iou: min,
            frac_ge_05: ge5 as f64 / n,
            frac_ge_06: ge6 as f64 / n,
        });
    }
    Ok(rows)
}

pub fn coverage_csv(rows: &[CoverageRow]) -> String {
    let mut s = String::from("side,mean_best_iou,min_best_iou,frac_ge_0.5,frac_ge_0.6\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.side, r.mean_best_iou, r.min_best_iou, r.frac_ge_05, r.frac_ge_06
        ));
    }
    s
}
