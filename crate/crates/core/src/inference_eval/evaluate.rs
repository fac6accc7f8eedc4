use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::detect::{detection_order, Detection};
use crate::data::SceneAnnotation;
use crate::error::{FanError, Result};
use crate::geometry::{iou, BBox};

/// Detections for one image, keyed by its annotation path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePredictions {
    pub image: String,
    pub detections: Vec<Detection>,
}

/// A named partition of ground truth by occlusion and size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subset {
    pub name: String,
    pub occ_min: f64,
    pub occ_max: f64,
    /// Side (`sqrt(area)`) range `[min, max)`.
    pub side_min: f64,
    pub side_max: f64,
}

pub const OCCLUDED_THRESHOLD: f64 = 0.3;
pub const HEAVY_OCCLUSION_THRESHOLD: f64 = 0.5;

impl Subset {
    fn new(name: &str, occ: (f64, f64), side: (f64, f64)) -> Self {
        Subset { name: name.into(), occ_min: occ.0, occ_max: occ.1, side_min: side.0, side_max: side.1 }
    }

    pub fn contains(&self, b: &BBox, occ: f64) -> bool {
        let side = b.area().sqrt();
        occ >= self.occ_min && occ <= self.occ_max && side >= self.side_min && side < self.side_max
    }

    /// all, unoccluded (exactly zero), occluded (≥ 0.3), heavy (≥ 0.5), and
    /// small / medium / large by side (< 32, 32-96, ≥ 96).
    pub fn standard() -> Vec<Subset> {
        let any = (0.0, f64::INFINITY);
        vec![
            Subset::new("all", (0.0, 1.0), any),
            Subset::new("unoccluded", (0.0, 0.0), any),
            Subset::new("occluded", (OCCLUDED_THRESHOLD, 1.0), any),
            Subset::new("heavy", (HEAVY_OCCLUSION_THRESHOLD, 1.0), any),
            Subset::new("small", (0.0, 1.0), (0.0, 32.0)),
            Subset::new("medium", (0.0, 1.0), (32.0, 96.0)),
            Subset::new("large", (0.0, 1.0), (96.0, f64::INFINITY)),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    pub name: String,
    pub ap: f64,
    pub n_gt: usize,
    /// Detections credited to this subset (true positives plus all false positives).
    pub n_det: usize,
    pub curve: Vec<PrPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub match_iou: f64,
    pub subsets: Vec<SubsetResult>,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<&SubsetResult> {
        self.subsets.iter().find(|s| s.name == name)
    }

    pub fn ap(&self, name: &str) -> f64 {
        self.get(name).map_or(f64::NAN, |s| s.ap)
    }

    pub fn report_csv(&self) -> String {
        let mut s = String::from("subset,AP,n_gt,n_det\n");
        for r in &self.subsets {
            let _ = writeln!(s, "{},{},{},{}", r.name, r.ap, r.n_gt, r.n_det);
        }
        s
    }

    pub fn pr_csv(&self) -> String {
        let mut s = String::from("subset,score,recall,precision\n");
        for r in &self.subsets {
            for p in &r.curve {
                let _ = writeln!(s, "{},{},{},{}", r.name, p.score, p.recall, p.precision);
            }
        }
        s
    }
}

/// Area under the monotone precision envelope, all points.
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    ap.clamp(0.0, 1.0)
}

/// Greedy global matching at `match_iou` and per-subset AP. A detection is
/// a true positive only for subsets containing the ground truth it matched;
/// an unmatched detection is a false positive in every subset.
pub fn evaluate(
    predictions: &[ImagePredictions],
    annotations: &[SceneAnnotation],
    match_iou: f64,
    subsets: &[Subset],
) -> Result<EvalReport> {
    let mut by_image: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, a) in annotations.iter().enumerate() {
        if by_image.insert(&a.image_path, i).is_some() {
            return Err(FanError::Data(format!("duplicate annotation for {}", a.image_path)));
        }
        if a.boxes.len() != a.occlusion.len() {
            return Err(FanError::Data(format!("{}: boxes and occ differ in length", a.image_path)));
        }
    }
    let mut seen = vec![false; annotations.len()];
    let mut all: Vec<(usize, Detection)> = Vec::new();
    for p in predictions {
        let Some(&i) = by_image.get(p.image.as_str()) else {
            return Err(FanError::Data(format!("predictions for unannotated image {}", p.image)));
        };
        if std::mem::replace(&mut seen[i], true) {
            return Err(FanError::Data(format!("duplicate predictions for {}", p.image)));
        }
        all.extend(p.detections.iter().map(|d| (i, *d)));
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(FanError::Data(format!("no predictions for annotated image {}", annotations[i].image_path)));
    }
    all.sort_by(|(ia, a), (ib, b)| {
        detection_order(a, b).then_with(|| annotations[*ia].image_path.cmp(&annotations[*ib].image_path))
    });

    let mut taken: Vec<Vec<bool>> = annotations.iter().map(|a| vec![false; a.boxes.len()]).collect();
    // matched (image, gt) per detection, in ranked order
    let matches: Vec<Option<(usize, usize)>> = all
        .iter()
        .map(|(img, d)| {
            let ann = &annotations[*img];
            let mut best: Option<(usize, f64)> = None;
            for (g, b) in ann.boxes.iter().enumerate() {
                if taken[*img][g] {
                    continue;
                }
                let v = iou(&d.bbox, b);
                if v >= match_iou && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            best.map(|(g, _)| {
                taken[*img][g] = true;
                (*img, g)
            })
        })
        .collect();

    let results = subsets
        .iter()
        .map(|sub| {
            let n_gt = annotations
                .iter()
                .map(|a| a.boxes.iter().zip(&a.occlusion).filter(|(b, &o)| sub.contains(b, o)).count())
                .sum::<usize>();
            let (mut tp, mut fp) = (0usize, 0usize);
            let mut curve = Vec::new();
            for ((_, d), m) in all.iter().zip(&matches) {
                match m {
                    Some((img, g)) => {
                        let a = &annotations[*img];
                        if !sub.contains(&a.boxes[*g], a.occlusion[*g]) {
                            continue;
                        }
                        tp += 1;
                    }
                    None => fp += 1,
                }
                let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
                curve.push(PrPoint { score: d.score, recall, precision: tp as f64 / (tp + fp) as f64 });
            }
            SubsetResult { name: sub.name.clone(), ap: average_precision(&curve), n_gt, n_det: tp + fp, curve }
        })
        .collect();
    Ok(EvalReport { match_iou, subsets: results })
}

/// Precision-recall curves as a standalone SVG line plot.
pub fn pr_svg(report: &EvalReport) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const M: f64 = 40.0;
    const COLORS: [&str; 7] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];
    let (pw, ph) = (W - 2.0 * M, H - 2.0 * M);
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = write!(s, r#"<rect x="{M}" y="{M}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">recall</text>"#, W / 2.0, H - 8.0);
    let _ = write!(s, r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">precision</text>"#, H / 2.0, H / 2.0);
    for (k, r) in report.subsets.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = r
            .curve
            .iter()
            .map(|p| format!("{:.2},{:.2}", M + p.recall * pw, M + (1.0 - p.precision) * ph))
            .collect();
        if !pts.is_empty() {
            let _ = write!(s, r#"<polyline fill="none" stroke="{color}" points="{}"/>"#, pts.join(" "));
        }
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{} AP={:.3}</text>"#,
            M + pw - 110.0,
            M + 14.0 + 13.0 * k as f64,
            r.name,
            r.ap
        );
    }
    s.push_str("</svg>\n");
    s
}
