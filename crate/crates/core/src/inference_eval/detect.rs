use serde::{Deserialize, Serialize};

use crate::assignment::decode_box;
use crate::data::RgbImage;
use crate::error::{FanError, Result};
use crate::geometry::{generate_anchors, nms, AnchorGrid, BBox};
use crate::model::{Model, PyramidOutput, MODEL_STRIDE};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub pre_nms_topk: usize,
    pub nms_iou: f64,
    pub max_det: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { score_thresh: 0.05, pre_nms_topk: 1000, nms_iou: 0.5, max_det: 100 }
    }
}

/// Descending score, ties by box coordinates.
pub fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| {
        a.bbox.coords().iter().zip(b.bbox.coords()).fold(std::cmp::Ordering::Equal, |o, (x, y)| o.then(x.total_cmp(&y)))
    })
}

fn nms_detections(dets: Vec<Detection>, iou_thr: f64, max_det: usize) -> Vec<Detection> {
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms(&boxes, &scores, iou_thr).into_iter().take(max_det).map(|i| dets[i]).collect()
}

/// Scores, thresholds, keeps the top-k per level, decodes and clips; then one
/// NMS over all levels.
pub fn decode_predictions<T: Scalar>(output: &PyramidOutput<T>, grid: &AnchorGrid, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    if output.len() != grid.levels.len() {
        return Err(FanError::shape("decode_predictions", format!("{} levels", grid.levels.len()), format!("{}", output.len())));
    }
    let a = grid.anchors_per_location;
    let (iw, ih) = (grid.image_width as f64, grid.image_height as f64);
    let mut all = Vec::new();
    for (slot, (out, level)) in output.iter().zip(&grid.levels).enumerate() {
        let (h, w) = (level.height, level.width);
        if out.cls_logits.shape() != [a, h, w] || out.reg_deltas.shape() != [4 * a, h, w] {
            return Err(FanError::shape(
                "decode_predictions",
                format!("level {slot}: cls [{a}, {h}, {w}], reg [{}, {h}, {w}]", 4 * a),
                format!("{:?} / {:?}", out.cls_logits.shape(), out.reg_deltas.shape()),
            ));
        }
        let cls = out.cls_logits.data();
        let reg = out.reg_deltas.data();
        let hw = h * w;
        // (score, anchor index within level)
        let mut cand: Vec<(f64, usize)> = Vec::new();
        for k in 0..hw * a {
            let (cell, anchor) = (k / a, k % a);
            let s = sigmoid(cls[anchor * hw + cell].to_f64().unwrap_or(f64::NAN));
            if s > cfg.score_thresh {
                cand.push((s, k));
            }
        }
        cand.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        cand.truncate(cfg.pre_nms_topk);
        for (score, k) in cand {
            let (cell, anchor) = (k / a, k % a);
            let d = |c: usize| reg[(4 * anchor + c) * hw + cell].to_f64().unwrap_or(f64::NAN);
            let Ok(b) = decode_box(&grid.anchors[level.offset + k], [d(0), d(1), d(2), d(3)]) else { continue };
            if let Some(b) = b.clip(iw, ih) {
                all.push(Detection { bbox: b, score });
            }
        }
    }
    Ok(nms_detections(all, cfg.nms_iou, cfg.max_det))
}

/// Runs the model on an image of any size: the normalized input is
/// zero-padded (mid-grey) to a multiple of the model stride and detections
/// are clipped to the original extent.
pub fn detect<T: Scalar>(model: &Model<T>, image: &RgbImage, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    let (w, h) = (image.width, image.height);
    if w == 0 || h == 0 {
        return Err(FanError::Data("empty image".into()));
    }
    let (pw, ph) = (w.div_ceil(MODEL_STRIDE) * MODEL_STRIDE, h.div_ceil(MODEL_STRIDE) * MODEL_STRIDE);
    let input = pad_tensor(image.to_tensor::<T>(), pw, ph);
    let grid = generate_anchors(pw, ph, &model.config.anchors)?;
    let out = model.predict(&input)?;
    let mut dets = decode_predictions(&out, &grid, cfg)?;
    if (pw, ph) != (w, h) {
        dets = dets.into_iter().filter_map(|d| d.bbox.clip(w as f64, h as f64).map(|b| Detection { bbox: b, score: d.score })).collect();
    }
    Ok(dets)
}

fn pad_tensor<T: Scalar>(t: Tensor<T>, pw: usize, ph: usize) -> Tensor<T> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if (pw, ph) == (w, h) {
        return t;
    }
    let src = t.data();
    let mut out = Tensor::zeros(&[c, ph, pw]);
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            dst[(ch * ph + y) * pw..(ch * ph + y) * pw + w].copy_from_slice(&src[(ch * h + y) * w..(ch * h + y + 1) * w]);
        }
    }
    out
}

/// Sigmoid attention map of one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub level: u32,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

/// Attention maps of every level for an image, padded like [`detect`].
/// Errors when the model has no attention branch.
pub fn attention_maps<T: Scalar>(model: &Model<T>, image: &RgbImage) -> Result<Vec<AttentionMap>> {
    if model.attention.is_none() {
        return Err(FanError::Config("model has no attention branch".into()));
    }
    let (w, h) = (image.width, image.height);
    if w == 0 || h == 0 {
        return Err(FanError::Data("empty image".into()));
    }
    let (pw, ph) = (w.div_ceil(MODEL_STRIDE) * MODEL_STRIDE, h.div_ceil(MODEL_STRIDE) * MODEL_STRIDE);
    let out = model.predict(&pad_tensor(image.to_tensor::<T>(), pw, ph))?;
    Ok(out
        .iter()
        .zip(&model.config.pyramid_levels)
        .filter_map(|(l, &level)| {
            let a = l.att_logits.as_ref()?;
            let values = a.data().iter().map(|&v| sigmoid(v).to_f64().unwrap_or(0.0) as f32).collect();
            Some(AttentionMap { level, width: a.shape()[2], height: a.shape()[1], values })
        })
        .collect())
}

/// Detects at each scale (shortest side resized to the scale), maps boxes
/// back to the original frame and merges all scales with one NMS.
pub fn multi_scale_detect<T: Scalar>(
    model: &Model<T>,
    image: &RgbImage,
    scales: &[usize],
    merge_nms_iou: f64,
    cfg: &DecodeConfig,
) -> Result<Vec<Detection>> {
    if scales.is_empty() || scales.contains(&0) {
        return Err(FanError::Config(format!("scales must be positive and non-empty, got {scales:?}")));
    }
    let (w, h) = (image.width, image.height);
    let short = w.min(h) as f64;
    let mut all = Vec::new();
    for &s in scales {
        let f = s as f64 / short;
        let (nw, nh) = (((w as f64 * f).round() as usize).max(1), ((h as f64 * f).round() as usize).max(1));
        let resized = image.resize(nw, nh);
        let (fx, fy) = (w as f64 / nw as f64, h as f64 / nh as f64);
        for d in detect(model, &resized, cfg)? {
            let b = if (nw, nh) == (w, h) { Some(d.bbox) } else { d.bbox.scale(fx, fy).clip(w as f64, h as f64) };
            if let Some(b) = b {
                all.push(Detection { bbox: b, score: d.score });
            }
        }
    }
    Ok(nms_detections(all, merge_nms_iou, cfg.max_det))
}

/// Multi-scale detection over every scene; output order follows the dataset
/// and does not depend on `threads`.
pub fn detect_dataset<T: Scalar>(
    model: &Model<T>,
    data: &crate::data::Dataset,
    scales: &[usize],
    merge_nms_iou: f64,
    cfg: &DecodeConfig,
    threads: usize,
) -> Result<Vec<super::ImagePredictions>> {
    let run = |i: usize| -> Result<super::ImagePredictions> {
        let s = &data.samples[i];
        let detections = multi_scale_detect(model, &s.image(), scales, merge_nms_iou, cfg)?;
        Ok(super::ImagePredictions { image: s.annotation.image_path.clone(), detections })
    };
    crate::parallel::par_map(data.len(), threads, run).into_iter().collect()
}
