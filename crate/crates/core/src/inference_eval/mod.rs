//! Decoding head outputs into detections, multi-scale testing, and
//! precision/recall evaluation with occlusion and size subsets.

mod detect;
mod evaluate;

pub use detect::{attention_maps, decode_predictions, detect, detect_dataset, detection_order, multi_scale_detect, AttentionMap, DecodeConfig, Detection};
pub use evaluate::{
    average_precision, evaluate, pr_svg, EvalReport, ImagePredictions, PrPoint, Subset, SubsetResult,
    HEAVY_OCCLUSION_THRESHOLD, OCCLUDED_THRESHOLD,
};
