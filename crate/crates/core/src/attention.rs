//! Per-level attention supervision and the exponential feature gate.

use serde::{Deserialize, Serialize};

use crate::assignment::{AnchorAssignment, AnchorLabel};
use crate::error::{FanError, Result};
use crate::geometry::{AnchorGrid, BBox};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Binary `H × W` mask at one pyramid level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LevelMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        LevelMask { height, width, data: vec![0; height * width] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }
}

/// Attention supervision for every level of a grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionTarget {
    pub masks: Vec<LevelMask>,
}

impl AttentionTarget {
    pub fn is_empty(&self) -> bool {
        self.masks.iter().all(LevelMask::is_empty)
    }
}

/// Fills, at every level, the cells whose centres fall inside a ground-truth
/// box that received at least one positive anchor at that level.
pub fn build_attention_targets(gt: &[BBox], assignment: &AnchorAssignment, grid: &AnchorGrid) -> AttentionTarget {
    let masks = grid
        .levels
        .iter()
        .enumerate()
        .map(|(slot, level)| {
            let mut matched = vec![false; gt.len()];
            for label in &assignment.labels[grid.level_range(slot)] {
                if let AnchorLabel::Positive(g) = label {
                    matched[*g] = true;
                }
            }
            let mut mask = LevelMask::zeros(level.height, level.width);
            for (g, b) in gt.iter().enumerate().filter(|(g, _)| matched[*g]) {
                let s = level.stride as f64;
                // centres (c + 0.5)·s inside [x_min, x_max]
                let c0 = (b.x_min() / s - 0.5).ceil().max(0.0) as usize;
                let r0 = (b.y_min() / s - 0.5).ceil().max(0.0) as usize;
                let c1 = (b.x_max() / s - 0.5).floor();
                let r1 = (b.y_max() / s - 0.5).floor();
                if c1 < 0.0 || r1 < 0.0 {
                    continue;
                }
                let c1 = (c1 as usize).min(level.width.saturating_sub(1));
                let r1 = (r1 as usize).min(level.height.saturating_sub(1));
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        let (cx, cy) = level.cell_center(r, c);
                        debug_assert!(b.contains_point(cx, cy), "gt {g}");
                        mask.data[r * level.width + c] = 1;
                    }
                }
            }
            mask
        })
        .collect();
    AttentionTarget { masks }
}

/// How the attention logits turn into a multiplicative gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// `exp(sigmoid(logit))`, bounded in `(1, e)`.
    #[default]
    Sigmoid,
    /// `exp(logit)`, unbounded; kept for ablations.
    Raw,
    /// Attention logits are computed but the features pass through unchanged.
    Bypass,
}

/// `features[c, y, x] · exp(σ(logits[0, y, x]))` (or `exp(logit)` in raw mode).
pub fn exp_gate<T: Scalar>(g: &mut Graph<T>, features: Var, logits: Var, mode: GateMode) -> Result<Var> {
    let fs = g.shape(features).to_vec();
    let ls = g.shape(logits).to_vec();
    if fs.len() != 3 || ls.len() != 3 || ls[0] != 1 || ls[1..] != fs[1..] {
        return Err(FanError::shape(
            "exp_gate",
            format!("logits [1, H, W] matching features {fs:?}"),
            format!("{ls:?}"),
        ));
    }
    let pre = match mode {
        GateMode::Sigmoid => g.sigmoid(logits),
        GateMode::Raw => logits,
        GateMode::Bypass => return Ok(features),
    };
    let factor = g.exp(pre);
    g.mul_channels(features, factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::assign;
    use crate::geometry::{generate_anchors, AnchorSpec};
    use crate::tensor::Tensor;

    #[test]
    fn no_positives_gives_empty_masks() {
        let grid = generate_anchors(256, 256, &AnchorSpec::fan()).unwrap();
        let a = assign(&grid, &[], 0.5, 0.4);
        let t = build_attention_targets(&[], &a, &grid);
        assert!(t.is_empty());
        assert_eq!(t.masks.len(), 5);
        assert_eq!((t.masks[0].height, t.masks[0].width), (32, 32));
    }

    #[test]
    fn gate_saturates_to_identity_and_matches_direct_value() {
        let mut g = Graph::<f64>::new();
        let f = g.leaf(Tensor::from_fn(&[2, 1, 2], |i| [2.0, -1.0, 0.5, 3.0][i]));
        let l = g.leaf(Tensor::new(vec![1, 1, 2], vec![0.0, -100.0]).unwrap());
        let y = exp_gate(&mut g, f, l, GateMode::Sigmoid).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 2.0 * 0.5f64.exp()).abs() < 1e-12);
        assert!((v[0] - 3.2974425414).abs() < 1e-9);
        assert!((v[1] - -1.0).abs() < 1e-12);
        assert!((v[3] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn gate_rejects_mismatched_logits() {
        let mut g = Graph::<f64>::new();
        let f = g.leaf(Tensor::zeros(&[2, 3, 3]));
        let l = g.leaf(Tensor::zeros(&[1, 3, 4]));
        assert!(exp_gate(&mut g, f, l, GateMode::Sigmoid).is_err());
        let l2 = g.leaf(Tensor::zeros(&[2, 3, 3]));
        assert!(exp_gate(&mut g, f, l2, GateMode::Raw).is_err());
    }

    #[test]
    fn gate_factor_is_bounded_and_monotone() {
        let logits: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.5).collect();
        let mut g = Graph::<f64>::new();
        let n = logits.len();
        let f = g.leaf(Tensor::full(&[1, 1, n], 1.0));
        let l = g.leaf(Tensor::new(vec![1, 1, n], logits).unwrap());
        let y = exp_gate(&mut g, f, l, GateMode::Sigmoid).unwrap();
        let v = g.value(y).data();
        for w in v.windows(2) {
            assert!(w[1] > w[0]);
        }
        assert!(v.iter().all(|&x| x > 1.0 && x < std::f64::consts::E));
    }
}
