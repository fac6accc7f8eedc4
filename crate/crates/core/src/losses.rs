//! Focal classification loss, smooth-L1 box regression, pixel-wise sigmoid
//! cross-entropy for attention maps, and their per-level combination.
//!
//! Every term computes its value and analytic input gradient in one pass and
//! records them on the graph with [`Graph::reduce_with_grad`].

use serde::{Deserialize, Serialize};

use crate::assignment::{AnchorAssignment, AnchorLabel};
use crate::attention::{AttentionTarget, LevelMask};
use crate::error::{FanError, Result};
use crate::geometry::AnchorGrid;
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::{Graph, Var};

/// Denominator of each level's classification term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClsNormalizer {
    /// Anchors of the level that are not ignored.
    Participating,
    /// Positive anchors of the whole image, at least 1, shared by all levels.
    #[default]
    Positive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(default)]
    pub cls_normalizer: ClsNormalizer,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            cls_normalizer: ClsNormalizer::Positive,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.focal_alpha > 0.0
            && self.focal_alpha <= 1.0
            && self.focal_gamma >= 0.0
            && self.smooth_l1_beta > 0.0
            && self.lambda1 >= 0.0
            && self.lambda2 >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(FanError::Config(format!("invalid loss config {self:?}")))
        }
    }

    pub(crate) fn set(&mut self, key: &str, value: &str) -> Result<()> {
        use crate::config::parse_value;
        match key {
            "focal_alpha" => self.focal_alpha = parse_value(key, value)?,
            "focal_gamma" => self.focal_gamma = parse_value(key, value)?,
            "smooth_l1_beta" => self.smooth_l1_beta = parse_value(key, value)?,
            "lambda1" => self.lambda1 = parse_value(key, value)?,
            "lambda2" => self.lambda2 = parse_value(key, value)?,
            "cls_normalizer" => {
                self.cls_normalizer = match value.trim() {
                    "participating" => ClsNormalizer::Participating,
                    "positive" => ClsNormalizer::Positive,
                    other => return Err(FanError::Config(format!("cls_normalizer: unknown {other:?}"))),
                }
            }
            other => return Err(FanError::Config(format!("unknown loss key {other:?}"))),
        }
        Ok(())
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Focal loss of one logit and its derivative. `positive` selects the
/// label; `alpha` weights positives and `1 - alpha` negatives.
#[inline]
pub fn focal_term<T: Scalar>(logit: T, positive: bool, alpha: T, gamma: T) -> (T, T) {
    let (sign, alpha_t) = if positive { (T::one(), alpha) } else { (-T::one(), T::one() - alpha) };
    let u = sign * logit;
    // p_t = σ(u), 1 - p_t = σ(-u), -ln p_t = softplus(-u)
    let q = sigmoid(-u);
    let p_t = sigmoid(u);
    let nll = softplus(-u);
    let w = if gamma == T::zero() { T::one() } else { q.powf(gamma) };
    let value = alpha_t * w * nll;
    let grad = sign * alpha_t * w * (-gamma * p_t * nll - q);
    (value, grad)
}

/// Sum of focal losses over non-ignored anchors divided by `normalizer`.
/// `labels` holds 1 (positive), 0 (background) or -1 (ignored). A zero
/// normalizer yields a zero term.
pub fn focal_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[i8],
    cfg: &LossConfig,
    normalizer: usize,
) -> Result<Var> {
    let z = g.value(logits).data();
    if z.len() != labels.len() {
        return Err(FanError::shape("focal_loss", format!("{} logits", labels.len()), format!("{}", z.len())));
    }
    let mut grad = vec![T::zero(); z.len()];
    let mut total = T::zero();
    if normalizer > 0 {
        let inv = T::one() / T::from_usize(normalizer).expect("count");
        let (alpha, gamma) = (T::lit(cfg.focal_alpha), T::lit(cfg.focal_gamma));
        for ((&zi, &li), gi) in z.iter().zip(labels).zip(grad.iter_mut()) {
            if li < 0 {
                continue;
            }
            let (v, d) = focal_term(zi, li > 0, alpha, gamma);
            total = total + v;
            *gi = d * inv;
        }
        total = total * inv;
    }
    g.reduce_with_grad(logits, total, grad)
}

/// Elementwise smooth-L1 value and derivative.
#[inline]
pub fn smooth_l1_term<T: Scalar>(d: T, beta: T) -> (T, T) {
    let half = T::lit(0.5);
    if d.abs() < beta {
        (half * d * d / beta, d / beta)
    } else {
        (d.abs() - half * beta, d.signum())
    }
}

/// Smooth-L1 over the listed `(anchor, target)` pairs, where `pred` holds
/// four consecutive deltas per anchor, summed and divided by `normalizer`.
pub fn smooth_l1<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    targets: &[(usize, [T; 4])],
    beta: f64,
    normalizer: usize,
) -> Result<Var> {
    let p = g.value(pred).data();
    let mut grad = vec![T::zero(); p.len()];
    let mut total = T::zero();
    if normalizer > 0 {
        let inv = T::one() / T::from_usize(normalizer).expect("count");
        let beta = T::lit(beta);
        for &(anchor, t) in targets {
            let base = 4 * anchor;
            if base + 4 > p.len() {
                return Err(FanError::shape("smooth_l1", format!("anchor {anchor} in range"), format!("{} values", p.len())));
            }
            for c in 0..4 {
                let (v, d) = smooth_l1_term(p[base + c] - t[c], beta);
                total = total + v;
                grad[base + c] = grad[base + c] + d * inv;
            }
        }
        total = total * inv;
    }
    g.reduce_with_grad(pred, total, grad)
}

/// Mean over pixels of sigmoid cross-entropy between `logits: [1, H, W]`
/// and a binary mask.
pub fn attention_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, target: &LevelMask) -> Result<Var> {
    let shape = g.shape(logits);
    if shape != [1, target.height, target.width] {
        return Err(FanError::shape(
            "attention_loss",
            format!("[1, {}, {}]", target.height, target.width),
            format!("{shape:?}"),
        ));
    }
    let z = g.value(logits).data();
    let n = T::from_usize(z.len().max(1)).expect("count");
    let mut total = T::zero();
    let grad = z
        .iter()
        .zip(&target.data)
        .map(|(&zi, &ti)| {
            let t = if ti != 0 { T::one() } else { T::zero() };
            total = total + softplus(zi) - t * zi;
            (sigmoid(zi) - t) / n
        })
        .collect();
    g.reduce_with_grad(logits, total / n, grad)
}

/// Raw head outputs of one pyramid level on the graph.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    /// `[A, H, W]` classification logits.
    pub cls: Var,
    /// `[4A, H, W]` box deltas.
    pub reg: Var,
    /// `[1, H, W]` attention logits, absent when the branch is disabled.
    pub att: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelLoss {
    pub cls: f64,
    pub reg: f64,
    pub att: f64,
    pub n_classification: usize,
    pub n_positive: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub levels: Vec<LevelLoss>,
}

impl LossReport {
    pub fn cls(&self) -> f64 {
        self.levels.iter().fold(0.0, |s, l| s + l.cls)
    }
    pub fn reg(&self) -> f64 {
        self.levels.iter().fold(0.0, |s, l| s + l.reg)
    }
    pub fn att(&self) -> f64 {
        self.levels.iter().fold(0.0, |s, l| s + l.att)
    }

    /// Recombines the components in the order the graph sums them.
    pub fn recombine(&self) -> f64 {
        (self.cls() + self.lambda1 * self.reg()) + self.lambda2 * self.att()
    }

    /// Mean of several reports, level by level.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let Some(first) = reports.first() else { return LossReport::default() };
        let n = reports.len() as f64;
        let mut out = LossReport { total: 0.0, lambda1: first.lambda1, lambda2: first.lambda2, levels: vec![LevelLoss::default(); first.levels.len()] };
        for r in reports {
            out.total += r.total / n;
            for (o, l) in out.levels.iter_mut().zip(&r.levels) {
                o.cls += l.cls / n;
                o.reg += l.reg / n;
                o.att += l.att / n;
                o.n_classification += l.n_classification;
                o.n_positive += l.n_positive;
            }
        }
        out
    }
}

impl std::fmt::Display for LossReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "total={} cls={} reg={} att={}", self.total, self.cls(), self.reg(), self.att())?;
        for (k, l) in self.levels.iter().enumerate() {
            write!(f, " | L{k}: cls={} reg={} att={} Nc={} Nr={}", l.cls, l.reg, l.att, l.n_classification, l.n_positive)?;
        }
        Ok(())
    }
}

fn sum_vars<T: Scalar>(g: &mut Graph<T>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

/// Multi-task loss: per-level normalized focal classification, smooth-L1
/// over positives weighted by `lambda1`, and attention cross-entropy
/// weighted by `lambda2`. Attention terms are zero for an image without any
/// positive anchor.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    levels: &[LevelVars],
    grid: &AnchorGrid,
    assignment: &AnchorAssignment,
    att_targets: &AttentionTarget,
    cfg: &LossConfig,
) -> Result<(Var, LossReport)> {
    cfg.validate()?;
    if levels.len() != grid.levels.len() || levels.is_empty() {
        return Err(FanError::shape("total_loss", format!("{} levels", grid.levels.len()), format!("{}", levels.len())));
    }
    let labels = assignment.class_targets();
    let any_positive = assignment.num_positive() > 0;
    let a = grid.anchors_per_location;
    let (mut cls_terms, mut reg_terms, mut att_terms) = (Vec::new(), Vec::new(), Vec::new());
    let mut report = LossReport { lambda1: cfg.lambda1, lambda2: cfg.lambda2, ..Default::default() };
    for (slot, lv) in levels.iter().enumerate() {
        let level = &grid.levels[slot];
        let range = grid.level_range(slot);
        let (h, w) = (level.height, level.width);
        let expect = |what: &str, c: usize| format!("{what} [{c}, {h}, {w}]");
        if g.shape(lv.cls) != [a, h, w] {
            return Err(FanError::shape("total_loss", expect("cls", a), format!("{:?}", g.shape(lv.cls))));
        }
        if g.shape(lv.reg) != [4 * a, h, w] {
            return Err(FanError::shape("total_loss", expect("reg", 4 * a), format!("{:?}", g.shape(lv.reg))));
        }
        let counts = assignment.levels[slot];

        let cls_hwc = g.chw_to_hwc(lv.cls)?;
        let cls_flat = g.reshape(cls_hwc, &[h * w * a])?;
        let n_cls = match cfg.cls_normalizer {
            ClsNormalizer::Participating => counts.n_classification,
            ClsNormalizer::Positive if counts.n_classification == 0 => 0,
            ClsNormalizer::Positive => assignment.num_positive().max(1),
        };
        let cls = focal_loss(g, cls_flat, &labels[range.clone()], cfg, n_cls)?;

        let reg_hwc = g.chw_to_hwc(lv.reg)?;
        let reg_flat = g.reshape(reg_hwc, &[h * w * a * 4])?;
        let targets: Vec<(usize, [T; 4])> = range
            .clone()
            .filter(|&i| matches!(assignment.labels[i], AnchorLabel::Positive(_)))
            .map(|i| (i - range.start, assignment.deltas[i].map(T::lit)))
            .collect();
        let reg = smooth_l1(g, reg_flat, &targets, cfg.smooth_l1_beta, counts.n_positive)?;

        let att = match lv.att {
            Some(att) if any_positive => Some(attention_loss(g, att, &att_targets.masks[slot])?),
            _ => None,
        };
        let to_f64 = |v: Var, g: &Graph<T>| g.value(v).item().to_f64().unwrap_or(f64::NAN);
        report.levels.push(LevelLoss {
            cls: to_f64(cls, g),
            reg: to_f64(reg, g),
            att: att.map_or(0.0, |v| to_f64(v, g)),
            n_classification: counts.n_classification,
            n_positive: counts.n_positive,
        });
        cls_terms.push(cls);
        reg_terms.push(reg);
        att_terms.extend(att);
    }
    let cls_sum = sum_vars(g, &cls_terms)?;
    let reg_sum = sum_vars(g, &reg_terms)?;
    let reg_scaled = g.scale(reg_sum, T::lit(cfg.lambda1));
    let mut total = g.add(cls_sum, reg_scaled)?;
    if !att_terms.is_empty() {
        let att_sum = sum_vars(g, &att_terms)?;
        let att_scaled = g.scale(att_sum, T::lit(cfg.lambda2));
        total = g.add(total, att_scaled)?;
    }
    report.total = g.value(total).item().to_f64().unwrap_or(f64::NAN);
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn run_focal(logits: &[f64], labels: &[i8], cfg: &LossConfig, n: usize) -> f64 {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![logits.len()], logits.to_vec()).unwrap());
        let l = focal_loss(&mut g, x, labels, cfg, n).unwrap();
        g.value(l).item()
    }

    #[test]
    fn focal_degenerates_to_cross_entropy() {
        let cfg = LossConfig { focal_alpha: 1.0, focal_gamma: 0.0, ..Default::default() };
        let v = run_focal(&[0.0], &[1], &cfg, 1);
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn focal_direct_value() {
        let p = 0.9f64;
        let logit = (p / (1.0 - p)).ln();
        let v = run_focal(&[logit], &[1], &LossConfig::default(), 1);
        let want = -0.25 * 0.1f64.powi(2) * p.ln();
        assert!((v - want).abs() < 1e-15, "{v} {want}");
        assert!((v - 2.634e-4).abs() < 1e-7);
    }

    #[test]
    fn focal_ignores_ignored_and_handles_zero_normalizer() {
        let cfg = LossConfig::default();
        assert_eq!(run_focal(&[3.0, -2.0], &[-1, -1], &cfg, 0), 0.0);
        let a = run_focal(&[3.0, -2.0, 5.0], &[1, 0, -1], &cfg, 2);
        let b = run_focal(&[3.0, -2.0], &[1, 0], &cfg, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn focal_is_stable_for_extreme_logits() {
        let cfg = LossConfig::default();
        let v = run_focal(&[-200.0, 200.0], &[1, 0], &cfg, 2);
        assert!(v.is_finite() && v > 0.0);
        let v = run_focal(&[200.0, -200.0], &[1, 0], &cfg, 2);
        assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn smooth_l1_pieces() {
        assert_eq!(smooth_l1_term(0.5f64, 1.0).0, 0.125);
        assert_eq!(smooth_l1_term(2.0f64, 1.0).0, 1.5);
        assert_eq!(smooth_l1_term(-2.0f64, 1.0).0, 1.5);
        for beta in [0.5f64, 1.0, 2.0] {
            let inside = 0.5 * beta * beta / beta;
            let outside = beta - 0.5 * beta;
            assert_eq!(inside, outside);
            assert_eq!(smooth_l1_term(beta, beta).0, 0.5 * beta);
        }
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::new(vec![8], vec![0.1, 0.2, 0.3, 0.4, 1.0, 1.0, 1.0, 1.0]).unwrap());
        let same = smooth_l1(&mut g, p, &[(0, [0.1, 0.2, 0.3, 0.4])], 1.0, 1).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let zero = smooth_l1(&mut g, p, &[], 1.0, 0).unwrap();
        assert_eq!(g.value(zero).item(), 0.0);
    }

    #[test]
    fn attention_loss_examples() {
        let mask = LevelMask { height: 2, width: 3, data: vec![1; 6] };
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1, 2, 3], 100.0));
        let v = attention_loss(&mut g, x, &mask).unwrap();
        assert!(g.value(v).item() < 1e-40);
        let mixed = LevelMask { height: 2, width: 3, data: vec![1, 0, 1, 0, 0, 1] };
        let z = g.leaf(Tensor::zeros(&[1, 2, 3]));
        let v = attention_loss(&mut g, z, &mixed).unwrap();
        assert!((g.value(v).item() - 2f64.ln()).abs() < 1e-15);
        let wrong = g.leaf(Tensor::zeros(&[1, 3, 2]));
        assert!(attention_loss(&mut g, wrong, &mixed).is_err());
    }

    #[test]
    fn focal_below_weighted_cross_entropy() {
        let cfg = LossConfig::default();
        let ce = LossConfig { focal_gamma: 0.0, ..cfg };
        for i in -30..=30 {
            let z = i as f64 * 0.4;
            for label in [0i8, 1] {
                let f = run_focal(&[z], &[label], &cfg, 1);
                let c = run_focal(&[z], &[label], &ce, 1);
                assert!(f >= 0.0 && f <= c, "z={z} label={label}: {f} > {c}");
            }
        }
    }

    #[test]
    fn focal_decreases_with_confidence() {
        let cfg = LossConfig::default();
        let mut prev = f64::INFINITY;
        for i in -20..=20 {
            let v = run_focal(&[i as f64 * 0.5], &[1], &cfg, 1);
            assert!(v < prev);
            prev = v;
        }
    }
}
