//! Boxes, IoU, the anchor pyramid and greedy non-maximum suppression.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{FanError, Result};

/// Axis-aligned box in image pixels, corner form, `x` right and `y` down.
///
/// Construction through [`BBox::new`] guarantees finite coordinates and
/// strictly positive area.
#[derive(Clone, Copy, PartialEq)]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_max <= x_min || y_max <= y_min {
            return Err(FanError::InvalidBox(x_min, y_min, x_max, y_max));
        }
        Ok(BBox { x_min, y_min, x_max, y_max })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    #[inline]
    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    #[inline]
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    #[inline]
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    #[inline]
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }
    #[inline]
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    /// Intersection area, zero when disjoint.
    #[inline]
    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clips to `[0, w] × [0, h]`; `None` if nothing with positive area remains.
    pub fn clip(&self, w: f64, h: f64) -> Option<BBox> {
        BBox::new(
            self.x_min.clamp(0.0, w),
            self.y_min.clamp(0.0, h),
            self.x_max.clamp(0.0, w),
            self.y_max.clamp(0.0, h),
        )
        .ok()
    }

    /// Restricts to the region `[x0, x1] × [y0, y1]`.
    pub fn clip_to(&self, region: &BBox) -> Option<BBox> {
        BBox::new(
            self.x_min.max(region.x_min),
            self.y_min.max(region.y_min),
            self.x_max.min(region.x_max),
            self.y_max.min(region.y_max),
        )
        .ok()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    /// Scales all coordinates; `factor` must be positive.
    pub fn scale(&self, fx: f64, fy: f64) -> BBox {
        debug_assert!(fx > 0.0 && fy > 0.0);
        BBox {
            x_min: self.x_min * fx,
            y_min: self.y_min * fy,
            x_max: self.x_max * fx,
            y_max: self.y_max * fy,
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

impl fmt::Debug for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.coords().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [a, b, c, e] = <[f64; 4]>::deserialize(d)?;
        BBox::new(a, b, c, e).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union; symmetric, in `[0, 1]`.
#[inline]
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Declarative anchor design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub levels: Vec<u32>,
    /// Base side per level, same length as `levels`.
    pub base_sides: Vec<f64>,
    pub scale_multipliers: Vec<f64>,
    /// Height over width; area is preserved for every ratio.
    pub aspect_ratios: Vec<f64>,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        AnchorSpec::fan()
    }
}

fn third_octaves(count: usize) -> Vec<f64> {
    (0..count).map(|j| 2f64.powf(j as f64 / 3.0)).collect()
}

impl AnchorSpec {
    /// Sides 16..406 over P3-P7, three scales a third-octave apart, ratios 1 and 1.5.
    pub fn fan() -> Self {
        AnchorSpec {
            levels: vec![3, 4, 5, 6, 7],
            base_sides: (3..=7).map(|k| 2f64.powi(k + 1)).collect(),
            scale_multipliers: third_octaves(3),
            aspect_ratios: vec![1.0, 1.5],
        }
    }

    /// Sides 32..512 base, three scales, ratios {0.5, 1, 2}.
    pub fn retinanet() -> Self {
        AnchorSpec {
            levels: vec![3, 4, 5, 6, 7],
            base_sides: (3..=7).map(|k| 2f64.powi(k + 2)).collect(),
            scale_multipliers: third_octaves(3),
            aspect_ratios: vec![0.5, 1.0, 2.0],
        }
    }

    /// Four third-octave scales per level forming one contiguous chain from
    /// 8 to 8·2^(19/3) ≈ 645, ratios 1 and 1.5.
    pub fn dense() -> Self {
        AnchorSpec {
            levels: vec![3, 4, 5, 6, 7],
            base_sides: (0..5).map(|i| 8.0 * 2f64.powf(4.0 * i as f64 / 3.0)).collect(),
            scale_multipliers: third_octaves(4),
            aspect_ratios: vec![1.0, 1.5],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "fan" => Ok(AnchorSpec::fan()),
            "retinanet" => Ok(AnchorSpec::retinanet()),
            "dense" => Ok(AnchorSpec::dense()),
            other => Err(FanError::Config(format!(
                "unknown anchor preset {other:?} (expected fan, retinanet or dense)"
            ))),
        }
    }

    pub fn anchors_per_location(&self) -> usize {
        self.scale_multipliers.len() * self.aspect_ratios.len()
    }

    pub fn stride(level: u32) -> usize {
        1usize << level
    }

    pub fn max_stride(&self) -> usize {
        self.levels.iter().map(|&k| Self::stride(k)).max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FanError::Config(format!("anchor spec: {m}")));
        if self.levels.is_empty() {
            return bad("no levels");
        }
        if self.levels.len() != self.base_sides.len() {
            return bad("levels and base_sides differ in length");
        }
        if self.levels.windows(2).any(|w| w[1] <= w[0]) {
            return bad("levels must be strictly increasing");
        }
        if self.levels.iter().any(|&k| k > 16) {
            return bad("level index too large");
        }
        let positive = |v: &[f64]| !v.is_empty() && v.iter().all(|x| x.is_finite() && *x > 0.0);
        if !positive(&self.base_sides)
            || !positive(&self.scale_multipliers)
            || !positive(&self.aspect_ratios)
        {
            return bad("sides, scales and ratios must be non-empty and positive");
        }
        Ok(())
    }

    /// `(width, height)` of every anchor shape at a level, in per-cell order
    /// `scale_index * n_ratios + ratio_index`.
    pub fn shapes(&self, level_index: usize) -> Vec<(f64, f64)> {
        let base = self.base_sides[level_index];
        let mut out = Vec::with_capacity(self.anchors_per_location());
        for &s in &self.scale_multipliers {
            let side = base * s;
            for &r in &self.aspect_ratios {
                let root = r.sqrt();
                out.push((side / root, side * root));
            }
        }
        out
    }

    /// Plain-text `key = value` section, values comma separated.
    pub fn to_config_section(&self) -> String {
        fn join<T: ToString>(v: &[T]) -> String {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        }
        format!(
            "[anchors]\nlevels = {}\nbase_sides = {}\nscale_multipliers = {}\naspect_ratios = {}\n",
            join(&self.levels),
            join(&self.base_sides),
            join(&self.scale_multipliers),
            join(&self.aspect_ratios)
        )
    }

    /// Parses the body (or whole text) of an `[anchors]` section.
    pub fn from_config_section(text: &str) -> Result<Self> {
        let mut spec = AnchorSpec::fan();
        let mut seen = false;
        for (key, value) in crate::config::parse_pairs(text, "anchors")? {
            seen = true;
            spec.set(&key, &value)?;
        }
        if !seen {
            return Err(FanError::Config("empty anchor section".into()));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub(crate) fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => *self = AnchorSpec::preset(value.trim())?,
            "levels" => self.levels = crate::config::parse_list(key, value)?,
            "base_sides" => self.base_sides = crate::config::parse_list(key, value)?,
            "scale_multipliers" => self.scale_multipliers = crate::config::parse_list(key, value)?,
            "aspect_ratios" => self.aspect_ratios = crate::config::parse_list(key, value)?,
            other => return Err(FanError::Config(format!("unknown anchors key {other:?}"))),
        }
        Ok(())
    }
}

/// One pyramid level of a materialized grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelGrid {
    pub level: u32,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// Index of the level's first anchor in [`AnchorGrid::anchors`].
    pub offset: usize,
    /// Anchor shapes of one cell, `(width, height)`.
    pub shapes: Vec<(f64, f64)>,
}

impl LevelGrid {
    pub fn len(&self, per_location: usize) -> usize {
        self.height * self.width * per_location
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.stride as f64;
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }
}

/// Anchors of all levels, row-major over each level's cells with
/// `anchors_per_location` consecutive anchors per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub image_width: usize,
    pub image_height: usize,
    pub anchors_per_location: usize,
    pub levels: Vec<LevelGrid>,
    pub anchors: Vec<BBox>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Level slot of a global anchor index.
    pub fn level_of(&self, index: usize) -> usize {
        self.levels
            .iter()
            .rposition(|l| l.offset <= index)
            .expect("index within grid")
    }

    pub fn level_range(&self, slot: usize) -> std::ops::Range<usize> {
        let l = &self.levels[slot];
        l.offset..l.offset + l.len(self.anchors_per_location)
    }

    /// Indices of anchors that can overlap `b` (a superset of those with IoU > 0).
    pub fn candidates(&self, b: &BBox) -> Vec<usize> {
        let a = self.anchors_per_location;
        let mut out = Vec::new();
        for l in &self.levels {
            let half_w = l.shapes.iter().map(|s| s.0).fold(0.0, f64::max) * 0.5;
            let half_h = l.shapes.iter().map(|s| s.1).fold(0.0, f64::max) * 0.5;
            let s = l.stride as f64;
            // cell centers (j + 0.5)·s strictly inside (x_min - half_w, x_max + half_w)
            let span = |lo: f64, hi: f64, n: usize| {
                let first = ((lo / s) - 0.5).floor().max(0.0) as usize;
                let last = (((hi / s) - 0.5).ceil().max(0.0) as usize).min(n.saturating_sub(1));
                (first, last)
            };
            let (c0, c1) = span(b.x_min - half_w, b.x_max + half_w, l.width);
            let (r0, r1) = span(b.y_min - half_h, b.y_max + half_h, l.height);
            if c0 >= l.width || r0 >= l.height {
                continue;
            }
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let base = l.offset + (r * l.width + c) * a;
                    out.extend(base..base + a);
                }
            }
        }
        out
    }
}

/// Materializes the anchor pyramid over an image.
pub fn generate_anchors(image_w: usize, image_h: usize, spec: &AnchorSpec) -> Result<AnchorGrid> {
    spec.validate()?;
    let multiple = spec.max_stride();
    if image_w == 0 || image_h == 0 || image_w % multiple != 0 || image_h % multiple != 0 {
        return Err(FanError::NotDivisible {
            width: image_w,
            height: image_h,
            multiple,
        });
    }
    let per_loc = spec.anchors_per_location();
    let mut levels = Vec::with_capacity(spec.levels.len());
    let mut anchors = Vec::new();
    for (slot, &k) in spec.levels.iter().enumerate() {
        let stride = AnchorSpec::stride(k);
        let level = LevelGrid {
            level: k,
            stride,
            height: image_h / stride,
            width: image_w / stride,
            offset: anchors.len(),
            shapes: spec.shapes(slot),
        };
        anchors.reserve(level.len(per_loc));
        for row in 0..level.height {
            for col in 0..level.width {
                let (cx, cy) = level.cell_center(row, col);
                for &(w, h) in &level.shapes {
                    anchors.push(BBox::from_center(cx, cy, w, h)?);
                }
            }
        }
        levels.push(level);
    }
    Ok(AnchorGrid {
        image_width: image_w,
        image_height: image_h,
        anchors_per_location: per_loc,
        levels,
        anchors,
    })
}

/// Greedy NMS. Returns kept indices in descending score order, ties broken by
/// lower index; a box is suppressed when its IoU with a kept box exceeds the
/// threshold.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}
