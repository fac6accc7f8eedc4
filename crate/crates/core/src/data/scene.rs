use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::RgbImage;
use crate::error::{FanError, Result};
use crate::geometry::BBox;

/// Ground truth for one scene. Serialized as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    #[serde(rename = "image")]
    pub image_path: String,
    pub boxes: Vec<BBox>,
    #[serde(rename = "occ")]
    pub occlusion: Vec<f64>,
    #[serde(rename = "distractors", default)]
    pub distractor_count: usize,
    /// Faces drawn from `face_count`, before placement failures.
    #[serde(rename = "requested", default)]
    pub requested_faces: usize,
}

impl SceneAnnotation {
    pub fn new(boxes: Vec<BBox>, occlusion: Vec<f64>) -> Self {
        let n = boxes.len();
        SceneAnnotation { image_path: String::new(), boxes, occlusion, distractor_count: 0, requested_faces: n }
    }
}

/// Parameters of the synthetic scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of faces per scene.
    pub face_count: (usize, usize),
    /// Face sides are log-uniform over this range, in pixels.
    pub size_range: (f64, f64),
    /// Probability that a placed face receives an occluder.
    pub occluded_fraction_target: f64,
    /// Expected distractor patches per requested face.
    pub distractor_rate: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 256,
            height: 256,
            face_count: (1, 4),
            size_range: (16.0, 160.0),
            occluded_fraction_target: 0.3,
            distractor_rate: 0.5,
        }
    }
}

pub const PLACEMENT_RETRIES: usize = 64;

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        let short = self.width.min(self.height) as f64;
        if !(lo >= 1.0 && lo <= hi && hi <= short) {
            return Err(FanError::Config(format!(
                "size_range [{lo}, {hi}] must satisfy 1 <= min <= max <= {short} (short image edge)"
            )));
        }
        if self.face_count.0 > self.face_count.1 {
            return Err(FanError::Config(format!("face_count {:?} is empty", self.face_count)));
        }
        if !(0.0..=1.0).contains(&self.occluded_fraction_target) {
            return Err(FanError::Config("occluded_fraction_target must be in [0, 1]".into()));
        }
        if !(self.distractor_rate >= 0.0 && self.distractor_rate.is_finite()) {
            return Err(FanError::Config("distractor_rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// Integer pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn overlaps(&self, o: &Rect, gap: usize) -> bool {
        self.x0 < o.x1 + gap && o.x0 < self.x1 + gap && self.y0 < o.y1 + gap && o.y0 < self.y1 + gap
    }

    fn to_bbox(self) -> BBox {
        BBox::new(self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64).expect("non-empty rect")
    }
}

fn log_uniform_side(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> usize {
    let v = if hi > lo { rng.random_range(lo.ln()..=hi.ln()).exp() } else { lo };
    (v.round().clamp(lo.ceil(), hi.floor().max(lo.ceil()))) as usize
}

fn place(rng: &mut ChaCha8Rng, w: usize, h: usize, rw: usize, rh: usize, taken: &[Rect], gap: usize) -> Option<Rect> {
    for _ in 0..PLACEMENT_RETRIES {
        let x0 = rng.random_range(0..=w - rw);
        let y0 = rng.random_range(0..=h - rh);
        let r = Rect { x0, y0, x1: x0 + rw, y1: y0 + rh };
        if taken.iter().all(|t| !r.overlaps(t, gap)) {
            return Some(r);
        }
    }
    None
}

fn skin_tone(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let r = rng.random_range(0.70..0.95f32);
    let g = r * rng.random_range(0.62..0.80f32);
    let b = g * rng.random_range(0.60..0.85f32);
    [r, g, b]
}

fn fill_rect(img: &mut RgbImage, r: &Rect, rgb: [f32; 3]) {
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            img.put_pixel(y, x, rgb);
        }
    }
}

fn fill_textured(img: &mut RgbImage, r: &Rect, rgb: [f32; 3], amp: f32, rng: &mut ChaCha8Rng) {
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            let n = rng.random_range(-amp..=amp);
            img.put_pixel(y, x, [rgb[0] + n, rgb[1] + n, rgb[2] + n]);
        }
    }
}

fn background(img: &mut RgbImage, rng: &mut ChaCha8Rng) {
    const GRID: usize = 5;
    let nodes: Vec<[f32; 3]> = (0..GRID * GRID)
        .map(|_| [rng.random_range(0.05..0.9), rng.random_range(0.05..0.9), rng.random_range(0.05..0.9)])
        .collect();
    let (w, h) = (img.width, img.height);
    for y in 0..h {
        let fy = y as f32 / h.max(2) as f32 * (GRID - 1) as f32;
        let (iy, ty) = ((fy as usize).min(GRID - 2), fy - (fy as usize).min(GRID - 2) as f32);
        for x in 0..w {
            let fx = x as f32 / w.max(2) as f32 * (GRID - 1) as f32;
            let (ix, tx) = ((fx as usize).min(GRID - 2), fx - (fx as usize).min(GRID - 2) as f32);
            let mut rgb = [0.0f32; 3];
            for (c, v) in rgb.iter_mut().enumerate() {
                let a = nodes[iy * GRID + ix][c] * (1.0 - tx) + nodes[iy * GRID + ix + 1][c] * tx;
                let b = nodes[(iy + 1) * GRID + ix][c] * (1.0 - tx) + nodes[(iy + 1) * GRID + ix + 1][c] * tx;
                *v = a * (1.0 - ty) + b * ty + rng.random_range(-0.03..=0.03f32);
            }
            img.put_pixel(y, x, rgb);
        }
    }
}

fn draw_face(img: &mut RgbImage, r: &Rect, rng: &mut ChaCha8Rng) {
    let skin = skin_tone(rng);
    fill_rect(img, r, skin);
    let s = (r.x1 - r.x0) as f64;
    let dark = rng.random_range(0.02..0.18f32);
    let eye_r = (0.09 * s).max(1.0);
    for ex in [0.3, 0.7] {
        let (cx, cy) = (r.x0 as f64 + ex * s, r.y0 as f64 + 0.38 * s);
        let ys = ((cy - eye_r).floor().max(r.y0 as f64) as usize)..((cy + eye_r).ceil().min(r.y1 as f64) as usize);
        for y in ys {
            let xs = ((cx - eye_r).floor().max(r.x0 as f64) as usize)..((cx + eye_r).ceil().min(r.x1 as f64) as usize);
            for x in xs {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= eye_r * eye_r {
                    img.put_pixel(y, x, [dark, dark, dark]);
                }
            }
        }
    }
    let mouth = [rng.random_range(0.4..0.6f32), rng.random_range(0.05..0.15f32), rng.random_range(0.05..0.15f32)];
    let my0 = r.y0 + (0.68 * s) as usize;
    let my1 = (my0 + ((0.08 * s).round() as usize).max(1)).min(r.y1);
    let mx0 = r.x0 + (0.28 * s) as usize;
    let mx1 = (r.x0 + (0.72 * s).ceil() as usize).min(r.x1);
    fill_rect(img, &Rect { x0: mx0, y0: my0, x1: mx1.max(mx0 + 1), y1: my1 }, mouth);
}

/// Occluder band over one side of a face, extending slightly outward.
fn occluder_rect(face: &Rect, w: usize, h: usize, rng: &mut ChaCha8Rng) -> Rect {
    let s = face.x1 - face.x0;
    let frac = rng.random_range(0.2..0.8f64);
    let depth = ((frac * s as f64).round() as usize).clamp(1, s);
    let margin = (rng.random_range(0.0..0.15f64) * s as f64) as usize;
    let (mut x0, mut y0, mut x1, mut y1) = (
        face.x0.saturating_sub(margin),
        face.y0.saturating_sub(margin),
        (face.x1 + margin).min(w),
        (face.y1 + margin).min(h),
    );
    match rng.random_range(0..4) {
        0 => y0 = face.y1 - depth,
        1 => y1 = face.y0 + depth,
        2 => x0 = face.x1 - depth,
        _ => x1 = face.x0 + depth,
    }
    Rect { x0, y0, x1, y1 }
}

/// Renders one synthetic scene. Faces that cannot be placed without
/// overlap after bounded retries are dropped; `requested_faces` keeps the
/// drawn count.
pub fn generate_scene(rng_seed: u64, cfg: &SceneConfig) -> Result<(RgbImage, SceneAnnotation)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (w, h) = (cfg.width, cfg.height);
    let (lo, hi) = cfg.size_range;
    let mut img = RgbImage::new(w, h);
    background(&mut img, &mut rng);

    let requested = rng.random_range(cfg.face_count.0..=cfg.face_count.1);
    let mut faces: Vec<Rect> = Vec::with_capacity(requested);
    for _ in 0..requested {
        let side = log_uniform_side(&mut rng, lo, hi);
        if let Some(r) = place(&mut rng, w, h, side, side, &faces, 2) {
            faces.push(r);
        }
    }

    let expected = cfg.distractor_rate * requested as f64;
    let n_distract = expected.floor() as usize + usize::from(rng.random_bool(expected.fract()));
    let mut distractors = Vec::new();
    for _ in 0..n_distract {
        let side = log_uniform_side(&mut rng, lo, hi);
        let aspect = rng.random_range(0.5..2.0f64);
        let dw = ((side as f64 * aspect.sqrt()).round() as usize).clamp(1, w);
        let dh = ((side as f64 / aspect.sqrt()).round() as usize).clamp(1, h);
        if let Some(r) = place(&mut rng, w, h, dw, dh, &faces, 2) {
            distractors.push(r);
        }
    }
    for r in &distractors {
        let tone = skin_tone(&mut rng);
        fill_textured(&mut img, r, tone, 0.08, &mut rng);
    }
    for r in &faces {
        draw_face(&mut img, r, &mut rng);
    }

    let mut covered = vec![false; w * h];
    for f in &faces {
        if !rng.random_bool(cfg.occluded_fraction_target) {
            continue;
        }
        let occ = occluder_rect(f, w, h, &mut rng);
        let tone = if rng.random_bool(0.5) {
            skin_tone(&mut rng)
        } else {
            [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
        };
        fill_textured(&mut img, &occ, tone, 0.1, &mut rng);
        for y in occ.y0..occ.y1 {
            covered[y * w + occ.x0..y * w + occ.x1].iter_mut().for_each(|c| *c = true);
        }
    }
    let occlusion = faces
        .iter()
        .map(|f| {
            let hits: usize = (f.y0..f.y1).map(|y| covered[y * w + f.x0..y * w + f.x1].iter().filter(|&&c| c).count()).sum();
            hits as f64 / ((f.x1 - f.x0) * (f.y1 - f.y0)) as f64
        })
        .collect();

    let ann = SceneAnnotation {
        image_path: String::new(),
        boxes: faces.iter().map(|r| r.to_bbox()).collect(),
        occlusion,
        distractor_count: distractors.len(),
        requested_faces: requested,
    };
    Ok((img, ann))
}

/// Independent per-index seed so scenes can be produced in any order.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_occlusion_target_means_no_occlusion() {
        let cfg = SceneConfig { occluded_fraction_target: 0.0, ..SceneConfig::default() };
        for s in 0..20 {
            let (_, ann) = generate_scene(s, &cfg).unwrap();
            assert!(ann.occlusion.iter().all(|&o| o == 0.0));
        }
    }

    #[test]
    fn regeneration_is_identical() {
        let cfg = SceneConfig::default();
        let (a, aa) = generate_scene(42, &cfg).unwrap();
        let (b, bb) = generate_scene(42, &cfg).unwrap();
        assert_eq!(a.to_rgb8(), b.to_rgb8());
        assert_eq!(aa, bb);
        let (c, _) = generate_scene(43, &cfg).unwrap();
        assert_ne!(a.to_rgb8(), c.to_rgb8());
    }

    #[test]
    fn boxes_in_bounds_and_occlusion_recorded() {
        let cfg = SceneConfig { occluded_fraction_target: 1.0, ..SceneConfig::default() };
        let mut any = false;
        for s in 0..30 {
            let (_, ann) = generate_scene(s, &cfg).unwrap();
            assert_eq!(ann.boxes.len(), ann.occlusion.len());
            assert!(ann.boxes.len() <= ann.requested_faces);
            for (b, &o) in ann.boxes.iter().zip(&ann.occlusion) {
                assert!(b.x_min() >= 0.0 && b.y_min() >= 0.0 && b.x_max() <= 256.0 && b.y_max() <= 256.0);
                assert!((0.0..=1.0).contains(&o));
                assert!((b.width() - b.height()).abs() < 1e-12);
                any |= o > 0.0;
            }
        }
        assert!(any);
    }

    #[test]
    fn crowded_scene_drops_faces_and_counts_them() {
        let cfg = SceneConfig {
            width: 128,
            height: 128,
            face_count: (12, 12),
            size_range: (100.0, 120.0),
            ..SceneConfig::default()
        };
        let (_, ann) = generate_scene(1, &cfg).unwrap();
        assert_eq!(ann.requested_faces, 12);
        assert_eq!(ann.boxes.len(), 1);
    }

    #[test]
    fn size_range_must_fit() {
        let cfg = SceneConfig { size_range: (16.0, 406.0), ..SceneConfig::default() };
        assert!(generate_scene(0, &cfg).is_err());
    }

    #[test]
    fn json_line_shape() {
        let ann = SceneAnnotation {
            image_path: "images/000001.png".into(),
            boxes: vec![BBox::new(1.0, 2.0, 3.0, 4.0).unwrap()],
            occlusion: vec![0.25],
            distractor_count: 2,
            requested_faces: 1,
        };
        let s = serde_json::to_string(&ann).unwrap();
        assert_eq!(s, r#"{"image":"images/000001.png","boxes":[[1.0,2.0,3.0,4.0]],"occ":[0.25],"distractors":2,"requested":1}"#);
        let back: SceneAnnotation = serde_json::from_str(r#"{"image":"a.png","boxes":[],"occ":[]}"#).unwrap();
        assert_eq!(back.distractor_count, 0);
    }
}
