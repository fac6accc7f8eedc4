use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::image::RgbImage;
use super::scene::{derive_seed, generate_scene, SceneAnnotation, SceneConfig};
use crate::error::{FanError, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const STATS_FILE: &str = "stats.csv";
pub const IMAGES_DIR: &str = "images";

/// One scene kept as 8-bit RGB to bound memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub annotation: SceneAnnotation,
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Sample {
    pub fn from_image(image: &RgbImage, annotation: SceneAnnotation) -> Self {
        Sample { annotation, width: image.width, height: image.height, rgb: image.to_rgb8() }
    }

    pub fn image(&self) -> RgbImage {
        RgbImage::from_rgb8(self.width, self.height, &self.rgb).expect("sample buffer matches dims")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn annotations(&self) -> Vec<&SceneAnnotation> {
        self.samples.iter().map(|s| &s.annotation).collect()
    }

    /// Generates `count` scenes; scene `i` uses `derive_seed(seed, i)`, so the
    /// result does not depend on `threads`.
    pub fn generate(count: usize, cfg: &SceneConfig, seed: u64, threads: usize) -> Result<Self> {
        cfg.validate()?;
        let make = |i: usize| -> Result<Sample> {
            let (img, mut ann) = generate_scene(derive_seed(seed, i as u64), cfg)?;
            ann.image_path = image_name(i);
            Ok(Sample::from_image(&img, ann))
        };
        let samples = crate::parallel::par_map(count, threads, make).into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples })
    }

    /// Writes `images/`, `annotations.jsonl` and `stats.csv` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join(IMAGES_DIR))?;
        let mut jsonl = std::io::BufWriter::new(std::fs::File::create(dir.join(ANNOTATIONS_FILE))?);
        for s in &self.samples {
            s.image().save_png(&dir.join(&s.annotation.image_path))?;
            serde_json::to_writer(&mut jsonl, &s.annotation)?;
            jsonl.write_all(b"\n")?;
        }
        jsonl.flush()?;
        std::fs::write(dir.join(STATS_FILE), stats_csv(&self.annotations()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let anns = read_annotations(&dir.join(ANNOTATIONS_FILE))?;
        let mut samples = Vec::with_capacity(anns.len());
        for ann in anns {
            let img = RgbImage::load_png(&dir.join(&ann.image_path))?;
            for b in &ann.boxes {
                if b.x_max() > img.width as f64 || b.y_max() > img.height as f64 || b.x_min() < 0.0 || b.y_min() < 0.0 {
                    return Err(FanError::Data(format!("{}: box {b:?} outside image", ann.image_path)));
                }
            }
            samples.push(Sample::from_image(&img, ann));
        }
        Ok(Dataset { samples })
    }
}

pub fn image_name(index: usize) -> String {
    format!("{IMAGES_DIR}/{index:06}.png")
}

pub fn read_annotations(path: &Path) -> Result<Vec<SceneAnnotation>> {
    let file = std::fs::File::open(path).map_err(|e| FanError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: SceneAnnotation = serde_json::from_str(&line)
            .map_err(|e| FanError::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if ann.boxes.len() != ann.occlusion.len() {
            return Err(FanError::Data(format!("{}:{}: boxes and occ differ in length", path.display(), n + 1)));
        }
        out.push(ann);
    }
    Ok(out)
}

pub const SIZE_EDGES: [f64; 7] = [0.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0];
pub const OCCLUSION_EDGES: [f64; 6] = [0.0, 0.1, 0.3, 0.5, 0.7, 1.0];

/// Size histogram (box side = sqrt(area)) and occlusion histogram. The first
/// occlusion row counts exact zeros.
pub fn stats_csv(anns: &[&SceneAnnotation]) -> String {
    let mut s = String::from("kind,lo,hi,count\n");
    let sides: Vec<f64> = anns.iter().flat_map(|a| a.boxes.iter().map(|b| b.area().sqrt())).collect();
    for w in SIZE_EDGES.windows(2) {
        let n = sides.iter().filter(|&&v| v >= w[0] && v < w[1]).count();
        let _ = writeln!(s, "size,{},{},{n}", w[0], w[1]);
    }
    let occ: Vec<f64> = anns.iter().flat_map(|a| a.occlusion.iter().copied()).collect();
    let _ = writeln!(s, "occlusion,0,0,{}", occ.iter().filter(|&&o| o == 0.0).count());
    for w in OCCLUSION_EDGES.windows(2) {
        let n = occ.iter().filter(|&&o| o > w[0] && o <= w[1]).count();
        let _ = writeln!(s, "occlusion,{},{},{n}", w[0], w[1]);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_count_does_not_change_output() {
        let cfg = SceneConfig { width: 128, height: 128, size_range: (16.0, 64.0), ..Default::default() };
        let a = Dataset::generate(7, &cfg, 5, 1).unwrap();
        let b = Dataset::generate(7, &cfg, 5, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig { width: 128, height: 128, size_range: (16.0, 64.0), ..Default::default() };
        let a = Dataset::generate(4, &cfg, 1, 1).unwrap();
        a.save(dir.path()).unwrap();
        let b = Dataset::load(dir.path()).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.annotation, y.annotation);
            assert!(x.rgb == y.rgb, "pixels differ");
        }
        assert_eq!(a.len(), b.len());
        let stats = std::fs::read_to_string(dir.path().join(STATS_FILE)).unwrap();
        let total: usize = stats.lines().filter(|l| l.starts_with("size,")).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
        assert_eq!(total, a.samples.iter().map(|s| s.annotation.boxes.len()).sum::<usize>());
    }

    #[test]
    fn malformed_line_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(ANNOTATIONS_FILE), "{\"image\":\"x.png\",\"boxes\":[[1,1,0,0]],\"occ\":[0]}\n").unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(FanError::Data(_))));
    }
}
