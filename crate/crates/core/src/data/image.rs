use std::io::BufWriter;
use std::path::Path;

use crate::error::{FanError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Planar RGB image with values in `[0, 1]`, layout `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage { width, height, data: vec![0.0; 3 * width * height] }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn put_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v.clamp(0.0, 1.0));
        }
    }

    /// Network input: `(v - 0.5) / 0.25` per channel.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::lit(((v - 0.5) * 4.0) as f64)).collect();
        Tensor::new(vec![3, self.height, self.width], data).expect("consistent image buffer")
    }

    /// Bilinear resample of the window `[x0, x0 + w] × [y0, y0 + h]` (source
    /// pixel units, may extend past the border, which reads as zero) onto
    /// an `out_w × out_h` grid, sampling at pixel centres.
    pub fn resample(&self, x0: f64, y0: f64, w: f64, h: f64, out_w: usize, out_h: usize) -> RgbImage {
        let mut out = RgbImage::new(out_w, out_h);
        let (sx, sy) = (w / out_w as f64, h / out_h as f64);
        let taps = |pos: f64, n: usize| -> (isize, isize, f32) {
            let p = pos - 0.5;
            let i0 = p.floor();
            let frac = (p - i0) as f32;
            let _ = n;
            (i0 as isize, i0 as isize + 1, frac)
        };
        let read = |c: usize, y: isize, x: isize| -> f32 {
            if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
                0.0
            } else {
                self.get(c, y as usize, x as usize)
            }
        };
        // clamp-to-edge inside the image, zero only outside the window's reach
        let clampi = |v: isize, n: usize, lo: f64, hi: f64| -> isize {
            let min = lo.floor().max(0.0) as isize;
            let max = (hi.ceil() as isize - 1).min(n as isize - 1);
            v.clamp(min.min(max), max.max(min))
        };
        let cols: Vec<(isize, isize, f32)> = (0..out_w)
            .map(|ox| {
                let (a, b, f) = taps(x0 + (ox as f64 + 0.5) * sx, self.width);
                (clampi(a, self.width, x0, x0 + w), clampi(b, self.width, x0, x0 + w), f)
            })
            .collect();
        for oy in 0..out_h {
            let (ya, yb, fy) = taps(y0 + (oy as f64 + 0.5) * sy, self.height);
            let (ya, yb) = (clampi(ya, self.height, y0, y0 + h), clampi(yb, self.height, y0, y0 + h));
            for (ox, &(xa, xb, fx)) in cols.iter().enumerate() {
                for c in 0..3 {
                    let top = read(c, ya, xa) * (1.0 - fx) + read(c, ya, xb) * fx;
                    let bot = read(c, yb, xa) * (1.0 - fx) + read(c, yb, xb) * fx;
                    out.set(c, oy, ox, top * (1.0 - fy) + bot * fy);
                }
            }
        }
        out
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> RgbImage {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        self.resample(0.0, 0.0, self.width as f64, self.height as f64, out_w, out_h)
    }

    /// Copies into the top-left corner of a larger zero canvas.
    pub fn pad_to(&self, width: usize, height: usize) -> RgbImage {
        assert!(width >= self.width && height >= self.height);
        let mut out = RgbImage::new(width, height);
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, x));
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                let row = (c * self.height + y) * self.width;
                out.data[row..row + self.width].reverse();
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(3 * self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    buf.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        buf
    }

    pub fn from_rgb8(width: usize, height: usize, buf: &[u8]) -> Result<Self> {
        if buf.len() != 3 * width * height {
            return Err(FanError::Data(format!("rgb buffer of {} bytes for {width}x{height}", buf.len())));
        }
        let mut img = RgbImage::new(width, height);
        for (i, px) in buf.chunks_exact(3).enumerate() {
            let (y, x) = (i / width, i % width);
            for c in 0..3 {
                img.set(c, y, x, px[c] as f32 / 255.0);
            }
        }
        Ok(img)
    }

    /// Quantizes to 8 bits per channel, as a PNG round trip would.
    pub fn quantized(&self) -> RgbImage {
        RgbImage::from_rgb8(self.width, self.height, &self.to_rgb8()).expect("same dims")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| FanError::Data(e.to_string()))?;
        w.write_image_data(&self.to_rgb8()).map_err(|e| FanError::Data(e.to_string()))?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut dec = png::Decoder::new(std::io::BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| FanError::Data(format!("{}: {e}", path.display())))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| FanError::Data("png too large".into()))?];
        let info = reader.next_frame(&mut buf).map_err(|e| FanError::Data(format!("{}: {e}", path.display())))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let bytes = &buf[..info.buffer_size()];
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => bytes.to_vec(),
            png::ColorType::Rgba => bytes.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => bytes.iter().flat_map(|&v| [v, v, v]).collect(),
            png::ColorType::GrayscaleAlpha => bytes.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            other => return Err(FanError::Data(format!("unsupported png color type {other:?}"))),
        };
        RgbImage::from_rgb8(w, h, &rgb)
    }
}

/// Writes an 8-bit binary PGM from values in `[0, 1]`.
pub fn save_pgm(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    assert_eq!(values.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel(y, x, [x as f32 / w as f32, y as f32 / h as f32, 0.5]);
            }
        }
        img
    }

    #[test]
    fn identity_resize_and_double_flip() {
        let img = gradient(7, 5);
        assert_eq!(img.resize(7, 5), img);
        assert_eq!(img.resample(0.0, 0.0, 7.0, 5.0, 7, 5), img);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().get(0, 2, 0), img.get(0, 2, 6));
    }

    #[test]
    fn png_round_trip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = gradient(9, 4);
        img.save_png(&p).unwrap();
        assert_eq!(RgbImage::load_png(&p).unwrap(), img.quantized());
    }

    #[test]
    fn downsample_of_constant_is_constant() {
        let mut img = RgbImage::new(10, 10);
        img.data.iter_mut().for_each(|v| *v = 0.25);
        let small = img.resize(4, 4);
        assert!(small.data.iter().all(|&v| (v - 0.25).abs() < 1e-6));
        let up = img.resample(2.0, 2.0, 5.0, 5.0, 16, 16);
        assert!(up.data.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }
}
