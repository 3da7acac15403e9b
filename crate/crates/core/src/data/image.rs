use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// Planar RGB image, values in [0, 1], layout `[channel][row][column]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != CHANNELS * height * width {
            return Err(Error::InvalidShape(format!(
                "{} values cannot fill a 3×{height}×{width} image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// ITU-R 601 luma per pixel.
    pub fn luma(&self) -> Vec<f64> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Round every value to the nearest multiple of 1/255, so 8-bit storage is lossless.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        debug_assert_eq!((self.height, self.width), (other.height, other.width));
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        sum / self.data.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[CHANNELS, self.height, self.width], self.data.clone()).expect("image extents are positive")
    }
}

/// Stack images of one size into an `[N, 3, H, W]` batch.
pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidShape("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
    for im in images {
        if (im.height, im.width) != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes {h}×{w} and {}×{} images",
                im.height, im.width
            )));
        }
        data.extend_from_slice(&im.data);
    }
    Tensor::new(&[images.len(), CHANNELS, h, w], data)
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Decode a PNG or binary PPM file into RGB.
pub fn load_image(path: &Path) -> Result<Image> {
    let decoded = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let mut data = vec![0.0; CHANNELS * h * w];
    for (x, y, px) in decoded.enumerate_pixels() {
        for c in 0..CHANNELS {
            data[(c * h + y as usize) * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Image::new(h, w, data)
}

/// Encode as 8-bit RGB; the format follows the extension (`png` or `ppm`).
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for c in 0..CHANNELS {
            px[c] = (img.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path).map_err(|e| image_err(path, e))
}

/// `<dir>/<image_name>.png`, falling back to `.ppm`.
pub fn find_image(dir: &Path, image_name: &str) -> Result<PathBuf> {
    for ext in ["png", "ppm"] {
        let p = dir.join(format!("{image_name}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Image {
        path: dir.join(image_name),
        message: "no .png or .ppm file with this name".into(),
    })
}
