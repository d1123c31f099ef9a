//! Core domain types: images, prompts, embeddings, and mask logits.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// An `(h, w, 3)` pixel array with every value in `[0, 1]`.
///
/// All attack budgets are expressed in this domain (an epsilon of `8/255`
/// means eight 8-bit steps); any model-specific normalization belongs inside
/// the model, not here.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (_, _, c) = data.dim();
        if c != Self::CHANNELS {
            return Err(Error::input(format!(
                "image must have {} channels, got {c}",
                Self::CHANNELS
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::input(format!(
                "image value {v} outside the [0,1] pixel domain"
            )));
        }
        Ok(Self { data })
    }

    /// Build from raw data, clamping into `[0, 1]` first. Non-finite values
    /// are still rejected.
    pub fn from_clamped(mut data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite pixel value"));
        }
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self::new(data)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, Self::CHANNELS)),
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        Self::new(Array3::from_shape_fn((height, width, Self::CHANNELS), |(y, x, c)| f(y, x, c)))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("image not standard layout")
    }

    pub fn linf_distance(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Crop `[y0, y0+h) × [x0, x0+w)` and bilinearly resize to `(out_h, out_w)`.
    pub fn crop_resized(&self, y0: usize, x0: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if h == 0 || w == 0 || y0 + h > self.height() || x0 + w > self.width() {
            return Err(Error::input(format!(
                "crop [{y0}+{h}, {x0}+{w}] outside image {}x{}",
                self.height(),
                self.width()
            )));
        }
        let patch = self
            .data
            .slice(ndarray::s![y0..y0 + h, x0..x0 + w, ..])
            .to_owned();
        Self::from_clamped(math::resize_bilinear(&patch, out_h, out_w))
    }

    pub fn resized(&self, out_h: usize, out_w: usize) -> Self {
        Self::from_clamped(math::resize_bilinear(&self.data, out_h, out_w))
            .expect("resize of a valid image stays finite")
    }

    /// Decode a PNG/JPEG file, scale to `[0, 1]`, and optionally resize.
    pub fn load(path: &Path, resize_to: Option<(usize, usize)>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
        });
        let img = Self::new(data)?;
        Ok(match resize_to {
            Some((rh, rw)) => img.resized(rh, rw),
            None => img,
        })
    }

    /// Quantize to 8-bit and write as PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = self.to_u8();
        image::RgbImage::from_raw(self.width() as u32, self.height() as u32, buf)
            .expect("buffer sized from image dims")
            .save(path)?;
        Ok(())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.as_slice()
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// A point or box prompt in pixel coordinates. Point prompts are always
/// foreground prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Prompt {
    Point { x: u32, y: u32 },
    Box { x1: u32, y1: u32, x2: u32, y2: u32 },
}

impl Prompt {
    pub fn point(x: u32, y: u32) -> Self {
        Prompt::Point { x, y }
    }

    pub fn bbox(x1: u32, y1: u32, x2: u32, y2: u32) -> Self {
        Prompt::Box { x1, y1, x2, y2 }
    }

    /// Check bounds against an image of `height × width` pixels; boxes must
    /// additionally satisfy `x1 < x2` and `y1 < y2`.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let (h, w) = (height as u32, width as u32);
        match *self {
            Prompt::Point { x, y } => {
                if x >= w || y >= h {
                    return Err(Error::input(format!(
                        "point prompt ({x}, {y}) outside {w}x{h} image"
                    )));
                }
            }
            Prompt::Box { x1, y1, x2, y2 } => {
                if x2 >= w || y2 >= h {
                    return Err(Error::input(format!(
                        "box prompt ({x1}, {y1}, {x2}, {y2}) outside {w}x{h} image"
                    )));
                }
                if x1 >= x2 || y1 >= y2 {
                    return Err(Error::input(format!(
                        "degenerate box prompt ({x1}, {y1}, {x2}, {y2}): need x1 < x2 and y1 < y2"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Prompt::Point { .. } => "point",
            Prompt::Box { .. } => "box",
        }
    }
}

/// An `(grid_h, grid_w, dim)` feature map produced by an image encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrid {
    data: Array3<f64>,
}

impl EmbeddingGrid {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite embedding value"));
        }
        Ok(Self { data })
    }

    pub fn grid_h(&self) -> usize {
        self.data.dim().0
    }

    pub fn grid_w(&self) -> usize {
        self.data.dim().1
    }

    pub fn dim(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    /// The grid flattened to a single feature vector (row-major).
    pub fn flat(&self) -> &[f64] {
        self.data.as_slice().expect("embedding not standard layout")
    }

    pub fn same_shape(&self, other: &EmbeddingGrid) -> bool {
        self.data.dim() == other.data.dim()
    }
}

/// Per-pixel mask confidences at the model's input resolution. A pixel
/// belongs to the mask iff its logit is strictly greater than zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits {
    data: Array2<f64>,
}

impl MaskLogits {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite mask logit"));
        }
        Ok(Self { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("logits not standard layout")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_out_of_domain() {
        let mut a = Array3::zeros((2, 2, 3));
        a[(0, 0, 0)] = 1.5;
        assert!(matches!(ImageTensor::new(a), Err(Error::Input(_))));
    }

    #[test]
    fn image_rejects_wrong_channels() {
        let a = Array3::zeros((2, 2, 4));
        assert!(ImageTensor::new(a).is_err());
    }

    #[test]
    fn from_clamped_clamps_but_rejects_nan() {
        let mut a = Array3::zeros((1, 1, 3));
        a[(0, 0, 0)] = 1.2;
        a[(0, 0, 1)] = -0.3;
        let img = ImageTensor::from_clamped(a.clone()).unwrap();
        assert_eq!(img.data()[(0, 0, 0)], 1.0);
        assert_eq!(img.data()[(0, 0, 1)], 0.0);
        a[(0, 0, 2)] = f64::NAN;
        assert!(matches!(
            ImageTensor::from_clamped(a),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn prompt_bounds() {
        assert!(Prompt::point(31, 31).validate(32, 32).is_ok());
        assert!(Prompt::point(32, 0).validate(32, 32).is_err());
        assert!(Prompt::bbox(0, 0, 31, 31).validate(32, 32).is_ok());
        assert!(Prompt::bbox(5, 5, 5, 9).validate(32, 32).is_err());
        assert!(Prompt::bbox(0, 0, 31, 32).validate(32, 32).is_err());
    }

    #[test]
    fn prompt_json_shape() {
        let p = Prompt::point(3, 4);
        assert_eq!(
            serde_json::to_string(&p).unwrap(),
            r#"{"kind":"point","x":3,"y":4}"#
        );
        let b: Prompt = serde_json::from_str(r#"{"kind":"box","x1":1,"y1":2,"x2":5,"y2":6}"#).unwrap();
        assert_eq!(b, Prompt::bbox(1, 2, 5, 6));
    }

    #[test]
    fn embedding_rejects_nan() {
        let mut a = Array3::zeros((2, 2, 4));
        a[(1, 1, 3)] = f64::INFINITY;
        assert!(EmbeddingGrid::new(a).is_err());
    }

    #[test]
    fn crop_full_image_identity() {
        let img = ImageTensor::from_fn(8, 8, |y, x, c| ((y + x + c) % 7) as f64 / 10.0).unwrap();
        let crop = img.crop_resized(0, 0, 8, 8, 8, 8).unwrap();
        assert_eq!(crop, img);
    }
}
