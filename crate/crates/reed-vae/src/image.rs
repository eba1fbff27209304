//! Pixel-space image and dataset types.
//!
//! An [`Image`] is a height x width x channels array of `f32` intensities in
//! `[0, 1]`. All quality metrics and model inputs/outputs in this crate use
//! this normalized range, so peak signal level is always 1.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Minimum side length accepted anywhere in the pipeline.
pub const MIN_SIDE: usize = 8;

/// A normalized image: HWC layout, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f32>,
}

impl Image {
    /// Wraps an HWC array, validating range, finiteness and minimum size.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::ShapeError(format!(
                "image sides must be >= {MIN_SIDE}, got {h}x{w}"
            )));
        }
        if c != 1 && c != 3 {
            return Err(Error::ShapeError(format!("channels must be 1 or 3, got {c}")));
        }
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::ShapeError(format!("pixel value {v} outside [0,1]")));
            }
        }
        Ok(Self { data })
    }

    /// Builds an image from raw values, clamping into `[0, 1]` first.
    pub fn from_clamped(mut data: Array3<f32>) -> Result<Self> {
        data.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        Self::new(data)
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, channels), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.data.dim() == other.data.dim()
    }

    /// Luminance plane (0.299 R + 0.587 G + 0.114 B); identity for grayscale.
    pub fn luminance(&self) -> Array2<f64> {
        let (h, w, c) = self.data.dim();
        let mut out = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                out[[i, j]] = if c == 1 {
                    f64::from(self.data[[i, j, 0]])
                } else {
                    0.299 * f64::from(self.data[[i, j, 0]])
                        + 0.587 * f64::from(self.data[[i, j, 1]])
                        + 0.114 * f64::from(self.data[[i, j, 2]])
                };
            }
        }
        out
    }

    /// Separable Gaussian blur with zero padding; kernel radius ceil(3*sigma).
    pub fn gaussian_blurred(&self, sigma: f32) -> Image {
        let kernel = gaussian_kernel(sigma);
        let (h, w, c) = self.data.dim();
        let r = kernel.len() / 2;
        let mut tmp = Array3::<f32>::zeros((h, w, c));
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (t, &k) in kernel.iter().enumerate() {
                        let jj = j as isize + t as isize - r as isize;
                        if jj >= 0 && (jj as usize) < w {
                            acc += k * self.data[[i, jj as usize, ch]];
                        }
                    }
                    tmp[[i, j, ch]] = acc;
                }
            }
        }
        let mut out = Array3::<f32>::zeros((h, w, c));
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (t, &k) in kernel.iter().enumerate() {
                        let ii = i as isize + t as isize - r as isize;
                        if ii >= 0 && (ii as usize) < h {
                            acc += k * tmp[[ii as usize, j, ch]];
                        }
                    }
                    out[[i, j, ch]] = acc;
                }
            }
        }
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Image { data: out }
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f32> = (0..=2 * r)
        .map(|t| {
            let d = t as f32 - r as f32;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f32 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitTag::Train => write!(f, "train"),
            SplitTag::Val => write!(f, "val"),
            SplitTag::Test => write!(f, "test"),
        }
    }
}

/// An ordered, shape-homogeneous, non-empty collection of images.
#[derive(Debug, Clone)]
pub struct Dataset {
    items: Vec<Image>,
    name: String,
    split_tag: SplitTag,
}

impl Dataset {
    pub fn new(items: Vec<Image>, name: impl Into<String>, split_tag: SplitTag) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let first = items[0].data().dim();
        if items.iter().any(|im| im.data().dim() != first) {
            return Err(Error::ShapeError(
                "dataset items must share one shape".to_string(),
            ));
        }
        Ok(Self { items, name: name.into(), split_tag })
    }

    pub fn items(&self) -> &[Image] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split_tag(&self) -> SplitTag {
        self.split_tag
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.items[0].data().dim()
    }

    /// FNV-1a fingerprint of the pixel bytes, used in run manifests.
    pub fn fingerprint(&self) -> u64 {
        let mut hash = crate::persist::FNV_OFFSET;
        for im in &self.items {
            for v in im.data().iter() {
                for b in v.to_le_bytes() {
                    hash = crate::persist::fnv1a_step(hash, b);
                }
            }
        }
        hash
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        let mut a = Array3::zeros((8, 8, 1));
        a[[0, 0, 0]] = 1.5;
        assert!(Image::new(a).is_err());
    }

    #[test]
    fn rejects_small_images() {
        assert!(Image::new(Array3::zeros((4, 8, 1))).is_err());
    }

    #[test]
    fn clamped_constructor_fixes_range() {
        let mut a = Array3::zeros((8, 8, 3));
        a[[1, 1, 0]] = 2.0;
        a[[2, 2, 1]] = -1.0;
        let im = Image::from_clamped(a).unwrap();
        assert_eq!(im.data()[[1, 1, 0]], 1.0);
        assert_eq!(im.data()[[2, 2, 1]], 0.0);
    }

    #[test]
    fn dataset_requires_uniform_shape() {
        let a = Image::constant(8, 8, 1, 0.5).unwrap();
        let b = Image::constant(16, 16, 1, 0.5).unwrap();
        assert!(Dataset::new(vec![a, b], "d", SplitTag::Train).is_err());
    }

    #[test]
    fn luminance_of_gray_is_identity() {
        let im = Image::constant(8, 8, 1, 0.25).unwrap();
        let y = im.luminance();
        assert!((y[[3, 3]] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn blur_preserves_constant_interior() {
        let im = Image::constant(16, 16, 3, 0.5).unwrap();
        let b = im.gaussian_blurred(1.0);
        // Zero padding only affects a border of kernel-radius width.
        assert!((b.data()[[8, 8, 0]] - 0.5).abs() < 1e-6);
        assert!(b.data()[[0, 0, 0]] < 0.5);
    }
}
