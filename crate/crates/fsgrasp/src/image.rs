//! Image and mask containers shared by every pipeline stage.
//!
//! Pixels are stored row-major; a pixel is addressed as `(x, y)` with `x`
//! being the column. Depth is in integer millimeters with 0 meaning invalid.

use thiserror::Error;

pub const MIN_IMAGE_SIDE: usize = 32;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image is {height}x{width}, both sides must be at least {MIN_IMAGE_SIDE}")]
    TooSmall { height: usize, width: usize },
    #[error("buffer length {got} does not match {expect} for a {height}x{width} image")]
    BadBufferLen {
        height: usize,
        width: usize,
        expect: usize,
        got: usize,
    },
    #[error("mask is {mask_h}x{mask_w} but the image is {image_h}x{image_w}")]
    SizeMismatch {
        mask_h: usize,
        mask_w: usize,
        image_h: usize,
        image_w: usize,
    },
    #[error("support shot {index} has an empty mask")]
    EmptyShotMask { index: usize },
    #[error("support set needs at least one shot")]
    EmptySupport,
}

/// 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != height * width * 3 {
            return Err(ImageError::BadBufferLen {
                height,
                width,
                expect: height * width * 3,
                got: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.data
    }
}

/// RGB-D query image: color plus millimeter depth (0 = invalid reading).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbdImage {
    rgb: RgbImage,
    depth: Vec<u16>,
}

impl RgbdImage {
    pub fn new(rgb: RgbImage, depth: Vec<u16>) -> Result<Self, ImageError> {
        let (h, w) = (rgb.height(), rgb.width());
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(ImageError::TooSmall { height: h, width: w });
        }
        if depth.len() != h * w {
            return Err(ImageError::BadBufferLen {
                height: h,
                width: w,
                expect: h * w,
                got: depth.len(),
            });
        }
        Ok(Self { rgb, depth })
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn rgb(&self) -> &RgbImage {
        &self.rgb
    }

    pub fn depth(&self) -> &[u16] {
        &self.depth
    }

    pub fn depth_at(&self, x: usize, y: usize) -> u16 {
        self.depth[y * self.width() + x]
    }
}

/// Binary instance mask with a cached pixel count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    pixels: Vec<bool>,
    area: usize,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, pixels: Vec<bool>) -> Result<Self, ImageError> {
        if pixels.len() != height * width {
            return Err(ImageError::BadBufferLen {
                height,
                width,
                expect: height * width,
                got: pixels.len(),
            });
        }
        let area = pixels.iter().filter(|p| **p).count();
        Ok(Self { height, width, pixels, area })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![false; height * width],
            area: 0,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut pixels = vec![false; height * width];
        let mut area = 0;
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                pixels[y * width + x] = v;
                area += v as usize;
            }
        }
        Self { height, width, pixels, area }
    }

    /// (H, W)
    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn area(&self) -> usize {
        self.area
    }

    pub fn is_empty(&self) -> bool {
        self.area == 0
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.pixels[y * self.width + x]
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    /// Row-major indices of all true pixels.
    pub fn true_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.pixels
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.then_some(i))
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> usize {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    /// Pixel IoU between two masks of the same size; 0 when either is empty.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area + other.area - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Tight bounding box `(x0, y0, x1, y1)` inclusive, or None for an empty mask.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        if self.area == 0 {
            return None;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (self.width, self.height, 0usize, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.pixels[y * self.width + x] {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        Some((x0, y0, x1, y1))
    }

    pub fn union_with(&self, other: &BinaryMask) -> BinaryMask {
        let pixels: Vec<bool> = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| *a || *b)
            .collect();
        BinaryMask::new(self.height, self.width, pixels).expect("same size")
    }
}

/// One support exemplar: an RGB image plus the mask of the target object.
#[derive(Debug, Clone)]
pub struct SupportShot {
    pub rgb: RgbImage,
    pub mask: BinaryMask,
}

impl SupportShot {
    pub fn new(rgb: RgbImage, mask: BinaryMask) -> Result<Self, ImageError> {
        if (mask.height(), mask.width()) != (rgb.height(), rgb.width()) {
            return Err(ImageError::SizeMismatch {
                mask_h: mask.height(),
                mask_w: mask.width(),
                image_h: rgb.height(),
                image_w: rgb.width(),
            });
        }
        Ok(Self { rgb, mask })
    }
}

/// The k exemplars defining the target class at inference time.
#[derive(Debug, Clone)]
pub struct SupportSet {
    shots: Vec<SupportShot>,
    /// Class label, known only in benchmark settings.
    pub class_id: Option<u32>,
}

impl SupportSet {
    pub fn new(shots: Vec<SupportShot>, class_id: Option<u32>) -> Result<Self, ImageError> {
        if shots.is_empty() {
            return Err(ImageError::EmptySupport);
        }
        for (index, shot) in shots.iter().enumerate() {
            if shot.mask.is_empty() {
                return Err(ImageError::EmptyShotMask { index });
            }
        }
        Ok(Self { shots, class_id })
    }

    pub fn shots(&self) -> &[SupportShot] {
        &self.shots
    }

    pub fn k(&self) -> usize {
        self.shots.len()
    }
}
