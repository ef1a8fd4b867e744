//! Class schemas, annotated images, batching and flip augmentation.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::{ImageBatch, PIXEL_MEAN, PIXEL_STD};
use crate::boxes::{BoxSet, Xyxy};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Ordered class names of a dataset; class ids index this list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub name: String,
    pub classes: Vec<String>,
}

fn schema(name: &str, classes: &[&str]) -> Schema {
    let mut classes: Vec<String> = classes.iter().map(|c| c.to_string()).collect();
    classes.sort_by_key(|c| c.to_ascii_lowercase());
    Schema {
        name: name.to_string(),
        classes,
    }
}

impl Schema {
    pub fn wbcdd() -> Self {
        schema("wbcdd", &["NEU", "EOS", "MON", "BAS", "LYM"])
    }

    pub fn lisc() -> Self {
        schema("lisc", &["NEU", "EOS", "MON", "BAS", "LYM"])
    }

    pub fn bccd() -> Self {
        schema("bccd", &["RBC", "WBC", "Platelets"])
    }

    /// `disc0`, `disc1`, ... for the synthetic dataset.
    pub fn synthetic(classes: usize) -> Self {
        Schema {
            name: "synthetic".to_string(),
            classes: (0..classes).map(|i| alloc::format!("disc{i}")).collect(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "wbcdd" => Ok(Self::wbcdd()),
            "lisc" => Ok(Self::lisc()),
            "bccd" => Ok(Self::bccd()),
            "synthetic" => Ok(Self::synthetic(3)),
            other => match other.strip_prefix("synthetic:").map(|n| n.parse::<usize>()) {
                Some(Ok(n)) if n > 0 => Ok(Self::synthetic(n)),
                _ => bail!(Config, "unknown schema `{other}` (expected wbcdd, lisc, bccd, synthetic or synthetic:<classes>)"),
            },
        }
    }

    /// Case-insensitive lookup of a label.
    pub fn class_id(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.eq_ignore_ascii_case(label.trim()))
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// 8-bit interleaved RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            bail!(Shape, "{} bytes for a {width}x{height} RGB image", data.len());
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.put(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }
}

/// Annotations of one image; boxes are pixel `xyxy`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub classes: Vec<usize>,
    pub boxes: Vec<Xyxy>,
}

impl AnnotatedImage {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.classes.len() != self.boxes.len() {
            bail!(Shape, "image {}: {} classes for {} boxes", self.id, self.classes.len(), self.boxes.len());
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for (c, b) in self.classes.iter().zip(&self.boxes) {
            if *c >= num_classes {
                bail!(Validation, "image {}: class {c} outside {num_classes} classes", self.id);
            }
            let ok = b.iter().all(|v| v.is_finite()) && 0.0 <= b[0] && b[0] < b[2] && b[2] <= w && 0.0 <= b[1] && b[1] < b[3] && b[3] <= h;
            if !ok {
                bail!(Validation, "image {}: box {b:?} outside a {w}x{h} image or degenerate", self.id);
            }
        }
        Ok(())
    }

    /// Boxes as normalized `cxcywh` relative to the true image size.
    pub fn normalized(&self) -> Result<BoxSet> {
        let (w, h) = (self.width as f64, self.height as f64);
        let boxes = self.boxes.iter().map(|b| [(b[0] + b[2]) / (2.0 * w), (b[1] + b[3]) / (2.0 * h), (b[2] - b[0]) / w, (b[3] - b[1]) / h]).collect();
        BoxSet::new(self.classes.clone(), boxes)
    }

    pub fn hflip(&self) -> Self {
        let w = self.width as f64;
        let mut out = self.clone();
        for b in &mut out.boxes {
            *b = [w - b[2], b[1], w - b[0], b[3]];
        }
        out
    }

    /// Scales the image and its boxes by `(sx, sy)` to a `width × height` canvas.
    pub fn rescaled(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let mut out = self.clone();
        out.width = width;
        out.height = height;
        for b in &mut out.boxes {
            *b = [b[0] * sx, b[1] * sy, (b[2] * sx).min(width as f64), (b[3] * sy).min(height as f64)];
        }
        out
    }
}

/// Normalized `cxcywh` back to pixel `xyxy` on a `width × height` image.
pub fn denormalize(b: [f64; 4], width: usize, height: usize) -> Xyxy {
    let (w, h) = (width as f64, height as f64);
    [(b[0] - 0.5 * b[2]) * w, (b[1] - 0.5 * b[3]) * h, (b[0] + 0.5 * b[2]) * w, (b[1] + 0.5 * b[3]) * h]
}

/// Instances per class.
pub fn class_counts(images: &[AnnotatedImage], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for c in images.iter().flat_map(|a| &a.classes) {
        if *c < num_classes {
            counts[*c] += 1;
        }
    }
    counts
}

/// Shorter side to `short`, longer side capped at `cap`, aspect preserved.
pub fn resize_extent(width: usize, height: usize, short: usize, cap: usize) -> (usize, usize) {
    let (s, l) = (width.min(height) as f64, width.max(height) as f64);
    let mut scale = short as f64 / s;
    if l * scale > cap as f64 {
        scale = cap as f64 / l;
    }
    let r = |v: usize| crate::math::round(v as f64 * scale).max(1.0) as usize;
    (r(width), r(height))
}

/// Pads images to the elementwise maximum size, normalizes pixels per channel,
/// and marks padding in the mask. Targets are normalized by each image's own size.
pub fn batch(items: &[(&RgbImage, &AnnotatedImage)]) -> Result<(ImageBatch, Vec<BoxSet>)> {
    if items.is_empty() {
        bail!(Validation, "cannot batch zero images");
    }
    for (img, ann) in items {
        if img.width != ann.width || img.height != ann.height {
            bail!(Shape, "image {} is {}x{} but annotated as {}x{}", ann.id, img.width, img.height, ann.width, ann.height);
        }
    }
    let h = items.iter().map(|i| i.0.height).max().unwrap_or(0);
    let w = items.iter().map(|i| i.0.width).max().unwrap_or(0);
    let b = items.len();
    let mut pixels = vec![0.0; b * 3 * h * w];
    let mut mask = vec![true; b * h * w];
    let mut targets = Vec::with_capacity(b);
    for (n, (img, ann)) in items.iter().enumerate() {
        for y in 0..img.height {
            for x in 0..img.width {
                let p = img.pixel(x, y);
                for c in 0..3 {
                    pixels[((n * 3 + c) * h + y) * w + x] = (p[c] as f64 / 255.0 - PIXEL_MEAN[c]) / PIXEL_STD[c];
                }
                mask[(n * h + y) * w + x] = false;
            }
        }
        targets.push(ann.normalized()?);
    }
    Ok((ImageBatch::new(Tensor::from_vec(&[b, 3, h, w], pixels), mask)?, targets))
}
