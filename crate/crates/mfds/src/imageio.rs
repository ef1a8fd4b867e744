//! Image files to and from [`RgbImage`].

use std::path::Path;

use image::imageops::FilterType;
use mfds_core::data::{resize_extent, AnnotatedImage, RgbImage};

use crate::error::{io, Error, Result};

pub const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage::new(w as usize, h as usize, img.into_raw())?)
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    image::save_buffer_with_format(path, &img.data, img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn resize(img: &RgbImage, width: usize, height: usize) -> RgbImage {
    if (img.width, img.height) == (width, height) {
        return img.clone();
    }
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone()).expect("buffer matches its size");
    let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    RgbImage {
        width,
        height,
        data: out.into_raw(),
    }
}

/// Applies the shorter-side/longer-side cap policy to an image and its boxes.
pub fn resize_pair(img: &RgbImage, ann: &AnnotatedImage, short: usize, cap: usize) -> (RgbImage, AnnotatedImage) {
    let (w, h) = resize_extent(img.width, img.height, short, cap);
    (resize(img, w, h), ann.rescaled(w, h))
}

pub fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}
