//! COCO-style annotation files: `images`, `annotations` and `categories`
//! arrays with `[x, y, w, h]` pixel boxes.

use std::path::{Path, PathBuf};

use mfds_core::data::{AnnotatedImage, Schema};
use serde::{Deserialize, Serialize};

use crate::error::{io, Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

/// What the loader dropped or could not find.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LoadReport {
    /// Zero-area or non-finite boxes.
    pub dropped_degenerate: usize,
    /// Boxes reaching outside their image, clipped to it.
    pub clipped: usize,
    /// Annotations whose image id is not listed.
    pub orphaned: usize,
}

pub fn read_coco(path: &Path) -> Result<CocoFile> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

pub fn write_coco(path: &Path, coco: &CocoFile) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let text = serde_json::to_string_pretty(coco).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    std::fs::write(path, text).map_err(io(path))
}

/// Converts parsed COCO records to annotated images sorted by id. Categories
/// are matched to the schema by name, case-insensitively.
pub fn from_coco(coco: &CocoFile, schema: &Schema) -> Result<(Vec<AnnotatedImage>, LoadReport)> {
    let mut class_of = std::collections::HashMap::new();
    for cat in &coco.categories {
        let Some(c) = schema.class_id(&cat.name) else {
            return Err(Error::Dataset(format!("category `{}` is not in the {} schema {:?}", cat.name, schema.name, schema.classes)));
        };
        class_of.insert(cat.id, c);
    }
    let mut images: Vec<AnnotatedImage> = coco
        .images
        .iter()
        .map(|im| AnnotatedImage {
            id: im.id,
            file_name: im.file_name.clone(),
            width: im.width,
            height: im.height,
            classes: Vec::new(),
            boxes: Vec::new(),
        })
        .collect();
    images.sort_by_key(|a| a.id);
    for w in images.windows(2) {
        if w[0].id == w[1].id {
            return Err(Error::Dataset(format!("image id {} appears twice", w[0].id)));
        }
    }
    let mut report = LoadReport::default();
    for ann in &coco.annotations {
        let Ok(slot) = images.binary_search_by_key(&ann.image_id, |a| a.id) else {
            report.orphaned += 1;
            continue;
        };
        let Some(&class) = class_of.get(&ann.category_id) else {
            return Err(Error::Dataset(format!("annotation {} uses unknown category id {}", ann.id, ann.category_id)));
        };
        let img = &mut images[slot];
        let [x, y, w, h] = ann.bbox;
        if !(ann.bbox.iter().all(|v| v.is_finite()) && w > 0.0 && h > 0.0) {
            report.dropped_degenerate += 1;
            continue;
        }
        let (iw, ih) = (img.width as f64, img.height as f64);
        let b = [x, y, x + w, y + h];
        let c = [b[0].clamp(0.0, iw), b[1].clamp(0.0, ih), b[2].clamp(0.0, iw), b[3].clamp(0.0, ih)];
        if c != b {
            report.clipped += 1;
        }
        if !(c[0] < c[2] && c[1] < c[3]) {
            report.dropped_degenerate += 1;
            continue;
        }
        img.classes.push(class);
        img.boxes.push(c);
    }
    if report.dropped_degenerate > 0 {
        log::warn!("dropped {} degenerate boxes", report.dropped_degenerate);
    }
    if report.clipped > 0 {
        log::warn!("clipped {} boxes to their image", report.clipped);
    }
    Ok((images, report))
}

pub fn load_coco(path: &Path, schema: &Schema) -> Result<(Vec<AnnotatedImage>, LoadReport)> {
    from_coco(&read_coco(path)?, schema)
}

/// COCO records for `images`; category ids are schema indices plus one.
pub fn to_coco(images: &[AnnotatedImage], schema: &Schema) -> CocoFile {
    let mut out = CocoFile {
        categories: schema
            .classes
            .iter()
            .enumerate()
            .map(|(i, name)| CocoCategory { id: i as u64 + 1, name: name.clone() })
            .collect(),
        ..CocoFile::default()
    };
    let mut next = 1;
    for im in images {
        out.images.push(CocoImage {
            id: im.id,
            file_name: im.file_name.clone(),
            width: im.width,
            height: im.height,
        });
        for (&c, b) in im.classes.iter().zip(&im.boxes) {
            let (w, h) = (b[2] - b[0], b[3] - b[1]);
            out.annotations.push(CocoAnnotation {
                id: next,
                image_id: im.id,
                category_id: c as u64 + 1,
                bbox: [b[0], b[1], w, h],
                area: w * h,
                iscrowd: 0,
            });
            next += 1;
        }
    }
    out
}

/// Images whose file is missing under `dir`, as `(id, path)`.
pub fn missing_images(images: &[AnnotatedImage], dir: &Path) -> Vec<(u64, PathBuf)> {
    images.iter().map(|a| (a.id, dir.join(&a.file_name))).filter(|(_, p)| !p.is_file()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> CocoFile {
        serde_json::from_str(
            r#"{"images":[{"id":3,"file_name":"a.png","width":100,"height":80}],
                "annotations":[{"id":1,"image_id":3,"category_id":7,"bbox":[10,20,30,40]}],
                "categories":[{"id":7,"name":"neu"}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn minimal_fixture() {
        let (imgs, report) = from_coco(&fixture(), &Schema::wbcdd()).unwrap();
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].boxes, vec![[10.0, 20.0, 40.0, 60.0]]);
        assert_eq!(imgs[0].classes, vec![4]);
        assert_eq!(report, LoadReport::default());
    }

    #[test]
    fn zero_width_box_is_dropped() {
        let mut c = fixture();
        let mut bad = c.annotations[0].clone();
        bad.id = 2;
        bad.bbox = [5.0, 5.0, 0.0, 10.0];
        c.annotations.push(bad);
        let (imgs, report) = from_coco(&c, &Schema::wbcdd()).unwrap();
        assert_eq!(imgs[0].boxes.len(), 1);
        assert_eq!(report.dropped_degenerate, 1);
    }

    #[test]
    fn unknown_category_is_an_error() {
        let mut c = fixture();
        c.categories[0].name = "blast".into();
        assert!(from_coco(&c, &Schema::wbcdd()).is_err());
    }

    #[test]
    fn export_then_import_is_exact() {
        let (imgs, _) = from_coco(&fixture(), &Schema::wbcdd()).unwrap();
        let mut imgs = imgs;
        imgs[0].boxes.push([0.1, 0.2, 99.7, 79.3]);
        imgs[0].classes.push(0);
        let (back, _) = from_coco(&to_coco(&imgs, &Schema::wbcdd()), &Schema::wbcdd()).unwrap();
        assert_eq!(back, imgs);
    }
}
