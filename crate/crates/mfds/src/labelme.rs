//! LabelMe per-image annotation files to COCO records.

use std::path::{Path, PathBuf};

use mfds_core::data::{AnnotatedImage, Schema};
use serde::{Deserialize, Serialize};

use crate::coco::{to_coco, CocoFile};
use crate::error::{io, Error, Result};

#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LabelmeFile {
    pub shapes: Vec<LabelmeShape>,
    pub image_path: String,
    pub image_width: usize,
    pub image_height: usize,
}

#[derive(Clone, Debug, Deserialize)]
pub struct LabelmeShape {
    pub label: String,
    pub points: Vec<[f64; 2]>,
    #[serde(default = "polygon")]
    pub shape_type: String,
}

fn polygon() -> String {
    "polygon".into()
}

/// A shape that did not become a box.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Reject {
    pub file: PathBuf,
    pub label: String,
    pub reason: String,
}

/// Axis-aligned bounds of `points` as `xyxy`.
pub fn bounding_box(points: &[[f64; 2]]) -> Option<[f64; 4]> {
    if points.is_empty() || points.iter().flatten().any(|v| !v.is_finite()) {
        return None;
    }
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for p in points {
        b = [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])];
    }
    Some(b)
}

/// Boxes of one LabelMe file; unknown labels and unusable shapes go to `rejects`.
pub fn convert_file(file: &LabelmeFile, source: &Path, id: u64, schema: &Schema, rejects: &mut Vec<Reject>) -> AnnotatedImage {
    let mut img = AnnotatedImage {
        id,
        file_name: file.image_path.clone(),
        width: file.image_width,
        height: file.image_height,
        classes: Vec::new(),
        boxes: Vec::new(),
    };
    let mut reject = |label: &str, reason: String| {
        rejects.push(Reject {
            file: source.to_path_buf(),
            label: label.to_string(),
            reason,
        })
    };
    for shape in &file.shapes {
        let Some(class) = schema.class_id(&shape.label) else {
            reject(&shape.label, format!("label not in the {} schema", schema.name));
            continue;
        };
        let needed = match shape.shape_type.as_str() {
            "rectangle" => 2,
            "polygon" => 3,
            other => {
                reject(&shape.label, format!("unsupported shape type `{other}`"));
                continue;
            }
        };
        if shape.points.len() < needed {
            reject(&shape.label, format!("{} needs at least {needed} points", shape.shape_type));
            continue;
        }
        let (w, h) = (file.image_width as f64, file.image_height as f64);
        match bounding_box(&shape.points) {
            Some(b) => {
                let b = [b[0].clamp(0.0, w), b[1].clamp(0.0, h), b[2].clamp(0.0, w), b[3].clamp(0.0, h)];
                if b[0] < b[2] && b[1] < b[3] {
                    img.classes.push(class);
                    img.boxes.push(b);
                } else {
                    reject(&shape.label, "zero-area box".into());
                }
            }
            None => reject(&shape.label, "non-finite points".into()),
        }
    }
    img
}

/// Converts every `*.json` in `dir` (sorted by name, ids from 1).
pub fn convert_labelme(dir: &Path, schema: &Schema) -> Result<(CocoFile, Vec<Reject>)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")))
        .collect();
    files.sort();
    let mut images = Vec::with_capacity(files.len());
    let mut rejects = Vec::new();
    for (i, path) in files.iter().enumerate() {
        let text = std::fs::read_to_string(path).map_err(io(path))?;
        let file: LabelmeFile = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.clone(), source })?;
        images.push(convert_file(&file, path, i as u64 + 1, schema, &mut rejects));
    }
    Ok((to_coco(&images, schema), rejects))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(shapes: &str) -> LabelmeFile {
        serde_json::from_str(&format!(r#"{{"shapes":{shapes},"imagePath":"x.jpg","imageWidth":300,"imageHeight":300}}"#)).unwrap()
    }

    #[test]
    fn rectangle_maps_directly() {
        let f = file(r#"[{"label":"NEU","points":[[110,220],[10,20]],"shape_type":"rectangle"}]"#);
        let mut rejects = Vec::new();
        let img = convert_file(&f, Path::new("a.json"), 1, &Schema::wbcdd(), &mut rejects);
        assert_eq!(img.boxes, vec![[10.0, 20.0, 110.0, 220.0]]);
        assert!(rejects.is_empty());
    }

    #[test]
    fn polygon_maps_to_its_bounds() {
        let f = file(r#"[{"label":"neu","points":[[0,0],[10,0],[0,10]],"shape_type":"polygon"}]"#);
        let mut rejects = Vec::new();
        let img = convert_file(&f, Path::new("a.json"), 1, &Schema::wbcdd(), &mut rejects);
        assert_eq!(img.boxes, vec![[0.0, 0.0, 10.0, 10.0]]);
        assert_eq!(img.classes, vec![Schema::wbcdd().class_id("NEU").unwrap()]);
    }

    #[test]
    fn unknown_labels_are_reported() {
        let f = file(r#"[{"label":"blast","points":[[0,0],[10,10]],"shape_type":"rectangle"},{"label":"MON","points":[[1,1]],"shape_type":"point"}]"#);
        let mut rejects = Vec::new();
        let img = convert_file(&f, Path::new("a.json"), 1, &Schema::wbcdd(), &mut rejects);
        assert!(img.boxes.is_empty());
        assert_eq!(rejects.len(), 2);
        assert_eq!(rejects[0].label, "blast");
    }
}
