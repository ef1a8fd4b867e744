//! Datasets held in memory, and the synthetic dataset on disk.

use std::path::{Path, PathBuf};

use mfds_core::data::{AnnotatedImage, RgbImage, Schema};
use mfds_core::synth::make_synthetic;

use crate::coco::{load_coco, to_coco, write_coco, LoadReport};
use crate::config::{DataConfig, RunConfig};
use crate::error::Result;
use crate::imageio::{read_rgb, resize_pair, write_png};

/// Images whose pixels could not be read, with the reason.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemError {
    pub id: u64,
    pub path: PathBuf,
    pub message: String,
}

pub struct Dataset {
    pub schema: Schema,
    /// Sorted by image id.
    pub items: Vec<(RgbImage, AnnotatedImage)>,
    /// Original `(width, height)` of each item before resizing.
    pub original_sizes: Vec<(usize, usize)>,
    pub report: LoadReport,
    pub errors: Vec<ItemError>,
}

impl Dataset {
    /// Loads annotations and pixels; unreadable images are skipped and listed in `errors`.
    pub fn load(annotations: &Path, images: &Path, schema: &Schema, data: &DataConfig) -> Result<Self> {
        let (anns, report) = load_coco(annotations, schema)?;
        let mut items = Vec::with_capacity(anns.len());
        let mut original_sizes = Vec::with_capacity(anns.len());
        let mut errors = Vec::new();
        for ann in anns {
            let path = images.join(&ann.file_name);
            let img = match read_rgb(&path) {
                Ok(img) => img,
                Err(e) => {
                    log::error!("image {} ({}): {e}", ann.id, path.display());
                    errors.push(ItemError { id: ann.id, path, message: e.to_string() });
                    continue;
                }
            };
            let mut ann = ann;
            if (img.width, img.height) != (ann.width, ann.height) {
                log::warn!("image {}: file is {}x{}, annotations say {}x{}; boxes rescaled", ann.id, img.width, img.height, ann.width, ann.height);
                ann = ann.rescaled(img.width, img.height);
            }
            ann.validate(schema.len())?;
            original_sizes.push((img.width, img.height));
            items.push(if data.resize { resize_pair(&img, &ann, data.short_side, data.max_side) } else { (img, ann) });
        }
        Ok(Self {
            schema: schema.clone(),
            items,
            original_sizes,
            report,
            errors,
        })
    }

    pub fn train(config: &RunConfig) -> Result<Self> {
        Self::load(&config.data.train_annotations, &config.data.train_images, &config.schema()?, &config.data)
    }

    pub fn test(config: &RunConfig) -> Result<Self> {
        Self::load(&config.data.test_annotations, &config.data.test_images, &config.schema()?, &config.data)
    }

    pub fn annotations(&self) -> Vec<AnnotatedImage> {
        self.items.iter().map(|(_, a)| a.clone()).collect()
    }
}

/// Writes `images/*.png`, `annotations.json` and a ready-to-train `config.toml`
/// under `dir`.
pub fn write_synthetic(dir: &Path, seed: u64, n: usize, classes: usize) -> Result<()> {
    let data = make_synthetic(seed, n, classes)?;
    for (img, ann) in &data {
        write_png(&dir.join("images").join(&ann.file_name), img)?;
    }
    let anns: Vec<AnnotatedImage> = data.into_iter().map(|(_, a)| a).collect();
    write_coco(&dir.join("annotations.json"), &to_coco(&anns, &Schema::synthetic(classes)))?;
    let mut config = RunConfig::synthetic(Path::new(""));
    if classes != 3 {
        config.data.schema = format!("synthetic:{classes}");
    }
    config.model.num_classes = classes;
    config.train.seed = seed;
    config.save(&dir.join("config.toml"))
}
