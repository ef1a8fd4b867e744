//! The `train`, `eval` and `infer` workflows.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mfds_core::data::{batch, class_counts, AnnotatedImage, RgbImage, Schema};
use mfds_core::eval::{average_precision, Detection, ImageTruth, Metrics};
use mfds_core::loss::{resolve_alpha, LossBreakdown};
use mfds_core::model::Detector;
use mfds_core::optim::{step_decay, AdamW};
use mfds_core::train::{predict, train_step};
use mfds_core::ParamStore;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::coco::load_coco;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{io, Error, Result};
use crate::imageio::{is_image, read_rgb, resize, write_png};
use crate::overlay::{legend, render};

pub fn checkpoints_dir(config: &RunConfig) -> PathBuf {
    config.output.join("checkpoints")
}

pub fn reports_dir(config: &RunConfig) -> PathBuf {
    config.output.join("reports")
}

pub fn overlays_dir(config: &RunConfig) -> PathBuf {
    config.output.join("overlays")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    std::fs::write(path, text).map_err(io(path))
}

/// Mean loss terms of one epoch, as logged.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub iterations: usize,
    pub loss: f64,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub lr_scale: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    pub epochs: Vec<EpochLog>,
    /// Loss of every optimizer step in order.
    pub step_losses: Vec<f64>,
    pub iteration: usize,
    pub checkpoint: PathBuf,
}

fn epoch_order(seed: u64, epoch: usize, n: usize, hflip: bool) -> Vec<(usize, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.into_iter().map(|i| (i, hflip && rng.random_bool(0.5))).collect()
}

fn build(config: &RunConfig) -> Result<(ParamStore, Detector)> {
    let mut store = ParamStore::new();
    let det = Detector::new(&mut store, config.train.seed, &config.model)?;
    Ok((store, det))
}

/// Trains from scratch or from `resume`, writing checkpoints and logs under
/// the output directory.
pub fn train(config: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    let data = Dataset::train(config)?;
    train_on(config, &data, resume)
}

pub fn train_on(config: &RunConfig, data: &Dataset, resume: Option<&Path>) -> Result<TrainSummary> {
    if data.items.is_empty() {
        return Err(Error::Dataset("training set has no readable images".into()));
    }
    let (mut store, det) = build(config)?;
    let mut opt = AdamW::new(config.optim.clone());
    let counts = class_counts(&data.annotations(), config.model.num_classes);
    let alpha = resolve_alpha(&config.loss.alpha, &counts, config.model.num_classes)?;
    let hash = config.hash()?;
    let mut start_epoch = 0;
    let mut iteration = 0;
    if let Some(path) = resume {
        let ckpt = Checkpoint::load(path)?;
        ckpt.apply(&mut store)?;
        ckpt.restore_optimizer(&mut opt, &store);
        if ckpt.meta.config_hash != hash {
            log::warn!("resuming with a configuration that differs from the checkpoint's");
        }
        start_epoch = ckpt.meta.epoch;
        iteration = ckpt.meta.iteration;
        log::info!("resumed from {} after epoch {start_epoch}, iteration {iteration}", path.display());
    }
    let reports = reports_dir(config);
    std::fs::create_dir_all(&reports).map_err(io(&reports))?;
    let log_path = reports.join("train_log.jsonl");
    let mut log_file = std::fs::OpenOptions::new().create(true).append(true).open(&log_path).map_err(io(&log_path))?;
    let save = |store: &ParamStore, opt: &AdamW, epoch: usize, iteration: usize, name: &str| -> Result<PathBuf> {
        let meta = CheckpointMeta {
            epoch,
            iteration,
            seed: config.train.seed,
            config_hash: hash.clone(),
            config: config.to_toml()?,
        };
        let path = checkpoints_dir(config).join(name);
        Checkpoint::capture(store, Some(opt), meta).save(&path)?;
        Ok(path)
    };
    let limit = config.train.max_iterations;
    let mut summary = TrainSummary::default();
    let mut epoch = start_epoch;
    while epoch < config.train.epochs && (limit == 0 || iteration < limit) {
        let started = Instant::now();
        let lr_scale = step_decay(&config.optim, epoch);
        let mut sum = LossBreakdown::default();
        let (mut total, mut steps) = (0.0, 0usize);
        for chunk in epoch_order(config.train.seed, epoch, data.items.len(), config.data.hflip).chunks(config.train.batch_size) {
            if limit > 0 && iteration >= limit {
                break;
            }
            let flipped: Vec<_> = chunk
                .iter()
                .map(|&(i, flip)| {
                    let (img, ann) = &data.items[i];
                    if flip {
                        (img.hflip(), ann.hflip())
                    } else {
                        (img.clone(), ann.clone())
                    }
                })
                .collect();
            let refs: Vec<_> = flipped.iter().map(|(i, a)| (i, a)).collect();
            let (images, targets) = batch(&refs)?;
            let step_seed = config.train.seed.wrapping_add(iteration as u64);
            let report = match train_step(&det, &mut store, &mut opt, &images, &targets, &alpha, &config.loss, lr_scale, step_seed) {
                Ok(r) => r,
                Err(mfds_core::Error::Validation(msg)) if msg.contains("finite") => {
                    let ids: Vec<u64> = flipped.iter().map(|(_, a)| a.id).collect();
                    let dump = serde_json::json!({ "epoch": epoch + 1, "iteration": iteration, "image_ids": ids, "error": msg });
                    write_json(&reports.join("nan_dump.json"), &dump)?;
                    return Err(Error::Training(format!("non-finite loss at epoch {}, iteration {iteration}, images {ids:?}", epoch + 1)));
                }
                Err(e) => return Err(e.into()),
            };
            iteration += 1;
            steps += 1;
            total += report.loss;
            sum.accumulate(&report.breakdown);
            summary.step_losses.push(report.loss);
            if config.train.log_every > 0 && iteration % config.train.log_every == 0 {
                log::info!("iteration {iteration}: loss {:.4}, grad norm {:.3}", report.loss, report.grad_norm);
            }
        }
        if steps == 0 {
            break;
        }
        epoch += 1;
        let n = steps as f64;
        let entry = EpochLog {
            epoch,
            iterations: iteration,
            loss: total / n,
            class: sum.layers.iter().map(|l| l.class).sum::<f64>() / n,
            l1: sum.layers.iter().map(|l| l.l1).sum::<f64>() / n,
            giou: sum.layers.iter().map(|l| l.giou).sum::<f64>() / n,
            lr_scale,
            seconds: started.elapsed().as_secs_f64(),
        };
        writeln!(log_file, "{}", serde_json::to_string(&entry).expect("plain struct")).map_err(io(&log_path))?;
        log::info!("epoch {epoch}: loss {:.4} (class {:.4}, l1 {:.4}, giou {:.4})", entry.loss, entry.class, entry.l1, entry.giou);
        summary.epochs.push(entry);
        save(&store, &opt, epoch, iteration, "last.safetensors")?;
        if config.train.checkpoint_every > 0 && epoch % config.train.checkpoint_every == 0 {
            save(&store, &opt, epoch, iteration, &format!("epoch_{epoch:04}.safetensors"))?;
        }
        if config.train.eval_every > 0 && epoch % config.train.eval_every == 0 {
            match Dataset::test(config) {
                Ok(test) => {
                    let report = evaluate_store(config, &det, &store, &test)?;
                    log::info!("epoch {epoch}: AP {:.4}, AP50 {:.4}, AP75 {:.4}", report.ap, report.ap50, report.ap75);
                    write_json(&reports.join(format!("eval_epoch_{epoch:04}.json")), &report)?;
                }
                Err(e) => log::warn!("skipping evaluation: {e}"),
            }
        }
    }
    summary.iteration = iteration;
    summary.checkpoint = save(&store, &opt, epoch, iteration, "last.safetensors")?;
    Ok(summary)
}

/// Metrics in the table layout: aggregates plus per-class AP keyed by class name.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    /// `null` for classes without ground truth.
    pub per_class: BTreeMap<String, Option<f64>>,
    #[serde(rename = "per_class_AP50")]
    pub per_class_ap50: BTreeMap<String, Option<f64>>,
    pub images: usize,
}

impl EvalReport {
    pub fn new(m: &Metrics, schema: &Schema, images: usize) -> Self {
        let named = |v: &[Option<f64>]| schema.classes.iter().cloned().zip(v.iter().copied()).collect();
        Self {
            ap: m.ap,
            ap50: m.ap50,
            ap75: m.ap75,
            per_class: named(&m.per_class_ap),
            per_class_ap50: named(&m.per_class_ap50),
            images,
        }
    }
}

/// Detections for every item, in the coordinates of the (possibly resized) items.
pub fn detect_all(det: &Detector, store: &ParamStore, data: &Dataset, batch_size: usize) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for chunk in data.items.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().map(|(i, a)| (i, a)).collect();
        let (images, _) = batch(&refs)?;
        let ids: Vec<u64> = chunk.iter().map(|(_, a)| a.id).collect();
        let sizes: Vec<(usize, usize)> = chunk.iter().map(|(i, _)| (i.width, i.height)).collect();
        for d in predict(det, store, &images, &ids, &sizes)? {
            out.extend(d);
        }
    }
    Ok(out)
}

pub fn evaluate_store(config: &RunConfig, det: &Detector, store: &ParamStore, data: &Dataset) -> Result<EvalReport> {
    let dets = detect_all(det, store, data, config.train.batch_size)?;
    let truths: Vec<ImageTruth> = data
        .items
        .iter()
        .map(|(_, a)| ImageTruth {
            image_id: a.id,
            classes: a.classes.clone(),
            boxes: a.boxes.clone(),
        })
        .collect();
    let m = average_precision(&dets, &truths, config.model.num_classes)?;
    Ok(EvalReport::new(&m, &data.schema, data.items.len()))
}

/// Loads a model from a checkpoint; shape disagreements are errors.
pub fn load_model(config: &RunConfig, checkpoint: &Path) -> Result<(ParamStore, Detector)> {
    let (mut store, det) = build(config)?;
    Checkpoint::load(checkpoint)?.apply(&mut store)?;
    Ok((store, det))
}

/// Evaluates on the test split and writes `reports/eval.json`.
pub fn evaluate(config: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    let (store, det) = load_model(config, checkpoint)?;
    let data = Dataset::test(config)?;
    let report = evaluate_store(config, &det, &store, &data)?;
    write_json(&reports_dir(config).join("eval.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageDetections {
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub detections: Vec<NamedDetection>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NamedDetection {
    pub class: String,
    pub class_id: usize,
    pub score: f64,
    /// Pixel `[x1, y1, x2, y2]` on the original image.
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct InferSummary {
    pub images: Vec<ImageDetections>,
    /// `(file, message)` for images that could not be processed.
    pub errors: Vec<(String, String)>,
}

/// Runs the detector on every image in `images`, writes an overlay per image,
/// `detections.json` and `legend.json` under the overlays directory. Ground
/// truth from `truth` is drawn for images it names.
pub fn infer(config: &RunConfig, checkpoint: &Path, images: &Path, threshold: f64, truth: Option<&Path>) -> Result<InferSummary> {
    let (store, det) = load_model(config, checkpoint)?;
    let schema = config.schema()?;
    let truth: BTreeMap<String, AnnotatedImage> = match truth {
        Some(p) => load_coco(p, &schema)?.0.into_iter().map(|a| (a.file_name.clone(), a)).collect(),
        None => BTreeMap::new(),
    };
    let out = overlays_dir(config);
    std::fs::create_dir_all(&out).map_err(io(&out))?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(images)
        .map_err(io(images))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .collect();
    files.sort();
    let mut summary = InferSummary::default();
    for (k, path) in files.iter().enumerate() {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match infer_one(config, &det, &store, path, k as u64 + 1, threshold, &schema, truth.get(&name)) {
            Ok((overlay, dets)) => {
                let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                write_png(&out.join(format!("{stem}.png")), &overlay)?;
                summary.images.push(ImageDetections {
                    file: name,
                    width: overlay.width,
                    height: overlay.height,
                    detections: dets
                        .iter()
                        .map(|d| NamedDetection {
                            class: schema.classes[d.class].clone(),
                            class_id: d.class,
                            score: d.score,
                            bbox: d.bbox,
                        })
                        .collect(),
                });
            }
            Err(e) => {
                log::error!("{}: {e}", path.display());
                summary.errors.push((name, e.to_string()));
            }
        }
    }
    write_json(&out.join("detections.json"), &summary)?;
    write_json(&out.join("legend.json"), &legend(&schema))?;
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn infer_one(
    config: &RunConfig,
    det: &Detector,
    store: &ParamStore,
    path: &Path,
    id: u64,
    threshold: f64,
    schema: &Schema,
    truth: Option<&AnnotatedImage>,
) -> Result<(RgbImage, Vec<Detection>)> {
    let original = read_rgb(path)?;
    let (w, h) = if config.data.resize {
        mfds_core::data::resize_extent(original.width, original.height, config.data.short_side, config.data.max_side)
    } else {
        (original.width, original.height)
    };
    let input = resize(&original, w, h);
    let ann = AnnotatedImage {
        id,
        file_name: String::new(),
        width: w,
        height: h,
        classes: Vec::new(),
        boxes: Vec::new(),
    };
    let (images, _) = batch(&[(&input, &ann)])?;
    // boxes come back on the original canvas
    let dets = predict(det, store, &images, &[id], &[(original.width, original.height)])?.remove(0);
    let gt = truth.map(|t| t.rescaled(original.width, original.height).boxes).unwrap_or_default();
    Ok(render(&original, &dets, &gt, threshold, schema))
}
