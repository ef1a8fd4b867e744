mod common;

use common::tiny_run;
use mfds::checkpoint::Checkpoint;
use mfds::dataset::Dataset;
use mfds::imageio::read_rgb;
use mfds::runner::{self, checkpoints_dir, overlays_dir, reports_dir};
use mfds::Error;

#[test]
fn identical_seeds_give_identical_losses() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut ca = tiny_run(a.path(), 4, 3);
    let mut cb = tiny_run(b.path(), 4, 3);
    ca.train.epochs = 1;
    cb.train.epochs = 1;
    let ra = runner::train(&ca, None).unwrap();
    let rb = runner::train(&cb, None).unwrap();
    assert_eq!(ra.step_losses, rb.step_losses);
    assert_eq!(ra.epochs[0].loss, rb.epochs[0].loss);
    // the embedded configs differ in their output paths, the weights must not
    let params = |c: &mfds::config::RunConfig| Checkpoint::load(&checkpoints_dir(c).join("last.safetensors")).unwrap().params;
    assert_eq!(params(&ca), params(&cb));
}

#[test]
fn resume_continues_at_the_next_epoch() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut full = tiny_run(a.path(), 4, 5);
    full.train.epochs = 4;
    let straight = runner::train(&full, None).unwrap();

    let mut part = tiny_run(b.path(), 4, 5);
    part.train.epochs = 2;
    let first = runner::train(&part, None).unwrap();
    assert_eq!(first.epochs.last().unwrap().epoch, 2);
    let ckpt = Checkpoint::load(&first.checkpoint).unwrap();
    assert_eq!((ckpt.meta.epoch, ckpt.meta.iteration), (2, 4));

    part.train.epochs = 4;
    let resumed = runner::train(&part, Some(&first.checkpoint)).unwrap();
    assert_eq!(resumed.epochs[0].epoch, 3);
    assert_eq!(resumed.iteration, straight.iteration);
    let (x, y) = (resumed.epochs[0].loss, straight.epochs[2].loss);
    assert!((x - y).abs() <= 0.1 * y, "resumed {x} vs uninterrupted {y}");
    let log = std::fs::read_to_string(reports_dir(&part).join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn untrained_model_scores_near_zero_with_schema_keys() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_run(dir.path(), 4, 1);
    c.train.epochs = 0;
    let s = runner::train(&c, None).unwrap();
    assert!(s.epochs.is_empty());
    let r = runner::evaluate(&c, &s.checkpoint).unwrap();
    assert!(r.ap < 0.05, "AP {}", r.ap);
    assert_eq!(r.images, 4);
    let keys: Vec<&String> = r.per_class.keys().collect();
    assert_eq!(keys, ["disc0", "disc1", "disc2"]);
    let written: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(reports_dir(&c).join("eval.json")).unwrap()).unwrap();
    for key in ["AP", "AP50", "AP75", "per_class", "per_class_AP50"] {
        assert!(written.get(key).is_some(), "{key}");
    }
}

#[test]
fn overlay_above_every_score_is_the_original_image() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_run(dir.path(), 3, 2);
    c.train.epochs = 1;
    let s = runner::train(&c, None).unwrap();
    let images = dir.path().join("images");
    let summary = runner::infer(&c, &s.checkpoint, &images, 1.1, None).unwrap();
    assert_eq!(summary.images.len(), 3);
    assert!(summary.errors.is_empty());
    for im in &summary.images {
        assert!(im.detections.is_empty());
        let stem = im.file.trim_end_matches(".png");
        let drawn = read_rgb(&overlays_dir(&c).join(format!("{stem}.png"))).unwrap();
        let original = read_rgb(&images.join(&im.file)).unwrap();
        assert_eq!(drawn, original);
    }
    // a low threshold draws exactly the listed detections
    let summary = runner::infer(&c, &s.checkpoint, &images, 0.0, None).unwrap();
    let written: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(overlays_dir(&c).join("detections.json")).unwrap()).unwrap();
    for (im, w) in summary.images.iter().zip(written["images"].as_array().unwrap()) {
        assert_eq!(im.detections.len(), 100.min(c.model.num_queries * 3));
        assert_eq!(w["detections"].as_array().unwrap().len(), im.detections.len());
    }
    assert!(overlays_dir(&c).join("legend.json").is_file());
}

#[test]
fn infer_continues_past_unreadable_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_run(dir.path(), 2, 2);
    c.train.epochs = 0;
    let s = runner::train(&c, None).unwrap();
    let images = dir.path().join("images");
    std::fs::write(images.join("broken.png"), b"not a png").unwrap();
    let summary = runner::infer(&c, &s.checkpoint, &images, 0.5, None).unwrap();
    assert_eq!(summary.images.len(), 2);
    assert_eq!(summary.errors.len(), 1);
    assert_eq!(summary.errors[0].0, "broken.png");
}

#[test]
fn incompatible_checkpoint_lists_mismatched_keys() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_run(dir.path(), 2, 1);
    c.train.epochs = 0;
    let s = runner::train(&c, None).unwrap();
    let mut wider = c.clone();
    wider.model.d_model = 32;
    let err = runner::load_model(&wider, &s.checkpoint).unwrap_err();
    let Error::Checkpoint(msg) = err else { panic!("{err}") };
    assert!(msg.contains("class_embed.weight"), "{msg}");
    assert!(msg.contains("query_embed"), "{msg}");
}

#[test]
fn divergence_writes_a_dump_and_stops() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_run(dir.path(), 4, 1);
    c.optim.lr_backbone = 1e300;
    c.optim.lr_fpn = 1e300;
    c.optim.lr_transformer = 1e300;
    let err = runner::train(&c, None).unwrap_err();
    assert!(matches!(err, Error::Training(_)), "{err}");
    let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(reports_dir(&c).join("nan_dump.json")).unwrap()).unwrap();
    assert!(!dump["image_ids"].as_array().unwrap().is_empty());
}

#[test]
fn unreadable_images_are_skipped_and_listed() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_run(dir.path(), 3, 4);
    std::fs::remove_file(dir.path().join("images/synth_0002.png")).unwrap();
    let data = Dataset::train(&c).unwrap();
    assert_eq!(data.items.len(), 2);
    assert_eq!(data.errors.len(), 1);
    assert_eq!(data.errors[0].id, 2);
}
