use std::path::Path;
use std::process::{Command, Output};

fn mfds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfds")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mfds(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir.join("images")).unwrap().map(|e| e.unwrap().path()).collect();
    files.push(dir.join("annotations.json"));
    files.push(dir.join("config.toml"));
    files.sort();
    files.iter().map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(p).unwrap())).collect()
}

#[test]
fn make_synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["make-synth", "--seed", "11", "--n", "20", "--out", a.to_str().unwrap()]);
    ok(&["make-synth", "--seed", "11", "--n", "20", "--out", b.to_str().unwrap()]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 22);
    assert!(ta == tb, "outputs differ");
    let coco: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("annotations.json")).unwrap()).unwrap();
    assert_eq!(coco["images"].as_array().unwrap().len(), 20);
    assert_eq!(coco["categories"].as_array().unwrap().len(), 3);
}

#[test]
fn train_eval_infer_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    ok(&["make-synth", "--seed", "2", "--n", "4", "--out", d]);
    let config = dir.path().join("config.toml");
    let config = config.to_str().unwrap();
    let small = [
        "--set", "model.d_model=16", "--set", "model.d_ffn=32", "--set", "model.num_queries=8", "--set", "model.attn.heads=2",
        "--set", "model.dec.layers=2", "--set", "train.epochs=1", "--set", "train.max_iterations=0",
    ];
    let mut args = vec!["train", "--config", config];
    args.extend(small);
    let out = ok(&args);
    assert!(out.contains("epoch 1"), "{out}");
    let ckpt = dir.path().join("out/checkpoints/last.safetensors");
    assert!(ckpt.is_file());
    let ckpt = ckpt.to_str().unwrap();

    let mut args = vec!["eval", "--config", config, "--ckpt", ckpt];
    args.extend(small);
    let report: serde_json::Value = serde_json::from_str(&ok(&args)).unwrap();
    assert!(report["AP50"].as_f64().unwrap() >= 0.0);

    let images = dir.path().join("images");
    let ann = dir.path().join("annotations.json");
    let mut args = vec!["infer", "--config", config, "--ckpt", ckpt, "--images", images.to_str().unwrap(), "--threshold", "0.3", "--annotations", ann.to_str().unwrap()];
    args.extend(small);
    ok(&args);
    assert!(dir.path().join("out/overlays/synth_0001.png").is_file());
    assert!(dir.path().join("out/overlays/detections.json").is_file());

    // a model of another width cannot load the checkpoint
    let out = mfds(&["eval", "--config", config, "--ckpt", ckpt]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("checkpoint") && err.contains("shape"), "{err}");
}

#[test]
fn convert_labelme_writes_coco_and_rejects() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("lm");
    std::fs::create_dir(&src).unwrap();
    std::fs::write(
        src.join("x.json"),
        r#"{"imagePath": "x.jpg", "imageWidth": 100, "imageHeight": 80, "shapes": [
            {"label": "WBC", "points": [[10, 10], [40, 30]], "shape_type": "rectangle"},
            {"label": "XYZ", "points": [[1, 1], [2, 2]], "shape_type": "rectangle"}]}"#,
    )
    .unwrap();
    let out = dir.path().join("coco.json");
    ok(&["convert-labelme", "--in", src.to_str().unwrap(), "--out", out.to_str().unwrap(), "--schema", "bccd"]);
    let coco: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(coco["annotations"].as_array().unwrap().len(), 1);
    let rejects: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("coco.rejects.json")).unwrap()).unwrap();
    assert_eq!(rejects.as_array().unwrap().len(), 1);
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let out = mfds(&["eval", "--config", "/nonexistent/run.toml", "--ckpt", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
    let out = mfds(&["convert-labelme", "--in", ".", "--out", "/tmp/never.json", "--schema", "nope"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}
