use std::path::Path;
use std::process::{Command, Output};

use comicnet::anchors::AnchorSet;
use comicnet::data::detections::{load_jsonl, save_jsonl, DetectionRecord};
use comicnet::data::vgg::load_vgg_dataset;
use comicnet::postprocess::Detection;

fn comicnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_comicnet")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = comicnet(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, pages: &str) -> std::path::PathBuf {
    ok(&["synth", "--out", s(dir), "--pages", pages, "--seed", "3"]);
    dir.join("annotations.json")
}

#[test]
fn ground_truth_as_detections_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let ann = synth(&tmp.path().join("data"), "3");
    let ds = load_vgg_dataset(&ann, &tmp.path().join("data")).unwrap();
    let records: Vec<DetectionRecord> = ds
        .pages
        .iter()
        .flat_map(|p| {
            p.gts.iter().map(|g| {
                let d = Detection { bbox: g.bbox, label: g.label, objectness: 0.9, class_prob: 0.9, slot: None };
                DetectionRecord::new(&p.image_id, &d)
            })
        })
        .collect();
    let det = tmp.path().join("gt.jsonl");
    save_jsonl(&det, &records).unwrap();
    let csv = tmp.path().join("table.csv");
    let table = ok(&["eval", "--detections", s(&det), "--annotations", s(&ann), "--method", "truth", "--csv", s(&csv)]);
    let all = table.lines().find(|l| l.contains("(all)")).unwrap();
    assert!(all.contains("100.00"), "{table}");
    let csv = std::fs::read_to_string(csv).unwrap();
    assert!(csv.starts_with("Method,Dataset,Precision,Recall,F-measure,IoU"));
    assert!(csv.lines().last().unwrap().contains("100.00,100.00,100.00,100.00"));
}

#[test]
fn anchors_train_detect_render() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ann = synth(&data, "2");
    let anchors = tmp.path().join("anchors.json");
    ok(&["anchors", "--annotations", s(&ann), "--input-size", "64", "--out", s(&anchors)]);
    let set = AnchorSet::load(&anchors).unwrap();
    assert_eq!(set.len(), 9);
    assert!(set.all().windows(2).all(|w| w[0].area() >= w[1].area()));

    let run = tmp.path().join("run");
    ok(&[
        "train",
        "--annotations",
        s(&ann),
        "--no-split",
        "--iterations",
        "4",
        "--input-size",
        "64",
        "--width-multiplier",
        "0.0625",
        "--anchors",
        s(&anchors),
        "--checkpoint-every",
        "2",
        "--out",
        s(&run),
    ]);
    for f in ["model.ckpt", "model-000002.ckpt", "loss.csv", "anchors.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "iteration,lr,train_loss,val_loss,coord,obj,class");

    let page = data.join("synth_0000.png");
    let det = tmp.path().join("det.jsonl");
    ok(&["detect", "--checkpoint", s(&run.join("model.ckpt")), "--obj-threshold", "0", "--nms-iou", "1", "--out", s(&det), s(&page)]);
    let recs = load_jsonl(&det).unwrap();
    for r in &recs {
        assert_eq!(r.image_id, "synth_0000.png");
        assert!(r.x_min <= r.x_max && r.y_min <= r.y_max);
        assert!((0.0..=1.0).contains(&r.objectness) && (0.0..=1.0).contains(&r.class_prob));
    }

    let vis = tmp.path().join("vis");
    ok(&["render", "--detections", s(&det), "--images", s(&data), "--out-dir", s(&vis)]);
    if !recs.is_empty() {
        assert!(vis.join("synth_0000.png").exists());
    }
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let out = comicnet(&["anchors", "--annotations", s(&missing), "--out", s(&tmp.path().join("a.json"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("comicnet: error:"));

    let ann = synth(&tmp.path().join("data"), "1");
    let out = comicnet(&["train", "--annotations", s(&ann), "--input-size", "100", "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = comicnet(&["detect", "--checkpoint", s(&missing), "--obj-threshold", "1.5", "--out", "x.jsonl", "a.png"]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(tmp.path().join("bad.json"), "{ not json").unwrap();
    let out = comicnet(&["anchors", "--annotations", s(&tmp.path().join("bad.json")), "--out", s(&tmp.path().join("a.json"))]);
    assert_eq!(out.status.code(), Some(5));
}
