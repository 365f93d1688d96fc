//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! with its measurements; the process exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use comicnet_acceptance::{comicnet_binary, outcome, report, Outcome, PUBLISHED};

use comicnet::anchors::{kmeans_iou, AnchorSet, Scale};
use comicnet::data::splits::{split_counts, DEFAULT_RATIOS};
use comicnet::data::synth::generate_synthetic_dataset;
use comicnet::data::{make_splits, Split};
use comicnet::eval::{f_measure, match_to_ground_truth, IOU_MATCH_THRESHOLD};
use comicnet::geometry::{from_network_space, iou, to_network_space, BBox, ImageSpace, Label, LabeledBox};
use comicnet::loss::{encode_targets, ideal_heads};
use comicnet::network::{class_probabilities, sigmoid, DetectionHeads, ForwardOptions, HeadMode, Network, NetworkConfig};
use comicnet::nn::Tensor;
use comicnet::pipeline::prepare_sample;
use comicnet::postprocess::{decode, nms, Detection, NMS_IOU_THRESHOLD};
use comicnet::train::{train_with, TrainOptions, TrainSchedule};

/// Input side used for the two-head training comparison.
const TOY_INPUT: usize = 256;
const TOY_WIDTH: f64 = 0.0625;

fn head_shapes() -> Outcome {
    let cfg = NetworkConfig::default();
    let net = Network::<f32>::build(cfg.clone(), 0).unwrap();
    let heads = net.forward(&Tensor::zeros(1, 3, cfg.input_size, cfg.input_size)).unwrap();
    let shapes: Vec<_> = heads.grids.iter().map(|g| g.shape()).collect();
    let boxes = decode(&heads, &cfg.anchors, &cfg).unwrap().len();
    let pass = shapes == [(13, 13, 21), (26, 26, 21), (52, 52, 21)] && boxes == 10647;
    outcome(pass, format!("heads {shapes:?}, {boxes} decoded boxes"))
}

fn softmax_equals_sigmoid() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut disagree) = (0.0f64, 0usize);
    for _ in 0..100_000 {
        let (a, b) = (rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0));
        let s = class_probabilities(&[a, b], HeadMode::Softmax);
        let g = sigmoid(a - b);
        worst = worst.max((s[0] - g).abs());
        let soft_arg = usize::from(s[1] > s[0]);
        let sig_arg = usize::from(g < 0.5);
        disagree += usize::from(soft_arg != sig_arg && a != b);
    }
    outcome(worst < 1e-12 && disagree == 0, format!("max |diff| {worst:.2e}, argmax disagreements {disagree}"))
}

fn weighted_head_sum(heads: &DetectionHeads, weights: &DetectionHeads) -> f64 {
    heads.grids.iter().zip(&weights.grids).flat_map(|(h, w)| h.data.iter().zip(&w.data)).map(|(a, b)| a * b).sum()
}

/// Analytic gradient of a random linear functional of the heads against
/// central differences, batch statistics on.
fn gradient_check() -> Outcome {
    let cfg = NetworkConfig { input_size: 64, width_multiplier: 0.0625, ..Default::default() };
    let mut net = Network::<f64>::build(cfg.clone(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_vec(1, 3, 64, 64, (0..3 * 64 * 64).map(|_| rng.random_range(0.0..1.0)).collect());
    let mut w = DetectionHeads::zeros(&cfg, 1);
    for g in &mut w.grids {
        g.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let train = ForwardOptions { train: true, ablate_skip: None };
    let loss = |net: &Network<f64>| weighted_head_sum(&net.forward_with(&x, train).unwrap().heads(), &w);

    net.zero_grad();
    let trace = net.forward_with(&x, train).unwrap();
    net.backward(&trace, &w).unwrap();
    let sizes: Vec<usize> = net.params_mut().iter().map(|p| p.len()).collect();

    let eps = 1e-6;
    let samples = 120;
    let mut worst = 0.0f64;
    let mut ok = 0;
    for _ in 0..samples {
        let pi = rng.random_range(0..sizes.len());
        let j = rng.random_range(0..sizes[pi]);
        let (orig, analytic) = {
            let p = &net.params_mut()[pi];
            (p.value[j], p.grad[j])
        };
        net.params_mut()[pi].value[j] = orig + eps;
        let up = loss(&net);
        net.params_mut()[pi].value[j] = orig - eps;
        let down = loss(&net);
        net.params_mut()[pi].value[j] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
        ok += usize::from(rel < 1e-3);
    }
    outcome(ok == samples, format!("{ok}/{samples} parameters within 1e-3, worst relative error {worst:.2e}"))
}

fn coordinate_round_trip() -> Outcome {
    let cfg = NetworkConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut lost = 0;
    for _ in 0..1000 {
        let space = ImageSpace::new(rng.random_range(200..2400), rng.random_range(200..2400)).unwrap();
        let (iw, ih) = (f64::from(space.width), f64::from(space.height));
        let w = rng.random_range(0.02..0.9) * iw;
        let h = rng.random_range(0.02..0.9) * ih;
        let gt = BBox::new(rng.random_range(w / 2.0..iw - w / 2.0), rng.random_range(h / 2.0..ih - h / 2.0), w, h);
        let net_box = to_network_space(&gt, space);
        let targets = encode_targets(&[LabeledBox::truth(net_box, Label::Panel)], &cfg.anchors, &cfg);
        let heads = ideal_heads(std::slice::from_ref(&targets), &cfg, 15.0);
        let slot = &targets.slots[0];
        let dets = decode(&heads, &cfg.anchors, &cfg).unwrap();
        let Some(d) = dets
            .iter()
            .find(|d| d.slot.is_some_and(|s| s.scale == slot.scale && s.anchor == slot.anchor && s.gy == slot.gy && s.gx == slot.gx))
        else {
            lost += 1;
            continue;
        };
        let back = from_network_space(&d.bbox, space);
        let err = [back.cx - gt.cx, back.cy - gt.cy, back.w - gt.w, back.h - gt.h].iter().fold(0.0f64, |m, e| m.max(e.abs()));
        worst = worst.max(err);
    }
    outcome(worst < 1e-4 && lost == 0, format!("max error {worst:.2e} px, {lost} boxes without a responsible slot"))
}

fn random_detections(rng: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let x0 = rng.random_range(0.0..40.0);
            let y0 = rng.random_range(0.0..40.0);
            Detection {
                bbox: BBox::from_corners(x0, y0, x0 + rng.random_range(5.0..40.0), y0 + rng.random_range(5.0..40.0)),
                label: if rng.random_bool(0.5) { Label::Panel } else { Label::Character },
                objectness: rng.random_range(0.0..1.0),
                class_prob: rng.random_range(0.0..1.0),
                slot: None,
            }
        })
        .collect()
}

/// The unique subset in which a box is kept iff no kept, higher-scoring box of
/// its class overlaps it beyond the threshold, found by trying every subset.
fn nms_oracle(dets: &[Detection], t: f64) -> Vec<usize> {
    let n = dets.len();
    let beats = |i: usize, j: usize| {
        let (si, sj) = (dets[i].score(), dets[j].score());
        si > sj || (si == sj && i < j)
    };
    let overlap = |i: usize, j: usize| dets[i].label == dets[j].label && iou(&dets[i].bbox, &dets[j].bbox).unwrap() > t;
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let kept = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|j| {
            let suppressed = (0..n).any(|i| i != j && kept(i) && beats(i, j) && overlap(i, j));
            kept(j) != suppressed
        });
        if consistent {
            found.push((0..n).filter(|&i| kept(i)).collect::<Vec<_>>());
        }
    }
    assert_eq!(found.len(), 1, "the fixed point is unique");
    found.pop().unwrap()
}

fn key(d: &Detection) -> [u64; 4] {
    let (a, b, c, e) = d.bbox.corners();
    [a.to_bits(), b.to_bits(), c.to_bits(), e.to_bits()]
}

fn nms_and_matching() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut nms_bad, mut match_bad) = (0, 0);
    for _ in 0..10_000 {
        let n = rng.random_range(0..=6);
        let dets = random_detections(&mut rng, n);
        let mut want: Vec<_> = nms_oracle(&dets, NMS_IOU_THRESHOLD).iter().map(|&i| key(&dets[i])).collect();
        let mut got: Vec<_> = nms(&dets, NMS_IOU_THRESHOLD).iter().map(key).collect();
        want.sort();
        got.sort();
        nms_bad += usize::from(want != got);

        let n_gt = rng.random_range(0..=6);
        let gts: Vec<LabeledBox> = random_detections(&mut rng, n_gt).iter().map(|d| LabeledBox::truth(d.bbox, d.label)).collect();
        let m = match_to_ground_truth(&dets, &gts, IOU_MATCH_THRESHOLD);
        let mut used_d = vec![false; dets.len()];
        let mut used_g = vec![false; gts.len()];
        let mut ok = m.true_positives + m.false_positives == dets.len() && m.true_positives + m.false_negatives == gts.len();
        for p in &m.matched_pairs {
            ok &= !used_d[p.detection] && !used_g[p.ground_truth];
            used_d[p.detection] = true;
            used_g[p.ground_truth] = true;
            ok &= dets[p.detection].label == gts[p.ground_truth].label && p.iou > IOU_MATCH_THRESHOLD;
        }
        // Maximal: no unmatched pair could still be matched.
        for (di, d) in dets.iter().enumerate() {
            for (gi, g) in gts.iter().enumerate() {
                if !used_d[di] && !used_g[gi] && d.label == g.label {
                    ok &= iou(&d.bbox, &g.bbox).unwrap() <= IOU_MATCH_THRESHOLD;
                }
            }
        }
        match_bad += usize::from(!ok);
    }
    // IoU of exactly 0.80 is not a match; just above is.
    let gt = [LabeledBox::truth(BBox::from_corners(0.0, 0.0, 10.0, 10.0), Label::Panel)];
    let det = |x1: f64| Detection {
        bbox: BBox::from_corners(0.0, 0.0, x1, 10.0),
        label: Label::Panel,
        objectness: 0.9,
        class_prob: 0.9,
        slot: None,
    };
    let at = match_to_ground_truth(&[det(8.0)], &gt, IOU_MATCH_THRESHOLD);
    let above = match_to_ground_truth(&[det(8.0 + 1e-9)], &gt, IOU_MATCH_THRESHOLD);
    let boundary = iou(&det(8.0).bbox, &gt[0].bbox).unwrap() == 0.8 && at.true_positives == 0 && above.true_positives == 1;
    outcome(
        nms_bad == 0 && match_bad == 0 && boundary,
        format!("NMS mismatches {nms_bad}, matching violations {match_bad}, strict 0.80 boundary {boundary}"),
    )
}

fn published_f_measures() -> Outcome {
    let anchor = f_measure(97.0, 98.0);
    let mut off = Vec::new();
    for &(task, method, dataset, p, r, printed) in PUBLISHED {
        let f = f_measure(p, r);
        if (f - printed).abs() > 0.5 {
            off.push(format!("{task}/{method}/{dataset} prints {printed:.2}, computes {f:.2}"));
        }
    }
    let anchor_ok = (anchor - 97.49).abs() <= 0.01;
    let detail = format!(
        "F(97, 98) = {anchor:.4}; {}/{} rows within 0.5{}",
        PUBLISHED.len() - off.len(),
        PUBLISHED.len(),
        if off.is_empty() { String::new() } else { format!("; disagreeing: {}", off.join("; ")) }
    );
    outcome(anchor_ok && off.is_empty(), detail)
}

fn split_sizes() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (n, want) in [(980, (588, 196, 196)), (1400, (840, 280, 280)), (1750, (1050, 350, 350))] {
        let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        let m = make_splits("pages", &ids, DEFAULT_RATIOS, 1).unwrap();
        ok &= m.counts() == want && split_counts(n, DEFAULT_RATIOS) == want;
        let (a, b, c) = m.counts();
        parts.push(format!("{n} -> {a}/{b}/{c}"));
    }
    outcome(ok, parts.join(", "))
}

fn planted_anchor_modes() -> Outcome {
    let modes = [
        (20.0, 30.0),
        (45.0, 25.0),
        (35.0, 70.0),
        (90.0, 60.0),
        (60.0, 130.0),
        (150.0, 110.0),
        (110.0, 220.0),
        (260.0, 180.0),
        (330.0, 370.0),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut dims = Vec::new();
    for &(w, h) in &modes {
        for _ in 0..150 {
            dims.push((w * (1.0 + rng.random_range(-0.03..0.03)), h * (1.0 + rng.random_range(-0.03..0.03))));
        }
    }
    let centers = kmeans_iou(&dims, 9, 1).unwrap().centers;
    let mut expect: Vec<(f64, f64)> = modes.to_vec();
    expect.sort_by(|a, b| (b.0 * b.1).total_cmp(&(a.0 * a.1)));
    let worst = centers.iter().zip(&expect).map(|(c, e)| (c.w - e.0).abs().max((c.h - e.1).abs())).fold(0.0, f64::max);
    let sorted = centers.windows(2).all(|p| p[0].area() >= p[1].area());
    let set = AnchorSet::new(centers.clone()).unwrap();
    let coarse_largest = set.per_scale(Scale::P1) == &centers[..3];
    outcome(
        worst <= 2.0 && sorted && coarse_largest,
        format!("worst mode error {worst:.2} px, area-sorted {sorted}, largest three on 13x13 {coarse_largest}"),
    )
}

fn toy_head_comparison() -> Outcome {
    let pages = generate_synthetic_dataset(20, 9, (480, 640)).unwrap();
    let ids: Vec<String> = pages.iter().map(|p| p.image_id.clone()).collect();
    let manifest = make_splits("toy", &ids, DEFAULT_RATIOS, 9).unwrap();
    let anchors = AnchorSet::default_nine().scaled(TOY_INPUT as f64 / 416.0);
    let schedule = TrainSchedule::scaled(2000);
    let mut finals = Vec::new();
    let mut pass = true;
    let mut parts = Vec::new();
    for head in [HeadMode::Sigmoid, HeadMode::Softmax] {
        let cfg = NetworkConfig {
            input_size: TOY_INPUT,
            width_multiplier: TOY_WIDTH,
            head_mode: head,
            anchors: anchors.clone(),
            ..Default::default()
        };
        let set = |split: Split| -> Vec<_> {
            pages.iter().filter(|p| manifest.pages(split).contains(&p.image_id)).map(|p| prepare_sample(p, &cfg).unwrap()).collect()
        };
        let (train_set, val_set) = (set(Split::Train), set(Split::Val));
        let mut net = Network::<f32>::build(cfg.clone(), 9).unwrap();
        let history = train_with(&mut net, &train_set, &val_set, &schedule, TrainOptions::seeded(9)).unwrap();
        let (first, last) = (history.initial_train_loss(100), history.final_train_loss(100));
        let val = history.final_val_loss().unwrap();
        pass &= last < 0.1 * first;
        finals.push(val);
        parts.push(format!("{head}: train {first:.3} -> {last:.4}, validation {val:.4}"));
    }
    pass &= finals[0] <= finals[1];
    outcome(pass, parts.join("; "))
}

fn run_cli(args: &[&str]) -> String {
    let out = Command::new(comicnet_binary()).args(args).output().unwrap();
    assert!(out.status.success(), "comicnet {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn end_to_end(dir: &Path) -> Outcome {
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    let data = p("pages");
    let ann = p("pages/annotations.json");
    run_cli(&["synth", "--out", &data, "--pages", "10", "--seed", "21"]);
    run_cli(&["anchors", "--annotations", &ann, "--out", &p("anchors.json")]);
    run_cli(&[
        "train",
        "--annotations",
        &ann,
        "--limit",
        "1",
        "--no-split",
        "--iterations",
        "500",
        "--width-multiplier",
        "0.0625",
        "--anchors",
        &p("anchors.json"),
        "--out",
        &p("run"),
    ]);
    run_cli(&["detect", "--checkpoint", &p("run/model.ckpt"), "--annotations", &ann, "--limit", "1", "--out", &p("det.jsonl")]);
    run_cli(&["eval", "--detections", &p("det.jsonl"), "--annotations", &ann, "--limit", "1", "--json", &p("report.json")]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("report.json")).unwrap()).unwrap();
    let recall = report["overall"]["recall"].as_f64().unwrap();
    let precision = report["overall"]["precision"].as_f64().unwrap();
    outcome(recall >= 0.9, format!("recall {:.1}%, precision {:.1}% at objectness 0.70 / IoU 0.80", 100.0 * recall, 100.0 * precision))
}

fn main() {
    let secs = Duration::from_secs;
    let dir = tempfile::tempdir().unwrap();
    let results = [
        report(1, "head shapes and box count", secs(10), head_shapes),
        report(2, "two-class softmax equals sigmoid of the difference", secs(5), softmax_equals_sigmoid),
        report(3, "gradient check", secs(120), gradient_check),
        report(4, "coordinate round trip", secs(30), coordinate_round_trip),
        report(5, "NMS oracle and matching invariants", secs(60), nms_and_matching),
        report(6, "published F-measures", secs(1), published_f_measures),
        report(7, "dataset splits", secs(10), split_sizes),
        report(8, "anchor clustering on planted modes", secs(10), planted_anchor_modes),
        report(9, "sigmoid versus softmax head training", secs(900), toy_head_comparison),
        report(10, "end-to-end overfit smoke test", secs(600), || end_to_end(dir.path())),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} acceptance criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
